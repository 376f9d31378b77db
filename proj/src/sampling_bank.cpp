#include "selflab/sampling_bank.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace selflab {

namespace {

bool is_zero_row(std::span<const double> row) {
    return std::all_of(row.begin(), row.end(), [](double x) { return x == 0.0; });
}

// Moves `count` uniformly chosen elements of pool to its front (partial Fisher-Yates).
void partial_shuffle(std::vector<std::uint32_t>& pool, std::size_t count, Rng& rng) {
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
}

}  // namespace

std::vector<std::size_t> class_counts(const HardLabelMap& labels, std::size_t num_classes) {
    std::vector<std::size_t> counts(num_classes, 0);
    for (auto v : labels.data) {
        if (v > num_classes) throw std::invalid_argument("label exceeds class count");
        if (v < num_classes) ++counts[v];
    }
    return counts;
}

std::vector<double> class_distribution(const HardLabelMap& labels, std::size_t num_classes) {
    const auto counts = class_counts(labels, num_classes);
    const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    if (total == 0) throw std::invalid_argument("class distribution of an all-IGNORE label map is undefined");
    std::vector<double> delta(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c)
        delta[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
    return delta;
}

SampleSet balanced_sample(const Matrix& features, const HardLabelMap& labels, std::size_t num_classes,
                          std::size_t samples, std::uint32_t image_id, Rng& rng) {
    if (features.rows() != labels.pixel_count())
        throw std::invalid_argument("feature rows do not match label pixel count");
    const auto counts = class_counts(labels, num_classes);
    const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    if (samples > total)
        throw std::invalid_argument("cannot draw " + std::to_string(samples) + " samples from " +
                                    std::to_string(total) + " labeled pixels");

    std::vector<std::vector<std::uint32_t>> pools(num_classes);
    for (std::uint32_t i = 0; i < labels.pixel_count(); ++i) {
        const auto c = labels.data[i];
        if (c < num_classes && !is_zero_row(features.row(i))) pools[c].push_back(i);
    }

    SampleSet out;
    out.per_class_quota.assign(num_classes, 0);
    std::vector<std::uint32_t> chosen;
    chosen.reserve(samples);
    std::vector<std::uint32_t> leftover;
    for (std::size_t c = 0; c < num_classes; ++c) {
        // floor(M * count_c / total) in exact integer arithmetic
        const std::size_t quota = std::min(samples * counts[c] / total, pools[c].size());
        partial_shuffle(pools[c], quota, rng);
        chosen.insert(chosen.end(), pools[c].begin(), pools[c].begin() + static_cast<std::ptrdiff_t>(quota));
        leftover.insert(leftover.end(), pools[c].begin() + static_cast<std::ptrdiff_t>(quota), pools[c].end());
        out.per_class_quota[c] = quota;
    }
    const std::size_t rest = samples - chosen.size();
    if (rest > leftover.size()) throw std::invalid_argument("not enough pixels with nonzero features to sample");
    partial_shuffle(leftover, rest, rng);
    chosen.insert(chosen.end(), leftover.begin(), leftover.begin() + static_cast<std::ptrdiff_t>(rest));
    out.remainder = rest;

    out.features = Matrix(samples, features.cols());
    out.source_indices.reserve(samples);
    out.class_hints.reserve(samples);
    for (std::size_t m = 0; m < chosen.size(); ++m) {
        const auto src = features.row(chosen[m]);
        std::copy(src.begin(), src.end(), out.features.row(m).begin());
        out.source_indices.push_back({image_id, chosen[m]});
        out.class_hints.push_back(labels.data[chosen[m]]);
    }
    return out;
}

FeatureBank::FeatureBank(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), storage_(capacity, dim), hint_storage_(capacity, 0) {
    if (capacity == 0) throw std::invalid_argument("feature bank capacity must be positive");
}

void FeatureBank::push(std::span<const double> feature, std::uint16_t hint) {
    if (feature.size() != dim_) throw std::invalid_argument("feature dimension does not match bank");
    std::size_t dst;
    if (size_ == capacity_) {
        dst = head_;
        head_ = (head_ + 1) % capacity_;
        ++total_evicted_;
    } else {
        dst = slot(size_);
        ++size_;
    }
    std::copy(feature.begin(), feature.end(), storage_.row(dst).begin());
    hint_storage_[dst] = hint;
    ++total_pushed_;
}

void FeatureBank::push_batch(const SampleSet& samples) {
    for (std::size_t m = 0; m < samples.size(); ++m) push(samples.features.row(m), samples.class_hints[m]);
}

Matrix FeatureBank::features() const {
    Matrix out(size_, dim_);
    for (std::size_t a = 0; a < size_; ++a) {
        const auto src = storage_.row(slot(a));
        std::copy(src.begin(), src.end(), out.row(a).begin());
    }
    return out;
}

std::vector<std::uint16_t> FeatureBank::hints() const {
    std::vector<std::uint16_t> out(size_);
    for (std::size_t a = 0; a < size_; ++a) out[a] = hint_storage_[slot(a)];
    return out;
}

std::vector<std::size_t> FeatureBank::hint_histogram(std::size_t num_classes) const {
    std::vector<std::size_t> hist(num_classes, 0);
    for (std::size_t a = 0; a < size_; ++a) {
        const auto h = hint_storage_[slot(a)];
        if (h < num_classes) ++hist[h];
    }
    return hist;
}

void FeatureBank::save(const std::filesystem::path& features_path, const std::filesystem::path& meta_path) const {
    const Matrix f = features();
    std::vector<float> data(f.values().begin(), f.values().end());
    // A rank-2 tensor with zero rows is still a valid SLT1 file.
    save_tensor(features_path, Tensor({static_cast<std::uint32_t>(size_), static_cast<std::uint32_t>(dim_)},
                                      std::move(data)));
    nlohmann::json meta{{"capacity", capacity_},         {"size", size_},
                        {"dim", dim_},                   {"total_pushed", total_pushed_},
                        {"total_evicted", total_evicted_}, {"class_hints", hints()}};
    std::ofstream out(meta_path, std::ios::trunc);
    if (!out) throw TensorIoError(TensorIoErrc::io, "cannot open " + meta_path.string() + " for writing");
    out << meta.dump() << '\n';
}

FeatureBank FeatureBank::load(const std::filesystem::path& features_path, const std::filesystem::path& meta_path) {
    std::ifstream in(meta_path);
    if (!in) throw TensorIoError(TensorIoErrc::io, "cannot open " + meta_path.string());
    const auto meta = nlohmann::json::parse(in);
    const Tensor t = load_tensor(features_path);
    const auto size = meta.at("size").get<std::size_t>();
    const auto dim = meta.at("dim").get<std::size_t>();
    const auto hints = meta.at("class_hints").get<std::vector<std::uint16_t>>();
    if (t.rank() != 2 || t.shape[0] != size || t.shape[1] != dim || hints.size() != size)
        throw TensorIoError(TensorIoErrc::size_mismatch, "bank checkpoint metadata disagrees with its feature file");
    FeatureBank bank(meta.at("capacity").get<std::size_t>(), dim);
    if (size > bank.capacity_) throw TensorIoError(TensorIoErrc::size_mismatch, "bank checkpoint exceeds capacity");
    const Matrix f = to_matrix(t);
    for (std::size_t a = 0; a < size; ++a) bank.push(f.row(a), hints[a]);
    bank.total_pushed_ = meta.at("total_pushed").get<std::uint64_t>();
    bank.total_evicted_ = meta.at("total_evicted").get<std::uint64_t>();
    return bank;
}

AugmentedBatch augment(const SampleSet& current, const FeatureBank& bank) {
    if (bank.dim() != current.features.cols())
        throw std::invalid_argument("bank dimension does not match the current batch");
    const std::size_t m = current.size(), d = current.features.cols();
    AugmentedBatch out{Matrix(m + bank.size(), d), 0, m};
    std::copy(current.features.values().begin(), current.features.values().end(), out.features.values().begin());
    const Matrix stored = bank.features();
    std::copy(stored.values().begin(), stored.values().end(),
              out.features.values().begin() + static_cast<std::ptrdiff_t>(m * d));
    return out;
}

}  // namespace selflab
