#include "selflab/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "selflab/sampling_bank.hpp"

namespace selflab {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t image_seed(std::uint64_t seed, std::size_t index) {
    return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1));
}

std::size_t class_at_quantile(const std::vector<double>& cumulative, double x) {
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), x);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
}

// Voronoi partition of the image into regions whose classes follow the prior. Cells
// are visited in shuffled order and each takes the class found at the midpoint of its
// cumulative-area interval (systematic sampling with a random offset), so every image
// matches the prior up to one cell's area.
HardLabelMap draw_layout(const WorldSpec& spec, Rng& rng) {
    const std::size_t k = std::max<std::size_t>(1, spec.regions_per_image);
    std::uniform_real_distribution<double> ux(0.0, spec.width), uy(0.0, spec.height);
    std::vector<double> sx(k), sy(k);
    for (std::size_t i = 0; i < k; ++i) {
        sx[i] = ux(rng);
        sy[i] = uy(rng);
    }
    std::vector<std::uint32_t> cell(static_cast<std::size_t>(spec.height) * spec.width);
    std::vector<std::size_t> area(k, 0);
    for (std::uint32_t y = 0; y < spec.height; ++y) {
        for (std::uint32_t x = 0; x < spec.width; ++x) {
            std::uint32_t best = 0;
            double best_d = INFINITY;
            for (std::uint32_t i = 0; i < k; ++i) {
                const double dx = x + 0.5 - sx[i], dy = y + 0.5 - sy[i];
                const double d = dx * dx + dy * dy;
                if (d < best_d) {
                    best_d = d;
                    best = i;
                }
            }
            cell[static_cast<std::size_t>(y) * spec.width + x] = best;
            ++area[best];
        }
    }
    std::vector<double> cumulative(spec.classes);
    std::partial_sum(spec.class_prior.begin(), spec.class_prior.end(), cumulative.begin());
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const double offset = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double total = static_cast<double>(cell.size());
    std::vector<std::uint16_t> cell_class(k, 0);
    double covered = 0.0;
    for (auto i : order) {
        double mid = (covered + 0.5 * static_cast<double>(area[i])) / total + offset;
        mid -= std::floor(mid);
        cell_class[i] = static_cast<std::uint16_t>(class_at_quantile(cumulative, mid));
        covered += static_cast<double>(area[i]);
    }
    HardLabelMap labels(spec.height, spec.width);
    for (std::size_t p = 0; p < cell.size(); ++p) labels.data[p] = cell_class[cell[p]];
    return labels;
}

SynthImage draw_image(const WorldSpec& spec, std::size_t index) {
    Rng rng(image_seed(spec.seed, index));
    SynthImage img;
    img.truth = draw_layout(spec, rng);
    const std::size_t c = spec.classes, d = spec.dim, n = img.truth.pixel_count();
    img.features = Tensor({spec.height, spec.width, static_cast<std::uint32_t>(d)});
    img.p_st = Tensor({spec.height, spec.width, static_cast<std::uint32_t>(c)});

    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> any_class(0, c - 1);
    std::vector<double> z(d), logits(c);
    for (std::size_t p = 0; p < n; ++p) {
        const std::size_t t = img.truth.data[p];
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            z[k] = spec.means(t, k) + (spec.noise_sigma > 0.0 ? spec.noise_sigma * gauss(rng) : 0.0);
            sq += z[k] * z[k];
        }
        const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const float f = static_cast<float>(z[k] * inv);
            img.features.data[p * d + k] = f;
            z[k] = f;
        }

        for (std::size_t j = 0; j < c; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += spec.means(j, k) * z[k];
            logits[j] = spec.scorer_gain * dot + (spec.scorer_noise > 0.0 ? spec.scorer_noise * gauss(rng) : 0.0);
        }
        std::size_t believed = t;
        if (spec.label_noise > 0.0 && unit(rng) < spec.label_noise) believed = any_class(rng);
        const std::size_t top = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        if (top != believed) std::swap(logits[top], logits[believed]);

        const double mx = logits[believed];
        double total = 0.0;
        for (double& l : logits) {
            l = std::exp(l - mx);
            total += l;
        }
        for (std::size_t j = 0; j < c; ++j) img.p_st.data[p * c + j] = static_cast<float>(logits[j] / total);
    }
    return img;
}

}  // namespace

void WorldSpec::validate() const {
    if (classes < 2 || classes > 65534) throw std::invalid_argument("world needs between 2 and 65534 classes");
    if (dim == 0) throw std::invalid_argument("world feature dimension must be positive");
    if (class_prior.size() != classes) throw std::invalid_argument("class prior length must equal the class count");
    double s = 0.0;
    for (double p : class_prior) {
        if (!(p >= 0.0)) throw std::invalid_argument("class prior has a negative entry");
        s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("class prior must sum to 1");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw std::invalid_argument("noise_sigma must be >= 0");
    if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw std::invalid_argument("label_noise must lie in [0, 1]");
    if (!(scorer_noise >= 0.0)) throw std::invalid_argument("scorer_noise must be >= 0");
    if (height == 0 || width == 0 || n_images == 0) throw std::invalid_argument("world must contain pixels");
    if (regions_per_image == 0) throw std::invalid_argument("regions_per_image must be positive");
    if (!(max_mean_cosine > -1.0 && max_mean_cosine <= 1.0))
        throw std::invalid_argument("max_mean_cosine must lie in (-1, 1]");
    if (!means.empty()) {
        if (means.rows() != classes || means.cols() != dim) throw std::invalid_argument("means must be C x D");
        for (std::size_t a = 0; a < classes; ++a)
            for (std::size_t b = a + 1; b < classes; ++b)
                if (std::equal(means.row(a).begin(), means.row(a).end(), means.row(b).begin()))
                    throw std::invalid_argument("class means must be pairwise distinct");
    }
}

void to_json(nlohmann::json& j, const WorldSpec& spec) {
    j = nlohmann::json{{"classes", spec.classes},
                       {"dim", spec.dim},
                       {"class_prior", spec.class_prior},
                       {"max_mean_cosine", spec.max_mean_cosine},
                       {"noise_sigma", spec.noise_sigma},
                       {"label_noise", spec.label_noise},
                       {"height", spec.height},
                       {"width", spec.width},
                       {"n_images", spec.n_images},
                       {"regions_per_image", spec.regions_per_image},
                       {"scorer_gain", spec.scorer_gain},
                       {"scorer_noise", spec.scorer_noise},
                       {"seed", spec.seed}};
    if (!spec.means.empty()) j["means"] = spec.means.values();
}

void from_json(const nlohmann::json& j, WorldSpec& spec) {
    WorldSpec d;
    spec.classes = j.value("classes", d.classes);
    spec.dim = j.value("dim", d.dim);
    spec.class_prior = j.value("class_prior", d.class_prior);
    spec.max_mean_cosine = j.value("max_mean_cosine", d.max_mean_cosine);
    spec.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    spec.label_noise = j.value("label_noise", d.label_noise);
    spec.height = j.value("height", d.height);
    spec.width = j.value("width", d.width);
    spec.n_images = j.value("n_images", d.n_images);
    spec.regions_per_image = j.value("regions_per_image", d.regions_per_image);
    spec.scorer_gain = j.value("scorer_gain", d.scorer_gain);
    spec.scorer_noise = j.value("scorer_noise", d.scorer_noise);
    spec.seed = j.value("seed", d.seed);
    if (j.contains("means")) spec.means = Matrix(spec.classes, spec.dim, j.at("means").get<std::vector<double>>());
}

Matrix draw_class_means(std::size_t classes, std::size_t dim, std::uint64_t seed, double max_cosine) {
    constexpr int kAttemptsPerClass = 10000;
    Rng rng(splitmix64(seed));
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix means(classes, dim);
    for (std::size_t c = 0; c < classes; ++c) {
        int attempts = 0;
        for (;;) {
            if (++attempts > kAttemptsPerClass)
                throw std::invalid_argument("cannot place " + std::to_string(classes) + " means in " +
                                            std::to_string(dim) + " dimensions with cosine <= " +
                                            std::to_string(max_cosine));
            double sq = 0.0;
            for (double& x : means.row(c)) {
                x = gauss(rng);
                sq += x * x;
            }
            if (sq == 0.0) continue;
            const double inv = 1.0 / std::sqrt(sq);
            // Stored at float precision so features written to disk reproduce them exactly.
            for (double& x : means.row(c)) x = static_cast<float>(x * inv);
            bool separated = true;
            for (std::size_t prev = 0; prev < c && separated; ++prev) {
                double dot = 0.0;
                for (std::size_t k = 0; k < dim; ++k) dot += means(c, k) * means(prev, k);
                separated = dot <= max_cosine;
            }
            if (separated) break;
        }
    }
    return means;
}

std::vector<double> World::truth_distribution() const {
    std::vector<std::size_t> totals(spec.classes, 0);
    std::size_t all = 0;
    for (const auto& img : images) {
        const auto counts = class_counts(img.truth, spec.classes);
        for (std::size_t c = 0; c < spec.classes; ++c) {
            totals[c] += counts[c];
            all += counts[c];
        }
    }
    std::vector<double> out(spec.classes);
    for (std::size_t c = 0; c < spec.classes; ++c) out[c] = static_cast<double>(totals[c]) / static_cast<double>(all);
    return out;
}

World generate(const WorldSpec& spec) {
    World world{spec, {}};
    if (world.spec.means.empty())
        world.spec.means = draw_class_means(spec.classes, spec.dim, spec.seed, spec.max_mean_cosine);
    world.spec.validate();
    world.images.reserve(spec.n_images);
    for (std::size_t n = 0; n < spec.n_images; ++n) world.images.push_back(draw_image(world.spec, n));
    return world;
}

double oracle_accuracy(std::span<const HardLabelMap> pred, std::span<const HardLabelMap> truth, std::size_t num_classes) {
    if (pred.size() != truth.size()) throw std::invalid_argument("prediction and truth lists differ in length");
    if (pred.empty()) throw std::invalid_argument("accuracy of an empty corpus is undefined");
    std::size_t correct = 0, counted = 0;
    for (std::size_t n = 0; n < pred.size(); ++n) {
        if (pred[n].data.size() != truth[n].data.size()) throw std::invalid_argument("map sizes differ");
        for (std::size_t p = 0; p < truth[n].data.size(); ++p) {
            if (truth[n].data[p] >= num_classes) continue;
            ++counted;
            if (pred[n].data[p] == truth[n].data[p]) ++correct;
        }
    }
    if (counted == 0) throw std::invalid_argument("no labeled truth pixels");
    return static_cast<double>(correct) / static_cast<double>(counted);
}

HardLabelMap nearest_mean_labels(const Tensor& features, const Matrix& means) {
    const std::size_t d = features.inner_extent();
    if (d != means.cols()) throw std::invalid_argument("feature dimension does not match means");
    HardLabelMap out(features.shape[0], features.shape[1]);
    for (std::size_t p = 0; p < out.pixel_count(); ++p) {
        std::size_t best = 0;
        double best_d = INFINITY;
        for (std::size_t c = 0; c < means.rows(); ++c) {
            double dist = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = features.data[p * d + k] - means(c, k);
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        out.data[p] = static_cast<std::uint16_t>(best);
    }
    return out;
}

std::string image_stem(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03zu", index);
    return buf;
}

void write_world(const std::filesystem::path& dir, const World& world) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "features");
    fs::create_directories(dir / "pst");
    fs::create_directories(dir / "truth");
    nlohmann::json files = nlohmann::json::array();
    for (std::size_t n = 0; n < world.images.size(); ++n) {
        const std::string stem = image_stem(n);
        const std::string f = "features/" + stem + ".slt1", p = "pst/" + stem + ".slt1", t = "truth/" + stem + ".sll1";
        save_tensor(dir / f, world.images[n].features);
        save_tensor(dir / p, world.images[n].p_st);
        save_labels(dir / t, world.images[n].truth);
        files.push_back({{"features", f}, {"pst", p}, {"truth", t}});
    }
    nlohmann::json manifest{{"format", "selflab-corpus-1"},
                            {"classes", world.spec.classes},
                            {"dim", world.spec.dim},
                            {"height", world.spec.height},
                            {"width", world.spec.width},
                            {"spec", world.spec},
                            {"files", files}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw TensorIoError(TensorIoErrc::io, "cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

}  // namespace selflab
