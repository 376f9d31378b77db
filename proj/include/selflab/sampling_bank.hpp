#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "selflab/matrix.hpp"
#include "selflab/tensor_io.hpp"

namespace selflab {

using Rng = std::mt19937_64;

/// Per-image class frequencies over non-IGNORE pixels. Throws if every pixel is IGNORE.
std::vector<double> class_distribution(const HardLabelMap& labels, std::size_t num_classes);

/// Non-IGNORE pixel counts per class.
std::vector<std::size_t> class_counts(const HardLabelMap& labels, std::size_t num_classes);

struct SourceIndex {
    std::uint32_t image = 0;
    std::uint32_t pixel = 0;
    bool operator==(const SourceIndex&) const = default;
};

struct SampleSet {
    Matrix features;  // M x D
    std::vector<SourceIndex> source_indices;
    std::vector<std::uint16_t> class_hints;
    /// Draws made per class by the proportional pass, floor(M * delta_c).
    std::vector<std::size_t> per_class_quota;
    /// Draws made by the remainder pass.
    std::size_t remainder = 0;

    std::size_t size() const { return source_indices.size(); }
};

/// Class-balanced draw of M pixels without replacement. Class c contributes
/// floor(M * delta_c) pixels; the rest come uniformly from the remaining non-IGNORE
/// pixels. Pixels with all-zero features are never drawn.
SampleSet balanced_sample(const Matrix& features, const HardLabelMap& labels, std::size_t num_classes,
                          std::size_t samples, std::uint32_t image_id, Rng& rng);

/// Fixed-capacity FIFO queue of unit features with their class hints.
class FeatureBank {
 public:
    FeatureBank(std::size_t capacity, std::size_t dim);

    std::size_t capacity() const { return capacity_; }
    std::size_t dim() const { return dim_; }
    std::size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }
    std::uint64_t total_pushed() const { return total_pushed_; }
    std::uint64_t total_evicted() const { return total_evicted_; }

    /// Appends every sample, evicting the oldest entries beyond capacity.
    void push_batch(const SampleSet& samples);
    void push(std::span<const double> feature, std::uint16_t hint);

    /// Features ordered oldest to newest.
    Matrix features() const;
    std::vector<std::uint16_t> hints() const;
    std::vector<std::size_t> hint_histogram(std::size_t num_classes) const;

    void save(const std::filesystem::path& features_path, const std::filesystem::path& meta_path) const;
    static FeatureBank load(const std::filesystem::path& features_path, const std::filesystem::path& meta_path);

 private:
    std::size_t slot(std::size_t age) const { return (head_ + age) % capacity_; }

    std::size_t capacity_;
    std::size_t dim_;
    Matrix storage_;
    std::vector<std::uint16_t> hint_storage_;
    std::size_t head_ = 0;  // oldest entry
    std::size_t size_ = 0;
    std::uint64_t total_pushed_ = 0;
    std::uint64_t total_evicted_ = 0;
};

struct AugmentedBatch {
    Matrix features;  // (M + |bank|) x D, current batch first
    std::size_t current_first = 0;
    std::size_t current_count = 0;
};

AugmentedBatch augment(const SampleSet& current, const FeatureBank& bank);

}  // namespace selflab
