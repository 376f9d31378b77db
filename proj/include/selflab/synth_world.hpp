#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "selflab/matrix.hpp"
#include "selflab/tensor_io.hpp"

namespace selflab {

/// Parameters of the synthetic segmentation world. Images are Voronoi partitions
/// whose cells carry classes drawn against `class_prior`; pixel features are noisy
/// unit vectors around per-class means; P_ST comes from a corrupted linear scorer.
struct WorldSpec {
    std::size_t classes = 5;
    std::size_t dim = 16;
    std::vector<double> class_prior{0.52, 0.24, 0.12, 0.08, 0.04};
    /// C x D unit class means. Drawn from the seed when left empty.
    Matrix means;
    /// Drawn means are rejected until every pairwise cosine is at most this.
    double max_mean_cosine = 0.25;
    double noise_sigma = 0.15;
    /// Probability that the fabricated classifier's top class is replaced by a uniformly drawn class.
    double label_noise = 0.375;
    std::uint32_t height = 64;
    std::uint32_t width = 64;
    std::size_t n_images = 40;
    std::size_t regions_per_image = 48;
    /// Logit scale of the fabricated scorer, gain * <mean_c, z>.
    double scorer_gain = 4.0;
    /// Std of Gaussian noise added to every logit of the fabricated scorer.
    double scorer_noise = 0.5;
    std::uint64_t seed = 7;

    /// Throws std::invalid_argument on an inconsistent spec.
    void validate() const;
};

void to_json(nlohmann::json& j, const WorldSpec& spec);
void from_json(const nlohmann::json& j, WorldSpec& spec);

struct SynthImage {
    Tensor features;     // H x W x D, unit rows
    HardLabelMap truth;  // H x W
    Tensor p_st;         // H x W x C
};

struct World {
    WorldSpec spec;  // with means filled in
    std::vector<SynthImage> images;

    std::vector<double> truth_distribution() const;
};

/// Deterministic per seed; image n uses its own derived stream.
World generate(const WorldSpec& spec);

/// Unit class means drawn from the seed with every pairwise cosine at most max_cosine.
/// Throws std::invalid_argument when no such set turns up within the attempt budget.
Matrix draw_class_means(std::size_t classes, std::size_t dim, std::uint64_t seed, double max_cosine = 1.0);

/// Micro-averaged pixel accuracy over every non-IGNORE truth pixel.
double oracle_accuracy(std::span<const HardLabelMap> pred, std::span<const HardLabelMap> truth, std::size_t num_classes);

/// Nearest-class-mean labels of unit features (H x W x D).
HardLabelMap nearest_mean_labels(const Tensor& features, const Matrix& means);

/// Writes features/NNN.slt1, pst/NNN.slt1, truth/NNN.sll1 and manifest.json under dir.
void write_world(const std::filesystem::path& dir, const World& world);

std::string image_stem(std::size_t index);

}  // namespace selflab
