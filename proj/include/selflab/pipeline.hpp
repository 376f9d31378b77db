#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "selflab/matrix.hpp"
#include "selflab/ot_solver.hpp"
#include "selflab/rectify_metrics.hpp"
#include "selflab/sampling_bank.hpp"
#include "selflab/sl_head.hpp"
#include "selflab/tensor_io.hpp"

namespace selflab {

struct World;

enum class SampleHints {
    rectified,  // current rectified labels, hard P_ST before an image's first visit
    pseudo,     // hard P_ST labels throughout
};

struct PipelineConfig {
    double epsilon = 0.05;
    double tau = 0.08;
    double lambda1 = 0.1;
    double lambda2 = 0.0;
    std::size_t samples_per_image = 512;
    std::size_t bank_capacity = 65536;
    double head_momentum = 0.999;
    double delta_alpha = 0.99;
    double marginal_floor = 1e-4;
    std::size_t epochs = 5;
    std::uint64_t seed = 7;

    double learning_rate = 5e-4;
    double lr_decay_power = 0.9;
    double weight_decay = 2e-4;
    double sgd_momentum = 0.9;

    std::size_t sinkhorn_max_iters = 1000;
    double sinkhorn_tol = 1e-6;
    SinkhornMethod sinkhorn_method = SinkhornMethod::log_domain;
    /// Non-converged Sinkhorn solves tolerated before the run aborts.
    std::size_t max_sinkhorn_failures = 10;

    Reduction loss_reduction = Reduction::mean;
    bool equal_partition = false;
    SampleHints sample_hints = SampleHints::rectified;

    std::string data_dir;
    std::string out_dir;

    /// Throws std::invalid_argument when a field is out of range.
    void validate() const;
};

/// Unknown keys are rejected; missing keys keep their defaults.
void to_json(nlohmann::json& j, const PipelineConfig& cfg);
void from_json(const nlohmann::json& j, PipelineConfig& cfg);

struct CorpusImage {
    std::string name;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    Matrix features;  // (H*W) x D, unit rows
    Tensor p_st;      // H x W x C
    std::optional<HardLabelMap> truth;
    std::size_t zero_feature_rows = 0;
};

struct Corpus {
    std::size_t classes = 0;
    std::size_t dim = 0;
    std::vector<CorpusImage> images;

    bool has_truth() const;
    /// Throws std::invalid_argument if C or D differ between images or maps disagree in shape.
    void validate() const;
};

/// Normalizes features and checks every map.
Corpus corpus_from_world(const World& world);

struct LoadedCorpus {
    Corpus corpus;
    std::vector<std::filesystem::path> input_files;
};

/// Reads a directory written by write_world (manifest.json plus SLT1/SLL1 files).
LoadedCorpus load_corpus(const std::filesystem::path& dir);

struct IterationReport {
    std::size_t epoch = 0;
    std::size_t step = 0;
    std::size_t image = 0;
    double l_sl = 0.0;
    double l_seg_t = 0.0;
    double l_total = 0.0;
    std::size_t sinkhorn_iterations = 0;
    bool sinkhorn_converged = false;
    double marginal_error = 0.0;
    std::size_t bank_size = 0;
    /// Rectified-label accuracy against truth, when truth is known.
    std::optional<double> accuracy;
    /// Pixels wrong under argmax P_ST but right after rectification, when truth is known.
    std::optional<std::size_t> corrected_pixels;
    std::vector<double> delta_pseudo;
};

void to_json(nlohmann::json& j, const IterationReport& r);

struct PipelineResult {
    std::vector<HardLabelMap> labels;
    HeadWeights head;
    HeadWeights momentum_head;
    std::vector<IterationReport> reports;
    /// delta_pseudo at initialization, then after every epoch.
    std::vector<std::vector<double>> delta_history;
    FeatureBank bank{1, 1};
    std::size_t sinkhorn_failures = 0;
    std::vector<std::size_t> empty_prototype_classes;
};

class SinkhornBudgetExceeded : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

using ReportSink = std::function<void(const IterationReport&)>;

/// Online self-labeling loop over the corpus. Deterministic per cfg.seed.
PipelineResult run_pipeline(const PipelineConfig& cfg, const Corpus& corpus, const ReportSink& sink = {});

/// Worker count for per-pixel passes: hardware concurrency capped by SELFLAB_THREADS.
std::size_t worker_count();

/// Column-stacked C x N probabilities reshaped to an H x W x C map.
Tensor to_prob_map(const Matrix& columns, std::uint32_t height, std::uint32_t width);

}  // namespace selflab
