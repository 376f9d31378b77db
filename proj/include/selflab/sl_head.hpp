#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "selflab/matrix.hpp"
#include "selflab/tensor_io.hpp"

namespace selflab {

/// Linear self-labeling head without bias: scores = W z, one weight row per class.
struct HeadWeights {
    Matrix weights;  // C x D
    std::uint64_t version = 0;

    std::size_t classes() const { return weights.rows(); }
    std::size_t dim() const { return weights.cols(); }
};

struct TrainConfig {
    double tau = 0.08;
    double learning_rate = 5e-4;
    double lr_decay_power = 0.9;
    /// K in lr * (1 - k/K)^power. Zero disables the schedule.
    std::size_t total_steps = 0;
    double weight_decay = 2e-4;
    double momentum = 0.9;
};

struct PrototypeInit {
    HeadWeights head;
    std::vector<std::size_t> class_counts;
    /// Classes with no labeled pixels; their rows are zero.
    std::vector<std::size_t> empty_classes;
};

/// Row c becomes the mean of every feature hard-labeled c across the corpus.
/// `features[n]` is the (H*W) x D unit-feature matrix of image n; IGNORE pixels are skipped.
PrototypeInit init_from_prototypes(std::span<const Matrix> features, std::span<const HardLabelMap> labels,
                                   std::size_t num_classes);

struct HeadOutput {
    Matrix scores;  // C x N raw W z
    Matrix probs;   // C x N, softmax of scores / tau per column
};

HeadOutput forward(const HeadWeights& w, const Matrix& features, double tau);

/// Column-wise softmax of scores / tau, log-sum-exp stabilized.
Matrix softmax_columns(const Matrix& scores, double tau);

struct LossAndGrad {
    double loss = 0.0;
    Matrix grad;  // C x D
};

/// Mean cross-entropy -(1/M) sum_m sum_c q_mc log p_mc against fixed targets (C x M
/// columns on the simplex), and its exact gradient with respect to the weights.
LossAndGrad sl_loss_and_grad(const HeadWeights& w, const Matrix& features, const Matrix& targets, double tau);

/// Momentum buffer carried between SGD steps.
struct SgdState {
    Matrix velocity;
    bool initialized = false;
};

double scheduled_learning_rate(const TrainConfig& cfg, std::size_t step_index);

/// One SGD-with-momentum step: g' = g + wd w; v = mu v + g' (v = g' on the first step);
/// w -= lr_k v with lr_k the polynomially decayed rate at step_index.
void sgd_step(HeadWeights& w, const Matrix& grad, const TrainConfig& cfg, SgdState& state, std::size_t step_index);

/// target <- momentum * target + (1 - momentum) * source.
void ema_update(HeadWeights& target, const HeadWeights& source, double momentum);

void save_head(const std::filesystem::path& weights_path, const std::filesystem::path& sidecar_path,
               const HeadWeights& w, double tau);

struct LoadedHead {
    HeadWeights head;
    double tau = 0.0;
};

LoadedHead load_head(const std::filesystem::path& weights_path, const std::filesystem::path& sidecar_path);

}  // namespace selflab
