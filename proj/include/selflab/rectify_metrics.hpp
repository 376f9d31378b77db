#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "selflab/tensor_io.hpp"

namespace selflab {

/// Throws std::invalid_argument unless t is H x W x C with every pixel on the simplex (1e-6).
void validate_prob_map(const Tensor& t);

struct Rectified {
    HardLabelMap labels;
    /// Pixels whose product vector was all zero and fell back to argmax of P_ST.
    std::size_t fallback_pixels = 0;
};

/// Per pixel argmax_c P_SL(c) * P_ST(c); ties go to the lowest class index.
Rectified rectify(const Tensor& p_sl, const Tensor& p_st);

/// Per-pixel argmax with lowest-index tie-break.
HardLabelMap argmax_labels(const Tensor& probs);

enum class Reduction { mean, sum };

struct CrossEntropy {
    double value = 0.0;
    std::size_t counted_pixels = 0;
    /// Target-class probabilities below 1e-12 that were clamped.
    std::size_t clamped = 0;
};

/// -sum log pred[target] over non-IGNORE pixels; mean divides by the counted pixels.
CrossEntropy cross_entropy(const Tensor& pred, const HardLabelMap& target, Reduction reduction = Reduction::mean);

/// Sum over pixels of KL(p||q) + KL(q||p), probabilities clamped at 1e-12 inside the logs.
double symmetric_kl(const Tensor& p, const Tensor& q);

struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::uint64_t> counts;  // counts[i * C + j]: true i predicted j
    /// Per true class, pixels predicted as IGNORE.
    std::vector<std::uint64_t> unassigned;

    explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0), unassigned(c, 0) {}
    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
    std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
    std::uint64_t truth_total(std::size_t c) const;
    std::uint64_t pred_total(std::size_t c) const;
    std::uint64_t total() const;
};

ConfusionMatrix confusion_matrix(const HardLabelMap& pred, const HardLabelMap& truth, std::size_t num_classes);
void accumulate(ConfusionMatrix& into, const HardLabelMap& pred, const HardLabelMap& truth);

struct Evaluation {
    ConfusionMatrix confusion;
    std::vector<std::optional<double>> iou;  // empty when the class is in neither map
    std::vector<std::optional<double>> pa;   // empty when the class is absent from truth
    double miou = 0.0;
    double mpa = 0.0;
    double pixel_accuracy = 0.0;
};

Evaluation evaluate(const ConfusionMatrix& confusion);
Evaluation evaluate(const HardLabelMap& pred, const HardLabelMap& truth, std::size_t num_classes);

/// (l_seg_t + l_seg_s) + lambda1 * l_sl + lambda2 * l_reg.
double total_loss(double l_seg_t, double l_seg_s, double l_sl, double l_reg, double lambda1, double lambda2);

}  // namespace selflab
