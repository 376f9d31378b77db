#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "selflab/tensor_io.hpp"

namespace selflab {

/// Global class frequencies over every non-IGNORE pixel of the corpus.
std::vector<double> init_from_corpus(std::span<const HardLabelMap> labels, std::size_t num_classes);

/// alpha * delta + (1 - alpha) * delta_n.
std::vector<double> ema_update(const std::vector<double>& delta, const std::vector<double>& delta_n, double alpha);

/// Raises every entry to at least `floor` and rescales the rest so the result sums to 1.
/// Requires floor * C < 1.
std::vector<double> as_marginal(const std::vector<double>& delta, double floor);

double l1_distance(const std::vector<double>& a, const std::vector<double>& b);

/// Running estimate of the target class distribution, used as the OT row marginal.
class DistributionTracker {
 public:
    DistributionTracker(std::vector<double> initial, double alpha, double floor);

    const std::vector<double>& probs() const { return probs_; }
    double alpha() const { return alpha_; }
    double floor() const { return floor_; }
    std::size_t updates() const { return updates_; }

    void update(const std::vector<double>& delta_n);
    std::vector<double> marginal() const { return as_marginal(probs_, floor_); }

 private:
    std::vector<double> probs_;
    double alpha_;
    double floor_;
    std::size_t updates_ = 0;
};

}  // namespace selflab
