#include "selflab/dist_tracker.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "selflab/sampling_bank.hpp"

namespace selflab {

namespace {

void require_simplex(const std::vector<double>& v, const char* what) {
    double s = 0.0;
    for (double x : v) {
        if (!(x >= 0.0)) throw std::invalid_argument(std::string(what) + " has a negative entry");
        s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument(std::string(what) + " does not sum to 1");
}

}  // namespace

std::vector<double> init_from_corpus(std::span<const HardLabelMap> labels, std::size_t num_classes) {
    std::vector<std::size_t> totals(num_classes, 0);
    for (const auto& map : labels) {
        const auto counts = class_counts(map, num_classes);
        for (std::size_t c = 0; c < num_classes; ++c) totals[c] += counts[c];
    }
    const std::size_t total = std::accumulate(totals.begin(), totals.end(), std::size_t{0});
    if (total == 0) throw std::invalid_argument("corpus has no labeled pixels");
    std::vector<double> delta(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c)
        delta[c] = static_cast<double>(totals[c]) / static_cast<double>(total);
    return delta;
}

std::vector<double> ema_update(const std::vector<double>& delta, const std::vector<double>& delta_n, double alpha) {
    if (delta.size() != delta_n.size()) throw std::invalid_argument("class distributions differ in length");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("EMA alpha must lie in [0, 1]");
    std::vector<double> out(delta.size());
    for (std::size_t c = 0; c < delta.size(); ++c) out[c] = alpha * delta[c] + (1.0 - alpha) * delta_n[c];
    return out;
}

std::vector<double> as_marginal(const std::vector<double>& delta, double floor) {
    const std::size_t c = delta.size();
    if (floor < 0.0 || floor * static_cast<double>(c) >= 1.0)
        throw std::invalid_argument("marginal floor must satisfy 0 <= floor * C < 1");
    require_simplex(delta, "class distribution");
    // Entries below the floor are pinned to it; the others share the remaining mass in
    // proportion to delta. Pinning can push further entries under the floor, so repeat.
    std::vector<bool> pinned(c, false);
    std::vector<double> out(c);
    for (;;) {
        std::size_t pinned_count = 0;
        double free_sum = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            if (pinned[i]) ++pinned_count;
            else free_sum += delta[i];
        }
        const double free_mass = 1.0 - static_cast<double>(pinned_count) * floor;
        bool changed = false;
        for (std::size_t i = 0; i < c; ++i) {
            if (pinned[i]) {
                out[i] = floor;
                continue;
            }
            out[i] = free_sum > 0.0 ? delta[i] * free_mass / free_sum : floor;
            if (out[i] < floor) {
                pinned[i] = true;
                changed = true;
            }
        }
        if (!changed) return out;
    }
}

double l1_distance(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("L1 distance needs equal lengths");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s;
}

DistributionTracker::DistributionTracker(std::vector<double> initial, double alpha, double floor)
    : probs_(std::move(initial)), alpha_(alpha), floor_(floor) {
    require_simplex(probs_, "initial class distribution");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("EMA alpha must lie in [0, 1]");
    as_marginal(probs_, floor_);
}

void DistributionTracker::update(const std::vector<double>& delta_n) {
    require_simplex(delta_n, "per-image class distribution");
    probs_ = ema_update(probs_, delta_n, alpha_);
    ++updates_;
}

}  // namespace selflab
