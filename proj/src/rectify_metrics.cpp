#include "selflab/rectify_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace selflab {

namespace {

constexpr double kClamp = 1e-12;

void require_same_map_shape(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw std::invalid_argument("probability maps differ in shape");
}

void require_label_shape(const Tensor& probs, const HardLabelMap& labels) {
    if (probs.rank() != 3 || probs.shape[0] != labels.height || probs.shape[1] != labels.width)
        throw std::invalid_argument("label map shape does not match probability map");
}

}  // namespace

void validate_prob_map(const Tensor& t) {
    if (t.rank() != 3) throw std::invalid_argument("probability maps must be H x W x C");
    const std::size_t c = t.inner_extent();
    for (std::size_t p = 0; p < t.outer_extent(); ++p) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            const float v = t.data[p * c + k];
            if (!(v >= 0.0f)) throw std::invalid_argument("probability map has a negative entry at pixel " + std::to_string(p));
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw std::invalid_argument("probability map pixel " + std::to_string(p) + " does not sum to 1");
    }
}

HardLabelMap argmax_labels(const Tensor& probs) {
    if (probs.rank() != 3) throw std::invalid_argument("probability maps must be H x W x C");
    const std::size_t c = probs.inner_extent();
    HardLabelMap out(probs.shape[0], probs.shape[1]);
    for (std::size_t p = 0; p < out.pixel_count(); ++p) {
        const float* v = probs.data.data() + p * c;
        out.data[p] = static_cast<std::uint16_t>(std::max_element(v, v + c) - v);
    }
    return out;
}

Rectified rectify(const Tensor& p_sl, const Tensor& p_st) {
    require_same_map_shape(p_sl, p_st);
    if (p_sl.rank() != 3) throw std::invalid_argument("probability maps must be H x W x C");
    const std::size_t c = p_sl.inner_extent();
    Rectified out{HardLabelMap(p_sl.shape[0], p_sl.shape[1]), 0};
    for (std::size_t p = 0; p < out.labels.pixel_count(); ++p) {
        const float* a = p_sl.data.data() + p * c;
        const float* b = p_st.data.data() + p * c;
        std::size_t best = 0;
        double best_value = static_cast<double>(a[0]) * b[0];
        for (std::size_t k = 1; k < c; ++k) {
            const double v = static_cast<double>(a[k]) * b[k];
            if (v > best_value) {
                best_value = v;
                best = k;
            }
        }
        if (best_value <= 0.0) {
            best = static_cast<std::size_t>(std::max_element(b, b + c) - b);
            ++out.fallback_pixels;
        }
        out.labels.data[p] = static_cast<std::uint16_t>(best);
    }
    return out;
}

CrossEntropy cross_entropy(const Tensor& pred, const HardLabelMap& target, Reduction reduction) {
    require_label_shape(pred, target);
    const std::size_t c = pred.inner_extent();
    CrossEntropy out;
    for (std::size_t p = 0; p < target.pixel_count(); ++p) {
        const std::size_t t = target.data[p];
        if (t > c) throw std::invalid_argument("target label exceeds class count");
        if (t == c) continue;
        double prob = pred.data[p * c + t];
        if (prob < kClamp) {
            prob = kClamp;
            ++out.clamped;
        }
        out.value -= std::log(prob);
        ++out.counted_pixels;
    }
    if (reduction == Reduction::mean && out.counted_pixels > 0) out.value /= static_cast<double>(out.counted_pixels);
    return out;
}

double symmetric_kl(const Tensor& p, const Tensor& q) {
    require_same_map_shape(p, q);
    // KL(p||q) + KL(q||p) = sum_c (p_c - q_c)(log p_c - log q_c); this form is exactly symmetric.
    double total = 0.0;
    for (std::size_t k = 0; k < p.data.size(); ++k) {
        const double a = p.data[k], b = q.data[k];
        total += (a - b) * (std::log(std::max(a, kClamp)) - std::log(std::max(b, kClamp)));
    }
    return total;
}

std::uint64_t ConfusionMatrix::truth_total(std::size_t c) const {
    std::uint64_t s = unassigned[c];
    for (std::size_t j = 0; j < classes; ++j) s += at(c, j);
    return s;
}

std::uint64_t ConfusionMatrix::pred_total(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < classes; ++i) s += at(i, c);
    return s;
}

std::uint64_t ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}) +
           std::accumulate(unassigned.begin(), unassigned.end(), std::uint64_t{0});
}

void accumulate(ConfusionMatrix& into, const HardLabelMap& pred, const HardLabelMap& truth) {
    if (pred.height != truth.height || pred.width != truth.width)
        throw std::invalid_argument("prediction and truth maps differ in shape");
    const std::size_t c = into.classes;
    for (std::size_t p = 0; p < truth.pixel_count(); ++p) {
        const std::size_t t = truth.data[p], y = pred.data[p];
        if (t > c || y > c) throw std::invalid_argument("label exceeds class count");
        if (t == c) continue;
        if (y == c) ++into.unassigned[t];
        else ++into.at(t, y);
    }
}

ConfusionMatrix confusion_matrix(const HardLabelMap& pred, const HardLabelMap& truth, std::size_t num_classes) {
    ConfusionMatrix cm(num_classes);
    accumulate(cm, pred, truth);
    return cm;
}

Evaluation evaluate(const ConfusionMatrix& confusion) {
    const std::size_t c = confusion.classes;
    Evaluation out{confusion, std::vector<std::optional<double>>(c), std::vector<std::optional<double>>(c)};
    double iou_sum = 0.0, pa_sum = 0.0;
    std::size_t iou_n = 0, pa_n = 0;
    std::uint64_t correct = 0;
    for (std::size_t k = 0; k < c; ++k) {
        const double tp = static_cast<double>(confusion.at(k, k));
        const std::uint64_t row = confusion.truth_total(k);
        const std::uint64_t col = confusion.pred_total(k);
        correct += confusion.at(k, k);
        const double uni = static_cast<double>(row) + static_cast<double>(col) - tp;
        if (uni > 0.0) {
            out.iou[k] = tp / uni;
            iou_sum += *out.iou[k];
            ++iou_n;
        }
        if (row > 0) {
            out.pa[k] = tp / static_cast<double>(row);
            pa_sum += *out.pa[k];
            ++pa_n;
        }
    }
    out.miou = iou_n ? iou_sum / static_cast<double>(iou_n) : 0.0;
    out.mpa = pa_n ? pa_sum / static_cast<double>(pa_n) : 0.0;
    const std::uint64_t total = confusion.total();
    out.pixel_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    return out;
}

Evaluation evaluate(const HardLabelMap& pred, const HardLabelMap& truth, std::size_t num_classes) {
    return evaluate(confusion_matrix(pred, truth, num_classes));
}

double total_loss(double l_seg_t, double l_seg_s, double l_sl, double l_reg, double lambda1, double lambda2) {
    return (l_seg_t + l_seg_s) + lambda1 * l_sl + lambda2 * l_reg;
}

}  // namespace selflab
