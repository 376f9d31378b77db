#pragma once

// Reference implementations used only by the tests. Each one is written the
// slow, obvious way (long double, no stabilization tricks beyond log-sum-exp,
// per-pixel loops) and shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "selflab/matrix.hpp"
#include "selflab/tensor_io.hpp"

namespace oracle {

using selflab::HardLabelMap;
using selflab::Matrix;
using selflab::Tensor;

inline long double log_sum_exp(const std::vector<long double>& xs) {
    long double hi = -std::numeric_limits<long double>::infinity();
    for (long double x : xs) hi = std::max(hi, x);
    if (!std::isfinite(hi)) return hi;
    long double s = 0.0L;
    for (long double x : xs) s += std::exp(x - hi);
    return hi + std::log(s);
}

/// Fixed-point iteration on the dual potentials, entirely in log space:
///   f_i = log r_i - LSE_j(S_ij / eps + g_j),  g_j = log h_j - LSE_i(S_ij / eps + f_i).
inline Matrix sinkhorn(const Matrix& s, const std::vector<double>& r, const std::vector<double>& h, double eps,
                       int iterations = 10000) {
    const std::size_t c = s.rows(), n = s.cols();
    const long double neg_inf = -std::numeric_limits<long double>::infinity();
    std::vector<long double> f(c, 0.0L), g(n, 0.0L), buf;
    auto logm = [&](double x) { return x > 0.0 ? std::log(static_cast<long double>(x)) : neg_inf; };
    for (int it = 0; it < iterations; ++it) {
        for (std::size_t i = 0; i < c; ++i) {
            if (r[i] == 0.0) {
                f[i] = neg_inf;
                continue;
            }
            buf.assign(n, 0.0L);
            for (std::size_t j = 0; j < n; ++j) buf[j] = static_cast<long double>(s(i, j)) / eps + g[j];
            f[i] = logm(r[i]) - log_sum_exp(buf);
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (h[j] == 0.0) {
                g[j] = neg_inf;
                continue;
            }
            buf.clear();
            for (std::size_t i = 0; i < c; ++i)
                if (std::isfinite(f[i])) buf.push_back(static_cast<long double>(s(i, j)) / eps + f[i]);
            g[j] = logm(h[j]) - log_sum_exp(buf);
        }
    }
    Matrix q(c, n);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (!std::isfinite(f[i]) || !std::isfinite(g[j])) continue;
            q(i, j) = static_cast<double>(std::exp(static_cast<long double>(s(i, j)) / eps + f[i] + g[j]));
        }
    return q;
}

/// -(1/M) sum_m sum_c q_cm log softmax(W z_m / tau)_c with z_m the rows of `z`.
inline long double sl_loss(const Matrix& w, const Matrix& z, const Matrix& q, double tau) {
    const std::size_t c = w.rows(), d = w.cols(), m = z.rows();
    long double total = 0.0L;
    std::vector<long double> logits(c);
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < c; ++i) {
            long double dot = 0.0L;
            for (std::size_t k = 0; k < d; ++k) dot += static_cast<long double>(w(i, k)) * z(j, k);
            logits[i] = dot / tau;
        }
        const long double lse = log_sum_exp(logits);
        for (std::size_t i = 0; i < c; ++i) total -= q(i, j) * (logits[i] - lse);
    }
    return total / static_cast<long double>(m);
}

/// Per-class intersection / union and per-class accuracy over truth pixels that are not IGNORE.
struct Metrics {
    std::vector<double> iou;  // NaN when undefined
    std::vector<double> pa;   // NaN when undefined
    double miou = 0.0;
    double mpa = 0.0;
    double pixel_accuracy = 0.0;
};

inline Metrics brute_force_metrics(const HardLabelMap& pred, const HardLabelMap& truth, std::size_t classes) {
    Metrics out;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::size_t valid = 0, correct = 0;
    for (std::size_t p = 0; p < truth.data.size(); ++p) {
        if (truth.data[p] == classes) continue;
        ++valid;
        if (pred.data[p] == truth.data[p]) ++correct;
    }
    double iou_sum = 0.0, pa_sum = 0.0;
    int iou_n = 0, pa_n = 0;
    for (std::size_t k = 0; k < classes; ++k) {
        std::size_t inter = 0, uni = 0, in_truth = 0;
        for (std::size_t p = 0; p < truth.data.size(); ++p) {
            if (truth.data[p] == classes) continue;
            const bool t = truth.data[p] == k, y = pred.data[p] == k;
            if (t && y) ++inter;
            if (t || y) ++uni;
            if (t) ++in_truth;
        }
        out.iou.push_back(uni ? static_cast<double>(inter) / static_cast<double>(uni) : nan);
        out.pa.push_back(in_truth ? static_cast<double>(inter) / static_cast<double>(in_truth) : nan);
        if (uni) iou_sum += out.iou.back(), ++iou_n;
        if (in_truth) pa_sum += out.pa.back(), ++pa_n;
    }
    out.miou = iou_n ? iou_sum / iou_n : 0.0;
    out.mpa = pa_n ? pa_sum / pa_n : 0.0;
    out.pixel_accuracy = valid ? static_cast<double>(correct) / static_cast<double>(valid) : 0.0;
    return out;
}

inline std::vector<double> histogram(const std::vector<std::uint16_t>& labels, std::size_t classes) {
    std::vector<double> h(classes, 0.0);
    double n = 0.0;
    for (auto v : labels)
        if (v < classes) h[v] += 1.0, n += 1.0;
    for (double& x : h) x /= n;
    return h;
}

/// argmax_c a_c * b_c per pixel, lowest index on ties, by a direct loop.
inline std::vector<std::uint16_t> product_argmax(const Tensor& a, const Tensor& b) {
    const std::size_t c = a.shape.back(), n = a.data.size() / c;
    std::vector<std::uint16_t> out(n);
    for (std::size_t p = 0; p < n; ++p) {
        long double best = -1.0L;
        for (std::size_t k = 0; k < c; ++k) {
            const long double v = static_cast<long double>(a.data[p * c + k]) * b.data[p * c + k];
            if (v > best) best = v, out[p] = static_cast<std::uint16_t>(k);
        }
    }
    return out;
}

// ---- seeded instance builders -------------------------------------------------

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double lo = -1.0,
                            double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(rows, cols);
    for (double& x : m.values()) x = u(rng);
    return m;
}

inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n, double lo = 0.05) {
    std::uniform_real_distribution<double> u(lo, 1.0);
    std::vector<double> v(n);
    double s = 0.0;
    for (double& x : v) s += (x = u(rng));
    for (double& x : v) x /= s;
    return v;
}

/// H x W x C map with a float simplex vector at every pixel.
inline Tensor random_prob_map(std::mt19937_64& rng, std::uint32_t h, std::uint32_t w, std::uint32_t c) {
    Tensor t({h, w, c});
    std::uniform_real_distribution<float> u(0.01f, 1.0f);
    for (std::size_t p = 0; p < static_cast<std::size_t>(h) * w; ++p) {
        float s = 0.0f;
        for (std::uint32_t k = 0; k < c; ++k) s += (t.data[p * c + k] = u(rng));
        for (std::uint32_t k = 0; k < c; ++k) t.data[p * c + k] /= s;
    }
    return t;
}

inline HardLabelMap random_labels(std::mt19937_64& rng, std::uint32_t h, std::uint32_t w, std::size_t classes,
                                  bool allow_ignore = false) {
    std::uniform_int_distribution<int> u(0, static_cast<int>(classes) - (allow_ignore ? 0 : 1));
    HardLabelMap m(h, w);
    for (auto& v : m.data) v = static_cast<std::uint16_t>(u(rng));
    return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t k = 0; k < a.values().size(); ++k)
        worst = std::max(worst, std::abs(a.values()[k] - b.values()[k]));
    return worst;
}

}  // namespace oracle
