#include "selflab/ot_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace selflab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Rebuild the kernel once any scaling factor leaves [e^-kAbsorb, e^kAbsorb].
constexpr double kAbsorbLog = 30.0;

double checked_sum(const std::vector<double>& v, const char* name) {
    double s = 0.0;
    for (double x : v) {
        if (!(x >= 0.0) || !std::isfinite(x))
            throw std::invalid_argument(std::string("marginal ") + name + " has a negative or non-finite entry");
        s += x;
    }
    return s;
}

std::vector<double> renormalized(const std::vector<double>& v) {
    const double s = std::accumulate(v.begin(), v.end(), 0.0);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / s;
    return out;
}

std::vector<double> safe_log(const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? std::log(v[i]) : kNegInf;
    return out;
}

double row_l1_error(const std::vector<double>& u, const std::vector<double>& kv,
                    const std::vector<double>& r) {
    double err = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) err += std::abs(u[i] * kv[i] - r[i]);
    return err;
}

void mat_vec(const Matrix& k, const std::vector<double>& v, std::vector<double>& out) {
    const std::size_t n = k.cols();
    for (std::size_t i = 0; i < k.rows(); ++i) {
        const double* row = k.row(i).data();
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += row[j] * v[j];
        out[i] = acc;
    }
}

void mat_t_vec(const Matrix& k, const std::vector<double>& u, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    const std::size_t n = k.cols();
    for (std::size_t i = 0; i < k.rows(); ++i) {
        const double ui = u[i];
        if (ui == 0.0) continue;
        const double* row = k.row(i).data();
        for (std::size_t j = 0; j < n; ++j) out[j] += row[j] * ui;
    }
}

bool all_finite_positive(const std::vector<double>& v, const std::vector<double>& target) {
    for (std::size_t i = 0; i < v.size(); ++i)
        if (target[i] > 0.0 && !(v[i] > 0.0 && std::isfinite(v[i]))) return false;
    return true;
}

TransportPlan finish(Matrix plan, const Marginals& m, bool converged, std::size_t iters) {
    TransportPlan out;
    out.marginal_error = marginal_deviation(plan, m);
    out.matrix = std::move(plan);
    out.converged = converged;
    out.iterations_used = iters;
    return out;
}

TransportPlan sinkhorn_plain(const Matrix& scores, const Marginals& m, const SinkhornOptions& opt) {
    const std::size_t c = scores.rows(), n = scores.cols();
    const double shift = *std::max_element(scores.values().begin(), scores.values().end());
    Matrix kernel(c, n);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j)
            kernel(i, j) = (m.r[i] > 0.0 && m.h[j] > 0.0) ? std::exp((scores(i, j) - shift) / opt.epsilon) : 0.0;

    std::vector<double> u(c, 1.0), v(n, 1.0), kv(c), ktu(n);
    for (std::size_t i = 0; i < c; ++i)
        if (m.r[i] == 0.0) u[i] = 0.0;
    std::size_t iters = 0;
    bool converged = false;
    mat_vec(kernel, v, kv);
    while (iters < opt.max_iters) {
        for (std::size_t i = 0; i < c; ++i) u[i] = m.r[i] > 0.0 ? m.r[i] / kv[i] : 0.0;
        mat_t_vec(kernel, u, ktu);
        for (std::size_t j = 0; j < n; ++j) v[j] = m.h[j] > 0.0 ? m.h[j] / ktu[j] : 0.0;
        ++iters;
        mat_vec(kernel, v, kv);
        const double err = row_l1_error(u, kv, m.r);
        if (!std::isfinite(err)) break;
        if (err <= opt.tol) {
            converged = true;
            break;
        }
    }
    Matrix plan(c, n);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) plan(i, j) = u[i] * kernel(i, j) * v[j];
    bool finite = std::all_of(plan.values().begin(), plan.values().end(), [](double x) { return std::isfinite(x); });
    if (!finite) {
        std::fill(plan.values().begin(), plan.values().end(), 0.0);
        converged = false;
    }
    TransportPlan out = finish(std::move(plan), m, converged, iters);
    if (!finite) out.marginal_error = std::numeric_limits<double>::infinity();
    return out;
}

// Exact log-sum-exp update of the row potentials f given column potentials g.
void log_row_update(const Matrix& scaled, const std::vector<double>& log_r, const std::vector<double>& g,
                    std::vector<double>& f) {
    const std::size_t n = scaled.cols();
    for (std::size_t i = 0; i < scaled.rows(); ++i) {
        if (log_r[i] == kNegInf) {
            f[i] = kNegInf;
            continue;
        }
        const double* row = scaled.row(i).data();
        double mx = kNegInf;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j] + g[j]);
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (g[j] != kNegInf) acc += std::exp(row[j] + g[j] - mx);
        f[i] = log_r[i] - (mx + std::log(acc));
    }
}

void log_col_update(const Matrix& scaled, const std::vector<double>& log_h, const std::vector<double>& f,
                    std::vector<double>& g) {
    const std::size_t c = scaled.rows(), n = scaled.cols();
    std::vector<double> mx(n, kNegInf), acc(n, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
        if (f[i] == kNegInf) continue;
        const double* row = scaled.row(i).data();
        for (std::size_t j = 0; j < n; ++j) mx[j] = std::max(mx[j], row[j] + f[i]);
    }
    for (std::size_t i = 0; i < c; ++i) {
        if (f[i] == kNegInf) continue;
        const double* row = scaled.row(i).data();
        for (std::size_t j = 0; j < n; ++j) acc[j] += std::exp(row[j] + f[i] - mx[j]);
    }
    for (std::size_t j = 0; j < n; ++j) g[j] = log_h[j] == kNegInf ? kNegInf : log_h[j] - (mx[j] + std::log(acc[j]));
}

// Kernel stored sample-major (N x C) so one pass over memory performs a whole sweep.
void rebuild_kernel_t(const Matrix& scaled, const std::vector<double>& f, const std::vector<double>& g,
                      Matrix& kernel_t) {
    const std::size_t c = scaled.rows(), n = scaled.cols();
    for (std::size_t j = 0; j < n; ++j) {
        double* dst = kernel_t.row(j).data();
        for (std::size_t i = 0; i < c; ++i)
            dst[i] = (f[i] == kNegInf || g[j] == kNegInf) ? 0.0 : std::exp(scaled(i, j) + f[i] + g[j]);
    }
}

TransportPlan sinkhorn_log(const Matrix& scores, const Marginals& m, const SinkhornOptions& opt) {
    const std::size_t c = scores.rows(), n = scores.cols();
    Matrix scaled(c, n);
    for (std::size_t k = 0; k < scores.size(); ++k) scaled.values()[k] = scores.values()[k] / opt.epsilon;
    const auto log_r = safe_log(m.r);
    const auto log_h = safe_log(m.h);
    const double hi = std::exp(kAbsorbLog), lo = std::exp(-kAbsorbLog);

    std::vector<double> f(c, 0.0), g(n, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        if (log_h[j] == kNegInf) g[j] = kNegInf;

    // Potentials f, g live in log space; u, v are the multiplicative corrections
    // accumulated since the kernel was last rebuilt from them.
    Matrix kernel_t(n, c);
    std::vector<double> u(c), v(n), kv(c);
    auto reset_scalings = [&] {
        for (std::size_t i = 0; i < c; ++i) u[i] = m.r[i] > 0.0 ? 1.0 : 0.0;
        std::fill(v.begin(), v.end(), 1.0);
    };
    auto exact_sweep = [&] {
        log_row_update(scaled, log_r, g, f);
        log_col_update(scaled, log_h, f, g);
        rebuild_kernel_t(scaled, f, g, kernel_t);
        reset_scalings();
    };
    auto absorb = [&] {
        for (std::size_t i = 0; i < c; ++i)
            if (f[i] != kNegInf) f[i] += std::log(u[i]);
        for (std::size_t j = 0; j < n; ++j)
            if (g[j] != kNegInf) g[j] += std::log(v[j]);
        rebuild_kernel_t(scaled, f, g, kernel_t);
        reset_scalings();
    };
    auto row_mass = [&] {
        std::fill(kv.begin(), kv.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const double* kj = kernel_t.row(j).data();
            for (std::size_t i = 0; i < c; ++i) kv[i] += kj[i] * v[j];
        }
    };

    // The first sweep is exact in log space, so the kernel starts with column sums h.
    exact_sweep();
    std::size_t iters = 1;
    row_mass();
    double err = row_l1_error(u, kv, m.r);
    bool converged = err <= opt.tol;

    while (!converged && iters < opt.max_iters) {
        if (!all_finite_positive(kv, m.r)) {
            // An active row's kernel mass underflowed; redo the sweep exactly.
            exact_sweep();
            row_mass();
        } else {
            for (std::size_t i = 0; i < c; ++i) u[i] = m.r[i] > 0.0 ? m.r[i] / kv[i] : 0.0;
            // Column update fused with the next row-mass product.
            std::fill(kv.begin(), kv.end(), 0.0);
            bool drift = false, underflow = false;
            for (std::size_t j = 0; j < n; ++j) {
                if (m.h[j] == 0.0) {
                    v[j] = 0.0;
                    continue;
                }
                const double* kj = kernel_t.row(j).data();
                double ktu = 0.0;
                for (std::size_t i = 0; i < c; ++i) ktu += kj[i] * u[i];
                if (!(ktu > 0.0)) {
                    underflow = true;
                    break;
                }
                const double vj = m.h[j] / ktu;
                v[j] = vj;
                drift |= vj > hi || vj < lo;
                for (std::size_t i = 0; i < c; ++i) kv[i] += kj[i] * vj;
            }
            for (std::size_t i = 0; i < c && !drift; ++i) drift = u[i] > 0.0 && (u[i] > hi || u[i] < lo);
            if (underflow) {
                exact_sweep();
                row_mass();
            } else if (drift) {
                absorb();
                row_mass();
            }
        }
        ++iters;
        err = row_l1_error(u, kv, m.r);
        converged = err <= opt.tol;
    }

    absorb();
    Matrix plan(c, n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < c; ++i) plan(i, j) = kernel_t(j, i);
    return finish(std::move(plan), m, converged, iters);
}

}  // namespace

Marginals Marginals::uniform(std::size_t classes, std::size_t samples) {
    return {std::vector<double>(classes, 1.0 / static_cast<double>(classes)),
            std::vector<double>(samples, 1.0 / static_cast<double>(samples))};
}

void Marginals::validate(std::size_t classes, std::size_t samples) const {
    if (r.size() != classes)
        throw std::invalid_argument("row marginal has " + std::to_string(r.size()) + " entries, expected " +
                                    std::to_string(classes));
    if (h.size() != samples)
        throw std::invalid_argument("column marginal has " + std::to_string(h.size()) + " entries, expected " +
                                    std::to_string(samples));
    if (std::abs(checked_sum(r, "r") - 1.0) > 1e-9) throw std::invalid_argument("row marginal does not sum to 1");
    if (std::abs(checked_sum(h, "h") - 1.0) > 1e-9) throw std::invalid_argument("column marginal does not sum to 1");
}

TransportPlan sinkhorn(const Matrix& scores, const Marginals& marginals, const SinkhornOptions& options) {
    if (!(options.epsilon > 0.0)) throw std::invalid_argument("sinkhorn epsilon must be positive");
    if (!(options.tol > 0.0)) throw std::invalid_argument("sinkhorn tol must be positive");
    if (scores.empty()) throw std::invalid_argument("sinkhorn needs a non-empty score matrix");
    for (double s : scores.values())
        if (!std::isfinite(s)) throw std::invalid_argument("score matrix contains a non-finite entry");
    marginals.validate(scores.rows(), scores.cols());
    // Mass on zero-marginal rows/columns is dropped; renormalizing absorbs the rounding.
    const Marginals m{renormalized(marginals.r), renormalized(marginals.h)};
    return options.method == SinkhornMethod::plain ? sinkhorn_plain(scores, m, options)
                                                   : sinkhorn_log(scores, m, options);
}

double marginal_deviation(const Matrix& plan, const Marginals& m) {
    double row_err = 0.0, col_err = 0.0;
    std::vector<double> col(plan.cols(), 0.0);
    for (std::size_t i = 0; i < plan.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < plan.cols(); ++j) {
            s += plan(i, j);
            col[j] += plan(i, j);
        }
        row_err += std::abs(s - m.r[i]);
    }
    for (std::size_t j = 0; j < plan.cols(); ++j) col_err += std::abs(col[j] - m.h[j]);
    return std::max(row_err, col_err);
}

SoftAssignment soft_assignment_from_plan(const Matrix& plan) {
    SoftAssignment out{Matrix(plan.rows(), plan.cols()), 0};
    const double uniform = 1.0 / static_cast<double>(plan.rows());
    for (std::size_t j = 0; j < plan.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < plan.rows(); ++i) s += plan(i, j);
        if (!(s > 0.0)) {
            ++out.zero_columns;
            for (std::size_t i = 0; i < plan.rows(); ++i) out.probs(i, j) = uniform;
            continue;
        }
        for (std::size_t i = 0; i < plan.rows(); ++i) out.probs(i, j) = plan(i, j) / s;
    }
    return out;
}

Matrix slice_columns(const Matrix& m, std::size_t first, std::size_t count) {
    if (first + count > m.cols()) throw std::out_of_range("column slice exceeds matrix width");
    Matrix out(m.rows(), count);
    for (std::size_t i = 0; i < m.rows(); ++i)
        std::copy_n(m.row(i).begin() + static_cast<std::ptrdiff_t>(first), count, out.row(i).begin());
    return out;
}

}  // namespace selflab
