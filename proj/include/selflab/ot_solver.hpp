#pragma once

#include <cstddef>
#include <vector>

#include "selflab/matrix.hpp"

namespace selflab {

/// Row marginal r (length C) and column marginal h (length N). Both on the simplex.
struct Marginals {
    std::vector<double> r;
    std::vector<double> h;

    static Marginals uniform(std::size_t classes, std::size_t samples);
    /// Throws std::invalid_argument unless both vectors are nonnegative and sum to 1 within 1e-9.
    void validate(std::size_t classes, std::size_t samples) const;
};

/// Q* = diag(a) exp(S / eps) diag(b), restricted to the transport polytope.
struct TransportPlan {
    Matrix matrix;  // C x N
    bool converged = false;
    std::size_t iterations_used = 0;  // full row+column sweeps
    /// max(L1 row deviation, L1 column deviation) of the returned matrix.
    double marginal_error = 0.0;
};

enum class SinkhornMethod {
    /// Multiplicative scaling of exp(S / eps). Overflows once score spreads exceed ~700 eps.
    plain,
    /// Potentials kept in log space; the kernel is rebuilt from them whenever the
    /// running scaling factors drift, so no exp() of a raw score ever overflows.
    log_domain,
};

struct SinkhornOptions {
    double epsilon = 0.05;
    std::size_t max_iters = 1000;
    double tol = 1e-6;
    SinkhornMethod method = SinkhornMethod::log_domain;
};

/// Entropic OT assignment between C classes (rows) and N samples (columns).
/// Zero entries of r (or h) yield exactly-zero rows (columns). Returns the best
/// iterate with converged=false if tol is not reached within max_iters.
TransportPlan sinkhorn(const Matrix& scores, const Marginals& marginals, const SinkhornOptions& options = {});

/// Achieved max(L1 row deviation, L1 column deviation) of an arbitrary plan.
double marginal_deviation(const Matrix& plan, const Marginals& marginals);

struct SoftAssignment {
    Matrix probs;  // C x N, every column on the simplex
    std::size_t zero_columns = 0;
};

/// Rescales every column of the plan to sum to 1. Zero columns become uniform and are counted.
SoftAssignment soft_assignment_from_plan(const Matrix& plan);

/// Columns [first, first + count) of a C x N matrix.
Matrix slice_columns(const Matrix& m, std::size_t first, std::size_t count);

}  // namespace selflab
