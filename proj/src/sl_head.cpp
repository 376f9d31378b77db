#include "selflab/sl_head.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace selflab {

PrototypeInit init_from_prototypes(std::span<const Matrix> features, std::span<const HardLabelMap> labels,
                                   std::size_t num_classes) {
    if (features.size() != labels.size()) throw std::invalid_argument("features and labels differ in image count");
    if (features.empty()) throw std::invalid_argument("prototype init needs at least one image");
    const std::size_t dim = features.front().cols();
    PrototypeInit out;
    out.head.weights = Matrix(num_classes, dim);
    out.class_counts.assign(num_classes, 0);
    for (std::size_t n = 0; n < features.size(); ++n) {
        const Matrix& z = features[n];
        if (z.cols() != dim) throw std::invalid_argument("feature dimension differs across images");
        if (z.rows() != labels[n].pixel_count())
            throw std::invalid_argument("image " + std::to_string(n) + ": feature rows do not match label pixels");
        for (std::size_t i = 0; i < z.rows(); ++i) {
            const std::size_t c = labels[n].data[i];
            if (c >= num_classes) continue;
            auto row = out.head.weights.row(c);
            const auto zi = z.row(i);
            for (std::size_t k = 0; k < dim; ++k) row[k] += zi[k];
            ++out.class_counts[c];
        }
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (out.class_counts[c] == 0) {
            out.empty_classes.push_back(c);
            continue;
        }
        const double inv = 1.0 / static_cast<double>(out.class_counts[c]);
        for (double& x : out.head.weights.row(c)) x *= inv;
    }
    return out;
}

Matrix softmax_columns(const Matrix& scores, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("softmax temperature must be positive");
    const std::size_t c = scores.rows(), n = scores.cols();
    Matrix probs(c, n);
    for (std::size_t j = 0; j < n; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < c; ++i) mx = std::max(mx, scores(i, j));
        double total = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            const double e = std::exp((scores(i, j) - mx) / tau);
            probs(i, j) = e;
            total += e;
        }
        for (std::size_t i = 0; i < c; ++i) probs(i, j) /= total;
    }
    return probs;
}

namespace {

Matrix head_scores(const HeadWeights& w, const Matrix& features) {
    if (features.cols() != w.dim())
        throw std::invalid_argument("feature dimension " + std::to_string(features.cols()) +
                                    " does not match head dimension " + std::to_string(w.dim()));
    const std::size_t c = w.classes(), n = features.rows(), d = w.dim();
    Matrix scores(c, n);
    for (std::size_t i = 0; i < c; ++i) {
        const double* wi = w.weights.row(i).data();
        for (std::size_t j = 0; j < n; ++j) {
            const double* zj = features.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += wi[k] * zj[k];
            scores(i, j) = acc;
        }
    }
    return scores;
}

}  // namespace

HeadOutput forward(const HeadWeights& w, const Matrix& features, double tau) {
    HeadOutput out;
    out.scores = head_scores(w, features);
    out.probs = softmax_columns(out.scores, tau);
    return out;
}

LossAndGrad sl_loss_and_grad(const HeadWeights& w, const Matrix& features, const Matrix& targets, double tau) {
    const std::size_t c = w.classes(), m = features.rows(), d = w.dim();
    if (m == 0) throw std::invalid_argument("self-labeling loss needs at least one sample");
    if (targets.rows() != c || targets.cols() != m)
        throw std::invalid_argument("targets must be C x M");
    for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            if (targets(i, j) < 0.0) throw std::invalid_argument("targets must be nonnegative");
            s += targets(i, j);
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw std::invalid_argument("target column " + std::to_string(j) + " does not sum to 1");
    }
    const HeadOutput out = forward(w, features, tau);

    LossAndGrad result{0.0, Matrix(c, d)};
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t j = 0; j < m; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < c; ++i) mx = std::max(mx, out.scores(i, j) / tau);
        double total = 0.0;
        for (std::size_t i = 0; i < c; ++i) total += std::exp(out.scores(i, j) / tau - mx);
        const double lse = mx + std::log(total);
        for (std::size_t i = 0; i < c; ++i)
            if (targets(i, j) > 0.0) result.loss -= targets(i, j) * (out.scores(i, j) / tau - lse);
    }
    result.loss *= inv_m;

    // dL/dW_c = 1/(M tau) sum_m (p_mc - q_mc) z_m
    const double scale = inv_m / tau;
    for (std::size_t i = 0; i < c; ++i) {
        double* gi = result.grad.row(i).data();
        for (std::size_t j = 0; j < m; ++j) {
            const double coeff = (out.probs(i, j) - targets(i, j)) * scale;
            if (coeff == 0.0) continue;
            const double* zj = features.row(j).data();
            for (std::size_t k = 0; k < d; ++k) gi[k] += coeff * zj[k];
        }
    }
    return result;
}

double scheduled_learning_rate(const TrainConfig& cfg, std::size_t step_index) {
    if (cfg.total_steps == 0) return cfg.learning_rate;
    const double progress = std::min(1.0, static_cast<double>(step_index) / static_cast<double>(cfg.total_steps));
    return cfg.learning_rate * std::pow(1.0 - progress, cfg.lr_decay_power);
}

void sgd_step(HeadWeights& w, const Matrix& grad, const TrainConfig& cfg, SgdState& state, std::size_t step_index) {
    if (grad.rows() != w.weights.rows() || grad.cols() != w.weights.cols())
        throw std::invalid_argument("gradient shape does not match weights");
    if (!state.initialized) {
        state.velocity = Matrix(grad.rows(), grad.cols());
    }
    const double lr = scheduled_learning_rate(cfg, step_index);
    auto& wv = w.weights.values();
    auto& vel = state.velocity.values();
    const auto& g = grad.values();
    for (std::size_t k = 0; k < wv.size(); ++k) {
        const double step = g[k] + cfg.weight_decay * wv[k];
        vel[k] = state.initialized ? cfg.momentum * vel[k] + step : step;
        wv[k] -= lr * vel[k];
    }
    state.initialized = true;
    ++w.version;
}

void ema_update(HeadWeights& target, const HeadWeights& source, double momentum) {
    if (target.weights.rows() != source.weights.rows() || target.weights.cols() != source.weights.cols())
        throw std::invalid_argument("EMA update needs heads of identical shape");
    if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("EMA momentum must lie in [0, 1]");
    auto& t = target.weights.values();
    const auto& s = source.weights.values();
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = momentum * t[k] + (1.0 - momentum) * s[k];
    ++target.version;
}

void save_head(const std::filesystem::path& weights_path, const std::filesystem::path& sidecar_path,
               const HeadWeights& w, double tau) {
    save_tensor(weights_path, from_matrix(w.weights));
    std::ofstream out(sidecar_path, std::ios::trunc);
    if (!out) throw TensorIoError(TensorIoErrc::io, "cannot open " + sidecar_path.string() + " for writing");
    nlohmann::json meta{{"version", w.version}, {"tau", tau}, {"classes", w.classes()}, {"dim", w.dim()}};
    out << meta.dump(2) << '\n';
}

LoadedHead load_head(const std::filesystem::path& weights_path, const std::filesystem::path& sidecar_path) {
    const Tensor t = load_tensor(weights_path);
    if (t.rank() != 2) throw TensorIoError(TensorIoErrc::bad_header, "head weights must be a rank-2 tensor");
    std::ifstream in(sidecar_path);
    if (!in) throw TensorIoError(TensorIoErrc::io, "cannot open " + sidecar_path.string());
    const auto meta = nlohmann::json::parse(in);
    LoadedHead out;
    out.head.weights = to_matrix(t);
    out.head.version = meta.at("version").get<std::uint64_t>();
    out.tau = meta.at("tau").get<double>();
    return out;
}

}  // namespace selflab
