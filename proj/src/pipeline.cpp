#include "selflab/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>

#include "selflab/dist_tracker.hpp"
#include "selflab/synth_world.hpp"

namespace selflab {

namespace {

const char* to_string(SinkhornMethod m) { return m == SinkhornMethod::plain ? "plain" : "log_domain"; }
const char* to_string(Reduction r) { return r == Reduction::sum ? "sum" : "mean"; }
const char* to_string(SampleHints h) { return h == SampleHints::pseudo ? "pseudo" : "rectified"; }

SinkhornMethod parse_method(const std::string& s) {
    if (s == "plain") return SinkhornMethod::plain;
    if (s == "log_domain" || s == "log") return SinkhornMethod::log_domain;
    throw std::invalid_argument("unknown sinkhorn_method '" + s + "'");
}

Reduction parse_reduction(const std::string& s) {
    if (s == "mean") return Reduction::mean;
    if (s == "sum") return Reduction::sum;
    throw std::invalid_argument("unknown loss_reduction '" + s + "'");
}

SampleHints parse_hints(const std::string& s) {
    if (s == "rectified") return SampleHints::rectified;
    if (s == "pseudo") return SampleHints::pseudo;
    throw std::invalid_argument("unknown sample_hints '" + s + "'");
}

CorpusImage make_image(std::string name, const Tensor& features, Tensor p_st, std::optional<HardLabelMap> truth) {
    if (features.rank() != 3) throw std::invalid_argument(name + ": features must be H x W x D");
    CorpusImage img;
    img.name = std::move(name);
    img.height = features.shape[0];
    img.width = features.shape[1];
    auto normalized = normalize_rows(features);
    img.zero_feature_rows = normalized.zero_rows;
    img.features = to_matrix(normalized.tensor);
    img.p_st = std::move(p_st);
    img.truth = std::move(truth);
    return img;
}

// Forward pass of every pixel through the head, split across workers by pixel range.
// Columns are independent, so the result does not depend on the worker count.
Matrix forward_all_pixels(const HeadWeights& head, const Matrix& features, double tau) {
    const std::size_t n = features.rows();
    const std::size_t workers = std::min<std::size_t>(worker_count(), std::max<std::size_t>(1, n / 1024));
    if (workers <= 1) return forward(head, features, tau).probs;
    Matrix probs(head.classes(), n);
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t first = w * chunk, last = std::min(n, first + chunk);
        if (first >= last) break;
        pool.emplace_back([&, first, last] {
            Matrix part(last - first, features.cols());
            std::copy(features.values().begin() + static_cast<std::ptrdiff_t>(first * features.cols()),
                      features.values().begin() + static_cast<std::ptrdiff_t>(last * features.cols()),
                      part.values().begin());
            const Matrix p = forward(head, part, tau).probs;
            for (std::size_t i = 0; i < p.rows(); ++i)
                std::copy(p.row(i).begin(), p.row(i).end(), probs.row(i).begin() + static_cast<std::ptrdiff_t>(first));
        });
    }
    for (auto& t : pool) t.join();
    return probs;
}

}  // namespace

void PipelineConfig::validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
    if (samples_per_image == 0) throw std::invalid_argument("samples_per_image must be positive");
    if (samples_per_image > bank_capacity) throw std::invalid_argument("samples_per_image must not exceed bank_capacity");
    if (head_momentum < 0.0 || head_momentum > 1.0) throw std::invalid_argument("head_momentum must lie in [0, 1]");
    if (delta_alpha < 0.0 || delta_alpha > 1.0) throw std::invalid_argument("delta_alpha must lie in [0, 1]");
    if (marginal_floor < 0.0) throw std::invalid_argument("marginal_floor must be nonnegative");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be nonnegative");
    if (sgd_momentum < 0.0 || sgd_momentum >= 1.0) throw std::invalid_argument("sgd_momentum must lie in [0, 1)");
    if (!(sinkhorn_tol > 0.0)) throw std::invalid_argument("sinkhorn_tol must be positive");
    if (sinkhorn_max_iters == 0) throw std::invalid_argument("sinkhorn_max_iters must be positive");
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
    j = nlohmann::json{{"epsilon", c.epsilon},
                       {"tau", c.tau},
                       {"lambda1", c.lambda1},
                       {"lambda2", c.lambda2},
                       {"samples_per_image", c.samples_per_image},
                       {"bank_capacity", c.bank_capacity},
                       {"head_momentum", c.head_momentum},
                       {"delta_alpha", c.delta_alpha},
                       {"marginal_floor", c.marginal_floor},
                       {"epochs", c.epochs},
                       {"seed", c.seed},
                       {"learning_rate", c.learning_rate},
                       {"lr_decay_power", c.lr_decay_power},
                       {"weight_decay", c.weight_decay},
                       {"sgd_momentum", c.sgd_momentum},
                       {"sinkhorn_max_iters", c.sinkhorn_max_iters},
                       {"sinkhorn_tol", c.sinkhorn_tol},
                       {"sinkhorn_method", to_string(c.sinkhorn_method)},
                       {"max_sinkhorn_failures", c.max_sinkhorn_failures},
                       {"loss_reduction", to_string(c.loss_reduction)},
                       {"equal_partition", c.equal_partition},
                       {"sample_hints", to_string(c.sample_hints)},
                       {"data_dir", c.data_dir},
                       {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
    static const std::set<std::string> known{
        "epsilon",        "tau",           "lambda1",         "lambda2",          "samples_per_image",
        "bank_capacity",  "head_momentum", "delta_alpha",     "marginal_floor",   "epochs",
        "seed",           "learning_rate", "lr_decay_power",  "weight_decay",     "sgd_momentum",
        "sinkhorn_max_iters", "sinkhorn_tol", "sinkhorn_method", "max_sinkhorn_failures", "loss_reduction",
        "equal_partition", "sample_hints", "data_dir",        "out_dir"};
    if (!j.is_object()) throw std::invalid_argument("pipeline config must be a JSON object");
    for (const auto& item : j.items())
        if (!known.contains(item.key())) throw std::invalid_argument("unknown config key '" + item.key() + "'");
    const PipelineConfig d;
    c.epsilon = j.value("epsilon", d.epsilon);
    c.tau = j.value("tau", d.tau);
    c.lambda1 = j.value("lambda1", d.lambda1);
    c.lambda2 = j.value("lambda2", d.lambda2);
    c.samples_per_image = j.value("samples_per_image", d.samples_per_image);
    c.bank_capacity = j.value("bank_capacity", d.bank_capacity);
    c.head_momentum = j.value("head_momentum", d.head_momentum);
    c.delta_alpha = j.value("delta_alpha", d.delta_alpha);
    c.marginal_floor = j.value("marginal_floor", d.marginal_floor);
    c.epochs = j.value("epochs", d.epochs);
    c.seed = j.value("seed", d.seed);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.lr_decay_power = j.value("lr_decay_power", d.lr_decay_power);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.sgd_momentum = j.value("sgd_momentum", d.sgd_momentum);
    c.sinkhorn_max_iters = j.value("sinkhorn_max_iters", d.sinkhorn_max_iters);
    c.sinkhorn_tol = j.value("sinkhorn_tol", d.sinkhorn_tol);
    c.sinkhorn_method = parse_method(j.value("sinkhorn_method", std::string(to_string(d.sinkhorn_method))));
    c.max_sinkhorn_failures = j.value("max_sinkhorn_failures", d.max_sinkhorn_failures);
    c.loss_reduction = parse_reduction(j.value("loss_reduction", std::string(to_string(d.loss_reduction))));
    c.equal_partition = j.value("equal_partition", d.equal_partition);
    c.sample_hints = parse_hints(j.value("sample_hints", std::string(to_string(d.sample_hints))));
    c.data_dir = j.value("data_dir", d.data_dir);
    c.out_dir = j.value("out_dir", d.out_dir);
}

void to_json(nlohmann::json& j, const IterationReport& r) {
    j = nlohmann::json{{"epoch", r.epoch},
                       {"step", r.step},
                       {"image", r.image},
                       {"l_sl", r.l_sl},
                       {"l_seg_t", r.l_seg_t},
                       {"l_total", r.l_total},
                       {"sinkhorn_iterations", r.sinkhorn_iterations},
                       {"sinkhorn_converged", r.sinkhorn_converged},
                       {"marginal_error", r.marginal_error},
                       {"bank_size", r.bank_size},
                       {"accuracy", r.accuracy ? nlohmann::json(*r.accuracy) : nlohmann::json(nullptr)},
                       {"corrected_pixels",
                        r.corrected_pixels ? nlohmann::json(*r.corrected_pixels) : nlohmann::json(nullptr)},
                       {"delta_pseudo", r.delta_pseudo}};
}

bool Corpus::has_truth() const {
    return !images.empty() && std::all_of(images.begin(), images.end(), [](const auto& i) { return i.truth.has_value(); });
}

void Corpus::validate() const {
    if (images.empty()) throw std::invalid_argument("corpus is empty");
    if (classes < 2) throw std::invalid_argument("corpus needs at least two classes");
    for (const auto& img : images) {
        const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
        if (img.features.rows() != n || img.features.cols() != dim)
            throw std::invalid_argument(img.name + ": feature map is not H*W x " + std::to_string(dim));
        if (img.p_st.rank() != 3 || img.p_st.shape[0] != img.height || img.p_st.shape[1] != img.width ||
            img.p_st.shape[2] != classes)
            throw std::invalid_argument(img.name + ": P_ST is not H x W x " + std::to_string(classes));
        validate_prob_map(img.p_st);
        if (img.truth) {
            if (img.truth->height != img.height || img.truth->width != img.width)
                throw std::invalid_argument(img.name + ": truth map shape differs from features");
            img.truth->validate(classes);
        }
    }
}

Corpus corpus_from_world(const World& world) {
    Corpus corpus{world.spec.classes, world.spec.dim, {}};
    for (std::size_t n = 0; n < world.images.size(); ++n) {
        const auto& img = world.images[n];
        corpus.images.push_back(make_image(image_stem(n), img.features, img.p_st, img.truth));
    }
    corpus.validate();
    return corpus;
}

LoadedCorpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw TensorIoError(TensorIoErrc::io, "cannot open " + (dir / "manifest.json").string());
    const auto manifest = nlohmann::json::parse(in);
    LoadedCorpus out;
    out.corpus.classes = manifest.at("classes").get<std::size_t>();
    out.corpus.dim = manifest.at("dim").get<std::size_t>();
    out.input_files.push_back(dir / "manifest.json");
    for (const auto& entry : manifest.at("files")) {
        const auto fpath = dir / entry.at("features").get<std::string>();
        const auto ppath = dir / entry.at("pst").get<std::string>();
        std::optional<HardLabelMap> truth;
        out.input_files.push_back(fpath);
        out.input_files.push_back(ppath);
        if (entry.contains("truth")) {
            const auto tpath = dir / entry.at("truth").get<std::string>();
            truth = load_labels(tpath);
            out.input_files.push_back(tpath);
        }
        out.corpus.images.push_back(make_image(fpath.stem().string(), load_tensor(fpath), load_tensor(ppath), truth));
    }
    out.corpus.validate();
    return out;
}

std::size_t worker_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SELFLAB_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    }
    return n;
}

Tensor to_prob_map(const Matrix& columns, std::uint32_t height, std::uint32_t width) {
    const std::size_t c = columns.rows(), n = columns.cols();
    if (n != static_cast<std::size_t>(height) * width) throw std::invalid_argument("column count is not H*W");
    Tensor t({height, width, static_cast<std::uint32_t>(c)});
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t p = 0; p < n; ++p) t.data[p * c + i] = static_cast<float>(columns(i, p));
    return t;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, const Corpus& corpus, const ReportSink& sink) {
    cfg.validate();
    corpus.validate();
    const std::size_t classes = corpus.classes, n_images = corpus.images.size();

    std::vector<HardLabelMap> hard_pseudo;
    std::vector<Matrix> feature_views;
    hard_pseudo.reserve(n_images);
    for (const auto& img : corpus.images) hard_pseudo.push_back(argmax_labels(img.p_st));
    for (const auto& img : corpus.images) feature_views.push_back(img.features);

    PipelineResult result;
    auto init = init_from_prototypes(feature_views, hard_pseudo, classes);
    result.empty_prototype_classes = init.empty_classes;
    result.head = init.head;
    result.momentum_head = init.head;
    result.labels = hard_pseudo;
    result.bank = FeatureBank(cfg.bank_capacity, corpus.dim);

    DistributionTracker tracker(init_from_corpus(hard_pseudo, classes), cfg.delta_alpha, cfg.marginal_floor);
    result.delta_history.push_back(tracker.probs());

    TrainConfig train{cfg.tau,          cfg.learning_rate, cfg.lr_decay_power, cfg.epochs * n_images,
                      cfg.weight_decay, cfg.sgd_momentum};
    SgdState sgd;
    const SinkhornOptions ot{cfg.epsilon, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol, cfg.sinkhorn_method};
    Rng rng(cfg.seed);

    std::vector<std::size_t> order(n_images);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (const std::size_t n : order) {
            const CorpusImage& img = corpus.images[n];
            const HardLabelMap& hints = cfg.sample_hints == SampleHints::rectified ? result.labels[n] : hard_pseudo[n];

            // Cluster the sampled pixels together with the bank under the aligned marginals.
            SampleSet batch = balanced_sample(img.features, hints, classes, cfg.samples_per_image,
                                              static_cast<std::uint32_t>(n), rng);
            const AugmentedBatch aug = augment(batch, result.bank);
            const Matrix scores = forward(result.head, aug.features, cfg.tau).scores;
            Marginals marginals{cfg.equal_partition ? std::vector<double>(classes, 1.0 / static_cast<double>(classes))
                                                    : tracker.marginal(),
                                std::vector<double>(aug.features.rows(), 1.0 / static_cast<double>(aug.features.rows()))};
            const TransportPlan plan = sinkhorn(scores, marginals, ot);
            if (!plan.converged && ++result.sinkhorn_failures > cfg.max_sinkhorn_failures)
                throw SinkhornBudgetExceeded("image " + img.name + " epoch " + std::to_string(epoch) +
                                             ": Sinkhorn failed to converge " +
                                             std::to_string(result.sinkhorn_failures) + " times (marginal error " +
                                             std::to_string(plan.marginal_error) + ")");

            // Only the current batch's assignments train the head.
            const Matrix targets =
                soft_assignment_from_plan(slice_columns(plan.matrix, aug.current_first, aug.current_count)).probs;
            const LossAndGrad lg = sl_loss_and_grad(result.head, batch.features, targets, cfg.tau);
            sgd_step(result.head, lg.grad, train, sgd, step);
            ema_update(result.momentum_head, result.head, cfg.head_momentum);

            // Rectify P_ST with the momentum head's assignment of every pixel.
            const Tensor p_sl = to_prob_map(forward_all_pixels(result.momentum_head, img.features, cfg.tau),
                                            img.height, img.width);
            Rectified rect = rectify(p_sl, img.p_st);
            tracker.update(class_distribution(rect.labels, classes));
            result.bank.push_batch(batch);

            IterationReport report;
            report.epoch = epoch;
            report.step = step;
            report.image = n;
            report.l_sl = lg.loss;
            report.l_seg_t = cross_entropy(img.p_st, rect.labels, cfg.loss_reduction).value;
            report.l_total = total_loss(report.l_seg_t, 0.0, report.l_sl, 0.0, cfg.lambda1, cfg.lambda2);
            report.sinkhorn_iterations = plan.iterations_used;
            report.sinkhorn_converged = plan.converged;
            report.marginal_error = plan.marginal_error;
            report.bank_size = result.bank.size();
            if (img.truth) {
                std::size_t correct = 0, counted = 0, corrected = 0;
                for (std::size_t p = 0; p < img.truth->pixel_count(); ++p) {
                    const auto t = img.truth->data[p];
                    if (t >= classes) continue;
                    ++counted;
                    if (rect.labels.data[p] == t) {
                        ++correct;
                        if (hard_pseudo[n].data[p] != t) ++corrected;
                    }
                }
                report.accuracy = counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
                report.corrected_pixels = corrected;
            }
            report.delta_pseudo = tracker.probs();
            result.labels[n] = std::move(rect.labels);
            if (sink) sink(report);
            result.reports.push_back(std::move(report));
            ++step;
        }
        result.delta_history.push_back(tracker.probs());
    }
    return result;
}

}  // namespace selflab
