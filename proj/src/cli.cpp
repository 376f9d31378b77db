#include "selflab/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "selflab/ot_solver.hpp"
#include "selflab/pipeline.hpp"
#include "selflab/rectify_metrics.hpp"
#include "selflab/run_directory.hpp"
#include "selflab/sampling_bank.hpp"
#include "selflab/synth_world.hpp"

namespace selflab {

namespace {

std::vector<double> load_marginal(const std::string& spec, std::size_t length, const char* name) {
    if (spec == "uniform") return std::vector<double>(length, 1.0 / static_cast<double>(length));
    const Tensor t = load_tensor(spec);
    if (t.element_count() != length)
        throw std::invalid_argument(std::string("marginal ") + name + " has " + std::to_string(t.element_count()) +
                                    " entries, expected " + std::to_string(length));
    std::vector<double> v(t.data.begin(), t.data.end());
    // Stored as float32; restore the exact unit sum before validation.
    double s = 0.0;
    for (double x : v) s += x;
    if (std::abs(s - 1.0) > 1e-5) throw std::invalid_argument(std::string("marginal ") + name + " does not sum to 1");
    for (double& x : v) x /= s;
    return v;
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw TensorIoError(TensorIoErrc::io, "cannot open " + path);
    return nlohmann::json::parse(in);
}

nlohmann::json optional_list(const std::vector<std::optional<double>>& values) {
    auto out = nlohmann::json::array();
    for (const auto& v : values) out.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    return out;
}

std::string csv_cell(const std::optional<double>& v) { return v ? nlohmann::json(*v).dump() : ""; }

struct SolveArgs {
    std::string scores, r = "uniform", h = "uniform", out, method = "log_domain";
    double epsilon = 0.05, tol = 1e-6;
    std::size_t max_iters = 1000;
};

int cmd_solve(const SolveArgs& a) {
    const Tensor st = load_tensor(a.scores);
    if (st.rank() != 2) throw std::invalid_argument("scores must be a rank-2 C x N tensor");
    const Matrix scores = to_matrix(st);
    const Marginals m{load_marginal(a.r, scores.rows(), "r"), load_marginal(a.h, scores.cols(), "h")};
    SinkhornOptions opt{a.epsilon, a.max_iters, a.tol,
                        a.method == "plain" ? SinkhornMethod::plain : SinkhornMethod::log_domain};
    const TransportPlan plan = sinkhorn(scores, m, opt);
    save_tensor(a.out, from_matrix(plan.matrix));
    std::cout << nlohmann::json{{"converged", plan.converged},
                                {"iterations", plan.iterations_used},
                                {"marginal_error", plan.marginal_error},
                                {"classes", scores.rows()},
                                {"samples", scores.cols()}}
                     .dump()
              << '\n';
    return plan.converged ? 0 : 1;
}

struct RunArgs {
    std::string config, data, out;
    std::optional<std::size_t> epochs;
    std::optional<std::uint64_t> seed;
    bool equal_partition = false;
};

int cmd_run(const RunArgs& a) {
    PipelineConfig cfg;
    if (!a.config.empty()) cfg = read_json_file(a.config).get<PipelineConfig>();
    if (!a.data.empty()) cfg.data_dir = a.data;
    if (!a.out.empty()) cfg.out_dir = a.out;
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.seed) cfg.seed = *a.seed;
    if (a.equal_partition) cfg.equal_partition = true;
    const auto start = std::chrono::steady_clock::now();
    const RunOutcome outcome = run_to_directory(cfg);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "run finished: " << outcome.result.reports.size() << " steps in " << seconds << " s\n";
    std::cout << outcome.summary.dump(2) << '\n';
    return 0;
}

struct GenArgs {
    std::string out, config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> images;
    std::optional<double> label_noise, noise_sigma;
};

int cmd_gen(const GenArgs& a) {
    WorldSpec spec;
    if (!a.config.empty()) spec = read_json_file(a.config).get<WorldSpec>();
    if (a.seed) spec.seed = *a.seed;
    if (a.images) spec.n_images = *a.images;
    if (a.label_noise) spec.label_noise = *a.label_noise;
    if (a.noise_sigma) spec.noise_sigma = *a.noise_sigma;
    const World world = generate(spec);
    write_world(a.out, world);
    std::vector<HardLabelMap> pred, truth;
    for (const auto& img : world.images) {
        pred.push_back(argmax_labels(img.p_st));
        truth.push_back(img.truth);
    }
    std::cout << nlohmann::json{{"images", world.images.size()},
                                {"pst_accuracy", oracle_accuracy(pred, truth, world.spec.classes)},
                                {"class_distribution", world.truth_distribution()}}
                     .dump()
              << '\n';
    return 0;
}

struct EvalArgs {
    std::string pred, truth, csv;
    std::size_t classes = 0;
};

int cmd_eval(const EvalArgs& a) {
    const HardLabelMap pred = load_labels(a.pred), truth = load_labels(a.truth);
    const Evaluation e = evaluate(pred, truth, a.classes);
    std::cout << nlohmann::json{{"iou", optional_list(e.iou)},
                                {"miou", e.miou},
                                {"pa", optional_list(e.pa)},
                                {"mpa", e.mpa},
                                {"pixel_accuracy", e.pixel_accuracy}}
                     .dump()
              << '\n';
    if (!a.csv.empty()) {
        const bool fresh = !std::filesystem::exists(a.csv);
        std::ofstream out(a.csv, std::ios::app);
        if (!out) throw TensorIoError(TensorIoErrc::io, "cannot open " + a.csv);
        if (fresh) {
            out << "pred,truth,miou,mpa,pixel_accuracy";
            for (std::size_t c = 0; c < a.classes; ++c) out << ",iou_" << c;
            for (std::size_t c = 0; c < a.classes; ++c) out << ",pa_" << c;
            out << '\n';
        }
        out << a.pred << ',' << a.truth << ',' << nlohmann::json(e.miou).dump() << ','
            << nlohmann::json(e.mpa).dump() << ',' << nlohmann::json(e.pixel_accuracy).dump();
        for (const auto& v : e.iou) out << ',' << csv_cell(v);
        for (const auto& v : e.pa) out << ',' << csv_cell(v);
        out << '\n';
    }
    return 0;
}

struct BankArgs {
    std::string dir;
    std::size_t classes = 0;
};

int cmd_inspect_bank(const BankArgs& a) {
    const std::filesystem::path dir(a.dir);
    const FeatureBank bank = FeatureBank::load(dir / "bank.slt1", dir / "bank.json");
    std::size_t classes = a.classes;
    if (classes == 0)
        for (auto h : bank.hints()) classes = std::max<std::size_t>(classes, h + 1u);
    std::cout << nlohmann::json{{"capacity", bank.capacity()},
                                {"size", bank.size()},
                                {"dim", bank.dim()},
                                {"total_pushed", bank.total_pushed()},
                                {"total_evicted", bank.total_evicted()},
                                {"class_histogram", bank.hint_histogram(classes)}}
                     .dump()
              << '\n';
    return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"selflab: class-balanced pixel self-labeling engine"};
    app.require_subcommand(1);

    SolveArgs solve;
    auto* s = app.add_subcommand("solve", "Entropic OT plan for a score matrix");
    s->set_help_flag("--help", "Print this help message and exit");
    s->add_option("--scores", solve.scores, "C x N score tensor (SLT1)")->required();
    s->add_option("--r", solve.r, "row marginal (SLT1) or 'uniform'");
    s->add_option("--h", solve.h, "column marginal (SLT1) or 'uniform'");
    s->add_option("--epsilon", solve.epsilon)->check(CLI::PositiveNumber);
    s->add_option("--tol", solve.tol)->check(CLI::PositiveNumber);
    s->add_option("--max-iters", solve.max_iters)->check(CLI::PositiveNumber);
    s->add_option("--method", solve.method)->check(CLI::IsMember({"plain", "log_domain"}));
    s->add_option("--out", solve.out, "output plan (SLT1)")->required();

    RunArgs run;
    auto* r = app.add_subcommand("run", "Online self-labeling over a corpus directory");
    r->add_option("--config", run.config, "PipelineConfig JSON");
    r->add_option("--data", run.data, "corpus directory");
    r->add_option("--out", run.out, "output directory");
    r->add_option("--epochs", run.epochs);
    r->add_option("--seed", run.seed);
    r->add_flag("--equal-partition", run.equal_partition, "uniform OT row marginal");

    GenArgs gen;
    auto* g = app.add_subcommand("gen-synthetic", "Write a synthetic corpus");
    g->add_option("--out", gen.out)->required();
    g->add_option("--config", gen.config, "WorldSpec JSON");
    g->add_option("--seed", gen.seed);
    g->add_option("--images", gen.images);
    g->add_option("--label-noise", gen.label_noise);
    g->add_option("--noise-sigma", gen.noise_sigma);

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "IoU / PA / MPA of a label map");
    e->add_option("--pred", ev.pred)->required();
    e->add_option("--truth", ev.truth)->required();
    e->add_option("--classes", ev.classes)->required()->check(CLI::PositiveNumber);
    e->add_option("--csv", ev.csv, "append a CSV row to this file");

    BankArgs bank;
    auto* b = app.add_subcommand("inspect-bank", "Summarize a bank checkpoint");
    b->add_option("--dir", bank.dir, "run directory holding bank.slt1 and bank.json")->required();
    b->add_option("--classes", bank.classes);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        std::cerr << ex.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*s) return cmd_solve(solve);
        if (*r) return cmd_run(run);
        if (*g) return cmd_gen(gen);
        if (*e) return cmd_eval(ev);
        if (*b) return cmd_inspect_bank(bank);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 1;
    }
    return 2;
}

}  // namespace selflab
