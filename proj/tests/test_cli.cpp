#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oracles.hpp"
#include "selflab/cli.hpp"
#include "selflab/ot_solver.hpp"
#include "selflab/tensor_io.hpp"

using namespace selflab;
namespace fs = std::filesystem;

namespace {

struct Invocation {
    int code = -1;
    std::string out;
};

Invocation invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "selflab");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    Invocation inv;
    inv.code = cli_main(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    inv.out = out.str();
    return inv;
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(); }

struct Scratch {
    fs::path dir;
    explicit Scratch(const char* name) : dir(fs::temp_directory_path() / name) {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE("usage errors exit 2") {
    CHECK(invoke({}).code == 2);
    CHECK(invoke({"frobnicate"}).code == 2);
    CHECK(invoke({"eval", "--pred", "a.sll1"}).code == 2);
    CHECK(invoke({"solve", "--scores", "s.slt1", "--out", "o.slt1", "--bogus"}).code == 2);
    CHECK(invoke({"solve", "--scores", "s.slt1", "--out", "o.slt1", "--method", "fast"}).code == 2);
}

TEST_CASE("operational failures exit 1") {
    Scratch s("selflab_cli_fail");
    CHECK(invoke({"eval", "--pred", (s.dir / "a.sll1").string(), "--truth", (s.dir / "b.sll1").string(), "--classes",
                  "5"})
              .code == 1);
    CHECK(invoke({"run", "--data", (s.dir / "missing").string(), "--out", (s.dir / "r").string()}).code == 1);
    write_json(s.dir / "bad.json", {{"no_such_key", 1}});
    CHECK(invoke({"run", "--config", (s.dir / "bad.json").string(), "--data", s.dir.string(), "--out",
                  (s.dir / "r").string()})
              .code == 1);
}

TEST_CASE("solve writes a plan whose marginals verify") {
    Scratch s("selflab_cli_solve");
    std::mt19937_64 rng(2024);
    const Matrix scores = oracle::random_matrix(rng, 3, 5);
    save_tensor(s.dir / "s.slt1", from_matrix(scores));
    save_tensor(s.dir / "r.slt1", Tensor({3}, std::vector<float>{0.5f, 0.3f, 0.2f}));
    const Invocation ok = invoke({"solve", "--scores", (s.dir / "s.slt1").string(), "--r", (s.dir / "r.slt1").string(),
                                  "--h", "uniform", "--out", (s.dir / "q.slt1").string()});
    REQUIRE(ok.code == 0);
    const auto summary = nlohmann::json::parse(ok.out);
    CHECK(summary.at("converged") == true);
    const Matrix q = to_matrix(load_tensor(s.dir / "q.slt1"));
    CHECK(q.rows() == 3);
    CHECK(q.cols() == 5);
    // The stored plan is single precision, so the check is at float resolution.
    CHECK(marginal_deviation(q, Marginals{{0.5, 0.3, 0.2}, std::vector<double>(5, 0.2)}) <= 1e-6);

    const Invocation starved = invoke({"solve", "--scores", (s.dir / "s.slt1").string(), "--max-iters", "1", "--tol",
                                       "1e-15", "--out", (s.dir / "q2.slt1").string()});
    CHECK(starved.code == 1);
}

TEST_CASE("gen-synthetic, run, eval and inspect-bank end to end") {
    Scratch s("selflab_cli_e2e");
    write_json(s.dir / "world.json", {{"n_images", 3}, {"height", 16}, {"width", 16}, {"regions_per_image", 6}});
    write_json(s.dir / "run.json", {{"samples_per_image", 32}, {"bank_capacity", 128}, {"epochs", 2}});
    const fs::path data = s.dir / "d", out = s.dir / "r";

    REQUIRE(invoke({"gen-synthetic", "--out", data.string(), "--config", (s.dir / "world.json").string(), "--seed",
                    "7"})
                .code == 0);
    CHECK(fs::exists(data / "manifest.json"));
    CHECK(fs::exists(data / "features" / "002.slt1"));

    const Invocation run = invoke({"run", "--config", (s.dir / "run.json").string(), "--data", data.string(), "--out",
                                   out.string()});
    REQUIRE(run.code == 0);
    const auto summary = nlohmann::json::parse(run.out);
    CHECK(summary.at("steps") == 6);
    for (const char* f : {"labels/000.sll1", "labels/002.sll1", "weights.slt1", "weights.json",
                          "momentum_weights.slt1", "momentum_weights.json", "report.jsonl", "delta_pseudo.jsonl",
                          "bank.slt1", "bank.json", "summary.json", "manifest.json"})
        CHECK_MESSAGE(fs::exists(out / f), f);

    std::ifstream report(out / "report.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(report, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("l_sl"));
        CHECK(j.contains("delta_pseudo"));
        ++lines;
    }
    CHECK(lines == 6);

    std::ifstream mf(out / "manifest.json");
    const auto manifest = nlohmann::json::parse(mf);
    CHECK(manifest.at("seed") == 7);
    CHECK(manifest.at("inputs").size() == 10);
    CHECK(manifest.at("inputs")[0].at("blob_sha1").get<std::string>().size() == 40);
    CHECK_FALSE(manifest.at("config").contains("out_dir"));

    const Invocation ev = invoke({"eval", "--pred", (out / "labels" / "001.sll1").string(), "--truth",
                                  (data / "truth" / "001.sll1").string(), "--classes", "5", "--csv",
                                  (s.dir / "log.csv").string()});
    REQUIRE(ev.code == 0);
    const auto metrics = nlohmann::json::parse(ev.out);
    CHECK(metrics.at("iou").size() == 5);
    CHECK(metrics.at("miou").get<double>() >= 0.0);
    CHECK(metrics.at("mpa").get<double>() <= 1.0);
    invoke({"eval", "--pred", (out / "labels" / "001.sll1").string(), "--truth",
            (data / "truth" / "001.sll1").string(), "--classes", "5", "--csv", (s.dir / "log.csv").string()});
    std::ifstream csv(s.dir / "log.csv");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 3);  // header plus two appended rows

    const Invocation bank = invoke({"inspect-bank", "--dir", out.string(), "--classes", "5"});
    REQUIRE(bank.code == 0);
    const auto b = nlohmann::json::parse(bank.out);
    CHECK(b.at("capacity") == 128);
    CHECK(b.at("size") == 128);
    CHECK(b.at("total_pushed") == 192);
}
