#include "selflab/run_directory.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <stdexcept>

#include "selflab/dist_tracker.hpp"
#include "selflab/synth_world.hpp"

namespace selflab {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw TensorIoError(TensorIoErrc::io, "cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw TensorIoError(TensorIoErrc::io, "write failed for " + path.string());
}

nlohmann::json optional_list(const std::vector<std::optional<double>>& values) {
    auto out = nlohmann::json::array();
    for (const auto& v : values) out.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    return out;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

std::string git_blob_hash(const std::vector<std::uint8_t>& contents) {
    const std::string header = "blob " + std::to_string(contents.size()) + '\0';
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw std::runtime_error("cannot allocate digest context");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, contents.data(), contents.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, digest, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw std::runtime_error("SHA-1 digest failed");
    std::string hex;
    char byte[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(byte, sizeof byte, "%02x", digest[i]);
        hex += byte;
    }
    return hex;
}

nlohmann::json summarize(const Corpus& corpus, const PipelineResult& result) {
    nlohmann::json summary{{"sinkhorn_failures", result.sinkhorn_failures},
                           {"steps", result.reports.size()},
                           {"delta_pseudo", result.delta_history.back()},
                           {"empty_prototype_classes", result.empty_prototype_classes}};
    if (!corpus.has_truth()) return summary;
    ConfusionMatrix rectified(corpus.classes), pseudo(corpus.classes);
    std::vector<HardLabelMap> truths;
    for (std::size_t n = 0; n < corpus.images.size(); ++n) {
        const auto& truth = *corpus.images[n].truth;
        accumulate(rectified, result.labels[n], truth);
        accumulate(pseudo, argmax_labels(corpus.images[n].p_st), truth);
        truths.push_back(truth);
    }
    const Evaluation er = evaluate(rectified), ep = evaluate(pseudo);
    const auto delta_gt = init_from_corpus(truths, corpus.classes);
    summary["delta_gt"] = delta_gt;
    summary["delta_l1_to_gt"] = l1_distance(result.delta_history.back(), delta_gt);
    summary["rectified"] = {{"pixel_accuracy", er.pixel_accuracy}, {"miou", er.miou}, {"mpa", er.mpa},
                            {"iou", optional_list(er.iou)},       {"pa", optional_list(er.pa)}};
    summary["pseudo"] = {{"pixel_accuracy", ep.pixel_accuracy}, {"miou", ep.miou}, {"mpa", ep.mpa},
                         {"iou", optional_list(ep.iou)},       {"pa", optional_list(ep.pa)}};
    return summary;
}

RunOutcome run_to_directory(const PipelineConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.data_dir.empty()) throw std::invalid_argument("run needs a data directory");
    if (cfg.out_dir.empty()) throw std::invalid_argument("run needs an output directory");
    const fs::path data(cfg.data_dir), out(cfg.out_dir);
    const LoadedCorpus loaded = load_corpus(data);

    fs::create_directories(out / "labels");
    std::ofstream report_file(out / "report.jsonl", std::ios::trunc | std::ios::binary);
    if (!report_file) throw TensorIoError(TensorIoErrc::io, "cannot write " + (out / "report.jsonl").string());
    RunOutcome outcome;
    outcome.result = run_pipeline(cfg, loaded.corpus,
                                  [&](const IterationReport& r) { report_file << nlohmann::json(r).dump() << '\n'; });
    report_file.close();
    const PipelineResult& result = outcome.result;

    for (std::size_t n = 0; n < result.labels.size(); ++n)
        save_labels(out / "labels" / (image_stem(n) + ".sll1"), result.labels[n]);
    save_head(out / "weights.slt1", out / "weights.json", result.head, cfg.tau);
    save_head(out / "momentum_weights.slt1", out / "momentum_weights.json", result.momentum_head, cfg.tau);
    result.bank.save(out / "bank.slt1", out / "bank.json");

    std::string deltas;
    for (const auto& d : result.delta_history) deltas += nlohmann::json(d).dump() + '\n';
    write_text(out / "delta_pseudo.jsonl", deltas);

    outcome.summary = summarize(loaded.corpus, result);
    write_text(out / "summary.json", outcome.summary.dump(2) + '\n');

    nlohmann::json inputs = nlohmann::json::array();
    std::string listing;
    for (const auto& f : loaded.input_files) {
        const std::string rel = fs::relative(f, data).generic_string();
        const std::string hash = git_blob_hash(read_file_bytes(f));
        inputs.push_back({{"path", rel}, {"blob_sha1", hash}});
        listing += hash + ' ' + rel + '\n';
    }
    // The output location is not an input; leaving it out keeps manifests of
    // identical runs comparable across directories.
    nlohmann::json config_echo = cfg;
    config_echo.erase("out_dir");
    const nlohmann::json manifest{
        {"tool", "selflab"},
        {"config", config_echo},
        {"seed", cfg.seed},
        {"inputs", inputs},
        {"inputs_hash", git_blob_hash(std::vector<std::uint8_t>(listing.begin(), listing.end()))},
        {"created_at", utc_timestamp()}};
    write_text(out / "manifest.json", manifest.dump(2) + '\n');
    return outcome;
}

}  // namespace selflab
