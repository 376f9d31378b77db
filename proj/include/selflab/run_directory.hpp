#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "selflab/pipeline.hpp"

namespace selflab {

/// Git blob hash: SHA-1 of "blob <size>\0" followed by the file contents, as hex.
std::string git_blob_hash(const std::vector<std::uint8_t>& contents);

/// Final-label quality against truth; empty object when the corpus has no truth.
nlohmann::json summarize(const Corpus& corpus, const PipelineResult& result);

struct RunOutcome {
    PipelineResult result;
    nlohmann::json summary;
};

/// Loads cfg.data_dir, runs the pipeline, and writes to cfg.out_dir:
///   labels/NNN.sll1, weights.slt1 + weights.json, momentum_weights.slt1 + .json,
///   report.jsonl, delta_pseudo.jsonl, bank.slt1 + bank.json, summary.json, manifest.json.
/// Everything except manifest.json's "created_at" is a pure function of config and inputs.
RunOutcome run_to_directory(const PipelineConfig& cfg);

}  // namespace selflab
