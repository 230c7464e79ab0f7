#pragma once

// JSON / JSONL / CSV encodings. Client ids are 1-based in every file and
// 0-based in memory.

#include <filesystem>
#include <json.hpp>
#include <string>

#include "agnofed/analysis.hpp"
#include "agnofed/availability.hpp"
#include "agnofed/engine.hpp"

namespace agnofed {

using Json = nlohmann::json;

// {"n_clients": N, "atoms": [{"subset": [ids...], "prob": x}, ...]}
Json to_json(const SubsetDistribution& dist);
SubsetDistribution parse_subset_distribution(const Json& j);

// {"p": [...], "stderr": [...] | null}
Json to_json(const MarginalWeights& weights);
MarginalWeights parse_marginals(const Json& j);

// Sampler descriptors:
//   {"kind": "explicit", "n_clients": N, "atoms": [...]}
//   {"kind": "fixed-size-weighted", "size": M, "weights": [...]}
//   {"kind": "fixed-size-weighted", "size": M, "n_clients": N, "beta": b | "inf"}
//   {"kind": "bernoulli", "probs": [...]}
Json to_json(const ParticipationSampler& sampler);
ParticipationSampler parse_sampler(const Json& j);

Json to_json(const ParamVector& v);
Json to_json(const RoundRecord& record);
Json to_json(const InequalityReport& report);
Json to_json(const RateFit& fit);
Json to_json(const ProblemConstants& constants);

// One JSON object per global round.
void write_trace_jsonl(const std::filesystem::path& path, const RunTrace& trace);
// Client parameters, last aggregate and averaged iterate.
void write_final_state(const std::filesystem::path& path, const RunTrace& trace);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// Shortest decimal form that round-trips; "nan" / "inf" for non-finite.
std::string format_number(double v);

}  // namespace agnofed
