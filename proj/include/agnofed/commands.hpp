#pragma once

// Command implementations behind the `agnofed` executable. Each command
// writes human-readable output to `out`, diagnostics to `err`, and returns
// the process exit code.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "agnofed/data.hpp"
#include "agnofed/error.hpp"
#include "agnofed/engine.hpp"
#include "agnofed/io.hpp"

namespace agnofed {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 1;
inline constexpr int kExitInvalid = 2;
inline constexpr int kExitCapacity = 3;
inline constexpr int kExitVerifyFailed = 4;

inline constexpr const char* kVersion = "0.3.0";

// Invalid experiment config; `line` is 1-based, 0 when unknown.
class SpecError : public ValidationError {
 public:
  SpecError(const std::string& message, std::size_t line);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

enum class MarginalsMode { kAuto, kExact, kEstimate };

struct MarginalsSpec {
  MarginalsMode mode = MarginalsMode::kAuto;
  std::size_t draws = 100'000;
};

struct MnistSpec {
  std::filesystem::path images;
  std::filesystem::path labels;
  PartitionStrategy strategy = PartitionStrategy::kIidShards;
  std::size_t limit = 10'000;
  std::size_t n_clients = 100;
  std::uint64_t seed = 0;
};

struct ExperimentSpec {
  std::string task = "synth-regression";  // or "mnist-logistic"
  SynthRegressionSpec synth;
  MnistSpec mnist;
  RunConfig run;
  Json sampler;  // descriptor accepted by parse_sampler
  MarginalsSpec marginals;
  std::vector<std::string> rules{"agnostic"};
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "runs/default";
  bool reference_optimum = true;
  std::size_t constants_theta_samples = 64;  // 0 skips estimate_constants

  // Effective configuration, overrides applied; hashed into the manifest.
  Json config;
};

// Command-line overrides layered on top of a config file.
struct SpecOverrides {
  std::optional<std::uint64_t> seed;  // replaces the seed list with one seed
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::filesystem::path> out;
  std::optional<std::size_t> global_rounds;
  std::optional<std::size_t> local_steps;
  std::optional<double> step_size;
  std::optional<std::size_t> batch_size;
  std::optional<double> radius;
  std::optional<std::vector<std::string>> rules;
};

// Parses the JSON text of an experiment config. Errors carry the line of the
// offending key when it can be located.
ExperimentSpec parse_experiment_spec(const std::string& text, const SpecOverrides& overrides = {});
ExperimentSpec load_experiment_spec(const std::filesystem::path& path, const SpecOverrides& overrides = {});

FederationData build_federation(const ExperimentSpec& spec);

// Sampler with defaults filled from the data (n_clients for beta weights).
ParticipationSampler build_sampler(const Json& descriptor, std::size_t n_clients);

struct ResolvedMarginals {
  MarginalWeights weights;
  std::string mode;  // "exact", "exact-symmetric", "estimate"
};

// kAuto: explicit distributions and symmetric samplers are exact; other
// samplers are enumerated when within limits and estimated otherwise.
ResolvedMarginals resolve_marginals(const ParticipationSampler& sampler, const MarginalsSpec& spec,
                                    std::uint64_t seed);

// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& bytes);

int cmd_run(const ExperimentSpec& spec, std::ostream& out, std::ostream& err);

int cmd_sweep_skew(const ExperimentSpec& base, const std::vector<double>& betas, std::ostream& out,
                   std::ostream& err);

int cmd_marginals(const Json& sampler, MarginalsMode mode, std::size_t draws, std::uint64_t seed,
                  std::ostream& out, std::ostream& err);

struct VerifyOptions {
  bool full = false;
  double shrink_g = 1.0;  // debug: divides G before the checks run
  std::optional<std::filesystem::path> report;
  std::uint64_t seed = 0;
};

int cmd_verify(const VerifyOptions& options, std::ostream& out, std::ostream& err);

int cmd_plot(const std::filesystem::path& csv, const std::string& kind, const std::filesystem::path& svg,
             std::ostream& out, std::ostream& err);

// Maps the library's exception types onto exit codes and prints the message.
int report_exception(std::ostream& err);

}  // namespace agnofed
