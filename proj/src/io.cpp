#include "agnofed/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "agnofed/error.hpp"

namespace agnofed {

namespace {

Json ids_json(const Subset& subset) {
  Json out = Json::array();
  for (std::size_t i : subset) out.push_back(i + 1);
  return out;
}

Json numbers_json(const std::vector<double>& v) {
  Json out = Json::array();
  for (double x : v) {
    if (std::isfinite(x)) out.push_back(x);
    else out.push_back(nullptr);
  }
  return out;
}

Json number_or_null(double x) {
  return std::isfinite(x) ? Json(x) : Json(nullptr);
}

const Json& require(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(std::string("missing field \"") + key + "\"");
  return j.at(key);
}

std::vector<double> number_list(const Json& j, const char* key) {
  const Json& arr = require(j, key);
  if (!arr.is_array()) throw ValidationError(std::string("field \"") + key + "\" must be an array");
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& x : arr) {
    if (!x.is_number()) throw ValidationError(std::string("field \"") + key + "\" must hold numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

std::size_t count_field(const Json& j, const char* key) {
  const Json& v = require(j, key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ValidationError(std::string("field \"") + key + "\" must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

double beta_field(const Json& j) {
  const Json& v = require(j, "beta");
  if (v.is_null()) return std::numeric_limits<double>::infinity();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "infinity" || s == "Infinity") return std::numeric_limits<double>::infinity();
    throw ValidationError("field \"beta\" must be a number or \"inf\"");
  }
  if (!v.is_number()) throw ValidationError("field \"beta\" must be a number or \"inf\"");
  return v.get<double>();
}

}  // namespace

Json to_json(const SubsetDistribution& dist) {
  Json atoms = Json::array();
  for (const auto& atom : dist.atoms()) atoms.push_back({{"subset", ids_json(atom.subset)}, {"prob", atom.prob}});
  return {{"n_clients", dist.n_clients()}, {"atoms", std::move(atoms)}};
}

SubsetDistribution parse_subset_distribution(const Json& j) {
  const std::size_t n = count_field(j, "n_clients");
  const Json& atoms_json = require(j, "atoms");
  if (!atoms_json.is_array()) throw ValidationError("field \"atoms\" must be an array");
  std::vector<Atom> atoms;
  for (const auto& a : atoms_json) {
    Atom atom;
    const Json& ids = require(a, "subset");
    if (!ids.is_array()) throw ValidationError("atom \"subset\" must be an array");
    for (const auto& id : ids) {
      if (!id.is_number_integer() || id.get<long long>() < 1) {
        throw ValidationError("client ids are 1-based positive integers");
      }
      atom.subset.push_back(id.get<std::size_t>() - 1);
    }
    const Json& prob = require(a, "prob");
    if (!prob.is_number()) throw ValidationError("atom \"prob\" must be a number");
    atom.prob = prob.get<double>();
    atoms.push_back(std::move(atom));
  }
  return SubsetDistribution(n, std::move(atoms));
}

Json to_json(const MarginalWeights& weights) {
  return {{"p", numbers_json(weights.p)},
          {"stderr", weights.std_error ? numbers_json(*weights.std_error) : Json(nullptr)}};
}

MarginalWeights parse_marginals(const Json& j) {
  MarginalWeights out;
  out.p = number_list(j, "p");
  if (j.contains("stderr") && !j.at("stderr").is_null()) out.std_error = number_list(j, "stderr");
  validate_marginals(out);
  return out;
}

Json to_json(const ParticipationSampler& sampler) {
  return std::visit(
      [](const auto& s) -> Json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, ExplicitSampler>) {
          Json out = to_json(s.distribution);
          out["kind"] = "explicit";
          return out;
        } else if constexpr (std::is_same_v<T, FixedSizeWeightedSampler>) {
          return {{"kind", "fixed-size-weighted"}, {"size", s.size}, {"weights", s.weights}};
        } else {
          return {{"kind", "bernoulli"}, {"probs", s.probs}};
        }
      },
      sampler.variant());
}

ParticipationSampler parse_sampler(const Json& j) {
  const Json& kind_json = require(j, "kind");
  if (!kind_json.is_string()) throw ValidationError("sampler \"kind\" must be a string");
  const auto kind = kind_json.get<std::string>();
  if (kind == "explicit") {
    return ParticipationSampler::explicit_distribution(
        parse_subset_distribution(j.contains("distribution") ? j.at("distribution") : j));
  }
  if (kind == "fixed-size-weighted") {
    const std::size_t size = count_field(j, "size");
    if (j.contains("weights")) return ParticipationSampler::fixed_size_weighted(number_list(j, "weights"), size);
    return ParticipationSampler::fixed_size_weighted(exponential_weights(count_field(j, "n_clients"), beta_field(j)),
                                                     size);
  }
  if (kind == "bernoulli") return ParticipationSampler::bernoulli(number_list(j, "probs"));
  throw ValidationError("unknown sampler kind \"" + kind + "\" (expected explicit, fixed-size-weighted, bernoulli)");
}

Json to_json(const ParamVector& v) {
  return Json(std::vector<double>(v.data(), v.data() + v.size()));
}

Json to_json(const RoundRecord& record) {
  Json out = {{"round", record.round},
              {"subset", ids_json(record.subset)},
              {"subset_size", record.subset.size()},
              {"aggregate", to_json(record.aggregate)},
              {"aggregate_norm", record.aggregate_norm},
              {"objective_aggregate", number_or_null(record.objective_aggregate)},
              {"objective_running_avg", number_or_null(record.objective_running_avg)},
              {"suboptimality", record.suboptimality ? number_or_null(*record.suboptimality) : Json(nullptr)}};
  if (record.window_divergence) out["window_divergence"] = *record.window_divergence;
  return out;
}

Json to_json(const InequalityReport& report) {
  return {{"name", report.name},       {"lhs", number_or_null(report.lhs)},
          {"rhs", number_or_null(report.rhs)}, {"slack", number_or_null(report.slack)},
          {"samples", report.samples}, {"tolerance", report.tolerance},
          {"holds", report.holds},     {"note", report.note}};
}

Json to_json(const RateFit& fit) {
  return {{"horizons", fit.horizons},
          {"suboptimalities", fit.suboptimalities},
          {"excluded", fit.excluded},
          {"slope", fit.slope},
          {"intercept", fit.intercept},
          {"r_squared", fit.r_squared}};
}

Json to_json(const ProblemConstants& constants) {
  return {{"G", constants.gradient_bound},
          {"sigma", constants.client_sigma},
          {"sigma_sq", constants.sigma_sq},
          {"lipschitz", constants.lipschitz},
          {"theta_samples", constants.theta_samples}};
}

void write_trace_jsonl(const std::filesystem::path& path, const RunTrace& trace) {
  std::ostringstream out;
  for (const auto& record : trace.rounds) out << to_json(record).dump() << '\n';
  write_text(path, out.str());
}

void write_final_state(const std::filesystem::path& path, const RunTrace& trace) {
  Json clients = Json::array();
  for (const auto& theta : trace.final_state.client_params) clients.push_back(to_json(theta));
  const Json out = {{"rule", trace.rule},
                    {"seed", trace.seed},
                    {"clock", trace.final_state.clock},
                    {"aggregations", trace.final_state.aggregations},
                    {"last_aggregate", to_json(trace.final_state.last_aggregate)},
                    {"averaged_iterate", to_json(trace.averaged)},
                    {"client_params", std::move(clients)}};
  write_text(path, out.dump(2) + "\n");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace agnofed
