#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "agnofed/optimization.hpp"

namespace agnofed {

struct FederationData {
  std::vector<ClientDataset> datasets;
  LossModel model;
  nlohmann::json meta;  // generator description and seed
  std::optional<ParamVector> ground_truth;  // synthetic tasks only

  std::size_t n_clients() const { return datasets.size(); }
  std::size_t feature_dim() const { return datasets.front().dim(); }
  std::size_t param_dim() const { return model.param_dim(feature_dim()); }
  std::size_t min_client_size() const;
};

// Throws ValidationError unless there is at least one client, all clients
// share a feature dimension, and every dataset is valid for the model.
void validate_federation(const FederationData& data);

struct SynthRegressionSpec {
  std::size_t n_clients = 100;
  std::size_t samples_per_client = 50;
  std::size_t dim = 20;
  double noise_std = 0.1;
  double heterogeneity = 0.5;
  std::uint64_t seed = 0;
};

// x ~ N(0, I); theta_i = theta_true + heterogeneity * N(0, I);
// y = x . theta_i + noise_std * N(0, 1). theta_true ~ N(0, I).
FederationData generate_regression(const SynthRegressionSpec& spec);

struct MnistData {
  FeatureMatrix features;  // one row per image, pixels scaled to [0, 1]
  std::vector<std::uint8_t> labels;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
};

inline constexpr std::uint32_t kIdxImageMagic = 2051;  // 0x00000803
inline constexpr std::uint32_t kIdxLabelMagic = 2049;  // 0x00000801

// Reads a big-endian IDX image/label pair. `limit` > 0 keeps only the first
// `limit` samples.
//   FormatError       wrong magic
//   ConsistencyError  image and label counts differ
//   IoError           missing or truncated file
MnistData load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                         std::size_t limit = 0);

void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels, std::uint32_t count,
                      std::uint32_t rows, std::uint32_t cols);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

enum class PartitionStrategy { kIidShards, kLabelSorted };

// Splits samples into N near-equal disjoint shards. IidShards shuffles
// first; LabelSorted stable-sorts by label and splits contiguously.
FederationData partition(const FeatureMatrix& features, const Eigen::VectorXd& labels, std::size_t n_clients,
                         PartitionStrategy strategy, std::uint64_t seed, const LossModel& model);

}  // namespace agnofed
