#include "agnofed/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "agnofed/error.hpp"
#include "agnofed/random.hpp"

namespace agnofed {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) throw IoError(path.string() + ": truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const char buf[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
  out.write(buf, 4);
}

void check_magic(std::uint32_t got, std::uint32_t expected, const std::filesystem::path& path) {
  if (got != expected) {
    std::ostringstream msg;
    msg << path.string() << ": IDX magic " << got << ", expected magic " << expected;
    throw FormatError(msg.str());
  }
}

// Sizes of N near-equal shards; the first (total mod N) get one extra.
std::vector<std::size_t> shard_sizes(std::size_t total, std::size_t n) {
  std::vector<std::size_t> sizes(n, total / n);
  for (std::size_t i = 0; i < total % n; ++i) ++sizes[i];
  return sizes;
}

}  // namespace

std::size_t FederationData::min_client_size() const {
  std::size_t m = datasets.front().size();
  for (const auto& d : datasets) m = std::min(m, d.size());
  return m;
}

void validate_federation(const FederationData& data) {
  if (data.datasets.empty()) throw ValidationError("federation has no clients");
  const std::size_t d = data.datasets.front().dim();
  for (const auto& client : data.datasets) {
    if (client.dim() != d) throw ValidationError("clients disagree on the feature dimension");
    validate_dataset(client, data.model);
  }
}

FederationData generate_regression(const SynthRegressionSpec& spec) {
  if (spec.n_clients < 1 || spec.samples_per_client < 1 || spec.dim < 1) {
    throw ValidationError("synthetic regression counts must be >= 1");
  }
  if (!(spec.noise_std >= 0.0) || !(spec.heterogeneity >= 0.0) || !std::isfinite(spec.noise_std) ||
      !std::isfinite(spec.heterogeneity)) {
    throw ValidationError("noise_std and heterogeneity must be finite and >= 0");
  }
  Rng rng = make_stream(spec.seed, StreamTag::kData);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(spec.dim);
  const auto n = static_cast<Eigen::Index>(spec.samples_per_client);

  ParamVector truth(d);
  for (auto& v : truth) v = normal(rng);

  FederationData out;
  out.model = LossModel::squared_error();
  out.datasets.reserve(spec.n_clients);
  for (std::size_t i = 0; i < spec.n_clients; ++i) {
    ParamVector local(d);
    for (Eigen::Index k = 0; k < d; ++k) local[k] = truth[k] + spec.heterogeneity * normal(rng);
    ClientDataset client;
    client.features.resize(n, d);
    client.targets.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index k = 0; k < d; ++k) client.features(j, k) = normal(rng);
      client.targets[j] = client.features.row(j).dot(local) + spec.noise_std * normal(rng);
    }
    out.datasets.push_back(std::move(client));
  }
  out.ground_truth = std::move(truth);
  out.meta = {{"generator", "synth-regression"},
              {"n_clients", spec.n_clients},
              {"samples_per_client", spec.samples_per_client},
              {"dim", spec.dim},
              {"noise_std", spec.noise_std},
              {"heterogeneity", spec.heterogeneity},
              {"seed", spec.seed}};
  return out;
}

MnistData load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                         std::size_t limit) {
  const auto image_bytes = read_file(images_path);
  const auto label_bytes = read_file(labels_path);

  check_magic(read_be32(image_bytes, 0, images_path), kIdxImageMagic, images_path);
  check_magic(read_be32(label_bytes, 0, labels_path), kIdxLabelMagic, labels_path);

  const std::uint32_t count = read_be32(image_bytes, 4, images_path);
  const std::uint32_t rows = read_be32(image_bytes, 8, images_path);
  const std::uint32_t cols = read_be32(image_bytes, 12, images_path);
  const std::uint32_t label_count = read_be32(label_bytes, 4, labels_path);
  if (count != label_count) {
    std::ostringstream msg;
    msg << "image file holds " << count << " samples but label file holds " << label_count;
    throw ConsistencyError(msg.str());
  }
  const std::size_t pixels = std::size_t{rows} * cols;
  if (image_bytes.size() < 16 + std::size_t{count} * pixels) {
    throw IoError(images_path.string() + ": truncated pixel data");
  }
  if (label_bytes.size() < 8 + std::size_t{count}) throw IoError(labels_path.string() + ": truncated label data");

  const std::size_t keep = limit > 0 ? std::min<std::size_t>(limit, count) : count;
  MnistData out;
  out.rows = rows;
  out.cols = cols;
  out.features.resize(static_cast<Eigen::Index>(keep), static_cast<Eigen::Index>(pixels));
  out.labels.assign(label_bytes.begin() + 8, label_bytes.begin() + 8 + static_cast<std::ptrdiff_t>(keep));
  for (std::size_t s = 0; s < keep; ++s) {
    const std::uint8_t* src = image_bytes.data() + 16 + s * pixels;
    for (std::size_t k = 0; k < pixels; ++k) {
      out.features(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(k)) = src[k] / 255.0;
    }
  }
  return out;
}

void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels, std::uint32_t count,
                      std::uint32_t rows, std::uint32_t cols) {
  if (pixels.size() != std::size_t{count} * rows * cols) throw ValidationError("pixel buffer does not match dims");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  put_be32(out, kIdxImageMagic);
  put_be32(out, count);
  put_be32(out, rows);
  put_be32(out, cols);
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

FederationData partition(const FeatureMatrix& features, const Eigen::VectorXd& labels, std::size_t n_clients,
                         PartitionStrategy strategy, std::uint64_t seed, const LossModel& model) {
  const auto total = static_cast<std::size_t>(features.rows());
  if (labels.size() != features.rows()) throw ValidationError("features and labels disagree in length");
  if (n_clients == 0) throw ValidationError("partition needs N >= 1");
  if (total < n_clients) {
    std::ostringstream msg;
    msg << "cannot split " << total << " samples across " << n_clients << " clients";
    throw CapacityError(msg.str());
  }

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (strategy == PartitionStrategy::kIidShards) {
    Rng rng = make_stream(seed, StreamTag::kData, 1);
    std::shuffle(order.begin(), order.end(), rng);
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return labels[static_cast<Eigen::Index>(a)] < labels[static_cast<Eigen::Index>(b)];
    });
  }

  FederationData out;
  out.model = model;
  out.datasets.reserve(n_clients);
  std::size_t cursor = 0;
  for (std::size_t size : shard_sizes(total, n_clients)) {
    ClientDataset client;
    client.features.resize(static_cast<Eigen::Index>(size), features.cols());
    client.targets.resize(static_cast<Eigen::Index>(size));
    for (std::size_t r = 0; r < size; ++r, ++cursor) {
      const auto src = static_cast<Eigen::Index>(order[cursor]);
      client.features.row(static_cast<Eigen::Index>(r)) = features.row(src);
      client.targets[static_cast<Eigen::Index>(r)] = labels[src];
    }
    out.datasets.push_back(std::move(client));
  }
  out.meta = {{"partition", strategy == PartitionStrategy::kIidShards ? "iid-shards" : "label-sorted"},
              {"n_clients", n_clients},
              {"samples", total},
              {"seed", seed}};
  return out;
}

}  // namespace agnofed
