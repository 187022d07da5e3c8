#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/codec.hpp"
#include "fedsim/nn.hpp"

namespace fedsim::data {

struct Dataset {
  nn::Matrix features;  // N x d, entries in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  /// Throws DataError when labels, shape or feature range are inconsistent.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

/// One client's private rows. `source_rows` indexes the parent dataset.
struct ClientShard {
  std::size_t client_id = 0;
  nn::Matrix features;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> source_rows;

  std::size_t size() const { return labels.size(); }

  bool operator==(const ClientShard&) const = default;
};

enum class PartitionMode { balanced_iid, imbalanced_iid, imbalanced_noniid };

const char* partition_mode_name(PartitionMode m);
PartitionMode parse_partition_mode(std::string_view name);

struct SizeProfile {
  enum class Kind { equal, ratio_4211, power_law };
  Kind kind = Kind::equal;
  double alpha = 1.0;  // power_law exponent

  bool operator==(const SizeProfile&) const = default;
};

std::string size_profile_name(const SizeProfile& p);
/// Accepts "equal", "ratio_4211", "power_law" or "power_law(<alpha>)".
SizeProfile parse_size_profile(std::string_view text);

struct PartitionSpec {
  PartitionMode mode = PartitionMode::balanced_iid;
  std::size_t n_clients = 1;
  std::size_t labels_per_client = 1;
  SizeProfile size_profile{};
  std::uint64_t seed = 0;
};

/// Parses an IDX3 image buffer and an IDX1 label buffer. Pixels are scaled by 1/255
/// and each image is flattened row-major. `num_classes == 0` infers max label + 1.
Dataset load_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                 std::size_t num_classes = 0);
Dataset load_idx_files(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::size_t num_classes = 0);

/// Writes features (rounded to u8 after *255) as IDX3 with the given image shape.
codec::Bytes export_idx_images(const Dataset& ds, std::size_t rows, std::size_t cols);
codec::Bytes export_idx_labels(const Dataset& ds);

/// Gaussian blobs, class-major row order, min-max scaled per feature to [0, 1].
/// Class c is centred at separation * u_c: the c-th basis vector when dim >= classes,
/// otherwise evenly spaced on the unit circle of the first two axes (dim >= 2) or
/// at c on the line (dim == 1).
Dataset synth_blobs(std::size_t num_classes, std::size_t per_class, std::size_t dim,
                    double separation, double noise_sigma, std::uint64_t seed);

/// Moves the last `test_per_class` rows of every class into a test set.
std::pair<Dataset, Dataset> holdout_per_class(const Dataset& ds, std::size_t test_per_class);

/// Keeps the first `per_class` rows of every class, preserving row order.
Dataset take_per_class(const Dataset& ds, std::size_t per_class);

/// Relative client weights for a profile: equal -> 1s, ratio_4211 -> 4,2,1,1 repeating,
/// power_law(a) -> (j+1)^-a.
std::vector<double> profile_weights(const SizeProfile& profile, std::size_t n_clients);

/// Largest-remainder split of `total` into integers proportional to `weights`;
/// leftover units go to the largest fractional parts, lower index first.
std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights);

std::vector<ClientShard> partition(const Dataset& ds, const PartitionSpec& spec);

struct Chunk {
  std::size_t first_row = 0;
  std::size_t rows = 0;
  bool remainder = false;

  bool operator==(const Chunk&) const = default;
};

/// floor(m / chunk_size) full chunks in shard order, then a flagged remainder chunk if
/// m is not a multiple of chunk_size.
std::vector<Chunk> chunk_shard(const ClientShard& shard, std::size_t chunk_size);

}  // namespace fedsim::data
