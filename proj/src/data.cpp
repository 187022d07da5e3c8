#include "fedsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>

#include "fedsim/error.hpp"

namespace fedsim::data {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

codec::Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ClientShard make_shard(const Dataset& ds, std::size_t client_id, std::vector<std::size_t> rows) {
  ClientShard s;
  s.client_id = client_id;
  s.features = nn::gather_rows(ds.features, rows);
  s.labels.reserve(rows.size());
  for (auto r : rows) s.labels.push_back(ds.labels[r]);
  s.source_rows = std::move(rows);
  return s;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> rows) {
  Dataset out;
  out.features = nn::gather_rows(ds.features, rows);
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(ds.labels[r]);
  out.num_classes = ds.num_classes;
  return out;
}

}  // namespace

void Dataset::validate() const {
  if (labels.empty()) throw DataError("dataset is empty");
  if (features.rows != labels.size()) throw DataError("feature rows != label count");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                      " >= num_classes " + std::to_string(num_classes));
    }
  }
  for (double v : features.data) {
    if (!std::isfinite(v)) throw DataError("non-finite feature value");
  }
}

const char* partition_mode_name(PartitionMode m) {
  switch (m) {
    case PartitionMode::balanced_iid: return "balanced_iid";
    case PartitionMode::imbalanced_iid: return "imbalanced_iid";
    case PartitionMode::imbalanced_noniid: return "imbalanced_noniid";
  }
  return "?";
}

PartitionMode parse_partition_mode(std::string_view name) {
  if (name == "balanced_iid") return PartitionMode::balanced_iid;
  if (name == "imbalanced_iid") return PartitionMode::imbalanced_iid;
  if (name == "imbalanced_noniid") return PartitionMode::imbalanced_noniid;
  throw ConfigError("unknown partition mode '" + std::string(name) + "'");
}

std::string size_profile_name(const SizeProfile& p) {
  switch (p.kind) {
    case SizeProfile::Kind::equal: return "equal";
    case SizeProfile::Kind::ratio_4211: return "ratio_4211";
    case SizeProfile::Kind::power_law: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "power_law(%g)", p.alpha);
      return buf;
    }
  }
  return "?";
}

SizeProfile parse_size_profile(std::string_view text) {
  if (text == "equal") return {SizeProfile::Kind::equal, 1.0};
  if (text == "ratio_4211") return {SizeProfile::Kind::ratio_4211, 1.0};
  if (text == "power_law") return {SizeProfile::Kind::power_law, 1.0};
  constexpr std::string_view prefix = "power_law(";
  if (text.starts_with(prefix) && text.ends_with(")")) {
    const std::string inner(text.substr(prefix.size(), text.size() - prefix.size() - 1));
    char* end = nullptr;
    const double alpha = std::strtod(inner.c_str(), &end);
    if (end != inner.c_str() && *end == '\0' && std::isfinite(alpha) && alpha >= 0.0) {
      return {SizeProfile::Kind::power_law, alpha};
    }
  }
  throw ConfigError("unknown size profile '" + std::string(text) + "'");
}

Dataset load_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                 std::size_t num_classes) {
  codec::ByteReader img(images);
  if (const auto magic = img.u32_be(); magic != kIdxImagesMagic) {
    throw FormatError("bad IDX image magic", 0);
  }
  const std::size_t count = img.u32_be();
  const std::size_t rows = img.u32_be();
  const std::size_t cols = img.u32_be();

  codec::ByteReader lab(labels);
  if (const auto magic = lab.u32_be(); magic != kIdxLabelsMagic) {
    throw FormatError("bad IDX label magic", 0);
  }
  const std::size_t label_count_at = lab.offset();
  const std::size_t label_count = lab.u32_be();
  if (label_count != count) {
    throw FormatError("image count " + std::to_string(count) + " != label count " +
                          std::to_string(label_count),
                      label_count_at);
  }

  const std::size_t pixels = rows * cols;
  if (img.remaining() < count * pixels) {
    throw FormatError("truncated IDX image payload", img.offset() + img.remaining());
  }
  if (lab.remaining() < count) {
    throw FormatError("truncated IDX label payload", lab.offset() + lab.remaining());
  }

  Dataset ds;
  ds.features = nn::Matrix(count, pixels);
  auto px = img.take(count * pixels);
  for (std::size_t i = 0; i < px.size(); ++i) ds.features.data[i] = px[i] / 255.0;
  auto lb = lab.take(count);
  ds.labels.assign(lb.begin(), lb.end());
  std::size_t max_label = 0;
  for (auto l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = num_classes == 0 ? (count == 0 ? 0 : max_label + 1) : num_classes;
  if (count > 0 && max_label >= ds.num_classes) {
    throw DataError("label " + std::to_string(max_label) + " >= num_classes " +
                    std::to_string(ds.num_classes));
  }
  return ds;
}

Dataset load_idx_files(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::size_t num_classes) {
  return load_idx(read_file(images), read_file(labels), num_classes);
}

codec::Bytes export_idx_images(const Dataset& ds, std::size_t rows, std::size_t cols) {
  if (rows * cols != ds.features.cols) throw ShapeError("image shape does not match feature width");
  codec::ByteWriter w;
  w.u32_be(kIdxImagesMagic);
  w.u32_be(static_cast<std::uint32_t>(ds.size()));
  w.u32_be(static_cast<std::uint32_t>(rows));
  w.u32_be(static_cast<std::uint32_t>(cols));
  for (double v : ds.features.data) {
    w.u8(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return std::move(w).bytes();
}

codec::Bytes export_idx_labels(const Dataset& ds) {
  codec::ByteWriter w;
  w.u32_be(kIdxLabelsMagic);
  w.u32_be(static_cast<std::uint32_t>(ds.size()));
  for (auto l : ds.labels) {
    if (l > 255) throw DataError("label does not fit in an IDX byte");
    w.u8(static_cast<std::uint8_t>(l));
  }
  return std::move(w).bytes();
}

Dataset synth_blobs(std::size_t num_classes, std::size_t per_class, std::size_t dim,
                    double separation, double noise_sigma, std::uint64_t seed) {
  if (dim < 1) throw ConfigError("synth_blobs: dim must be >= 1");
  if (num_classes < 1 || per_class < 1) throw ConfigError("synth_blobs: counts must be >= 1");
  if (!(separation > 0.0)) throw ConfigError("synth_blobs: separation must be > 0");
  if (!(noise_sigma >= 0.0)) throw ConfigError("synth_blobs: noise_sigma must be >= 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
  Dataset ds;
  ds.num_classes = num_classes;
  ds.features = nn::Matrix(num_classes * per_class, dim);
  ds.labels.reserve(num_classes * per_class);
  std::size_t row = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<double> center(dim, 0.0);
    if (dim >= num_classes) {
      center[c] = separation;
    } else if (dim >= 2) {
      const double theta = 2.0 * std::numbers::pi * static_cast<double>(c) /
                           static_cast<double>(num_classes);
      center[0] = separation * std::cos(theta);
      center[1] = separation * std::sin(theta);
    } else {
      center[0] = separation * static_cast<double>(c);
    }
    for (std::size_t i = 0; i < per_class; ++i, ++row) {
      for (std::size_t k = 0; k < dim; ++k) {
        ds.features(row, k) = center[k] + (noise_sigma > 0.0 ? noise(rng) : 0.0);
      }
      ds.labels.push_back(c);
    }
  }

  for (std::size_t k = 0; k < dim; ++k) {
    double lo = ds.features(0, k), hi = lo;
    for (std::size_t i = 1; i < ds.features.rows; ++i) {
      lo = std::min(lo, ds.features(i, k));
      hi = std::max(hi, ds.features(i, k));
    }
    const double span = hi - lo;
    for (std::size_t i = 0; i < ds.features.rows; ++i) {
      ds.features(i, k) = span > 0.0 ? (ds.features(i, k) - lo) / span : 0.0;
    }
  }
  return ds;
}

std::pair<Dataset, Dataset> holdout_per_class(const Dataset& ds, std::size_t test_per_class) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  std::vector<std::size_t> train, test;
  for (const auto& rows : by_class) {
    if (rows.size() <= test_per_class) {
      throw DataError("holdout: a class has " + std::to_string(rows.size()) +
                      " rows, cannot hold out " + std::to_string(test_per_class));
    }
    const std::size_t cut = rows.size() - test_per_class;
    train.insert(train.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cut));
    test.insert(test.end(), rows.begin() + static_cast<std::ptrdiff_t>(cut), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {subset(ds, train), subset(ds, test)};
}

Dataset take_per_class(const Dataset& ds, std::size_t per_class) {
  std::vector<std::size_t> taken(ds.num_classes, 0);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (taken[ds.labels[i]] < per_class) {
      ++taken[ds.labels[i]];
      rows.push_back(i);
    }
  }
  return subset(ds, rows);
}

std::vector<double> profile_weights(const SizeProfile& profile, std::size_t n_clients) {
  std::vector<double> w(n_clients, 1.0);
  for (std::size_t j = 0; j < n_clients; ++j) {
    switch (profile.kind) {
      case SizeProfile::Kind::equal: break;
      case SizeProfile::Kind::ratio_4211: {
        static constexpr double kCycle[] = {4.0, 2.0, 1.0, 1.0};
        w[j] = kCycle[j % 4];
        break;
      }
      case SizeProfile::Kind::power_law:
        w[j] = std::pow(static_cast<double>(j + 1), -profile.alpha);
        break;
    }
  }
  return w;
}

std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (weights.empty() || !(sum > 0.0)) throw PartitionError("size weights must sum to > 0");
  std::vector<std::size_t> out(weights.size());
  std::vector<double> frac(weights.size());
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    const double quota = static_cast<double>(total) * weights[j] / sum;
    out[j] = static_cast<std::size_t>(std::floor(quota));
    frac[j] = quota - static_cast<double>(out[j]);
    assigned += out[j];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++out[order[i % order.size()]];
  return out;
}

std::vector<ClientShard> partition(const Dataset& ds, const PartitionSpec& spec) {
  const std::size_t n = spec.n_clients;
  if (n < 1) throw PartitionError("n_clients must be >= 1");
  if (spec.labels_per_client < 1) throw PartitionError("labels_per_client must be >= 1");
  if (ds.size() < n) {
    throw PartitionError("dataset has " + std::to_string(ds.size()) + " rows, fewer than " +
                         std::to_string(n) + " clients");
  }
  if (spec.mode == PartitionMode::balanced_iid &&
      spec.size_profile.kind != SizeProfile::Kind::equal) {
    throw PartitionError("balanced_iid requires the equal size profile");
  }

  const auto order = shuffled_indices(ds.size(), spec.seed);
  std::vector<ClientShard> shards;
  shards.reserve(n);

  if (spec.mode != PartitionMode::imbalanced_noniid) {
    std::vector<std::size_t> sizes;
    if (spec.mode == PartitionMode::balanced_iid) {
      sizes.assign(n, ds.size() / n);
    } else {
      const auto w = profile_weights(spec.size_profile, n);
      sizes = apportion(ds.size(), w);
    }
    std::size_t pos = 0;
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                    order.begin() + static_cast<std::ptrdiff_t>(pos + sizes[j]));
      pos += sizes[j];
      shards.push_back(make_shard(ds, j, std::move(rows)));
    }
    return shards;
  }

  // Label-sorted slicing. The n * L pieces are spread over the present labels as evenly
  // as possible and handed out round-robin, so consecutive pieces of one label always
  // belong to distinct clients as long as L <= number of labels.
  std::vector<std::vector<std::size_t>> by_label(ds.num_classes);
  for (auto r : order) by_label[ds.labels[r]].push_back(r);
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    if (!by_label[c].empty()) present.push_back(c);
  }
  const std::size_t L = spec.labels_per_client;
  if (L > present.size()) {
    throw PartitionError("labels_per_client " + std::to_string(L) + " exceeds the " +
                         std::to_string(present.size()) + " labels present in the dataset");
  }
  const std::size_t pieces = n * L;
  const auto weights = profile_weights(spec.size_profile, n);
  std::vector<std::vector<std::size_t>> client_rows(n);
  std::size_t piece = 0;
  for (std::size_t li = 0; li < present.size(); ++li) {
    const auto& rows = by_label[present[li]];
    const std::size_t count = pieces / present.size() + (li < pieces % present.size() ? 1 : 0);
    if (count == 0) continue;
    if (rows.size() < count) {
      throw PartitionError("label " + std::to_string(present[li]) + " has " +
                           std::to_string(rows.size()) + " rows but must be split across " +
                           std::to_string(count) + " clients");
    }
    std::vector<double> piece_weights;
    for (std::size_t q = 0; q < count; ++q) piece_weights.push_back(weights[(piece + q) % n]);
    // One row each first so no piece is empty, the rest by profile weight.
    auto sizes = apportion(rows.size() - count, piece_weights);
    std::size_t pos = 0;
    for (std::size_t q = 0; q < count; ++q, ++piece) {
      const std::size_t len = sizes[q] + 1;
      auto& dst = client_rows[piece % n];
      dst.insert(dst.end(), rows.begin() + static_cast<std::ptrdiff_t>(pos),
                 rows.begin() + static_cast<std::ptrdiff_t>(pos + len));
      pos += len;
    }
  }
  for (std::size_t j = 0; j < n; ++j) shards.push_back(make_shard(ds, j, std::move(client_rows[j])));
  return shards;
}

std::vector<Chunk> chunk_shard(const ClientShard& shard, std::size_t chunk_size) {
  if (chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
  std::vector<Chunk> chunks;
  const std::size_t m = shard.size();
  const std::size_t full = m / chunk_size;
  for (std::size_t i = 0; i < full; ++i) chunks.push_back({i * chunk_size, chunk_size, false});
  if (m % chunk_size != 0) chunks.push_back({full * chunk_size, m % chunk_size, true});
  return chunks;
}

}  // namespace fedsim::data
