#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/nn.hpp"

namespace fedsim::testing {

inline nn::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                                double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  nn::Matrix m(rows, cols);
  for (auto& v : m.data) v = u(rng);
  return m;
}

inline std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> u(0, classes - 1);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

inline double max_abs_diff(const nn::ModelParams& a, const nn::ModelParams& b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.arrays.size(); ++k) {
    for (std::size_t i = 0; i < a.arrays[k].size(); ++i) {
      worst = std::max(worst, std::abs(a.arrays[k][i] - b.arrays[k][i]));
    }
  }
  return worst;
}

inline double max_abs_diff(const nn::MlpModel& a, const nn::MlpModel& b) {
  return max_abs_diff(nn::to_params(a), nn::to_params(b));
}

/// Dataset with `per_class` rows per class in class-major order.
inline data::Dataset toy_dataset(std::size_t classes, std::size_t per_class, std::size_t dim,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  data::Dataset ds;
  ds.num_classes = classes;
  ds.features = nn::Matrix(classes * per_class, dim);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = c * per_class + i;
      for (std::size_t d = 0; d < dim; ++d) ds.features(r, d) = u(rng);
      ds.labels.push_back(c);
    }
  }
  return ds;
}

inline data::ClientShard shard_from_rows(const data::Dataset& ds, std::size_t id, std::size_t first,
                                         std::size_t count) {
  data::ClientShard s;
  s.client_id = id;
  s.features = nn::slice_rows(ds.features, first, count);
  s.labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(first),
                  ds.labels.begin() + static_cast<std::ptrdiff_t>(first + count));
  for (std::size_t i = 0; i < count; ++i) s.source_rows.push_back(first + i);
  return s;
}

}  // namespace fedsim::testing
