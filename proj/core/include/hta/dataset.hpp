#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hta/errors.hpp"
#include "hta/linalg.hpp"

namespace hta {

/// One pre-tokenized sequence: content-token features, (tokens-1) x dim.
struct Sample {
  DenseMatrix tokens;
  std::size_t label = 0;
};

struct DatasetMeta {
  std::string generator;
  std::uint64_t seed = 0;
  std::size_t classes = 0;
  std::optional<std::size_t> planted_rank;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> eval;
  DatasetMeta meta;
};

/// Stack the selected samples into one (n * rows_per_sample) x dim matrix,
/// sample order preserved.
inline DenseMatrix fold_batch(const std::vector<Sample>& samples,
                              std::span<const std::size_t> idx) {
  if (idx.empty()) throw ShapeError("fold_batch: empty index set");
  const DenseMatrix& first = samples.at(idx[0]).tokens;
  DenseMatrix out(idx.size() * first.rows(), first.cols());
  std::size_t at = 0;
  for (const std::size_t i : idx) {
    const DenseMatrix& s = samples.at(i).tokens;
    if (s.rows() != first.rows() || s.cols() != first.cols()) {
      throw ShapeError("fold_batch: ragged sample shapes");
    }
    for (std::size_t r = 0; r < s.rows(); ++r) {
      for (std::size_t c = 0; c < s.cols(); ++c) out(at + r, c) = s(r, c);
    }
    at += s.rows();
  }
  return out;
}

inline std::vector<std::size_t> labels_at(const std::vector<Sample>& samples,
                                          std::span<const std::size_t> idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (const std::size_t i : idx) out.push_back(samples.at(i).label);
  return out;
}

}  // namespace hta
