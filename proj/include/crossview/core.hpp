#pragma once

// Shared conventions used throughout the library:
//
//   * Images are H x W x 3, intensities in [0,1], pixel centers at integer
//     coordinates (x = column, y = row). Sampling an image at an exact
//     integer coordinate returns that pixel exactly.
//   * Flow fields are target -> source: a target pixel p stores the
//     displacement to its match, so the source is sampled at p + flow(p).
//   * Token grids are row-major: token i sits at (x = i % w, y = i / w).
//   * Cost volumes are (h*w) x (h*w) with rows indexed by target queries
//     and columns by source positions.

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace crossview {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatX8 = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Grid2 {
  int h = 0;
  int w = 0;
  int count() const { return h * w; }
  bool operator==(const Grid2&) const = default;
};

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error { using Error::Error; };
struct DimensionError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };       // layer / query out of range
struct NumericError : Error { using Error::Error; };
struct GenerationError : Error { using Error::Error; };
struct MatrixError : Error { using Error::Error; };
struct CheckpointError : Error { using Error::Error; };
struct IngestionError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct MetricError : Error { using Error::Error; };
struct ScoreError : Error { using Error::Error; };
struct LossError : Error { using Error::Error; };
struct TrainError : Error { using Error::Error; };
struct UsageError : Error { using Error::Error; };

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

}  // namespace crossview
