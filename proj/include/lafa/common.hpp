#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace lafa {

/// Dense row-major matrix; rows are token positions, columns embedding dims.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;

using RecordId = std::uint32_t;

/// Rounds each entry to the nearest float, the precision bundles store.
Matrix round_to_float(const Matrix& m);

// Every error the engine raises on bad input derives from Error; the CLI maps
// them to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define LAFA_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

LAFA_DEFINE_ERROR(IoError);
LAFA_DEFINE_ERROR(FormatError);
LAFA_DEFINE_ERROR(CorruptBundleError);
LAFA_DEFINE_ERROR(SchemaError);
LAFA_DEFINE_ERROR(BoundsError);
LAFA_DEFINE_ERROR(ConfigError);
LAFA_DEFINE_ERROR(InsufficientDataError);
LAFA_DEFINE_ERROR(LookupError);
LAFA_DEFINE_ERROR(ShapeError);
LAFA_DEFINE_ERROR(UndefinedKernelError);
LAFA_DEFINE_ERROR(DivergenceError);
LAFA_DEFINE_ERROR(RangeError);
LAFA_DEFINE_ERROR(UndefinedMetricError);
LAFA_DEFINE_ERROR(DataError);

#undef LAFA_DEFINE_ERROR

/// splitmix64 finalizer; used to derive independent RNG streams from
/// (global seed, stream key) so per-text randomness does not depend on
/// evaluation order.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace lafa
