#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <string>

#include "lafa/common.hpp"

namespace lafa {

enum class KernelFamily { RBF, Cubic, Cosine, Laplacian, L2Clip, Indicator };

inline constexpr std::array<KernelFamily, 6> kAllKernelFamilies{
    KernelFamily::RBF,       KernelFamily::Cubic,  KernelFamily::Cosine,
    KernelFamily::Laplacian, KernelFamily::L2Clip, KernelFamily::Indicator};

/// Kernel family plus parameters; each family reads only its own fields.
struct KernelSpec {
  KernelFamily family = KernelFamily::Indicator;
  double l = 2.0;
  double gamma = 7.0;
  double c0 = 0.0;
  int degree = 3;
  double clip_left = 0.3;
  double clip_right = 3.0;

  bool operator==(const KernelSpec&) const = default;
};

std::string to_string(KernelFamily family);
/// Accepts the family names case-insensitively ("rbf", "l2clip" / "l2", ...).
KernelFamily kernel_family_from_string(const std::string& name);

/// Throws ConfigError on invalid parameters.
void validate(const KernelSpec& spec);

/// JSON object `{"family", "l"?, "gamma"?, "c0"?, "degree"?, "clip_left"?, "clip_right"?}`.
std::string kernel_to_json(const KernelSpec& spec);
KernelSpec kernel_from_json(const std::string& text);

/// Evaluates k(a, b) for any pair of Eigen vector expressions sharing a
/// scalar type. Row and column vectors mix freely.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar eval_kernel(const KernelSpec& spec, const Eigen::MatrixBase<DerivedA>& a_in,
                                      const Eigen::MatrixBase<DerivedB>& b_in) {
  using Scalar = typename DerivedA::Scalar;
  static_assert(std::is_same_v<Scalar, typename DerivedB::Scalar>, "kernel operands must share a scalar type");
  if (a_in.size() != b_in.size()) {
    throw ShapeError("kernel operands have dimensions " + std::to_string(a_in.size()) + " and " +
                     std::to_string(b_in.size()));
  }
  const auto a = a_in.reshaped();
  const auto b = b_in.reshaped();
  const Scalar l2 = Scalar(spec.l) * Scalar(spec.l);
  switch (spec.family) {
    case KernelFamily::RBF:
      // Unsquared norm in the exponent.
      return std::exp(-(a - b).norm() / l2);
    case KernelFamily::Cubic:
      return std::pow(Scalar(spec.gamma) * a.dot(b) + Scalar(spec.c0), spec.degree);
    case KernelFamily::Cosine: {
      const Scalar denom = a.norm() * b.norm();
      if (denom == Scalar(0)) throw UndefinedKernelError("cosine kernel undefined for a zero vector");
      return a.dot(b) / denom;
    }
    case KernelFamily::Laplacian:
      return std::exp(-(a - b).template lpNorm<1>() / l2);
    case KernelFamily::L2Clip:
      return Scalar(1) / std::clamp((a - b).norm(), Scalar(spec.clip_left), Scalar(spec.clip_right));
    case KernelFamily::Indicator: {
      // Bit-identical vectors, i.e. the same embedding-table row.
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (std::bit_cast<std::array<unsigned char, sizeof(Scalar)>>(Scalar(a(i))) !=
            std::bit_cast<std::array<unsigned char, sizeof(Scalar)>>(Scalar(b(i)))) {
          return Scalar(0);
        }
      }
      return Scalar(1);
    }
  }
  return Scalar(0);
}

}  // namespace lafa
