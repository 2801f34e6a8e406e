#pragma once

#include <Eigen/Dense>

#include <compare>
#include <cstdint>
#include <set>
#include <vector>

namespace rise {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixXd = Matrix<double>;
using RowVectorXd = RowVector<double>;

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

/// A (layer, expert) coordinate. Ordered lexicographically, which is also the
/// tie-break order used by every ranking in the library.
struct ExpertId {
  int layer = 0;
  int expert = 0;

  auto operator<=>(const ExpertId&) const = default;
};

using ExpertSet = std::set<ExpertId>;

}  // namespace rise
