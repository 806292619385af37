#pragma once

// Iterative Closest algebraic Plane alignment and maplet-pair hypothesis
// testing.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "maplets/errors.hpp"
#include "maplets/geometry.hpp"
#include "maplets/maplet.hpp"

namespace maplets {

struct PlaneCorrespondence {
  std::size_t index_l = 0;  ///< moving set
  std::size_t index_j = 0;  ///< target set
  double residual = 0.0;    ///< ||pi_j - T(pi_l)||
  double offset_residual = 0.0;  ///< d_j - d of the transformed moving plane
  bool used = true;  ///< false when another pair claimed the same target
};

struct AlignmentResult {
  Pose3 transform;  ///< maps moving-frame coordinates into the target frame
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Identity();
  double final_error = 0.0;  ///< sum of squared residuals over used pairs
  std::size_t iterations = 0;
  std::vector<PlaneCorrespondence> correspondences;
  std::vector<double> error_trace;  ///< final_error after each iteration
  std::vector<double> delta_trace;  ///< ||T_{i+1} - T_i||_F^2 per iteration
  std::size_t stable_from = 0;  ///< first iteration (0-based) using the final correspondences

  std::size_t used_pairs() const {
    return static_cast<std::size_t>(std::count_if(correspondences.begin(), correspondences.end(),
                                                  [](const auto& c) { return c.used; }));
  }
  double mean_error() const {
    const std::size_t n = used_pairs();
    return n == 0 ? std::numeric_limits<double>::infinity() : final_error / static_cast<double>(n);
  }
};

class RoiPolygon {
 public:
  RoiPolygon() = default;

  /// Throws std::invalid_argument unless the polygon is simple with >= 3 vertices.
  explicit RoiPolygon(std::vector<Eigen::Vector2d> vertices) : vertices_(std::move(vertices)) {
    validate();
  }

  /// Regular polygon approximating a disk.
  static RoiPolygon disk(const Eigen::Vector2d& center, double radius, int segments = 32) {
    if (!(radius > 0.0) || segments < 3) throw std::invalid_argument("bad disk ROI");
    std::vector<Eigen::Vector2d> v;
    for (int i = 0; i < segments; ++i) {
      const double a = 2.0 * kPi * i / segments;
      v.push_back(center + radius * Eigen::Vector2d(std::cos(a), std::sin(a)));
    }
    return RoiPolygon(std::move(v));
  }

  const std::vector<Eigen::Vector2d>& vertices() const { return vertices_; }

  /// Even-odd point-in-polygon test.
  bool contains(const Eigen::Vector2d& q) const {
    bool inside = false;
    const std::size_t n = vertices_.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const auto& a = vertices_[i];
      const auto& b = vertices_[j];
      if ((a.y() > q.y()) != (b.y() > q.y())) {
        const double x = a.x() + (q.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
        if (q.x() < x) inside = !inside;
      }
    }
    return inside;
  }

 private:
  static double cross(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
    return (a - o).x() * (b - o).y() - (a - o).y() * (b - o).x();
  }

  static bool segments_intersect(const Eigen::Vector2d& p1, const Eigen::Vector2d& p2,
                                 const Eigen::Vector2d& q1, const Eigen::Vector2d& q2) {
    const double d1 = cross(q1, q2, p1), d2 = cross(q1, q2, p2);
    const double d3 = cross(p1, p2, q1), d4 = cross(p1, p2, q2);
    if (((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) && d1 != 0 && d2 != 0 && d3 != 0 &&
        d4 != 0) {
      return true;
    }
    auto on_segment = [](const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& p) {
      return std::min(a.x(), b.x()) <= p.x() && p.x() <= std::max(a.x(), b.x()) &&
             std::min(a.y(), b.y()) <= p.y() && p.y() <= std::max(a.y(), b.y());
    };
    return (d1 == 0 && on_segment(q1, q2, p1)) || (d2 == 0 && on_segment(q1, q2, p2)) ||
           (d3 == 0 && on_segment(p1, p2, q1)) || (d4 == 0 && on_segment(p1, p2, q2));
  }

  void validate() const {
    const std::size_t n = vertices_.size();
    if (n < 3) throw std::invalid_argument("ROI polygon needs at least 3 vertices");
    for (const auto& v : vertices_) {
      if (!v.allFinite()) throw std::invalid_argument("ROI vertex is not finite");
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
        if (adjacent) continue;
        if (segments_intersect(vertices_[i], vertices_[(i + 1) % n], vertices_[j],
                               vertices_[(j + 1) % n])) {
          throw std::invalid_argument("ROI polygon is self-intersecting");
        }
      }
    }
    double area = 0.0;
    for (std::size_t i = 0; i < n; ++i) area += cross({0, 0}, vertices_[i], vertices_[(i + 1) % n]);
    if (std::abs(area) <= 0.0) throw std::invalid_argument("ROI polygon has zero area");
  }

  std::vector<Eigen::Vector2d> vertices_;
};

namespace detail {

struct RotationSolve {
  Eigen::Matrix3d R;
  bool reflection_fixed = false;  ///< det(U V^T) was negative
};

/// Rotation best mapping moving normals onto target normals.
inline RotationSolve solve_rotation(const Eigen::Matrix3d& cross_covariance) {
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cross_covariance, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d& U = svd.matrixU();
  const Eigen::Matrix3d& V = svd.matrixV();
  const double det = (U * V.transpose()).determinant();
  Eigen::Vector3d diag(1.0, 1.0, det < 0.0 ? -1.0 : 1.0);
  return {U * diag.asDiagonal() * V.transpose(), det < 0.0};
}

/// Marks pairs sharing a target: the lowest-residual pair keeps it (ties go
/// to the earlier pair), the others are unused.
inline void resolve_shared_targets(std::span<PlaneCorrespondence> pairs) {
  for (std::size_t a = 0; a < pairs.size(); ++a) {
    pairs[a].used = true;
    for (std::size_t b = 0; b < pairs.size(); ++b) {
      if (a == b || pairs[a].index_j != pairs[b].index_j) continue;
      if (pairs[b].residual < pairs[a].residual || (pairs[b].residual == pairs[a].residual && b < a)) {
        pairs[a].used = false;
        break;
      }
    }
  }
}

}  // namespace detail

inline constexpr double kMinNormalSingularValue = 1e-6;

/// Closed-form least-squares alignment of paired planes. Pairs with
/// used == false are ignored. Returns T with T(pi_l) ~ pi_j.
inline Pose3 align_plane_pairs(std::span<const PlaneCorrespondence> pairs,
                               std::span<const PlaneHNF> target_j,
                               std::span<const PlaneHNF> moving_l) {
  std::vector<const PlaneCorrespondence*> used;
  for (const auto& c : pairs) {
    if (!c.used) continue;
    if (c.index_j >= target_j.size() || c.index_l >= moving_l.size()) {
      throw OutOfRange("plane correspondence index out of range");
    }
    used.push_back(&c);
  }
  if (used.size() < 3) throw InsufficientPairs("need at least 3 plane pairs");

  const auto m = static_cast<Eigen::Index>(used.size());
  Eigen::MatrixXd N(m, 3);
  Eigen::Matrix3d C = Eigen::Matrix3d::Zero();
  for (Eigen::Index k = 0; k < m; ++k) {
    const PlaneHNF& pl = moving_l[used[k]->index_l];
    const PlaneHNF& pj = target_j[used[k]->index_j];
    C += pj.n * pl.n.transpose();
    N.row(k) = pl.n.transpose();
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> nsvd(N);
  if (nsvd.singularValues()(2) <= kMinNormalSingularValue) {
    throw RankDeficientNormals("paired normals do not span three dimensions");
  }

  const Eigen::Matrix3d R = detail::solve_rotation(C).R;
  // Rotated moving normals and offset differences: N_hat p = d_l - d_j.
  Eigen::MatrixXd Nhat = N * R.transpose();
  Eigen::VectorXd rhs(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    rhs[k] = moving_l[used[k]->index_l].d - target_j[used[k]->index_j].d;
  }
  const Eigen::Vector3d p = (Nhat.transpose() * Nhat).ldlt().solve(Nhat.transpose() * rhs);
  return {R, p};
}

struct IcapParams {
  double tau_T = 1e-10;
  std::size_t max_iters = 50;
  double eps_accept = 0.05;  ///< mean squared residual per used pair
};

/// Generic (x, y, theta) covariance for an accepted alignment, inflated by
/// the fit error relative to the acceptance threshold.
inline Eigen::Matrix3d transform_covariance(const AlignmentResult& r, double eps_accept = 0.05) {
  const double sxy = 0.05, sth = deg2rad(1.0);
  const double scale = std::max(1.0, r.final_error / eps_accept);
  return Eigen::Vector3d(sxy * sxy, sxy * sxy, sth * sth).asDiagonal() * scale;
}

namespace detail {

inline double plane_distance_sq(const PlaneHNF& a, const PlaneHNF& b) {
  return (a.coeffs() - b.coeffs()).squaredNorm();
}

inline std::vector<PlaneCorrespondence> match_closest(std::span<const PlaneHNF> target_j,
                                                      std::span<const PlaneHNF> moving_l,
                                                      const Pose3& T) {
  std::vector<PlaneCorrespondence> pairs;
  pairs.reserve(moving_l.size());
  for (std::size_t l = 0; l < moving_l.size(); ++l) {
    const PlaneHNF moved = transform_plane(T, moving_l[l]);
    std::size_t best = 0;
    double best_sq = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < target_j.size(); ++j) {
      const double sq = plane_distance_sq(target_j[j], moved);
      if (sq < best_sq) {
        best_sq = sq;
        best = j;
      }
    }
    pairs.push_back({l, best, std::sqrt(best_sq), target_j[best].d - moved.d, true});
  }
  resolve_shared_targets(pairs);
  return pairs;
}

/// Refreshes residuals of fixed pairs under T and returns the summed
/// squared residual over used pairs.
inline double score_pairs(std::span<PlaneCorrespondence> pairs, std::span<const PlaneHNF> target_j,
                          std::span<const PlaneHNF> moving_l, const Pose3& T) {
  double err = 0.0;
  for (auto& c : pairs) {
    const PlaneHNF moved = transform_plane(T, moving_l[c.index_l]);
    const double sq = plane_distance_sq(target_j[c.index_j], moved);
    c.residual = std::sqrt(sq);
    c.offset_residual = target_j[c.index_j].d - moved.d;
    if (c.used) err += sq;
  }
  return err;
}

}  // namespace detail

/// Alternates closest-plane matching under the current estimate with the
/// closed-form alignment until the transform stops changing.
inline AlignmentResult icap(std::span<const PlaneHNF> target_j, std::span<const PlaneHNF> moving_l,
                            const Pose3& T0, const IcapParams& params = {}) {
  if (moving_l.size() < 3 || target_j.size() < 3) {
    throw InsufficientPairs("ICaP needs at least 3 planes in each set");
  }
  AlignmentResult result;
  Pose3 T = T0;
  while (true) {
    ++result.iterations;
    auto pairs = detail::match_closest(target_j, moving_l, T);
    const bool same = pairs.size() == result.correspondences.size() &&
                      std::equal(pairs.begin(), pairs.end(), result.correspondences.begin(),
                                 [](const auto& x, const auto& y) {
                                   return x.index_j == y.index_j && x.used == y.used;
                                 });
    if (!same) result.stable_from = result.iterations - 1;
    const Pose3 next = align_plane_pairs(pairs, target_j, moving_l);
    const double delta = (next.matrix() - T.matrix()).squaredNorm();
    T = next;
    result.final_error = detail::score_pairs(pairs, target_j, moving_l, T);
    result.correspondences = std::move(pairs);
    result.error_trace.push_back(result.final_error);
    result.delta_trace.push_back(delta);
    if (delta < params.tau_T) break;
    if (result.iterations >= params.max_iters) {
      throw NoConvergence("ICaP did not converge in " + std::to_string(params.max_iters) +
                          " iterations");
    }
  }
  result.transform = T;
  result.covariance = transform_covariance(result, params.eps_accept);
  return result;
}

inline AlignmentResult icap(std::span<const PlaneHNF> target_j, std::span<const PlaneHNF> moving_l,
                            const Pose3& T0, double tau_T, std::size_t max_iters) {
  IcapParams params;
  params.tau_T = tau_T;
  params.max_iters = max_iters;
  return icap(target_j, moving_l, T0, params);
}

struct NoMatch {
  enum class Reason { TooFewPlanes, Degenerate, NoConvergence, ErrorAboveThreshold };
  Reason reason = Reason::TooFewPlanes;
  double mean_error = std::numeric_limits<double>::infinity();
  std::string detail;
};

inline const char* to_string(NoMatch::Reason r) {
  switch (r) {
    case NoMatch::Reason::TooFewPlanes: return "too_few_planes";
    case NoMatch::Reason::Degenerate: return "degenerate";
    case NoMatch::Reason::NoConvergence: return "no_convergence";
    case NoMatch::Reason::ErrorAboveThreshold: return "error_above_threshold";
  }
  return "unknown";
}

struct PairAlignmentOptions {
  Pose3 initial_guess;  ///< prior for the transform taking maplet a's frame into b's
  IcapParams icap;
};

using PairAlignment = std::variant<AlignmentResult, NoMatch>;

namespace detail {

inline std::vector<PlaneHNF> planes_in_roi(const Maplet& m, const RoiPolygon& roi,
                                           const Pose3& into_roi_frame) {
  std::vector<PlaneHNF> out;
  for (const auto& p : m.planes) {
    const Eigen::Vector3d c = into_roi_frame * p.centroid();
    if (roi.contains(c.head<2>())) out.push_back(p.plane);
  }
  return out;
}

}  // namespace detail

/// Tests the hypothesis that maplets a and b share the geometry inside roi
/// (given in a's frame; b's patches are placed there through the initial
/// guess). On success the transform maps a's frame into b's frame.
inline PairAlignment maplet_pair_alignment(const Maplet& a, const Maplet& b, const RoiPolygon& roi,
                                           const PairAlignmentOptions& options = {}) {
  const Pose3& guess = options.initial_guess;
  const auto planes_a = detail::planes_in_roi(a, roi, Pose3::identity());
  const auto planes_b = detail::planes_in_roi(b, roi, invert(guess));
  if (planes_a.size() < 3 || planes_b.size() < 3) {
    return NoMatch{NoMatch::Reason::TooFewPlanes, std::numeric_limits<double>::infinity(),
                   "candidate sets of " + std::to_string(planes_a.size()) + " and " +
                       std::to_string(planes_b.size()) + " planes"};
  }
  // The smaller set moves.
  const bool a_moves = planes_a.size() <= planes_b.size();
  AlignmentResult r;
  try {
    r = a_moves ? icap(planes_b, planes_a, guess, options.icap)
                : icap(planes_a, planes_b, invert(guess), options.icap);
  } catch (const NoConvergence& e) {
    return NoMatch{NoMatch::Reason::NoConvergence, std::numeric_limits<double>::infinity(), e.what()};
  } catch (const InsufficientPairs& e) {
    return NoMatch{NoMatch::Reason::Degenerate, std::numeric_limits<double>::infinity(), e.what()};
  } catch (const RankDeficientNormals& e) {
    return NoMatch{NoMatch::Reason::Degenerate, std::numeric_limits<double>::infinity(), e.what()};
  }
  if (!a_moves) r.transform = invert(r.transform);
  const double mean = r.mean_error();
  if (mean > options.icap.eps_accept) {
    return NoMatch{NoMatch::Reason::ErrorAboveThreshold, mean, "mean squared residual too large"};
  }
  r.covariance = transform_covariance(r, options.icap.eps_accept);
  return r;
}

}  // namespace maplets
