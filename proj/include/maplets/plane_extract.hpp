#pragma once

// Quadtree planar-patch extraction from depth frames, plus the patch
// utilities (transformation, duplicate merging) shared with maplet building.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "maplets/depth_frame.hpp"
#include "maplets/errors.hpp"
#include "maplets/geometry.hpp"

namespace maplets {

/// A bounded planar surface: a rectangle lying on `plane`, corners ordered
/// counter-clockwise when viewed from the side the normal points to.
struct PlanarPatch {
  PlaneHNF plane;
  std::array<Eigen::Vector3d, 4> corners{};
  double rms = 0.0;
  std::uint32_t support = 0;

  Eigen::Vector3d centroid() const {
    return 0.25 * (corners[0] + corners[1] + corners[2] + corners[3]);
  }
  double area() const {
    return (corners[1] - corners[0]).norm() * (corners[3] - corners[0]).norm();
  }
};

/// Serialized size of one patch: 4 f32 plane + 12 f32 corners + f32 rms +
/// u32 support.
inline constexpr std::size_t kPatchBytes = 72;

struct PlaneFit {
  PlaneHNF plane;
  double rms = 0.0;
};

/// Orthonormal in-plane basis (e1, e2) with e1 x e2 = n. e1 is built from the
/// coordinate axis least aligned with n so that walls and floors get
/// axis-aligned rectangles.
inline std::pair<Eigen::Vector3d, Eigen::Vector3d> plane_basis(const Eigen::Vector3d& n) {
  int axis = 0;
  for (int i = 1; i < 3; ++i) {
    if (std::abs(n[i]) < std::abs(n[axis])) axis = i;
  }
  const Eigen::Vector3d a = Eigen::Vector3d::Unit(axis);
  const Eigen::Vector3d e1 = (a - a.dot(n) * n).normalized();
  return {e1, n.cross(e1)};
}

/// Total least squares plane through `points` (centroid plus smallest
/// eigenvector of the scatter matrix), canonicalized to the sensor-frame
/// sign convention.
inline PlaneFit fit_plane_lsq(std::span<const Eigen::Vector3d> points) {
  if (points.size() < 4) throw DegenerateGeometry("plane fit needs at least 4 points");
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : points) centroid += p;
  centroid /= static_cast<double>(points.size());
  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  for (const auto& p : points) {
    const Eigen::Vector3d q = p - centroid;
    scatter.noalias() += q * q.transpose();
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
  const Eigen::Vector3d ev = eig.eigenvalues();
  if (!(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2]) {
    throw DegenerateGeometry("points are collinear or coincident");
  }
  const Eigen::Vector3d n = eig.eigenvectors().col(0);
  PlaneFit fit;
  fit.plane = canonicalize_plane({n.x(), n.y(), n.z(), -n.dot(centroid)});
  double sum_sq = 0.0;
  for (const auto& p : points) {
    const double r = fit.plane.signed_distance(p);
    sum_sq += r * r;
  }
  fit.rms = std::sqrt(sum_sq / static_cast<double>(points.size()));
  return fit;
}

/// Smallest rectangle in the plane basis that bounds the projections of
/// `points` onto `plane`.
template <typename Range>
PlanarPatch bounding_patch(const PlaneHNF& plane, const Range& points, double rms,
                           std::uint32_t support) {
  const auto [e1, e2] = plane_basis(plane.n);
  const Eigen::Vector3d origin = -plane.d * plane.n;
  double lo1 = std::numeric_limits<double>::infinity(), hi1 = -lo1;
  double lo2 = lo1, hi2 = -lo1;
  for (const Eigen::Vector3d& p : points) {
    const Eigen::Vector3d q = p - origin;
    const double s = q.dot(e1), t = q.dot(e2);
    lo1 = std::min(lo1, s);
    hi1 = std::max(hi1, s);
    lo2 = std::min(lo2, t);
    hi2 = std::max(hi2, t);
  }
  PlanarPatch patch;
  patch.plane = plane;
  patch.rms = rms;
  patch.support = support;
  patch.corners = {origin + lo1 * e1 + lo2 * e2, origin + hi1 * e1 + lo2 * e2,
                   origin + hi1 * e1 + hi2 * e2, origin + lo1 * e1 + hi2 * e2};
  return patch;
}

/// Rigidly moves a patch into another frame. The plane sign is preserved.
inline PlanarPatch transform_patch(const Pose3& t, const PlanarPatch& patch) {
  PlanarPatch out = patch;
  out.plane = transform_plane(t, patch.plane);
  for (auto& c : out.corners) c = t * c;
  return out;
}

/// Surface identity test between two patches, independent of normal sign.
/// Returns +1 (same orientation), -1 (same surface, opposite sign) or 0.
/// Offsets are compared as point-to-plane distances of the centroids.
inline int surface_match(const PlanarPatch& a, const PlanarPatch& b, double max_angle_rad,
                         double max_offset) {
  const double c = a.plane.n.dot(b.plane.n);
  const double cos_max = std::cos(max_angle_rad);
  if (std::abs(c) < cos_max) return 0;
  const double da = std::abs(a.plane.signed_distance(b.centroid()));
  const double db = std::abs(b.plane.signed_distance(a.centroid()));
  if (std::max(da, db) > max_offset) return 0;
  return c > 0.0 ? 1 : -1;
}

/// Gap between the in-plane extents of two patches measured in a's basis;
/// zero when they overlap.
inline double in_plane_gap(const PlanarPatch& a, const PlanarPatch& b) {
  const auto [e1, e2] = plane_basis(a.plane.n);
  auto extent = [&](const PlanarPatch& p, const Eigen::Vector3d& axis) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& c : p.corners) {
      lo = std::min(lo, c.dot(axis));
      hi = std::max(hi, c.dot(axis));
    }
    return std::pair{lo, hi};
  };
  double gap = 0.0;
  for (const Eigen::Vector3d& axis : {e1, e2}) {
    const auto [alo, ahi] = extent(a, axis);
    const auto [blo, bhi] = extent(b, axis);
    gap = std::max(gap, std::max(blo - ahi, alo - bhi));
  }
  return gap;
}

/// Merges patches describing one surface. The first patch fixes the normal
/// orientation; the merged plane passes through the support-weighted centroid
/// with the support-weighted mean normal, and the corners bound every
/// member's corners. rms is the support-weighted quadratic mean.
inline PlanarPatch merge_patches(std::span<const PlanarPatch> group) {
  const Eigen::Vector3d ref = group.front().plane.n;
  Eigen::Vector3d n = Eigen::Vector3d::Zero();
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  double weight = 0.0, sq = 0.0;
  std::uint64_t support = 0;
  for (const auto& p : group) {
    const double w = std::max<double>(p.support, 1.0);
    n += w * (p.plane.n.dot(ref) >= 0.0 ? p.plane.n : Eigen::Vector3d(-p.plane.n));
    c += w * p.centroid();
    sq += w * p.rms * p.rms;
    weight += w;
    support += p.support;
  }
  n.normalize();
  c /= weight;
  const PlaneHNF plane{n, -n.dot(c)};
  std::vector<Eigen::Vector3d> corners;
  corners.reserve(group.size() * 4);
  for (const auto& p : group) corners.insert(corners.end(), p.corners.begin(), p.corners.end());
  return bounding_patch(plane, corners, std::sqrt(sq / weight),
                        static_cast<std::uint32_t>(std::min<std::uint64_t>(support, UINT32_MAX)));
}

struct MergeTolerance {
  double max_angle_rad = deg2rad(2.0);
  double max_offset = 0.02;
  double max_gap = 0.10;  ///< in-plane separation still treated as touching
  bool match_orientation = false;  ///< require normals to agree in sign
};

/// Greedily folds duplicate observations of a surface together until no pair
/// of patches matches. Output order follows first appearance.
inline std::vector<PlanarPatch> deduplicate_patches(std::vector<PlanarPatch> patches,
                                                    const MergeTolerance& tol = {}) {
  bool merged = true;
  while (merged) {
    merged = false;
    std::vector<PlanarPatch> out;
    out.reserve(patches.size());
    for (auto& p : patches) {
      bool absorbed = false;
      for (auto& q : out) {
        const int match = surface_match(q, p, tol.max_angle_rad, tol.max_offset);
        if ((tol.match_orientation ? match > 0 : match != 0) && in_plane_gap(q, p) <= tol.max_gap) {
          const std::array<PlanarPatch, 2> pair{q, p};
          q = merge_patches(pair);
          absorbed = merged = true;
          break;
        }
      }
      if (!absorbed) out.push_back(std::move(p));
    }
    patches = std::move(out);
  }
  return patches;
}

struct ExtractParams {
  double eps_fit = 0.02;             ///< max rms orthogonal distance, meters
  std::size_t max_patches = 64;
  std::uint32_t min_leaf = 8;        ///< regions are not split below this size
  double min_valid_fraction = 0.75;  ///< sparser regions are split, not fit
  double merge_angle_rad = deg2rad(2.0);
  double merge_offset = 0.02;
};

namespace detail {

struct PixelRegion {
  std::uint32_t u0, v0, w, h;

  bool touches(const PixelRegion& o) const {
    const bool h_overlap = v0 < o.v0 + o.h && o.v0 < v0 + h;
    const bool w_overlap = u0 < o.u0 + o.w && o.u0 < u0 + w;
    return (h_overlap && (u0 + w == o.u0 || o.u0 + o.w == u0)) ||
           (w_overlap && (v0 + h == o.v0 || o.v0 + o.h == v0));
  }
};

class QuadtreeExtractor {
 public:
  QuadtreeExtractor(const DepthFrame& frame, const ExtractParams& params)
      : frame_(frame), params_(params) {}

  void run() { visit({0, 0, frame_.width, frame_.height}); }

  void gather(const PixelRegion& r, std::vector<Eigen::Vector3d>& out) const {
    for (std::uint32_t v = r.v0; v < r.v0 + r.h; ++v) {
      for (std::uint32_t u = r.u0; u < r.u0 + r.w; ++u) {
        if (frame_.valid(u, v)) out.push_back(frame_.point(u, v));
      }
    }
  }

  std::vector<PlanarPatch> patches;
  std::vector<PixelRegion> regions;

 private:
  void visit(const PixelRegion& r) {
    const std::uint32_t split = 2 * params_.min_leaf;
    const bool can_split = r.w >= split || r.h >= split;
    buffer_.clear();
    gather(r, buffer_);
    const double area = static_cast<double>(r.w) * r.h;
    if (static_cast<double>(buffer_.size()) >= params_.min_valid_fraction * area) {
      std::optional<PlaneFit> fit;
      try {
        fit = fit_plane_lsq(buffer_);
      } catch (const DegenerateGeometry&) {
      }
      if (fit && fit->rms <= params_.eps_fit) {
        patches.push_back(bounding_patch(fit->plane, buffer_, fit->rms,
                                         static_cast<std::uint32_t>(buffer_.size())));
        regions.push_back(r);
        return;
      }
    }
    if (!can_split) return;
    const std::uint32_t w1 = r.w >= split ? r.w / 2 : r.w;
    const std::uint32_t h1 = r.h >= split ? r.h / 2 : r.h;
    visit({r.u0, r.v0, w1, h1});
    if (w1 < r.w) visit({r.u0 + w1, r.v0, r.w - w1, h1});
    if (h1 < r.h) {
      visit({r.u0, r.v0 + h1, w1, r.h - h1});
      if (w1 < r.w) visit({r.u0 + w1, r.v0 + h1, r.w - w1, r.h - h1});
    }
  }

  const DepthFrame& frame_;
  const ExtractParams& params_;
  std::vector<Eigen::Vector3d> buffer_;
};

inline std::size_t find_root(std::vector<std::size_t>& parent, std::size_t i) {
  while (parent[i] != i) {
    parent[i] = parent[parent[i]];
    i = parent[i];
  }
  return i;
}

}  // namespace detail

/// Splits the frame recursively into quads until each quad is fit by a plane
/// within `eps_fit`, merges adjacent coplanar quads and keeps at most
/// `max_patches` patches, largest support first.
inline std::vector<PlanarPatch> quadtree_extract(const DepthFrame& frame,
                                                 const ExtractParams& params) {
  if (!(params.eps_fit > 0.0)) throw std::invalid_argument("eps_fit must be positive");
  if (params.max_patches < 1) throw std::invalid_argument("max_patches must be at least 1");
  if (frame.valid_count() < 16) throw EmptyFrame("frame has fewer than 16 valid depths");

  detail::QuadtreeExtractor quadtree(frame, params);
  quadtree.run();
  const auto& leaves = quadtree.patches;
  const auto& regions = quadtree.regions;

  std::vector<std::size_t> parent(leaves.size());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (std::size_t j = i + 1; j < leaves.size(); ++j) {
      if (regions[i].touches(regions[j]) &&
          surface_match(leaves[i], leaves[j], params.merge_angle_rad, params.merge_offset) != 0) {
        const std::size_t a = detail::find_root(parent, i), b = detail::find_root(parent, j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  }

  struct Ranked {
    std::size_t first;
    PlanarPatch patch;
  };
  std::vector<Ranked> merged;
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::ptrdiff_t> slot(leaves.size(), -1);
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const std::size_t root = detail::find_root(parent, i);
    if (slot[root] < 0) {
      slot[root] = static_cast<std::ptrdiff_t>(groups.size());
      groups.emplace_back();
    }
    groups[static_cast<std::size_t>(slot[root])].push_back(i);
  }
  std::vector<Eigen::Vector3d> points;
  for (const auto& g : groups) {
    if (g.size() > 1) {
      // Refit over the union of member pixels; keep the members apart when
      // the union no longer meets the fit tolerance.
      points.clear();
      for (std::size_t i : g) quadtree.gather(regions[i], points);
      const PlaneFit fit = fit_plane_lsq(points);
      if (fit.rms <= params.eps_fit) {
        merged.push_back({g.front(), bounding_patch(fit.plane, points, fit.rms,
                                                    static_cast<std::uint32_t>(points.size()))});
        continue;
      }
    }
    for (std::size_t i : g) merged.push_back({i, leaves[i]});
  }
  std::stable_sort(merged.begin(), merged.end(), [](const Ranked& a, const Ranked& b) {
    if (a.patch.support != b.patch.support) return a.patch.support > b.patch.support;
    return a.first < b.first;
  });
  if (merged.size() > params.max_patches) merged.resize(params.max_patches);

  std::vector<PlanarPatch> out;
  out.reserve(merged.size());
  for (auto& m : merged) out.push_back(std::move(m.patch));
  return out;
}

inline std::vector<PlanarPatch> quadtree_extract(const DepthFrame& frame, double eps_fit,
                                                 std::size_t max_patches) {
  ExtractParams params;
  params.eps_fit = eps_fit;
  params.max_patches = max_patches;
  return quadtree_extract(frame, params);
}

}  // namespace maplets
