#pragma once

// SE(2) pose graph over maplet origins: delta-pose and range factors,
// chained initialization and Levenberg-Marquardt refinement.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "maplets/errors.hpp"
#include "maplets/geometry.hpp"

namespace maplets {

struct NodeKey {
  std::uint16_t agent = 0;
  std::uint16_t maplet = 0;

  auto operator<=>(const NodeKey&) const = default;
};

inline std::string to_string(const NodeKey& k) {
  return "(" + std::to_string(k.agent) + "," + std::to_string(k.maplet) + ")";
}

enum class FactorKind { Odometry, LoopClosure };

inline const char* to_string(FactorKind k) {
  return k == FactorKind::Odometry ? "odometry" : "loop_closure";
}

struct DeltaPoseFactor {
  NodeKey from;
  NodeKey to;
  Pose2 delta;  ///< pose of `to` in the frame of `from`
  Eigen::Matrix3d cov = Eigen::Matrix3d::Identity();
  FactorKind kind = FactorKind::Odometry;
};

struct RangeFactor {
  NodeKey a;
  NodeKey b;
  double range = 0.0;
  double variance = 1.0;
};

inline void validate(const DeltaPoseFactor& f) {
  if (f.from == f.to) throw std::invalid_argument("delta-pose factor links a node to itself");
  if (!f.cov.isApprox(f.cov.transpose(), 1e-9) || !f.cov.allFinite()) {
    throw std::invalid_argument("factor covariance must be symmetric");
  }
  if (Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(f.cov).eigenvalues().minCoeff() <= 0.0) {
    throw std::invalid_argument("factor covariance must be positive definite");
  }
}

inline void validate(const RangeFactor& f) {
  if (!(f.range >= 0.0) || !(f.variance > 0.0)) {
    throw std::invalid_argument("range factor needs range >= 0 and variance > 0");
  }
}

/// (x, y, theta) error of a delta-pose factor: the chart of
/// delta^-1 * (from^-1 * to), theta wrapped to (-pi, pi].
inline Eigen::Vector3d delta_residual(const Pose2& from, const Pose2& to, const Pose2& delta) {
  return compose(invert(delta), between(from, to)).vector();
}

inline double range_residual(const Pose2& a, const Pose2& b, const RangeFactor& f) {
  return ((a.translation() - b.translation()).norm() - f.range) / std::sqrt(f.variance);
}

namespace detail {

/// Jacobians of delta_residual with respect to (x, y, theta) of from and to.
inline void delta_jacobians(const Pose2& from, const Pose2& to, const Pose2& delta,
                            Eigen::Matrix3d& Ji, Eigen::Matrix3d& Jj) {
  const Eigen::Matrix2d RzT = delta.rotation().transpose();
  const Eigen::Matrix2d RiT = from.rotation().transpose();
  const double c = std::cos(from.theta), s = std::sin(from.theta);
  Eigen::Matrix2d dRiT;
  dRiT << -s, c, -c, -s;
  const Eigen::Vector2d dt = to.translation() - from.translation();
  Ji.setZero();
  Jj.setZero();
  Ji.topLeftCorner<2, 2>() = -RzT * RiT;
  Ji.topRightCorner<2, 1>() = RzT * dRiT * dt;
  Ji(2, 2) = -1.0;
  Jj.topLeftCorner<2, 2>() = RzT * RiT;
  Jj(2, 2) = 1.0;
}

/// Jacobian of range_residual with respect to (x, y) of a; b gets the negation.
inline Eigen::Vector2d range_jacobian(const Pose2& a, const Pose2& b, const RangeFactor& f) {
  const Eigen::Vector2d diff = a.translation() - b.translation();
  const double len = diff.norm();
  if (len < 1e-12) return Eigen::Vector2d::Zero();
  return diff / (len * std::sqrt(f.variance));
}

}  // namespace detail

struct OptimizeReport {
  std::size_t iterations = 0;
  std::size_t accepted_steps = 0;
  double initial_chi2 = 0.0;
  double final_chi2 = 0.0;
  bool converged = false;
  std::vector<double> chi2_trace;  ///< chi2 after each accepted step
};

class Skeleton {
 public:
  std::map<NodeKey, Pose2> poses;
  std::vector<DeltaPoseFactor> factors;
  std::vector<RangeFactor> ranges;
  std::vector<DeltaPoseFactor> pending;  ///< closures waiting for an endpoint
  std::set<NodeKey> fixed;               ///< gauge; empty = one root per component
  double chi2 = 0.0;

  bool has(const NodeKey& k) const { return poses.count(k) != 0; }

  /// Adds a node and materializes queued closures whose endpoints now exist.
  void add_node(const NodeKey& k, const Pose2& initial) {
    poses[k] = initial;
    std::vector<DeltaPoseFactor> still;
    for (auto& f : pending) {
      if (has(f.from) && has(f.to)) {
        factors.push_back(f);
      } else {
        still.push_back(f);
      }
    }
    pending = std::move(still);
    chi2 = compute_chi2();
  }

  void add_factor(const DeltaPoseFactor& f) {
    validate(f);
    if (!has(f.from) || !has(f.to)) {
      throw OutOfRange("factor endpoint " + to_string(has(f.from) ? f.to : f.from) + " is unknown");
    }
    factors.push_back(f);
    chi2 = compute_chi2();
  }

  void add_range(const RangeFactor& f) {
    validate(f);
    if (!has(f.a) || !has(f.b)) throw OutOfRange("range factor endpoint is unknown");
    ranges.push_back(f);
    chi2 = compute_chi2();
  }

  double factor_chi2(const DeltaPoseFactor& f) const {
    const Eigen::Vector3d r = delta_residual(poses.at(f.from), poses.at(f.to), f.delta);
    return r.dot(f.cov.inverse() * r);
  }

  double compute_chi2() const {
    double total = 0.0;
    for (const auto& f : factors) total += factor_chi2(f);
    for (const auto& f : ranges) {
      const double r = range_residual(poses.at(f.a), poses.at(f.b), f);
      total += r * r;
    }
    return total;
  }

  std::size_t count(FactorKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(factors.begin(), factors.end(), [&](const auto& f) { return f.kind == kind; }));
  }
};

/// Appends a loop closure, or queues it until both endpoints exist. Does not
/// re-optimize.
inline Skeleton add_loop_closure(Skeleton s, DeltaPoseFactor f) {
  validate(f);
  f.kind = FactorKind::LoopClosure;
  if (s.has(f.from) && s.has(f.to)) {
    s.factors.push_back(f);
    s.chi2 = s.compute_chi2();
  } else {
    s.pending.push_back(f);
  }
  return s;
}

namespace detail {

struct Adjacent {
  NodeKey other;
  Pose2 step;  ///< pose of `other` in the frame of this node
};

inline std::map<NodeKey, std::vector<Adjacent>> adjacency(const std::vector<DeltaPoseFactor>& factors,
                                                          bool odometry_only) {
  std::map<NodeKey, std::vector<Adjacent>> adj;
  for (const auto& f : factors) {
    if (odometry_only && f.kind != FactorKind::Odometry) continue;
    adj[f.from].push_back({f.to, f.delta});
    adj[f.to].push_back({f.from, invert(f.delta)});
  }
  return adj;
}

/// Breadth-first chaining from seeds already present in `poses`.
inline void propagate(std::map<NodeKey, Pose2>& poses,
                      const std::map<NodeKey, std::vector<Adjacent>>& adj) {
  std::deque<NodeKey> queue;
  for (const auto& [k, p] : poses) queue.push_back(k);
  while (!queue.empty()) {
    const NodeKey k = queue.front();
    queue.pop_front();
    const auto it = adj.find(k);
    if (it == adj.end()) continue;
    for (const auto& a : it->second) {
      if (poses.count(a.other)) continue;
      poses[a.other] = compose(poses.at(k), a.step);
      queue.push_back(a.other);
    }
  }
}

}  // namespace detail

/// Root at identity, every reachable node the composition of odometry deltas
/// along the breadth-first tree path. Loop closures are ignored.
inline std::map<NodeKey, Pose2> chain_initialize(const std::vector<DeltaPoseFactor>& factors,
                                                 const NodeKey& root) {
  std::map<NodeKey, Pose2> poses{{root, Pose2{}}};
  detail::propagate(poses, detail::adjacency(factors, true));
  std::set<NodeKey> all;
  for (const auto& f : factors) {
    all.insert(f.from);
    all.insert(f.to);
  }
  std::string missing;
  for (const auto& k : all) {
    if (!poses.count(k)) missing += (missing.empty() ? "" : " ") + to_string(k);
  }
  if (!missing.empty()) throw DisconnectedGraph("nodes unreachable from root: " + missing);
  return poses;
}

/// Initializes every node of the skeleton: odometry chaining from the root
/// first, then through loop closures for nodes of other agents, and finally
/// from `hints` (other agents' start poses) for anything still unreached.
inline void initialize_skeleton(Skeleton& s, const NodeKey& root,
                                const std::map<NodeKey, Pose2>& hints = {}) {
  if (!s.has(root)) throw OutOfRange("root " + to_string(root) + " is not a node");
  std::map<NodeKey, Pose2> poses{{root, Pose2{}}};
  const auto odo = detail::adjacency(s.factors, true);
  const auto all = detail::adjacency(s.factors, false);
  detail::propagate(poses, odo);
  // Cross into other sub-graphs one closure at a time, chaining odometry
  // inside each newly reached sub-graph before using further closures.
  while (true) {
    bool grew = false;
    for (const auto& [k, adj] : all) {
      if (!poses.count(k)) continue;
      for (const auto& a : adj) {
        if (poses.count(a.other)) continue;
        poses[a.other] = compose(poses.at(k), a.step);
        grew = true;
        break;
      }
      if (grew) break;
    }
    if (!grew) break;
    detail::propagate(poses, odo);
  }
  for (const auto& [k, hint] : hints) {
    if (!s.has(k) || poses.count(k)) continue;
    std::map<NodeKey, Pose2> sub{{k, hint}};
    detail::propagate(sub, odo);
    for (const auto& [kk, p] : sub) poses.emplace(kk, p);
  }
  std::string missing;
  for (const auto& [k, p] : s.poses) {
    if (!poses.count(k)) missing += (missing.empty() ? "" : " ") + to_string(k);
  }
  if (!missing.empty()) throw DisconnectedGraph("nodes without initialization: " + missing);
  for (auto& [k, p] : s.poses) p = poses.at(k);
  s.chi2 = s.compute_chi2();
}

struct OptimizeParams {
  std::size_t max_iters = 100;
  double tol_dx = 1e-8;
  double lambda0 = 1e-4;
  bool fix_gauge = true;  ///< hold one node per connected component
};

namespace detail {

/// First node (key order) of each connected component over all factors.
inline std::set<NodeKey> component_roots(const Skeleton& s) {
  std::map<NodeKey, NodeKey> parent;
  for (const auto& [k, p] : s.poses) parent[k] = k;
  auto find = [&](NodeKey k) {
    while (!(parent[k] == k)) k = parent[k] = parent[parent[k]];
    return k;
  };
  auto unite = [&](const NodeKey& a, const NodeKey& b) {
    const NodeKey ra = find(a), rb = find(b);
    if (ra < rb) parent[rb] = ra;
    else if (rb < ra) parent[ra] = rb;
  };
  for (const auto& f : s.factors) unite(f.from, f.to);
  for (const auto& f : s.ranges) unite(f.a, f.b);
  std::set<NodeKey> roots;
  for (const auto& [k, p] : s.poses) roots.insert(find(k));
  return roots;
}

}  // namespace detail

/// Levenberg-Marquardt on the stacked (x, y, theta) of all free nodes.
/// Steps that do not lower chi2 are rejected, so chi2 never increases.
inline Skeleton optimize(Skeleton s, const OptimizeParams& params = {},
                         OptimizeReport* report = nullptr) {
  OptimizeReport local;
  OptimizeReport& rep = report ? *report : local;
  rep = {};

  std::set<NodeKey> held = s.fixed;
  if (params.fix_gauge && held.empty()) held = detail::component_roots(s);
  std::map<NodeKey, Eigen::Index> index;
  for (const auto& [k, p] : s.poses) {
    if (!held.count(k)) index.emplace(k, static_cast<Eigen::Index>(3 * index.size()));
  }
  const Eigen::Index dim = static_cast<Eigen::Index>(3 * index.size());
  double chi = s.compute_chi2();
  rep.initial_chi2 = chi;
  if (dim == 0) {
    rep.final_chi2 = s.chi2 = chi;
    rep.converged = true;
    return s;
  }

  std::vector<Eigen::Matrix3d> info;
  info.reserve(s.factors.size());
  for (const auto& f : s.factors) info.push_back(f.cov.inverse());

  double lambda = params.lambda0;
  bool checked_rank = false;
  for (rep.iterations = 0; rep.iterations < params.max_iters;) {
    ++rep.iterations;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
    for (std::size_t fi = 0; fi < s.factors.size(); ++fi) {
      const auto& f = s.factors[fi];
      const Pose2& xi = s.poses.at(f.from);
      const Pose2& xj = s.poses.at(f.to);
      const Eigen::Vector3d r = delta_residual(xi, xj, f.delta);
      Eigen::Matrix3d Ji, Jj;
      detail::delta_jacobians(xi, xj, f.delta, Ji, Jj);
      const auto ii = index.find(f.from), jj = index.find(f.to);
      const Eigen::Matrix3d& W = info[fi];
      if (ii != index.end()) {
        H.block<3, 3>(ii->second, ii->second) += Ji.transpose() * W * Ji;
        g.segment<3>(ii->second) += Ji.transpose() * W * r;
      }
      if (jj != index.end()) {
        H.block<3, 3>(jj->second, jj->second) += Jj.transpose() * W * Jj;
        g.segment<3>(jj->second) += Jj.transpose() * W * r;
      }
      if (ii != index.end() && jj != index.end()) {
        H.block<3, 3>(ii->second, jj->second) += Ji.transpose() * W * Jj;
        H.block<3, 3>(jj->second, ii->second) += Jj.transpose() * W * Ji;
      }
    }
    for (const auto& f : s.ranges) {
      const Pose2& a = s.poses.at(f.a);
      const Pose2& b = s.poses.at(f.b);
      const double r = range_residual(a, b, f);
      const Eigen::Vector2d J = detail::range_jacobian(a, b, f);
      const auto ia = index.find(f.a), ib = index.find(f.b);
      if (ia != index.end()) {
        H.block<2, 2>(ia->second, ia->second) += J * J.transpose();
        g.segment<2>(ia->second) += J * r;
      }
      if (ib != index.end()) {
        H.block<2, 2>(ib->second, ib->second) += J * J.transpose();
        g.segment<2>(ib->second) -= J * r;
      }
      if (ia != index.end() && ib != index.end()) {
        H.block<2, 2>(ia->second, ib->second) -= J * J.transpose();
        H.block<2, 2>(ib->second, ia->second) -= J * J.transpose();
      }
    }
    if (!checked_rank) {
      const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(H).eigenvalues();
      if (!(ev.minCoeff() > 1e-12 * std::max(1.0, ev.maxCoeff()))) {
        throw SingularNormalEquations("pose graph is under-constrained");
      }
      checked_rank = true;
    }

    bool accepted = false;
    Eigen::VectorXd dx;
    while (!accepted) {
      Eigen::MatrixXd A = H;
      A.diagonal().array() += lambda;
      dx = A.ldlt().solve(-g);
      Skeleton trial = s;
      for (const auto& [k, at] : index) {
        Pose2& p = trial.poses.at(k);
        p.x += dx[at];
        p.y += dx[at + 1];
        p.theta = normalize_angle(p.theta + dx[at + 2]);
      }
      const double trial_chi = trial.compute_chi2();
      if (trial_chi < chi) {
        s.poses = std::move(trial.poses);
        chi = trial_chi;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        ++rep.accepted_steps;
        rep.chi2_trace.push_back(chi);
      } else {
        lambda *= 10.0;
        if (lambda > 1e12 || dx.norm() < params.tol_dx) break;
      }
    }
    if (!accepted || dx.norm() < params.tol_dx) {
      rep.converged = true;
      break;
    }
  }
  rep.final_chi2 = s.chi2 = chi;
  return s;
}

inline Skeleton optimize(Skeleton s, std::size_t max_iters, double tol_dx) {
  OptimizeParams params;
  params.max_iters = max_iters;
  params.tol_dx = tol_dx;
  return optimize(std::move(s), params);
}

// ---------------------------------------------------------------------------
// Text format, one record per line:
//   NODE agent maplet x y theta
//   EDGE agent_a maplet_a agent_b maplet_b dx dy dtheta i11 i12 i13 i22 i23 i33 kind
//   RANGE agent_a maplet_a agent_b maplet_b range variance

inline void write_skeleton(std::ostream& out, const Skeleton& s) {
  out << std::setprecision(17);
  for (const auto& [k, p] : s.poses) {
    out << "NODE " << k.agent << ' ' << k.maplet << ' ' << p.x << ' ' << p.y << ' ' << p.theta << '\n';
  }
  for (const auto& f : s.factors) {
    const Eigen::Matrix3d I = f.cov.inverse();
    out << "EDGE " << f.from.agent << ' ' << f.from.maplet << ' ' << f.to.agent << ' ' << f.to.maplet
        << ' ' << f.delta.x << ' ' << f.delta.y << ' ' << f.delta.theta << ' ' << I(0, 0) << ' '
        << I(0, 1) << ' ' << I(0, 2) << ' ' << I(1, 1) << ' ' << I(1, 2) << ' ' << I(2, 2) << ' '
        << to_string(f.kind) << '\n';
  }
  for (const auto& f : s.ranges) {
    out << "RANGE " << f.a.agent << ' ' << f.a.maplet << ' ' << f.b.agent << ' ' << f.b.maplet << ' '
        << f.range << ' ' << f.variance << '\n';
  }
}

inline Skeleton read_skeleton(std::istream& in) {
  Skeleton s;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    auto fail = [&] { throw FormatError("bad skeleton record on line " + std::to_string(lineno)); };
    if (tag == "NODE") {
      NodeKey k;
      Pose2 p;
      if (!(ls >> k.agent >> k.maplet >> p.x >> p.y >> p.theta)) fail();
      s.poses[k] = p;
    } else if (tag == "EDGE") {
      DeltaPoseFactor f;
      Eigen::Matrix3d I;
      std::string kind;
      if (!(ls >> f.from.agent >> f.from.maplet >> f.to.agent >> f.to.maplet >> f.delta.x >>
            f.delta.y >> f.delta.theta >> I(0, 0) >> I(0, 1) >> I(0, 2) >> I(1, 1) >> I(1, 2) >>
            I(2, 2) >> kind)) {
        fail();
      }
      I(1, 0) = I(0, 1);
      I(2, 0) = I(0, 2);
      I(2, 1) = I(1, 2);
      f.cov = I.inverse();
      f.cov = 0.5 * (f.cov + f.cov.transpose()).eval();
      if (kind == "odometry") f.kind = FactorKind::Odometry;
      else if (kind == "loop_closure") f.kind = FactorKind::LoopClosure;
      else fail();
      s.factors.push_back(f);
    } else if (tag == "RANGE") {
      RangeFactor f;
      if (!(ls >> f.a.agent >> f.a.maplet >> f.b.agent >> f.b.maplet >> f.range >> f.variance)) fail();
      s.ranges.push_back(f);
    } else {
      fail();
    }
  }
  for (const auto& f : s.factors) {
    if (!s.has(f.from) || !s.has(f.to)) throw FormatError("edge references a missing node");
  }
  for (const auto& f : s.ranges) {
    if (!s.has(f.a) || !s.has(f.b)) throw FormatError("range references a missing node");
  }
  s.chi2 = s.compute_chi2();
  return s;
}

inline void write_skeleton(const std::filesystem::path& path, const Skeleton& s) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_skeleton(out, s);
}

inline Skeleton read_skeleton(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_skeleton(in);
}

}  // namespace maplets
