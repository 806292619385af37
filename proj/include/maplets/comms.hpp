#pragma once

// Pairwise reconciliation between agents: digests of held keys, missing
// delta-pose and closure batches, then maplets in priority order. Every
// message is serialized so the ledger counts exact bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "maplets/binary_io.hpp"
#include "maplets/errors.hpp"
#include "maplets/geometry.hpp"
#include "maplets/icap.hpp"
#include "maplets/maplet.hpp"
#include "maplets/skeleton.hpp"

namespace maplets {

struct FactorKey {
  NodeKey from;
  NodeKey to;
  auto operator<=>(const FactorKey&) const = default;
};

inline FactorKey key_of(const DeltaPoseFactor& f) { return {f.from, f.to}; }

// ---------------------------------------------------------------------------
// Wire formats, little-endian.

/// from (u16 agent, u16 maplet), to (u16, u16), 3 f64 delta, 6 f64 upper
/// triangle of the covariance, u8 kind.
inline constexpr std::size_t kDeltaRecordBytes = 81;
inline constexpr std::size_t kFactorKeyBytes = 8;
inline constexpr std::size_t kMapletKeyBytes = 4;
inline constexpr std::size_t kDigestHeaderBytes = 12;

inline void encode_node(ByteWriter& w, const NodeKey& k) {
  w.u16(k.agent);
  w.u16(k.maplet);
}

inline NodeKey decode_node(ByteReader& r) {
  NodeKey k;
  k.agent = r.u16();
  k.maplet = r.u16();
  return k;
}

inline void encode_delta(ByteWriter& w, const DeltaPoseFactor& f) {
  encode_node(w, f.from);
  encode_node(w, f.to);
  w.f64(f.delta.x);
  w.f64(f.delta.y);
  w.f64(f.delta.theta);
  for (int i = 0; i < 3; ++i) {
    for (int j = i; j < 3; ++j) w.f64(f.cov(i, j));
  }
  w.u8(static_cast<std::uint8_t>(f.kind));
}

inline DeltaPoseFactor decode_delta(ByteReader& r) {
  DeltaPoseFactor f;
  f.from = decode_node(r);
  f.to = decode_node(r);
  f.delta.x = r.f64();
  f.delta.y = r.f64();
  f.delta.theta = r.f64();
  for (int i = 0; i < 3; ++i) {
    for (int j = i; j < 3; ++j) f.cov(i, j) = f.cov(j, i) = r.f64();
  }
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(FactorKind::LoopClosure)) {
    throw FormatError("unknown factor kind " + std::to_string(kind));
  }
  f.kind = static_cast<FactorKind>(kind);
  return f;
}

inline std::vector<std::uint8_t> encode_batch(std::span<const DeltaPoseFactor> factors) {
  ByteWriter w;
  for (const auto& f : factors) encode_delta(w, f);
  return std::move(w).take();
}

inline std::vector<DeltaPoseFactor> decode_batch(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kDeltaRecordBytes != 0) {
    throw FormatError("batch length " + std::to_string(bytes.size()) + " is not a whole number of records");
  }
  ByteReader r(bytes);
  std::vector<DeltaPoseFactor> out;
  while (!r.done()) out.push_back(decode_delta(r));
  return out;
}

/// Sorted keys of everything an agent holds.
struct Digest {
  std::vector<FactorKey> deltas;
  std::vector<FactorKey> closures;
  std::vector<NodeKey> maplets;
};

inline std::size_t digest_wire_size(const Digest& d) {
  return kDigestHeaderBytes + kFactorKeyBytes * (d.deltas.size() + d.closures.size()) +
         kMapletKeyBytes * d.maplets.size();
}

inline std::vector<std::uint8_t> encode_digest(const Digest& d) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(d.deltas.size()));
  w.u32(static_cast<std::uint32_t>(d.closures.size()));
  w.u32(static_cast<std::uint32_t>(d.maplets.size()));
  for (const auto* keys : {&d.deltas, &d.closures}) {
    for (const auto& k : *keys) {
      encode_node(w, k.from);
      encode_node(w, k.to);
    }
  }
  for (const auto& k : d.maplets) encode_node(w, k);
  return std::move(w).take();
}

inline Digest decode_digest(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  Digest d;
  const std::uint32_t nd = r.u32(), nc = r.u32(), nm = r.u32();
  for (auto [keys, n] : {std::pair{&d.deltas, nd}, std::pair{&d.closures, nc}}) {
    for (std::uint32_t i = 0; i < n; ++i) {
      const NodeKey from = decode_node(r);
      keys->push_back({from, decode_node(r)});
    }
  }
  for (std::uint32_t i = 0; i < nm; ++i) d.maplets.push_back(decode_node(r));
  if (!r.done()) throw FormatError("trailing bytes after digest");
  return d;
}

enum class MessageKind : std::uint8_t { Digest, DeltaPoseBatch, ClosureBatch, MapletPayload };

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::Digest: return "digest";
    case MessageKind::DeltaPoseBatch: return "delta_batch";
    case MessageKind::ClosureBatch: return "closure_batch";
    case MessageKind::MapletPayload: return "maplet";
  }
  return "unknown";
}

struct WireMessage {
  MessageKind kind = MessageKind::Digest;
  std::vector<std::uint8_t> payload;
  std::size_t size() const { return payload.size(); }
};

// ---------------------------------------------------------------------------

struct LedgerEntry {
  std::uint16_t sender = 0;
  std::uint16_t receiver = 0;
  MessageKind kind = MessageKind::Digest;
  std::size_t bytes = 0;
  double sim_time = 0.0;
  std::size_t encounter = 0;
  bool delivered = true;
};

/// Every transmitted message, delivered or dropped.
class BandwidthLedger {
 public:
  void record(const LedgerEntry& e) { entries_.push_back(e); }
  const std::vector<LedgerEntry>& entries() const { return entries_; }

  std::size_t total() const { return sum([](const LedgerEntry&) { return true; }); }
  std::size_t total(MessageKind kind) const {
    return sum([&](const LedgerEntry& e) { return e.kind == kind; });
  }
  std::size_t total(std::uint16_t sender, std::uint16_t receiver, MessageKind kind) const {
    return sum([&](const LedgerEntry& e) {
      return e.sender == sender && e.receiver == receiver && e.kind == kind;
    });
  }
  std::size_t encounter_bytes(std::size_t encounter) const {
    return sum([&](const LedgerEntry& e) { return e.encounter == encounter; });
  }
  std::size_t sent_by(std::uint16_t sender) const {
    return sum([&](const LedgerEntry& e) { return e.sender == sender; });
  }

  /// Times are written to the millisecond.
  void write_csv(std::ostream& os) const {
    os << "sender,receiver,kind,bytes,sim_time\n";
    for (const auto& e : entries_) {
      std::ostringstream t;
      t << std::fixed << std::setprecision(3) << e.sim_time;
      os << e.sender << ',' << e.receiver << ',' << to_string(e.kind) << ',' << e.bytes << ',' << t.str()
         << '\n';
    }
  }

 private:
  template <class Pred>
  std::size_t sum(Pred pred) const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += pred(e) ? e.bytes : 0;
    return n;
  }

  std::vector<LedgerEntry> entries_;
};

inline MessageKind parse_message_kind(const std::string& s) {
  for (auto k : {MessageKind::Digest, MessageKind::DeltaPoseBatch, MessageKind::ClosureBatch,
                 MessageKind::MapletPayload}) {
    if (s == to_string(k)) return k;
  }
  throw FormatError("unknown message kind '" + s + "'");
}

/// Reads the CSV written by BandwidthLedger::write_csv. Encounter indices
/// and delivery flags are not part of the file.
inline std::vector<LedgerEntry> read_ledger_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "sender,receiver,kind,bytes,sim_time") {
    throw FormatError("missing ledger header");
  }
  std::vector<LedgerEntry> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string sender, receiver, kind, bytes, time;
    if (!std::getline(ls, sender, ',') || !std::getline(ls, receiver, ',') || !std::getline(ls, kind, ',') ||
        !std::getline(ls, bytes, ',') || !std::getline(ls, time)) {
      throw FormatError("bad ledger row: " + line);
    }
    LedgerEntry e;
    try {
      e.sender = static_cast<std::uint16_t>(std::stoul(sender));
      e.receiver = static_cast<std::uint16_t>(std::stoul(receiver));
      e.bytes = std::stoull(bytes);
      e.sim_time = std::stod(time);
    } catch (const std::logic_error&) {
      throw FormatError("bad ledger row: " + line);
    }
    e.kind = parse_message_kind(kind);
    out.push_back(e);
  }
  return out;
}

struct LinkModel {
  double range = 10.0;  ///< meters
  double drop_probability = 0.0;
  std::uint64_t seed = 0;
  std::optional<std::size_t> budget;  ///< bytes per encounter

  void validate() const {
    if (!(drop_probability >= 0.0 && drop_probability <= 1.0)) {
      throw ConfigError("drop_probability must lie in [0, 1]");
    }
    if (!(range > 0.0)) throw ConfigError("link range must be positive");
  }
};

/// A link with its own drop stream; the stream advances across encounters.
class Link {
 public:
  explicit Link(LinkModel model) : model_(model), rng_(model.seed) { model_.validate(); }
  const LinkModel& model() const { return model_; }
  bool deliver() {
    if (model_.drop_probability <= 0.0) return true;
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) >= model_.drop_probability;
  }

 private:
  LinkModel model_;
  std::mt19937_64 rng_;
};

struct ProtocolParams {
  double salience_min = 2.0;
  double proximity_radius = 3.0;  ///< meters
  double overlap_radius = 4.0;    ///< meters
  double roi_radius = 2.5;        ///< meters
  std::size_t max_closures_per_peer = 1;
  IcapParams icap;
  OptimizeParams optimizer;
};

// ---------------------------------------------------------------------------

class AgentStore {
 public:
  explicit AgentStore(std::uint16_t id = 0) : id_(id) {}

  std::uint16_t id() const { return id_; }

  std::map<FactorKey, DeltaPoseFactor> known_deltas;
  std::map<FactorKey, DeltaPoseFactor> known_closures;
  std::map<NodeKey, Maplet> own_maplets;
  std::map<NodeKey, Maplet> foreign_maplets;
  /// Prior start pose of each agent in a frame shared by all agents.
  std::map<std::uint16_t, Pose2> spawn_hints;
  /// (own, foreign) pairs already run through alignment.
  std::set<std::pair<NodeKey, NodeKey>> tested_pairs;

  void add_own_maplet(const Maplet& m) {
    if (m.agent != id_) throw std::invalid_argument("maplet belongs to another agent");
    own_maplets[{m.agent, m.index}] = m;
  }

  void add_own_delta(DeltaPoseFactor f) {
    if (f.from.agent != id_ || f.to.agent != id_) {
      throw std::invalid_argument("own delta-pose must join two of this agent's maplets");
    }
    validate(f);
    f.kind = FactorKind::Odometry;
    known_deltas[key_of(f)] = f;
  }

  /// Returns false when the closure was already known.
  bool add_closure(DeltaPoseFactor f) {
    validate(f);
    f.kind = FactorKind::LoopClosure;
    return known_closures.emplace(key_of(f), f).second;
  }

  bool holds_maplet(const NodeKey& k) const {
    return own_maplets.count(k) != 0 || foreign_maplets.count(k) != 0;
  }

  const Maplet* maplet(const NodeKey& k) const {
    if (auto it = own_maplets.find(k); it != own_maplets.end()) return &it->second;
    if (auto it = foreign_maplets.find(k); it != foreign_maplets.end()) return &it->second;
    return nullptr;
  }

  Digest digest() const {
    Digest d;
    for (const auto& [k, f] : known_deltas) d.deltas.push_back(k);
    for (const auto& [k, f] : known_closures) d.closures.push_back(k);
    std::set<NodeKey> held;
    for (const auto& [k, m] : own_maplets) held.insert(k);
    for (const auto& [k, m] : foreign_maplets) held.insert(k);
    d.maplets.assign(held.begin(), held.end());
    return d;
  }

  /// Skeleton over every node reachable from the root through factors or a
  /// spawn hint, built in key order so equal factor sets give equal graphs.
  /// Poses are initialized, not optimized.
  Skeleton build_skeleton() const {
    std::set<NodeKey> nodes;
    for (const auto* set : {&known_deltas, &known_closures}) {
      for (const auto& [k, f] : *set) {
        nodes.insert(f.from);
        nodes.insert(f.to);
      }
    }
    for (const auto& [k, m] : own_maplets) nodes.insert(k);
    for (const auto& [k, m] : foreign_maplets) nodes.insert(k);
    Skeleton s;
    if (nodes.empty()) return s;
    const NodeKey root = *nodes.begin();

    std::map<NodeKey, Pose2> hints;
    if (root.maplet == 0 && spawn_hints.count(root.agent)) {
      const Pose2 root_prior = spawn_hints.at(root.agent);
      for (const auto& [agent, prior] : spawn_hints) {
        const NodeKey k{agent, 0};
        if (k != root && nodes.count(k)) hints[k] = between(root_prior, prior);
      }
    }

    // Reachability from the root and from hinted nodes.
    std::map<NodeKey, std::vector<NodeKey>> adj;
    for (const auto* set : {&known_deltas, &known_closures}) {
      for (const auto& [k, f] : *set) {
        adj[f.from].push_back(f.to);
        adj[f.to].push_back(f.from);
      }
    }
    std::set<NodeKey> reached{root};
    std::vector<NodeKey> stack{root};
    for (const auto& [k, h] : hints) {
      if (reached.insert(k).second) stack.push_back(k);
    }
    while (!stack.empty()) {
      const NodeKey k = stack.back();
      stack.pop_back();
      for (const auto& o : adj[k]) {
        if (reached.insert(o).second) stack.push_back(o);
      }
    }

    for (const auto& k : reached) s.add_node(k, Pose2{});
    for (const auto* set : {&known_deltas, &known_closures}) {
      for (const auto& [k, f] : *set) {
        if (reached.count(f.from) && reached.count(f.to)) s.add_factor(f);
      }
    }
    initialize_skeleton(s, root, hints);
    return s;
  }

  /// Rebuilds and optimizes the cached skeleton.
  const Skeleton& refresh_skeleton(const OptimizeParams& params = {}) {
    skeleton_ = optimize(build_skeleton(), params);
    return skeleton_;
  }

  const Skeleton& skeleton() const { return skeleton_; }

  std::optional<Pose2> estimate(const NodeKey& k) const {
    if (auto it = skeleton_.poses.find(k); it != skeleton_.poses.end()) return it->second;
    return std::nullopt;
  }

 private:
  std::uint16_t id_;
  Skeleton skeleton_;
};

// ---------------------------------------------------------------------------

namespace detail {

class Session {
 public:
  Session(Link& link, BandwidthLedger& ledger, double time, std::size_t encounter)
      : link_(link), ledger_(ledger), time_(time), encounter_(encounter),
        remaining_(link.model().budget) {}

  bool fits(std::size_t bytes) const { return !remaining_ || bytes <= *remaining_; }
  std::optional<std::size_t> remaining() const { return remaining_; }

  /// Transmits when the budget allows; returns whether it arrived. Digests
  /// are never dropped.
  bool send(std::uint16_t from, std::uint16_t to, const WireMessage& m) {
    if (!fits(m.size())) return false;
    if (remaining_) *remaining_ -= m.size();
    const bool arrived = m.kind == MessageKind::Digest || link_.deliver();
    ledger_.record({from, to, m.kind, m.size(), time_, encounter_, arrived});
    return arrived;
  }

 private:
  Link& link_;
  BandwidthLedger& ledger_;
  double time_;
  std::size_t encounter_;
  std::optional<std::size_t> remaining_;
};

inline std::vector<DeltaPoseFactor> missing(const std::map<FactorKey, DeltaPoseFactor>& held,
                                            const std::vector<FactorKey>& peer_keys) {
  const std::set<FactorKey> peer(peer_keys.begin(), peer_keys.end());
  std::vector<DeltaPoseFactor> out;
  for (const auto& [k, f] : held) {
    if (!peer.count(k)) out.push_back(f);
  }
  return out;
}

inline void send_batch(Session& s, AgentStore& from, AgentStore& to, MessageKind kind,
                       std::vector<DeltaPoseFactor> records) {
  if (records.empty()) return;
  if (auto room = s.remaining()) records.resize(std::min(records.size(), *room / kDeltaRecordBytes));
  if (records.empty()) return;
  WireMessage m{kind, encode_batch(records)};
  if (!s.send(from.id(), to.id(), m)) return;
  for (const auto& f : decode_batch(m.payload)) {
    if (kind == MessageKind::ClosureBatch) {
      to.add_closure(f);
    } else {
      to.known_deltas.emplace(key_of(f), f);
    }
  }
}

/// Own maplets the peer lacks: likely closure candidates first, then the
/// rest, each group in key order.
inline std::vector<NodeKey> maplet_queue(const AgentStore& sender, const Digest& peer,
                                         std::uint16_t peer_id, const ProtocolParams& params) {
  const std::set<NodeKey> peer_has(peer.maplets.begin(), peer.maplets.end());
  std::vector<Eigen::Vector2d> peer_track;
  for (const auto& [k, p] : sender.skeleton().poses) {
    if (k.agent == peer_id) peer_track.push_back(p.translation());
  }
  std::vector<NodeKey> first, rest;
  for (const auto& [k, m] : sender.own_maplets) {
    if (peer_has.count(k)) continue;
    bool likely = m.salience >= params.salience_min;
    if (const auto est = sender.estimate(k); est && !likely) {
      for (const auto& q : peer_track) {
        if ((q - est->translation()).norm() <= params.proximity_radius) {
          likely = true;
          break;
        }
      }
    }
    (likely ? first : rest).push_back(k);
  }
  first.insert(first.end(), rest.begin(), rest.end());
  return first;
}

}  // namespace detail

struct EncounterSummary {
  std::size_t bytes = 0;
  std::size_t maplets_delivered = 0;
};

/// One reconciliation round between a and b. Stores are updated in place;
/// every transmission is appended to the ledger.
inline EncounterSummary encounter(AgentStore& a, AgentStore& b, Link& link, BandwidthLedger& ledger,
                                  double sim_time = 0.0, std::size_t encounter_index = 0,
                                  const ProtocolParams& params = {}) {
  const std::size_t before = ledger.total();
  detail::Session s(link, ledger, sim_time, encounter_index);
  EncounterSummary out;

  // Phase 1: digests.
  const Digest da = a.digest(), db = b.digest();
  const WireMessage ma{MessageKind::Digest, encode_digest(da)};
  const WireMessage mb{MessageKind::Digest, encode_digest(db)};
  if (!s.fits(ma.size() + mb.size())) return out;
  s.send(a.id(), b.id(), ma);
  s.send(b.id(), a.id(), mb);
  // What each side now knows the other holds.
  const Digest held_by_b = decode_digest(mb.payload), held_by_a = decode_digest(ma.payload);

  // Phases 2 and 3: missing delta-poses, then missing closures.
  detail::send_batch(s, a, b, MessageKind::DeltaPoseBatch, detail::missing(a.known_deltas, held_by_b.deltas));
  detail::send_batch(s, b, a, MessageKind::DeltaPoseBatch, detail::missing(b.known_deltas, held_by_a.deltas));
  detail::send_batch(s, a, b, MessageKind::ClosureBatch, detail::missing(a.known_closures, held_by_b.closures));
  detail::send_batch(s, b, a, MessageKind::ClosureBatch, detail::missing(b.known_closures, held_by_a.closures));

  // Phase 4: maplets, alternating directions until both queues are empty or
  // the next payload does not fit.
  const auto qa = detail::maplet_queue(a, held_by_b, b.id(), params);
  const auto qb = detail::maplet_queue(b, held_by_a, a.id(), params);
  std::size_t ia = 0, ib = 0;
  bool a_turn = true;
  while (ia < qa.size() || ib < qb.size()) {
    const bool from_a = (a_turn && ia < qa.size()) || ib >= qb.size();
    a_turn = !a_turn;
    AgentStore& snd = from_a ? a : b;
    AgentStore& rcv = from_a ? b : a;
    const NodeKey k = from_a ? qa[ia++] : qb[ib++];
    const WireMessage m{MessageKind::MapletPayload, encode_maplet(snd.own_maplets.at(k))};
    if (!s.fits(m.size())) break;
    if (s.send(snd.id(), rcv.id(), m)) {
      rcv.foreign_maplets[k] = decode_maplet(m.payload);
      ++out.maplets_delivered;
    }
  }
  out.bytes = ledger.total() - before;
  return out;
}

/// Aligns own maplets against foreign ones whose estimated origins are close,
/// and returns new loop closures (own -> foreign). Only foreign maplets of
/// higher-id agents are considered, so each physical overlap is processed by
/// one agent. The store's skeleton must be current.
inline std::vector<DeltaPoseFactor> detect_inter_agent_closures(AgentStore& store,
                                                                const ProtocolParams& params = {}) {
  struct Candidate {
    NodeKey own, foreign;
    AlignmentResult result;
  };
  std::map<std::uint16_t, std::vector<Candidate>> by_peer;
  for (const auto& [fk, foreign] : store.foreign_maplets) {
    if (fk.agent <= store.id()) continue;
    const auto xf = store.estimate(fk);
    if (!xf) continue;
    for (const auto& [ok, own] : store.own_maplets) {
      if (store.tested_pairs.count({ok, fk})) continue;
      const auto xo = store.estimate(ok);
      if (!xo) continue;
      const Eigen::Vector2d mid = 0.5 * (xo->translation() + xf->translation());
      if ((xo->translation() - xf->translation()).norm() > params.overlap_radius) continue;
      store.tested_pairs.insert({ok, fk});
      PairAlignmentOptions opts;
      opts.initial_guess = lift_se3(between(*xf, *xo));
      opts.icap = params.icap;
      const auto roi = RoiPolygon::disk(invert(*xo) * mid, params.roi_radius);
      const auto r = maplet_pair_alignment(own, foreign, roi, opts);
      if (const auto* ok_result = std::get_if<AlignmentResult>(&r)) {
        by_peer[fk.agent].push_back({ok, fk, *ok_result});
      }
    }
  }

  std::vector<DeltaPoseFactor> out;
  for (auto& [peer, cands] : by_peer) {
    std::size_t have = 0;
    for (const auto& [k, f] : store.known_closures) {
      const bool joins = (f.from.agent == store.id() && f.to.agent == peer) ||
                         (f.to.agent == store.id() && f.from.agent == peer);
      have += joins ? 1 : 0;
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
      return x.result.mean_error() < y.result.mean_error();
    });
    for (const auto& c : cands) {
      if (have >= params.max_closures_per_peer) break;
      DeltaPoseFactor f;
      f.from = c.own;
      f.to = c.foreign;
      f.delta = project_se2(invert(c.result.transform)).pose;
      f.cov = c.result.covariance;
      f.kind = FactorKind::LoopClosure;
      if (store.add_closure(f)) {
        out.push_back(f);
        ++have;
      }
    }
  }
  return out;
}

/// Noisy range between two maplet origins whose true poses are given.
inline RangeFactor range_measurement(const NodeKey& a, const Pose2& true_a, const NodeKey& b,
                                     const Pose2& true_b, double sigma, std::mt19937_64& rng,
                                     double max_range = std::numeric_limits<double>::infinity()) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("range sigma must be non-negative");
  const double truth = (true_a.translation() - true_b.translation()).norm();
  if (truth > max_range) throw OutOfRange("agents are beyond ranging distance");
  const double noise = sigma > 0.0 ? std::normal_distribution<double>(0.0, sigma)(rng) : 0.0;
  return {a, b, std::max(0.0, truth + noise), sigma * sigma};
}

}  // namespace maplets
