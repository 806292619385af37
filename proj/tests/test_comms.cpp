#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "maplets/comms.hpp"
#include "test_util.hpp"

using namespace maplets;
using maplets::testing::floor_patch;
using maplets::testing::wall_patch;

namespace {

DeltaPoseFactor odo(std::uint16_t agent, std::uint16_t from, double dx, double dth = 0.0) {
  DeltaPoseFactor f;
  f.from = {agent, from};
  f.to = {agent, static_cast<std::uint16_t>(from + 1)};
  f.delta = {dx, 0.0, dth};
  f.cov = Eigen::Vector3d(1e-4, 1e-4, 1e-5).asDiagonal();
  return f;
}

void add_chain(AgentStore& s, std::size_t n, double step = 1.0) {
  for (std::size_t i = 0; i < n; ++i) {
    s.add_own_delta(odo(s.id(), static_cast<std::uint16_t>(i), step, 0.1 * static_cast<double>(i)));
  }
}

// Room corner with a floor: enough independent normals for alignment.
Maplet room_maplet(std::uint16_t agent, std::uint16_t index, double salience = 0.0) {
  Maplet m;
  m.agent = agent;
  m.index = index;
  m.salience = salience;
  const Eigen::Vector2d inside(1.0, 1.0);
  m.planes = {wall_patch({-1, -1}, {4, -1}, inside), wall_patch({-1, -1}, {-1, 4}, inside),
              wall_patch({-1, 4}, {4, 4}, inside), wall_patch({2.5, 0.5}, {2.5, 2}, inside),
              floor_patch({-1, -1}, {4, 4})};
  Keyframe kf;
  kf.raw_points = 1000;
  m.keyframes = {kf};
  return m;
}

bool same_factor_sets(const AgentStore& a, const AgentStore& b) {
  const Digest da = a.digest(), db = b.digest();
  return da.deltas == db.deltas && da.closures == db.closures;
}

}  // namespace

TEST(Wire, DeltaRecordIs81Bytes) {
  // Two (u16, u16) keys, 3 + 6 doubles, one kind byte.
  EXPECT_EQ(kDeltaRecordBytes, 2 * 4 + 3 * 8 + 6 * 8 + 1U);
  EXPECT_LE(kDeltaRecordBytes, 100U);
  DeltaPoseFactor f = odo(3, 7, 0.25, -0.5);
  f.cov << 4, 1, 2, 1, 5, 3, 2, 3, 6;
  f.kind = FactorKind::LoopClosure;
  const auto bytes = encode_batch(std::vector{f});
  ASSERT_EQ(bytes.size(), kDeltaRecordBytes);
  EXPECT_EQ(bytes[0], 3);  // little-endian agent
  EXPECT_EQ(bytes[2], 7);
  const auto back = decode_batch(bytes);
  ASSERT_EQ(back.size(), 1U);
  EXPECT_EQ(back[0].from, f.from);
  EXPECT_EQ(back[0].to, f.to);
  EXPECT_EQ(back[0].delta.theta, f.delta.theta);
  EXPECT_EQ(back[0].cov, f.cov);
  EXPECT_EQ(back[0].kind, FactorKind::LoopClosure);
}

TEST(Wire, MalformedInputIsRejected) {
  auto bytes = encode_batch(std::vector{odo(0, 0, 1.0)});
  bytes.back() = 9;
  EXPECT_THROW(decode_batch(bytes), FormatError);
  bytes.pop_back();
  EXPECT_THROW(decode_batch(bytes), FormatError);
  Digest d;
  d.deltas = {{{0, 0}, {0, 1}}};
  auto db = encode_digest(d);
  db.push_back(0);
  EXPECT_THROW(decode_digest(db), FormatError);
}

TEST(Wire, DigestRoundTripAndSize) {
  Digest d;
  d.deltas = {{{0, 0}, {0, 1}}, {{0, 1}, {0, 2}}};
  d.closures = {{{0, 1}, {1, 4}}};
  d.maplets = {{0, 0}, {1, 4}};
  const auto bytes = encode_digest(d);
  EXPECT_EQ(bytes.size(), 12 + 3 * 8 + 2 * 4U);
  EXPECT_EQ(bytes.size(), digest_wire_size(d));
  const Digest back = decode_digest(bytes);
  EXPECT_EQ(back.deltas, d.deltas);
  EXPECT_EQ(back.closures, d.closures);
  EXPECT_EQ(back.maplets, d.maplets);
}

TEST(Encounter, IdenticalStoresExchangeOnlyDigests) {
  AgentStore a(0), b(1);
  add_chain(a, 2);
  b.known_deltas = a.known_deltas;
  Link link({});
  BandwidthLedger ledger;
  const auto r = encounter(a, b, link, ledger);
  ASSERT_EQ(ledger.entries().size(), 2U);
  EXPECT_EQ(ledger.total(MessageKind::Digest), ledger.total());
  EXPECT_EQ(r.bytes, 2 * (12 + 2 * 8U));
}

TEST(Encounter, ExactBytesForFiveMissingDeltas) {
  AgentStore a(0), b(1);
  add_chain(a, 5);
  Link link({});
  BandwidthLedger ledger;
  const auto r = encounter(a, b, link, ledger, 4.5, 2);
  // a's digest lists 5 keys, b's is empty; one batch of 5 records.
  EXPECT_EQ(r.bytes, (12 + 5 * 8) + 12 + 5 * 81U);
  EXPECT_EQ(ledger.total(0, 1, MessageKind::DeltaPoseBatch), 405U);
  EXPECT_EQ(ledger.total(1, 0, MessageKind::DeltaPoseBatch), 0U);
  EXPECT_EQ(ledger.encounter_bytes(2), r.bytes);
  EXPECT_TRUE(same_factor_sets(a, b));

  const auto again = encounter(a, b, link, ledger, 5.0, 3);
  EXPECT_EQ(again.bytes, 2 * (12 + 5 * 8U));
  EXPECT_EQ(ledger.total(MessageKind::DeltaPoseBatch), 405U);

  std::ostringstream csv;
  ledger.write_csv(csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "sender,receiver,kind,bytes,sim_time");
  EXPECT_NE(csv.str().find("0,1,delta_batch,405,4.500"), std::string::npos);
  std::size_t sum = 0;
  for (const auto& e : ledger.entries()) sum += e.bytes;
  EXPECT_EQ(sum, ledger.total());

  std::istringstream back(csv.str());
  const auto rows = read_ledger_csv(back);
  ASSERT_EQ(rows.size(), ledger.entries().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& e = ledger.entries()[i];
    EXPECT_EQ(rows[i].sender, e.sender);
    EXPECT_EQ(rows[i].receiver, e.receiver);
    EXPECT_EQ(rows[i].kind, e.kind);
    EXPECT_EQ(rows[i].bytes, e.bytes);
    EXPECT_EQ(rows[i].sim_time, e.sim_time);
  }
  std::istringstream bad("sender,receiver,kind,bytes,sim_time\n0,1,gossip,4,0.000\n");
  EXPECT_THROW(read_ledger_csv(bad), FormatError);
}

TEST(Encounter, ClosuresAndMapletsFlowBothWays) {
  AgentStore a(0), b(1);
  add_chain(a, 1);
  add_chain(b, 1);
  a.add_own_maplet(room_maplet(0, 0));
  b.add_own_maplet(room_maplet(1, 0));
  b.add_own_maplet(room_maplet(1, 1));
  DeltaPoseFactor c;
  c.from = {0, 1};
  c.to = {1, 0};
  c.cov = Eigen::Matrix3d::Identity() * 1e-3;
  a.add_closure(c);
  Link link({});
  BandwidthLedger ledger;
  const auto r = encounter(a, b, link, ledger);
  EXPECT_TRUE(same_factor_sets(a, b));
  EXPECT_EQ(r.maplets_delivered, 3U);
  EXPECT_EQ(a.foreign_maplets.size(), 2U);
  EXPECT_EQ(b.foreign_maplets.size(), 1U);
  EXPECT_EQ(ledger.total(MessageKind::ClosureBatch), 81U);
  EXPECT_EQ(ledger.total(MessageKind::MapletPayload), 3 * maplet_wire_size(5));
  EXPECT_EQ(b.foreign_maplets.at({0, 0}).planes.size(), 5U);
}

TEST(Encounter, BudgetLimitsTrafficAndSalientMapletsGoFirst) {
  AgentStore a(0), b(1);
  for (std::uint16_t i = 0; i < 4; ++i) a.add_own_maplet(room_maplet(0, i, i == 2 ? 3.0 : 0.0));
  LinkModel model;
  // Two digests (12 + 4 * 4 and 12 bytes) plus room for exactly one maplet.
  model.budget = 28 + 12 + maplet_wire_size(5) + 10;
  Link link(model);
  BandwidthLedger ledger;
  const auto r = encounter(a, b, link, ledger);
  EXPECT_LE(r.bytes, *model.budget);
  ASSERT_EQ(b.foreign_maplets.size(), 1U);
  EXPECT_EQ(b.foreign_maplets.begin()->first, (NodeKey{0, 2}));

  model.budget = 20;  // not even the digests fit
  Link tiny(model);
  EXPECT_EQ(encounter(a, b, tiny, ledger).bytes, 0U);
}

TEST(Encounter, DropsAreRepairedByLaterEncounters) {
  std::size_t worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    AgentStore a(0), b(1);
    add_chain(a, 6);
    add_chain(b, 4);
    DeltaPoseFactor c;
    c.from = {0, 3};
    c.to = {1, 2};
    c.delta = {0.5, 0.2, 0.1};
    c.cov = Eigen::Matrix3d::Identity() * 1e-3;
    a.add_closure(c);
    LinkModel model;
    model.drop_probability = 0.5;
    model.seed = seed;
    Link link(model);
    BandwidthLedger ledger;
    std::size_t n = 0;
    while (!same_factor_sets(a, b) && n < 10) encounter(a, b, link, ledger, 0.0, n++);
    ASSERT_TRUE(same_factor_sets(a, b)) << "seed " << seed;
    worst = std::max(worst, n);

    // Digest-only fixpoint from here on.
    const std::size_t before = ledger.total();
    encounter(a, b, link, ledger, 0.0, n);
    EXPECT_EQ(ledger.total() - before, 2 * (12 + 11 * 8U));

    const Skeleton sa = optimize(a.build_skeleton()), sb = optimize(b.build_skeleton());
    ASSERT_EQ(sa.poses.size(), sb.poses.size());
    for (const auto& [k, p] : sa.poses) {
      const Pose2& q = sb.poses.at(k);
      EXPECT_LE(std::max({std::abs(p.x - q.x), std::abs(p.y - q.y), std::abs(p.theta - q.theta)}), 1e-9);
    }
  }
  EXPECT_GT(worst, 1U);  // drops did happen
}

TEST(Encounter, SameSeedGivesIdenticalLedgers) {
  auto run = [](std::uint64_t seed) {
    AgentStore a(0), b(1);
    add_chain(a, 3);
    add_chain(b, 3);
    LinkModel model;
    model.drop_probability = 0.3;
    model.seed = seed;
    Link link(model);
    BandwidthLedger ledger;
    for (std::size_t i = 0; i < 4; ++i) encounter(a, b, link, ledger, static_cast<double>(i), i);
    std::ostringstream os;
    ledger.write_csv(os);
    return os.str();
  };
  EXPECT_EQ(run(9), run(9));
}

TEST(Skeleton, BuildUsesSpawnHintsForUnlinkedAgents) {
  AgentStore s(0);
  add_chain(s, 2);
  s.known_deltas[{{1, 0}, {1, 1}}] = odo(1, 0, 1.0);
  s.spawn_hints = {{0, Pose2{1.0, 1.0, 0.0}}, {1, Pose2{1.0, 4.0, kPi / 2}}};
  const Skeleton sk = s.build_skeleton();
  ASSERT_EQ(sk.poses.size(), 5U);
  EXPECT_NEAR(sk.poses.at({1, 0}).y, 3.0, 1e-12);
  EXPECT_NEAR(sk.poses.at({1, 1}).y, 4.0, 1e-12);

  s.spawn_hints.clear();
  EXPECT_EQ(s.build_skeleton().poses.size(), 3U);  // agent 1 is unreachable
}

TEST(Closures, DuplicateMapletGivesIdentityClosure) {
  AgentStore s(0);
  s.add_own_maplet(room_maplet(0, 0));
  s.foreign_maplets[{1, 0}] = room_maplet(1, 0);
  s.spawn_hints = {{0, Pose2{}}, {1, Pose2{0.2, -0.1, deg2rad(4.0)}}};
  s.refresh_skeleton();
  const auto closures = detect_inter_agent_closures(s);
  ASSERT_EQ(closures.size(), 1U);
  const auto& c = closures[0];
  EXPECT_EQ(c.from, (NodeKey{0, 0}));
  EXPECT_EQ(c.to, (NodeKey{1, 0}));
  EXPECT_EQ(c.kind, FactorKind::LoopClosure);
  EXPECT_NEAR(c.delta.x, 0.0, 1e-6);
  EXPECT_NEAR(c.delta.y, 0.0, 1e-6);
  EXPECT_NEAR(c.delta.theta, 0.0, 1e-6);
  EXPECT_EQ(s.known_closures.size(), 1U);
  EXPECT_TRUE(detect_inter_agent_closures(s).empty());  // pair already tested
}

TEST(Closures, RecoversKnownOffsetAndKeepsOnePerPeer) {
  AgentStore s(0);
  s.add_own_maplet(room_maplet(0, 0));
  // Foreign maplet frame sits at (0.4, 0.3, 10 deg) in the own frame.
  const Pose2 truth{0.4, 0.3, deg2rad(10.0)};
  for (std::uint16_t i = 0; i < 2; ++i) {
    Maplet f = room_maplet(1, i);
    for (auto& p : f.planes) p = transform_patch(lift_se3(invert(truth)), p);
    s.foreign_maplets[{1, i}] = f;
  }
  s.known_deltas[{{1, 0}, {1, 1}}] = odo(1, 0, 0.0);
  s.spawn_hints = {{0, Pose2{}}, {1, Pose2{0.2, 0.5, deg2rad(3.0)}}};
  s.refresh_skeleton();
  const auto closures = detect_inter_agent_closures(s);
  ASSERT_EQ(closures.size(), 1U);
  EXPECT_NEAR(closures[0].delta.x, truth.x, 1e-6);
  EXPECT_NEAR(closures[0].delta.y, truth.y, 1e-6);
  EXPECT_NEAR(closures[0].delta.theta, truth.theta, 1e-6);
}

TEST(Closures, NoOverlapOrHigherIdFindsNothing) {
  AgentStore far(0);
  far.add_own_maplet(room_maplet(0, 0));
  far.foreign_maplets[{1, 0}] = room_maplet(1, 0);
  far.spawn_hints = {{0, Pose2{}}, {1, Pose2{20.0, 0.0, 0.0}}};
  far.refresh_skeleton();
  EXPECT_TRUE(detect_inter_agent_closures(far).empty());
  EXPECT_TRUE(far.tested_pairs.empty());

  AgentStore high(1);
  high.add_own_maplet(room_maplet(1, 0));
  high.foreign_maplets[{0, 0}] = room_maplet(0, 0);
  high.spawn_hints = {{0, Pose2{}}, {1, Pose2{}}};
  high.refresh_skeleton();
  EXPECT_TRUE(detect_inter_agent_closures(high).empty());
}

TEST(Range, ExactAndStatistical) {
  std::mt19937_64 rng(1);
  const NodeKey a{0, 2}, b{1, 5};
  EXPECT_EQ(range_measurement(a, Pose2{1, 1, 0}, b, Pose2{1, 1, 2}, 0.0, rng).range, 0.0);
  const RangeFactor five = range_measurement(a, Pose2{0, 0, 0}, b, Pose2{3, 4, 0}, 0.0, rng);
  EXPECT_EQ(five.range, 5.0);
  EXPECT_EQ(five.a, a);
  EXPECT_EQ(five.b, b);
  EXPECT_THROW(range_measurement(a, Pose2{}, b, Pose2{3, 4, 0}, 0.1, rng, 4.0), OutOfRange);

  double sum = 0.0, sum2 = 0.0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const RangeFactor f = range_measurement(a, Pose2{0, 0, 0}, b, Pose2{3, 4, 0}, 0.1, rng);
    EXPECT_DOUBLE_EQ(f.variance, 0.01);
    sum += f.range;
    sum2 += f.range * f.range;
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sum2 / n - mean * mean);
  EXPECT_NEAR(mean, 5.0, 0.01);
  EXPECT_NEAR(sd, 0.1, 0.015);
}
