#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <set>

#include "doctest.h"
#include "rcm/mdp.hpp"

using namespace rcm;

namespace {

RoadNetwork chain3() {
  return load_network(
      {{0, 0.0, 0.0}, {1, 100.0, 0.0}, {2, 200.0, 0.0}, {3, 300.0, 0.0}},
      {{0, 0, 1, 100.0, RoadLevel::residential},
       {1, 1, 2, 100.0, RoadLevel::residential},
       {2, 2, 3, 100.0, RoadLevel::residential}});
}

// two equal-length parallel routes between the same OD links
RoadNetwork diamond() {
  const double leg = std::sqrt(2.0) * 100.0;
  return load_network(
      {{0, -100.0, 0.0},
       {1, 0.0, 0.0},
       {2, 100.0, 100.0},
       {3, 100.0, -100.0},
       {4, 200.0, 0.0},
       {5, 300.0, 0.0}},
      {{0, 0, 1, 100.0, RoadLevel::residential},
       {1, 1, 2, leg, RoadLevel::residential},
       {2, 1, 3, leg, RoadLevel::residential},
       {3, 2, 4, leg, RoadLevel::residential},
       {4, 3, 4, leg, RoadLevel::residential},
       {5, 4, 5, 100.0, RoadLevel::residential}});
}

std::string temp_dir() {
  const auto d = std::filesystem::temp_directory_path() / "rcm_mdp_tests";
  std::filesystem::create_directories(d);
  return d.string();
}

}  // namespace

TEST_CASE("step") {
  RoadNetwork ch = chain3();
  ActionTable at = build_action_table(ch);
  SUBCASE("straight successor under F") { CHECK(step(at, 0, kF) == 1); }
  SUBCASE("unmapped direction is a contract violation") {
    CHECK_THROWS_AS(step(at, 0, kR), ContractError);
  }
  SUBCASE("stepping into the destination is terminal for the caller") {
    const int32_t next = step(at, 1, kF);
    CHECK(next == 2);  // callers compare against ctx.dest_idx
  }
}

TEST_CASE("ingest filters") {
  RoadNetwork net = synth_grid_network(10, 10, 100.0, 4);
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  // build one long valid path by following a destination tree
  const size_t dest = 0;
  const auto& table = cache.dest_table(dest);
  size_t far = 0;
  for (size_t s = 0; s < net.num_links(); ++s)
    if (table.reachable(s) &&
        table.metrics[s].n_links > table.metrics[far].n_links)
      far = s;
  REQUIRE(table.metrics[far].n_links >= 15);
  std::vector<int64_t> ids;
  for (int32_t cur = static_cast<int32_t>(far); cur != -1;
       cur = table.next_hop[cur]) {
    ids.push_back(net.link(static_cast<size_t>(cur)).id);
    if (cur == static_cast<int32_t>(dest)) break;
  }
  auto seq = [&](size_t n) {
    std::string s;
    for (size_t i = 0; i < n; ++i) {
      if (i) s += ';';
      s += std::to_string(ids[i]);
    }
    return s;
  };
  const std::string dir = temp_dir();
  const std::string path = dir + "/trips.csv";
  {
    std::ofstream os(path);
    os << "trip_id,agent_id,link_seq\n";
    os << "1,," << seq(14) << "\n";                      // too short
    os << "2,," << seq(16) << "\n";                      // kept
    os << "3,," << seq(16) << ";" << ids[14] << "\n";    // revisits a link
    os << "4,," << ids[0] << ";" << ids[0] << ";x\n";    // parse error
    os << "5,7," << seq(20) << "\n";                     // kept, with agent
    // non-adjacent pair rejects the trip: splice in a fresh link that does
    // not continue from the 15th one
    int64_t stranger = -1;
    for (size_t l = 0; l < net.num_links(); ++l) {
      const int64_t cand = net.link(l).id;
      if (std::find(ids.begin(), ids.end(), cand) != ids.end()) continue;
      const int dir = at.direction_of(net.index_of(ids[14]), l);
      if (dir < 0) {
        stranger = cand;
        break;
      }
    }
    REQUIRE(stranger >= 0);
    os << "6,," << seq(15) << ";" << stranger << "\n";
  }
  IngestResult res = ingest_trajectories(path, net, at);
  CHECK(res.report.kept == 2);
  CHECK(res.report.dropped_short == 1);
  CHECK(res.report.dropped_cyclic == 1);
  CHECK(res.report.dropped_nonadjacent == 1);
  REQUIRE(res.report.parse_errors.size() == 1);
  CHECK(res.report.parse_errors[0].find(":5") != std::string::npos);
  // 16-link trip contributes 15 triplets, the 20-link one 19
  CHECK(res.dataset.triplets().size() == 15 + 19);
  CHECK(res.dataset.agent_ids.size() == 1);
  SUBCASE("trajectories re-validate against step()") {
    for (const auto& tr : res.dataset.trajectories) {
      int32_t cur = tr.links.front();
      for (size_t i = 0; i < tr.actions.size(); ++i) {
        cur = step(at, cur, tr.actions[i]);
        CHECK(cur == tr.links[i + 1]);
      }
      CHECK(cur == tr.ctx.dest_idx);
    }
  }
  SUBCASE("an all-filtered file is an error") {
    const std::string p2 = dir + "/empty.csv";
    {
      std::ofstream os(p2);
      os << "trip_id,agent_id,link_seq\n1,," << seq(3) << "\n";
    }
    CHECK_THROWS_AS(ingest_trajectories(p2, net, at), LoadError);
  }
}

namespace {
// argmax toward the smallest remaining shortest distance
class GreedyPolicy final : public ActionPolicy {
 public:
  GreedyPolicy(const FeatureCache& cache) : cache_(&cache) {}
  std::array<double, kNumDirections> action_probs(
      int32_t link, const Context& ctx) const override {
    const auto& at = cache_->action_table();
    const auto& table = cache_->dest_table(ctx.dest_idx);
    std::array<double, kNumDirections> p{};
    int best = -1;
    double best_cost = 0.0;
    for (int d = 0; d < kNumDirections; ++d) {
      const int32_t sp = at.next(link, d);
      if (sp < 0) continue;
      if (!(static_cast<size_t>(sp) == static_cast<size_t>(ctx.dest_idx) ||
            table.reachable(sp)))
        continue;
      const double cost = table.distance_m[sp];
      if (best == -1 || cost < best_cost) {
        best = d;
        best_cost = cost;
      }
    }
    if (best >= 0) p[best] = 1.0;
    return p;
  }

 private:
  const FeatureCache* cache_;
};
}  // namespace

TEST_CASE("rollout") {
  RoadNetwork net = synth_grid_network(6, 6, 100.0, 11, /*jitter=*/0.0);
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  Context ctx;
  ctx.dest_idx = 30;
  const int32_t origin = 99;
  REQUIRE(cache.dest_table(ctx.dest_idx).reachable(origin));
  SUBCASE("greedy rollout lands on a shortest path") {
    GreedyPolicy policy(cache);
    std::mt19937_64 rng(1);
    Trajectory tr = rollout(policy, at, origin, ctx, 200, rng);
    REQUIRE(tr.complete);
    double len = 0.0;
    for (size_t i = 1; i < tr.links.size(); ++i)
      len += net.link(tr.links[i]).length_m;
    CHECK(len ==
          doctest::Approx(cache.dest_table(ctx.dest_idx).distance_m[origin]));
  }
  SUBCASE("max_steps truncation flags the rollout incomplete") {
    GreedyPolicy policy(cache);
    std::mt19937_64 rng(1);
    REQUIRE(cache.dest_table(ctx.dest_idx).metrics[origin].n_links >= 2);
    Trajectory tr = rollout(policy, at, origin, ctx, 1, rng);
    CHECK(!tr.complete);
    CHECK(tr.links.size() == 2);
  }
  SUBCASE("fixed seed reproduces the rollout") {
    GreedyPolicy policy(cache);
    std::mt19937_64 r1(77), r2(77);
    Trajectory a = rollout(policy, at, origin, ctx, 200, r1);
    Trajectory b = rollout(policy, at, origin, ctx, 200, r2);
    CHECK(a.links == b.links);
  }
  SUBCASE("origin equal to destination violates the contract") {
    GreedyPolicy policy(cache);
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(rollout(policy, at, ctx.dest_idx, ctx, 10, rng),
                    ContractError);
  }
  SUBCASE("a policy with zero mass on every action violates the contract") {
    class ZeroPolicy final : public ActionPolicy {
     public:
      std::array<double, kNumDirections> action_probs(
          int32_t, const Context&) const override {
        return {};
      }
    };
    ZeroPolicy zero;
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(rollout(zero, at, origin, ctx, 10, rng), ContractError);
  }
}

TEST_CASE("synthetic grid networks") {
  SUBCASE("2x2 grid has 8 directed links") {
    RoadNetwork net = synth_grid_network(2, 2, 100.0, 1);
    CHECK(net.num_links() == 8);
  }
  SUBCASE("same seed gives identical networks") {
    RoadNetwork a = synth_grid_network(4, 5, 120.0, 9);
    RoadNetwork b = synth_grid_network(4, 5, 120.0, 9);
    REQUIRE(a.num_links() == b.num_links());
    for (size_t i = 0; i < a.num_links(); ++i) {
      CHECK(a.link(i).length_m == b.link(i).length_m);
      CHECK(a.link(i).level == b.link(i).level);
    }
    CHECK(a.adjacency_pairs() == b.adjacency_pairs());
  }
  SUBCASE("every interior intersection offers 3 actions (no u-turn)") {
    RoadNetwork net = synth_grid_network(5, 5, 100.0, 2);
    ActionTable at = build_action_table(net);
    int interior_links = 0;
    for (size_t s = 0; s < net.num_links(); ++s) {
      // head node degree 4 means an interior intersection
      const auto& succ = net.successors(s);
      if (succ.size() == 3) {
        ++interior_links;
        CHECK(at.valid_count(s) == 3);
      }
      for (int32_t sp : succ) {  // u-turn twins excluded
        const bool is_twin = net.link(sp).to_node == net.link(s).from_node &&
                             net.link(sp).from_node == net.link(s).to_node;
        CHECK(!is_twin);
      }
    }
    CHECK(interior_links > 0);
  }
  SUBCASE("lengths jitter within 10 percent") {
    RoadNetwork net = synth_grid_network(4, 4, 1000.0, 5);
    for (size_t i = 0; i < net.num_links(); ++i) {
      CHECK(net.link(i).length_m >= 900.0 - 1e-9);
      CHECK(net.link(i).length_m <= 1100.0 + 1e-9);
    }
  }
}

TEST_CASE("soft value iteration") {
  SUBCASE("single chain with r=-1 per step and gamma=1: V at k hops is -k") {
    RoadNetwork ch = chain3();
    ActionTable at = build_action_table(ch);
    FeatureCache cache(ch, at, FeatureConfig{});
    LinearReward r;
    r.constant = -1.0;
    SoftValues sv = soft_value_iteration(cache, r, 2, 1.0);
    CHECK(sv.values[2] == 0.0);
    CHECK(sv.values[1] == doctest::Approx(-1.0));
    CHECK(sv.values[0] == doctest::Approx(-2.0));
    CHECK(sv.policy[0][kF] == doctest::Approx(1.0));
  }
  SUBCASE("two equal parallel routes split the first step 0.5/0.5") {
    RoadNetwork net = diamond();
    ActionTable at = build_action_table(net);
    FeatureCache cache(net, at, FeatureConfig{});
    LinearReward r;
    r.constant = -1.0;
    SoftValues sv = soft_value_iteration(cache, r, 5, 1.0);
    double p_up = 0.0, p_down = 0.0;
    for (int d = 0; d < kNumDirections; ++d) {
      if (at.next(0, d) == 1) p_up = sv.policy[0][d];
      if (at.next(0, d) == 2) p_down = sv.policy[0][d];
    }
    CHECK(p_up == doctest::Approx(0.5));
    CHECK(p_down == doctest::Approx(0.5));
  }
  SUBCASE("grid with r = -length: V >= -dist and the argmax is shortest") {
    RoadNetwork net = synth_grid_network(5, 5, 2000.0, 13, /*jitter=*/0.0);
    ActionTable at = build_action_table(net);
    FeatureCache cache(net, at, FeatureConfig{});
    LinearReward r;
    r.length = -1.0;  // scaled lengths are 2.0 per block
    const size_t dest = 12;
    SoftValues sv = soft_value_iteration(cache, r, dest, 1.0, 1e-10);
    const auto& table = cache.dest_table(dest);
    for (size_t s = 0; s < net.num_links(); ++s) {
      if (s == dest || !table.reachable(s)) continue;
      const double neg_dist = -table.distance_m[s] / 1000.0;
      CHECK(sv.values[s] >= neg_dist - 1e-9);
      // greedy action stays on a shortest path
      int best = -1;
      double best_p = -1.0;
      for (int d = 0; d < kNumDirections; ++d)
        if (sv.policy[s][d] > best_p) {
          best_p = sv.policy[s][d];
          best = d;
        }
      const int32_t sp = at.next(s, best);
      REQUIRE(sp >= 0);
      const double via =
          net.link(sp).length_m +
          (static_cast<size_t>(sp) == dest ? 0.0 : table.distance_m[sp]);
      CHECK(via == doctest::Approx(table.distance_m[s]).epsilon(1e-9));
    }
  }
  SUBCASE("policy rows sum to 1 and V(dest) = 0") {
    RoadNetwork net = synth_grid_network(4, 4, 1000.0, 23);
    ActionTable at = build_action_table(net);
    FeatureCache cache(net, at, FeatureConfig{});
    LinearReward r;
    r.length = -1.5;
    const size_t dest = 7;
    SoftValues sv = soft_value_iteration(cache, r, dest, 0.99);
    CHECK(sv.values[dest] == 0.0);
    const auto& table = cache.dest_table(dest);
    for (size_t s = 0; s < net.num_links(); ++s) {
      if (s == dest || !table.reachable(s)) continue;
      double total = 0.0;
      for (double p : sv.policy[s]) total += p;
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  SUBCASE("rewards too positive fail to converge with a diagnosis") {
    RoadNetwork net = synth_grid_network(4, 4, 1000.0, 23);
    ActionTable at = build_action_table(net);
    FeatureCache cache(net, at, FeatureConfig{});
    LinearReward r;
    r.constant = 0.5;
    CHECK_THROWS_AS(soft_value_iteration(cache, r, 7, 1.0, 1e-9, 200),
                    NumericsError);
  }
}

TEST_CASE("synthetic demonstrations") {
  RoadNetwork net = synth_grid_network(8, 8, 1000.0, 31);
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  std::vector<int32_t> pool = {3, 40, 77, 120, 150, 200};
  const OdSampler sampler = make_od_sampler(cache, 6, pool);
  SUBCASE("a strong distance penalty concentrates on shortest paths") {
    LinearReward r;
    r.length = -50.0;
    DemoResult demos = synth_demonstrations(cache, r, 200, sampler, 1.0, 99);
    REQUIRE(demos.dataset.trajectories.size() == 200);
    int shortest = 0;
    for (const auto& tr : demos.dataset.trajectories) {
      double len = 0.0;
      for (size_t i = 1; i < tr.links.size(); ++i)
        len += net.link(tr.links[i]).length_m;
      const double best =
          cache.dest_table(tr.ctx.dest_idx).distance_m[tr.links.front()];
      if (std::fabs(len - best) < 1e-6) ++shortest;
    }
    CHECK(shortest >= 160);  // at least 80%
  }
  SUBCASE("beta = 0 gives the uniform policy over valid actions") {
    // with no reward signal the myopic (gamma=0) soft policy is exactly
    // uniform; near gamma=1 the fixed point weights successors by their
    // downstream path counts instead
    LinearReward r;
    SoftValues sv = soft_value_iteration(cache, r, pool[0], 0.0);
    for (size_t s = 0; s < net.num_links(); ++s) {
      if (s == static_cast<size_t>(pool[0])) continue;
      const auto mask = cache.action_mask(s, pool[0]);
      int n = 0;
      for (uint8_t m : mask) n += m;
      if (n == 0) continue;
      for (int d = 0; d < kNumDirections; ++d)
        if (mask[d])
          CHECK(sv.policy[s][d] == doctest::Approx(1.0 / n).epsilon(1e-6));
    }
  }
  SUBCASE("fixed seed reproduces the dataset") {
    LinearReward r;
    r.length = -2.0;
    DemoResult a = synth_demonstrations(cache, r, 25, sampler, 1.0, 5);
    DemoResult b = synth_demonstrations(cache, r, 25, sampler, 1.0, 5);
    REQUIRE(a.dataset.trajectories.size() == b.dataset.trajectories.size());
    for (size_t i = 0; i < a.dataset.trajectories.size(); ++i)
      CHECK(a.dataset.trajectories[i].links == b.dataset.trajectories[i].links);
  }
  SUBCASE("demonstrations are acyclic and complete") {
    LinearReward r;
    r.length = -2.0;
    DemoResult demos = synth_demonstrations(cache, r, 50, sampler, 1.0, 15);
    for (const auto& tr : demos.dataset.trajectories) {
      CHECK(tr.complete);
      std::set<int32_t> uniq(tr.links.begin(), tr.links.end());
      CHECK(uniq.size() == tr.links.size());
    }
  }
}

TEST_CASE("trajectory csv round trip") {
  RoadNetwork net = synth_grid_network(8, 8, 1000.0, 31);
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  std::vector<int32_t> pool = {3, 40, 77};
  const OdSampler sampler = make_od_sampler(cache, 6, pool);
  LinearReward r;
  r.length = -3.0;
  DemoResult demos =
      synth_demonstrations(cache, r, 30, sampler, 1.0, 123, /*n_agents=*/4);
  const std::string dir = temp_dir();
  write_trajectories_csv(dir + "/t.csv", net, demos.dataset);
  IngestResult back = ingest_trajectories(dir + "/t.csv", net, at, 2, false);
  REQUIRE(back.dataset.trajectories.size() ==
          demos.dataset.trajectories.size());
  for (size_t i = 0; i < back.dataset.trajectories.size(); ++i) {
    CHECK(back.dataset.trajectories[i].links ==
          demos.dataset.trajectories[i].links);
    CHECK(back.dataset.trajectories[i].ctx.agent ==
          demos.dataset.trajectories[i].ctx.agent);
  }
}

TEST_CASE("default max steps") {
  CHECK(default_max_steps(10) == 50);
  CHECK(default_max_steps(20) == 60);
  CHECK(default_max_steps(0) == 50);
}
