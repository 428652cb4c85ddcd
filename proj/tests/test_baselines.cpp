#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <algorithm>
#include <limits>
#include <random>
#include <set>

#include "doctest.h"
#include "rcm/baselines.hpp"
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

RoadNetwork square_network() {
  std::vector<NodeRecord> nodes = {
      {0, 0.0, 0.0}, {1, 100.0, 0.0}, {2, 100.0, 100.0}, {3, 0.0, 100.0}};
  std::vector<LinkRecord> links;
  int64_t id = 0;
  auto add = [&](int64_t a, int64_t b) {
    links.push_back({id++, a, b, 100.0, RoadLevel::residential});
    links.push_back({id++, b, a, 100.0, RoadLevel::residential});
  };
  add(0, 1);
  add(1, 2);
  add(2, 3);
  add(3, 0);
  return load_network(nodes, links);
}

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

}  // namespace

TEST_CASE("recursive logit values") {
  SUBCASE("chain with v = -1 per transition: V at k hops is -k") {
    RoadNetwork ch = chain3();
    ActionTable at = build_action_table(ch);
    FeatureCache cache(ch, at, FeatureConfig{});
    RlParams p;
    p.length = -10.0;  // scaled link length is 0.1, so v = -1 per step
    RlValues v = rl_solve_values(cache, p, 2);
    CHECK(v.v[2] == doctest::Approx(0.0));
    CHECK(v.v[1] == doctest::Approx(-1.0));
    CHECK(v.v[0] == doctest::Approx(-2.0));
  }
  SUBCASE("two symmetric routes add log 2 over the single-route value") {
    RoadNetwork net = diamond();
    ActionTable at = build_action_table(net);
    FeatureCache cache(net, at, FeatureConfig{});
    RlParams p;
    p.length = -8.0;
    RlValues v = rl_solve_values(cache, p, 5);
    const double leg_u = -8.0 * std::sqrt(2.0) * 100.0 / 1000.0;
    const double tail_u = -8.0 * 100.0 / 1000.0;  // final link into the dest
    // one route from the first link is worth 2 legs + the tail; the two
    // parallel routes add exactly log 2 on top
    CHECK(v.v[1] == doctest::Approx(leg_u + tail_u));
    CHECK(v.v[0] == doctest::Approx(2.0 * leg_u + tail_u + std::log(2.0)));
  }
  SUBCASE("linear solve equals value iteration on random 5x5 grids") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> len_c(-3.0, -1.5);
    std::uniform_real_distribution<double> small(-0.3, 0.0);
    std::uniform_real_distribution<double> lvl(-0.2, 0.2);
    for (int rep = 0; rep < 10; ++rep) {
      RoadNetwork net = synth_grid_network(5, 5, 1000.0, 100 + rep);
      ActionTable at = build_action_table(net);
      FeatureCache cache(net, at, FeatureConfig{});
      RlParams p;
      p.length = len_c(rng);
      p.left = small(rng);
      p.right = small(rng);
      for (int k = 0; k < kNumLevels; ++k) p.level[k] = lvl(rng);
      const size_t dest = rng() % net.num_links();
      RlValues solved = rl_solve_values(cache, p, dest);
      CHECK(!solved.used_fallback);
      RlValues iterated = rl_values_by_iteration(cache, p, dest);
      for (size_t s = 0; s < net.num_links(); ++s) {
        if (solved.v[s] == -std::numeric_limits<double>::infinity()) {
          CHECK(iterated.v[s] == solved.v[s]);
          continue;
        }
        CHECK(solved.v[s] == doctest::Approx(iterated.v[s]).epsilon(1e-6));
      }
      // literal fixed point: V(s) = logsum over successors of (v + V(s'))
      for (size_t s = 0; s < net.num_links(); ++s) {
        if (s == dest || solved.v[s] == -std::numeric_limits<double>::infinity())
          continue;
        double acc = 0.0;
        for (int32_t sp : net.successors(s)) {
          if (solved.v[sp] == -std::numeric_limits<double>::infinity())
            continue;
          acc += std::exp(rl_utility(cache, p, s, sp) + solved.v[sp]);
        }
        CHECK(solved.v[s] == doctest::Approx(std::log(acc)).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("recursive logit next-link probabilities") {
  RoadNetwork net = diamond();
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  RlParams p;
  p.length = -5.0;
  RlValues v = rl_solve_values(cache, p, 5);
  SUBCASE("two successors with equal v and V split 0.5/0.5") {
    CHECK(rl_next_prob(cache, p, v, 0, 1) == doctest::Approx(0.5));
    CHECK(rl_next_prob(cache, p, v, 0, 2) == doctest::Approx(0.5));
  }
  SUBCASE("probabilities over successors sum to 1") {
    double total = 0.0;
    for (int32_t sp : net.successors(0))
      total += rl_next_prob(cache, p, v, 0, sp);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("a chain forces probability 1") {
    RoadNetwork ch = chain3();
    ActionTable cat = build_action_table(ch);
    FeatureCache ccache(ch, cat, FeatureConfig{});
    RlValues cv = rl_solve_values(ccache, p, 2);
    CHECK(rl_next_prob(ccache, p, cv, 0, 1) == doctest::Approx(1.0));
  }
  SUBCASE("an invalid successor is rejected") {
    CHECK_THROWS_AS(rl_next_prob(cache, p, v, 0, 5), ContractError);
  }
}

TEST_CASE("recursive logit estimation recovers the generating signs") {
  RoadNetwork net = synth_grid_network(5, 5, 1000.0, 400);
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  LinearReward beta;
  beta.length = -2.0;
  beta.left = -1.0;
  beta.right = -0.5;
  const OdSampler sampler = make_od_sampler(cache, 4);
  TrajectoryDataset demos =
      synth_demonstrations(cache, beta, 400, sampler, 1.0, 7).dataset;
  RlFitResult fit = rl_fit(demos, cache, 120);
  CHECK(fit.log_likelihood >= fit.null_log_likelihood);
  CHECK(fit.params.length < 0.0);
  CHECK(fit.params.left < 0.0);
  CHECK(fit.params.right < 0.0);
  // rank order of the generating coefficients: length < left < right
  CHECK(fit.params.length < fit.params.left);
  CHECK(fit.params.left < fit.params.right);
  SUBCASE("on an acyclic network the zero model scores sum log(1/|succ|)") {
    // zero utilities keep the path sum finite only without cycles; on the
    // diamond the beta=0 likelihood is the uniform next-link model
    RoadNetwork dia = diamond();
    ActionTable dat = build_action_table(dia);
    FeatureCache dcache(dia, dat, FeatureConfig{});
    TrajectoryDataset trips;
    for (int32_t mid : {1, 2}) {
      Trajectory tr;
      tr.links = {0, mid, mid + 2, 5};
      tr.actions.clear();
      for (size_t i = 0; i + 1 < tr.links.size(); ++i)
        tr.actions.push_back(static_cast<int8_t>(
            dat.direction_of(tr.links[i], tr.links[i + 1])));
      tr.ctx.dest_idx = 5;
      trips.trajectories.push_back(tr);
    }
    trips.finalize();
    RlFitResult dfit = rl_fit(trips, dcache, 5);
    // each trip: one 2-way choice then two forced moves
    CHECK(dfit.null_log_likelihood ==
          doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-9));
    CHECK(dfit.log_likelihood >= dfit.null_log_likelihood - 1e-12);
  }
  SUBCASE("coefficients round trip through the CSV export") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "rcm_rl").string();
    fs::create_directories(dir);
    save_rl_params_csv(dir + "/c.csv", fit.params);
    RlParams back = load_rl_params_csv(dir + "/c.csv");
    CHECK(back.length == fit.params.length);
    CHECK(back.left == fit.params.left);
    CHECK(back.uturn == fit.params.uturn);
  }
}

TEST_CASE("k shortest paths") {
  SUBCASE("a chain yields exactly one path") {
    RoadNetwork ch = chain3();
    ActionTable at = build_action_table(ch);
    FeatureCache cache(ch, at, FeatureConfig{});
    ChoiceSet cs = ksp_choice_set(cache, 0, 2, 5);
    REQUIRE(cs.candidates.size() == 1);
    CHECK(cs.candidates[0].links == std::vector<int32_t>{0, 1, 2});
    CHECK(cs.candidates[0].kappa == doctest::Approx(1.0));
  }
  SUBCASE("square corner-to-corner: two distinct simple paths, equal length") {
    RoadNetwork net = square_network();
    ActionTable at = build_action_table(net);
    FeatureCache cache(net, at, FeatureConfig{});
    // from the eastbound bottom link to the westbound top link
    ChoiceSet cs = ksp_choice_set(cache, net.index_of(0), net.index_of(5), 2);
    REQUIRE(cs.candidates.size() == 2);
    CHECK(cs.candidates[0].cost_m == doctest::Approx(300.0));
    CHECK(cs.candidates[1].cost_m == doctest::Approx(300.0));
    CHECK(cs.candidates[0].links != cs.candidates[1].links);
  }
  SUBCASE("candidates are sorted, distinct and simple") {
    RoadNetwork net = synth_grid_network(4, 4, 100.0, 31);
    ActionTable at = build_action_table(net);
    FeatureCache cache(net, at, FeatureConfig{});
    std::mt19937_64 rng(3);
    int checked = 0;
    while (checked < 8) {
      const size_t o = rng() % net.num_links();
      const size_t d = rng() % net.num_links();
      if (o == d || !cache.dest_table(d).reachable(o)) continue;
      ChoiceSet cs = ksp_choice_set(cache, static_cast<int32_t>(o),
                                    static_cast<int32_t>(d), 5);
      REQUIRE(!cs.candidates.empty());
      for (size_t j = 0; j < cs.candidates.size(); ++j) {
        const auto& c = cs.candidates[j];
        CHECK(c.links.front() == static_cast<int32_t>(o));
        CHECK(c.links.back() == static_cast<int32_t>(d));
        std::set<int32_t> uniq(c.links.begin(), c.links.end());
        CHECK(uniq.size() == c.links.size());  // simple
        if (j > 0)
          CHECK(c.cost_m >= cs.candidates[j - 1].cost_m - 1e-9);  // sorted
        for (size_t i = 0; i < j; ++i)
          CHECK(c.links != cs.candidates[i].links);  // distinct
        CHECK(c.kappa > 0.0);
        CHECK(c.kappa <= 1.0 + 1e-12);
      }
      ++checked;
    }
  }
  SUBCASE("an unreachable OD is signaled distinctly") {
    RoadNetwork ch = chain3();
    ActionTable at = build_action_table(ch);
    FeatureCache cache(ch, at, FeatureConfig{});
    CHECK_THROWS_AS(ksp_choice_set(cache, 2, 0, 5), UnreachableError);
  }
}

TEST_CASE("path size terms") {
  RoadNetwork ch = chain3();
  auto make_cs = [&](std::vector<std::vector<int32_t>> paths) {
    ChoiceSet cs;
    for (auto& p : paths) {
      PathCandidate c;
      c.links = std::move(p);
      cs.candidates.push_back(std::move(c));
    }
    compute_path_sizes(ch, cs);
    return cs;
  };
  SUBCASE("a single candidate has kappa 1") {
    ChoiceSet cs = make_cs({{0, 1, 2}});
    CHECK(cs.candidates[0].kappa == doctest::Approx(1.0));
  }
  SUBCASE("two identical candidates halve to 0.5 each") {
    ChoiceSet cs = make_cs({{0, 1, 2}, {0, 1, 2}});
    CHECK(cs.candidates[0].kappa == doctest::Approx(0.5));
    CHECK(cs.candidates[1].kappa == doctest::Approx(0.5));
  }
  SUBCASE("two fully disjoint candidates keep kappa 1") {
    ChoiceSet cs = make_cs({{0, 1}, {2}});
    CHECK(cs.candidates[0].kappa == doctest::Approx(1.0));
    CHECK(cs.candidates[1].kappa == doctest::Approx(1.0));
  }
  SUBCASE("overlap never increases kappa") {
    ChoiceSet partial = make_cs({{0, 1, 2}, {1, 2}});
    ChoiceSet disjoint = make_cs({{0, 1, 2}, {0, 1, 2}});
    CHECK(partial.candidates[0].kappa <= 1.0 + 1e-12);
    CHECK(disjoint.candidates[0].kappa <=
          partial.candidates[0].kappa + 1e-12);
  }
}

TEST_CASE("path size logit probabilities") {
  RoadNetwork ch = chain3();
  auto make_cs = [&](std::vector<std::vector<int32_t>> paths) {
    ChoiceSet cs;
    for (auto& p : paths) {
      PathCandidate c;
      c.links = std::move(p);
      cs.candidates.push_back(std::move(c));
    }
    compute_path_sizes(ch, cs);
    return cs;
  };
  SUBCASE("equal utilities and kappas give the uniform distribution") {
    ChoiceSet cs = make_cs({{0, 1}, {2}});
    cs.candidates[0].kappa = cs.candidates[1].kappa = 1.0;
    PslModel m;
    m.beta_ps = 1.0;
    const auto p = psl_probs(m, cs);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));
  }
  SUBCASE("beta_ps = 0 is a plain multinomial logit over utilities") {
    ChoiceSet cs = make_cs({{0, 1}, {2}});
    cs.candidates[0].features[0] = 1.0;
    cs.candidates[1].features[0] = 0.0;
    cs.candidates[0].kappa = 0.5;  // would matter if beta were positive
    PslModel m;
    m.w[0] = 1.0;
    m.beta_ps = 0.0;
    const auto p = psl_probs(m, cs);
    CHECK(p[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)));
  }
  SUBCASE("two identical candidates vs one distinct: distinct wins a third") {
    ChoiceSet cs = make_cs({{0, 1}, {0, 1}, {2}});
    PslModel m;
    m.beta_ps = 1.0;  // utilities all zero
    const auto p = psl_probs(m, cs);
    // kappas are (0.5, 0.5, 1): P = (0.25, 0.25, 0.5)
    CHECK(p[2] == doctest::Approx(0.5));
    CHECK(p[2] > 1.0 / 3.0);
  }
}

TEST_CASE("trajectory matching") {
  RoadNetwork net = square_network();
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  ChoiceSet cs = ksp_choice_set(cache, net.index_of(0), net.index_of(5), 3);
  REQUIRE(cs.candidates.size() >= 2);
  SUBCASE("an exact copy of a candidate matches that candidate") {
    for (size_t j = 0; j < cs.candidates.size(); ++j) {
      Trajectory tr;
      tr.links = cs.candidates[j].links;
      // ties go to the shortest then lowest index; an exact copy shares
      // full length with its own candidate so it wins outright unless a
      // shorter candidate contains the same links
      const size_t m = match_trajectory(net, tr, cs);
      double share_own = 1.0;
      double share_best = 0.0;
      std::set<int32_t> mine(tr.links.begin(), tr.links.end());
      std::set<int32_t> best(cs.candidates[m].links.begin(),
                             cs.candidates[m].links.end());
      double len = 0.0, shared = 0.0;
      for (int32_t l : tr.links) {
        len += net.link(l).length_m;
        if (best.count(l)) shared += net.link(l).length_m;
      }
      share_best = shared / len;
      CHECK(share_best == doctest::Approx(share_own));
    }
  }
  SUBCASE("higher shared length wins") {
    Trajectory tr;
    tr.links = cs.candidates[1].links;
    CHECK(match_trajectory(net, tr, cs) == 1);
  }
  SUBCASE("exact ties prefer the shortest candidate then the lowest index") {
    ChoiceSet tie;
    PathCandidate a, b;
    a.links = {0, 2};
    a.cost_m = 100.0;
    b.links = {1, 3};
    b.cost_m = 100.0;
    tie.candidates = {a, b};
    Trajectory tr;
    tr.links = {4, 5};  // shares nothing with either candidate
    CHECK(match_trajectory(net, tr, tie) == 0);
  }
  SUBCASE("an empty choice set is an error") {
    ChoiceSet empty;
    Trajectory tr;
    tr.links = {0};
    CHECK_THROWS_AS(match_trajectory(net, tr, empty), ContractError);
  }
}

TEST_CASE("psl estimation") {
  RoadNetwork net = synth_grid_network(5, 5, 1000.0, 51);
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  LinearReward beta;
  beta.length = -3.0;
  const OdSampler sampler = make_od_sampler(cache, 4);
  TrajectoryDataset demos =
      synth_demonstrations(cache, beta, 120, sampler, 1.0, 13).dataset;

  SUBCASE("fitted cross-entropy beats the uniform predictor") {
    PslFitResult fit = psl_fit(demos, cache, false, 3, 5, 400);
    double uniform_ce = 0.0, total = 0.0;
    for (const auto& [od, trips] : demos.od_index()) {
      auto it = fit.choice_sets.find(od);
      REQUIRE(it != fit.choice_sets.end());
      uniform_ce += static_cast<double>(trips.size()) *
                    std::log(static_cast<double>(it->second.candidates.size()));
      total += static_cast<double>(trips.size());
    }
    uniform_ce /= total;
    CHECK(fit.cross_entropy <= uniform_ce + 1e-9);
    CHECK(fit.model.beta_ps >= 0.0);
  }
  SUBCASE("degenerate targets concentrate the fitted distribution") {
    // synthetic dataset where every trip follows the single best path
    LinearReward sharp;
    sharp.length = -50.0;
    TrajectoryDataset hard =
        synth_demonstrations(cache, sharp, 60, sampler, 1.0, 29).dataset;
    PslFitResult fit = psl_fit(hard, cache, false, 3, 5, 800);
    size_t modal_hits = 0, groups = 0;
    for (const auto& [od, trips] : hard.od_index()) {
      auto it = fit.choice_sets.find(od);
      if (it == fit.choice_sets.end()) continue;
      // empirical modal candidate
      std::vector<int> counts(it->second.candidates.size(), 0);
      for (size_t ti : trips)
        counts[match_trajectory(net, hard.trajectories[ti], it->second)] += 1;
      const size_t target = static_cast<size_t>(
          std::max_element(counts.begin(), counts.end()) - counts.begin());
      const auto p = psl_probs(fit.model, it->second);
      const size_t argmax = static_cast<size_t>(
          std::max_element(p.begin(), p.end()) - p.begin());
      modal_hits += argmax == target;
      ++groups;
    }
    REQUIRE(groups > 0);
    CHECK(modal_hits * 10 >= groups * 7);  // modal mass mostly recovered
  }
  SUBCASE("dnn utility also beats the uniform predictor") {
    PslFitResult fit = psl_fit(demos, cache, true, 3, 5, 400);
    double uniform_ce = 0.0, total = 0.0;
    for (const auto& [od, trips] : demos.od_index()) {
      auto it = fit.choice_sets.find(od);
      REQUIRE(it != fit.choice_sets.end());
      uniform_ce += static_cast<double>(trips.size()) *
                    std::log(static_cast<double>(it->second.candidates.size()));
      total += static_cast<double>(trips.size());
    }
    uniform_ce /= total;
    CHECK(fit.cross_entropy <= uniform_ce + 1e-9);
  }
}
