#include "rcm/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace rcm {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

void TrajectoryDataset::finalize() {
  triplets_.clear();
  od_index_.clear();
  for (size_t ti = 0; ti < trajectories.size(); ++ti) {
    const Trajectory& tr = trajectories[ti];
    if (tr.links.size() < 2 || tr.actions.size() != tr.links.size() - 1)
      throw ContractError("trajectory " + std::to_string(ti) +
                          " has inconsistent link/action lengths");
    for (size_t t = 0; t + 1 < tr.links.size(); ++t)
      triplets_.push_back(Triplet{tr.links[t], tr.actions[t], tr.ctx.dest_idx,
                                  tr.ctx.agent, static_cast<int32_t>(ti)});
    od_index_[{tr.links.front(), tr.ctx.dest_idx}].push_back(ti);
  }
}

int32_t step(const ActionTable& at, int32_t state, int action) {
  if (action < 0 || action >= kNumDirections)
    throw ContractError("action " + std::to_string(action) + " out of range");
  const int32_t next = at.next(static_cast<size_t>(state), action);
  if (next < 0)
    throw ContractError("action " + std::string(direction_name(action)) +
                        " invalid at link index " + std::to_string(state));
  return next;
}

std::string IngestReport::to_text() const {
  std::ostringstream os;
  os << "parsed " << parsed << "\n"
     << "kept " << kept << "\n"
     << "dropped_short " << dropped_short << "\n"
     << "dropped_cyclic " << dropped_cyclic << "\n"
     << "dropped_nonadjacent " << dropped_nonadjacent << "\n"
     << "parse_errors " << parse_errors.size() << "\n";
  for (const auto& e : parse_errors) os << e << "\n";
  return os.str();
}

IngestResult ingest_trajectories(const std::string& path,
                                 const RoadNetwork& net,
                                 const ActionTable& at, size_t min_links,
                                 bool drop_cyclic) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot read trajectory file " + path);
  IngestResult res;
  std::map<int64_t, int32_t> agent_index;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty()) continue;
    if (lineno == 1 && t.rfind("trip_id", 0) == 0) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    auto f = split(t, ',');
    if (f.size() != 3) {
      res.report.parse_errors.push_back(where +
                                        ": expected trip_id,agent_id,link_seq");
      continue;
    }
    ++res.report.parsed;
    Trajectory tr;
    std::vector<int32_t> links;
    bool bad = false;
    try {
      tr.trip_id = parse_int(f[0], where);
      if (!trim(f[1]).empty()) {
        const int64_t aid = parse_int(f[1], where);
        auto it = agent_index.find(aid);
        if (it == agent_index.end()) {
          it = agent_index
                   .emplace(aid,
                            static_cast<int32_t>(res.dataset.agent_ids.size()))
                   .first;
          res.dataset.agent_ids.push_back(aid);
        }
        tr.ctx.agent = it->second;
      }
      for (const auto& tok : split(f[2], ';')) {
        const int64_t lid = parse_int(tok, where);
        if (!net.has_link(lid))
          throw ParseError(where + ": unknown link id " + std::to_string(lid));
        links.push_back(static_cast<int32_t>(net.index_of(lid)));
      }
    } catch (const ParseError& e) {
      res.report.parse_errors.push_back(e.what());
      bad = true;
    }
    if (bad) continue;
    if (links.size() < std::max<size_t>(min_links, 2)) {
      ++res.report.dropped_short;
      continue;
    }
    if (drop_cyclic) {
      std::set<int32_t> uniq(links.begin(), links.end());
      if (uniq.size() != links.size()) {
        ++res.report.dropped_cyclic;
        continue;
      }
    }
    bool adjacent = true;
    std::vector<int8_t> actions;
    for (size_t i = 0; i + 1 < links.size(); ++i) {
      const int dir = at.direction_of(static_cast<size_t>(links[i]),
                                      static_cast<size_t>(links[i + 1]));
      if (dir < 0) {
        adjacent = false;
        break;
      }
      actions.push_back(static_cast<int8_t>(dir));
    }
    if (!adjacent) {
      ++res.report.dropped_nonadjacent;
      continue;
    }
    tr.links = std::move(links);
    tr.actions = std::move(actions);
    tr.ctx.dest_idx = tr.links.back();
    tr.complete = true;
    res.dataset.trajectories.push_back(std::move(tr));
    ++res.report.kept;
  }
  if (res.dataset.trajectories.empty())
    throw LoadError("ingest of " + path +
                    " produced an empty dataset (see report)");
  res.dataset.finalize();
  return res;
}

void write_trajectories_csv(const std::string& path, const RoadNetwork& net,
                            const TrajectoryDataset& ds) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  os << "trip_id,agent_id,link_seq\n";
  for (const auto& tr : ds.trajectories) {
    os << tr.trip_id << ',';
    if (tr.ctx.agent >= 0) os << ds.agent_ids[tr.ctx.agent];
    os << ',';
    for (size_t i = 0; i < tr.links.size(); ++i) {
      if (i) os << ';';
      os << net.link(static_cast<size_t>(tr.links[i])).id;
    }
    os << '\n';
  }
}

int default_max_steps(int shortest_path_links) {
  return std::max(3 * shortest_path_links, 50);
}

Trajectory rollout(const ActionPolicy& policy, const ActionTable& at,
                   int32_t origin, const Context& ctx, int max_steps,
                   std::mt19937_64& rng) {
  if (origin == ctx.dest_idx)
    throw ContractError("rollout origin equals destination");
  Trajectory tr;
  tr.ctx = ctx;
  tr.links.push_back(origin);
  tr.complete = false;
  int32_t cur = origin;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int s = 0; s < max_steps; ++s) {
    const auto probs = policy.action_probs(cur, ctx);
    double total = 0.0;
    for (double p : probs) total += p;
    if (!(total > 0.0))
      throw ContractError("policy returned zero mass on all valid actions");
    double u = uni(rng) * total;
    int chosen = -1;
    for (int dir = 0; dir < kNumDirections; ++dir) {
      if (probs[dir] <= 0.0) continue;
      u -= probs[dir];
      chosen = dir;
      if (u <= 0.0) break;
    }
    const int32_t next = step(at, cur, chosen);
    tr.actions.push_back(static_cast<int8_t>(chosen));
    tr.links.push_back(next);
    cur = next;
    if (cur == ctx.dest_idx) {
      tr.complete = true;
      break;
    }
  }
  return tr;
}

RoadNetwork synth_grid_network(int rows, int cols, double block_m,
                               uint64_t seed, double jitter,
                               bool include_uturns) {
  if (rows < 2 || cols < 2)
    throw ContractError("synth grid needs rows, cols >= 2");
  std::vector<NodeRecord> nodes;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      nodes.push_back(NodeRecord{static_cast<int64_t>(r) * cols + c,
                                 c * block_m, r * block_m});
  auto node_id = [cols](int r, int c) {
    return static_cast<int64_t>(r) * cols + c;
  };
  std::mt19937_64 rng(derive_seed(seed, "synth-grid"));
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<LinkRecord> links;
  auto add_segment = [&](int64_t a, int64_t b, RoadLevel level) {
    const double len = block_m * (1.0 + jitter * uni(rng));
    const int64_t id = static_cast<int64_t>(links.size());
    links.push_back(LinkRecord{id, a, b, len, level});
    links.push_back(LinkRecord{id + 1, b, a, len, level});
  };
  auto row_level = [&](int r, int n) {
    if (r == 0 || r == n - 1) return RoadLevel::primary;
    if (r % 3 == 0) return RoadLevel::secondary;
    return RoadLevel::residential;
  };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c + 1 < cols; ++c)
      add_segment(node_id(r, c), node_id(r, c + 1), row_level(r, rows));
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r + 1 < rows; ++r)
      add_segment(node_id(r, c), node_id(r + 1, c), row_level(c, cols));

  // adjacency excludes the reverse twin unless u-turns are requested;
  // twins sit at paired ids (2k, 2k+1)
  std::map<int64_t, std::vector<size_t>> out_at_node;
  for (size_t i = 0; i < links.size(); ++i)
    out_at_node[links[i].from_node].push_back(i);
  std::vector<std::pair<int64_t, int64_t>> pairs;
  for (size_t i = 0; i < links.size(); ++i) {
    const size_t twin = i ^ 1;
    for (size_t j : out_at_node[links[i].to_node]) {
      if (!include_uturns && j == twin) continue;
      pairs.emplace_back(links[i].id, links[j].id);
    }
  }
  return RoadNetwork::build_with_adjacency(std::move(nodes), std::move(links),
                                           std::move(pairs));
}

double LinearReward::eval(const FeatureCache& cache, size_t /*state*/,
                          int dir, size_t next, size_t dest) const {
  const auto& net = cache.net();
  double r = constant;
  r += length * net.link(next).length_m / cache.config().scale_m;
  r += level[static_cast<int>(net.link(next).level)];
  switch (turn_kind(dir)) {
    case TurnKind::left: r += left; break;
    case TurnKind::right: r += right; break;
    case TurnKind::uturn: r += uturn; break;
    case TurnKind::straight: break;
  }
  if (dist != 0.0) {
    const DestinationTable& t = cache.dest_table(dest);
    r += dist * t.distance_m[next] / cache.config().scale_m;
  }
  return r;
}

std::vector<std::pair<std::string, double>> LinearReward::named() const {
  std::vector<std::pair<std::string, double>> out;
  out.emplace_back("constant", constant);
  out.emplace_back("length", length);
  for (int k = 0; k < kNumLevels; ++k)
    out.emplace_back(std::string("level_") +
                         level_name(static_cast<RoadLevel>(k)),
                     level[k]);
  out.emplace_back("left", left);
  out.emplace_back("right", right);
  out.emplace_back("uturn", uturn);
  out.emplace_back("dist", dist);
  return out;
}

SoftValues soft_value_iteration(const FeatureCache& cache,
                                const LinearReward& reward, size_t dest_idx,
                                double gamma, double tol, int max_iter) {
  const RoadNetwork& net = cache.net();
  const ActionTable& at = cache.action_table();
  const DestinationTable& table = cache.dest_table(dest_idx);
  const size_t n = net.num_links();

  // precompute rewards per (state, valid action)
  std::vector<std::array<double, kNumDirections>> r(n);
  std::vector<std::array<uint8_t, kNumDirections>> mask(n);
  for (size_t s = 0; s < n; ++s) {
    mask[s] = cache.action_mask(s, dest_idx);
    for (int d = 0; d < kNumDirections; ++d)
      if (mask[s][d])
        r[s][d] = reward.eval(cache, s, d,
                              static_cast<size_t>(at.next(s, d)), dest_idx);
  }

  SoftValues sv;
  sv.values.assign(n, -kInf);
  sv.policy.assign(n, {});
  for (size_t s = 0; s < n; ++s)
    if (s == dest_idx || table.reachable(s)) sv.values[s] = 0.0;
  sv.values[dest_idx] = 0.0;

  int it = 0;
  for (; it < max_iter; ++it) {
    double max_delta = 0.0;
    for (size_t s = 0; s < n; ++s) {
      if (s == dest_idx || sv.values[s] == -kInf) continue;
      double hi = -kInf;
      for (int d = 0; d < kNumDirections; ++d)
        if (mask[s][d]) {
          const double q =
              r[s][d] + gamma * sv.values[static_cast<size_t>(at.next(s, d))];
          hi = std::max(hi, q);
        }
      double acc = 0.0;
      for (int d = 0; d < kNumDirections; ++d)
        if (mask[s][d])
          acc += std::exp(r[s][d] +
                          gamma * sv.values[static_cast<size_t>(at.next(s, d))] -
                          hi);
      const double v_new = hi + std::log(acc);
      if (!std::isfinite(v_new))
        throw NumericsError("soft value iteration produced non-finite value");
      max_delta = std::max(max_delta, std::fabs(v_new - sv.values[s]));
      sv.values[s] = v_new;
    }
    if (max_delta < tol) break;
  }
  if (it == max_iter)
    throw NumericsError(
        "soft value iteration did not converge: reward too positive or gamma "
        "too close to 1 for this graph");

  for (size_t s = 0; s < n; ++s) {
    if (s == dest_idx || sv.values[s] == -kInf) continue;
    double total = 0.0;
    for (int d = 0; d < kNumDirections; ++d)
      if (mask[s][d]) {
        const double p = std::exp(
            r[s][d] + gamma * sv.values[static_cast<size_t>(at.next(s, d))] -
            sv.values[s]);
        sv.policy[s][d] = p;
        total += p;
      }
    for (int d = 0; d < kNumDirections; ++d) sv.policy[s][d] /= total;
  }
  return sv;
}

std::pair<int32_t, int32_t> OdSampler::sample(std::mt19937_64& rng) const {
  if (pairs.empty()) throw ContractError("od sampler has no pairs");
  std::uniform_int_distribution<size_t> pick(0, pairs.size() - 1);
  return pairs[pick(rng)];
}

OdSampler make_od_sampler(const FeatureCache& cache, int min_hops,
                          const std::vector<int32_t>& dest_pool) {
  OdSampler s;
  std::vector<int32_t> dests = dest_pool;
  if (dests.empty())
    for (size_t d = 0; d < cache.net().num_links(); ++d)
      dests.push_back(static_cast<int32_t>(d));
  for (int32_t d : dests) {
    const DestinationTable& t = cache.dest_table(static_cast<size_t>(d));
    for (size_t o = 0; o < cache.net().num_links(); ++o)
      if (o != static_cast<size_t>(d) && t.reachable(o) &&
          t.metrics[o].n_links >= min_hops)
        s.pairs.emplace_back(static_cast<int32_t>(o), d);
  }
  if (s.pairs.empty())
    throw ContractError("od sampler found no OD pairs with min_hops " +
                        std::to_string(min_hops));
  return s;
}

OdSampler make_dataset_od_sampler(const TrajectoryDataset& ds) {
  OdSampler s;
  for (const auto& [od, _] : ds.od_index()) s.pairs.push_back(od);
  if (s.pairs.empty()) throw ContractError("dataset has no OD pairs");
  return s;
}

namespace {
class SoftPolicy final : public ActionPolicy {
 public:
  explicit SoftPolicy(const SoftValues& sv) : sv_(&sv) {}
  std::array<double, kNumDirections> action_probs(
      int32_t link, const Context&) const override {
    return sv_->policy[static_cast<size_t>(link)];
  }

 private:
  const SoftValues* sv_;
};
}  // namespace

DemoResult synth_demonstrations(const FeatureCache& cache,
                                const LinearReward& reward, int n_trips,
                                const OdSampler& od_sampler, double gamma,
                                uint64_t seed, int n_agents) {
  DemoResult res;
  res.beta = reward;
  std::map<int32_t, SoftValues> values_by_dest;
  const ActionTable& at = cache.action_table();
  for (int i = 0; i < n_trips; ++i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(i)));
    Trajectory tr;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      auto [o, d] = od_sampler.sample(rng);
      auto it = values_by_dest.find(d);
      if (it == values_by_dest.end())
        it = values_by_dest
                 .emplace(d, soft_value_iteration(cache, reward,
                                                  static_cast<size_t>(d),
                                                  gamma))
                 .first;
      SoftPolicy policy(it->second);
      Context ctx;
      ctx.dest_idx = d;
      if (n_agents > 0) ctx.agent = i % n_agents;
      const int max_steps = default_max_steps(
          cache.dest_table(static_cast<size_t>(d)).metrics[o].n_links);
      tr = rollout(policy, at, o, ctx, max_steps, rng);
      if (!tr.complete) continue;
      std::set<int32_t> uniq(tr.links.begin(), tr.links.end());
      if (uniq.size() != tr.links.size()) continue;  // cyclic: resample
      ok = true;
    }
    if (!ok)
      throw ContractError(
          "od sampler exhausted: no acyclic complete demonstration after 100 "
          "attempts");
    tr.trip_id = i;
    res.dataset.trajectories.push_back(std::move(tr));
  }
  if (n_agents > 0)
    for (int a = 0; a < n_agents; ++a) res.dataset.agent_ids.push_back(a);
  res.dataset.finalize();
  return res;
}

}  // namespace rcm
