#include "rcm/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <queue>
#include <set>

#include "rcm/models.hpp"
#include "rcm/tape.hpp"

namespace rcm {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

std::array<double, RlParams::kDim> RlParams::flat() const {
  return {length, level[0], level[1], level[2], level[3], level[4], level[5],
          left, right, uturn};
}

RlParams RlParams::from_flat(const std::array<double, kDim>& x) {
  RlParams p;
  p.length = x[0];
  for (int i = 0; i < kNumLevels; ++i) p.level[i] = x[1 + i];
  p.left = x[7];
  p.right = x[8];
  p.uturn = x[9];
  return p;
}

const char* RlParams::feature_name(int i) {
  static const char* names[kDim] = {
      "length",           "level_primary",     "level_secondary",
      "level_tertiary",   "level_living_street", "level_residential",
      "level_unclassified", "left",            "right",
      "uturn"};
  return names[i];
}

double rl_utility(const FeatureCache& cache, const RlParams& params, size_t s,
                  size_t next) {
  const RoadNetwork& net = cache.net();
  const int dir = cache.action_table().direction_of(s, next);
  if (dir < 0)
    throw ContractError("rl_utility: " + std::to_string(next) +
                        " is not a successor of " + std::to_string(s));
  double v = params.length * net.link(next).length_m / cache.config().scale_m;
  v += params.level[static_cast<int>(net.link(next).level)];
  switch (turn_kind(dir)) {
    case TurnKind::left: v += params.left; break;
    case TurnKind::right: v += params.right; break;
    case TurnKind::uturn: v += params.uturn; break;
    case TurnKind::straight: break;
  }
  return v;
}

namespace {

// links that can reach the destination, destination included
std::vector<int32_t> reachable_set(const FeatureCache& cache,
                                   size_t dest_idx) {
  const DestinationTable& t = cache.dest_table(dest_idx);
  std::vector<int32_t> r;
  for (size_t s = 0; s < cache.net().num_links(); ++s)
    if (s == dest_idx || t.reachable(s)) r.push_back(static_cast<int32_t>(s));
  return r;
}

// dense LU solve with partial pivoting; A is overwritten
bool lu_solve(std::vector<double>& A, std::vector<double>& b, size_t n) {
  std::vector<size_t> piv(n);
  for (size_t i = 0; i < n; ++i) piv[i] = i;
  for (size_t col = 0; col < n; ++col) {
    size_t best = col;
    double best_abs = std::fabs(A[piv[col] * n + col]);
    for (size_t r = col + 1; r < n; ++r) {
      const double a = std::fabs(A[piv[r] * n + col]);
      if (a > best_abs) {
        best = r;
        best_abs = a;
      }
    }
    if (best_abs < 1e-300) return false;
    std::swap(piv[col], piv[best]);
    const double diag = A[piv[col] * n + col];
    for (size_t r = col + 1; r < n; ++r) {
      const double f = A[piv[r] * n + col] / diag;
      if (f == 0.0) continue;
      A[piv[r] * n + col] = 0.0;
      for (size_t c = col + 1; c < n; ++c)
        A[piv[r] * n + c] -= f * A[piv[col] * n + c];
      b[piv[r]] -= f * b[piv[col]];
    }
  }
  std::vector<double> x(n);
  for (size_t i = n; i-- > 0;) {
    double acc = b[piv[i]];
    for (size_t c = i + 1; c < n; ++c) acc -= A[piv[i] * n + c] * x[c];
    x[i] = acc / A[piv[i] * n + i];
  }
  b = std::move(x);
  return true;
}

}  // namespace

RlValues rl_values_by_iteration(const FeatureCache& cache,
                                const RlParams& params, size_t dest_idx,
                                double tol, int max_iter) {
  const RoadNetwork& net = cache.net();
  const size_t n = net.num_links();
  const DestinationTable& table = cache.dest_table(dest_idx);
  RlValues out;
  out.v.assign(n, -kInf);
  for (size_t s = 0; s < n; ++s)
    if (s == dest_idx || table.reachable(s)) out.v[s] = 0.0;
  int it = 0;
  for (; it < max_iter; ++it) {
    double max_delta = 0.0;
    for (size_t s = 0; s < n; ++s) {
      if (s == dest_idx || out.v[s] == -kInf) continue;
      double hi = -kInf;
      for (int32_t sp : net.successors(s)) {
        if (out.v[sp] == -kInf) continue;
        hi = std::max(hi, rl_utility(cache, params, s, sp) + out.v[sp]);
      }
      double acc = 0.0;
      for (int32_t sp : net.successors(s)) {
        if (out.v[sp] == -kInf) continue;
        acc += std::exp(rl_utility(cache, params, s, sp) + out.v[sp] - hi);
      }
      const double v_new = hi + std::log(acc);
      if (!std::isfinite(v_new))
        throw NumericsError("recursive logit value iteration diverged");
      max_delta = std::max(max_delta, std::fabs(v_new - out.v[s]));
      out.v[s] = v_new;
    }
    if (max_delta < tol) break;
  }
  if (it == max_iter)
    throw NumericsError(
        "recursive logit value iteration did not converge (utilities not "
        "negative enough)");
  out.used_fallback = true;
  return out;
}

RlValues rl_solve_values(const FeatureCache& cache, const RlParams& params,
                         size_t dest_idx) {
  const RoadNetwork& net = cache.net();
  const std::vector<int32_t> r = reachable_set(cache, dest_idx);
  std::vector<int32_t> pos(net.num_links(), -1);
  for (size_t i = 0; i < r.size(); ++i) pos[r[i]] = static_cast<int32_t>(i);
  const size_t n = r.size();
  std::vector<double> A(n * n, 0.0), b(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    A[i * n + i] = 1.0;
    const size_t s = static_cast<size_t>(r[i]);
    if (s == dest_idx) {
      b[i] = 1.0;  // z_dest = 1, V(dest) = 0
      continue;
    }
    for (int32_t sp : net.successors(s)) {
      if (pos[sp] < 0) continue;
      A[i * n + static_cast<size_t>(pos[sp])] -=
          std::exp(rl_utility(cache, params, s, sp));
    }
  }
  const bool solved = lu_solve(A, b, n);
  bool ok = solved;
  if (ok)
    for (size_t i = 0; i < n; ++i)
      if (!std::isfinite(b[i]) || b[i] <= 0.0) {
        ok = false;
        break;
      }
  if (!ok) return rl_values_by_iteration(cache, params, dest_idx);
  RlValues out;
  out.v.assign(net.num_links(), -kInf);
  for (size_t i = 0; i < n; ++i)
    out.v[static_cast<size_t>(r[i])] = std::log(b[i]);
  return out;
}

double rl_next_log_prob(const FeatureCache& cache, const RlParams& params,
                        const RlValues& values, size_t s, size_t next) {
  const RoadNetwork& net = cache.net();
  double hi = -kInf;
  bool found = false;
  for (int32_t sp : net.successors(s)) {
    if (values.v[sp] == -kInf) continue;
    hi = std::max(hi, rl_utility(cache, params, s, sp) + values.v[sp]);
    if (static_cast<size_t>(sp) == next) found = true;
  }
  if (!found)
    throw ContractError("rl_next_log_prob: invalid successor " +
                        std::to_string(next));
  double acc = 0.0;
  for (int32_t sp : net.successors(s)) {
    if (values.v[sp] == -kInf) continue;
    acc += std::exp(rl_utility(cache, params, s, sp) + values.v[sp] - hi);
  }
  return rl_utility(cache, params, s, next) + values.v[next] - hi -
         std::log(acc);
}

double rl_next_prob(const FeatureCache& cache, const RlParams& params,
                    const RlValues& values, size_t s, size_t next) {
  return std::exp(rl_next_log_prob(cache, params, values, s, next));
}

namespace {

struct TransitionCounts {
  // per destination: (s, s', count)
  std::map<int32_t, std::vector<std::array<int32_t, 3>>> by_dest;
};

TransitionCounts count_transitions(const TrajectoryDataset& data) {
  std::map<std::pair<int64_t, int64_t>, int32_t> seen;  // (dest<<32|s, s')
  TransitionCounts tc;
  std::map<std::tuple<int32_t, int32_t, int32_t>, int32_t> counts;
  for (const auto& tr : data.trajectories)
    for (size_t i = 0; i + 1 < tr.links.size(); ++i)
      counts[{tr.ctx.dest_idx, tr.links[i], tr.links[i + 1]}] += 1;
  for (const auto& [key, n] : counts) {
    const auto& [dest, s, sp] = key;
    tc.by_dest[dest].push_back({s, sp, n});
  }
  return tc;
}

double rl_log_likelihood(const FeatureCache& cache, const RlParams& params,
                         const TransitionCounts& tc) {
  double ll = 0.0;
  for (const auto& [dest, trans] : tc.by_dest) {
    RlValues values;
    try {
      values = rl_solve_values(cache, params, static_cast<size_t>(dest));
    } catch (const NumericsError&) {
      return -kInf;  // parameters outside the contraction region
    }
    for (const auto& [s, sp, n] : trans)
      ll += n * rl_next_log_prob(cache, params, values,
                                 static_cast<size_t>(s),
                                 static_cast<size_t>(sp));
  }
  return ll;
}

}  // namespace

RlFitResult rl_fit(const TrajectoryDataset& data, const FeatureCache& cache,
                   int max_iterations) {
  const TransitionCounts tc = count_transitions(data);
  RlFitResult res;
  std::array<double, RlParams::kDim> x{};
  res.null_log_likelihood =
      rl_log_likelihood(cache, RlParams::from_flat(x), tc);
  double ll = res.null_log_likelihood;
  // zero utilities lie outside the contraction region on cyclic networks
  // (the path sum diverges); walk the length coefficient down until the
  // value system is solvable
  for (double c = -1.0; ll == -kInf && c >= -64.0; c *= 2.0) {
    x[0] = c;
    ll = rl_log_likelihood(cache, RlParams::from_flat(x), tc);
  }
  if (ll == -kInf)
    throw NumericsError("recursive logit: no feasible starting point");
  double step = 0.1;
  const double h = 1e-5;
  int it = 0;
  for (; it < max_iterations; ++it) {
    std::array<double, RlParams::kDim> grad{};
    for (int j = 0; j < RlParams::kDim; ++j) {
      auto xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      grad[j] = (rl_log_likelihood(cache, RlParams::from_flat(xp), tc) -
                 rl_log_likelihood(cache, RlParams::from_flat(xm), tc)) /
                (2.0 * h);
    }
    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    if (gnorm < 1e-10) break;
    bool improved = false;
    for (int bt = 0; bt < 30; ++bt) {
      auto xn = x;
      for (int j = 0; j < RlParams::kDim; ++j)
        xn[j] += step * grad[j] / gnorm;
      const double lln = rl_log_likelihood(cache, RlParams::from_flat(xn), tc);
      if (lln > ll) {
        x = xn;
        ll = lln;
        step *= 1.5;
        improved = true;
        break;
      }
      step *= 0.5;  // divergence: back off
    }
    if (!improved || step < 1e-12) break;
  }
  res.params = RlParams::from_flat(x);
  res.log_likelihood = ll;
  res.iterations = it;
  return res;
}

void save_rl_params_csv(const std::string& path, const RlParams& params) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  os << "feature,coefficient\n";
  const auto x = params.flat();
  for (int i = 0; i < RlParams::kDim; ++i)
    os << RlParams::feature_name(i) << ',' << format_double(x[i]) << '\n';
}

RlParams load_rl_params_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot read " + path);
  std::array<double, RlParams::kDim> x{};
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t == "feature,coefficient") continue;
    auto f = split(t, ',');
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 2) throw ParseError(where + ": expected feature,coefficient");
    bool known = false;
    for (int i = 0; i < RlParams::kDim; ++i)
      if (f[0] == RlParams::feature_name(i)) {
        x[i] = parse_double(f[1], where);
        known = true;
      }
    if (!known) throw ParseError(where + ": unknown feature " + f[0]);
  }
  return RlParams::from_flat(x);
}

// ---- Yen's k shortest loopless paths over the link graph ----

namespace {

struct DijkstraResult {
  bool found = false;
  std::vector<int32_t> path;
  double cost = 0.0;
};

// shortest path from `origin` to `dest` over the link graph, edge weight =
// successor length; `banned` links are skipped, `banned_first` forbids
// specific first transitions out of the origin
DijkstraResult link_dijkstra(const RoadNetwork& net, int32_t origin,
                             int32_t dest, const std::vector<uint8_t>& banned,
                             const std::set<int32_t>& banned_first) {
  const size_t n = net.num_links();
  std::vector<double> dist(n, kInf);
  std::vector<int32_t> prev(n, -1);
  std::priority_queue<std::pair<double, int32_t>,
                      std::vector<std::pair<double, int32_t>>, std::greater<>>
      q;
  dist[origin] = 0.0;
  q.emplace(0.0, origin);
  while (!q.empty()) {
    auto [d, u] = q.top();
    q.pop();
    if (d > dist[u] + 1e-12) continue;
    if (u == dest) break;
    for (int32_t sp : net.successors(static_cast<size_t>(u))) {
      if (banned[sp]) continue;
      if (u == origin && banned_first.count(sp)) continue;
      const double nd = d + net.link(static_cast<size_t>(sp)).length_m;
      if (nd < dist[sp] - 1e-12) {
        dist[sp] = nd;
        prev[sp] = u;
        q.emplace(nd, sp);
      }
    }
  }
  DijkstraResult r;
  if (dist[dest] == kInf) return r;
  r.found = true;
  r.cost = dist[dest];
  for (int32_t cur = dest; cur != -1; cur = prev[cur]) r.path.push_back(cur);
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

double path_cost(const RoadNetwork& net, const std::vector<int32_t>& path) {
  double c = 0.0;
  for (size_t i = 1; i < path.size(); ++i)
    c += net.link(static_cast<size_t>(path[i])).length_m;
  return c;
}

std::array<double, kContextFeatureDim> path_features(
    const FeatureCache& cache, const std::vector<int32_t>& path) {
  const RoadNetwork& net = cache.net();
  const ActionTable& at = cache.action_table();
  std::array<double, kContextFeatureDim> f{};
  int left = 0, right = 0, uturn = 0;
  std::array<int, kNumLevels> levels{};
  double dist = 0.0;
  for (size_t i = 1; i < path.size(); ++i) {
    dist += net.link(static_cast<size_t>(path[i])).length_m;
    levels[static_cast<int>(net.link(static_cast<size_t>(path[i])).level)] += 1;
    const int dir = at.direction_of(static_cast<size_t>(path[i - 1]),
                                    static_cast<size_t>(path[i]));
    if (dir < 0) throw ContractError("path transition missing from table");
    switch (turn_kind(dir)) {
      case TurnKind::left: ++left; break;
      case TurnKind::right: ++right; break;
      case TurnKind::uturn: ++uturn; break;
      case TurnKind::straight: break;
    }
  }
  f[0] = dist / cache.config().scale_m;
  f[1] = static_cast<double>(path.size() - 1);
  f[2] = left;
  f[3] = right;
  f[4] = uturn;
  f[5] = left + right + uturn;
  for (int k = 0; k < kNumLevels; ++k) f[6 + k] = levels[k];
  return f;
}

}  // namespace

ChoiceSet ksp_choice_set(const FeatureCache& cache, int32_t origin,
                         int32_t dest, int k) {
  const RoadNetwork& net = cache.net();
  ChoiceSet cs;
  cs.origin = origin;
  cs.dest = dest;
  std::vector<uint8_t> banned(net.num_links(), 0);
  DijkstraResult first = link_dijkstra(net, origin, dest, banned, {});
  if (!first.found)
    throw UnreachableError("no path between the OD links " +
                           std::to_string(net.link(origin).id) + " -> " +
                           std::to_string(net.link(dest).id));
  std::vector<std::vector<int32_t>> accepted{first.path};
  // candidate pool ordered by (cost, path) so ties resolve deterministically
  std::set<std::pair<double, std::vector<int32_t>>> pool;
  while (accepted.size() < static_cast<size_t>(k)) {
    const std::vector<int32_t>& prev_path = accepted.back();
    for (size_t i = 0; i + 1 < prev_path.size(); ++i) {
      const int32_t spur = prev_path[i];
      std::fill(banned.begin(), banned.end(), 0);
      for (size_t j = 0; j < i; ++j) banned[prev_path[j]] = 1;
      std::set<int32_t> banned_first;
      for (const auto& p : accepted) {
        if (p.size() <= i + 1) continue;
        bool same_root = true;
        for (size_t j = 0; j <= i; ++j)
          if (p[j] != prev_path[j]) {
            same_root = false;
            break;
          }
        if (same_root) banned_first.insert(p[i + 1]);
      }
      DijkstraResult spur_res =
          link_dijkstra(net, spur, dest, banned, banned_first);
      if (!spur_res.found) continue;
      std::vector<int32_t> total(prev_path.begin(), prev_path.begin() + i);
      total.insert(total.end(), spur_res.path.begin(), spur_res.path.end());
      pool.emplace(path_cost(net, total), std::move(total));
    }
    bool added = false;
    while (!pool.empty()) {
      auto it = pool.begin();
      std::vector<int32_t> cand = it->second;
      pool.erase(it);
      if (std::find(accepted.begin(), accepted.end(), cand) ==
          accepted.end()) {
        accepted.push_back(std::move(cand));
        added = true;
        break;
      }
    }
    if (!added) break;
  }
  for (auto& p : accepted) {
    PathCandidate c;
    c.cost_m = path_cost(net, p);
    c.features = path_features(cache, p);
    c.links = std::move(p);
    cs.candidates.push_back(std::move(c));
  }
  std::stable_sort(cs.candidates.begin(), cs.candidates.end(),
                   [](const PathCandidate& a, const PathCandidate& b) {
                     return a.cost_m < b.cost_m - 1e-12;
                   });
  compute_path_sizes(net, cs);
  return cs;
}

void compute_path_sizes(const RoadNetwork& net, ChoiceSet& cs) {
  std::map<int32_t, int32_t> containing;  // link -> number of candidates
  for (const auto& c : cs.candidates) {
    std::set<int32_t> uniq(c.links.begin(), c.links.end());
    for (int32_t l : uniq) containing[l] += 1;
  }
  for (auto& c : cs.candidates) {
    double total_len = 0.0;
    for (int32_t l : c.links) total_len += net.link(static_cast<size_t>(l)).length_m;
    double kappa = 0.0;
    for (int32_t l : c.links)
      kappa += net.link(static_cast<size_t>(l)).length_m / total_len /
               static_cast<double>(containing[l]);
    c.kappa = kappa;
  }
}

std::vector<double> psl_utilities(const PslModel& model, const ChoiceSet& cs) {
  const size_t J = cs.candidates.size();
  std::vector<double> u(J, 0.0);
  if (!model.dnn) {
    for (size_t j = 0; j < J; ++j)
      for (int i = 0; i < kContextFeatureDim; ++i)
        u[j] += model.w[i] * cs.candidates[j].features[i];
    return u;
  }
  Tape tape;
  ParamIds ids;
  for (const auto& e : model.net.entries()) ids[e.name] = tape.input(e.value);
  Tensor x = Tensor::zeros({J, kContextFeatureDim});
  for (size_t j = 0; j < J; ++j)
    std::copy(cs.candidates[j].features.begin(),
              cs.candidates[j].features.end(),
              x.data.begin() + j * kContextFeatureDim);
  Tape::NodeId in = tape.input(std::move(x));
  Tape::NodeId a =
      tape.relu(tape.add_row(tape.matmul(in, ids.at("fc1.w")), ids.at("fc1.b")));
  Tape::NodeId out =
      tape.add_row(tape.matmul(a, ids.at("fc2.w")), ids.at("fc2.b"));
  return tape.val(out).data;
}

std::vector<double> psl_probs(const PslModel& model, const ChoiceSet& cs) {
  std::vector<double> logits = psl_utilities(model, cs);
  for (size_t j = 0; j < logits.size(); ++j)
    logits[j] += model.beta_ps * std::log(cs.candidates[j].kappa);
  const double hi = *std::max_element(logits.begin(), logits.end());
  double acc = 0.0;
  for (double& v : logits) {
    v = std::exp(v - hi);
    acc += v;
  }
  for (double& v : logits) v /= acc;
  return logits;
}

size_t match_trajectory(const RoadNetwork& net, const Trajectory& traj,
                        const ChoiceSet& cs) {
  if (cs.candidates.empty()) throw ContractError("empty choice set");
  std::set<int32_t> traj_links(traj.links.begin(), traj.links.end());
  double traj_len = 0.0;
  for (int32_t l : traj.links) traj_len += net.link(static_cast<size_t>(l)).length_m;
  size_t best = 0;
  double best_frac = -1.0;
  for (size_t j = 0; j < cs.candidates.size(); ++j) {
    double shared = 0.0;
    std::set<int32_t> cand_links(cs.candidates[j].links.begin(),
                                 cs.candidates[j].links.end());
    for (int32_t l : traj_links)
      if (cand_links.count(l)) shared += net.link(static_cast<size_t>(l)).length_m;
    const double frac = shared / traj_len;
    bool better = frac > best_frac + 1e-12;
    if (!better && frac > best_frac - 1e-12) {
      // tie: shortest candidate, then lowest index
      if (cs.candidates[j].cost_m < cs.candidates[best].cost_m - 1e-12)
        better = true;
    }
    if (better) {
      best = j;
      best_frac = frac;
    }
  }
  return best;
}

PslFitResult psl_fit(const TrajectoryDataset& data, const FeatureCache& cache,
                     bool dnn_utility, uint64_t seed, int k, int iterations,
                     double lr) {
  PslFitResult res;
  res.model.dnn = dnn_utility;

  struct OdTarget {
    ChoiceSet* cs;
    std::vector<double> target;  // empirical match frequencies
    double weight;               // trip share
  };
  std::vector<OdTarget> ods;
  double total_trips = 0.0;
  for (const auto& [od, trips] : data.od_index()) {
    ChoiceSet cs;
    try {
      cs = ksp_choice_set(cache, od.first, od.second, k);
    } catch (const UnreachableError&) {
      ++res.skipped_ods;
      continue;
    }
    auto [it, fresh] = res.choice_sets.emplace(od, std::move(cs));
    OdTarget t;
    t.cs = &it->second;
    t.target.assign(it->second.candidates.size(), 0.0);
    for (size_t ti : trips) {
      const size_t m =
          match_trajectory(cache.net(), data.trajectories[ti], it->second);
      t.target[m] += 1.0;
    }
    double n = 0.0;
    for (double v : t.target) n += v;
    for (double& v : t.target) v /= n;
    t.weight = n;
    total_trips += n;
    ods.push_back(std::move(t));
  }
  if (ods.empty()) throw ContractError("psl_fit: no usable OD groups");
  for (auto& t : ods) t.weight /= total_trips;

  // parameters behind the tape: linear weights or the dense net, plus the
  // path-size coefficient (projected >= 0 after each step)
  ParamSet params;
  if (dnn_utility) {
    std::mt19937_64 rng(derive_seed(seed, "psl-dnn"));
    params.add("fc1.w", {kContextFeatureDim, 64}, kContextFeatureDim, rng);
    params.add("fc1.b", {64}, kContextFeatureDim, rng);
    params.add("fc2.w", {64, 1}, 64, rng);
    params.add("fc2.b", {1}, 64, rng);
  } else {
    params.add_zeros("w", {kContextFeatureDim, 1});
  }
  params.add_zeros("beta_ps", {1, 1});
  const AdamConfig adam{lr, 0.9, 0.999, 1e-8};

  double last_ce = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Tape tape;
    ParamIds ids = params.lease(tape);
    Tape::NodeId total_loss = tape.input(Tensor::scalar(0.0));
    for (const auto& od : ods) {
      const size_t J = od.cs->candidates.size();
      Tensor x = Tensor::zeros({J, kContextFeatureDim});
      std::vector<double> lnk(J);
      for (size_t j = 0; j < J; ++j) {
        std::copy(od.cs->candidates[j].features.begin(),
                  od.cs->candidates[j].features.end(),
                  x.data.begin() + j * kContextFeatureDim);
        lnk[j] = std::log(od.cs->candidates[j].kappa);
      }
      Tape::NodeId in = tape.input(std::move(x));
      Tape::NodeId u;
      if (dnn_utility) {
        Tape::NodeId a = tape.relu(
            tape.add_row(tape.matmul(in, ids.at("fc1.w")), ids.at("fc1.b")));
        u = tape.add_row(tape.matmul(a, ids.at("fc2.w")), ids.at("fc2.b"));
      } else {
        u = tape.matmul(in, ids.at("w"));
      }
      u = tape.reshape(u, {static_cast<size_t>(1), J});
      // beta_ps * ln(kappa) enters via a broadcast of the scalar parameter
      Tape::NodeId ones = tape.input(Tensor({J, 1}, std::vector<double>(J, 1.0)));
      Tape::NodeId beta_col = tape.matmul(ones, ids.at("beta_ps"));
      Tape::NodeId beta_term = tape.mul_constvec(
          tape.reshape(beta_col, {static_cast<size_t>(1), J}), lnk);
      Tape::NodeId logits = tape.add(u, beta_term);
      Tape::NodeId logp =
          tape.masked_log_softmax(logits, std::vector<uint8_t>(J, 1));
      Tape::NodeId ce = tape.scale(
          tape.sum_all(tape.mul_constvec(logp, od.target)), -1.0);
      total_loss = tape.add(total_loss, tape.scale(ce, od.weight));
    }
    last_ce = tape.val(total_loss).data[0];
    tape.backward(total_loss);
    params.adam_step(tape, ids, adam);
    auto& beta = params.entry("beta_ps").value.data[0];
    if (beta < 0.0) beta = 0.0;  // beta_ps >= 0
  }

  if (dnn_utility) {
    res.model.net = params;  // carries fc1/fc2 (beta read separately)
  } else {
    for (int i = 0; i < kContextFeatureDim; ++i)
      res.model.w[i] = params.entry("w").value.data[i];
  }
  res.model.beta_ps = params.entry("beta_ps").value.data[0];
  res.cross_entropy = last_ce;
  return res;
}

void write_choice_sets_csv(
    const std::string& path, const RoadNetwork& net,
    const std::map<std::pair<int32_t, int32_t>, ChoiceSet>& sets) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  os << "trip_id,agent_id,link_seq,kappa\n";
  int64_t row = 0;
  for (const auto& [od, cs] : sets) {
    (void)od;
    for (const auto& cand : cs.candidates) {
      os << row++ << ",,";
      for (size_t i = 0; i < cand.links.size(); ++i) {
        if (i) os << ';';
        os << net.link(static_cast<size_t>(cand.links[i])).id;
      }
      os << ',' << format_double(cand.kappa) << '\n';
    }
  }
}

void save_psl_model(const std::string& coef_path, const PslModel& model) {
  std::ofstream os(coef_path);
  if (!os) throw LoadError("cannot write " + coef_path);
  os << "feature,coefficient\n";
  static const char* names[kContextFeatureDim] = {
      "dist",  "n_links", "left",  "right", "uturn", "turns",
      "level_primary", "level_secondary", "level_tertiary",
      "level_living_street", "level_residential", "level_unclassified"};
  if (!model.dnn)
    for (int i = 0; i < kContextFeatureDim; ++i)
      os << names[i] << ',' << format_double(model.w[i]) << '\n';
  os << "beta_ps," << format_double(model.beta_ps) << '\n';
}

}  // namespace rcm
