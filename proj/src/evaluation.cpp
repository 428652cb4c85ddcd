#include "rcm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "json.hpp"

namespace rcm {

namespace {
double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}
size_t bounded(std::mt19937_64& rng, size_t n) { return rng() % n; }
}  // namespace

size_t levenshtein(const std::vector<int32_t>& a,
                   const std::vector<int32_t>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<size_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = j;
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= m; ++j) {
      const size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double edit_distance_metric(const Trajectory& predicted,
                            const std::vector<const Trajectory*>& references) {
  if (references.empty())
    throw ContractError("edit_distance_metric: empty reference set");
  if (!predicted.complete) return 1.0;
  double best = 1.0;
  for (const Trajectory* ref : references) {
    const double d =
        static_cast<double>(levenshtein(predicted.links, ref->links)) /
        static_cast<double>(ref->links.size());
    best = std::min(best, std::min(d, 1.0));
  }
  return best;
}

namespace {
// n-gram counts keyed by the flattened chunk
std::map<std::vector<int32_t>, int> ngram_counts(
    const std::vector<int32_t>& seq, int n) {
  std::map<std::vector<int32_t>, int> out;
  if (seq.size() < static_cast<size_t>(n)) return out;
  for (size_t i = 0; i + n <= seq.size(); ++i)
    out[std::vector<int32_t>(seq.begin() + i, seq.begin() + i + n)] += 1;
  return out;
}
}  // namespace

double bleu_metric(const std::vector<int32_t>& predicted,
                   const std::vector<const Trajectory*>& references,
                   int n) {
  if (predicted.empty()) throw ContractError("bleu_metric: empty prediction");
  if (references.empty())
    throw ContractError("bleu_metric: empty reference set");
  const size_t T = predicted.size();
  // brevity factor against the closest reference length (shorter on ties)
  size_t t_ref = references[0]->links.size();
  for (const Trajectory* ref : references) {
    const size_t len = ref->links.size();
    const auto diff = [&](size_t l) {
      return l > T ? l - T : T - l;
    };
    if (diff(len) < diff(t_ref) || (diff(len) == diff(t_ref) && len < t_ref))
      t_ref = len;
  }
  const double brevity =
      std::min(1.0, static_cast<double>(T) / static_cast<double>(t_ref));
  const int n_eff = std::min<int>(n, static_cast<int>(T));
  double log_prec_sum = 0.0;
  for (int j = 1; j <= n_eff; ++j) {
    const auto pred_counts = ngram_counts(predicted, j);
    double matched = 0.0;
    for (const auto& [chunk, w] : pred_counts) {
      int w_max = 0;  // max occurrences in a single reference
      for (const Trajectory* ref : references) {
        const auto rc = ngram_counts(ref->links, j);
        auto it = rc.find(chunk);
        if (it != rc.end()) w_max = std::max(w_max, it->second);
      }
      matched += std::min(w, w_max);
    }
    const double total = static_cast<double>(T - j + 1);
    if (matched == 0.0) return 0.0;
    log_prec_sum += std::log(matched / total);
  }
  return brevity * std::exp(log_prec_sum / n_eff);
}

double jsd_metric(const std::vector<std::vector<int32_t>>& observed_routes,
                  const std::vector<std::vector<int32_t>>& predicted_routes) {
  std::map<std::vector<int32_t>, double> p, q;
  for (const auto& r : observed_routes)
    p[r] += 1.0 / static_cast<double>(observed_routes.size());
  double unseen = 0.0;
  for (const auto& r : predicted_routes) {
    if (p.count(r))
      q[r] += 1.0 / static_cast<double>(predicted_routes.size());
    else
      unseen += 1.0 / static_cast<double>(predicted_routes.size());
  }
  // divergence over the union support plus the unseen bucket
  double js = 0.0;
  auto accumulate = [&js](double pi, double qi) {
    const double mi = 0.5 * (pi + qi);
    if (pi > 0.0) js += 0.5 * pi * std::log2(pi / mi);
    if (qi > 0.0) js += 0.5 * qi * std::log2(qi / mi);
  };
  for (const auto& [route, pi] : p) {
    auto it = q.find(route);
    accumulate(pi, it == q.end() ? 0.0 : it->second);
  }
  if (unseen > 0.0) accumulate(0.0, unseen);
  js = std::max(0.0, std::min(1.0, js));
  return std::sqrt(js);
}

LpResult log_prob_metric(const ActionPolicy& model, const ActionTable& at,
                         const TrajectoryDataset& test) {
  if (test.trajectories.empty())
    throw ContractError("log_prob_metric: empty test set");
  LpResult out;
  constexpr double kFloor = -20.0;  // log-probability floor
  double acc = 0.0;
  for (const auto& tr : test.trajectories) {
    double lp = 0.0;
    for (size_t i = 0; i + 1 < tr.links.size(); ++i) {
      const int dir = at.direction_of(static_cast<size_t>(tr.links[i]),
                                      static_cast<size_t>(tr.links[i + 1]));
      double p = 0.0;
      if (dir >= 0) p = model.action_probs(tr.links[i], tr.ctx)[dir];
      if (p > 0.0 && std::log(p) > kFloor) {
        lp += std::log(p);
      } else {
        lp += kFloor;
        ++out.floored_transitions;
      }
    }
    acc += lp;
  }
  out.lp = acc / static_cast<double>(test.trajectories.size());
  return out;
}

void write_metrics_json(const std::string& path, const MetricsReport& r) {
  nlohmann::json j;
  j["ed"] = r.ed;
  j["bleu"] = r.bleu;
  j["jsd"] = r.jsd;
  if (r.lp) j["lp"] = *r.lp;
  j["incomplete_predictions"] = r.incomplete_predictions;
  j["floored_transitions"] = r.floored_transitions;
  j["n_od_groups"] = r.per_od.size();
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  os << j.dump(2) << '\n';
}

void write_metrics_csv(const std::string& path, const MetricsReport& r,
                       const RoadNetwork& net) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  os << "origin,dest,ed,bleu,n_refs,incomplete\n";
  for (const auto& od : r.per_od)
    os << net.link(static_cast<size_t>(od.origin)).id << ','
       << net.link(static_cast<size_t>(od.dest)).id << ','
       << format_double(od.ed) << ',' << format_double(od.bleu) << ','
       << od.n_refs << ',' << (od.incomplete ? 1 : 0) << '\n';
}

namespace {

struct OdGroup {
  int32_t origin;
  int32_t dest;
  std::vector<const Trajectory*> refs;
};

std::vector<OdGroup> od_groups(const TrajectoryDataset& test) {
  std::vector<OdGroup> out;
  for (const auto& [od, idx] : test.od_index()) {
    OdGroup g;
    g.origin = od.first;
    g.dest = od.second;
    for (size_t i : idx) g.refs.push_back(&test.trajectories[i]);
    out.push_back(std::move(g));
  }
  return out;
}

MetricsReport finish_report(
    const TrajectoryDataset& test, const std::vector<OdGroup>& groups,
    const std::vector<Trajectory>& predictions) {
  MetricsReport r;
  std::vector<std::vector<int32_t>> observed, predicted;
  for (const auto& tr : test.trajectories) observed.push_back(tr.links);
  for (size_t i = 0; i < groups.size(); ++i) {
    const Trajectory& pred = predictions[i];
    const double ed = edit_distance_metric(pred, groups[i].refs);
    const double bleu = bleu_metric(pred.links, groups[i].refs);
    r.ed += ed;
    r.bleu += bleu;
    if (!pred.complete) ++r.incomplete_predictions;
    predicted.push_back(pred.links);
    r.per_od.push_back(OdMetrics{groups[i].origin, groups[i].dest, ed, bleu,
                                 groups[i].refs.size(), !pred.complete});
  }
  r.ed /= static_cast<double>(groups.size());
  r.bleu /= static_cast<double>(groups.size());
  r.jsd = jsd_metric(observed, predicted);
  return r;
}

}  // namespace

MetricsReport evaluate_link_model(const ActionPolicy& model,
                                  const FeatureCache& cache,
                                  const TrajectoryDataset& test,
                                  uint64_t seed, bool with_lp) {
  const auto groups = od_groups(test);
  if (groups.empty()) throw ContractError("evaluate: empty test set");
  std::vector<Trajectory> predictions;
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    std::mt19937_64 rng(derive_seed(seed, 7000019ULL + gi));
    Context ctx;
    ctx.dest_idx = groups[gi].dest;
    ctx.agent = groups[gi].refs.front()->ctx.agent;
    const auto& table = cache.dest_table(static_cast<size_t>(groups[gi].dest));
    const int max_steps = default_max_steps(
        table.metrics[static_cast<size_t>(groups[gi].origin)].n_links);
    predictions.push_back(rollout(model, cache.action_table(),
                                  groups[gi].origin, ctx, max_steps, rng));
  }
  MetricsReport r = finish_report(test, groups, predictions);
  if (with_lp) {
    const LpResult lp = log_prob_metric(model, cache.action_table(), test);
    r.lp = lp.lp;
    r.floored_transitions = lp.floored_transitions;
  }
  return r;
}

MetricsReport evaluate_path_model(const PathModelFn& model,
                                  const FeatureCache& cache,
                                  const TrajectoryDataset& test,
                                  uint64_t seed) {
  const auto groups = od_groups(test);
  if (groups.empty()) throw ContractError("evaluate: empty test set");
  std::vector<Trajectory> predictions;
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    std::mt19937_64 rng(derive_seed(seed, 7000019ULL + gi));
    auto [paths, probs] = model(groups[gi].origin, groups[gi].dest);
    if (paths.empty()) throw ContractError("path model returned no candidates");
    double u = uniform01(rng);
    size_t pick = paths.size() - 1;
    for (size_t j = 0; j < probs.size(); ++j) {
      u -= probs[j];
      if (u <= 0.0) {
        pick = j;
        break;
      }
    }
    Trajectory tr;
    tr.links = paths[pick];
    tr.ctx.dest_idx = groups[gi].dest;
    tr.complete = !tr.links.empty() && tr.links.back() == groups[gi].dest;
    predictions.push_back(std::move(tr));
  }
  // LP does not exist for path-based models
  return finish_report(test, groups, predictions);
}

FlowAssignment flow_assignment(const ActionPolicy& model,
                               const FeatureCache& cache,
                               const std::vector<OdDemand>& demand, int r,
                               uint64_t seed) {
  const ActionTable& at = cache.action_table();
  FlowAssignment out;
  for (size_t di = 0; di < demand.size(); ++di) {
    const OdDemand& od = demand[di];
    if (od.demand < 0.0) throw ContractError("negative demand");
    out.total_demand += od.demand;
    std::mt19937_64 rng(derive_seed(seed, 9000011ULL + di));
    const auto& table = cache.dest_table(static_cast<size_t>(od.dest));
    const int max_steps = default_max_steps(
        table.metrics[static_cast<size_t>(od.origin)].n_links);

    std::vector<std::vector<int32_t>> paths;
    std::vector<double> logps;
    const int budget = 10 * r;
    for (int attempt = 0; attempt < budget &&
                          paths.size() < static_cast<size_t>(r);
         ++attempt) {
      // manual rollout so the path log-probability comes along
      std::vector<int32_t> links{od.origin};
      double logp = 0.0;
      int32_t cur = od.origin;
      bool complete = false;
      Context ctx;
      ctx.dest_idx = od.dest;
      ctx.agent = od.agent;
      for (int s = 0; s < max_steps; ++s) {
        const auto probs = model.action_probs(cur, ctx);
        double u = uniform01(rng);
        int chosen = -1;
        for (int d = 0; d < kNumDirections; ++d) {
          if (probs[d] <= 0.0) continue;
          u -= probs[d];
          chosen = d;
          if (u <= 0.0) break;
        }
        if (chosen < 0) break;
        logp += std::log(probs[chosen]);
        cur = step(at, cur, chosen);
        links.push_back(cur);
        if (cur == od.dest) {
          complete = true;
          break;
        }
      }
      if (complete) {
        paths.push_back(std::move(links));
        logps.push_back(logp);
      }
    }
    std::vector<double> norm;
    if (paths.empty()) {
      ++out.fallback_ods;  // demand goes to the shortest path
      std::vector<int32_t> links{od.origin};
      int32_t cur = od.origin;
      while (cur != od.dest) {
        cur = table.next_hop[static_cast<size_t>(cur)];
        if (cur < 0) throw UnreachableError("flow OD is unreachable");
        links.push_back(cur);
      }
      paths.push_back(std::move(links));
      norm.assign(1, 1.0);
    } else {
      const double hi = *std::max_element(logps.begin(), logps.end());
      double acc = 0.0;
      for (double lp : logps) acc += std::exp(lp - hi);
      for (double lp : logps) norm.push_back(std::exp(lp - hi) / acc);
    }
    for (size_t j = 0; j < paths.size(); ++j)
      for (int32_t l : paths[j]) out.link_flow[l] += od.demand * norm[j];
    out.od_path_probs.push_back(std::move(norm));
  }
  return out;
}

FlowAssignment flow_assignment_paths(const PathModelFn& model,
                                     const FeatureCache& cache,
                                     const std::vector<OdDemand>& demand) {
  (void)cache;
  FlowAssignment out;
  for (const OdDemand& od : demand) {
    if (od.demand < 0.0) throw ContractError("negative demand");
    out.total_demand += od.demand;
    auto [paths, probs] = model(od.origin, od.dest);
    if (paths.empty()) throw ContractError("path model returned no candidates");
    double acc = 0.0;
    for (double p : probs) acc += p;
    for (double& p : probs) p /= acc;
    for (size_t j = 0; j < paths.size(); ++j)
      for (int32_t l : paths[j]) out.link_flow[l] += od.demand * probs[j];
    out.od_path_probs.push_back(probs);
  }
  return out;
}

void write_flow_csv(const std::string& path, const RoadNetwork& net,
                    const FlowAssignment& flow, double r_squared_value) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  os << "link_id,flow\n";
  for (const auto& [idx, f] : flow.link_flow)
    os << net.link(static_cast<size_t>(idx)).id << ',' << format_double(f)
       << '\n';
  os << "# r_squared," << format_double(r_squared_value) << '\n';
}

double flow_r_squared(const FlowAssignment& predicted,
                      const FlowAssignment& reference) {
  std::set<int32_t> links;
  for (const auto& [l, _] : predicted.link_flow) links.insert(l);
  for (const auto& [l, _] : reference.link_flow) links.insert(l);
  if (links.empty()) throw ContractError("flow_r_squared: no flows");
  auto get = [](const FlowAssignment& f, int32_t l) {
    auto it = f.link_flow.find(l);
    return it == f.link_flow.end() ? 0.0 : it->second;
  };
  double mean = 0.0;
  for (int32_t l : links) mean += get(reference, l);
  mean /= static_cast<double>(links.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (int32_t l : links) {
    const double ref = get(reference, l);
    const double d = ref - get(predicted, l);
    ss_res += d * d;
    ss_tot += (ref - mean) * (ref - mean);
  }
  if (ss_tot == 0.0) throw ContractError("flow_r_squared: constant reference");
  return 1.0 - ss_res / ss_tot;
}

std::vector<std::vector<double>> shapley_mc(
    const ScalarFn& f, const std::vector<std::vector<double>>& samples,
    const std::vector<double>& baseline, int permutations, uint64_t seed) {
  if (permutations < 1) throw ContractError("shapley_mc: permutations < 1");
  std::vector<std::vector<double>> out;
  const size_t n = baseline.size();
  for (size_t si = 0; si < samples.size(); ++si) {
    const std::vector<double>& x = samples[si];
    if (x.size() != n) throw ContractError("shapley_mc: width mismatch");
    std::vector<double> phi(n, 0.0);
    std::mt19937_64 rng(derive_seed(seed, 40009ULL + si));
    std::vector<size_t> order(n);
    const double f_base = f(baseline);
    for (int p = 0; p < permutations; ++p) {
      for (size_t i = 0; i < n; ++i) order[i] = i;
      for (size_t i = n; i > 1; --i)
        std::swap(order[i - 1], order[bounded(rng, i)]);
      std::vector<double> cur = baseline;
      double f_prev = f_base;
      for (size_t i : order) {
        cur[i] = x[i];
        const double f_new = f(cur);
        phi[i] += f_new - f_prev;
        f_prev = f_new;
      }
    }
    for (double& v : phi) v /= static_cast<double>(permutations);
    out.push_back(std::move(phi));
  }
  return out;
}

std::vector<double> AttributionReport::mean_abs() const {
  std::vector<double> out(feature_names.size(), 0.0);
  for (const auto& row : values)
    for (size_t i = 0; i < out.size(); ++i) out[i] += std::fabs(row[i]);
  for (double& v : out) v /= static_cast<double>(values.size());
  return out;
}

std::vector<size_t> AttributionReport::ranking() const {
  const std::vector<double> m = mean_abs();
  std::vector<size_t> idx(m.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&m](size_t a, size_t b) { return m[a] > m[b]; });
  return idx;
}

void write_attribution_csv(const std::string& path,
                           const AttributionReport& r) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write " + path);
  os << "feature,mean_abs_shap,q05,q25,q50,q75,q95\n";
  const auto m = r.mean_abs();
  for (size_t i = 0; i < r.feature_names.size(); ++i) {
    std::vector<double> col;
    for (const auto& row : r.values) col.push_back(row[i]);
    std::sort(col.begin(), col.end());
    auto q = [&col](double p) {
      const double pos = p * static_cast<double>(col.size() - 1);
      const size_t lo = static_cast<size_t>(pos);
      const size_t hi = std::min(col.size() - 1, lo + 1);
      return col[lo] + (pos - static_cast<double>(lo)) * (col[hi] - col[lo]);
    };
    os << r.feature_names[i] << ',' << format_double(m[i]) << ','
       << format_double(q(0.05)) << ',' << format_double(q(0.25)) << ','
       << format_double(q(0.50)) << ',' << format_double(q(0.75)) << ','
       << format_double(q(0.95)) << '\n';
  }
}

AttributionReport attribute_discriminator(const ModelBundle& bundle,
                                          const FeatureCache& cache,
                                          const std::vector<Triplet>& samples,
                                          int permutations, uint64_t seed) {
  if (bundle.cfg.embed_dim > 0)
    throw SpecError("attribution does not support agent embeddings");
  const int h = bundle.cfg.state_dim + bundle.cfg.context_dim;
  const int n_feat = h + kNumDirections;
  const size_t ch = static_cast<size_t>(bundle.cfg.grid_channels());

  AttributionReport rep;
  for (int i = 0; i < bundle.cfg.state_dim; ++i)
    rep.feature_names.push_back(i == 0 ? "length"
                                       : std::string("level_") +
                                             level_name(static_cast<RoadLevel>(
                                                 i - 1)));
  if (bundle.cfg.context_dim > 0) {
    const char* ctx_names[kContextFeatureDim] = {
        "dist", "n_links", "left_turns", "right_turns", "u_turns",
        "turns", "freq_primary", "freq_secondary", "freq_tertiary",
        "freq_living_street", "freq_residential", "freq_unclassified"};
    for (int i = 0; i < bundle.cfg.context_dim; ++i)
      rep.feature_names.push_back(ctx_names[i]);
  }
  for (int d = 0; d < kNumDirections; ++d)
    rep.feature_names.push_back(std::string("action_") + direction_name(d));

  // sample feature vectors and the dataset-mean baseline
  std::vector<std::vector<double>> xs;
  std::vector<double> baseline(n_feat, 0.0);
  for (const Triplet& t : samples) {
    std::vector<double> x(n_feat, 0.0);
    const auto hf = cache.h_features(static_cast<size_t>(t.state),
                                     static_cast<size_t>(t.dest));
    std::copy(hf.begin(), hf.end(), x.begin());
    x[h + t.action] = 1.0;
    for (int i = 0; i < n_feat; ++i) baseline[i] += x[i];
    xs.push_back(std::move(x));
  }
  for (double& v : baseline) v /= static_cast<double>(samples.size());

  // f as a function of the center-cell features, h(s) input and the action
  // one-hot; neighbour cells and h(s') stay at their sampled values. All
  // permutation-walk evaluations of one sample run as one batched forward.
  for (size_t si = 0; si < samples.size(); ++si) {
    const Triplet& t = samples[si];
    const int32_t next = step(cache.action_table(), t.state, t.action);
    std::vector<SampleRef> cur{{t.state, t.dest, t.agent}};
    std::vector<SampleRef> nxt{{next, t.dest, t.agent}};
    const Tensor grid0 = assemble_grid_batch(cache, bundle.cfg, cur);
    const Tensor hn_in = assemble_h_batch(cache, bundle.cfg, nxt);
    const std::vector<double>& x = xs[si];

    // permutation orders drawn exactly like the generic estimator
    std::mt19937_64 rng(derive_seed(seed, 40009ULL + si));
    std::vector<std::vector<size_t>> orders(permutations);
    for (int p = 0; p < permutations; ++p) {
      auto& order = orders[p];
      order.resize(n_feat);
      for (int i = 0; i < n_feat; ++i) order[i] = static_cast<size_t>(i);
      for (size_t i = n_feat; i > 1; --i)
        std::swap(order[i - 1], order[bounded(rng, i)]);
    }

    // rows: baseline, then the cumulative walk of each permutation
    const size_t rows = 1 + static_cast<size_t>(permutations) * n_feat;
    Tensor grids = Tensor::zeros({rows, 3, 3, ch});
    Tensor hcs = Tensor::zeros({rows, static_cast<size_t>(h)});
    std::vector<double> point = baseline;
    size_t row = 0;
    auto write_row = [&](const std::vector<double>& v) {
      double* g = &grids.data[row * 9 * ch];
      std::memcpy(g, grid0.data.data(), 9 * ch * sizeof(double));
      for (int i = 0; i < h; ++i) {
        g[4 * ch + i] = v[i];
        hcs.data[row * h + i] = v[i];
      }
      // action one-hot channels live beside the conv latent, handled below
      ++row;
    };
    std::vector<std::vector<double>> onehots(rows,
                                             std::vector<double>(8, 0.0));
    auto write_onehot = [&](const std::vector<double>& v, size_t r) {
      for (int d = 0; d < kNumDirections; ++d) onehots[r][d] = v[h + d];
    };
    write_onehot(baseline, row);
    write_row(baseline);
    for (int p = 0; p < permutations; ++p) {
      point = baseline;
      for (int j = 0; j < n_feat; ++j) {
        point[orders[p][j]] = x[orders[p][j]];
        write_onehot(point, row);
        write_row(point);
      }
    }

    // one batched forward for g and h(s); h(s') is shared by every row
    Tape tape;
    ParamIds gid = bundle.disc_g.lease(tape);
    ParamIds hid = bundle.disc_h.lease(tape);
    Tape::NodeId latent =
        conv_stack_forward(tape, gid, bundle.cfg, tape.input(std::move(grids)));
    Tensor onehot_mat = Tensor::zeros({rows, kNumDirections});
    for (size_t r = 0; r < rows; ++r)
      for (int d = 0; d < kNumDirections; ++d)
        onehot_mat.data[r * kNumDirections + d] = onehots[r][d];
    Tape::NodeId g_node = dense_head(
        tape, gid, tape.concat_cols(latent, tape.input(std::move(onehot_mat))));
    const std::vector<double> g_all =
        tape.val(tape.reshape(g_node, {rows})).data;
    const std::vector<double> hc_all =
        tape.val(h_forward(tape, hid, tape.input(std::move(hcs)))).data;
    const double hn_v =
        tape.val(h_forward(tape, hid, tape.input(hn_in))).data[0];
    auto f_of = [&](size_t r) {
      return g_all[r] + bundle.cfg.gamma * hn_v - hc_all[r];
    };

    std::vector<double> phi(n_feat, 0.0);
    const double f_base = f_of(0);
    row = 1;
    for (int p = 0; p < permutations; ++p) {
      double prev = f_base;
      for (int j = 0; j < n_feat; ++j) {
        const double cur_f = f_of(row++);
        phi[orders[p][j]] += cur_f - prev;
        prev = cur_f;
      }
    }
    for (double& v : phi) v /= static_cast<double>(permutations);
    rep.values.push_back(std::move(phi));
  }
  return rep;
}

}  // namespace rcm
