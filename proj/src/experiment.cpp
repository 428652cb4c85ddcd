#include "rcm/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace rcm {

namespace fs = std::filesystem;

namespace {
size_t bounded(std::mt19937_64& rng, size_t n) { return rng() % n; }

void shuffle_idx(std::vector<size_t>& idx, std::mt19937_64& rng) {
  for (size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[bounded(rng, i)]);
}

TrajectoryDataset subset(const TrajectoryDataset& data,
                         const std::vector<size_t>& idx) {
  TrajectoryDataset out;
  out.agent_ids = data.agent_ids;
  for (size_t i : idx) out.trajectories.push_back(data.trajectories[i]);
  out.finalize();
  return out;
}
}  // namespace

std::string SplitSpec::to_text() const {
  std::ostringstream os;
  os << "split_mode=" << (mode == Mode::fraction ? "fraction" : "kfold")
     << "\n"
     << "train_fraction=" << format_double(train_fraction) << "\n"
     << "k=" << k << "\n"
     << "fold=" << fold << "\n"
     << "unseen_destinations=" << (unseen_destinations ? 1 : 0) << "\n"
     << "split_seed=" << seed << "\n";
  return os.str();
}

SplitSpec SplitSpec::from_keyvals(
    const std::map<std::string, std::string>& kv) {
  SplitSpec s;
  auto get = [&kv](const std::string& k) -> std::optional<std::string> {
    auto it = kv.find(k);
    if (it == kv.end()) return std::nullopt;
    return it->second;
  };
  if (auto v = get("split_mode"))
    s.mode = *v == "kfold" ? Mode::kfold : Mode::fraction;
  if (auto v = get("train_fraction"))
    s.train_fraction = parse_double(*v, "train_fraction");
  if (auto v = get("k")) s.k = static_cast<int>(parse_int(*v, "k"));
  if (auto v = get("fold")) s.fold = static_cast<int>(parse_int(*v, "fold"));
  if (auto v = get("unseen_destinations"))
    s.unseen_destinations = parse_int(*v, "unseen_destinations") != 0;
  if (auto v = get("split_seed"))
    s.seed = static_cast<uint64_t>(parse_int(*v, "split_seed"));
  return s;
}

SplitResult split_dataset(const TrajectoryDataset& data,
                          const SplitSpec& spec) {
  if (data.trajectories.empty()) throw ContractError("split of empty dataset");
  if (spec.mode == SplitSpec::Mode::kfold && spec.k < 2)
    throw SpecError("k-fold split needs k >= 2");
  if (spec.mode == SplitSpec::Mode::kfold &&
      (spec.fold < 0 || spec.fold >= spec.k))
    throw SpecError("fold index out of range");
  std::mt19937_64 rng(derive_seed(spec.seed, "split"));
  std::vector<size_t> train_idx, test_idx;

  if (spec.unseen_destinations) {
    std::set<int32_t> dest_set;
    for (const auto& tr : data.trajectories) dest_set.insert(tr.ctx.dest_idx);
    std::vector<int32_t> dests(dest_set.begin(), dest_set.end());
    std::vector<size_t> order(dests.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_idx(order, rng);
    std::set<int32_t> test_dests;
    if (spec.mode == SplitSpec::Mode::fraction) {
      const size_t n_train = static_cast<size_t>(
          std::ceil(spec.train_fraction * static_cast<double>(dests.size())));
      for (size_t i = n_train; i < order.size(); ++i)
        test_dests.insert(dests[order[i]]);
    } else {
      for (size_t i = 0; i < order.size(); ++i)
        if (static_cast<int>(i % spec.k) == spec.fold)
          test_dests.insert(dests[order[i]]);
    }
    for (size_t i = 0; i < data.trajectories.size(); ++i) {
      if (test_dests.count(data.trajectories[i].ctx.dest_idx))
        test_idx.push_back(i);
      else
        train_idx.push_back(i);
    }
  } else {
    std::vector<size_t> order(data.trajectories.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_idx(order, rng);
    if (spec.mode == SplitSpec::Mode::fraction) {
      const size_t n_train = static_cast<size_t>(std::ceil(
          spec.train_fraction * static_cast<double>(order.size())));
      for (size_t i = 0; i < order.size(); ++i)
        (i < n_train ? train_idx : test_idx).push_back(order[i]);
    } else {
      for (size_t i = 0; i < order.size(); ++i)
        (static_cast<int>(i % spec.k) == spec.fold ? test_idx : train_idx)
            .push_back(order[i]);
    }
  }
  if (train_idx.empty() || test_idx.empty())
    throw SpecError("split produced an empty train or test part");
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  SplitResult out;
  out.train = subset(data, train_idx);
  out.test = subset(data, test_idx);
  return out;
}

std::array<double, kNumDirections> UniformPolicy::action_probs(
    int32_t link, const Context& ctx) const {
  const auto mask = cache_->action_mask(static_cast<size_t>(link),
                                        static_cast<size_t>(ctx.dest_idx));
  std::array<double, kNumDirections> p{};
  int n = 0;
  for (uint8_t m : mask) n += m;
  if (n == 0)
    throw ContractError("uniform policy at a state with no valid action");
  for (int d = 0; d < kNumDirections; ++d)
    p[d] = mask[d] ? 1.0 / static_cast<double>(n) : 0.0;
  return p;
}

std::array<double, kNumDirections> OraclePolicy::action_probs(
    int32_t link, const Context& ctx) const {
  auto it = values_.find(ctx.dest_idx);
  if (it == values_.end())
    it = values_
             .emplace(ctx.dest_idx,
                      soft_value_iteration(*cache_, reward_,
                                           static_cast<size_t>(ctx.dest_idx),
                                           gamma_))
             .first;
  return it->second.policy[static_cast<size_t>(link)];
}

std::array<double, kNumDirections> RlPolicy::action_probs(
    int32_t link, const Context& ctx) const {
  auto it = values_.find(ctx.dest_idx);
  if (it == values_.end())
    it = values_
             .emplace(ctx.dest_idx,
                      rl_solve_values(*cache_, params_,
                                      static_cast<size_t>(ctx.dest_idx)))
             .first;
  const ActionTable& at = cache_->action_table();
  std::array<double, kNumDirections> p{};
  for (int d = 0; d < kNumDirections; ++d) {
    const int32_t sp = at.next(static_cast<size_t>(link), d);
    if (sp < 0 || it->second.v[sp] == -std::numeric_limits<double>::infinity())
      continue;
    p[d] = rl_next_prob(*cache_, params_, it->second,
                        static_cast<size_t>(link), static_cast<size_t>(sp));
  }
  return p;
}

PathModelFn make_psl_path_model(const PslModel& model,
                                const FeatureCache& cache, int k) {
  // choice sets are deterministic, cache them per OD
  auto sets = std::make_shared<std::map<std::pair<int32_t, int32_t>,
                                        ChoiceSet>>();
  const PslModel m = model;
  const FeatureCache* c = &cache;
  return [sets, m, c, k](int32_t origin, int32_t dest) {
    auto key = std::make_pair(origin, dest);
    auto it = sets->find(key);
    if (it == sets->end())
      it = sets->emplace(key, ksp_choice_set(*c, origin, dest, k)).first;
    std::vector<std::vector<int32_t>> paths;
    for (const auto& cand : it->second.candidates) paths.push_back(cand.links);
    return std::make_pair(paths, psl_probs(m, it->second));
  };
}

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw LoadError("cannot create directory " + dir);
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path))
    throw SpecError(what + " not found: " + path);
}

std::map<std::string, std::string> read_keyvals(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot read " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto pos = t.find('=');
    if (pos == std::string::npos) continue;
    kv[trim(t.substr(0, pos))] = trim(t.substr(pos + 1));
  }
  return kv;
}

}  // namespace

void cmd_synth(const SynthSpec& spec) {
  ensure_dir(spec.out_dir);
  RoadNetwork net = synth_grid_network(spec.rows, spec.cols, spec.block_m,
                                       spec.seed, spec.jitter);
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});

  std::vector<int32_t> pool;
  if (spec.dest_pool > 0) {
    std::mt19937_64 rng(derive_seed(spec.seed, "dest-pool"));
    std::vector<int32_t> all(net.num_links());
    for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int32_t>(i);
    for (int i = 0; i < spec.dest_pool && !all.empty(); ++i) {
      const size_t j = bounded(rng, all.size());
      pool.push_back(all[j]);
      all.erase(all.begin() + static_cast<long>(j));
    }
    std::sort(pool.begin(), pool.end());
  }
  const OdSampler sampler = make_od_sampler(cache, spec.min_hops, pool);
  DemoResult demos = synth_demonstrations(
      cache, spec.beta, spec.trips, sampler, spec.vi_gamma,
      derive_seed(spec.seed, "demos"), spec.n_agents);

  write_network_csv(net, spec.out_dir + "/nodes.csv",
                    spec.out_dir + "/links.csv",
                    spec.out_dir + "/adjacency.csv");
  write_trajectories_csv(spec.out_dir + "/trajectories.csv", net,
                         demos.dataset);
  {
    std::ofstream os(spec.out_dir + "/beta.csv");
    if (!os) throw LoadError("cannot write beta.csv");
    os << "feature,coefficient\n";
    for (const auto& [name, v] : demos.beta.named())
      os << name << ',' << format_double(v) << '\n';
  }
  {
    std::ofstream os(spec.out_dir + "/report.txt");
    os << "trips " << demos.dataset.trajectories.size() << "\n"
       << "links " << net.num_links() << "\n"
       << "nodes " << net.num_nodes() << "\n"
       << "seed " << spec.seed << "\n";
  }
}

void cmd_prepare(const PrepareSpec& spec) {
  require_file(spec.nodes_path, "node file");
  require_file(spec.links_path, "link file");
  require_file(spec.trajectories_path, "trajectory file");
  ensure_dir(spec.out_dir);
  RoadNetwork net = load_network_csv(spec.nodes_path, spec.links_path,
                                     spec.adjacency_path);
  ActionTable at = build_action_table(net);
  IngestResult res = ingest_trajectories(spec.trajectories_path, net, at,
                                         spec.min_links, spec.drop_cyclic);
  write_network_csv(net, spec.out_dir + "/nodes.csv",
                    spec.out_dir + "/links.csv",
                    spec.out_dir + "/adjacency.csv");
  write_trajectories_csv(spec.out_dir + "/trajectories.csv", net,
                         res.dataset);
  std::ofstream os(spec.out_dir + "/report.txt");
  if (!os) throw LoadError("cannot write report.txt");
  os << res.report.to_text();
}

LoadedData load_data_dir(const std::string& dir) {
  require_file(dir + "/nodes.csv", "prepared node file");
  require_file(dir + "/links.csv", "prepared link file");
  require_file(dir + "/trajectories.csv", "prepared trajectory file");
  const std::string adj =
      fs::exists(dir + "/adjacency.csv") ? dir + "/adjacency.csv" : "";
  LoadedData out{load_network_csv(dir + "/nodes.csv", dir + "/links.csv", adj),
                 {},
                 {}};
  out.at = build_action_table(out.net);
  // prepared data is already filtered; keep every stored trip
  IngestResult res = ingest_trajectories(dir + "/trajectories.csv", out.net,
                                         out.at, 2, false);
  out.dataset = std::move(res.dataset);
  return out;
}

void cmd_train(const TrainSpec& spec) {
  LoadedData data = load_data_dir(spec.data_dir);
  SplitResult split = split_dataset(data.dataset, spec.split);
  TrainConfig cfg = spec.cfg;
  if (!spec.iterations_explicit)
    cfg.iterations = default_iterations(split.train.trajectories.size());
  FeatureConfig fc;
  fc.scale_m = cfg.scale_m;
  fc.dest_features = cfg.dest_features;
  FeatureCache cache(data.net, data.at, fc);
  ensure_dir(spec.out_dir);
  {
    std::ofstream os(spec.out_dir + "/config.snapshot");
    if (!os) throw LoadError("cannot write config.snapshot");
    os << "model=" << model_kind_name(spec.kind) << "\n"
       << cfg.to_text() << spec.split.to_text();
  }

  switch (spec.kind) {
    case ModelKind::airl:
    case ModelKind::gail:
    case ModelKind::bc: {
      TrainResult res;
      if (spec.kind == ModelKind::airl)
        res = train_airl(cfg, split.train, cache);
      else if (spec.kind == ModelKind::gail)
        res = train_gail(cfg, split.train, cache);
      else
        res = train_bc(cfg, split.train, cache);
      write_training_log(spec.out_dir + "/log.csv", res.log);
      save_bundle(spec.out_dir + "/checkpoint.params",
                  spec.out_dir + "/checkpoint.manifest.json", res.bundle,
                  spec.kind);
      if (res.aborted) throw TrainAbort(res.abort_reason);
      break;
    }
    case ModelKind::rl: {
      RlFitResult fit = rl_fit(split.train, cache);
      save_rl_params_csv(spec.out_dir + "/coefficients.csv", fit.params);
      nlohmann::json m;
      m["kind"] = "rl";
      m["log_likelihood"] = fit.log_likelihood;
      m["null_log_likelihood"] = fit.null_log_likelihood;
      std::ofstream ms(spec.out_dir + "/checkpoint.manifest.json");
      ms << m.dump(2) << '\n';
      break;
    }
    case ModelKind::psl:
    case ModelKind::dnnpsl: {
      const bool dnn = spec.kind == ModelKind::dnnpsl;
      PslFitResult fit = psl_fit(split.train, cache, dnn, cfg.seed);
      save_psl_model(spec.out_dir + "/coefficients.csv", fit.model);
      write_choice_sets_csv(spec.out_dir + "/choice_sets.csv", data.net,
                            fit.choice_sets);
      if (dnn) {
        std::ofstream os(spec.out_dir + "/checkpoint.params");
        write_params(os, fit.model.net, "psl.");
      }
      nlohmann::json m;
      m["kind"] = model_kind_name(spec.kind);
      m["beta_ps"] = fit.model.beta_ps;
      m["cross_entropy"] = fit.cross_entropy;
      m["skipped_ods"] = fit.skipped_ods;
      std::ofstream ms(spec.out_dir + "/checkpoint.manifest.json");
      ms << m.dump(2) << '\n';
      break;
    }
  }
}

ModelDirInfo read_model_dir_info(const std::string& model_dir) {
  require_file(model_dir + "/config.snapshot", "config snapshot");
  const auto kv = read_keyvals(model_dir + "/config.snapshot");
  ModelDirInfo info;
  auto it = kv.find("model");
  if (it == kv.end()) throw SpecError("config.snapshot missing model kind");
  info.kind = parse_model_kind(it->second);
  info.split = SplitSpec::from_keyvals(kv);
  for (const auto& [k, v] : kv) {
    if (k == "model" || k.rfind("split_", 0) == 0 || k == "train_fraction" ||
        k == "k" || k == "fold" || k == "unseen_destinations")
      continue;
    info.cfg.set(k, v);
  }
  return info;
}

namespace {

struct EvalSetup {
  LoadedData data;
  ModelDirInfo info;
  SplitResult split;
  std::unique_ptr<FeatureCache> cache;
  // one of:
  std::optional<LoadedBundle> bundle;
  std::optional<RlParams> rl;
  std::optional<PslModel> psl;
};

EvalSetup load_eval_setup(const std::string& data_dir,
                          const std::string& model_dir) {
  EvalSetup s{load_data_dir(data_dir), read_model_dir_info(model_dir), {},
              nullptr, std::nullopt, std::nullopt, std::nullopt};
  s.split = split_dataset(s.data.dataset, s.info.split);
  FeatureConfig fc;
  fc.scale_m = s.info.cfg.scale_m;
  fc.dest_features = s.info.cfg.dest_features;
  s.cache = std::make_unique<FeatureCache>(s.data.net, s.data.at, fc);
  switch (s.info.kind) {
    case ModelKind::airl:
    case ModelKind::bc:
    case ModelKind::gail: {
      s.bundle = load_bundle(model_dir + "/checkpoint.params",
                             model_dir + "/checkpoint.manifest.json");
      check_bundle_compatible(s.bundle->bundle, *s.cache);
      break;
    }
    case ModelKind::rl:
      s.rl = load_rl_params_csv(model_dir + "/coefficients.csv");
      break;
    case ModelKind::psl:
    case ModelKind::dnnpsl: {
      PslModel m;
      m.dnn = s.info.kind == ModelKind::dnnpsl;
      std::ifstream ms(model_dir + "/checkpoint.manifest.json");
      if (!ms) throw LoadError("cannot read PSL manifest");
      nlohmann::json j = nlohmann::json::parse(ms);
      m.beta_ps = j.at("beta_ps").get<double>();
      if (m.dnn) {
        std::ifstream is(model_dir + "/checkpoint.params");
        if (!is) throw LoadError("cannot read PSL net params");
        read_params(is, m.net, "psl.");
      } else {
        std::ifstream is(model_dir + "/coefficients.csv");
        if (!is) throw LoadError("cannot read PSL coefficients");
        std::string line;
        size_t row = 0;
        while (std::getline(is, line)) {
          std::string t = trim(line);
          if (t.empty() || t == "feature,coefficient") continue;
          auto f = split(t, ',');
          if (f.size() != 2) continue;
          if (f[0] == "beta_ps") continue;
          if (row < kContextFeatureDim)
            m.w[row++] = parse_double(f[1], "coefficient");
        }
      }
      s.psl = std::move(m);
      break;
    }
  }
  return s;
}

std::vector<OdDemand> demand_from_test(const TrajectoryDataset& test,
                                        bool by_agent) {
  std::vector<OdDemand> out;
  if (!by_agent) {
    for (const auto& [od, trips] : test.od_index())
      out.push_back(OdDemand{od.first, od.second,
                             static_cast<double>(trips.size()), -1});
    return out;
  }
  std::map<std::tuple<int32_t, int32_t, int32_t>, double> counts;
  for (const auto& tr : test.trajectories)
    counts[{tr.links.front(), tr.ctx.dest_idx, tr.ctx.agent}] += 1.0;
  for (const auto& [key, n] : counts)
    out.push_back(OdDemand{std::get<0>(key), std::get<1>(key), n,
                           std::get<2>(key)});
  return out;
}

}  // namespace

void cmd_evaluate(const EvaluateSpec& spec) {
  EvalSetup s = load_eval_setup(spec.data_dir, spec.model_dir);
  ensure_dir(spec.out_dir);
  MetricsReport r;
  if (s.bundle) {
    BundlePolicy policy(s.bundle->bundle, *s.cache);
    r = evaluate_link_model(policy, *s.cache, s.split.test, spec.seed);
  } else if (s.rl) {
    RlPolicy policy(*s.cache, *s.rl);
    r = evaluate_link_model(policy, *s.cache, s.split.test, spec.seed);
  } else {
    r = evaluate_path_model(make_psl_path_model(*s.psl, *s.cache), *s.cache,
                            s.split.test, spec.seed);
  }
  write_metrics_json(spec.out_dir + "/metrics.json", r);
  write_metrics_csv(spec.out_dir + "/metrics.csv", r, s.data.net);
}

void cmd_flow(const FlowSpec& spec) {
  EvalSetup s = load_eval_setup(spec.data_dir, spec.model_dir);
  ensure_dir(spec.out_dir);
  const bool by_agent = s.bundle && s.bundle->bundle.cfg.embed_dim > 0;
  const std::vector<OdDemand> demand =
      demand_from_test(s.split.test, by_agent);
  FlowAssignment flow;
  if (s.bundle) {
    BundlePolicy policy(s.bundle->bundle, *s.cache);
    flow = flow_assignment(policy, *s.cache, demand, spec.r, spec.seed);
  } else if (s.rl) {
    RlPolicy policy(*s.cache, *s.rl);
    flow = flow_assignment(policy, *s.cache, demand, spec.r, spec.seed);
  } else {
    flow = flow_assignment_paths(make_psl_path_model(*s.psl, *s.cache),
                                 *s.cache, demand);
  }
  // reference flows: the observed test trajectories
  FlowAssignment observed;
  observed.total_demand = 0.0;
  for (const auto& tr : s.split.test.trajectories) {
    observed.total_demand += 1.0;
    for (int32_t l : tr.links) observed.link_flow[l] += 1.0;
  }
  const double r2 = flow_r_squared(flow, observed);
  write_flow_csv(spec.out_dir + "/flow.csv", s.data.net, flow, r2);
}

void cmd_attribute(const AttributeSpec& spec) {
  EvalSetup s = load_eval_setup(spec.data_dir, spec.model_dir);
  if (!s.bundle || s.info.kind == ModelKind::bc)
    throw SpecError("attribution needs an adversarial checkpoint with a "
                    "discriminator");
  ensure_dir(spec.out_dir);
  std::vector<Triplet> samples;
  {
    std::mt19937_64 rng(derive_seed(spec.seed, "attr-samples"));
    const auto& trip = s.split.test.triplets();
    for (int i = 0; i < spec.samples; ++i)
      samples.push_back(trip[bounded(rng, trip.size())]);
  }
  AttributionReport rep =
      attribute_discriminator(s.bundle->bundle, *s.cache, samples,
                              spec.permutations, spec.seed);
  write_attribution_csv(spec.out_dir + "/attribution.csv", rep);
}

void cmd_counterfactual(const CounterfactualSpec& spec) {
  EvalSetup s = load_eval_setup(spec.data_dir, spec.model_dir);
  if (!s.bundle)
    throw SpecError("counterfactual evaluation needs a policy checkpoint");
  ensure_dir(spec.out_dir);
  if (spec.closed_links.empty())
    throw SpecError("counterfactual needs at least one closed link id");

  // rebuild the environment without the closed links; no retraining
  RoadNetwork reduced = s.data.net;
  for (int64_t id : spec.closed_links) reduced = remove_link(reduced, id);
  ActionTable at2 = build_action_table(reduced);
  FeatureConfig fc;
  fc.scale_m = s.info.cfg.scale_m;
  fc.dest_features = s.info.cfg.dest_features;
  FeatureCache cache2(reduced, at2, fc);

  // keep test trips whose OD survives (links exist and still connect)
  TrajectoryDataset usable;
  usable.agent_ids = s.split.test.agent_ids;
  size_t dropped = 0;
  std::set<int64_t> closed(spec.closed_links.begin(),
                           spec.closed_links.end());
  for (const auto& tr : s.split.test.trajectories) {
    const int64_t oid =
        s.data.net.link(static_cast<size_t>(tr.links.front())).id;
    const int64_t did =
        s.data.net.link(static_cast<size_t>(tr.ctx.dest_idx)).id;
    if (closed.count(oid) || closed.count(did)) {
      ++dropped;
      continue;
    }
    const size_t o2 = reduced.index_of(oid);
    const size_t d2 = reduced.index_of(did);
    const auto& table = cache2.dest_table(d2);
    if (!(o2 == d2 || table.reachable(o2))) {
      ++dropped;
      continue;
    }
    Trajectory remapped;  // same trip, link indices in the reduced network
    remapped.ctx.agent = tr.ctx.agent;
    remapped.ctx.dest_idx = static_cast<int32_t>(d2);
    remapped.trip_id = tr.trip_id;
    bool ok = true;
    for (int32_t l : tr.links) {
      const int64_t id = s.data.net.link(static_cast<size_t>(l)).id;
      if (closed.count(id)) {
        ok = false;  // reference traverses the closed link; keep OD only
        break;
      }
      remapped.links.push_back(static_cast<int32_t>(reduced.index_of(id)));
    }
    if (!ok) {
      // reference path is gone; keep the OD as a one-reference group using
      // the new shortest path so predictions still have a comparison point
      remapped.links.clear();
      int32_t cur = static_cast<int32_t>(o2);
      remapped.links.push_back(cur);
      while (cur != static_cast<int32_t>(d2)) {
        cur = cache2.dest_table(d2).next_hop[static_cast<size_t>(cur)];
        remapped.links.push_back(cur);
      }
    }
    remapped.actions.clear();
    ok = remapped.links.size() >= 2;
    for (size_t i = 0; ok && i + 1 < remapped.links.size(); ++i) {
      const int dir =
          at2.direction_of(static_cast<size_t>(remapped.links[i]),
                           static_cast<size_t>(remapped.links[i + 1]));
      if (dir < 0)
        ok = false;
      else
        remapped.actions.push_back(static_cast<int8_t>(dir));
    }
    if (!ok) continue;
    usable.trajectories.push_back(std::move(remapped));
  }
  if (usable.trajectories.empty())
    throw SpecError("no test OD survives the closure");
  usable.finalize();

  // bundle checkpoints are network-agnostic: rebuild features and evaluate
  check_bundle_compatible(s.bundle->bundle, cache2);
  BundlePolicy policy(s.bundle->bundle, cache2);
  MetricsReport r = evaluate_link_model(policy, cache2, usable, spec.seed);
  write_metrics_json(spec.out_dir + "/metrics.json", r);

  // closed-link avoidance over many rollouts plus distance monotonicity
  size_t violations = 0;
  size_t done = 0;
  const auto groups = usable.od_index();
  std::vector<std::pair<int32_t, int32_t>> ods;
  for (const auto& [od, _] : groups) ods.push_back(od);
  for (int i = 0; i < spec.rollouts; ++i) {
    std::mt19937_64 rng(derive_seed(spec.seed, 3000017ULL + i));
    const auto od = ods[i % ods.size()];
    Context ctx;
    ctx.dest_idx = od.second;
    const int max_steps = default_max_steps(
        cache2.dest_table(static_cast<size_t>(od.second))
            .metrics[static_cast<size_t>(od.first)]
            .n_links);
    Trajectory tr = rollout(policy, at2, od.first, ctx, max_steps, rng);
    ++done;
    for (int32_t l : tr.links)
      if (closed.count(reduced.link(static_cast<size_t>(l)).id)) ++violations;
  }

  // distances never shrink after a closure
  FeatureCache cache1(s.data.net, s.data.at, fc);
  size_t distance_violations = 0;
  for (const auto& od : ods) {
    const int64_t oid = reduced.link(static_cast<size_t>(od.first)).id;
    const int64_t did = reduced.link(static_cast<size_t>(od.second)).id;
    const double d_new =
        cache2.dest_table(static_cast<size_t>(od.second))
            .distance_m[static_cast<size_t>(od.first)];
    const double d_old =
        cache1.dest_table(s.data.net.index_of(did))
            .distance_m[s.data.net.index_of(oid)];
    if (d_new < d_old - 1e-9) ++distance_violations;
  }

  nlohmann::json j;
  j["closed_links"] = spec.closed_links;
  j["rollouts"] = done;
  j["closed_link_traversals"] = violations;
  j["dropped_test_trips"] = dropped;
  j["distance_violations"] = distance_violations;
  std::ofstream os(spec.out_dir + "/counterfactual.json");
  if (!os) throw LoadError("cannot write counterfactual.json");
  os << j.dump(2) << '\n';
}

}  // namespace rcm
