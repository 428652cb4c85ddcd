#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "rcm/experiment.hpp"

using namespace rcm;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "rcm_exp" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d.string();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path);
  REQUIRE(is);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

TrajectoryDataset tiny_demos(const FeatureCache& cache, int n,
                             uint64_t seed) {
  LinearReward beta;
  beta.length = -3.0;
  const OdSampler sampler = make_od_sampler(cache, 4);
  return synth_demonstrations(cache, beta, n, sampler, 1.0, seed).dataset;
}

}  // namespace

TEST_CASE("dataset splits") {
  RoadNetwork net = synth_grid_network(5, 5, 1000.0, 2);
  ActionTable at = build_action_table(net);
  FeatureCache cache(net, at, FeatureConfig{});
  TrajectoryDataset data = tiny_demos(cache, 60, 8);

  SUBCASE("k-fold splits partition the trips exactly") {
    SplitSpec spec;
    spec.mode = SplitSpec::Mode::kfold;
    spec.k = 5;
    spec.seed = 3;
    std::multiset<int64_t> seen;
    size_t total = 0;
    for (int fold = 0; fold < 5; ++fold) {
      spec.fold = fold;
      SplitResult r = split_dataset(data, spec);
      CHECK(r.train.trajectories.size() + r.test.trajectories.size() ==
            data.trajectories.size());
      for (const auto& tr : r.test.trajectories) seen.insert(tr.trip_id);
      total += r.test.trajectories.size();
    }
    CHECK(total == data.trajectories.size());
    CHECK(seen.size() == data.trajectories.size());
    for (int64_t id : seen) CHECK(seen.count(id) == 1);
  }
  SUBCASE("fraction splits respect the requested share") {
    SplitSpec spec;
    spec.train_fraction = 0.75;
    spec.seed = 9;
    SplitResult r = split_dataset(data, spec);
    CHECK(r.train.trajectories.size() == 45);
    CHECK(r.test.trajectories.size() == 15);
  }
  SUBCASE("unseen-destination mode shares no destination across parts") {
    SplitSpec spec;
    spec.unseen_destinations = true;
    spec.train_fraction = 0.7;
    spec.seed = 4;
    SplitResult r = split_dataset(data, spec);
    std::set<int32_t> train_dests, test_dests;
    for (const auto& tr : r.train.trajectories)
      train_dests.insert(tr.ctx.dest_idx);
    for (const auto& tr : r.test.trajectories)
      test_dests.insert(tr.ctx.dest_idx);
    for (int32_t d : test_dests) CHECK(train_dests.count(d) == 0);
  }
  SUBCASE("fold count below 2 is rejected") {
    SplitSpec spec;
    spec.mode = SplitSpec::Mode::kfold;
    spec.k = 1;
    CHECK_THROWS_AS(split_dataset(data, spec), SpecError);
  }
  SUBCASE("identical seeds reproduce the split") {
    SplitSpec spec;
    spec.seed = 12;
    SplitResult a = split_dataset(data, spec);
    SplitResult b = split_dataset(data, spec);
    REQUIRE(a.test.trajectories.size() == b.test.trajectories.size());
    for (size_t i = 0; i < a.test.trajectories.size(); ++i)
      CHECK(a.test.trajectories[i].trip_id == b.test.trajectories[i].trip_id);
  }
}

TEST_CASE("synth command is byte-identical per seed") {
  SynthSpec spec;
  spec.rows = 4;
  spec.cols = 4;
  spec.block_m = 1000.0;
  spec.trips = 20;
  spec.min_hops = 4;
  spec.dest_pool = 6;
  spec.seed = 77;
  spec.beta.length = -3.0;
  spec.out_dir = fresh_dir("synth_a");
  cmd_synth(spec);
  const std::string dir_a = spec.out_dir;
  spec.out_dir = fresh_dir("synth_b");
  cmd_synth(spec);
  for (const char* f : {"nodes.csv", "links.csv", "adjacency.csv",
                        "trajectories.csv", "beta.csv", "report.txt"}) {
    CHECK(slurp(dir_a + "/" + f) == slurp(spec.out_dir + "/" + f));
  }
  SUBCASE("prepared data reloads cleanly") {
    LoadedData data = load_data_dir(dir_a);
    CHECK(data.dataset.trajectories.size() == 20);
    CHECK(data.net.num_links() == 48);
  }
}

TEST_CASE("prepare command applies the data filters and reports them") {
  // build a raw network + trips file by hand
  const std::string dir = fresh_dir("prepare");
  SynthSpec spec;
  spec.rows = 10;
  spec.cols = 10;
  spec.block_m = 500.0;
  spec.trips = 10;
  spec.min_hops = 16;
  spec.dest_pool = 4;
  spec.seed = 3;
  spec.beta.length = -5.0;
  spec.out_dir = dir;
  cmd_synth(spec);

  PrepareSpec prep;
  prep.nodes_path = dir + "/nodes.csv";
  prep.links_path = dir + "/links.csv";
  prep.adjacency_path = dir + "/adjacency.csv";
  prep.trajectories_path = dir + "/trajectories.csv";
  prep.min_links = 15;
  prep.out_dir = fresh_dir("prepare_out");
  cmd_prepare(prep);
  const std::string report = slurp(prep.out_dir + "/report.txt");
  CHECK(report.find("kept") != std::string::npos);
  CHECK(report.find("dropped_short") != std::string::npos);
  LoadedData data = load_data_dir(prep.out_dir);
  for (const auto& tr : data.dataset.trajectories)
    CHECK(tr.links.size() >= 15);
}

TEST_CASE("train, evaluate, flow, attribute and counterfactual commands") {
  // one shared synthetic data directory
  SynthSpec spec;
  spec.rows = 5;
  spec.cols = 5;
  spec.block_m = 1000.0;
  spec.trips = 60;
  spec.min_hops = 4;
  spec.dest_pool = 8;
  spec.seed = 21;
  spec.beta.length = -3.0;
  spec.out_dir = fresh_dir("data");
  cmd_synth(spec);

  TrainSpec train;
  train.data_dir = spec.out_dir;
  train.kind = ModelKind::bc;
  train.cfg.iterations = 10;
  train.cfg.samples_per_iter = 256;
  train.cfg.seed = 5;
  train.split.seed = 2;
  train.out_dir = fresh_dir("model_bc");
  cmd_train(train);

  SUBCASE("training artifacts land under fixed names") {
    CHECK(fs::exists(train.out_dir + "/config.snapshot"));
    CHECK(fs::exists(train.out_dir + "/checkpoint.params"));
    CHECK(fs::exists(train.out_dir + "/checkpoint.manifest.json"));
    CHECK(fs::exists(train.out_dir + "/log.csv"));
    const std::string log = slurp(train.out_dir + "/log.csv");
    CHECK(log.rfind("iter,L_D,mean_R,completion_rate,mean_len,ppo_loss,"
                    "value_loss\n",
                    0) == 0);
  }
  SUBCASE("a rerun with the same config is byte-identical") {
    TrainSpec again = train;
    again.out_dir = fresh_dir("model_bc2");
    cmd_train(again);
    CHECK(slurp(train.out_dir + "/log.csv") ==
          slurp(again.out_dir + "/log.csv"));
    CHECK(slurp(train.out_dir + "/checkpoint.params") ==
          slurp(again.out_dir + "/checkpoint.params"));
  }
  SUBCASE("evaluate writes the metric report for the held-out fold") {
    EvaluateSpec ev;
    ev.data_dir = spec.out_dir;
    ev.model_dir = train.out_dir;
    ev.out_dir = fresh_dir("eval_bc");
    ev.seed = 1;
    cmd_evaluate(ev);
    nlohmann::json j =
        nlohmann::json::parse(slurp(ev.out_dir + "/metrics.json"));
    CHECK(j.contains("ed"));
    CHECK(j.contains("lp"));  // link-based model
    CHECK(j["ed"].get<double>() >= 0.0);
  }
  SUBCASE("flow writes per-link flows with an r-squared line") {
    FlowSpec fl;
    fl.data_dir = spec.out_dir;
    fl.model_dir = train.out_dir;
    fl.out_dir = fresh_dir("flow_bc");
    fl.seed = 1;
    cmd_flow(fl);
    const std::string flow = slurp(fl.out_dir + "/flow.csv");
    CHECK(flow.rfind("link_id,flow\n", 0) == 0);
    CHECK(flow.find("# r_squared,") != std::string::npos);
  }
  SUBCASE("counterfactual closes links and never routes through them") {
    LoadedData data = load_data_dir(spec.out_dir);
    // close a mid-grid link
    const int64_t victim = data.net.link(24).id;
    CounterfactualSpec cf;
    cf.data_dir = spec.out_dir;
    cf.model_dir = train.out_dir;
    cf.out_dir = fresh_dir("cf_bc");
    cf.closed_links = {victim};
    cf.rollouts = 40;
    cf.seed = 2;
    cmd_counterfactual(cf);
    nlohmann::json j =
        nlohmann::json::parse(slurp(cf.out_dir + "/counterfactual.json"));
    CHECK(j["closed_link_traversals"].get<int>() == 0);
    CHECK(j["distance_violations"].get<int>() == 0);
    CHECK(fs::exists(cf.out_dir + "/metrics.json"));
  }
  SUBCASE("recursive logit training emits a coefficient table") {
    TrainSpec rl = train;
    rl.kind = ModelKind::rl;
    rl.out_dir = fresh_dir("model_rl");
    cmd_train(rl);
    CHECK(fs::exists(rl.out_dir + "/coefficients.csv"));
    CHECK(!fs::exists(rl.out_dir + "/checkpoint.params"));
    EvaluateSpec ev;
    ev.data_dir = spec.out_dir;
    ev.model_dir = rl.out_dir;
    ev.out_dir = fresh_dir("eval_rl");
    cmd_evaluate(ev);
    nlohmann::json j =
        nlohmann::json::parse(slurp(ev.out_dir + "/metrics.json"));
    CHECK(j.contains("lp"));
  }
  SUBCASE("path size logit evaluation omits LP") {
    TrainSpec psl = train;
    psl.kind = ModelKind::psl;
    psl.cfg.iterations = 200;
    psl.out_dir = fresh_dir("model_psl");
    cmd_train(psl);
    CHECK(fs::exists(psl.out_dir + "/choice_sets.csv"));
    const std::string cs = slurp(psl.out_dir + "/choice_sets.csv");
    CHECK(cs.rfind("trip_id,agent_id,link_seq,kappa\n", 0) == 0);
    EvaluateSpec ev;
    ev.data_dir = spec.out_dir;
    ev.model_dir = psl.out_dir;
    ev.out_dir = fresh_dir("eval_psl");
    cmd_evaluate(ev);
    nlohmann::json j =
        nlohmann::json::parse(slurp(ev.out_dir + "/metrics.json"));
    CHECK(!j.contains("lp"));
  }
  SUBCASE("agent embeddings train end to end on agent-tagged data") {
    SynthSpec agents = spec;
    agents.n_agents = 5;
    agents.out_dir = fresh_dir("data_agents");
    cmd_synth(agents);
    TrainSpec emb = train;
    emb.data_dir = agents.out_dir;
    emb.cfg.embed_dim = 10;
    emb.cfg.iterations = 5;
    emb.out_dir = fresh_dir("model_emb");
    cmd_train(emb);
    EvaluateSpec ev;
    ev.data_dir = agents.out_dir;
    ev.model_dir = emb.out_dir;
    ev.out_dir = fresh_dir("eval_emb");
    cmd_evaluate(ev);
    nlohmann::json j =
        nlohmann::json::parse(slurp(ev.out_dir + "/metrics.json"));
    CHECK(j.contains("ed"));
  }
  SUBCASE("attribution needs a discriminator and then writes the csv") {
    CHECK_THROWS_AS(
        cmd_attribute(AttributeSpec{spec.out_dir, train.out_dir,
                                    fresh_dir("attr_bad"), 4, 20, 1}),
        SpecError);
    TrainSpec airl = train;
    airl.kind = ModelKind::airl;
    airl.cfg.iterations = 2;
    airl.cfg.samples_per_iter = 128;
    airl.cfg.ppo_epochs = 2;
    airl.out_dir = fresh_dir("model_airl");
    cmd_train(airl);
    AttributeSpec attr;
    attr.data_dir = spec.out_dir;
    attr.model_dir = airl.out_dir;
    attr.out_dir = fresh_dir("attr_ok");
    attr.samples = 6;
    attr.permutations = 30;
    attr.seed = 3;
    cmd_attribute(attr);
    CHECK(fs::exists(attr.out_dir + "/attribution.csv"));
  }
  SUBCASE("missing data paths fail before any compute") {
    EvaluateSpec ev;
    ev.data_dir = "/nonexistent/dir";
    ev.model_dir = train.out_dir;
    ev.out_dir = fresh_dir("eval_missing");
    CHECK_THROWS_AS(cmd_evaluate(ev), SpecError);
  }
}

TEST_CASE("model directory info round trips the split and config") {
  SynthSpec spec;
  spec.rows = 4;
  spec.cols = 4;
  spec.trips = 20;
  spec.min_hops = 3;
  spec.dest_pool = 5;
  spec.seed = 31;
  spec.beta.length = -3.0;
  spec.out_dir = fresh_dir("info_data");
  cmd_synth(spec);
  TrainSpec train;
  train.data_dir = spec.out_dir;
  train.kind = ModelKind::bc;
  train.cfg.iterations = 2;
  train.cfg.samples_per_iter = 64;
  train.cfg.clip_eps = 0.25;
  train.split.mode = SplitSpec::Mode::kfold;
  train.split.k = 4;
  train.split.fold = 2;
  train.split.seed = 19;
  train.out_dir = fresh_dir("info_model");
  cmd_train(train);
  ModelDirInfo info = read_model_dir_info(train.out_dir);
  CHECK(info.kind == ModelKind::bc);
  CHECK(info.split.mode == SplitSpec::Mode::kfold);
  CHECK(info.split.k == 4);
  CHECK(info.split.fold == 2);
  CHECK(info.split.seed == 19);
  CHECK(info.cfg.clip_eps == 0.25);
}

TEST_CASE("cli binary reports machine-parsable errors") {
  if (!fs::exists("./rcm")) return;  // only when run from the build tree
  const std::string err = fresh_dir("cli") + "/err.txt";
  const int rc = std::system(
      ("./rcm evaluate --data /nonexistent --model-dir /nonexistent --out " +
       fresh_dir("cli_out") + " 2> " + err)
          .c_str());
  CHECK(rc != 0);
  const std::string msg = slurp(err);
  CHECK(msg.rfind("error: ", 0) == 0);
}
