#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rcm/experiment.hpp"

using namespace rcm;

namespace {

void add_split_flags(CLI::App* cmd, SplitSpec& split, std::string& mode) {
  cmd->add_option("--split", mode, "fraction|kfold")->default_val("fraction");
  cmd->add_option("--train-fraction", split.train_fraction,
                  "train share for fraction splits");
  cmd->add_option("--folds", split.k, "fold count for k-fold splits");
  cmd->add_option("--fold", split.fold, "held-out fold index");
  cmd->add_flag("--unseen-destinations", split.unseen_destinations,
                "test destinations never appear in training");
  cmd->add_option("--split-seed", split.seed, "split shuffle seed");
}

void finish_split(SplitSpec& split, const std::string& mode) {
  if (mode == "kfold")
    split.mode = SplitSpec::Mode::kfold;
  else if (mode == "fraction")
    split.mode = SplitSpec::Mode::fraction;
  else
    throw SpecError("unknown split mode '" + mode + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"link-based route choice modeling"};
  app.require_subcommand(1);

  // synth
  SynthSpec synth;
  auto* c_synth = app.add_subcommand(
      "synth", "generate a synthetic grid network with oracle trips");
  c_synth->add_option("--rows", synth.rows);
  c_synth->add_option("--cols", synth.cols);
  c_synth->add_option("--block-m", synth.block_m);
  c_synth->add_option("--jitter", synth.jitter);
  c_synth->add_option("--seed", synth.seed);
  c_synth->add_option("--trips", synth.trips);
  c_synth->add_option("--min-hops", synth.min_hops);
  c_synth->add_option("--dest-pool", synth.dest_pool);
  c_synth->add_option("--agents", synth.n_agents,
                      "assign cyclic agent ids for embedding experiments");
  synth.beta.length = -1.0;
  synth.beta.left = -1.5;
  synth.beta.right = -1.0;
  synth.beta.uturn = -3.0;
  c_synth->add_option("--beta-length", synth.beta.length);
  c_synth->add_option("--beta-left", synth.beta.left);
  c_synth->add_option("--beta-right", synth.beta.right);
  c_synth->add_option("--beta-uturn", synth.beta.uturn);
  c_synth->add_option("--beta-dist", synth.beta.dist);
  c_synth->add_option("--vi-gamma", synth.vi_gamma);
  c_synth->add_option("--out", synth.out_dir)->required();

  // prepare
  PrepareSpec prep;
  auto* c_prep = app.add_subcommand(
      "prepare", "ingest matched link-sequence trips with the data filters");
  c_prep->add_option("--nodes", prep.nodes_path)->required();
  c_prep->add_option("--links", prep.links_path)->required();
  c_prep->add_option("--adjacency", prep.adjacency_path);
  c_prep->add_option("--trajectories", prep.trajectories_path)->required();
  c_prep->add_option("--min-links", prep.min_links);
  bool keep_cyclic = false;
  c_prep->add_flag("--keep-cyclic", keep_cyclic);
  c_prep->add_option("--out", prep.out_dir)->required();

  // train
  TrainSpec train;
  std::string train_model = "airl", train_split_mode;
  std::string config_path;
  std::vector<std::string> overrides;
  auto* c_train = app.add_subcommand("train", "fit a route choice model");
  c_train->add_option("--data", train.data_dir)->required();
  c_train->add_option("--model", train_model,
                      "airl|bc|gail|rl|psl|dnnpsl");
  c_train->add_option("--config", config_path, "key=value config file");
  c_train->add_option("--set", overrides, "config overrides key=value");
  bool auto_iterations = false;
  c_train->add_flag("--auto-iterations", auto_iterations,
                    "pick iterations from the training-set size");
  add_split_flags(c_train, train.split, train_split_mode);
  c_train->add_option("--out", train.out_dir)->required();

  // evaluate
  EvaluateSpec eval;
  auto* c_eval = app.add_subcommand("evaluate",
                                    "trajectory metrics on the held-out fold");
  c_eval->add_option("--data", eval.data_dir)->required();
  c_eval->add_option("--model-dir", eval.model_dir)->required();
  c_eval->add_option("--seed", eval.seed);
  c_eval->add_option("--out", eval.out_dir)->required();

  // flow
  FlowSpec flow;
  auto* c_flow = app.add_subcommand("flow", "simulation-based flow assignment");
  c_flow->add_option("--data", flow.data_dir)->required();
  c_flow->add_option("--model-dir", flow.model_dir)->required();
  c_flow->add_option("--r", flow.r);
  c_flow->add_option("--seed", flow.seed);
  c_flow->add_option("--out", flow.out_dir)->required();

  // attribute
  AttributeSpec attr;
  auto* c_attr = app.add_subcommand(
      "attribute", "Shapley attribution of the learned reward");
  c_attr->add_option("--data", attr.data_dir)->required();
  c_attr->add_option("--model-dir", attr.model_dir)->required();
  c_attr->add_option("--samples", attr.samples);
  c_attr->add_option("--permutations", attr.permutations);
  c_attr->add_option("--seed", attr.seed);
  c_attr->add_option("--out", attr.out_dir)->required();

  // counterfactual
  CounterfactualSpec cf;
  auto* c_cf = app.add_subcommand(
      "counterfactual", "re-evaluate a checkpoint after closing links");
  c_cf->add_option("--data", cf.data_dir)->required();
  c_cf->add_option("--model-dir", cf.model_dir)->required();
  c_cf->add_option("--close", cf.closed_links, "closed link ids")->required();
  c_cf->add_option("--rollouts", cf.rollouts);
  c_cf->add_option("--seed", cf.seed);
  c_cf->add_option("--out", cf.out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_synth) cmd_synth(synth);
    if (*c_prep) {
      prep.drop_cyclic = !keep_cyclic;
      cmd_prepare(prep);
    }
    if (*c_train) {
      train.kind = parse_model_kind(train_model);
      if (!config_path.empty()) train.cfg = load_train_config(config_path);
      for (const auto& kv : overrides) {
        auto pos = kv.find('=');
        if (pos == std::string::npos)
          throw SpecError("--set expects key=value, got '" + kv + "'");
        train.cfg.set(kv.substr(0, pos), kv.substr(pos + 1));
      }
      finish_split(train.split, train_split_mode);
      train.iterations_explicit = !auto_iterations;
      cmd_train(train);
    }
    if (*c_eval) cmd_evaluate(eval);
    if (*c_flow) cmd_flow(flow);
    if (*c_attr) cmd_attribute(attr);
    if (*c_cf) cmd_counterfactual(cf);
  } catch (const Error& e) {
    std::cerr << "error: " << e.cls() << ": " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
