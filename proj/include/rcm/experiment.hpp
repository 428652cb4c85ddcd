#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rcm/baselines.hpp"
#include "rcm/evaluation.hpp"
#include "rcm/mdp.hpp"
#include "rcm/models.hpp"
#include "rcm/training.hpp"

namespace rcm {

struct SplitSpec {
  enum class Mode { fraction, kfold } mode = Mode::fraction;
  double train_fraction = 0.8;
  int k = 5;
  int fold = 0;
  bool unseen_destinations = false;
  uint64_t seed = 0;

  std::string to_text() const;
  static SplitSpec from_keyvals(const std::map<std::string, std::string>& kv);
};

struct SplitResult {
  TrajectoryDataset train;
  TrajectoryDataset test;
};

// k-fold splits partition trips exactly; unseen-destination mode partitions
// the destination links instead, so train and test share no destination.
SplitResult split_dataset(const TrajectoryDataset& data,
                          const SplitSpec& spec);

// Uniform over the destination-reachable valid actions.
class UniformPolicy final : public ActionPolicy {
 public:
  explicit UniformPolicy(const FeatureCache& cache) : cache_(&cache) {}
  std::array<double, kNumDirections> action_probs(
      int32_t link, const Context& ctx) const override;

 private:
  const FeatureCache* cache_;
};

// Soft-value-iteration policy under a known linear reward (the synthetic
// ground truth), solved per destination on first use.
class OraclePolicy final : public ActionPolicy {
 public:
  OraclePolicy(const FeatureCache& cache, LinearReward reward, double gamma)
      : cache_(&cache), reward_(reward), gamma_(gamma) {}
  std::array<double, kNumDirections> action_probs(
      int32_t link, const Context& ctx) const override;

 private:
  const FeatureCache* cache_;
  LinearReward reward_;
  double gamma_;
  mutable std::map<int32_t, SoftValues> values_;
};

// Recursive-logit next-link probabilities mapped onto direction labels.
class RlPolicy final : public ActionPolicy {
 public:
  RlPolicy(const FeatureCache& cache, RlParams params)
      : cache_(&cache), params_(params) {}
  std::array<double, kNumDirections> action_probs(
      int32_t link, const Context& ctx) const override;

 private:
  const FeatureCache* cache_;
  RlParams params_;
  mutable std::map<int32_t, RlValues> values_;
};

PathModelFn make_psl_path_model(const PslModel& model,
                                const FeatureCache& cache, int k = 5);

// ---- command implementations (the CLI binary is a thin flag parser) ----

struct SynthSpec {
  int rows = 8;
  int cols = 8;
  double block_m = 1000.0;
  double jitter = 0.1;
  uint64_t seed = 7;
  int trips = 2000;
  int min_hops = 8;
  int dest_pool = 32;  // 0 = all links may be destinations
  int n_agents = 0;    // >0 assigns cyclic agent ids to the trips
  LinearReward beta;   // generating reward
  double vi_gamma = 1.0;
  std::string out_dir;
};
void cmd_synth(const SynthSpec& spec);

struct PrepareSpec {
  std::string nodes_path;
  std::string links_path;
  std::string adjacency_path;  // optional
  std::string trajectories_path;
  size_t min_links = 15;
  bool drop_cyclic = true;
  std::string out_dir;
};
void cmd_prepare(const PrepareSpec& spec);

struct LoadedData {
  RoadNetwork net;
  ActionTable at;
  TrajectoryDataset dataset;
};
LoadedData load_data_dir(const std::string& dir);

struct TrainSpec {
  std::string data_dir;
  ModelKind kind = ModelKind::airl;
  TrainConfig cfg;
  SplitSpec split;
  std::string out_dir;
  bool iterations_explicit = true;  // false: pick by training-set size
};
void cmd_train(const TrainSpec& spec);

struct EvaluateSpec {
  std::string data_dir;
  std::string model_dir;
  std::string out_dir;
  uint64_t seed = 0;
};
void cmd_evaluate(const EvaluateSpec& spec);

struct FlowSpec {
  std::string data_dir;
  std::string model_dir;
  std::string out_dir;
  int r = 5;
  uint64_t seed = 0;
};
void cmd_flow(const FlowSpec& spec);

struct AttributeSpec {
  std::string data_dir;
  std::string model_dir;
  std::string out_dir;
  int samples = 256;
  int permutations = 200;
  uint64_t seed = 0;
};
void cmd_attribute(const AttributeSpec& spec);

struct CounterfactualSpec {
  std::string data_dir;
  std::string model_dir;
  std::string out_dir;
  std::vector<int64_t> closed_links;
  int rollouts = 1000;
  uint64_t seed = 0;
};
void cmd_counterfactual(const CounterfactualSpec& spec);

// Reads the split and feature switches recorded in a model directory's
// config snapshot so evaluation reuses the training fold exactly.
struct ModelDirInfo {
  ModelKind kind;
  SplitSpec split;
  TrainConfig cfg;
};
ModelDirInfo read_model_dir_info(const std::string& model_dir);

}  // namespace rcm
