#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rcm/mdp.hpp"
#include "rcm/models.hpp"

namespace rcm {

struct TrainConfig {
  int iterations = 1000;
  int samples_per_iter = 8192;  // generated samples per iteration
  int disc_updates = 1;
  int ppo_epochs = 10;
  int ppo_minibatch = 64;
  double clip_eps = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double learning_rate = 3e-4;
  uint64_t seed = 0;

  // architecture / feature knobs
  int conv1_kernel = 2;
  bool dest_features = true;
  int embed_dim = 0;
  double scale_m = 1000.0;
  bool progress = false;  // stderr progress lines, never in artifacts

  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
};

TrainConfig load_train_config(const std::string& path);
void save_train_config(const std::string& path, const TrainConfig& cfg);

// 1000/2000/3000 iterations for training sizes around 100/1000/10000 trips.
int default_iterations(size_t n_train_trips);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;  // Q = advantage + V_old
};

// Backward GAE recursion over one trajectory. `terminal` marks trajectories
// that reached the destination (V(s_{T+1}) = 0); truncated rollouts
// bootstrap with `bootstrap_value`.
GaeResult compute_gae(const std::vector<double>& rewards,
                      const std::vector<double>& values, bool terminal,
                      double bootstrap_value, double gamma, double lambda);

// Mean clipped surrogate, to be maximized. Advantages are used as given;
// the trainer normalizes them per PPO round before calling.
double ppo_surrogate(const std::vector<double>& new_log_probs,
                     const std::vector<double>& old_log_probs,
                     const std::vector<double>& advantages, double eps);

struct RolloutStep {
  int32_t state;
  int8_t action;
  int32_t dest;
  int32_t agent;
  double logp_old;
  double reward = 0.0;
  double value_old = 0.0;
  double advantage = 0.0;
  double ret = 0.0;
};

struct RolloutTrajSlice {
  size_t begin;
  size_t end;
  bool complete;
  double bootstrap_value = 0.0;  // V(s_{T+1}) for truncated rollouts
};

struct RolloutBatch {
  std::vector<RolloutStep> steps;
  std::vector<RolloutTrajSlice> trajs;
};

// Batched f over the tape: AIRL combines g + gamma h(s') - h(s); GAIL uses
// the g sub-network alone.
Tape::NodeId adversarial_f_node(Tape& tape, const ModelBundle& bundle,
                                const ParamIds& gid, const ParamIds& hid,
                                const ParamIds& emb, const FeatureCache& cache,
                                const std::vector<SampleRef>& refs,
                                const std::vector<int32_t>& actions,
                                bool airl);

// Cross-entropy discriminator loss, log-space: for AIRL the class scores are
// (f, log pi); for GAIL the pi term is absent (D = sigmoid(g)).
Tape::NodeId disc_loss_node(Tape& tape, Tape::NodeId f_real,
                            std::vector<double> logpi_real, Tape::NodeId f_gen,
                            std::vector<double> logpi_gen, bool airl);

struct LogRow {
  int iter;
  double disc_loss;
  double mean_reward;
  double completion_rate;
  double mean_len;
  double ppo_loss;
  double value_loss;
};

void write_training_log(const std::string& path,
                        const std::vector<LogRow>& rows);

struct TrainResult {
  ModelBundle bundle;
  std::vector<LogRow> log;
  bool aborted = false;
  std::string abort_reason;
};

// Adversarial IRL: per iteration sample real triplets, roll out the
// generator, compute rewards, one discriminator update, GAE, PPO epochs and
// value regression.
TrainResult train_airl(const TrainConfig& cfg, const TrajectoryDataset& data,
                       const FeatureCache& cache);
// Identical loop with the g-only discriminator and the -log(1-D) surrogate.
TrainResult train_gail(const TrainConfig& cfg, const TrajectoryDataset& data,
                       const FeatureCache& cache);
// Supervised cross-entropy over (s,a,c) triplets treated i.i.d.
TrainResult train_bc(const TrainConfig& cfg, const TrajectoryDataset& data,
                     const FeatureCache& cache);

}  // namespace rcm
