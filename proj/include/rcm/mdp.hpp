#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rcm/network.hpp"

namespace rcm {

// Trip-level conditioning: the destination link plus an optional agent.
struct Context {
  int32_t dest_idx = -1;
  int32_t agent = -1;  // dense agent index, -1 = anonymous
};

struct Trajectory {
  std::vector<int32_t> links;   // ordered link indices s_1..s_T
  std::vector<int8_t> actions;  // derived directions, length T-1
  Context ctx;
  bool complete = true;  // reached the destination
  int64_t trip_id = -1;
};

struct Triplet {
  int32_t state;
  int8_t action;
  int32_t dest;
  int32_t agent;
  int32_t traj;  // owning trajectory index
};

class TrajectoryDataset {
 public:
  std::vector<Trajectory> trajectories;
  std::vector<int64_t> agent_ids;  // dense agent index -> original id

  void finalize();  // builds triplets and the OD index
  const std::vector<Triplet>& triplets() const { return triplets_; }
  const std::map<std::pair<int32_t, int32_t>, std::vector<size_t>>& od_index()
      const {
    return od_index_;
  }
  size_t n_agents() const { return agent_ids.size(); }

 private:
  std::vector<Triplet> triplets_;
  std::map<std::pair<int32_t, int32_t>, std::vector<size_t>> od_index_;
};

// Deterministic transition: the unique successor under the action label.
// Throws ContractError when action is not in A(state).
int32_t step(const ActionTable& at, int32_t state, int action);

struct IngestReport {
  size_t parsed = 0;
  size_t kept = 0;
  size_t dropped_short = 0;
  size_t dropped_cyclic = 0;
  size_t dropped_nonadjacent = 0;
  std::vector<std::string> parse_errors;  // with line numbers
  std::string to_text() const;
};

struct IngestResult {
  TrajectoryDataset dataset;
  IngestReport report;
};

// CSV `trip_id,agent_id,link_seq` with `;`-separated link ids. Applies the
// data filters; an empty resulting dataset is an error.
IngestResult ingest_trajectories(const std::string& path,
                                 const RoadNetwork& net,
                                 const ActionTable& at, size_t min_links = 15,
                                 bool drop_cyclic = true);
void write_trajectories_csv(const std::string& path, const RoadNetwork& net,
                            const TrajectoryDataset& ds);

// Masked action distribution provider used by rollouts and evaluation.
class ActionPolicy {
 public:
  virtual ~ActionPolicy() = default;
  virtual std::array<double, kNumDirections> action_probs(
      int32_t link, const Context& ctx) const = 0;
};

int default_max_steps(int shortest_path_links);

// Samples the policy step by step until the destination or the step cap.
Trajectory rollout(const ActionPolicy& policy, const ActionTable& at,
                   int32_t origin, const Context& ctx, int max_steps,
                   std::mt19937_64& rng);

// Bidirectional grid: two directed links per street segment, u-turn
// adjacency excluded by default, per-segment length jitter, levels by a
// fixed rule (border=primary, every third row/col=secondary, rest
// residential).
RoadNetwork synth_grid_network(int rows, int cols, double block_m,
                               uint64_t seed, double jitter = 0.1,
                               bool include_uturns = false);

// Linear reward over state/action/context features; the ground-truth
// generator for synthetic demonstrations.
struct LinearReward {
  double constant = 0.0;
  double length = 0.0;  // scaled next-link length
  std::array<double, kNumLevels> level{};
  double left = 0.0;
  double right = 0.0;
  double uturn = 0.0;
  double dist = 0.0;  // scaled remaining distance from the next link

  double eval(const FeatureCache& cache, size_t state, int dir, size_t next,
              size_t dest) const;
  std::vector<std::pair<std::string, double>> named() const;
};

struct SoftValues {
  std::vector<double> values;  // -inf where the destination is unreachable
  std::vector<std::array<double, kNumDirections>> policy;
};

// Fixed point of V(s) = log sum_a exp(r(s,a) + gamma V(s')) with V(dest)=0;
// policy pi(a|s) = exp(r + gamma V(s') - V(s)).
SoftValues soft_value_iteration(const FeatureCache& cache,
                                const LinearReward& reward, size_t dest_idx,
                                double gamma = 1.0, double tol = 1e-9,
                                int max_iter = 20000);

struct OdSampler {
  std::vector<std::pair<int32_t, int32_t>> pairs;
  std::pair<int32_t, int32_t> sample(std::mt19937_64& rng) const;
};

OdSampler make_od_sampler(const FeatureCache& cache, int min_hops,
                          const std::vector<int32_t>& dest_pool = {});
OdSampler make_dataset_od_sampler(const TrajectoryDataset& ds);

struct DemoResult {
  TrajectoryDataset dataset;
  LinearReward beta;  // the generating parameters, kept for recovery checks
};

DemoResult synth_demonstrations(const FeatureCache& cache,
                                const LinearReward& reward, int n_trips,
                                const OdSampler& od_sampler, double gamma,
                                uint64_t seed, int n_agents = 0);

}  // namespace rcm
