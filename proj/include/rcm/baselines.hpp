#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rcm/mdp.hpp"
#include "rcm/network.hpp"
#include "rcm/params.hpp"

namespace rcm {

// Linear utility of choosing next link s' at s: length, level indicator and
// turn-type terms (10 coefficients).
struct RlParams {
  double length = 0.0;  // scaled next-link length
  std::array<double, kNumLevels> level{};
  double left = 0.0;
  double right = 0.0;
  double uturn = 0.0;

  static constexpr int kDim = 10;
  std::array<double, kDim> flat() const;
  static RlParams from_flat(const std::array<double, kDim>& x);
  static const char* feature_name(int i);
};

double rl_utility(const FeatureCache& cache, const RlParams& params, size_t s,
                  size_t next);

struct RlValues {
  std::vector<double> v;  // expected downstream utility; -inf = unreachable
  bool used_fallback = false;
};

// z = exp(V) solves (I - M) z = e_dest with M[s][s'] = exp(v(s'|s)); falls
// back to value iteration when the solve leaves the feasible region.
RlValues rl_solve_values(const FeatureCache& cache, const RlParams& params,
                         size_t dest_idx);
RlValues rl_values_by_iteration(const FeatureCache& cache,
                                const RlParams& params, size_t dest_idx,
                                double tol = 1e-12, int max_iter = 100000);

double rl_next_log_prob(const FeatureCache& cache, const RlParams& params,
                        const RlValues& values, size_t s, size_t next);
double rl_next_prob(const FeatureCache& cache, const RlParams& params,
                    const RlValues& values, size_t s, size_t next);

struct RlFitResult {
  RlParams params;
  double log_likelihood = 0.0;
  double null_log_likelihood = 0.0;  // all-zero coefficients
  int iterations = 0;
};

// Maximum likelihood over observed transitions; numerical central-difference
// gradients with step-size backoff.
RlFitResult rl_fit(const TrajectoryDataset& data, const FeatureCache& cache,
                   int max_iterations = 200);

void save_rl_params_csv(const std::string& path, const RlParams& params);
RlParams load_rl_params_csv(const std::string& path);

// ---- path-based baselines ----

struct PathCandidate {
  std::vector<int32_t> links;  // origin..dest link indices
  double cost_m = 0.0;         // remaining-path length (origin excluded)
  std::array<double, kContextFeatureDim> features{};
  double kappa = 1.0;  // path size term
};

struct ChoiceSet {
  int32_t origin = -1;
  int32_t dest = -1;
  std::vector<PathCandidate> candidates;
};

// k loopless shortest paths over the link graph (Yen), sorted by length,
// pairwise distinct; fewer are returned when fewer exist.
ChoiceSet ksp_choice_set(const FeatureCache& cache, int32_t origin,
                         int32_t dest, int k = 5);

// kappa_j = sum_{a in j} (l_a / L_j) (1 / N_a); fills every candidate.
void compute_path_sizes(const RoadNetwork& net, ChoiceSet& cs);

struct PslModel {
  bool dnn = false;
  std::array<double, kContextFeatureDim> w{};  // linear utility
  ParamSet net;                                // two-layer dense utility
  double beta_ps = 0.0;                        // >= 0
};

std::vector<double> psl_utilities(const PslModel& model, const ChoiceSet& cs);
std::vector<double> psl_probs(const PslModel& model, const ChoiceSet& cs);

// Candidate maximizing the length-weighted shared-link fraction;
// ties prefer the shortest candidate, then the lowest index.
size_t match_trajectory(const RoadNetwork& net, const Trajectory& traj,
                        const ChoiceSet& cs);

struct PslFitResult {
  PslModel model;
  double cross_entropy = 0.0;
  size_t skipped_ods = 0;
  std::map<std::pair<int32_t, int32_t>, ChoiceSet> choice_sets;
};

PslFitResult psl_fit(const TrajectoryDataset& data, const FeatureCache& cache,
                     bool dnn_utility, uint64_t seed, int k = 5,
                     int iterations = 1500, double lr = 0.05);

void save_psl_model(const std::string& coef_path, const PslModel& model);

// Choice sets in the trajectory CSV format plus a kappa column.
void write_choice_sets_csv(
    const std::string& path, const RoadNetwork& net,
    const std::map<std::pair<int32_t, int32_t>, ChoiceSet>& sets);

}  // namespace rcm
