#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rcm/mdp.hpp"
#include "rcm/models.hpp"
#include "rcm/network.hpp"

namespace rcm {

size_t levenshtein(const std::vector<int32_t>& a,
                   const std::vector<int32_t>& b);

// min over references of Levenshtein/len(ref), capped at 1; incomplete
// predictions score 1.
double edit_distance_metric(const Trajectory& predicted,
                            const std::vector<const Trajectory*>& references);

// Modified n-gram precision BLEU with per-single-reference clipping, brevity
// factor min(1, T/T_ref) against the closest reference length; n reduces to
// the predicted length when shorter.
double bleu_metric(const std::vector<int32_t>& predicted,
                   const std::vector<const Trajectory*>& references,
                   int n = 4);

// Jensen-Shannon distance (base-2 logs) between route frequency
// distributions; predicted routes absent from the observed set collapse into
// one "unseen" bucket.
double jsd_metric(const std::vector<std::vector<int32_t>>& observed_routes,
                  const std::vector<std::vector<int32_t>>& predicted_routes);

struct LpResult {
  double lp = 0.0;
  size_t floored_transitions = 0;  // zero-probability transitions hit the floor
};

// Mean over trajectories of sum_j log P(s_{j+1}|s_j,c); transitions with
// model probability 0 are floored at exp(-20) and counted.
LpResult log_prob_metric(const ActionPolicy& model, const ActionTable& at,
                         const TrajectoryDataset& test);

struct OdMetrics {
  int32_t origin;
  int32_t dest;
  double ed;
  double bleu;
  size_t n_refs;
  bool incomplete;
};

struct MetricsReport {
  double ed = 0.0;
  double bleu = 0.0;
  double jsd = 0.0;
  std::optional<double> lp;  // absent for path-based models
  size_t incomplete_predictions = 0;
  size_t floored_transitions = 0;
  std::vector<OdMetrics> per_od;
};

void write_metrics_json(const std::string& path, const MetricsReport& r);
void write_metrics_csv(const std::string& path, const MetricsReport& r,
                       const RoadNetwork& net);

// One predicted trajectory per test OD group per seed.
MetricsReport evaluate_link_model(const ActionPolicy& model,
                                  const FeatureCache& cache,
                                  const TrajectoryDataset& test,
                                  uint64_t seed, bool with_lp = true);

// Path-based evaluation: candidate paths and probabilities per OD group.
using PathModelFn = std::function<std::pair<std::vector<std::vector<int32_t>>,
                                            std::vector<double>>(
    int32_t origin, int32_t dest)>;
MetricsReport evaluate_path_model(const PathModelFn& model,
                                  const FeatureCache& cache,
                                  const TrajectoryDataset& test,
                                  uint64_t seed);

struct OdDemand {
  int32_t origin;
  int32_t dest;
  double demand;
  int32_t agent = -1;  // set when the model conditions on agent embeddings
};

struct FlowAssignment {
  std::map<int32_t, double> link_flow;  // by link index
  double total_demand = 0.0;
  size_t fallback_ods = 0;  // zero complete samples: demand on shortest path
  // per-OD normalized path probabilities, for conservation checks
  std::vector<std::vector<double>> od_path_probs;
};

// Simulation-based assignment: r sampled paths per OD, probabilities
// normalized over the draws, demand distributed and summed per link.
FlowAssignment flow_assignment(const ActionPolicy& model,
                               const FeatureCache& cache,
                               const std::vector<OdDemand>& demand, int r,
                               uint64_t seed);
FlowAssignment flow_assignment_paths(const PathModelFn& model,
                                     const FeatureCache& cache,
                                     const std::vector<OdDemand>& demand);

void write_flow_csv(const std::string& path, const RoadNetwork& net,
                    const FlowAssignment& flow, double r_squared_value);

double flow_r_squared(const FlowAssignment& predicted,
                      const FlowAssignment& reference);

// ---- Monte-Carlo permutation Shapley ----

using ScalarFn = std::function<double(const std::vector<double>&)>;

std::vector<std::vector<double>> shapley_mc(
    const ScalarFn& f, const std::vector<std::vector<double>>& samples,
    const std::vector<double>& baseline, int permutations, uint64_t seed);

struct AttributionReport {
  std::vector<std::string> feature_names;
  std::vector<std::vector<double>> values;  // [sample][feature]
  std::vector<double> mean_abs() const;
  // features ranked by mean |value|, best first
  std::vector<size_t> ranking() const;
};

void write_attribution_csv(const std::string& path,
                           const AttributionReport& r);

// Shapley attribution of the discriminator scalar f over
// [F_s; F_c; action one-hot] with the dataset feature means as baseline.
AttributionReport attribute_discriminator(const ModelBundle& bundle,
                                          const FeatureCache& cache,
                                          const std::vector<Triplet>& samples,
                                          int permutations, uint64_t seed);

}  // namespace rcm
