#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

#include "rcm/mdp.hpp"
#include "rcm/network.hpp"
#include "rcm/params.hpp"
#include "rcm/tape.hpp"

namespace rcm {

enum class ModelKind { airl, bc, gail, rl, psl, dnnpsl };
const char* model_kind_name(ModelKind k);
ModelKind parse_model_kind(const std::string& s);

struct ModelConfig {
  int state_dim = kStateFeatureDim;
  int context_dim = kContextFeatureDim;  // 0 when destination features ablated
  int embed_dim = 0;                     // agent embedding width (10 when on)
  int n_agents = 0;
  int conv1_channels = 20;
  int conv2_channels = 30;
  int conv1_kernel = 2;  // 3 uses a same-padded first layer
  int hidden = 64;
  double gamma = 0.99;
  double scale_m = 1000.0;

  int grid_channels() const { return state_dim + context_dim + embed_dim + 1; }
  int h_input_dim() const { return state_dim + context_dim + embed_dim; }
  int latent_dim() const {
    // conv1 kernel 2: 3x3 -> 2x2 -> 1x1; kernel 3 (same): 3x3 -> 3x3 -> 2x2
    return conv1_kernel == 2 ? conv2_channels : 4 * conv2_channels;
  }
};

// Parameter arrays for the generator (policy), discriminator (g and h),
// value estimator and the optional agent-embedding table.
struct ModelBundle {
  ModelConfig cfg;
  ParamSet policy;
  ParamSet disc_g;
  ParamSet disc_h;
  ParamSet value;
  ParamSet embedding;  // single entry "table" [n_agents, embed_dim]

  static ModelBundle init(const ModelConfig& cfg, uint64_t seed,
                          bool policy_only = false);
};

using ParamIds = std::unordered_map<std::string, Tape::NodeId>;

struct SampleRef {
  int32_t state;
  int32_t dest;
  int32_t agent = -1;
};

// Batch assembly against the feature cache. Grids carry zeroed embedding
// channels; the embedding rows enter through the tape so gradients reach
// the table.
Tensor assemble_grid_batch(const FeatureCache& cache, const ModelConfig& cfg,
                           const std::vector<SampleRef>& samples);
std::vector<uint8_t> assemble_cell_valid(const FeatureCache& cache,
                                         const std::vector<SampleRef>& samples);
std::vector<uint8_t> assemble_action_mask(const FeatureCache& cache,
                                          const std::vector<SampleRef>& samples);
Tensor assemble_h_batch(const FeatureCache& cache, const ModelConfig& cfg,
                        const std::vector<SampleRef>& samples);
std::vector<int32_t> agent_rows(const ModelConfig& cfg,
                                const std::vector<SampleRef>& samples);

// Tape forwards. `grid` is the assembled [B,3,3,C] input node.
Tape::NodeId conv_stack_forward(Tape& tape, const ParamIds& ids,
                                const ModelConfig& cfg, Tape::NodeId grid);
Tape::NodeId dense_head(Tape& tape, const ParamIds& ids, Tape::NodeId x);
// masked log-probabilities over the 8 directions
Tape::NodeId policy_forward(Tape& tape, const ParamIds& ids,
                            const ModelConfig& cfg, Tape::NodeId grid,
                            std::vector<uint8_t> mask);
// g_theta(s,a|c): conv latent ++ action one-hot -> scalar per row
Tape::NodeId g_forward(Tape& tape, const ParamIds& ids, const ModelConfig& cfg,
                       Tape::NodeId grid, const std::vector<int32_t>& actions);
// h_phi / value: dense on [F_s;F_c(;emb)] -> scalar per row
Tape::NodeId h_forward(Tape& tape, const ParamIds& ids, Tape::NodeId h_input);

// attaches the embedding channels when enabled; returns the grid node to
// feed forward and, for h inputs, the concatenated node
Tape::NodeId attach_grid_embedding(Tape& tape, const ModelBundle& bundle,
                                   const ParamIds& emb_ids, Tape::NodeId grid,
                                   const std::vector<SampleRef>& samples,
                                   const std::vector<uint8_t>& cell_valid);
Tape::NodeId attach_h_embedding(Tape& tape, const ModelBundle& bundle,
                                const ParamIds& emb_ids, Tape::NodeId h_static,
                                const std::vector<SampleRef>& samples);

// --- plain (no-gradient) convenience evaluation ---

std::array<double, kNumDirections> policy_probs(const ModelBundle& bundle,
                                                const FeatureCache& cache,
                                                int32_t link,
                                                const Context& ctx);
double value_forward(const ModelBundle& bundle, const FeatureCache& cache,
                     int32_t link, const Context& ctx);
// f = g(s,a|c) + gamma h(s'|c) - h(s|c)
inline double combine_f(double g, double h_cur, double h_next, double gamma) {
  return g + gamma * h_next - h_cur;
}
double discriminator_f(const ModelBundle& bundle, const FeatureCache& cache,
                       int32_t link, int action, const Context& ctx);

struct DiscOut {
  double d;       // exp(f) / (exp(f) + pi)
  double reward;  // log D - log(1-D) = f - log pi
};
DiscOut discriminator_prob_and_reward(double f, double pi_prob);

// GAIL surrogate: D = sigmoid(g), reward = -log(1-D) = softplus(g)
double gail_reward_from_g(double g);
double gail_reward(const ModelBundle& bundle, const FeatureCache& cache,
                   int32_t link, int action, const Context& ctx);

// ActionPolicy adapter over a bundle's generator.
class BundlePolicy final : public ActionPolicy {
 public:
  BundlePolicy(const ModelBundle& bundle, const FeatureCache& cache)
      : bundle_(&bundle), cache_(&cache) {}
  std::array<double, kNumDirections> action_probs(
      int32_t link, const Context& ctx) const override {
    return policy_probs(*bundle_, *cache_, link, ctx);
  }

 private:
  const ModelBundle* bundle_;
  const FeatureCache* cache_;
};

// checkpoint.* persistence: flat-text parameter records plus a JSON
// manifest carrying the feature dims, gamma and embedding switch.
void save_bundle(const std::string& params_path,
                 const std::string& manifest_path, const ModelBundle& bundle,
                 ModelKind kind);
struct LoadedBundle {
  ModelBundle bundle;
  ModelKind kind;
};
LoadedBundle load_bundle(const std::string& params_path,
                         const std::string& manifest_path);

// Raises SpecError naming the mismatching manifest fields when a checkpoint
// does not fit the current feature setup.
void check_bundle_compatible(const ModelBundle& bundle,
                             const FeatureCache& cache);

}  // namespace rcm
