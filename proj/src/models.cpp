#include "rcm/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace rcm {

const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::airl: return "airl";
    case ModelKind::bc: return "bc";
    case ModelKind::gail: return "gail";
    case ModelKind::rl: return "rl";
    case ModelKind::psl: return "psl";
    case ModelKind::dnnpsl: return "dnnpsl";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& s) {
  for (ModelKind k : {ModelKind::airl, ModelKind::bc, ModelKind::gail,
                      ModelKind::rl, ModelKind::psl, ModelKind::dnnpsl})
    if (s == model_kind_name(k)) return k;
  throw SpecError("unknown model kind '" + s + "'");
}

namespace {

void add_conv_stack(ParamSet& p, const ModelConfig& cfg, std::mt19937_64& rng) {
  const size_t gc = static_cast<size_t>(cfg.grid_channels());
  const size_t k1 = cfg.conv1_kernel == 2 ? 4 : 9;
  p.add("conv1.w", {static_cast<size_t>(cfg.conv1_channels), k1 * gc}, k1 * gc,
        rng);
  p.add("conv1.b", {static_cast<size_t>(cfg.conv1_channels)}, k1 * gc, rng);
  const size_t k2in = 4 * static_cast<size_t>(cfg.conv1_channels);
  p.add("conv2.w", {static_cast<size_t>(cfg.conv2_channels), k2in}, k2in, rng);
  p.add("conv2.b", {static_cast<size_t>(cfg.conv2_channels)}, k2in, rng);
}

void add_dense_head(ParamSet& p, size_t in, size_t hidden, size_t out,
                    std::mt19937_64& rng) {
  p.add("fc1.w", {in, hidden}, in, rng);
  p.add("fc1.b", {hidden}, in, rng);
  p.add("fc2.w", {hidden, out}, hidden, rng);
  p.add("fc2.b", {out}, hidden, rng);
}

}  // namespace

ModelBundle ModelBundle::init(const ModelConfig& cfg, uint64_t seed,
                              bool policy_only) {
  ModelBundle b;
  b.cfg = cfg;
  {
    std::mt19937_64 rng(derive_seed(seed, "policy"));
    add_conv_stack(b.policy, cfg, rng);
    add_dense_head(b.policy, static_cast<size_t>(cfg.latent_dim()),
                   static_cast<size_t>(cfg.hidden), kNumDirections, rng);
  }
  if (!policy_only) {
    {
      std::mt19937_64 rng(derive_seed(seed, "disc_g"));
      add_conv_stack(b.disc_g, cfg, rng);
      add_dense_head(b.disc_g,
                     static_cast<size_t>(cfg.latent_dim()) + kNumDirections,
                     static_cast<size_t>(cfg.hidden), 1, rng);
    }
    {
      std::mt19937_64 rng(derive_seed(seed, "disc_h"));
      add_dense_head(b.disc_h, static_cast<size_t>(cfg.h_input_dim()),
                     static_cast<size_t>(cfg.hidden), 1, rng);
    }
    {
      std::mt19937_64 rng(derive_seed(seed, "value"));
      add_dense_head(b.value, static_cast<size_t>(cfg.h_input_dim()),
                     static_cast<size_t>(cfg.hidden), 1, rng);
    }
  }
  if (cfg.embed_dim > 0) {
    if (cfg.n_agents <= 0)
      throw SpecError("agent embeddings enabled but n_agents is 0");
    std::mt19937_64 rng(derive_seed(seed, "embedding"));
    b.embedding.add("table",
                    {static_cast<size_t>(cfg.n_agents),
                     static_cast<size_t>(cfg.embed_dim)},
                    static_cast<size_t>(cfg.embed_dim), rng);
  }
  return b;
}

Tensor assemble_grid_batch(const FeatureCache& cache, const ModelConfig& cfg,
                           const std::vector<SampleRef>& samples) {
  const size_t B = samples.size();
  const size_t ch = static_cast<size_t>(cfg.grid_channels());
  const size_t ch_static = static_cast<size_t>(cache.grid_channels());
  const size_t h = ch_static - 1;  // features before the validity channel
  Tensor out = Tensor::zeros({B, 3, 3, ch});
  for (size_t i = 0; i < B; ++i) {
    const double* src = cache.grid_ptr(static_cast<size_t>(samples[i].state),
                                       static_cast<size_t>(samples[i].dest));
    double* dst = &out.data[i * 9 * ch];
    for (int cell = 0; cell < 9; ++cell) {
      std::memcpy(dst + cell * ch, src + cell * ch_static, h * sizeof(double));
      dst[cell * ch + ch - 1] = src[cell * ch_static + ch_static - 1];
    }
  }
  return out;
}

std::vector<uint8_t> assemble_cell_valid(
    const FeatureCache& cache, const std::vector<SampleRef>& samples) {
  std::vector<uint8_t> out(samples.size() * 9);
  for (size_t i = 0; i < samples.size(); ++i)
    std::memcpy(&out[i * 9],
                cache.grid_valid_ptr(static_cast<size_t>(samples[i].state),
                                     static_cast<size_t>(samples[i].dest)),
                9);
  return out;
}

std::vector<uint8_t> assemble_action_mask(
    const FeatureCache& cache, const std::vector<SampleRef>& samples) {
  std::vector<uint8_t> out(samples.size() * kNumDirections);
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto m = cache.action_mask(static_cast<size_t>(samples[i].state),
                                     static_cast<size_t>(samples[i].dest));
    std::memcpy(&out[i * kNumDirections], m.data(), kNumDirections);
  }
  return out;
}

Tensor assemble_h_batch(const FeatureCache& cache, const ModelConfig& cfg,
                        const std::vector<SampleRef>& samples) {
  const size_t B = samples.size();
  const size_t w = static_cast<size_t>(cfg.h_input_dim());
  const size_t hd = static_cast<size_t>(cache.h_dim());
  Tensor out = Tensor::zeros({B, w});
  for (size_t i = 0; i < B; ++i) {
    const double* f = cache.h_ptr(static_cast<size_t>(samples[i].state),
                                  static_cast<size_t>(samples[i].dest));
    std::copy(f, f + hd, out.data.begin() + i * w);
  }
  return out;
}

std::vector<int32_t> agent_rows(const ModelConfig& cfg,
                                const std::vector<SampleRef>& samples) {
  std::vector<int32_t> out(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].agent < 0 || samples[i].agent >= cfg.n_agents)
      throw ContractError(
          "sample without a valid agent id while embeddings are enabled");
    out[i] = samples[i].agent;
  }
  return out;
}

Tape::NodeId conv_stack_forward(Tape& tape, const ParamIds& ids,
                                const ModelConfig& cfg, Tape::NodeId grid) {
  Tape::NodeId a;
  if (cfg.conv1_kernel == 2)
    a = tape.conv2x2(grid, ids.at("conv1.w"), ids.at("conv1.b"));
  else
    a = tape.conv3x3_same(grid, ids.at("conv1.w"), ids.at("conv1.b"));
  a = tape.relu(a);
  a = tape.conv2x2(a, ids.at("conv2.w"), ids.at("conv2.b"));
  a = tape.relu(a);
  const size_t B = tape.val(grid).shape[0];
  return tape.reshape(a, {B, static_cast<size_t>(cfg.latent_dim())});
}

Tape::NodeId dense_head(Tape& tape, const ParamIds& ids, Tape::NodeId x) {
  Tape::NodeId a =
      tape.add_row(tape.matmul(x, ids.at("fc1.w")), ids.at("fc1.b"));
  a = tape.relu(a);
  return tape.add_row(tape.matmul(a, ids.at("fc2.w")), ids.at("fc2.b"));
}

Tape::NodeId policy_forward(Tape& tape, const ParamIds& ids,
                            const ModelConfig& cfg, Tape::NodeId grid,
                            std::vector<uint8_t> mask) {
  Tape::NodeId latent = conv_stack_forward(tape, ids, cfg, grid);
  Tape::NodeId logits = dense_head(tape, ids, latent);
  return tape.masked_log_softmax(logits, std::move(mask));
}

Tape::NodeId g_forward(Tape& tape, const ParamIds& ids, const ModelConfig& cfg,
                       Tape::NodeId grid,
                       const std::vector<int32_t>& actions) {
  const size_t B = tape.val(grid).shape[0];
  Tensor onehot = Tensor::zeros({B, kNumDirections});
  for (size_t i = 0; i < B; ++i) {
    if (actions[i] < 0 || actions[i] >= kNumDirections)
      throw ContractError("g_forward: invalid action");
    onehot.data[i * kNumDirections + static_cast<size_t>(actions[i])] = 1.0;
  }
  Tape::NodeId latent = conv_stack_forward(tape, ids, cfg, grid);
  Tape::NodeId x = tape.concat_cols(latent, tape.input(std::move(onehot)));
  Tape::NodeId out = dense_head(tape, ids, x);
  return tape.reshape(out, {B});
}

Tape::NodeId h_forward(Tape& tape, const ParamIds& ids, Tape::NodeId h_input) {
  const size_t B = tape.val(h_input).shape[0];
  return tape.reshape(dense_head(tape, ids, h_input), {B});
}

Tape::NodeId attach_grid_embedding(Tape& tape, const ModelBundle& bundle,
                                   const ParamIds& emb_ids, Tape::NodeId grid,
                                   const std::vector<SampleRef>& samples,
                                   const std::vector<uint8_t>& cell_valid) {
  if (bundle.cfg.embed_dim == 0) return grid;
  Tape::NodeId rows =
      tape.gather_rows(emb_ids.at("table"), agent_rows(bundle.cfg, samples));
  const size_t off =
      static_cast<size_t>(bundle.cfg.state_dim + bundle.cfg.context_dim);
  return tape.add_cell_channels(grid, rows, off, cell_valid);
}

Tape::NodeId attach_h_embedding(Tape& tape, const ModelBundle& bundle,
                                const ParamIds& emb_ids, Tape::NodeId h_static,
                                const std::vector<SampleRef>& samples) {
  if (bundle.cfg.embed_dim == 0) return h_static;
  Tape::NodeId rows =
      tape.gather_rows(emb_ids.at("table"), agent_rows(bundle.cfg, samples));
  return tape.concat_cols(h_static, rows);
}

namespace {
std::vector<SampleRef> one_sample(int32_t link, const Context& ctx) {
  return {SampleRef{link, ctx.dest_idx, ctx.agent}};
}
}  // namespace

std::array<double, kNumDirections> policy_probs(const ModelBundle& bundle,
                                                const FeatureCache& cache,
                                                int32_t link,
                                                const Context& ctx) {
  Tape tape;
  auto samples = one_sample(link, ctx);
  ParamIds ids = bundle.policy.lease(tape);
  Tape::NodeId grid =
      tape.input(assemble_grid_batch(cache, bundle.cfg, samples));
  if (bundle.cfg.embed_dim > 0) {
    ParamIds emb = bundle.embedding.lease(tape);
    grid = attach_grid_embedding(tape, bundle, emb, grid, samples,
                                 assemble_cell_valid(cache, samples));
  }
  Tape::NodeId logp = policy_forward(tape, ids, bundle.cfg, grid,
                                     assemble_action_mask(cache, samples));
  std::array<double, kNumDirections> probs{};
  const Tensor& lp = tape.val(logp);
  for (int d = 0; d < kNumDirections; ++d)
    probs[d] = lp.data[d] <= -1e29 ? 0.0 : std::exp(lp.data[d]);
  return probs;
}

double value_forward(const ModelBundle& bundle, const FeatureCache& cache,
                     int32_t link, const Context& ctx) {
  Tape tape;
  auto samples = one_sample(link, ctx);
  ParamIds ids = bundle.value.lease(tape);
  Tape::NodeId h = tape.input(assemble_h_batch(cache, bundle.cfg, samples));
  if (bundle.cfg.embed_dim > 0) {
    ParamIds emb = bundle.embedding.lease(tape);
    h = attach_h_embedding(tape, bundle, emb, h, samples);
  }
  return tape.val(h_forward(tape, ids, h)).data[0];
}

double discriminator_f(const ModelBundle& bundle, const FeatureCache& cache,
                       int32_t link, int action, const Context& ctx) {
  const int32_t next = step(cache.action_table(), link, action);
  Tape tape;
  auto s_cur = one_sample(link, ctx);
  auto s_next = one_sample(next, ctx);
  ParamIds gid = bundle.disc_g.lease(tape);
  ParamIds hid = bundle.disc_h.lease(tape);
  ParamIds emb;
  if (bundle.cfg.embed_dim > 0) emb = bundle.embedding.lease(tape);
  Tape::NodeId grid =
      tape.input(assemble_grid_batch(cache, bundle.cfg, s_cur));
  grid = attach_grid_embedding(tape, bundle, emb, grid, s_cur,
                               assemble_cell_valid(cache, s_cur));
  Tape::NodeId g = g_forward(tape, gid, bundle.cfg, grid, {action});
  Tape::NodeId hc = tape.input(assemble_h_batch(cache, bundle.cfg, s_cur));
  hc = attach_h_embedding(tape, bundle, emb, hc, s_cur);
  Tape::NodeId hn = tape.input(assemble_h_batch(cache, bundle.cfg, s_next));
  hn = attach_h_embedding(tape, bundle, emb, hn, s_next);
  const double gv = tape.val(g).data[0];
  const double hcv = tape.val(h_forward(tape, hid, hc)).data[0];
  const double hnv = tape.val(h_forward(tape, hid, hn)).data[0];
  return combine_f(gv, hcv, hnv, bundle.cfg.gamma);
}

DiscOut discriminator_prob_and_reward(double f, double pi_prob) {
  if (!(pi_prob > 0.0))
    throw ContractError(
        "discriminator saw pi=0: masked action leaked into batch");
  const double log_pi = std::log(pi_prob);
  const double hi = std::max(f, log_pi);
  const double lse = hi + std::log(std::exp(f - hi) + std::exp(log_pi - hi));
  DiscOut out;
  out.d = std::exp(f - lse);
  out.reward = (f - lse) - (log_pi - lse);
  return out;
}

double gail_reward_from_g(double g) {
  // softplus(g), stable on both tails
  return g > 0.0 ? g + std::log1p(std::exp(-g)) : std::log1p(std::exp(g));
}

double gail_reward(const ModelBundle& bundle, const FeatureCache& cache,
                   int32_t link, int action, const Context& ctx) {
  step(cache.action_table(), link, action);  // validates the action
  Tape tape;
  auto samples = one_sample(link, ctx);
  ParamIds gid = bundle.disc_g.lease(tape);
  ParamIds emb;
  if (bundle.cfg.embed_dim > 0) emb = bundle.embedding.lease(tape);
  Tape::NodeId grid =
      tape.input(assemble_grid_batch(cache, bundle.cfg, samples));
  grid = attach_grid_embedding(tape, bundle, emb, grid, samples,
                               assemble_cell_valid(cache, samples));
  Tape::NodeId g = g_forward(tape, gid, bundle.cfg, grid, {action});
  return gail_reward_from_g(tape.val(g).data[0]);
}

void save_bundle(const std::string& params_path,
                 const std::string& manifest_path, const ModelBundle& bundle,
                 ModelKind kind) {
  std::ofstream os(params_path);
  if (!os) throw LoadError("cannot write " + params_path);
  write_params(os, bundle.policy, "policy.");
  write_params(os, bundle.disc_g, "disc_g.");
  write_params(os, bundle.disc_h, "disc_h.");
  write_params(os, bundle.value, "value.");
  write_params(os, bundle.embedding, "embedding.");

  nlohmann::json m;
  m["kind"] = model_kind_name(kind);
  m["gamma"] = bundle.cfg.gamma;
  m["state_dim"] = bundle.cfg.state_dim;
  m["context_dim"] = bundle.cfg.context_dim;
  m["embed_dim"] = bundle.cfg.embed_dim;
  m["n_agents"] = bundle.cfg.n_agents;
  m["conv1_channels"] = bundle.cfg.conv1_channels;
  m["conv2_channels"] = bundle.cfg.conv2_channels;
  m["conv1_kernel"] = bundle.cfg.conv1_kernel;
  m["hidden"] = bundle.cfg.hidden;
  m["scale_m"] = bundle.cfg.scale_m;
  m["embedding_enabled"] = bundle.cfg.embed_dim > 0;
  std::ofstream ms(manifest_path);
  if (!ms) throw LoadError("cannot write " + manifest_path);
  ms << m.dump(2) << '\n';
}

LoadedBundle load_bundle(const std::string& params_path,
                         const std::string& manifest_path) {
  std::ifstream ms(manifest_path);
  if (!ms) throw LoadError("cannot read " + manifest_path);
  nlohmann::json m = nlohmann::json::parse(ms);
  LoadedBundle out;
  out.kind = parse_model_kind(m.at("kind").get<std::string>());
  ModelConfig& cfg = out.bundle.cfg;
  cfg.gamma = m.at("gamma").get<double>();
  cfg.state_dim = m.at("state_dim").get<int>();
  cfg.context_dim = m.at("context_dim").get<int>();
  cfg.embed_dim = m.at("embed_dim").get<int>();
  cfg.n_agents = m.at("n_agents").get<int>();
  cfg.conv1_channels = m.at("conv1_channels").get<int>();
  cfg.conv2_channels = m.at("conv2_channels").get<int>();
  cfg.conv1_kernel = m.at("conv1_kernel").get<int>();
  cfg.hidden = m.at("hidden").get<int>();
  cfg.scale_m = m.at("scale_m").get<double>();

  std::ifstream is(params_path);
  if (!is) throw LoadError("cannot read " + params_path);
  std::string line;
  std::vector<std::string> sections[5];
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    if (line.rfind("policy.", 0) == 0)
      sections[0].push_back(line);
    else if (line.rfind("disc_g.", 0) == 0)
      sections[1].push_back(line);
    else if (line.rfind("disc_h.", 0) == 0)
      sections[2].push_back(line);
    else if (line.rfind("value.", 0) == 0)
      sections[3].push_back(line);
    else if (line.rfind("embedding.", 0) == 0)
      sections[4].push_back(line);
    else
      throw ParseError("checkpoint record with unknown section: " + line);
  }
  ParamSet* sets[5] = {&out.bundle.policy, &out.bundle.disc_g,
                       &out.bundle.disc_h, &out.bundle.value,
                       &out.bundle.embedding};
  const char* prefixes[5] = {"policy.", "disc_g.", "disc_h.", "value.",
                             "embedding."};
  for (int i = 0; i < 5; ++i) {
    std::string joined;
    for (const auto& l : sections[i]) joined += l + "\n";
    std::istringstream ss(joined);
    read_params(ss, *sets[i], prefixes[i]);
  }
  return out;
}

void check_bundle_compatible(const ModelBundle& bundle,
                             const FeatureCache& cache) {
  std::string bad;
  if (bundle.cfg.context_dim != cache.context_dim())
    bad += " context_dim(checkpoint=" +
           std::to_string(bundle.cfg.context_dim) +
           ", features=" + std::to_string(cache.context_dim()) + ")";
  if (bundle.cfg.state_dim != kStateFeatureDim)
    bad += " state_dim(checkpoint=" + std::to_string(bundle.cfg.state_dim) +
           ", features=" + std::to_string(kStateFeatureDim) + ")";
  if (bundle.cfg.scale_m != cache.config().scale_m)
    bad += " scale_m(checkpoint=" + format_double(bundle.cfg.scale_m) +
           ", features=" + format_double(cache.config().scale_m) + ")";
  if (!bad.empty())
    throw SpecError("checkpoint does not match the feature setup:" + bad);
}

}  // namespace rcm
