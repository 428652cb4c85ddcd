#include "rcm/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace rcm {

namespace {

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

size_t bounded(std::mt19937_64& rng, size_t n) { return rng() % n; }

void fisher_yates(std::vector<size_t>& idx, std::mt19937_64& rng) {
  for (size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[bounded(rng, i)]);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  const std::string where = "config key " + key;
  if (key == "iterations") iterations = static_cast<int>(parse_int(value, where));
  else if (key == "samples_per_iter") samples_per_iter = static_cast<int>(parse_int(value, where));
  else if (key == "disc_updates") disc_updates = static_cast<int>(parse_int(value, where));
  else if (key == "ppo_epochs") ppo_epochs = static_cast<int>(parse_int(value, where));
  else if (key == "ppo_minibatch") ppo_minibatch = static_cast<int>(parse_int(value, where));
  else if (key == "clip_eps") clip_eps = parse_double(value, where);
  else if (key == "gamma") gamma = parse_double(value, where);
  else if (key == "gae_lambda") gae_lambda = parse_double(value, where);
  else if (key == "learning_rate") learning_rate = parse_double(value, where);
  else if (key == "seed") seed = static_cast<uint64_t>(parse_int(value, where));
  else if (key == "conv1_kernel") conv1_kernel = static_cast<int>(parse_int(value, where));
  else if (key == "dest_features") dest_features = parse_int(value, where) != 0;
  else if (key == "embed_dim") embed_dim = static_cast<int>(parse_int(value, where));
  else if (key == "scale_m") scale_m = parse_double(value, where);
  else if (key == "progress") progress = parse_int(value, where) != 0;
  else throw SpecError("unknown config key '" + key + "'");
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "iterations=" << iterations << "\n"
     << "samples_per_iter=" << samples_per_iter << "\n"
     << "disc_updates=" << disc_updates << "\n"
     << "ppo_epochs=" << ppo_epochs << "\n"
     << "ppo_minibatch=" << ppo_minibatch << "\n"
     << "clip_eps=" << format_double(clip_eps) << "\n"
     << "gamma=" << format_double(gamma) << "\n"
     << "gae_lambda=" << format_double(gae_lambda) << "\n"
     << "learning_rate=" << format_double(learning_rate) << "\n"
     << "seed=" << seed << "\n"
     << "conv1_kernel=" << conv1_kernel << "\n"
     << "dest_features=" << (dest_features ? 1 : 0) << "\n"
     << "embed_dim=" << embed_dim << "\n"
     << "scale_m=" << format_double(scale_m) << "\n";
  return os.str();
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot read config " + path);
  TrainConfig cfg;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto pos = t.find('=');
    if (pos == std::string::npos)
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": expected key=value");
    cfg.set(trim(t.substr(0, pos)), trim(t.substr(pos + 1)));
  }
  return cfg;
}

void save_train_config(const std::string& path, const TrainConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write config " + path);
  os << cfg.to_text();
}

int default_iterations(size_t n_train_trips) {
  if (n_train_trips < 1000) return 1000;
  if (n_train_trips < 10000) return 2000;
  return 3000;
}

GaeResult compute_gae(const std::vector<double>& rewards,
                      const std::vector<double>& values, bool terminal,
                      double bootstrap_value, double gamma, double lambda) {
  if (rewards.size() != values.size())
    throw ContractError("compute_gae: rewards/values length mismatch");
  const size_t T = rewards.size();
  GaeResult out;
  out.advantages.assign(T, 0.0);
  out.returns.assign(T, 0.0);
  double next_adv = 0.0;
  for (size_t i = T; i-- > 0;) {
    const double v_next =
        i + 1 < T ? values[i + 1] : (terminal ? 0.0 : bootstrap_value);
    const double delta = rewards[i] + gamma * v_next - values[i];
    const double adv =
        i + 1 < T ? delta + gamma * lambda * next_adv : delta;
    out.advantages[i] = adv;
    out.returns[i] = adv + values[i];
    next_adv = adv;
  }
  return out;
}

double ppo_surrogate(const std::vector<double>& new_log_probs,
                     const std::vector<double>& old_log_probs,
                     const std::vector<double>& advantages, double eps) {
  if (new_log_probs.size() != old_log_probs.size() ||
      new_log_probs.size() != advantages.size())
    throw ContractError("ppo_surrogate: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < new_log_probs.size(); ++i) {
    const double r = std::exp(new_log_probs[i] - old_log_probs[i]);
    if (!std::isfinite(r)) throw NumericsError("non-finite PPO ratio");
    const double clipped = std::min(1.0 + eps, std::max(1.0 - eps, r));
    acc += std::min(r * advantages[i], clipped * advantages[i]);
  }
  return acc / static_cast<double>(new_log_probs.size());
}

void write_training_log(const std::string& path,
                        const std::vector<LogRow>& rows) {
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write log " + path);
  os << "iter,L_D,mean_R,completion_rate,mean_len,ppo_loss,value_loss\n";
  for (const auto& r : rows)
    os << r.iter << ',' << format_double(r.disc_loss) << ','
       << format_double(r.mean_reward) << ','
       << format_double(r.completion_rate) << ',' << format_double(r.mean_len)
       << ',' << format_double(r.ppo_loss) << ','
       << format_double(r.value_loss) << '\n';
}

Tape::NodeId adversarial_f_node(Tape& tape, const ModelBundle& bundle,
                                const ParamIds& gid, const ParamIds& hid,
                                const ParamIds& emb, const FeatureCache& cache,
                                const std::vector<SampleRef>& refs,
                                const std::vector<int32_t>& actions,
                                bool airl) {
  if (refs.empty()) throw ContractError("discriminator batch is empty");
  const ActionTable& at = cache.action_table();
  Tape::NodeId grid = tape.input(assemble_grid_batch(cache, bundle.cfg, refs));
  grid = attach_grid_embedding(tape, bundle, emb, grid, refs,
                               assemble_cell_valid(cache, refs));
  Tape::NodeId g = g_forward(tape, gid, bundle.cfg, grid, actions);
  if (!airl) return g;
  std::vector<SampleRef> next_refs = refs;
  for (size_t i = 0; i < refs.size(); ++i)
    next_refs[i].state =
        at.next(static_cast<size_t>(refs[i].state), actions[i]);
  Tape::NodeId hc = tape.input(assemble_h_batch(cache, bundle.cfg, refs));
  hc = attach_h_embedding(tape, bundle, emb, hc, refs);
  Tape::NodeId hn = tape.input(assemble_h_batch(cache, bundle.cfg, next_refs));
  hn = attach_h_embedding(tape, bundle, emb, hn, next_refs);
  return tape.add(
      g, tape.sub(tape.scale(h_forward(tape, hid, hn), bundle.cfg.gamma),
                  h_forward(tape, hid, hc)));
}

Tape::NodeId disc_loss_node(Tape& tape, Tape::NodeId f_real,
                            std::vector<double> logpi_real, Tape::NodeId f_gen,
                            std::vector<double> logpi_gen, bool airl) {
  if (tape.val(f_real).size() == 0 || tape.val(f_gen).size() == 0)
    throw ContractError("discriminator update needs both classes");
  if (!airl) {
    logpi_real.assign(tape.val(f_real).size(), 0.0);
    logpi_gen.assign(tape.val(f_gen).size(), 0.0);
  }
  Tape::NodeId lse_real = tape.logaddexp_constvec(f_real, logpi_real);
  Tape::NodeId log_d_real = tape.sub(f_real, lse_real);
  Tape::NodeId lse_gen = tape.logaddexp_constvec(f_gen, logpi_gen);
  Tape::NodeId log_1md_gen =
      airl ? tape.constvec_minus(std::move(logpi_gen), lse_gen)
           : tape.scale(lse_gen, -1.0);
  return tape.add(tape.scale(tape.mean_all(log_d_real), -1.0),
                  tape.scale(tape.mean_all(log_1md_gen), -1.0));
}

namespace {

ModelConfig model_config_for(const TrainConfig& cfg,
                             const TrajectoryDataset& data,
                             const FeatureCache& cache) {
  if (cache.config().dest_features != cfg.dest_features)
    throw SpecError("feature cache dest_features does not match config");
  if (cache.config().scale_m != cfg.scale_m)
    throw SpecError("feature cache scale does not match config");
  ModelConfig mc;
  mc.context_dim = cache.context_dim();
  mc.embed_dim = cfg.embed_dim;
  mc.n_agents = cfg.embed_dim > 0 ? static_cast<int>(data.n_agents()) : 0;
  mc.conv1_kernel = cfg.conv1_kernel;
  mc.gamma = cfg.gamma;
  mc.scale_m = cfg.scale_m;
  return mc;
}

std::vector<SampleRef> refs_of_steps(const std::vector<RolloutStep>& steps,
                                     const std::vector<size_t>& idx) {
  std::vector<SampleRef> out;
  out.reserve(idx.size());
  for (size_t i : idx)
    out.push_back(SampleRef{steps[i].state, steps[i].dest, steps[i].agent});
  return out;
}

// batched no-grad value evaluation
std::vector<double> eval_values(const ModelBundle& bundle,
                                const FeatureCache& cache,
                                const std::vector<SampleRef>& samples) {
  if (samples.empty()) return {};
  Tape tape;
  ParamIds ids = bundle.value.lease(tape);
  ParamIds emb;
  if (bundle.cfg.embed_dim > 0) emb = bundle.embedding.lease(tape);
  Tape::NodeId h = tape.input(assemble_h_batch(cache, bundle.cfg, samples));
  h = attach_h_embedding(tape, bundle, emb, h, samples);
  const Tensor& v = tape.val(h_forward(tape, ids, h));
  return v.data;
}

// batched no-grad masked log-prob rows
Tensor eval_policy_logp(const ModelBundle& bundle, const FeatureCache& cache,
                        const std::vector<SampleRef>& samples) {
  Tape tape;
  ParamIds ids = bundle.policy.lease(tape);
  ParamIds emb;
  if (bundle.cfg.embed_dim > 0) emb = bundle.embedding.lease(tape);
  Tape::NodeId grid =
      tape.input(assemble_grid_batch(cache, bundle.cfg, samples));
  grid = attach_grid_embedding(tape, bundle, emb, grid, samples,
                               assemble_cell_valid(cache, samples));
  Tape::NodeId lp = policy_forward(tape, ids, bundle.cfg, grid,
                                   assemble_action_mask(cache, samples));
  return tape.val(lp);
}

// Generates whole trajectories from the frozen policy until at least
// `target` state-action samples are collected. Each trajectory owns an rng
// derived from (iter_seed, trajectory counter) so wave batching cannot
// change the data.
RolloutBatch generate_rollouts(const ModelBundle& bundle,
                               const FeatureCache& cache,
                               const OdSampler& sampler, int target,
                               uint64_t iter_seed) {
  const ActionTable& at = cache.action_table();
  RolloutBatch batch;
  batch.steps.reserve(static_cast<size_t>(target) + 64);
  int32_t traj_counter = 0;
  constexpr int kWave = 256;

  struct Slot {
    std::mt19937_64 rng;
    Context ctx;
    int32_t cur;
    int steps_taken = 0;
    int max_steps = 0;
    std::vector<RolloutStep> local;
  };

  while (batch.steps.size() < static_cast<size_t>(target)) {
    std::vector<Slot> wave;
    for (int k = 0; k < kWave; ++k) {
      Slot s;
      s.rng.seed(derive_seed(iter_seed, static_cast<uint64_t>(traj_counter)));
      ++traj_counter;
      auto [o, d] = sampler.sample(s.rng);
      s.ctx.dest_idx = d;
      s.cur = o;
      const auto& t = cache.dest_table(static_cast<size_t>(d));
      s.max_steps = default_max_steps(t.metrics[static_cast<size_t>(o)].n_links);
      wave.push_back(std::move(s));
    }
    std::vector<size_t> active(wave.size());
    for (size_t i = 0; i < wave.size(); ++i) active[i] = i;
    struct Pending {
      size_t slot;
      int32_t next_state;
    };
    std::vector<Pending> truncated;
    std::vector<uint8_t> complete(wave.size(), 0);

    while (!active.empty()) {
      std::vector<SampleRef> refs;
      refs.reserve(active.size());
      for (size_t i : active)
        refs.push_back(
            SampleRef{wave[i].cur, wave[i].ctx.dest_idx, wave[i].ctx.agent});
      const Tensor logp = eval_policy_logp(bundle, cache, refs);
      const std::vector<double> vals = eval_values(bundle, cache, refs);

      std::vector<size_t> still;
      for (size_t row = 0; row < active.size(); ++row) {
        Slot& s = wave[active[row]];
        const double* lp = &logp.data[row * kNumDirections];
        double u = uniform01(s.rng);
        int chosen = -1;
        for (int d = 0; d < kNumDirections; ++d) {
          if (lp[d] <= -1e29) continue;
          u -= std::exp(lp[d]);
          chosen = d;
          if (u <= 0.0) break;
        }
        if (chosen < 0)
          throw ContractError("policy produced an empty action distribution");
        const int32_t next = at.next(static_cast<size_t>(s.cur), chosen);
        s.local.push_back(RolloutStep{s.cur, static_cast<int8_t>(chosen),
                                      s.ctx.dest_idx, s.ctx.agent, lp[chosen],
                                      0.0, vals[row], 0.0, 0.0});
        s.cur = next;
        ++s.steps_taken;
        if (next == s.ctx.dest_idx) {
          complete[active[row]] = 1;
        } else if (s.steps_taken >= s.max_steps) {
          truncated.push_back(Pending{active[row], next});
        } else {
          still.push_back(active[row]);
        }
      }
      active = std::move(still);
    }

    std::vector<double> boot(wave.size(), 0.0);
    if (!truncated.empty()) {
      std::vector<SampleRef> refs;
      for (const auto& p : truncated)
        refs.push_back(SampleRef{p.next_state, wave[p.slot].ctx.dest_idx,
                                 wave[p.slot].ctx.agent});
      const std::vector<double> v = eval_values(bundle, cache, refs);
      for (size_t i = 0; i < truncated.size(); ++i)
        boot[truncated[i].slot] = v[i];
    }
    for (size_t i = 0; i < wave.size(); ++i) {
      RolloutTrajSlice slice;
      slice.begin = batch.steps.size();
      for (const auto& st : wave[i].local) batch.steps.push_back(st);
      slice.end = batch.steps.size();
      slice.complete = complete[i] != 0;
      slice.bootstrap_value = boot[i];
      batch.trajs.push_back(slice);
    }
  }
  return batch;
}

struct AdversarialKind {
  bool airl;  // false = GAIL
};

TrainResult train_adversarial(const TrainConfig& cfg,
                              const TrajectoryDataset& data,
                              const FeatureCache& cache,
                              AdversarialKind kind) {
  if (data.triplets().empty()) throw ContractError("empty training dataset");
  const ModelConfig mc = model_config_for(cfg, data, cache);
  TrainResult res;
  res.bundle = ModelBundle::init(mc, derive_seed(cfg.seed, "init"));
  ModelBundle& bundle = res.bundle;
  const AdamConfig adam{cfg.learning_rate, 0.9, 0.999, 1e-8};
  const OdSampler sampler = make_dataset_od_sampler(data);
  const auto& real = data.triplets();

  int zero_completion_run = 0;
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const uint64_t iter_seed = derive_seed(cfg.seed, 1000003ULL + iter);
    std::mt19937_64 rng(derive_seed(iter_seed, "iter-rng"));

    // generated samples from the frozen policy
    RolloutBatch gen = generate_rollouts(bundle, cache, sampler,
                                         cfg.samples_per_iter,
                                         derive_seed(iter_seed, "rollouts"));

    // matched batch of actual data for class balance
    std::vector<SampleRef> real_refs;
    std::vector<int32_t> real_actions;
    real_refs.reserve(gen.steps.size());
    for (size_t i = 0; i < gen.steps.size(); ++i) {
      const Triplet& t = real[bounded(rng, real.size())];
      real_refs.push_back(SampleRef{t.state, t.dest, t.agent});
      real_actions.push_back(t.action);
    }

    // snapshot policy probabilities of the real actions (the pi term of the
    // discriminator)
    std::vector<double> real_logpi(real_refs.size());
    {
      const Tensor lp = eval_policy_logp(bundle, cache, real_refs);
      for (size_t i = 0; i < real_refs.size(); ++i)
        real_logpi[i] =
            lp.data[i * kNumDirections + static_cast<size_t>(real_actions[i])];
    }

    std::vector<SampleRef> gen_refs;
    std::vector<int32_t> gen_actions;
    std::vector<double> gen_logpi(gen.steps.size());
    gen_refs.reserve(gen.steps.size());
    for (size_t i = 0; i < gen.steps.size(); ++i) {
      gen_refs.push_back(
          SampleRef{gen.steps[i].state, gen.steps[i].dest, gen.steps[i].agent});
      gen_actions.push_back(gen.steps[i].action);
      gen_logpi[i] = gen.steps[i].logp_old;
    }

    // discriminator update(s); per-step rewards are read off the first
    // update tape's forward pass, which is exactly the pre-update
    // discriminator
    double mean_reward = 0.0;
    double disc_loss = 0.0;
    for (int du = 0; du < cfg.disc_updates; ++du) {
      Tape tape;
      ParamIds gid = bundle.disc_g.lease(tape);
      ParamIds hid;
      if (kind.airl) hid = bundle.disc_h.lease(tape);
      ParamIds emb;
      if (bundle.cfg.embed_dim > 0) emb = bundle.embedding.lease(tape);
      Tape::NodeId f_real = adversarial_f_node(
          tape, bundle, gid, hid, emb, cache, real_refs, real_actions,
          kind.airl);
      Tape::NodeId f_gen = adversarial_f_node(
          tape, bundle, gid, hid, emb, cache, gen_refs, gen_actions,
          kind.airl);
      if (du == 0) {
        const std::vector<double>& fg = tape.val(f_gen).data;
        for (size_t i = 0; i < gen.steps.size(); ++i) {
          const double r = kind.airl ? fg[i] - gen.steps[i].logp_old
                                     : gail_reward_from_g(fg[i]);
          gen.steps[i].reward = r;
          mean_reward += r;
        }
        mean_reward /= static_cast<double>(gen.steps.size());
      }
      Tape::NodeId loss = disc_loss_node(tape, f_real, real_logpi, f_gen,
                                         gen_logpi, kind.airl);
      disc_loss = tape.val(loss).data[0];
      tape.backward(loss);
      bundle.disc_g.adam_step(tape, gid, adam);
      if (kind.airl) bundle.disc_h.adam_step(tape, hid, adam);
    }

    // GAE per trajectory
    for (const auto& slice : gen.trajs) {
      std::vector<double> rw, vals;
      for (size_t i = slice.begin; i < slice.end; ++i) {
        rw.push_back(gen.steps[i].reward);
        vals.push_back(gen.steps[i].value_old);
      }
      const GaeResult g = compute_gae(rw, vals, slice.complete,
                                      slice.bootstrap_value, cfg.gamma,
                                      cfg.gae_lambda);
      for (size_t i = slice.begin; i < slice.end; ++i) {
        gen.steps[i].advantage = g.advantages[i - slice.begin];
        gen.steps[i].ret = g.returns[i - slice.begin];
      }
    }

    // normalize advantages once per PPO round
    std::vector<double> adv_norm(gen.steps.size());
    {
      double mean = 0.0;
      for (const auto& s : gen.steps) mean += s.advantage;
      mean /= static_cast<double>(gen.steps.size());
      double var = 0.0;
      for (const auto& s : gen.steps) {
        const double d = s.advantage - mean;
        var += d * d;
      }
      const double sd =
          std::sqrt(var / static_cast<double>(gen.steps.size())) + 1e-8;
      for (size_t i = 0; i < gen.steps.size(); ++i)
        adv_norm[i] = (gen.steps[i].advantage - mean) / sd;
    }

    // PPO epochs with value regression alongside
    double ppo_obj_acc = 0.0, value_loss_acc = 0.0;
    size_t mb_count = 0;
    std::vector<size_t> order(gen.steps.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
      fisher_yates(order, rng);
      for (size_t start = 0; start < order.size();
           start += static_cast<size_t>(cfg.ppo_minibatch)) {
        const size_t stop = std::min(
            order.size(), start + static_cast<size_t>(cfg.ppo_minibatch));
        std::vector<size_t> idx(order.begin() + start, order.begin() + stop);
        std::vector<SampleRef> refs = refs_of_steps(gen.steps, idx);
        std::vector<int32_t> actions;
        std::vector<double> old_logp, advs, rets;
        for (size_t i : idx) {
          actions.push_back(gen.steps[i].action);
          old_logp.push_back(gen.steps[i].logp_old);
          advs.push_back(adv_norm[i]);
          rets.push_back(gen.steps[i].ret);
        }
        {
          Tape tape;
          ParamIds pid = bundle.policy.lease(tape);
          ParamIds emb;
          if (bundle.cfg.embed_dim > 0) emb = bundle.embedding.lease(tape);
          Tape::NodeId grid =
              tape.input(assemble_grid_batch(cache, bundle.cfg, refs));
          grid = attach_grid_embedding(tape, bundle, emb, grid, refs,
                                       assemble_cell_valid(cache, refs));
          Tape::NodeId lp = policy_forward(tape, pid, bundle.cfg, grid,
                                           assemble_action_mask(cache, refs));
          Tape::NodeId new_logp = tape.pick(lp, actions);
          Tape::NodeId ratio =
              tape.exp_(tape.sub_constvec(new_logp, old_logp));
          Tape::NodeId t1 = tape.mul_constvec(ratio, advs);
          Tape::NodeId t2 = tape.mul_constvec(
              tape.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), advs);
          Tape::NodeId obj = tape.mean_all(tape.min_(t1, t2));
          Tape::NodeId loss = tape.scale(obj, -1.0);
          ppo_obj_acc += tape.val(obj).data[0];
          tape.backward(loss);
          bundle.policy.adam_step(tape, pid, adam);
          if (bundle.cfg.embed_dim > 0)
            bundle.embedding.adam_step(tape, emb, adam);
        }
        {
          Tape tape;
          ParamIds vid = bundle.value.lease(tape);
          ParamIds emb;
          if (bundle.cfg.embed_dim > 0) emb = bundle.embedding.lease(tape);
          Tape::NodeId h =
              tape.input(assemble_h_batch(cache, bundle.cfg, refs));
          h = attach_h_embedding(tape, bundle, emb, h, refs);
          Tape::NodeId v = h_forward(tape, vid, h);
          Tape::NodeId diff = tape.sub_constvec(v, rets);
          Tape::NodeId loss = tape.mean_all(tape.mul(diff, diff));
          value_loss_acc += tape.val(loss).data[0];
          tape.backward(loss);
          bundle.value.adam_step(tape, vid, adam);
        }
        ++mb_count;
      }
    }

    double completion = 0.0, mean_len = 0.0;
    for (const auto& t : gen.trajs) {
      completion += t.complete ? 1.0 : 0.0;
      mean_len += static_cast<double>(t.end - t.begin);
    }
    completion /= static_cast<double>(gen.trajs.size());
    mean_len /= static_cast<double>(gen.trajs.size());

    res.log.push_back(LogRow{iter, disc_loss, mean_reward, completion,
                             mean_len,
                             ppo_obj_acc / static_cast<double>(mb_count),
                             value_loss_acc / static_cast<double>(mb_count)});
    if (cfg.progress && (iter % 10 == 0 || iter + 1 == cfg.iterations))
      std::cerr << "iter " << iter << " L_D " << disc_loss << " R "
                << mean_reward << " done " << completion << " len "
                << mean_len << std::endl;

    zero_completion_run = completion == 0.0 ? zero_completion_run + 1 : 0;
    if (zero_completion_run >= 50) {
      res.aborted = true;
      res.abort_reason =
          "completion rate was 0 for 50 consecutive iterations (iteration " +
          std::to_string(iter) +
          "): generated rollouts never reach their destinations";
      break;
    }
  }
  return res;
}

}  // namespace

TrainResult train_airl(const TrainConfig& cfg, const TrajectoryDataset& data,
                       const FeatureCache& cache) {
  return train_adversarial(cfg, data, cache, AdversarialKind{true});
}

TrainResult train_gail(const TrainConfig& cfg, const TrajectoryDataset& data,
                       const FeatureCache& cache) {
  return train_adversarial(cfg, data, cache, AdversarialKind{false});
}

TrainResult train_bc(const TrainConfig& cfg, const TrajectoryDataset& data,
                     const FeatureCache& cache) {
  if (data.triplets().empty()) throw ContractError("empty training dataset");
  const ModelConfig mc = model_config_for(cfg, data, cache);
  TrainResult res;
  res.bundle = ModelBundle::init(mc, derive_seed(cfg.seed, "init"),
                                 /*policy_only=*/true);
  ModelBundle& bundle = res.bundle;
  const AdamConfig adam{cfg.learning_rate, 0.9, 0.999, 1e-8};
  const auto& real = data.triplets();

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 2000003ULL + iter));
    double loss_acc = 0.0;
    size_t mb_count = 0;
    for (int start = 0; start < cfg.samples_per_iter;
         start += cfg.ppo_minibatch) {
      const int b =
          std::min(cfg.ppo_minibatch, cfg.samples_per_iter - start);
      std::vector<SampleRef> refs;
      std::vector<int32_t> actions;
      for (int i = 0; i < b; ++i) {
        const Triplet& t = real[bounded(rng, real.size())];
        refs.push_back(SampleRef{t.state, t.dest, t.agent});
        actions.push_back(t.action);
      }
      Tape tape;
      ParamIds pid = bundle.policy.lease(tape);
      ParamIds emb;
      if (bundle.cfg.embed_dim > 0) emb = bundle.embedding.lease(tape);
      Tape::NodeId grid =
          tape.input(assemble_grid_batch(cache, bundle.cfg, refs));
      grid = attach_grid_embedding(tape, bundle, emb, grid, refs,
                                   assemble_cell_valid(cache, refs));
      Tape::NodeId lp = policy_forward(tape, pid, bundle.cfg, grid,
                                       assemble_action_mask(cache, refs));
      Tape::NodeId loss =
          tape.scale(tape.mean_all(tape.pick(lp, actions)), -1.0);
      loss_acc += tape.val(loss).data[0];
      tape.backward(loss);
      bundle.policy.adam_step(tape, pid, adam);
      if (bundle.cfg.embed_dim > 0) bundle.embedding.adam_step(tape, emb, adam);
      ++mb_count;
    }
    res.log.push_back(LogRow{iter, 0.0, 0.0, 0.0, 0.0,
                             loss_acc / static_cast<double>(mb_count), 0.0});
    if (cfg.progress && iter % 50 == 0)
      std::cerr << "bc iter " << iter << " loss "
                << loss_acc / static_cast<double>(mb_count) << std::endl;
  }
  return res;
}

}  // namespace rcm
