#pragma once

// Replay buffer, the interleaved collect/train loop, the four training
// regimes, metrics logging, and checkpoint/resume with bit-exact
// continuation.

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crlab/checkpoint.hpp"
#include "crlab/env.hpp"
#include "crlab/imagine.hpp"
#include "crlab/policy.hpp"
#include "crlab/worldmodel.hpp"
#include "json.hpp"

namespace crlab {

inline const char* to_string(RegimeKind k) {
  switch (k) {
    case RegimeKind::DefaultContext:
      return "default";
    case RegimeKind::SingleVariation:
      return "single";
    case RegimeKind::DualVariation:
      return "dual";
    case RegimeKind::Expert:
      return "expert";
  }
  return "?";
}

inline RegimeKind regime_kind_from_string(const std::string& s) {
  if (s == "default") return RegimeKind::DefaultContext;
  if (s == "single") return RegimeKind::SingleVariation;
  if (s == "dual") return RegimeKind::DualVariation;
  if (s == "expert") return RegimeKind::Expert;
  throw UsageError("unknown training regime: " + s);
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  TrainingRegime regime;
  ConditioningMode mode = ConditioningMode::CRSSM;
  std::string size_profile = "desk";  // "desk" or "paper"
  std::uint64_t seed = 0;

  std::int64_t env_step_budget = 50000;
  int train_ratio = 2;  // env steps per gradient step
  std::int64_t warmup_steps = 1000;
  std::int64_t replay_capacity = 1000000;
  int batch_size = 16;
  int batch_length = 64;
  int imagination_horizon = 15;
  int imagination_starts = 64;  // 0 = every posterior state
  int context_pool_size = 100;
  std::int64_t checkpoint_every = 10000;  // env steps

  double discount = 1.0 - 1.0 / 333.0;
  double return_lambda = 0.95;
  double entropy_scale = 3e-4;
  double critic_ema_decay = 0.98;
  double early_stop_return = -1.0;  // >= 0: stop once last-10 mean reaches it

  OptimizerConfig wm_opt{};                              // 1e-4 / 1e-8 / 1000
  OptimizerConfig ac_opt{3e-5, 1e-5, 100.0, 0.9, 0.999};

  ModelSizes sizes() const {
    if (size_profile == "desk") return ModelSizes::desk();
    if (size_profile == "paper") return ModelSizes::paper();
    throw UsageError("unknown size profile: " + size_profile);
  }

  void validate() const {
    if (regime.kind == RegimeKind::DefaultContext ||
        regime.kind == RegimeKind::Expert)
      check_usage(mode == ConditioningMode::HIDDEN,
                  "default-context and expert training are context-unaware "
                  "(mode must be hidden)");
    if (regime.kind == RegimeKind::SingleVariation)
      check_usage(!regime.varied_dim.empty(),
                  "single-variation regime needs a varied dimension");
    check_usage(env_step_budget >= 1 && batch_size >= 1 && batch_length >= 1 &&
                    train_ratio >= 1 && imagination_horizon >= 1,
                "training configuration out of range");
    sizes();  // validates the profile string
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["regime"] = {{"kind", to_string(regime.kind)},
                   {"varied_dim", regime.varied_dim},
                   {"expert_context", regime.expert_context}};
    j["mode"] = to_string(mode);
    j["size_profile"] = size_profile;
    j["seed"] = seed;
    j["env_step_budget"] = env_step_budget;
    j["train_ratio"] = train_ratio;
    j["warmup_steps"] = warmup_steps;
    j["replay_capacity"] = replay_capacity;
    j["batch_size"] = batch_size;
    j["batch_length"] = batch_length;
    j["imagination_horizon"] = imagination_horizon;
    j["imagination_starts"] = imagination_starts;
    j["context_pool_size"] = context_pool_size;
    j["checkpoint_every"] = checkpoint_every;
    j["discount"] = discount;
    j["return_lambda"] = return_lambda;
    j["entropy_scale"] = entropy_scale;
    j["critic_ema_decay"] = critic_ema_decay;
    j["early_stop_return"] = early_stop_return;
    j["wm_opt"] = {{"lr", wm_opt.learning_rate},
                   {"eps", wm_opt.adam_epsilon},
                   {"clip", wm_opt.clip_norm}};
    j["ac_opt"] = {{"lr", ac_opt.learning_rate},
                   {"eps", ac_opt.adam_epsilon},
                   {"clip", ac_opt.clip_norm}};
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("regime")) {
      const auto& r = j.at("regime");
      c.regime.kind =
          regime_kind_from_string(r.value("kind", std::string("default")));
      c.regime.varied_dim = r.value("varied_dim", std::string());
      if (r.contains("expert_context"))
        c.regime.expert_context =
            r.at("expert_context").get<ContextVector>();
    }
    c.mode = mode_from_string(j.value("mode", std::string("crssm")));
    c.size_profile = j.value("size_profile", c.size_profile);
    c.seed = j.value("seed", c.seed);
    c.env_step_budget = j.value("env_step_budget", c.env_step_budget);
    c.train_ratio = j.value("train_ratio", c.train_ratio);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.replay_capacity = j.value("replay_capacity", c.replay_capacity);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.batch_length = j.value("batch_length", c.batch_length);
    c.imagination_horizon =
        j.value("imagination_horizon", c.imagination_horizon);
    c.imagination_starts = j.value("imagination_starts", c.imagination_starts);
    c.context_pool_size = j.value("context_pool_size", c.context_pool_size);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.discount = j.value("discount", c.discount);
    c.return_lambda = j.value("return_lambda", c.return_lambda);
    c.entropy_scale = j.value("entropy_scale", c.entropy_scale);
    c.critic_ema_decay = j.value("critic_ema_decay", c.critic_ema_decay);
    c.early_stop_return = j.value("early_stop_return", c.early_stop_return);
    if (j.contains("wm_opt")) {
      c.wm_opt.learning_rate = j["wm_opt"].value("lr", c.wm_opt.learning_rate);
      c.wm_opt.adam_epsilon = j["wm_opt"].value("eps", c.wm_opt.adam_epsilon);
      c.wm_opt.clip_norm = j["wm_opt"].value("clip", c.wm_opt.clip_norm);
    }
    if (j.contains("ac_opt")) {
      c.ac_opt.learning_rate = j["ac_opt"].value("lr", c.ac_opt.learning_rate);
      c.ac_opt.adam_epsilon = j["ac_opt"].value("eps", c.ac_opt.adam_epsilon);
      c.ac_opt.clip_norm = j["ac_opt"].value("clip", c.ac_opt.clip_norm);
    }
    return c;
  }

  std::string hash() const {
    std::uint64_t h = fnv1a64(to_json().dump());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

// A stored step is one (observation, previous action, reward, continue)
// tuple; an episode of T transitions contributes T+1 steps, the first with a
// zero previous action and zero reward.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::int64_t capacity_steps)
      : capacity_(capacity_steps) {
    check(capacity_ >= 1, "replay: capacity must be >= 1");
  }

  void add(EpisodeRecord ep) {
    check(ep.length() >= 1, "replay: empty episode");
    check(ep.obs.size() == std::size_t(ep.length()) + 1,
          "replay: observation count mismatch");
    total_ += ep.length() + 1;
    episodes_.push_back(std::move(ep));
    while (total_ > capacity_ && episodes_.size() > 1) {
      total_ -= episodes_.front().length() + 1;
      episodes_.pop_front();
    }
  }

  std::int64_t stored_steps() const { return total_; }
  std::size_t episode_count() const { return episodes_.size(); }
  const std::deque<EpisodeRecord>& episodes() const { return episodes_; }

  // Uniform over stored steps; returns (episode index, step index).
  std::pair<int, int> sample_start(Rng& rng) const {
    check(total_ >= 1, "replay: empty buffer");
    std::int64_t k = std::int64_t(rng.uniform_int(int(total_)));
    for (std::size_t e = 0; e < episodes_.size(); ++e) {
      std::int64_t steps = episodes_[e].length() + 1;
      if (k < steps) return {int(e), int(k)};
      k -= steps;
    }
    return {int(episodes_.size()) - 1, episodes_.back().length()};
  }

 private:
  std::int64_t capacity_;
  std::int64_t total_ = 0;
  std::deque<EpisodeRecord> episodes_;
};

template <class S>
struct Batch {
  SequenceInputs<S> in;
  std::vector<MatT<S>> reward, cont, mask;  // T rows of 1 x n
};

// Segments start uniformly over stored steps, are cut at episode end, padded
// to a common length and masked; the batch is trimmed to the longest valid
// segment.
template <class S>
Batch<S> sample_batch(const ReplayBuffer& buf, const ContextSpec& spec,
                      int batch_size, int batch_length, Rng& rng) {
  check(batch_size >= 1 && batch_length >= 1, "sample_batch: sizes");
  struct Pick {
    const EpisodeRecord* ep;
    int start;
    int len;
  };
  std::vector<Pick> picks(static_cast<std::size_t>(batch_size));
  int T_used = 1;
  for (auto& pk : picks) {
    auto [e, s] = buf.sample_start(rng);
    const EpisodeRecord& ep = buf.episodes()[std::size_t(e)];
    pk.ep = &ep;
    pk.start = s;
    pk.len = std::min(batch_length, ep.length() + 1 - s);
    T_used = std::max(T_used, pk.len);
  }

  Batch<S> b;
  b.in.ctx_norm.resize(Eigen::Index(spec.dims.size()), batch_size);
  const int action_dim = 2;
  const int obs_dim = 4;
  for (int t = 0; t < T_used; ++t) {
    b.in.obs.push_back(MatT<S>::Zero(obs_dim, batch_size));
    b.in.prev_action.push_back(MatT<S>::Zero(action_dim, batch_size));
    b.reward.push_back(MatT<S>::Zero(1, batch_size));
    b.cont.push_back(MatT<S>::Zero(1, batch_size));
    b.mask.push_back(MatT<S>::Zero(1, batch_size));
  }

  for (int j = 0; j < batch_size; ++j) {
    const Pick& pk = picks[std::size_t(j)];
    const EpisodeRecord& ep = *pk.ep;
    auto cn = normalize_context(spec, ep.context);
    for (std::size_t d = 0; d < cn.size(); ++d)
      b.in.ctx_norm(Eigen::Index(d), j) = static_cast<S>(cn[d]);
    for (int t = 0; t < pk.len; ++t) {
      const int idx = pk.start + t;
      for (int d = 0; d < obs_dim; ++d)
        b.in.obs[std::size_t(t)](d, j) =
            static_cast<S>(ep.obs[std::size_t(idx)][std::size_t(d)]);
      if (idx > 0) {
        b.in.prev_action[std::size_t(t)](ep.actions[std::size_t(idx - 1)], j) =
            S(1);
        b.reward[std::size_t(t)](0, j) =
            static_cast<S>(ep.rewards[std::size_t(idx - 1)]);
      }
      const bool terminal = idx == ep.length() && ep.terminated;
      b.cont[std::size_t(t)](0, j) = terminal ? S(0) : S(1);
      b.mask[std::size_t(t)](0, j) = S(1);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <class S>
class Trainer {
 public:
  TrainConfig cfg;
  std::filesystem::path out_dir;
  ContextSpec spec;
  ModelSizes sizes;
  WorldModel<S> wm;
  ActorCritic<S> ac;
  ParamStore<S> params;
  Adam<S> wm_opt, actor_opt, critic_opt;
  ReturnNormalizer normalizer;
  ReplayBuffer buffer;
  std::vector<ContextVector> pool;
  Rng env_rng{0}, train_rng{0};
  std::int64_t env_step = 0, grad_step = 0;
  std::int64_t last_ckpt_step = 0;
  std::deque<double> recent_returns;
  std::map<std::string, double> last_metrics;
  std::string config_hash;
  std::vector<S> bins;

  Trainer(TrainConfig c, std::filesystem::path out)
      : cfg(std::move(c)),
        out_dir(std::move(out)),
        spec(ContextSpec::cartpole()),
        sizes(cfg.sizes()),
        wm(sizes, cfg.mode),
        ac(sizes, cfg.mode),
        wm_opt(cfg.wm_opt),
        actor_opt(cfg.ac_opt),
        critic_opt(cfg.ac_opt),
        buffer(cfg.replay_capacity),
        env_rng(Rng(cfg.seed).child(1)),
        train_rng(Rng(cfg.seed).child(2)) {
    cfg.validate();
    config_hash = cfg.hash();
    const int pool_n = (cfg.regime.kind == RegimeKind::SingleVariation ||
                        cfg.regime.kind == RegimeKind::DualVariation)
                           ? cfg.context_pool_size
                           : 1;
    pool = sample_train_contexts(spec, cfg.regime, pool_n, cfg.seed);
    Rng init_rng = Rng(cfg.seed).child(3);
    wm.register_params(params, init_rng);
    ac.register_params(params, init_rng);
    bins = reward_bin_edges<S>(sizes.reward_bins);
  }

  // One gradient pass: world model, then actor and critic on imagined
  // rollouts from the batch's posterior states, then the critic EMA blend.
  std::map<std::string, double> train_step(const Batch<S>& batch) {
    std::map<std::string, double> m;

    // World model.
    Tape<S> t(true);
    TapeParams<S> p(t, params);
    Rollout<S> roll = wm.observe_sequence(t, p, batch.in, train_rng);
    SequenceTargets<S> tg =
        wm.stack_targets(batch.in, batch.reward, batch.cont, batch.mask);
    LossScales scales;
    WmLossValue<S> wml = wm.world_model_loss(t, roll, tg, scales,
                                             std::span<const S>(bins));
    t.backward(wml.total);
    wm_opt.step(params, p.grads());
    m["wm_loss"] = double(t.scalar(wml.total));
    m["obs_loss"] = wml.recon_obs;
    m["reward_loss"] = wml.recon_reward;
    m["cont_loss"] = wml.recon_cont;
    m["kl_dyn"] = wml.kl_dyn;
    m["kl_rep"] = wml.kl_rep;

    // Imagination start states: every unmasked posterior state, optionally
    // subsampled to bound the actor-critic batch.
    const MatT<S> h_all = t.val(roll.h_all);
    const MatT<S> z_all = t.val(roll.z_all);
    const int T = roll.T, n = roll.batch;
    std::vector<int> cols;
    cols.reserve(std::size_t(T) * std::size_t(n));
    for (int step = 0; step < T; ++step)
      for (int j = 0; j < n; ++j)
        if (tg.mask(0, Eigen::Index(step) * n + j) > S(0.5))
          cols.push_back(step * n + j);
    if (cfg.imagination_starts > 0 &&
        int(cols.size()) > cfg.imagination_starts) {
      for (int i = 0; i < cfg.imagination_starts; ++i) {
        int r = i + train_rng.uniform_int(int(cols.size()) - i);
        std::swap(cols[std::size_t(i)], cols[std::size_t(r)]);
      }
      cols.resize(std::size_t(cfg.imagination_starts));
    }
    const int ns = int(cols.size());
    MatT<S> h0(sizes.gru_units, ns), z0(wm.z_dim(), ns),
        ctx0(Eigen::Index(spec.dims.size()), ns);
    for (int i = 0; i < ns; ++i) {
      h0.col(i) = h_all.col(cols[std::size_t(i)]);
      z0.col(i) = z_all.col(cols[std::size_t(i)]);
      ctx0.col(i) = batch.in.ctx_norm.col(cols[std::size_t(i)] % n);
    }

    auto policy = sampling_policy<S>(&ac, &params, ctx0);
    ImaginedTrajectory<S> traj =
        imagine(wm, params, h0, z0, ctx0, policy, cfg.imagination_horizon,
                train_rng);
    const int H = traj.horizon();

    // Values at every imagined state in one pass.
    MatT<S> h_states(sizes.gru_units, Eigen::Index(H + 1) * ns);
    MatT<S> z_states(wm.z_dim(), Eigen::Index(H + 1) * ns);
    MatT<S> ctx_states(ctx0.rows(), Eigen::Index(H + 1) * ns);
    for (int step = 0; step <= H; ++step) {
      h_states.middleCols(Eigen::Index(step) * ns, ns) =
          traj.h[std::size_t(step)];
      z_states.middleCols(Eigen::Index(step) * ns, ns) =
          traj.z[std::size_t(step)];
      ctx_states.middleCols(Eigen::Index(step) * ns, ns) = ctx0;
    }
    MatT<S> v_flat = ac.values(params, h_states, z_states, ctx_states);
    std::vector<MatT<S>> values(std::size_t(H + 1));
    for (int step = 0; step <= H; ++step)
      values[std::size_t(step)] = v_flat.middleCols(Eigen::Index(step) * ns,
                                                    ns);

    auto returns = lambda_returns_value<S>(traj.reward, values, traj.cont,
                                           static_cast<S>(cfg.discount),
                                           static_cast<S>(cfg.return_lambda));
    auto weights = continue_weights(traj);

    // Return normalization (update, then scale advantages).
    std::vector<double> flat_returns;
    flat_returns.reserve(std::size_t(H) * std::size_t(ns));
    for (const auto& row : returns)
      for (Eigen::Index i = 0; i < row.cols(); ++i)
        flat_returns.push_back(double(row(0, i)));
    const S div = static_cast<S>(normalizer.update(flat_returns));

    // Flatten states 0..H-1 step-major for the two losses.
    const Eigen::Index mcols = Eigen::Index(H) * ns;
    MatT<S> actions_flat(sizes.action_dim, mcols), adv_flat(1, mcols),
        w_flat(1, mcols), ret_flat(1, mcols);
    for (int step = 0; step < H; ++step) {
      const Eigen::Index at = Eigen::Index(step) * ns;
      actions_flat.middleCols(at, ns) = traj.action[std::size_t(step)];
      adv_flat.middleCols(at, ns) =
          (returns[std::size_t(step)] - values[std::size_t(step)]) / div;
      w_flat.middleCols(at, ns) = weights[std::size_t(step)];
      ret_flat.middleCols(at, ns) = returns[std::size_t(step)];
    }
    MatT<S> h_loss = h_states.leftCols(mcols);
    MatT<S> z_loss = z_states.leftCols(mcols);
    MatT<S> ctx_loss = ctx_states.leftCols(mcols);

    // EMA critic distribution (a constant in the critic loss).
    MatT<S> ema_probs;
    {
      Tape<S> te(false);
      TapeParams<S> pe(te, params);
      typename Tape<S>::Var cv;
      if (ac.context_in_input()) cv = te.constant(ctx_loss);
      ema_probs = softmax_cols(
          te.val(ac.critic_logits(te, pe, te.constant(h_loss),
                                  te.constant(z_loss), cv, "ac/ema")));
    }

    Tape<S> t2(true);
    TapeParams<S> p2(t2, params);
    typename Tape<S>::Var cv2;
    if (ac.context_in_input()) cv2 = t2.constant(ctx_loss);
    auto a_logits = ac.actor_logits(t2, p2, t2.constant(h_loss),
                                    t2.constant(z_loss), cv2);
    auto al = actor_loss(t2, a_logits, actions_flat, adv_flat, w_flat,
                         static_cast<S>(cfg.entropy_scale));
    auto c_logits = ac.critic_logits(t2, p2, t2.constant(h_loss),
                                     t2.constant(z_loss), cv2);
    auto cl = critic_loss(t2, c_logits, ret_flat, ema_probs, w_flat,
                          std::span<const S>(bins));
    t2.backward(t2.add(al.loss, cl));
    std::map<std::string, MatT<S>> ga, gc;
    for (auto& [name, g] : p2.grads()) {
      if (name.rfind("ac/actor", 0) == 0)
        ga.emplace(name, std::move(g));
      else if (name.rfind("ac/critic", 0) == 0)
        gc.emplace(name, std::move(g));
    }
    actor_opt.step(params, std::move(ga));
    critic_opt.step(params, std::move(gc));
    ema_update(params, cfg.critic_ema_decay);

    m["actor_loss"] = double(t2.scalar(al.loss));
    m["critic_loss"] = double(t2.scalar(cl));
    m["policy_entropy"] = al.entropy;
    m["return_scale"] = normalizer.scale;
    m["value_mean"] = double(v_flat.mean());
    ++grad_step;
    return m;
  }

  // Collect/train to the budget, logging one JSONL object per episode.
  void run() {
    std::filesystem::create_directories(out_dir);
    {
      nlohmann::json manifest = cfg.to_json();
      manifest["task"] = "cartpole";
      manifest["config_hash"] = config_hash;
      manifest["resolved_sizes"] = {{"gru_units", sizes.gru_units},
                                    {"mlp_units", sizes.mlp_units},
                                    {"mlp_layers", sizes.mlp_layers},
                                    {"latent_groups", sizes.latent_groups},
                                    {"latent_classes", sizes.latent_classes},
                                    {"reward_bins", sizes.reward_bins}};
      std::ofstream cfg_out(out_dir / "config.json");
      cfg_out << manifest.dump(2) << "\n";
    }
    std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::app);
    check(bool(metrics), "trainer: cannot open metrics log");

    while (env_step < cfg.env_step_budget) {
      double ep_return = run_episode();
      recent_returns.push_back(ep_return);
      while (recent_returns.size() > 10) recent_returns.pop_front();
      log_episode(metrics, ep_return);
      metrics.flush();

      if (env_step - last_ckpt_step >= cfg.checkpoint_every &&
          env_step < cfg.env_step_budget) {
        last_ckpt_step = env_step;  // recorded in the archive itself
        save_state(out_dir / "checkpoint.ckpt");
      }
      if (cfg.early_stop_return >= 0 && recent_returns.size() == 10) {
        double mean = 0;
        for (double r : recent_returns) mean += r;
        if (mean / 10.0 >= cfg.early_stop_return) break;
      }
    }
    save_state(out_dir / "checkpoint_final.ckpt");
  }

  // --- state persistence -------------------------------------------------

  void save_state(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.config_hash = config_hash;
    ck.step = std::uint64_t(env_step);
    ck.meta["config"] = cfg.to_json();
    ck.meta["mode"] = to_string(cfg.mode);
    ck.meta["env_step"] = env_step;
    ck.meta["grad_step"] = grad_step;
    ck.meta["last_ckpt_step"] = last_ckpt_step;
    ck.meta["env_rng"] = {{"key", env_rng.key}, {"counter", env_rng.counter}};
    ck.meta["train_rng"] = {{"key", train_rng.key},
                            {"counter", train_rng.counter}};
    ck.meta["return_scale"] = normalizer.scale;
    ck.meta["adam_t"] = {wm_opt.t, actor_opt.t, critic_opt.t};
    ck.meta["recent_returns"] =
        std::vector<double>(recent_returns.begin(), recent_returns.end());
    ck.meta["last_metrics"] = last_metrics;
    // Context normalization constants, for consumers of the raw archive.
    {
      nlohmann::json cn = nlohmann::json::array();
      for (const auto& d : spec.dims)
        cn.push_back({{"name", d.name},
                      {"train_low", d.train_low},
                      {"train_high", d.train_high}});
      ck.meta["context_normalization"] = std::move(cn);
    }

    ck.put_params(params, "params/");
    save_adam(ck, "opt/wm/", wm_opt);
    save_adam(ck, "opt/actor/", actor_opt);
    save_adam(ck, "opt/critic/", critic_opt);

    nlohmann::json eps = nlohmann::json::array();
    int i = 0;
    for (const auto& ep : buffer.episodes()) {
      eps.push_back({{"context", ep.context},
                     {"terminated", ep.terminated},
                     {"truncated", ep.truncated}});
      const std::string base = "replay/" + std::to_string(i++) + "/";
      MatT<double> obs(4, Eigen::Index(ep.obs.size()));
      for (std::size_t k = 0; k < ep.obs.size(); ++k)
        for (int d = 0; d < 4; ++d)
          obs(d, Eigen::Index(k)) = ep.obs[k][std::size_t(d)];
      MatT<double> act(1, ep.length()), rew(1, ep.length());
      for (int k = 0; k < ep.length(); ++k) {
        act(0, k) = ep.actions[std::size_t(k)];
        rew(0, k) = ep.rewards[std::size_t(k)];
      }
      ck.put_f64(base + "obs", obs);
      ck.put_f64(base + "actions", act);
      ck.put_f64(base + "rewards", rew);
    }
    ck.meta["replay"] = std::move(eps);
    save_checkpoint(path, ck);
  }

  void load_state(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    check_usage(ck.config_hash == config_hash,
                "checkpoint was produced by a different configuration");
    env_step = ck.meta.at("env_step").get<std::int64_t>();
    grad_step = ck.meta.at("grad_step").get<std::int64_t>();
    last_ckpt_step = ck.meta.at("last_ckpt_step").get<std::int64_t>();
    env_rng.key = ck.meta.at("env_rng").at("key").get<std::uint64_t>();
    env_rng.counter = ck.meta.at("env_rng").at("counter").get<std::uint64_t>();
    train_rng.key = ck.meta.at("train_rng").at("key").get<std::uint64_t>();
    train_rng.counter =
        ck.meta.at("train_rng").at("counter").get<std::uint64_t>();
    normalizer.scale = ck.meta.at("return_scale").get<double>();
    wm_opt.t = ck.meta.at("adam_t").at(0).get<std::int64_t>();
    actor_opt.t = ck.meta.at("adam_t").at(1).get<std::int64_t>();
    critic_opt.t = ck.meta.at("adam_t").at(2).get<std::int64_t>();
    recent_returns.clear();
    for (double r : ck.meta.at("recent_returns"))
      recent_returns.push_back(r);
    last_metrics.clear();
    if (ck.meta.contains("last_metrics"))
      for (auto& [k, v] : ck.meta.at("last_metrics").items())
        last_metrics[k] = v.template get<double>();

    ParamStore<S> restored = ck.template params<S>("params/");
    check(restored.entries.size() == params.entries.size(),
          "checkpoint: parameter set mismatch");
    params = std::move(restored);
    load_adam(ck, "opt/wm/", wm_opt);
    load_adam(ck, "opt/actor/", actor_opt);
    load_adam(ck, "opt/critic/", critic_opt);

    buffer = ReplayBuffer(cfg.replay_capacity);
    int i = 0;
    for (const auto& em : ck.meta.at("replay")) {
      const std::string base = "replay/" + std::to_string(i++) + "/";
      EpisodeRecord ep;
      ep.context = em.at("context").get<ContextVector>();
      ep.terminated = em.at("terminated").get<bool>();
      ep.truncated = em.at("truncated").get<bool>();
      const MatT<double>& obs = ck.f64(base + "obs");
      const MatT<double>& act = ck.f64(base + "actions");
      const MatT<double>& rew = ck.f64(base + "rewards");
      for (Eigen::Index k = 0; k < obs.cols(); ++k)
        ep.obs.push_back({obs(0, k), obs(1, k), obs(2, k), obs(3, k)});
      for (Eigen::Index k = 0; k < act.cols(); ++k) {
        ep.actions.push_back(int(act(0, k)));
        ep.rewards.push_back(rew(0, k));
      }
      buffer.add(std::move(ep));
    }
  }

 private:
  static void save_adam(Checkpoint& ck, const std::string& prefix,
                        const Adam<S>& opt) {
    auto put = [&](const std::string& side,
                   const std::map<std::string, MatT<S>>& mats) {
      for (const auto& [name, mat] : mats) {
        if constexpr (std::is_same_v<S, double>)
          ck.put_f64(prefix + side + name, mat);
        else
          ck.put_f32(prefix + side + name, mat.template cast<float>());
      }
    };
    put("m/", opt.m);
    put("v/", opt.v);
  }

  static void load_adam(const Checkpoint& ck, const std::string& prefix,
                        Adam<S>& opt) {
    opt.m.clear();
    opt.v.clear();
    for (const auto& [name, entry] : ck.arrays) {
      if (name.rfind(prefix, 0) != 0) continue;
      std::string rest = name.substr(prefix.size());
      MatT<S> mat;
      if constexpr (std::is_same_v<S, double>)
        mat = ck.f64(name);
      else
        mat = ck.f32(name).template cast<S>();
      if (rest.rfind("m/", 0) == 0)
        opt.m.emplace(rest.substr(2), std::move(mat));
      else if (rest.rfind("v/", 0) == 0)
        opt.v.emplace(rest.substr(2), std::move(mat));
    }
  }

  MatT<S> ctx_norm_col(const ContextVector& ctx) const {
    auto cn = normalize_context(spec, ctx);
    MatT<S> m(Eigen::Index(cn.size()), 1);
    for (std::size_t d = 0; d < cn.size(); ++d)
      m(Eigen::Index(d), 0) = static_cast<S>(cn[d]);
    return m;
  }

  static MatT<S> obs_col(const std::array<double, 4>& obs) {
    MatT<S> m(4, 1);
    for (int d = 0; d < 4; ++d) m(d, 0) = static_cast<S>(obs[std::size_t(d)]);
    return m;
  }

  // One episode of environment interaction with interleaved gradient steps;
  // returns the episode return.
  double run_episode() {
    const ContextVector ctx =
        pool[std::size_t(env_rng.uniform_int(int(pool.size())))];
    CartPole env(spec, ctx);
    std::array<double, 4> obs = env.reset(env_rng.next_u64());
    const MatT<S> cn = ctx_norm_col(ctx);

    EpisodeRecord rec;
    rec.context = ctx;
    rec.obs.push_back(obs);

    typename WorldModel<S>::FilterState fstate = wm.initial_filter_state(1);
    MatT<S> prev_action = MatT<S>::Zero(sizes.action_dim, 1);
    auto policy = sampling_policy<S>(&ac, &params, cn);

    while (!env.episode_over() && env_step < cfg.env_step_budget) {
      fstate = wm.filter_step(params, fstate, obs_col(obs), prev_action, cn,
                              env_rng);
      int action;
      if (env_step < cfg.warmup_steps) {
        action = env_rng.uniform_int(sizes.action_dim);
      } else {
        MatT<S> a = policy(fstate.h, fstate.z, env_rng);
        Eigen::Index best;
        a.col(0).maxCoeff(&best);
        action = int(best);
      }
      StepResult sr = env.step(action);
      rec.actions.push_back(action);
      rec.rewards.push_back(sr.reward);
      rec.obs.push_back(sr.observation);
      rec.terminated = sr.terminated;
      rec.truncated = sr.truncated;
      obs = sr.observation;
      prev_action.setZero();
      prev_action(action, 0) = S(1);
      ++env_step;

      if (env_step > cfg.warmup_steps && env_step % cfg.train_ratio == 0 &&
          buffer.episode_count() > 0) {
        last_metrics = train_step(sample_batch<S>(
            buffer, spec, cfg.batch_size, cfg.batch_length, train_rng));
      }
    }
    double ret = rec.episode_return();
    buffer.add(std::move(rec));
    return ret;
  }

  void log_episode(std::ostream& out, double ep_return) {
    nlohmann::json line;
    line["env_step"] = env_step;
    line["grad_step"] = grad_step;
    line["episode_return"] = ep_return;
    double mean = 0;
    for (double r : recent_returns) mean += r;
    line["mean_episode_return"] = mean / double(recent_returns.size());
    line["episode_context"] = buffer.episodes().back().context;
    line["config_hash"] = config_hash;
    for (const auto& [k, v] : last_metrics) line[k] = v;
    out << line.dump() << "\n";
  }
};

// Builds the trainer, resumes from an existing rolling checkpoint in
// out_dir if one is present, and runs to the budget.
template <class S>
void run_training(const TrainConfig& cfg, const std::filesystem::path& out) {
  Trainer<S> tr(cfg, out);
  const auto rolling = out / "checkpoint.ckpt";
  if (std::filesystem::exists(rolling)) tr.load_state(rolling);
  tr.run();
}

// ---------------------------------------------------------------------------
// Loading trained agents for evaluation and dreaming
// ---------------------------------------------------------------------------

template <class S>
struct LoadedAgent {
  TrainConfig config;
  ContextSpec spec;
  WorldModel<S> wm;
  ActorCritic<S> ac;
  ParamStore<S> params;
};

template <class S>
LoadedAgent<S> load_agent(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.meta.contains("config"))
    throw IoError("checkpoint has no embedded training configuration");
  TrainConfig cfg = TrainConfig::from_json(ck.meta.at("config"));
  ModelSizes sizes = cfg.sizes();
  LoadedAgent<S> agent{cfg, ContextSpec::cartpole(),
                       WorldModel<S>(sizes, cfg.mode),
                       ActorCritic<S>(sizes, cfg.mode), ParamStore<S>()};
  agent.params = ck.template params<S>("params/");

  // Every parameter the architecture expects must be present.
  ParamStore<S> expect;
  Rng rng(0);
  agent.wm.register_params(expect, rng);
  agent.ac.register_params(expect, rng);
  for (const auto& [name, value] : expect.entries) {
    check(agent.params.has(name), "checkpoint: missing parameter " + name);
    check(agent.params.at(name).rows() == value.rows() &&
              agent.params.at(name).cols() == value.cols(),
          "checkpoint: parameter shape mismatch for " + name);
  }
  return agent;
}

}  // namespace crlab
