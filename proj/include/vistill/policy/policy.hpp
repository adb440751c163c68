#pragma once

// Conditional noise-prediction policy head. Noising is variance-exploding
// exactly as written in the objective (A_k = A0 + sigma_k * eps, no signal
// scaling); the sampler is a deterministic Euler walk down the sigma ladder,
// which telescopes to sigma_K, so an oracle predictor recovers A0 exactly.
// Actions are normalized per-dimension to [-1,1] before training and the
// sampler clips to those bounds.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vistill/core/optim.hpp"
#include "vistill/nn/encoder.hpp"

namespace vistill::policy {

// ---------------------------------------------------------------------------
// noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
  int64_t K = 0;
  std::vector<float> sigma;  // sigma_1..sigma_K, strictly increasing
  std::string kind = "geometric";

  float sigma_at(int64_t k) const {  // 1-based per the objective's k
    if (k < 1 || k > K) throw ContractError("schedule: k " + std::to_string(k) + " out of [1," + std::to_string(K) + "]");
    return sigma[static_cast<size_t>(k - 1)];
  }
};

inline NoiseSchedule make_schedule(int64_t K, double sigma_min, double sigma_max) {
  if (K < 2) throw ConfigError("schedule: K must be >= 2");
  if (!(sigma_min > 0) || !(sigma_min < sigma_max)) throw ConfigError("schedule: need 0 < sigma_min < sigma_max");
  NoiseSchedule s;
  s.K = K;
  s.sigma.resize(static_cast<size_t>(K));
  for (int64_t k = 0; k < K; ++k)
    s.sigma[static_cast<size_t>(k)] =
        static_cast<float>(sigma_min * std::pow(sigma_max / sigma_min, static_cast<double>(k) / (K - 1)));
  return s;
}

// ---------------------------------------------------------------------------
// policy configuration
// ---------------------------------------------------------------------------

struct PolicyConfig {
  int64_t obs_horizon = 2;     // frames of image history
  int64_t action_horizon = 8;  // action-chunk length
  int64_t action_dim = 2;
  int64_t proprio_dim = 2;
  int64_t hidden = 256;
  int64_t film_layers = 2;
  int64_t k_embed_dim = 32;
  int64_t diffusion_steps = 50;  // K
  float sigma_min = 0.01f;
  float sigma_max = 2.0f;  // 2x the half-range of normalized actions
  int64_t epochs = 1500;
  int64_t batch = 64;
  float lr = 1e-3f;
  int64_t replan_stride = 4;  // actions executed before replanning
  int64_t eval_every = 200;
  int64_t eval_episodes = 20;
  bool freeze_encoder = false;

  int64_t chunk_dim() const { return action_horizon * action_dim; }
  int64_t cond_dim(int64_t feature_dim) const { return obs_horizon * feature_dim + proprio_dim; }

  void validate() const {
    if (obs_horizon < 1 || action_horizon < 1) throw ConfigError("policy: T_o and T_a must be >= 1");
    if (diffusion_steps < 2) throw ConfigError("policy: K must be >= 2");
    if (action_dim < 1 || proprio_dim < 0 || hidden < 1) throw ConfigError("policy: bad dimensions");
    if (!(sigma_min > 0 && sigma_min < sigma_max)) throw ConfigError("policy: bad sigma range");
    if (k_embed_dim % 2 != 0) throw ConfigError("policy: k_embed_dim must be even");
  }

  NoiseSchedule schedule() const { return make_schedule(diffusion_steps, sigma_min, sigma_max); }
};

// ---------------------------------------------------------------------------
// sinusoidal embedding of log sigma_k
// ---------------------------------------------------------------------------

inline void k_embedding(float sigma, int64_t dim, float* out) {
  const int64_t half = dim / 2;
  const double t = std::log(static_cast<double>(sigma));
  for (int64_t i = 0; i < half; ++i) {
    const double omega = 0.5 * std::pow(100.0, static_cast<double>(i) / std::max<int64_t>(1, half - 1));
    out[2 * i] = static_cast<float>(std::sin(t * omega));
    out[2 * i + 1] = static_cast<float>(std::cos(t * omega));
  }
}

// ---------------------------------------------------------------------------
// noise net: FiLM-conditioned MLP epsilon_theta(A_k | c, k)
// ---------------------------------------------------------------------------

struct NoiseNet {
  PolicyConfig config;
  int64_t cond_dim = 0;  // obs_horizon * feature_dim + proprio_dim
  std::map<std::string, Var<float>> params;

  const Var<float>& p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("noise net parameter '" + name + "' missing");
    return it->second;
  }
  std::vector<Var<float>> parameters() const {
    std::vector<Var<float>> out;
    for (const auto& [k, v] : params) out.push_back(v);
    return out;
  }
  void set_trainable(bool on) {
    for (auto& [k, v] : params) v->requires_grad = on;
  }
};

inline NoiseNet build_noise_net(const PolicyConfig& cfg, int64_t feature_dim, uint64_t seed) {
  cfg.validate();
  NoiseNet net;
  net.config = cfg;
  net.cond_dim = cfg.cond_dim(feature_dim);
  auto& m = net.params;
  using nn::detail::init_param;
  const int64_t h = cfg.hidden, in = cfg.chunk_dim(), cin = net.cond_dim + cfg.k_embed_dim;
  init_param<float>(m, seed, "cond.w", {cin, h}, "weight");
  init_param<float>(m, seed, "cond.b", {h}, "zero");
  init_param<float>(m, seed, "in.w", {in, h}, "weight");
  init_param<float>(m, seed, "in.b", {h}, "zero");
  for (int64_t l = 0; l < cfg.film_layers; ++l) {
    const std::string b = "layer" + std::to_string(l) + ".";
    init_param<float>(m, seed, b + "w", {h, h}, "weight");
    init_param<float>(m, seed, b + "b", {h}, "zero");
    init_param<float>(m, seed, b + "film.w", {h, 2 * h}, "weight");
    init_param<float>(m, seed, b + "film.b", {2 * h}, "zero");
  }
  init_param<float>(m, seed, "out.w", {h, in}, "weight");
  init_param<float>(m, seed, "out.b", {in}, "zero");
  return net;
}

/// eps_theta forward: chunk [B, T_a*act], cond [B, cond_dim], kemb [B, k_embed].
template <class T>
Var<T> noise_net_forward(Graph<T>& g, const NoiseNet& net, const Var<T>& chunk, const Var<T>& cond,
                         const Var<T>& kemb) {
  const auto& cfg = net.config;
  if (chunk->rank() != 2 || chunk->dim(1) != cfg.chunk_dim())
    throw ShapeError("noise net: chunk must be [B," + std::to_string(cfg.chunk_dim()) + "], got " +
                     dims_str(chunk->shape));
  if (cond->rank() != 2 || cond->dim(1) != net.cond_dim)
    throw ShapeError("noise net: condition must be [B," + std::to_string(net.cond_dim) + "], got " +
                     dims_str(cond->shape));
  const int64_t B = chunk->dim(0), h = cfg.hidden;
  auto cfull = concat<T>(g, {cond, kemb}, 1);
  auto gfeat = relu(g, add(g, matmul(g, cfull, net.p("cond.w")), net.p("cond.b")));
  auto x = add(g, matmul(g, chunk, net.p("in.w")), net.p("in.b"));
  auto ones = make_var<T>({B, h});
  std::fill(ones->data.begin(), ones->data.end(), T(1));
  for (int64_t l = 0; l < cfg.film_layers; ++l) {
    const std::string bn = "layer" + std::to_string(l) + ".";
    auto film = add(g, matmul(g, gfeat, net.p(bn + "film.w")), net.p(bn + "film.b"));
    auto sc = slice(g, film, 1, 0, h);
    auto sh = slice(g, film, 1, h, 2 * h);
    x = add(g, matmul(g, x, net.p(bn + "w")), net.p(bn + "b"));
    x = relu(g, add(g, mul(g, x, add(g, sc, ones)), sh));  // x*(1+scale)+shift
  }
  return add(g, matmul(g, x, net.p("out.w")), net.p("out.b"));
}

// ---------------------------------------------------------------------------
// condition assembly: per-frame features in temporal order, then proprio
// ---------------------------------------------------------------------------

template <class T>
Var<T> build_condition(Graph<T>& g, const nn::Encoder<T>& enc, const Var<T>& frames, const Var<T>& proprio,
                       int64_t obs_horizon) {
  if (frames->rank() != 4) throw ShapeError("build_condition: frames must be [B*T_o,3,H,W]");
  if (proprio->rank() != 2) throw ShapeError("build_condition: proprio must be [B,proprio_dim]");
  const int64_t B = proprio->dim(0);
  if (frames->dim(0) != B * obs_horizon)
    throw ShapeError("build_condition: expected " + std::to_string(B * obs_horizon) + " frames, got " +
                     std::to_string(frames->dim(0)));
  auto feats = nn::encode(g, enc, frames);                                  // [B*T_o, D]
  auto grouped = reshape(g, feats, {B, obs_horizon * feats->dim(1)});       // temporal order preserved
  return concat<T>(g, {grouped, proprio}, 1);
}

// ---------------------------------------------------------------------------
// training step
// ---------------------------------------------------------------------------

struct DiffusionBatch {
  Var<float> frames;   // [B*T_o, 3, H, W], frame t-T_o+1..t per sample, in order
  Var<float> proprio;  // [B, proprio_dim]
  Var<float> actions;  // [B, T_a*action_dim], normalized to [-1,1]
};

struct TrainStepResult {
  float loss = 0;
  std::vector<float> eps;      // the injected noise draw (for oracle tests)
  std::vector<float> sigma_k;  // per-sample sigma
};

/// Test seam: replaces eps_theta with an arbitrary function of the noisy
/// chunk, condition and k-embedding (oracle doubles, zero predictors).
using PredictorOverride =
    std::function<Var<float>(Graph<float>&, const Var<float>& noisy, const Var<float>& cond, const Var<float>& kemb)>;

/// One objective evaluation: sample k and eps, form A_k = A0 + sigma_k*eps,
/// predict eps, take the mean squared residual; backprop when requested.
/// Gradients reach the encoder unless freeze_encoder is set.
inline TrainStepResult diffusion_train_step(Graph<float>& g, nn::Encoder<float>& enc, const NoiseNet& net,
                                            const DiffusionBatch& batch, const NoiseSchedule& sched,
                                            RngStream& k_rng, RngStream& eps_rng, bool freeze_encoder,
                                            Var<float>* loss_out = nullptr,
                                            const PredictorOverride& predictor_override = {}) {
  const auto& cfg = net.config;
  const int64_t B = batch.proprio->dim(0), n = cfg.chunk_dim();
  if (batch.actions->shape != Dims{B, n})
    throw ShapeError("train step: actions must be [B," + std::to_string(n) + "], got " + dims_str(batch.actions->shape));
  TrainStepResult res;
  res.eps.resize(static_cast<size_t>(B * n));
  res.sigma_k.resize(static_cast<size_t>(B));
  auto noisy = make_var<float>({B, n});
  auto kemb = make_var<float>({B, cfg.k_embed_dim});
  auto eps_var = make_var<float>({B, n});
  for (int64_t b = 0; b < B; ++b) {
    const int64_t k = k_rng.randint(1, sched.K + 1);
    const float sk = sched.sigma_at(k);
    res.sigma_k[static_cast<size_t>(b)] = sk;
    k_embedding(sk, cfg.k_embed_dim, kemb->data.data() + b * cfg.k_embed_dim);
    for (int64_t i = 0; i < n; ++i) {
      const float e = static_cast<float>(eps_rng.normal());
      res.eps[static_cast<size_t>(b * n + i)] = e;
      eps_var->data[b * n + i] = e;
      noisy->data[b * n + i] = batch.actions->data[b * n + i] + sk * e;
    }
  }
  enc.set_trainable(!freeze_encoder);
  auto cond = build_condition(g, enc, batch.frames, batch.proprio, cfg.obs_horizon);
  auto pred = predictor_override ? predictor_override(g, noisy, cond, kemb)
                                 : noise_net_forward(g, net, noisy, cond, kemb);
  auto loss = mse(g, pred, eps_var);
  if (!kern::all_finite(&loss->data[0], 1)) throw TrainingError("diffusion loss is not finite");
  res.loss = loss->data[0];
  if (loss_out) *loss_out = loss;
  return res;
}

// ---------------------------------------------------------------------------
// sampler: deterministic Euler descent over the sigma ladder
// ---------------------------------------------------------------------------

/// Low-level core, parameterized by the noise predictor so oracle test
/// doubles can be injected. `chunk` holds the initial value A (usually
/// sigma_K * eps) and is denoised in place; the result is clipped to
/// [-clip, clip].
using NoisePredictor = std::function<std::vector<float>(const std::vector<float>& chunk, float sigma)>;

inline std::vector<float> denoise_chunk(std::vector<float> chunk, const NoiseSchedule& sched,
                                        const NoisePredictor& predict, int64_t steps = 0, float clip = 1.f) {
  if (steps <= 0 || steps > sched.K) steps = sched.K;
  // descending 1-based indices K..1, evenly spaced, always including both ends
  std::vector<int64_t> ks;
  if (steps == 1) {
    ks = {sched.K};
  } else {
    ks.reserve(static_cast<size_t>(steps));
    for (int64_t i = 0; i < steps; ++i) {
      const int64_t k = sched.K - (i * (sched.K - 1)) / (steps - 1);
      if (ks.empty() || ks.back() != k) ks.push_back(k);
    }
  }
  for (size_t i = 0; i < ks.size(); ++i) {
    const float sigma_cur = sched.sigma_at(ks[i]);
    const float sigma_next = (i + 1 < ks.size()) ? sched.sigma_at(ks[i + 1]) : 0.f;
    auto eps_hat = predict(chunk, sigma_cur);
    if (eps_hat.size() != chunk.size()) throw ContractError("sampler: predictor returned wrong size");
    const float scale = sigma_cur - sigma_next;
    for (size_t j = 0; j < chunk.size(); ++j) {
      chunk[j] -= scale * eps_hat[j];
      if (!std::isfinite(chunk[j])) throw TrainingError("sampler: non-finite intermediate");
    }
  }
  for (auto& v : chunk) v = std::clamp(v, -clip, clip);
  return chunk;
}

/// Model-backed predictor with a fixed conditioning vector.
inline NoisePredictor model_predictor(const nn::Encoder<float>& enc, const NoiseNet& net,
                                      const Var<float>& frames, const Var<float>& proprio) {
  // condition is computed once per replan; the denoise loop only re-runs the MLP
  auto cond_holder = std::make_shared<Var<float>>();
  {
    Graph<float> g;
    NoGradGuard<float> ng(g);
    *cond_holder = build_condition(g, enc, frames, proprio, net.config.obs_horizon);
  }
  return [cond_holder, &net](const std::vector<float>& chunk, float sigma) {
    Graph<float> g;
    NoGradGuard<float> ng(g);
    const int64_t n = static_cast<int64_t>(chunk.size());
    auto cvar = make_var<float>({1, n}, std::vector<float>(chunk));
    auto kemb = make_var<float>({1, net.config.k_embed_dim});
    k_embedding(sigma, net.config.k_embed_dim, kemb->data.data());
    auto out = noise_net_forward(g, net, cvar, *cond_holder, kemb);
    return out->data;
  };
}

/// Full sampler: A <- sigma_K * eps, then the Euler descent; returns the
/// normalized action chunk [T_a * action_dim].
inline std::vector<float> sample_actions(const nn::Encoder<float>& enc, const NoiseNet& net,
                                         const Var<float>& frames, const Var<float>& proprio,
                                         const NoiseSchedule& sched, RngStream& rng, int64_t steps = 0) {
  const int64_t n = net.config.chunk_dim();
  std::vector<float> chunk(static_cast<size_t>(n));
  const float sK = sched.sigma.back();
  for (auto& v : chunk) v = sK * static_cast<float>(rng.normal());
  return denoise_chunk(std::move(chunk), sched, model_predictor(enc, net, frames, proprio), steps);
}

}  // namespace vistill::policy
