#pragma once

// Toy mixture-of-experts language model.
//
// Each token is processed independently (there is no attention):
//
//   h_0       = embedding[token]
//   h_{l+1}   = h_l + h_l * shared_l + sum_{i in topk(h_l * router_l + prior_l)} w_i * F_i(h_l)
//   F_i(h)    = silu(h * w_in_i) * w_out_i
//   logits    = h_L * head
//
// The gate weights w_i are the softmax of the selected router logits. The
// per-layer router prior is a fixed logit offset: tokens whose hidden state is
// still small (rarely seen during training) fall back to the prior's favoured
// experts, while well-trained tokens are routed by content. Top-k
// ties are broken toward the lower expert index, and selected experts are
// always combined in ascending index order so that every reduction has a
// fixed order.

#include "rise/errors.hpp"
#include "rise/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace rise {

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 32;
  int d_expert_hidden = 32;
  int n_layers = 8;
  int n_experts = 8;
  int top_k = 2;
  int max_seq_len = 64;
  std::uint64_t seed = 7;

  /// Throws ConfigError naming the first violated invariant.
  void validate() const {
    auto require = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(std::string("invalid model config: ") + what);
    };
    require(vocab_size >= 1, "vocab_size >= 1");
    require(d_model >= 1, "d_model >= 1");
    require(d_expert_hidden >= 1, "d_expert_hidden >= 1");
    require(max_seq_len >= 1, "max_seq_len >= 1");
    require(n_experts >= 1, "n_experts >= 1");
    require(n_layers >= 3, "n_layers >= 3");
    require(top_k >= 1, "top_k >= 1");
    require(top_k <= n_experts, "top_k <= n_experts");
  }

  std::size_t expert_parameter_count() const {
    return 2 * static_cast<std::size_t>(d_model) * d_expert_hidden;
  }

  std::size_t parameter_count() const {
    const std::size_t d = d_model, v = vocab_size, n = n_experts;
    const std::size_t per_layer = d * n + n + d * d + n * expert_parameter_count();
    return v * d + n_layers * per_layer + d * v;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct Expert {
  Matrix<Scalar> w_in;   // d_model x d_expert_hidden
  Matrix<Scalar> w_out;  // d_expert_hidden x d_model
};

template <typename Scalar>
struct MoeLayer {
  Matrix<Scalar> router;  // d_model x n_experts
  Matrix<Scalar> shared;  // d_model x d_model
  RowVector<Scalar> router_prior;  // n_experts logit offsets
  std::vector<Expert<Scalar>> experts;
  /// Routing candidacy; cleared by pruning.
  std::vector<std::uint8_t> routable;
};

template <typename Scalar>
struct MoeModel {
  ModelConfig config;
  Matrix<Scalar> embedding;  // vocab_size x d_model
  std::vector<MoeLayer<Scalar>> layers;
  Matrix<Scalar> head;  // d_model x vocab_size

  const Expert<Scalar>& expert(ExpertId id) const {
    return layers[id.layer].experts[id.expert];
  }
  Expert<Scalar>& expert(ExpertId id) { return layers[id.layer].experts[id.expert]; }

  bool contains(ExpertId id) const {
    return id.layer >= 0 && id.layer < config.n_layers && id.expert >= 0 &&
           id.expert < config.n_experts;
  }

  int survivors(int layer) const {
    const auto& r = layers[layer].routable;
    return static_cast<int>(std::count(r.begin(), r.end(), std::uint8_t{1}));
  }
};

using Model = MoeModel<double>;

/// Per-token, per-layer activated experts (ascending index) with their gates.
template <typename Scalar>
struct RoutingTrace {
  int n_layers = 0;
  int top_k = 0;
  std::size_t n_tokens = 0;
  std::vector<int> experts;     // [token][layer][slot]
  std::vector<Scalar> gates;    // same layout

  const int* experts_at(std::size_t token, int layer) const {
    return experts.data() + (token * n_layers + layer) * top_k;
  }
  const Scalar* gates_at(std::size_t token, int layer) const {
    return gates.data() + (token * n_layers + layer) * top_k;
  }

  bool operator==(const RoutingTrace&) const = default;
};

template <typename Scalar>
struct ForwardResult {
  Matrix<Scalar> logits;  // seq_len x vocab_size
  RoutingTrace<Scalar> trace;
};

template <typename Scalar>
inline Scalar silu(Scalar x) {
  return x / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
inline Scalar silu_derivative(Scalar x) {
  const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
  return s * (Scalar(1) + x * (Scalar(1) - s));
}

/// sup_x |silu'(x)|, attained at x ~ 2.3994.
inline constexpr double kSiluDerivativeBound = 1.0998393194;

/// Standard deviations of the initial parameter draws, in units of
/// 1/sqrt(fan_in) except for the embedding and router prior (absolute).
struct InitScales {
  double embedding = 0.05;
  double router = 1.0;
  double router_prior = 0.3;
  double shared = 0.1;
  double expert_in = 1.0;
  double expert_out = 0.5;
  double head = 1.0;
};

template <typename Scalar>
MoeModel<Scalar> init_model(const ModelConfig& config, const InitScales& scales = {}) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const int d = config.d_model, hdim = config.d_expert_hidden;
  auto fill = [&](Matrix<Scalar>& m, int rows, int cols, double stddev) {
    m.resize(rows, cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = Scalar(stddev * normal(rng));
  };

  MoeModel<Scalar> model;
  model.config = config;
  const double rd = 1.0 / std::sqrt(double(d)), rh = 1.0 / std::sqrt(double(hdim));
  fill(model.embedding, config.vocab_size, d, scales.embedding);
  model.layers.resize(config.n_layers);
  for (auto& layer : model.layers) {
    fill(layer.router, d, config.n_experts, scales.router * rd);
    Matrix<Scalar> prior;
    fill(prior, 1, config.n_experts, scales.router_prior);
    layer.router_prior = prior.row(0);
    fill(layer.shared, d, d, scales.shared * rd);
    layer.experts.resize(config.n_experts);
    for (auto& e : layer.experts) {
      fill(e.w_in, d, hdim, scales.expert_in * rd);
      fill(e.w_out, hdim, d, scales.expert_out * rh);
    }
    layer.routable.assign(config.n_experts, 1);
  }
  fill(model.head, d, config.vocab_size, scales.head * rd);
  return model;
}

/// Throws InputError unless every parameter shape matches the config and all
/// values are finite.
template <typename Scalar>
void check_model(const MoeModel<Scalar>& model) {
  const auto& c = model.config;
  c.validate();
  auto shape = [](const auto& m, int r, int col, const char* what) {
    if (m.rows() != r || m.cols() != col)
      throw InputError(std::string("parameter shape mismatch: ") + what);
    if (!m.allFinite()) throw InputError(std::string("non-finite parameter: ") + what);
  };
  shape(model.embedding, c.vocab_size, c.d_model, "embedding");
  shape(model.head, c.d_model, c.vocab_size, "head");
  if (static_cast<int>(model.layers.size()) != c.n_layers)
    throw InputError("parameter shape mismatch: layer count");
  for (const auto& layer : model.layers) {
    shape(layer.router, c.d_model, c.n_experts, "router");
    shape(layer.shared, c.d_model, c.d_model, "shared");
    shape(layer.router_prior, 1, c.n_experts, "router prior");
    if (static_cast<int>(layer.experts.size()) != c.n_experts ||
        static_cast<int>(layer.routable.size()) != c.n_experts)
      throw InputError("parameter shape mismatch: expert count");
    for (const auto& e : layer.experts) {
      shape(e.w_in, c.d_model, c.d_expert_hidden, "expert w_in");
      shape(e.w_out, c.d_expert_hidden, c.d_model, "expert w_out");
    }
  }
  for (int l = 0; l < c.n_layers; ++l)
    if (model.survivors(l) < c.top_k)
      throw InputError("layer " + std::to_string(l) + " has fewer routable experts than top_k");
}

namespace detail {

/// Intermediate values of one token's forward pass, kept for backprop.
template <typename Scalar>
struct TokenCache {
  std::vector<RowVector<Scalar>> hidden;                // n_layers + 1 states
  std::vector<std::vector<RowVector<Scalar>>> pre_act;  // [layer][slot]
  std::vector<std::vector<RowVector<Scalar>>> expert_out;
};

/// Selects the top-k routable experts, ties toward the lower index, and
/// returns them in ascending index order with renormalized softmax gates.
template <typename Scalar>
void route(const MoeLayer<Scalar>& layer, const RowVector<Scalar>& router_logits, int top_k,
           int* experts, Scalar* gates) {
  const int n = static_cast<int>(router_logits.size());
  std::vector<int> order;
  order.reserve(n);
  for (int i = 0; i < n; ++i)
    if (layer.routable[i]) order.push_back(i);
  const int k = std::min<int>(top_k, static_cast<int>(order.size()));
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    if (router_logits[a] != router_logits[b]) return router_logits[a] > router_logits[b];
    return a < b;
  });
  std::sort(order.begin(), order.begin() + k);

  Scalar max_logit = router_logits[order[0]];
  for (int s = 1; s < k; ++s) max_logit = std::max(max_logit, router_logits[order[s]]);
  Scalar total = 0;
  for (int s = 0; s < k; ++s) {
    experts[s] = order[s];
    gates[s] = std::exp(router_logits[order[s]] - max_logit);
    total += gates[s];
  }
  for (int s = 0; s < k; ++s) gates[s] /= total;
}

/// Runs one token through every layer. Writes the routing decisions for this
/// token into `experts`/`gates` (n_layers * top_k entries each).
template <typename Scalar>
RowVector<Scalar> forward_token(const MoeModel<Scalar>& model, TokenId token, int* experts,
                                Scalar* gates, TokenCache<Scalar>* cache) {
  const int k = model.config.top_k;
  RowVector<Scalar> h = model.embedding.row(token);
  if (cache) {
    cache->hidden.assign(1, h);
    cache->pre_act.assign(model.config.n_layers, {});
    cache->expert_out.assign(model.config.n_layers, {});
  }
  for (int l = 0; l < model.config.n_layers; ++l) {
    const auto& layer = model.layers[l];
    const RowVector<Scalar> router_logits = h * layer.router + layer.router_prior;
    int* sel = experts + l * k;
    Scalar* g = gates + l * k;
    route(layer, router_logits, k, sel, g);

    RowVector<Scalar> out = h + h * layer.shared;
    for (int s = 0; s < k; ++s) {
      const auto& e = layer.experts[sel[s]];
      const RowVector<Scalar> a = h * e.w_in;
      const RowVector<Scalar> act = a.unaryExpr([](Scalar x) { return silu(x); });
      const RowVector<Scalar> f = act * e.w_out;
      out += g[s] * f;
      if (cache) {
        cache->pre_act[l].push_back(a);
        cache->expert_out[l].push_back(f);
      }
    }
    h = std::move(out);
    if (cache) cache->hidden.push_back(h);
  }
  return h;
}

template <typename Scalar>
void check_tokens(const ModelConfig& config, const TokenSequence& tokens) {
  if (static_cast<int>(tokens.size()) > config.max_seq_len)
    throw InputError("sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  for (TokenId t : tokens)
    if (t < 0 || t >= config.vocab_size)
      throw InputError("token id " + std::to_string(t) + " out of range [0, " +
                       std::to_string(config.vocab_size) + ")");
}

}  // namespace detail

/// Final hidden states (seq_len x d_model) and routing trace.
template <typename Scalar>
std::pair<Matrix<Scalar>, RoutingTrace<Scalar>> hidden_states(const MoeModel<Scalar>& model,
                                                               const TokenSequence& tokens) {
  detail::check_tokens<Scalar>(model.config, tokens);
  const auto& c = model.config;
  RoutingTrace<Scalar> trace;
  trace.n_layers = c.n_layers;
  trace.top_k = c.top_k;
  trace.n_tokens = tokens.size();
  trace.experts.resize(tokens.size() * c.n_layers * c.top_k);
  trace.gates.resize(trace.experts.size());
  Matrix<Scalar> hidden(static_cast<Eigen::Index>(tokens.size()), c.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const std::size_t offset = t * c.n_layers * c.top_k;
    hidden.row(t) = detail::forward_token(model, tokens[t], trace.experts.data() + offset,
                                          trace.gates.data() + offset,
                                          static_cast<detail::TokenCache<Scalar>*>(nullptr));
  }
  return {std::move(hidden), std::move(trace)};
}

template <typename Scalar>
ForwardResult<Scalar> forward(const MoeModel<Scalar>& model, const TokenSequence& tokens) {
  auto [hidden, trace] = hidden_states(model, tokens);
  ForwardResult<Scalar> result;
  result.logits.resize(hidden.rows(), model.config.vocab_size);
  for (Eigen::Index t = 0; t < hidden.rows(); ++t)
    result.logits.row(t) = hidden.row(t) * model.head;
  result.trace = std::move(trace);
  return result;
}

/// Mean next-token negative log-likelihood. Row t of `logits` predicts
/// `targets[t]`; callers pass tokens[0..n-2] as input and tokens[1..n-1] as
/// targets.
template <typename Scalar>
Scalar loss_lm(const Matrix<Scalar>& logits, const TokenSequence& targets) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size())
    throw InputError("loss_lm: " + std::to_string(logits.rows()) + " logit rows vs " +
                     std::to_string(targets.size()) + " targets");
  if (targets.empty()) throw InputError("loss_lm: no predicted positions");
  Scalar total = 0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const TokenId y = targets[t];
    if (y < 0 || y >= logits.cols()) throw InputError("loss_lm: target id out of range");
    const Scalar m = logits.row(t).maxCoeff();
    const Scalar lse = m + std::log((logits.row(t).array() - m).exp().sum());
    total += lse - logits(t, y);
  }
  return total / Scalar(logits.rows());
}

template <typename Scalar>
Scalar sequence_loss(const MoeModel<Scalar>& model, const TokenSequence& seq) {
  if (seq.size() < 2) throw InputError("sequence_loss: need at least two tokens");
  const TokenSequence input(seq.begin(), seq.end() - 1);
  const TokenSequence target(seq.begin() + 1, seq.end());
  return loss_lm(forward(model, input).logits, target);
}

/// Mean loss over all predicted positions of a set of sequences.
template <typename Scalar>
Scalar corpus_loss(const MoeModel<Scalar>& model, const std::vector<TokenSequence>& batch) {
  Scalar total = 0;
  std::size_t positions = 0;
  for (const auto& seq : batch) {
    if (seq.size() < 2) continue;
    const std::size_t n = seq.size() - 1;
    total += sequence_loss(model, seq) * Scalar(n);
    positions += n;
  }
  if (positions == 0) throw InputError("corpus_loss: no predicted positions");
  return total / Scalar(positions);
}

/// Trainable subset of parameters. Selective training only ever addresses
/// expert FFN weights; the other flags exist for base pre-training.
struct ParameterMask {
  ExpertSet experts;
  bool embedding = false;
  bool head = false;
  bool routers = false;  // router matrix and prior
  bool shared = false;

  bool experts_only() const { return !embedding && !head && !routers && !shared; }
  bool empty() const { return experts.empty() && experts_only(); }
};

template <typename Scalar>
struct Gradients {
  std::map<ExpertId, Expert<Scalar>> experts;
  Matrix<Scalar> embedding;  // empty unless requested
  Matrix<Scalar> head;       // empty unless requested
  std::vector<Matrix<Scalar>> routers;        // per layer, empty unless requested
  std::vector<Matrix<Scalar>> shared;         // per layer, empty unless requested
  std::vector<RowVector<Scalar>> router_prior;  // per layer, empty unless requested
  Scalar loss = 0;
  std::size_t positions = 0;
};

/// Analytic gradient of the mean next-token loss over `batch` with respect to
/// the masked parameters. Experts that no token activates receive an exactly
/// zero gradient. Accumulation runs over sequences, then positions, in order.
template <typename Scalar>
Gradients<Scalar> backward(const MoeModel<Scalar>& model, const std::vector<TokenSequence>& batch,
                           const ParameterMask& mask) {
  const auto& c = model.config;
  for (const auto& id : mask.experts)
    if (!model.contains(id))
      throw InputError("mask references expert (" + std::to_string(id.layer) + ", " +
                       std::to_string(id.expert) + ") outside the model");

  std::size_t positions = 0;
  for (const auto& seq : batch) {
    detail::check_tokens<Scalar>(c, seq);
    if (seq.size() >= 2) positions += seq.size() - 1;
  }

  Gradients<Scalar> grads;
  if (mask.empty()) return grads;
  if (positions == 0) throw InputError("backward: batch has no predicted positions");
  grads.positions = positions;

  // Dense per-expert view of the mask for the inner loop.
  std::vector<Expert<Scalar>*> slot(static_cast<std::size_t>(c.n_layers) * c.n_experts, nullptr);
  for (const auto& id : mask.experts) {
    auto& g = grads.experts[id];
    g.w_in = Matrix<Scalar>::Zero(c.d_model, c.d_expert_hidden);
    g.w_out = Matrix<Scalar>::Zero(c.d_expert_hidden, c.d_model);
    slot[id.layer * c.n_experts + id.expert] = &g;
  }
  if (mask.embedding) grads.embedding = Matrix<Scalar>::Zero(c.vocab_size, c.d_model);
  if (mask.head) grads.head = Matrix<Scalar>::Zero(c.d_model, c.vocab_size);
  if (mask.routers) {
    grads.routers.assign(c.n_layers, Matrix<Scalar>::Zero(c.d_model, c.n_experts));
    grads.router_prior.assign(c.n_layers, RowVector<Scalar>::Zero(c.n_experts));
  }
  if (mask.shared) grads.shared.assign(c.n_layers, Matrix<Scalar>::Zero(c.d_model, c.d_model));

  const Scalar scale = Scalar(1) / Scalar(positions);
  const int k = c.top_k;
  std::vector<int> experts(c.n_layers * k);
  std::vector<Scalar> gates(c.n_layers * k);
  detail::TokenCache<Scalar> cache;
  Scalar loss_total = 0;

  for (const auto& seq : batch) {
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      const TokenId token = seq[t];
      const TokenId target = seq[t + 1];
      const RowVector<Scalar> h_final =
          detail::forward_token(model, token, experts.data(), gates.data(), &cache);
      RowVector<Scalar> logits = h_final * model.head;
      const Scalar m = logits.maxCoeff();
      RowVector<Scalar> probs = (logits.array() - m).exp();
      const Scalar z = probs.sum();
      loss_total += std::log(z) + m - logits[target];
      probs /= z;
      RowVector<Scalar> d_logits = probs;
      d_logits[target] -= Scalar(1);
      d_logits *= scale;

      if (mask.head) grads.head.noalias() += h_final.transpose() * d_logits;
      RowVector<Scalar> dh = d_logits * model.head.transpose();

      for (int l = c.n_layers - 1; l >= 0; --l) {
        const auto& layer = model.layers[l];
        const RowVector<Scalar>& h_in = cache.hidden[l];
        const int* sel = experts.data() + l * k;
        const Scalar* g = gates.data() + l * k;

        RowVector<Scalar> dh_in = dh + dh * layer.shared.transpose();
        if (mask.shared) grads.shared[l].noalias() += h_in.transpose() * dh;
        std::vector<Scalar> d_gate(k);
        for (int s = 0; s < k; ++s) {
          const auto& e = layer.experts[sel[s]];
          const RowVector<Scalar>& a = cache.pre_act[l][s];
          d_gate[s] = dh.dot(cache.expert_out[l][s]);
          const RowVector<Scalar> df = g[s] * dh;
          const RowVector<Scalar> act = a.unaryExpr([](Scalar x) { return silu(x); });
          const RowVector<Scalar> da =
              (df * e.w_out.transpose()).cwiseProduct(a.unaryExpr([](Scalar x) {
                return silu_derivative(x);
              }));
          if (Expert<Scalar>* target_grad = slot[l * c.n_experts + sel[s]]) {
            target_grad->w_out.noalias() += act.transpose() * df;
            target_grad->w_in.noalias() += h_in.transpose() * da;
          }
          dh_in.noalias() += da * e.w_in.transpose();
        }
        // Softmax over the selected logits: dz_s = g_s (dg_s - sum_j g_j dg_j).
        Scalar weighted = 0;
        for (int s = 0; s < k; ++s) weighted += g[s] * d_gate[s];
        for (int s = 0; s < k; ++s) {
          const Scalar dz = g[s] * (d_gate[s] - weighted);
          dh_in.noalias() += dz * layer.router.col(sel[s]).transpose();
          if (mask.routers) {
            grads.routers[l].col(sel[s]) += dz * h_in.transpose();
            grads.router_prior[l][sel[s]] += dz;
          }
        }
        dh = std::move(dh_in);
      }
      if (mask.embedding) grads.embedding.row(token) += dh;
    }
  }
  grads.loss = loss_total * scale;
  return grads;
}

/// Removes `victims` from routing candidacy. Weights are kept; pruned experts
/// simply never win the top-k.
template <typename Scalar>
MoeModel<Scalar> prune_experts(const MoeModel<Scalar>& model, const ExpertSet& victims) {
  MoeModel<Scalar> pruned = model;
  for (const auto& id : victims) {
    if (!model.contains(id))
      throw InputError("prune: expert (" + std::to_string(id.layer) + ", " +
                       std::to_string(id.expert) + ") outside the model");
    pruned.layers[id.layer].routable[id.expert] = 0;
  }
  for (int l = 0; l < model.config.n_layers; ++l)
    if (pruned.survivors(l) < model.config.top_k)
      throw ConfigError("prune: layer " + std::to_string(l) + " would keep " +
                        std::to_string(pruned.survivors(l)) + " experts, fewer than top_k = " +
                        std::to_string(model.config.top_k));
  return pruned;
}

}  // namespace rise
