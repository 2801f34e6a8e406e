#pragma once

#include "rise/moe.hpp"

#include <random>
#include <vector>

namespace rise::testing {

// 2-dimensional, 2-expert, top-1 model whose routing can be worked out by
// hand. Layer 0 routes on the sign of h[0]; layers 1 and 2 are pass-through
// (zero shared map, zero w_out) and always pick expert 0 through the prior.
//
//   tokens: 0 -> (1, 0.5)   1 -> (-1, 0.25)   2 -> (0.5, -1)
inline Model hand_model() {
  ModelConfig c;
  c.vocab_size = 3;
  c.d_model = 2;
  c.d_expert_hidden = 2;
  c.n_layers = 3;
  c.n_experts = 2;
  c.top_k = 1;
  c.max_seq_len = 8;
  Model m = init_model<double>(c);
  m.embedding << 1, 0.5, -1, 0.25, 0.5, -1;
  for (int l = 0; l < 3; ++l) {
    auto& layer = m.layers[l];
    layer.experts[0].w_in << 1, 0, 0, 1;
    layer.experts[1].w_in << -1, 0.5, 0.3, 1;
    if (l == 0) {
      layer.router << 2, -2, 0, 0;
      layer.router_prior << 0, 0;
      layer.shared << 0.1, 0, 0, -0.2;
      layer.experts[0].w_out << 0.5, 0, 0, 0.5;
      layer.experts[1].w_out << 0.2, -0.1, 0.4, 0.3;
    } else {
      layer.router.setZero();
      layer.router_prior << 1, 0;
      layer.shared.setZero();
      layer.experts[0].w_out.setZero();
      layer.experts[1].w_out.setZero();
    }
  }
  m.head << 1, 0, -1, 0, 1, 0.5;
  return m;
}

inline ModelConfig small_config(std::uint64_t seed, int n_experts = 4, int top_k = 2) {
  ModelConfig c;
  c.vocab_size = 10;
  c.d_model = 4;
  c.d_expert_hidden = 3;
  c.n_layers = 3;
  c.n_experts = n_experts;
  c.top_k = top_k;
  c.max_seq_len = 12;
  c.seed = seed;
  return c;
}

inline std::vector<TokenSequence> random_batch(std::mt19937_64& rng, int vocab, int n, int max_len) {
  std::uniform_int_distribution<int> tok(0, vocab - 1), len(2, max_len);
  std::vector<TokenSequence> batch(n);
  for (auto& seq : batch) {
    seq.resize(len(rng));
    for (auto& t : seq) t = tok(rng);
  }
  return batch;
}

inline double scalar_silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace rise::testing
