#pragma once

#include "rise/moe.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rise {

enum class OptimizerKind { GradientDescent, Adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& name);

struct TrainConfig {
  int epochs = 3;
  int batch_size = 8;
  double learning_rate = 2e-5;
  std::uint64_t seed = 7;
  OptimizerKind optimizer = OptimizerKind::GradientDescent;
  /// Stop after this many optimizer steps (0 = run every epoch to the end).
  int max_steps = 0;

  void validate() const;
};

struct TrainResult {
  Model model;
  std::vector<double> loss_history;  // pre-update batch loss, one per step
};

/// Mask covering exactly the FFN weights of `selected`.
ParameterMask build_mask(const ExpertSet& selected, const Model& model);

/// Number of scalar parameters addressed by a mask.
std::size_t masked_parameter_count(const ParameterMask& mask, const ModelConfig& config);

/// Every expert of every layer.
ExpertSet all_experts(const ModelConfig& config);

/// Mini-batch training of the masked parameters on `corpus`. Each epoch visits
/// the sequences in an order shuffled from (seed, epoch). Unmasked parameters
/// are never written.
TrainResult train(const Model& model, const std::vector<TokenSequence>& corpus,
                  const ParameterMask& mask, const TrainConfig& config);

/// Recipe for base pre-training of the toy model: Adam, lr 0.005, 4 epochs of
/// batch 16.
TrainConfig default_pretrain_config();

/// Base pre-training on a mixed corpus: embeddings, all experts and the output
/// head are trained; routers and shared paths keep their initial values.
TrainResult pretrain(const Model& model, const std::vector<TokenSequence>& mixed_corpus,
                     const TrainConfig& config);

}  // namespace rise
