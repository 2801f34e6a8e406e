#include "rise/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rise {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "sgd";
}

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "sgd" || name == "gd") return OptimizerKind::GradientDescent;
  if (name == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be finite and >= 0");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
}

ExpertSet all_experts(const ModelConfig& config) {
  ExpertSet out;
  for (int l = 0; l < config.n_layers; ++l)
    for (int i = 0; i < config.n_experts; ++i) out.insert({l, i});
  return out;
}

ParameterMask build_mask(const ExpertSet& selected, const Model& model) {
  for (const auto& id : selected)
    if (!model.contains(id))
      throw InputError("expert (" + std::to_string(id.layer) + ", " + std::to_string(id.expert) +
                       ") outside the model");
  ParameterMask mask;
  mask.experts = selected;
  return mask;
}

std::size_t masked_parameter_count(const ParameterMask& mask, const ModelConfig& config) {
  std::size_t n = mask.experts.size() * config.expert_parameter_count();
  if (mask.embedding) n += static_cast<std::size_t>(config.vocab_size) * config.d_model;
  if (mask.head) n += static_cast<std::size_t>(config.vocab_size) * config.d_model;
  const std::size_t d = config.d_model, layers = config.n_layers;
  if (mask.routers) n += layers * (d + 1) * config.n_experts;
  if (mask.shared) n += layers * d * d;
  return n;
}

namespace {

/// Per-tensor optimizer. Moments are kept only for the tensors it touches.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void begin_step() { ++step_; }

  void apply(MatrixXd& param, const MatrixXd& grad, std::size_t slot) {
    if (kind_ == OptimizerKind::GradientDescent) {
      param.noalias() -= lr_ * grad;
      return;
    }
    if (slot >= first_.size()) {
      first_.resize(slot + 1);
      second_.resize(slot + 1);
    }
    auto& m = first_[slot];
    auto& v = second_[slot];
    if (m.size() == 0) {
      m = MatrixXd::Zero(grad.rows(), grad.cols());
      v = MatrixXd::Zero(grad.rows(), grad.cols());
    }
    m = kBeta1 * m + (1 - kBeta1) * grad;
    v = kBeta2 * v + (1 - kBeta2) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(kBeta1, step_), c2 = 1 - std::pow(kBeta2, step_);
    param.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  OptimizerKind kind_;
  double lr_;
  int step_ = 0;
  std::vector<MatrixXd> first_, second_;
};

}  // namespace

TrainResult train(const Model& model, const std::vector<TokenSequence>& corpus,
                  const ParameterMask& mask, const TrainConfig& config) {
  config.validate();
  std::vector<std::size_t> usable;
  for (std::size_t s = 0; s < corpus.size(); ++s)
    if (corpus[s].size() >= 2) usable.push_back(s);
  if (usable.empty()) throw InputError("train: corpus has no sequence with >= 2 tokens");
  for (const auto& id : mask.experts)
    if (!model.contains(id)) throw InputError("train: mask references an expert outside the model");

  TrainResult result{model, {}};
  Model& m = result.model;
  Optimizer opt(config.optimizer, config.learning_rate);
  const int n_experts = model.config.n_experts;
  std::size_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order = usable;
    std::mt19937_64 rng(config.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (config.max_steps > 0 && step >= static_cast<std::size_t>(config.max_steps)) return result;
      std::vector<TokenSequence> batch;
      for (std::size_t j = start; j < std::min(order.size(), start + config.batch_size); ++j)
        batch.push_back(corpus[order[j]]);
      const auto grads = backward(m, batch, mask);
      if (!mask.empty() && !std::isfinite(grads.loss))
        throw TrainingError("non-finite training loss", step);
      result.loss_history.push_back(mask.empty() ? corpus_loss(m, batch) : grads.loss);

      opt.begin_step();
      for (const auto& [id, g] : grads.experts) {
        const std::size_t slot = 2 * (static_cast<std::size_t>(id.layer) * n_experts + id.expert);
        opt.apply(m.expert(id).w_in, g.w_in, slot);
        opt.apply(m.expert(id).w_out, g.w_out, slot + 1);
      }
      const std::size_t tail = 2 * static_cast<std::size_t>(model.config.n_layers) * n_experts;
      if (mask.embedding) opt.apply(m.embedding, grads.embedding, tail);
      if (mask.head) opt.apply(m.head, grads.head, tail + 1);
      for (int l = 0; l < static_cast<int>(grads.routers.size()); ++l) {
        opt.apply(m.layers[l].router, grads.routers[l], tail + 2 + 3 * l);
        MatrixXd prior = m.layers[l].router_prior;
        opt.apply(prior, grads.router_prior[l], tail + 3 + 3 * l);
        m.layers[l].router_prior = prior.row(0);
      }
      for (int l = 0; l < static_cast<int>(grads.shared.size()); ++l)
        opt.apply(m.layers[l].shared, grads.shared[l], tail + 4 + 3 * l);
      ++step;
    }
  }
  return result;
}

TrainConfig default_pretrain_config() {
  TrainConfig config;
  config.epochs = 4;
  config.batch_size = 16;
  config.learning_rate = 0.005;
  config.optimizer = OptimizerKind::Adam;
  return config;
}

TrainResult pretrain(const Model& model, const std::vector<TokenSequence>& mixed_corpus,
                     const TrainConfig& config) {
  ParameterMask mask;
  mask.experts = all_experts(model.config);
  mask.embedding = true;
  mask.head = true;
  return train(model, mixed_corpus, mask, config);
}

}  // namespace rise
