#include "rise/isolation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

namespace rise {

using nlohmann::json;

RoutingSupport routing_support(const RoutingProfile& profile) {
  RoutingSupport support(profile.n_layers);
  for (int l = 0; l < profile.n_layers; ++l)
    for (int i = 0; i < profile.n_experts; ++i)
      if (profile.count(l, i) > 0) support[l].push_back(i);
  return support;
}

double overlap_mass(const RoutingProfile& profile, const ExpertSet& selected) {
  double mass = 0;
  for (const auto& id : selected) mass += profile.freq(id);
  return mass;
}

ExpertSet shared_with_support(const RoutingProfile& profile, const ExpertSet& selected) {
  ExpertSet shared;
  for (const auto& id : selected)
    if (profile.count(id) > 0) shared.insert(id);
  return shared;
}

GradientIsolationResult verify_gradient_isolation(const Model& model,
                                                  const std::vector<TokenSequence>& batch,
                                                  const ExpertSet& selected) {
  const auto profile = collect_profile(model, batch, "probe");
  ParameterMask mask;
  mask.experts = all_experts(model.config);
  const auto grads = backward(model, batch, mask);

  GradientIsolationResult result;
  for (const auto& [id, g] : grads.experts) {
    const double m = std::max(g.w_in.cwiseAbs().maxCoeff(), g.w_out.cwiseAbs().maxCoeff());
    result.max_abs_gradient[id] = m;
    if (profile.count(id) > 0) continue;
    result.outside_support.insert(id);
    if (selected.count(id)) result.selected_outside_support.insert(id);
    // Bit-level zero; -0.0 would only arise from arithmetic that never ran.
    const bool zero = (g.w_in.array() == 0.0).all() && (g.w_out.array() == 0.0).all();
    if (!zero) {
      result.violations.insert(id);
      result.passed = false;
    }
  }
  return result;
}

std::string InvarianceResult::summary() const {
  switch (status) {
    case InvarianceStatus::Pass:
      return "disjoint: logits bitwise identical on " + std::to_string(sequences_checked) +
             " sequences";
    case InvarianceStatus::Fail:
      return "disjoint: logits differ on " + std::to_string(sequences_differing) + " of " +
             std::to_string(sequences_checked) + " sequences";
    case InvarianceStatus::NotDisjoint:
      return "not disjoint (" + std::to_string(shared_experts.size()) +
             " shared experts): logits differ on " + std::to_string(sequences_differing) +
             " of " + std::to_string(sequences_checked) + " sequences";
  }
  return {};
}

namespace {

bool bitwise_same(const MatrixXd& a, const MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

InvarianceResult verify_exact_invariance(const Model& model_before, const Model& model_after,
                                         const std::vector<TokenSequence>& corpus_other,
                                         const ExpertSet& selected,
                                         const RoutingProfile& profile_other) {
  InvarianceResult result;
  result.shared_experts = shared_with_support(profile_other, selected);
  for (const auto& seq : corpus_other) {
    if (seq.empty()) continue;
    ++result.sequences_checked;
    if (!bitwise_same(forward(model_before, seq).logits, forward(model_after, seq).logits))
      ++result.sequences_differing;
  }
  if (!result.shared_experts.empty())
    result.status = InvarianceStatus::NotDisjoint;
  else if (result.sequences_differing > 0)
    result.status = InvarianceStatus::Fail;
  return result;
}

double spectral_norm(const MatrixXd& matrix, double tolerance) {
  if (matrix.size() == 0) return 0.0;
  const Eigen::Index n = matrix.cols();
  // Deterministic start with a component along every right singular vector
  // in the generic case.
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  v.normalize();
  double sigma = 0;
  for (int iter = 0; iter < 10000; ++iter) {
    const Eigen::VectorXd u = matrix * v;
    Eigen::VectorXd w = matrix.transpose() * u;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    const double next = std::sqrt(norm);
    v = w / norm;
    if (std::abs(next - sigma) <= tolerance * next) return next;
    sigma = next;
  }
  return sigma;
}

ExpertLipschitz expert_lipschitz(const Expert<double>& expert, double h_bound, double radius) {
  ExpertLipschitz out;
  out.input_factor = kSiluDerivativeBound * h_bound * (spectral_norm(expert.w_out) + radius);
  out.output_factor = h_bound * spectral_norm(expert.w_in);
  out.constant = std::hypot(out.input_factor, out.output_factor);
  return out;
}

namespace {

/// Largest norm of each layer's input state over every token of `corpus`.
std::vector<double> max_hidden_norms(const Model& model, const std::vector<TokenSequence>& corpus) {
  const auto& c = model.config;
  std::vector<double> norms(c.n_layers, 0.0);
  std::vector<int> experts(c.n_layers * c.top_k);
  std::vector<double> gates(experts.size());
  detail::TokenCache<double> cache;
  for (const auto& seq : corpus) {
    detail::check_tokens<double>(c, seq);
    for (TokenId t : seq) {
      detail::forward_token(model, t, experts.data(), gates.data(), &cache);
      for (int l = 0; l < c.n_layers; ++l)
        norms[l] = std::max(norms[l], cache.hidden[l].norm());
    }
  }
  return norms;
}

}  // namespace

LipschitzEstimate estimate_lipschitz(const Model& model, const std::vector<TokenSequence>& samples,
                                     double safety_factor, double radius) {
  if (!(safety_factor >= 1.0)) throw ConfigError("lipschitz safety factor must be >= 1");
  if (!(radius >= 0.0)) throw ConfigError("lipschitz radius must be >= 0");
  if (std::none_of(samples.begin(), samples.end(), [](const auto& s) { return !s.empty(); }))
    throw InputError("estimate_lipschitz: no sample tokens");
  const auto& c = model.config;
  LipschitzEstimate est;
  est.safety_factor = safety_factor;
  est.radius = radius;
  est.hidden_norm_bound = max_hidden_norms(model, samples);
  for (double& h : est.hidden_norm_bound) h *= safety_factor;

  est.layer_factor.resize(c.n_layers);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& layer = model.layers[l];
    const double h = est.hidden_norm_bound[l];
    double max_product = 0;
    for (int i = 0; i < c.n_experts; ++i) {
      est.experts[{l, i}] = expert_lipschitz(layer.experts[i], h, radius);
      const double w1 = spectral_norm(layer.experts[i].w_in) + radius;
      const double w2 = spectral_norm(layer.experts[i].w_out) + radius;
      max_product = std::max(max_product, w1 * w2);
    }
    // identity + shared path + expert Jacobians + gate sensitivity, where the
    // gate change has l1 norm <= 2 |d logits|_inf and |F(h)| <= H |w1| |w2|.
    est.layer_factor[l] = 1.0 + spectral_norm(layer.shared) + kSiluDerivativeBound * max_product +
                          2.0 * h * max_product * spectral_norm(layer.router);
  }
  est.head = spectral_norm(model.head);
  est.propagation.assign(c.n_layers, est.head);
  for (int l = c.n_layers - 2; l >= 0; --l)
    est.propagation[l] = est.propagation[l + 1] * est.layer_factor[l + 1];
  return est;
}

std::map<ExpertId, double> update_norms(const Model& before, const Model& after) {
  if (!(before.config == after.config)) throw InputError("models have different configs");
  auto same = [](const MatrixXd& a, const MatrixXd& b) { return bitwise_same(a, b); };
  bool frozen = same(before.embedding, after.embedding) && same(before.head, after.head);
  for (int l = 0; l < before.config.n_layers; ++l) {
    const auto& a = before.layers[l];
    const auto& b = after.layers[l];
    frozen = frozen && same(a.router, b.router) && same(a.shared, b.shared) &&
             same(a.router_prior, b.router_prior) && a.routable == b.routable;
  }
  if (!frozen) throw InputError("models differ outside the expert weights");

  std::map<ExpertId, double> norms;
  for (const auto& id : all_experts(before.config)) {
    const auto& e0 = before.expert(id);
    const auto& e1 = after.expert(id);
    const double n1 = (e1.w_in - e0.w_in).squaredNorm();
    const double n2 = (e1.w_out - e0.w_out).squaredNorm();
    norms[id] = std::sqrt(n1 + n2);
  }
  return norms;
}

PerturbationResult perturbation_check(const Model& model_before, const Model& model_after,
                                      const ExpertSet& selected,
                                      const std::vector<TokenSequence>& corpus,
                                      const RoutingProfile& profile,
                                      const LipschitzEstimate& lipschitz) {
  const auto& c = model_before.config;
  if (profile.n_layers != c.n_layers || profile.n_experts != c.n_experts)
    throw InputError("profile shape does not match the model");
  const auto deltas = update_norms(model_before, model_after);

  PerturbationResult result;
  result.language = profile.language;
  result.overlap_mass = overlap_mass(profile, selected);

  for (const auto& [id, delta] : deltas) {
    if (delta == 0.0) continue;
    if (delta > lipschitz.radius)
      throw InputError("update of expert (" + std::to_string(id.layer) + ", " +
                       std::to_string(id.expert) + ") exceeds the Lipschitz radius");
    result.bound += lipschitz.propagation[id.layer] * profile.freq(id) * lipschitz.expert(id) * delta;
  }

  double total = 0;
  std::size_t tokens = 0;
  for (const auto& seq : corpus) {
    if (seq.empty()) continue;
    const auto before = forward(model_before, seq);
    const auto after = forward(model_after, seq);
    if (!(before.trace.experts == after.trace.experts)) result.routing_stable = false;
    for (Eigen::Index t = 0; t < before.logits.rows(); ++t)
      total += (after.logits.row(t) - before.logits.row(t)).norm();
    tokens += seq.size();
  }
  if (tokens == 0) throw InputError("perturbation_check: empty corpus");
  result.measured = total / static_cast<double>(tokens);

  const auto norms = max_hidden_norms(model_after, corpus);
  for (int l = 0; l < c.n_layers; ++l)
    if (norms[l] > lipschitz.hidden_norm_bound[l]) result.within_norm_bound = false;

  if (result.routing_stable && result.within_norm_bound)
    result.holds = result.measured <= result.bound;
  return result;
}

DisjointScenario make_disjoint_scenario(std::uint64_t seed, bool shared_expert,
                                        int other_sequences) {
  ModelConfig config;
  config.vocab_size = 32;
  config.d_model = 8;
  config.d_expert_hidden = 8;
  config.n_layers = 4;
  config.n_experts = 4;
  config.top_k = 2;
  config.max_seq_len = 16;
  config.seed = seed;
  InitScales scales;
  scales.embedding = 0.5;
  scales.router = 0.1;
  DisjointScenario sc{init_model<double>(config, scales), {}, {}, {}, {}};
  Model& m = sc.model;

  // Channel 0 carries the language sign (+4 for tokens 0..15, -4 for 16..31)
  // and is left untouched by every layer, so routing stays split at depth.
  // Channel 1 is a constant +4 used by the optional shared expert.
  constexpr double kChannel = 4.0, kRouterGain = 5.0;
  const int half = config.vocab_size / 2;
  for (int t = 0; t < config.vocab_size; ++t) {
    m.embedding(t, 0) = t < half ? kChannel : -kChannel;
    m.embedding(t, 1) = kChannel;
  }
  for (int l = 0; l < config.n_layers; ++l) {
    auto& layer = m.layers[l];
    layer.shared.row(0).setZero();
    layer.shared.col(0).setZero();
    layer.shared.row(1).setZero();
    layer.shared.col(1).setZero();
    layer.router_prior.setZero();
    for (int i = 0; i < config.n_experts; ++i) {
      layer.router(0, i) = i < config.n_experts / 2 ? kRouterGain : -kRouterGain;
      layer.router(1, i) = 0;
      layer.experts[i].w_out.col(0).setZero();
      layer.experts[i].w_out.col(1).setZero();
    }
  }
  if (shared_expert) {
    m.layers[0].router(0, 0) = 0;
    m.layers[0].router(1, 0) = 4 * kRouterGain;
  }

  std::mt19937_64 rng(seed ^ 0x5bd1e995u);
  std::uniform_int_distribution<int> target_tok(0, half - 1), other_tok(half, config.vocab_size - 1);
  auto make = [&](auto& dist, int n) {
    std::vector<TokenSequence> out(n);
    for (auto& seq : out) {
      seq.resize(config.max_seq_len);
      for (auto& t : seq) t = dist(rng);
    }
    return out;
  };
  sc.target_train = make(target_tok, 64);
  sc.target_held_out = make(target_tok, 16);
  sc.other_held_out = make(other_tok, other_sequences);

  const auto profile = collect_profile(m, sc.target_train, "target");
  const auto support = routing_support(profile);
  for (int l = 0; l < config.n_layers; ++l)
    for (int i : support[l]) sc.selected.insert({l, i});
  return sc;
}

namespace {

json expert_json(ExpertId id) { return json{{"layer", id.layer}, {"expert", id.expert}}; }

json set_json(const ExpertSet& set) {
  json out = json::array();
  for (const auto& id : set) out.push_back(expert_json(id));
  return out;
}

const char* status_name(InvarianceStatus s) {
  switch (s) {
    case InvarianceStatus::Pass: return "pass";
    case InvarianceStatus::Fail: return "fail";
    case InvarianceStatus::NotDisjoint: return "not_disjoint";
  }
  return "";
}

}  // namespace

std::string report_to_json(const IsolationReport& r) {
  json j;
  j["mode"] = r.mode;
  if (!r.optimizer.empty()) j["optimizer"] = r.optimizer;
  j["status"] = r.status;
  j["supports"] = json::object();
  for (const auto& [lang, sup] : r.supports) j["supports"][lang] = sup;
  j["overlap_mass"] = r.overlap_mass;
  if (r.has_gradients) {
    json g;
    g["passed"] = r.gradients.passed;
    g["outside_support"] = set_json(r.gradients.outside_support);
    g["violations"] = set_json(r.gradients.violations);
    g["selected_outside_support"] = set_json(r.gradients.selected_outside_support);
    j["gradient_isolation"] = g;
  }
  if (r.has_invariance) {
    j["invariance"] = {{"status", status_name(r.invariance.status)},
                       {"summary", r.invariance.summary()},
                       {"shared_experts", set_json(r.invariance.shared_experts)},
                       {"sequences_checked", r.invariance.sequences_checked},
                       {"sequences_differing", r.invariance.sequences_differing}};
  }
  if (r.has_lipschitz) {
    json experts = json::array();
    for (const auto& [id, e] : r.lipschitz.experts) {
      auto row = expert_json(id);
      row["L"] = e.constant;
      experts.push_back(row);
    }
    j["lipschitz"] = {{"safety_factor", r.lipschitz.safety_factor},
                      {"radius", r.lipschitz.radius},
                      {"head", r.lipschitz.head},
                      {"hidden_norm_bound", r.lipschitz.hidden_norm_bound},
                      {"layer_factor", r.lipschitz.layer_factor},
                      {"propagation", r.lipschitz.propagation},
                      {"experts", experts}};
  }
  json pert = json::array();
  for (const auto& p : r.perturbations)
    pert.push_back({{"language", p.language},
                    {"measured", p.measured},
                    {"bound", p.bound},
                    {"looseness", p.looseness()},
                    {"overlap_mass", p.overlap_mass},
                    {"routing_stable", p.routing_stable},
                    {"within_norm_bound", p.within_norm_bound},
                    {"holds", p.holds}});
  j["perturbation"] = pert;
  j["loss_delta"] = r.loss_delta;
  return j.dump(2) + "\n";
}

}  // namespace rise
