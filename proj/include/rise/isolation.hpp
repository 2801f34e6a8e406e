#pragma once

// Checks that selective training stays inside the selected subnetwork:
//
//  * gradient isolation: experts outside a batch's routing support get an
//    exactly zero gradient;
//  * exact invariance: when the selected experts are disjoint from another
//    language's routing support at every layer, that language's logits are
//    bitwise unchanged by training;
//  * perturbation bound: with stable routing, the mean logit change of a
//    language is at most sum_l C_l sum_{i in S_l} p_{l,i} L_{l,i} |dtheta_{l,i}|.
//
// For the bound, L_{l,i} is a parameter-Lipschitz constant of expert (l, i)
// over hidden states of norm <= H_l, and C_l = |head|_2 prod_{m > l} Lambda_m
// propagates a change at layer l to the logits, with Lambda_m the
// hidden-state Lipschitz constant of layer m under fixed routing.

#include "rise/routing_stats.hpp"
#include "rise/training.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rise {

/// Per layer, the sorted experts with a nonzero activation count.
using RoutingSupport = std::vector<std::vector<int>>;

RoutingSupport routing_support(const RoutingProfile& profile);

/// Sum of the profile's activation frequencies over `selected`.
double overlap_mass(const RoutingProfile& profile, const ExpertSet& selected);

/// Selected experts that the profile's language activates at least once.
ExpertSet shared_with_support(const RoutingProfile& profile, const ExpertSet& selected);

struct GradientIsolationResult {
  bool passed = true;
  std::map<ExpertId, double> max_abs_gradient;  // every expert of the model
  ExpertSet outside_support;                    // asserted exactly zero
  ExpertSet violations;                         // nonzero despite no activation
  ExpertSet selected_outside_support;
};

/// Full expert gradient on `batch`; every expert the batch never activates
/// must have an exactly zero gradient tensor.
GradientIsolationResult verify_gradient_isolation(const Model& model,
                                                  const std::vector<TokenSequence>& batch,
                                                  const ExpertSet& selected = {});

enum class InvarianceStatus { Pass, Fail, NotDisjoint };

struct InvarianceResult {
  InvarianceStatus status = InvarianceStatus::Pass;
  ExpertSet shared_experts;  // selected experts inside the other language's support
  std::size_t sequences_checked = 0;
  std::size_t sequences_differing = 0;

  std::string summary() const;
};

/// Compares logits of `model_before` and `model_after` on `corpus_other`.
/// The bitwise claim is asserted only when `selected` is disjoint from the
/// routing support in `profile_other`; otherwise the overlap is reported and
/// the differing sequences are counted without failing.
InvarianceResult verify_exact_invariance(const Model& model_before, const Model& model_after,
                                         const std::vector<TokenSequence>& corpus_other,
                                         const ExpertSet& selected,
                                         const RoutingProfile& profile_other);

/// Largest singular value by power iteration on A^T A.
double spectral_norm(const MatrixXd& matrix, double tolerance = 1e-6);

struct ExpertLipschitz {
  double input_factor = 0;   // multiplies |d w_in|
  double output_factor = 0;  // multiplies |d w_out|
  double constant = 0;       // sqrt(input^2 + output^2)
};

struct LipschitzEstimate {
  double safety_factor = 1.5;
  double radius = 0;                      // admissible |d w| per expert
  std::vector<double> hidden_norm_bound;  // H_l, layer input norms
  std::map<ExpertId, ExpertLipschitz> experts;
  std::vector<double> layer_factor;  // Lambda_l
  double head = 0;                   // |head|_2
  std::vector<double> propagation;   // C_l = head * prod_{m > l} Lambda_m

  double expert(ExpertId id) const { return experts.at(id).constant; }
};

/// Parameter-Lipschitz bound of one expert for hidden states of norm <= h_bound
/// and weight changes with |d w_out|_2 <= radius:
///   input  = silu'_max * h_bound * (|w_out|_2 + radius)
///   output = h_bound * |w_in|_2
ExpertLipschitz expert_lipschitz(const Expert<double>& expert, double h_bound, double radius);

/// Estimates every constant from the hidden states the model produces on
/// `samples`; H_l is the sample maximum times `safety_factor`. Throws
/// InputError when the samples hold no tokens.
LipschitzEstimate estimate_lipschitz(const Model& model, const std::vector<TokenSequence>& samples,
                                     double safety_factor = 1.5, double radius = 0);

struct PerturbationResult {
  std::string language;
  double measured = 0;  // mean per-token |logits_after - logits_before|
  double bound = 0;
  double overlap_mass = 0;
  bool routing_stable = true;
  bool within_norm_bound = true;  // perturbed hidden states stay inside H_l
  bool holds = true;              // measured <= bound (only asserted when stable)

  double looseness() const { return measured > 0 ? bound / measured : 0.0; }
};

/// Per-expert Frobenius norm of the weight change between two models.
std::map<ExpertId, double> update_norms(const Model& before, const Model& after);

PerturbationResult perturbation_check(const Model& model_before, const Model& model_after,
                                      const ExpertSet& selected,
                                      const std::vector<TokenSequence>& corpus,
                                      const RoutingProfile& profile,
                                      const LipschitzEstimate& lipschitz);

/// Two vocabulary-disjoint languages whose routing is forced apart at every
/// layer through a dedicated language channel in the hidden state. With
/// `shared_expert`, expert 0 of layer 0 is additionally reachable by both
/// languages and included in the selection.
struct DisjointScenario {
  Model model;
  std::vector<TokenSequence> target_train;
  std::vector<TokenSequence> target_held_out;
  std::vector<TokenSequence> other_held_out;
  ExpertSet selected;
};

DisjointScenario make_disjoint_scenario(std::uint64_t seed, bool shared_expert = false,
                                        int other_sequences = 200);

struct IsolationReport {
  std::string mode;
  std::string optimizer;
  std::vector<std::string> status;
  std::map<std::string, RoutingSupport> supports;
  std::map<std::string, double> overlap_mass;
  GradientIsolationResult gradients;
  bool has_gradients = false;
  InvarianceResult invariance;
  bool has_invariance = false;
  LipschitzEstimate lipschitz;
  bool has_lipschitz = false;
  std::vector<PerturbationResult> perturbations;
  std::map<std::string, double> loss_delta;
};

std::string report_to_json(const IsolationReport& report);

}  // namespace rise
