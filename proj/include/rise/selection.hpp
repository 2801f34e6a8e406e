#pragma once

// Layer-aware expert subnetwork selection.
//
// Shallow and deep layers are ranked by target-language specificity
// S = a_target / a_mean, middle layers by cross-language overlap
// O = 1 / (1 + sigma / mu). Both are boosted by activation magnitude,
// Spec = S (1 + alpha a_target) and Ovlp = O (1 + alpha a_mean), and the
// budget K is split across the three layer groups with floor/floor/remainder.

#include "rise/routing_stats.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rise {

/// Returns 0 when a_mean is 0.
double specificity(double a_target, double a_mean);

/// Coefficient-of-variation overlap score with population sigma. Returns 0
/// when the column mean is 0. Throws InputError for fewer than two entries.
double overlap_score(std::span<const double> column);

inline double composite_spec(double specificity_score, double a_target, double alpha) {
  return specificity_score * (1.0 + alpha * a_target);
}

inline double composite_ovlp(double overlap, double a_mean, double alpha) {
  return overlap * (1.0 + alpha * a_mean);
}

struct Budget {
  int shallow = 0;
  int middle = 0;
  int deep = 0;

  int total() const { return shallow + middle + deep; }
  bool operator==(const Budget&) const = default;
};

using Ratios = std::array<double, 3>;

/// K_s = floor(K rho_s), K_m = floor(K rho_m), K_d = K - K_s - K_m.
Budget allocate_budget(int k, const Ratios& ratios);

struct SelectionConfig {
  std::string target;
  int budget = 128;
  LayerBoundaries boundaries;
  Ratios ratios{0.35, 0.25, 0.40};
  double alpha = 10.0;

  void validate(int n_layers, int n_experts) const;
};

enum class ScoreKind { Specificity, Overlap };

struct ScoredExpert {
  ExpertId id;
  double score = 0;
  ScoreKind kind = ScoreKind::Specificity;
  int phase = 1;  // 1 shallow, 2 middle, 3 deep
};

struct Selection {
  SelectionConfig config;
  Budget budget;
  std::vector<ScoredExpert> experts;  // sorted by id

  ExpertSet ids() const;
};

/// Composite score of one expert under the criterion of its layer group.
ScoredExpert score_expert(const ProfileMatrix& profiles, int target_row, ExpertId id,
                          const SelectionConfig& config);

/// Three-phase selection: top-K_s shallow experts by Spec, top-K_m middle
/// experts by Ovlp, top-K_d deep experts by Spec, skipping experts already
/// chosen. Ties go to the lower (layer, expert).
Selection select_subnetwork(const ProfileMatrix& profiles, const SelectionConfig& config);

std::string selection_to_json(const Selection& selection);
Selection selection_from_json(const std::string& text);
void save_selection(const Selection& selection, const std::filesystem::path& path);
Selection load_selection(const std::filesystem::path& path);

}  // namespace rise
