#pragma once

#include "rise/moe.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rise {

/// Exact per-(layer, expert) activation counts for one language.
struct RoutingProfile {
  std::string language;
  std::uint64_t token_total = 0;
  int n_layers = 0;
  int n_experts = 0;
  std::vector<std::uint64_t> counts;  // row-major [layer][expert]

  RoutingProfile() = default;
  RoutingProfile(std::string language, int n_layers, int n_experts);

  std::uint64_t count(int layer, int expert) const { return counts[layer * n_experts + expert]; }
  std::uint64_t count(ExpertId id) const { return count(id.layer, id.expert); }

  /// Activation frequency a = count / token_total.
  double freq(int layer, int expert) const {
    return static_cast<double>(count(layer, expert)) / static_cast<double>(token_total);
  }
  double freq(ExpertId id) const { return freq(id.layer, id.expert); }

  /// Adds the counts of another profile with the same shape.
  RoutingProfile& operator+=(const RoutingProfile& other);

  bool operator==(const RoutingProfile&) const = default;
};

/// Per-layer M x N_e frequency matrices with a fixed language order.
struct ProfileMatrix {
  std::vector<std::string> languages;
  std::vector<MatrixXd> layers;

  static ProfileMatrix from_profiles(const std::vector<RoutingProfile>& profiles);

  int n_layers() const { return static_cast<int>(layers.size()); }
  int n_experts() const { return layers.empty() ? 0 : static_cast<int>(layers[0].cols()); }
  int n_languages() const { return static_cast<int>(languages.size()); }
  /// Row index of `language`, or -1.
  int language_index(const std::string& language) const;
};

struct SimilarityCurve {
  std::string language;
  std::string reference;
  std::vector<double> values;
};

struct RegionAverages {
  double shallow = 0;
  double middle = 0;
  double deep = 0;
};

/// Layer boundaries (L1, L2) splitting layers into [0, L1], (L1, L2], (L2, L-1].
struct LayerBoundaries {
  int shallow_end = 0;  // L1
  int middle_end = 0;   // L2

  enum class Region { Shallow, Middle, Deep };
  Region region_of(int layer) const {
    if (layer <= shallow_end) return Region::Shallow;
    if (layer <= middle_end) return Region::Middle;
    return Region::Deep;
  }
  /// Throws InputError unless 0 <= L1 < L2 < n_layers.
  void validate(int n_layers) const;
};

/// Boundaries at the same layer fractions as the 48-layer (17, 29) split:
/// shallow ends at round(0.375 L) - 1, middle at round(0.625 L) - 1.
/// Gives (11, 19) for 32 layers and (2, 4) for 8.
LayerBoundaries scaled_boundaries(int n_layers);

/// Tallies the routing decisions of every token of every sequence. With
/// threads > 1 the corpus is split into contiguous shards whose integer counts
/// are summed, so the result is identical to the serial one.
RoutingProfile collect_profile(const Model& model, const std::vector<TokenSequence>& corpus,
                               const std::string& language, int threads = 1);

/// Adds one forward trace to `profile`.
void accumulate_trace(RoutingProfile& profile, const RoutingTrace<double>& trace);

/// The K most frequently activated experts across all layers; ties by
/// (layer, expert) ascending.
ExpertSet global_topk(const RoutingProfile& profile, int k);

/// The k most frequently activated experts of one layer (same tie rule).
std::vector<int> layer_topk(const RoutingProfile& profile, int layer, int k);

/// |a & b| / |a | b|, with J(empty, empty) = 1.
double jaccard(const ExpertSet& a, const ExpertSet& b);

SimilarityCurve layerwise_similarity(const RoutingProfile& profile,
                                     const RoutingProfile& reference, int per_layer_topk);

/// Mean of the curve over each region. The deep region must be non-empty.
RegionAverages region_average(const SimilarityCurve& curve, LayerBoundaries boundaries);
RegionAverages region_average(const std::vector<double>& values, LayerBoundaries boundaries);

/// Pairwise Jaccard of global top-K sets; symmetric with unit diagonal.
MatrixXd overlap_matrix(const std::vector<RoutingProfile>& profiles, int k);

// Profile file: {"language", "token_total", "shape": [L, N_e], "counts": [...]}.
std::string profile_to_json(const RoutingProfile& profile);
RoutingProfile profile_from_json(const std::string& text);
void save_profile(const RoutingProfile& profile, const std::filesystem::path& path);
RoutingProfile load_profile(const std::filesystem::path& path);

}  // namespace rise
