#include "rise/routing_stats.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rise {

using nlohmann::json;

RoutingProfile::RoutingProfile(std::string language, int n_layers, int n_experts)
    : language(std::move(language)),
      n_layers(n_layers),
      n_experts(n_experts),
      counts(static_cast<std::size_t>(n_layers) * n_experts, 0) {}

RoutingProfile& RoutingProfile::operator+=(const RoutingProfile& other) {
  if (other.n_layers != n_layers || other.n_experts != n_experts)
    throw InputError("cannot add routing profiles of different shapes");
  token_total += other.token_total;
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

ProfileMatrix ProfileMatrix::from_profiles(const std::vector<RoutingProfile>& profiles) {
  if (profiles.empty()) throw InputError("profile matrix needs at least one profile");
  const int n_layers = profiles[0].n_layers, n_experts = profiles[0].n_experts;
  ProfileMatrix matrix;
  matrix.layers.assign(n_layers, MatrixXd::Zero(static_cast<Eigen::Index>(profiles.size()),
                                                n_experts));
  for (std::size_t m = 0; m < profiles.size(); ++m) {
    const auto& p = profiles[m];
    if (p.n_layers != n_layers || p.n_experts != n_experts)
      throw InputError("profile '" + p.language + "' has a different shape");
    if (p.token_total == 0) throw InputError("profile '" + p.language + "' has no tokens");
    if (matrix.language_index(p.language) >= 0)
      throw InputError("duplicate language '" + p.language + "'");
    matrix.languages.push_back(p.language);
    for (int l = 0; l < n_layers; ++l)
      for (int i = 0; i < n_experts; ++i) matrix.layers[l](m, i) = p.freq(l, i);
  }
  return matrix;
}

int ProfileMatrix::language_index(const std::string& language) const {
  auto it = std::find(languages.begin(), languages.end(), language);
  return it == languages.end() ? -1 : static_cast<int>(it - languages.begin());
}

void LayerBoundaries::validate(int n_layers) const {
  if (!(0 <= shallow_end && shallow_end < middle_end && middle_end < n_layers))
    throw InputError("layer boundaries (" + std::to_string(shallow_end) + ", " +
                     std::to_string(middle_end) + ") must satisfy 0 <= L1 < L2 < " +
                     std::to_string(n_layers));
}

void accumulate_trace(RoutingProfile& profile, const RoutingTrace<double>& trace) {
  if (trace.n_layers != profile.n_layers) throw InputError("trace/profile layer mismatch");
  for (std::size_t t = 0; t < trace.n_tokens; ++t)
    for (int l = 0; l < trace.n_layers; ++l) {
      const int* sel = trace.experts_at(t, l);
      for (int s = 0; s < trace.top_k; ++s) ++profile.counts[l * profile.n_experts + sel[s]];
    }
  profile.token_total += trace.n_tokens;
}

LayerBoundaries scaled_boundaries(int n_layers) {
  if (n_layers < 3) throw InputError("scaled boundaries need at least 3 layers");
  LayerBoundaries b;
  b.shallow_end = std::max(0, static_cast<int>(std::lround(0.375 * n_layers)) - 1);
  b.middle_end = std::max(b.shallow_end + 1, static_cast<int>(std::lround(0.625 * n_layers)) - 1);
  b.middle_end = std::min(b.middle_end, n_layers - 2);
  return b;
}

RoutingProfile collect_profile(const Model& model, const std::vector<TokenSequence>& corpus,
                               const std::string& language, int threads) {
  RoutingProfile profile(language, model.config.n_layers, model.config.n_experts);
  const std::size_t n_shards =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(corpus.size(), 1));
  if (n_shards == 1) {
    for (const auto& seq : corpus) accumulate_trace(profile, hidden_states(model, seq).second);
  } else {
    std::vector<RoutingProfile> shards(n_shards, profile);
    std::vector<std::exception_ptr> errors(n_shards);
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < n_shards; ++w)
      workers.emplace_back([&, w] {
        try {
          const std::size_t begin = corpus.size() * w / n_shards;
          const std::size_t end = corpus.size() * (w + 1) / n_shards;
          for (std::size_t s = begin; s < end; ++s)
            accumulate_trace(shards[w], hidden_states(model, corpus[s]).second);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : workers) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (const auto& shard : shards) profile += shard;
  }
  if (profile.token_total == 0)
    throw InputError("collect_profile: corpus for '" + language + "' has no tokens");
  return profile;
}

namespace {

/// Ranks ids by count descending, then id ascending.
void rank_by_count(std::vector<ExpertId>& ids, const RoutingProfile& profile) {
  std::stable_sort(ids.begin(), ids.end(), [&](ExpertId a, ExpertId b) {
    const auto ca = profile.count(a), cb = profile.count(b);
    if (ca != cb) return ca > cb;
    return a < b;
  });
}

}  // namespace

ExpertSet global_topk(const RoutingProfile& profile, int k) {
  const int universe = profile.n_layers * profile.n_experts;
  if (k < 1 || k > universe)
    throw InputError("global_topk: K = " + std::to_string(k) + " outside [1, " +
                     std::to_string(universe) + "]");
  std::vector<ExpertId> ids;
  ids.reserve(universe);
  for (int l = 0; l < profile.n_layers; ++l)
    for (int i = 0; i < profile.n_experts; ++i) ids.push_back({l, i});
  rank_by_count(ids, profile);
  return ExpertSet(ids.begin(), ids.begin() + k);
}

std::vector<int> layer_topk(const RoutingProfile& profile, int layer, int k) {
  if (k < 1 || k > profile.n_experts)
    throw InputError("per-layer top-k = " + std::to_string(k) + " outside [1, " +
                     std::to_string(profile.n_experts) + "]");
  std::vector<ExpertId> ids;
  for (int i = 0; i < profile.n_experts; ++i) ids.push_back({layer, i});
  rank_by_count(ids, profile);
  std::vector<int> out;
  for (int s = 0; s < k; ++s) out.push_back(ids[s].expert);
  std::sort(out.begin(), out.end());
  return out;
}

double jaccard(const ExpertSet& a, const ExpertSet& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t common = 0;
  for (const auto& id : a) common += b.count(id);
  const std::size_t united = a.size() + b.size() - common;
  return static_cast<double>(common) / static_cast<double>(united);
}

SimilarityCurve layerwise_similarity(const RoutingProfile& profile,
                                     const RoutingProfile& reference, int per_layer_topk) {
  if (profile.n_layers != reference.n_layers || profile.n_experts != reference.n_experts)
    throw InputError("layerwise_similarity: profiles have different shapes");
  SimilarityCurve curve{profile.language, reference.language, {}};
  for (int l = 0; l < profile.n_layers; ++l) {
    ExpertSet a, b;
    for (int i : layer_topk(profile, l, per_layer_topk)) a.insert({l, i});
    for (int i : layer_topk(reference, l, per_layer_topk)) b.insert({l, i});
    curve.values.push_back(jaccard(a, b));
  }
  return curve;
}

RegionAverages region_average(const std::vector<double>& values, LayerBoundaries boundaries) {
  const int n = static_cast<int>(values.size());
  boundaries.validate(n);
  if (boundaries.middle_end >= n - 1)
    throw InputError("region_average: deep region (L2, L-1] is empty");
  auto mean = [&](int first, int last) {
    double sum = 0;
    for (int l = first; l <= last; ++l) sum += values[l];
    return sum / (last - first + 1);
  };
  return {mean(0, boundaries.shallow_end),
          mean(boundaries.shallow_end + 1, boundaries.middle_end),
          mean(boundaries.middle_end + 1, n - 1)};
}

RegionAverages region_average(const SimilarityCurve& curve, LayerBoundaries boundaries) {
  return region_average(curve.values, boundaries);
}

MatrixXd overlap_matrix(const std::vector<RoutingProfile>& profiles, int k) {
  if (profiles.size() < 2) throw InputError("overlap_matrix needs at least two profiles");
  std::vector<ExpertSet> sets;
  for (const auto& p : profiles) sets.push_back(global_topk(p, k));
  const auto m = static_cast<Eigen::Index>(profiles.size());
  MatrixXd out(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    out(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < m; ++j) out(i, j) = out(j, i) = jaccard(sets[i], sets[j]);
  }
  return out;
}

std::string profile_to_json(const RoutingProfile& profile) {
  json j;
  j["language"] = profile.language;
  j["token_total"] = profile.token_total;
  j["shape"] = {profile.n_layers, profile.n_experts};
  j["counts"] = profile.counts;
  return j.dump() + "\n";
}

RoutingProfile profile_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    RoutingProfile p(j.at("language").get<std::string>(), j.at("shape").at(0).get<int>(),
                     j.at("shape").at(1).get<int>());
    p.token_total = j.at("token_total").get<std::uint64_t>();
    p.counts = j.at("counts").get<std::vector<std::uint64_t>>();
    if (p.n_layers < 1 || p.n_experts < 1 ||
        p.counts.size() != static_cast<std::size_t>(p.n_layers) * p.n_experts)
      throw InputError("profile counts do not match shape");
    for (auto c : p.counts)
      if (c > p.token_total) throw InputError("profile count exceeds token_total");
    return p;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed profile JSON: ") + e.what());
  }
}

void save_profile(const RoutingProfile& profile, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << profile_to_json(profile);
}

RoutingProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return profile_from_json(buf.str());
}

}  // namespace rise
