#include "rise/selection.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace rise {

double specificity(double a_target, double a_mean) {
  if (a_mean == 0.0) return 0.0;
  return a_target / a_mean;
}

double overlap_score(std::span<const double> column) {
  if (column.size() < 2) throw InputError("overlap_score needs at least two languages");
  const double n = static_cast<double>(column.size());
  double sum = 0;
  for (double x : column) sum += x;
  const double mean = sum / n;
  if (mean == 0.0) return 0.0;
  double sq = 0;
  for (double x : column) sq += (x - mean) * (x - mean);
  const double cv = std::sqrt(sq / n) / mean;
  return 1.0 / (1.0 + cv);
}

Budget allocate_budget(int k, const Ratios& ratios) {
  // The slack absorbs representation error when K * rho is an exact integer
  // (e.g. 100 * 0.29 evaluates to 28.999999999999996).
  constexpr double kSlack = 1e-9;
  Budget b;
  b.shallow = static_cast<int>(std::floor(k * ratios[0] + kSlack));
  b.middle = static_cast<int>(std::floor(k * ratios[1] + kSlack));
  b.deep = k - b.shallow - b.middle;
  return b;
}

void SelectionConfig::validate(int n_layers, int n_experts) const {
  if (target.empty()) throw ConfigError("selection needs a target language");
  const int universe = n_layers * n_experts;
  if (budget < 1 || budget > universe)
    throw ConfigError("budget K = " + std::to_string(budget) + " outside [1, " +
                      std::to_string(universe) + "]");
  try {
    boundaries.validate(n_layers);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  for (double r : ratios)
    if (!(r >= 0.0) || !std::isfinite(r)) throw ConfigError("allocation ratios must be >= 0");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9)
    throw ConfigError("allocation ratios must sum to 1");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be >= 0");
}

ExpertSet Selection::ids() const {
  ExpertSet out;
  for (const auto& e : experts) out.insert(e.id);
  return out;
}

ScoredExpert score_expert(const ProfileMatrix& profiles, int target_row, ExpertId id,
                          const SelectionConfig& config) {
  const auto column = profiles.layers[id.layer].col(id.expert);  // strided: rows are languages
  std::vector<double> values(static_cast<std::size_t>(column.size()));
  for (Eigen::Index m = 0; m < column.size(); ++m) values[m] = column(m);
  double sum = 0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());

  ScoredExpert scored;
  scored.id = id;
  switch (config.boundaries.region_of(id.layer)) {
    case LayerBoundaries::Region::Middle:
      scored.kind = ScoreKind::Overlap;
      scored.phase = 2;
      scored.score = composite_ovlp(overlap_score(values), mean, config.alpha);
      break;
    case LayerBoundaries::Region::Shallow:
    case LayerBoundaries::Region::Deep: {
      const double a = values[target_row];
      scored.kind = ScoreKind::Specificity;
      scored.phase = id.layer <= config.boundaries.shallow_end ? 1 : 3;
      scored.score = composite_spec(specificity(a, mean), a, config.alpha);
      break;
    }
  }
  return scored;
}

Selection select_subnetwork(const ProfileMatrix& profiles, const SelectionConfig& config) {
  config.validate(profiles.n_layers(), profiles.n_experts());
  if (profiles.n_languages() < 2) throw InputError("selection needs at least two languages");
  const int target_row = profiles.language_index(config.target);
  if (target_row < 0) throw InputError("target language '" + config.target + "' not profiled");

  Selection selection;
  selection.config = config;
  selection.budget = allocate_budget(config.budget, config.ratios);
  const int n_layers = profiles.n_layers(), n_experts = profiles.n_experts();
  const auto& bounds = config.boundaries;

  struct Phase {
    const char* name;
    int first_layer, last_layer, quota;
  };
  const Phase phases[] = {
      {"shallow", 0, bounds.shallow_end, selection.budget.shallow},
      {"middle", bounds.shallow_end + 1, bounds.middle_end, selection.budget.middle},
      {"deep", bounds.middle_end + 1, n_layers - 1, selection.budget.deep},
  };

  ExpertSet chosen;
  for (const auto& phase : phases) {
    std::vector<ScoredExpert> pool;
    for (int l = phase.first_layer; l <= phase.last_layer; ++l)
      for (int i = 0; i < n_experts; ++i)
        if (!chosen.count({l, i})) pool.push_back(score_expert(profiles, target_row, {l, i}, config));
    if (static_cast<int>(pool.size()) < phase.quota)
      throw ConfigError(std::string("insufficient candidates in the ") + phase.name +
                        " group: " + std::to_string(pool.size()) + " available, budget " +
                        std::to_string(phase.quota));
    std::stable_sort(pool.begin(), pool.end(), [](const ScoredExpert& a, const ScoredExpert& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.id < b.id;
    });
    for (int s = 0; s < phase.quota; ++s) {
      chosen.insert(pool[s].id);
      selection.experts.push_back(pool[s]);
    }
  }
  std::sort(selection.experts.begin(), selection.experts.end(),
            [](const ScoredExpert& a, const ScoredExpert& b) { return a.id < b.id; });
  return selection;
}

namespace {
using nlohmann::json;
const char* kind_name(ScoreKind k) { return k == ScoreKind::Overlap ? "overlap" : "specificity"; }
}  // namespace

std::string selection_to_json(const Selection& s) {
  json j;
  j["target"] = s.config.target;
  j["K"] = s.config.budget;
  j["boundaries"] = {s.config.boundaries.shallow_end, s.config.boundaries.middle_end};
  j["ratios"] = s.config.ratios;
  j["alpha"] = s.config.alpha;
  j["budgets"] = {s.budget.shallow, s.budget.middle, s.budget.deep};
  j["experts"] = json::array();
  for (const auto& e : s.experts)
    j["experts"].push_back({{"layer", e.id.layer},
                            {"expert", e.id.expert},
                            {"score", e.score},
                            {"kind", kind_name(e.kind)},
                            {"phase", e.phase}});
  return j.dump(2) + "\n";
}

Selection selection_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    Selection s;
    s.config.target = j.at("target").get<std::string>();
    s.config.budget = j.at("K").get<int>();
    s.config.boundaries = {j.at("boundaries").at(0).get<int>(), j.at("boundaries").at(1).get<int>()};
    s.config.ratios = j.at("ratios").get<Ratios>();
    s.config.alpha = j.at("alpha").get<double>();
    s.budget = allocate_budget(s.config.budget, s.config.ratios);
    for (const auto& e : j.at("experts")) {
      ScoredExpert se;
      se.id = {e.at("layer").get<int>(), e.at("expert").get<int>()};
      se.score = e.at("score").get<double>();
      se.kind = e.at("kind").get<std::string>() == "overlap" ? ScoreKind::Overlap
                                                            : ScoreKind::Specificity;
      se.phase = e.at("phase").get<int>();
      s.experts.push_back(se);
    }
    std::sort(s.experts.begin(), s.experts.end(),
              [](const ScoredExpert& a, const ScoredExpert& b) { return a.id < b.id; });
    return s;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed selection JSON: ") + e.what());
  }
}

void save_selection(const Selection& selection, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << selection_to_json(selection);
}

Selection load_selection(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return selection_from_json(buf.str());
}

}  // namespace rise
