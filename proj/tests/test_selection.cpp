#include "doctest.h"

#include "rise/selection.hpp"

#include <cmath>
#include <random>

using namespace rise;

namespace {

RoutingProfile profile(const std::string& language, std::uint64_t total, int experts,
                       std::vector<std::uint64_t> counts) {
  RoutingProfile p(language, static_cast<int>(counts.size()) / experts, experts);
  p.token_total = total;
  p.counts = std::move(counts);
  return p;
}

// Two languages, three layers of four experts, 10 tokens each.
ProfileMatrix hand_profiles() {
  const auto low = profile("low", 10, 4, {8, 2, 5, 0, /**/ 3, 6, 0, 4, /**/ 0, 9, 1, 4});
  const auto high = profile("high", 10, 4, {2, 2, 5, 4, /**/ 3, 2, 0, 6, /**/ 5, 1, 1, 4});
  return ProfileMatrix::from_profiles({low, high});
}

ProfileMatrix random_profiles(std::mt19937_64& rng, int languages, int layers, int experts) {
  ProfileMatrix pm;
  std::uniform_int_distribution<int> count(0, 5);
  for (int m = 0; m < languages; ++m) pm.languages.push_back("l" + std::to_string(m));
  for (int l = 0; l < layers; ++l) {
    MatrixXd a(languages, experts);
    for (int m = 0; m < languages; ++m)
      for (int i = 0; i < experts; ++i) a(m, i) = count(rng) / 5.0;
    pm.layers.push_back(a);
  }
  return pm;
}

}  // namespace

TEST_SUITE("selection") {

TEST_CASE("specificity") {
  CHECK(specificity(0.3, 0.3) == 1.0);
  CHECK(specificity(0.3, 0.0) == 0.0);
  CHECK(specificity(0.0, 0.0) == 0.0);
  CHECK(specificity(0.4, 0.1) == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("overlap score") {
  const std::vector<double> equal{0.3, 0.3, 0.3}, zero{0, 0}, pair{0.2, 0.4}, one{0.5};
  CHECK(overlap_score(equal) == 1.0);
  CHECK(overlap_score(zero) == 0.0);
  CHECK(overlap_score(pair) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK_THROWS_AS(overlap_score(one), InputError);
}

TEST_CASE("composite scores") {
  CHECK(composite_spec(1.7, 0.4, 0.0) == 1.7);
  CHECK(composite_ovlp(0.6, 0.4, 0.0) == 0.6);
  CHECK(composite_spec(1.0, 0.0, 10.0) == 1.0);
  CHECK(composite_spec(2.0, 0.1, 10.0) == doctest::Approx(4.0).epsilon(1e-15));
  // Monotone in a_target for positive S.
  for (double a = 0.0; a < 1.0; a += 0.05)
    CHECK(composite_spec(1.5, a + 0.01, 10.0) > composite_spec(1.5, a, 10.0));
}

TEST_CASE("budget allocation") {
  CHECK(allocate_budget(128, {0.35, 0.25, 0.40}) == Budget{44, 32, 52});
  CHECK(allocate_budget(16, {0.125, 0.6875, 0.1875}) == Budget{2, 11, 3});
  CHECK(allocate_budget(10, {1.0 / 3, 1.0 / 3, 1.0 / 3}) == Budget{3, 3, 4});
  CHECK(allocate_budget(12, {1.0 / 3, 1.0 / 3, 1.0 / 3}) == Budget{4, 4, 4});
  for (int k = 1; k <= 300; ++k) CHECK(allocate_budget(k, {0.35, 0.25, 0.40}).total() == k);
}

TEST_CASE("hand profile matches the worked ranking") {
  // Shallow (layer 0), Spec with alpha 10: e0 14.4, e2 6, e1 3, e3 0.
  // Middle (layer 1), Ovlp: e3 5, e0 4, e1 10/3, e2 0.
  // Deep (layer 2), Spec: e1 18, e3 5, e2 2, e0 0.
  const ProfileMatrix pm = hand_profiles();
  SelectionConfig cfg;
  cfg.target = "low";
  cfg.budget = 5;
  cfg.boundaries = {0, 1};
  cfg.ratios = {0.4, 0.4, 0.2};
  const Selection s = select_subnetwork(pm, cfg);
  CHECK(s.budget == Budget{2, 2, 1});
  CHECK(s.ids() == ExpertSet{{0, 0}, {0, 2}, {1, 3}, {1, 0}, {2, 1}});

  auto score = [&](int l, int i) { return score_expert(pm, 0, {l, i}, cfg).score; };
  CHECK(score(0, 0) == doctest::Approx(14.4));
  CHECK(score(0, 2) == doctest::Approx(6.0));
  CHECK(score(0, 1) == doctest::Approx(3.0));
  CHECK(score(0, 3) == 0.0);
  CHECK(score(1, 3) == doctest::Approx(5.0));
  CHECK(score(1, 0) == doctest::Approx(4.0));
  CHECK(score(1, 1) == doctest::Approx(10.0 / 3));
  CHECK(score(1, 2) == 0.0);
  CHECK(score(2, 1) == doctest::Approx(18.0));
  CHECK(score(2, 3) == doctest::Approx(5.0));
  CHECK(score(2, 0) == 0.0);
  CHECK(score_expert(pm, 0, {1, 0}, cfg).kind == ScoreKind::Overlap);
  CHECK(score_expert(pm, 0, {2, 0}, cfg).phase == 3);
}

TEST_CASE("exhaustive budget selects every expert") {
  SelectionConfig cfg;
  cfg.target = "low";
  cfg.budget = 12;
  cfg.boundaries = {0, 1};
  cfg.ratios = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  CHECK(select_subnetwork(hand_profiles(), cfg).ids().size() == 12);
}

TEST_CASE("insufficient candidates name the group") {
  SelectionConfig cfg;
  cfg.target = "low";
  cfg.budget = 12;
  cfg.boundaries = {0, 1};
  cfg.ratios = {0.5, 0.25, 0.25};
  CHECK_THROWS_WITH_AS(select_subnetwork(hand_profiles(), cfg), doctest::Contains("shallow"), ConfigError);
}

TEST_CASE("invalid selection configs") {
  const ProfileMatrix pm = hand_profiles();
  SelectionConfig cfg;
  cfg.target = "low";
  cfg.budget = 4;
  cfg.boundaries = {0, 1};
  SelectionConfig bad = cfg;
  bad.ratios = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(select_subnetwork(pm, bad), ConfigError);
  bad = cfg;
  bad.budget = 13;
  CHECK_THROWS_AS(select_subnetwork(pm, bad), ConfigError);
  bad = cfg;
  bad.boundaries = {1, 2};
  CHECK_THROWS_AS(select_subnetwork(pm, bad), ConfigError);
  bad = cfg;
  bad.target = "xx";
  CHECK_THROWS_AS(select_subnetwork(pm, bad), InputError);
}

TEST_CASE("budget exactness and phase containment") {
  std::mt19937_64 rng(41);
  int feasible = 0;
  for (int n = 0; n < 300; ++n) {
    const int layers = 3 + n % 6, experts = 2 + n % 7;
    const ProfileMatrix pm = random_profiles(rng, 2 + n % 3, layers, experts);
    SelectionConfig cfg;
    cfg.target = pm.languages[n % pm.n_languages()];
    cfg.boundaries = {n % (layers - 2), layers - 2};
    cfg.budget = 1 + static_cast<int>(rng() % (layers * experts / 2));
    try {
      const Selection s = select_subnetwork(pm, cfg);
      ++feasible;
      CHECK(static_cast<int>(s.ids().size()) == cfg.budget);
      CHECK(s.budget == allocate_budget(cfg.budget, cfg.ratios));
      Budget counted;
      for (const auto& e : s.experts) {
        const auto region = cfg.boundaries.region_of(e.id.layer);
        if (e.phase == 1) CHECK(region == LayerBoundaries::Region::Shallow);
        if (e.phase == 2) CHECK(region == LayerBoundaries::Region::Middle);
        if (e.phase == 3) CHECK(region == LayerBoundaries::Region::Deep);
        (e.phase == 1 ? counted.shallow : e.phase == 2 ? counted.middle : counted.deep)++;
      }
      CHECK(counted == s.budget);
    } catch (const ConfigError&) {
    }
  }
  CHECK(feasible > 200);
}

TEST_CASE("selection is invariant to column scaling when alpha is 0") {
  // Power-of-two factors keep the scores bit-identical, so exact ties in the
  // coarse random profiles survive the rescaling.
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> exponent(-3, 3);
  for (int n = 0; n < 100; ++n) {
    ProfileMatrix pm = random_profiles(rng, 3, 6, 5);
    SelectionConfig cfg;
    cfg.target = "l1";
    cfg.boundaries = {1, 3};
    cfg.budget = 8;
    cfg.alpha = 0;
    const ExpertSet before = select_subnetwork(pm, cfg).ids();
    for (auto& layer : pm.layers)
      for (Eigen::Index i = 0; i < layer.cols(); ++i) layer.col(i) *= std::ldexp(1.0, exponent(rng));
    CHECK(select_subnetwork(pm, cfg).ids() == before);
  }
}

TEST_CASE("alpha breaks scale invariance of the composite") {
  const ProfileMatrix pm = hand_profiles();
  ProfileMatrix scaled = pm;
  for (auto& layer : scaled.layers) layer.col(1) *= 0.5;
  SelectionConfig cfg;
  cfg.target = "low";
  cfg.boundaries = {0, 1};
  const auto a = score_expert(pm, 0, {0, 1}, cfg), b = score_expert(scaled, 0, {0, 1}, cfg);
  CHECK(a.score != b.score);
  cfg.alpha = 0;
  CHECK(score_expert(pm, 0, {0, 1}, cfg).score == score_expert(scaled, 0, {0, 1}, cfg).score);
}

TEST_CASE("selection JSON round-trip") {
  SelectionConfig cfg;
  cfg.target = "low";
  cfg.budget = 5;
  cfg.boundaries = {0, 1};
  cfg.ratios = {0.4, 0.4, 0.2};
  const Selection s = select_subnetwork(hand_profiles(), cfg);
  const Selection back = selection_from_json(selection_to_json(s));
  CHECK(back.ids() == s.ids());
  CHECK(back.budget == s.budget);
  CHECK(back.config.target == "low");
  CHECK(back.config.ratios == s.config.ratios);
  CHECK(selection_to_json(back) == selection_to_json(s));
  CHECK_THROWS_AS(selection_from_json("[]"), InputError);
}

}  // TEST_SUITE
