#include "doctest.h"
#include "support.hpp"

#include "rise/reports.hpp"
#include "rise/routing_stats.hpp"
#include "rise/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace rise;
using namespace rise::testing;

namespace {

RoutingProfile random_profile(std::mt19937_64& rng, const std::string& language, int layers, int experts,
                              int max_count) {
  RoutingProfile p(language, layers, experts);
  p.token_total = static_cast<std::uint64_t>(max_count);
  std::uniform_int_distribution<int> count(0, max_count);
  for (auto& c : p.counts) c = static_cast<std::uint64_t>(count(rng));
  return p;
}

ExpertSet sorted_prefix(const RoutingProfile& p, int k) {
  std::vector<std::pair<std::uint64_t, ExpertId>> all;
  for (int l = 0; l < p.n_layers; ++l)
    for (int i = 0; i < p.n_experts; ++i) all.push_back({p.count(l, i), {l, i}});
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  ExpertSet out;
  for (int j = 0; j < k; ++j) out.insert(all[j].second);
  return out;
}

}  // namespace

TEST_SUITE("routing-stats") {

TEST_CASE("empty corpus is an input error") {
  const Model m = hand_model();
  CHECK_THROWS_AS(collect_profile(m, {}, "x"), InputError);
  CHECK_THROWS_AS(collect_profile(m, {{}, {}}, "x"), InputError);
}

TEST_CASE("k = N_e saturates every frequency") {
  const Model m = init_model<double>(small_config(4, 3, 3));
  const auto p = collect_profile(m, {{0, 1, 2}, {9, 8}}, "x");
  CHECK(p.token_total == 5);
  for (int l = 0; l < 3; ++l)
    for (int i = 0; i < 3; ++i) CHECK(p.freq(l, i) == 1.0);
}

TEST_CASE("a single top-1 token activates one expert per layer") {
  const auto p = collect_profile(hand_model(), {{1}}, "x");
  for (int l = 0; l < 3; ++l) {
    CHECK(p.count(l, 0) + p.count(l, 1) == 1);
    CHECK(std::max(p.freq(l, 0), p.freq(l, 1)) == 1.0);
  }
}

TEST_CASE("3-token corpus matches a manual tally") {
  // Layer 0 routes on sign(h[0]): tokens 0 and 2 -> expert 0, token 1 -> expert 1.
  // Layers 1 and 2 send everything to expert 0.
  const auto p = collect_profile(hand_model(), {{0, 1, 2}}, "x");
  CHECK(p.token_total == 3);
  CHECK(p.counts == std::vector<std::uint64_t>{2, 1, 3, 0, 3, 0});
}

TEST_CASE("frequencies sum to k per layer") {
  std::mt19937_64 rng(5);
  for (int n = 0; n < 20; ++n) {
    const ModelConfig c = small_config(n, 5, 1 + n % 5);
    const auto p = collect_profile(init_model<double>(c), random_batch(rng, c.vocab_size, 4, 12), "x");
    for (int l = 0; l < c.n_layers; ++l) {
      double total = 0;
      for (int i = 0; i < c.n_experts; ++i) total += p.freq(l, i);
      CHECK(std::abs(total - c.top_k) <= 1e-9);
    }
  }
}

TEST_CASE("profiles are additive over corpora") {
  std::mt19937_64 rng(6);
  const Model m = init_model<double>(ModelConfig{});
  auto a = random_batch(rng, 64, 7, 20), b = random_batch(rng, 64, 5, 20);
  auto pa = collect_profile(m, a, "x");
  const auto pb = collect_profile(m, b, "x");
  a.insert(a.end(), b.begin(), b.end());
  pa += pb;
  CHECK(collect_profile(m, a, "x") == pa);
}

TEST_CASE("threaded collection equals serial collection") {
  std::mt19937_64 rng(7);
  const Model m = init_model<double>(ModelConfig{});
  const auto corpus = random_batch(rng, 64, 37, 30);
  const auto serial = collect_profile(m, corpus, "x", 1);
  for (int threads : {2, 3, 8, 64}) CHECK(collect_profile(m, corpus, "x", threads) == serial);
}

TEST_CASE("profile matrix rows are the language frequencies") {
  std::mt19937_64 rng(8);
  const auto a = random_profile(rng, "a", 3, 4, 9), b = random_profile(rng, "b", 3, 4, 9);
  const auto pm = ProfileMatrix::from_profiles({a, b});
  CHECK(pm.language_index("b") == 1);
  CHECK(pm.language_index("c") == -1);
  for (int l = 0; l < 3; ++l)
    for (int i = 0; i < 4; ++i) {
      CHECK(pm.layers[l](0, i) == a.freq(l, i));
      CHECK(pm.layers[l](1, i) == b.freq(l, i));
    }
}

TEST_CASE("global_topk range, saturation and tie rule") {
  RoutingProfile p("x", 2, 3);
  p.token_total = 10;
  p.counts = {5, 7, 1, 7, 0, 2};
  CHECK_THROWS_AS(global_topk(p, 0), InputError);
  CHECK_THROWS_AS(global_topk(p, 7), InputError);
  CHECK(global_topk(p, 6) == ExpertSet{{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {1, 2}});
  // (0,1) and (1,0) tie at 7; only one fits into K = 1.
  CHECK(global_topk(p, 1) == ExpertSet{{0, 1}});
  CHECK(global_topk(p, 3) == ExpertSet{{0, 1}, {1, 0}, {0, 0}});
}

TEST_CASE("global_topk equals a full sort on every small instance") {
  std::mt19937_64 rng(9);
  int instances = 0;
  for (int layers = 1; layers <= 8; ++layers)
    for (int experts = 1; layers * experts <= 64; ++experts) {
      const auto p = random_profile(rng, "x", layers, experts, 1 + (layers + experts) % 4);
      for (int k = 1; k <= layers * experts; ++k) CHECK(global_topk(p, k) == sorted_prefix(p, k));
      ++instances;
    }
  CHECK(instances > 100);
}

TEST_CASE("jaccard") {
  const ExpertSet a{{0, 1}, {0, 2}, {1, 0}}, b{{0, 2}, {1, 0}, {1, 1}}, c{{2, 2}};
  CHECK(jaccard(a, a) == 1.0);
  CHECK(jaccard(a, c) == 0.0);
  CHECK(jaccard(a, b) == 0.5);
  CHECK(jaccard({}, {}) == 1.0);
  CHECK(jaccard(a, {}) == 0.0);

  std::mt19937_64 rng(10);
  for (int n = 0; n < 200; ++n) {
    ExpertSet x, y;
    for (int j = 0; j < 6; ++j) {
      x.insert({static_cast<int>(rng() % 3), static_cast<int>(rng() % 3)});
      y.insert({static_cast<int>(rng() % 3), static_cast<int>(rng() % 3)});
    }
    const double j = jaccard(x, y);
    CHECK(j == jaccard(y, x));
    CHECK(j >= 0.0);
    CHECK(j <= 1.0);
  }
}

TEST_CASE("layerwise similarity") {
  std::mt19937_64 rng(11);
  const auto a = random_profile(rng, "a", 5, 4, 20), b = random_profile(rng, "b", 5, 4, 20);
  CHECK_THROWS_AS(layerwise_similarity(a, b, 5), InputError);
  CHECK_THROWS_AS(layerwise_similarity(a, b, 0), InputError);
  CHECK_THROWS_AS(layerwise_similarity(a, RoutingProfile("c", 4, 4), 2), InputError);
  const auto self = layerwise_similarity(a, a, 2);
  CHECK(self.values == std::vector<double>(5, 1.0));
  CHECK(layerwise_similarity(a, b, 4).values == std::vector<double>(5, 1.0));
  const auto curve = layerwise_similarity(a, b, 2);
  CHECK(curve.language == "a");
  CHECK(curve.reference == "b");
  for (int l = 0; l < 5; ++l) {
    ExpertSet x, y;
    for (int i : layer_topk(a, l, 2)) x.insert({l, i});
    for (int i : layer_topk(b, l, 2)) y.insert({l, i});
    CHECK(curve.values[l] == jaccard(x, y));
  }
}

TEST_CASE("region averages") {
  CHECK_THROWS_AS(region_average(std::vector<double>(8, 0.0), {5, 2}), InputError);
  CHECK_THROWS_AS(region_average(std::vector<double>(8, 0.0), {-1, 3}), InputError);
  CHECK_THROWS_AS(region_average(std::vector<double>(8, 0.0), {2, 8}), InputError);
  CHECK_THROWS_AS(region_average(std::vector<double>(8, 0.0), {2, 7}), InputError);

  const auto flat = region_average(std::vector<double>(8, 0.37), {2, 5});
  CHECK(flat.shallow == doctest::Approx(0.37));
  CHECK(flat.middle == doctest::Approx(0.37));
  CHECK(flat.deep == doctest::Approx(0.37));

  // [0..2] -> 0,1,0; (2..5] -> 1,0,1; (5..7] -> 0,1.
  const auto alt = region_average(std::vector<double>{0, 1, 0, 1, 0, 1, 0, 1}, {2, 5});
  CHECK(alt.shallow == doctest::Approx(1.0 / 3));
  CHECK(alt.middle == doctest::Approx(2.0 / 3));
  CHECK(alt.deep == doctest::Approx(0.5));

  const LayerBoundaries b{2, 5};
  CHECK(b.region_of(2) == LayerBoundaries::Region::Shallow);
  CHECK(b.region_of(3) == LayerBoundaries::Region::Middle);
  CHECK(b.region_of(5) == LayerBoundaries::Region::Middle);
  CHECK(b.region_of(6) == LayerBoundaries::Region::Deep);
}

TEST_CASE("Bengali region averages from the fixture report") {
  const std::string dir = RISE_FIXTURE_DIR;
  const auto published = parse_region_table_csv(read_file(dir + "/bn_regions.csv"));
  REQUIRE(published.size() == 1);
  CHECK(published[0].averages.shallow == 0.12);
  CHECK(published[0].averages.middle == 0.22);
  CHECK(published[0].averages.deep == 0.05);

  const auto curves = parse_curves_csv(read_file(dir + "/bn_curve.csv"));
  REQUIRE(curves.size() == 1);
  REQUIRE(curves[0].values.size() == 48);
  const auto ra = region_average(curves[0], {17, 29});
  CHECK(ra.shallow == doctest::Approx(published[0].averages.shallow).epsilon(1e-12));
  CHECK(ra.middle == doctest::Approx(published[0].averages.middle).epsilon(1e-12));
  CHECK(ra.deep == doctest::Approx(published[0].averages.deep).epsilon(1e-12));
  CHECK(RegionRow{"BN", ra}.avg() == doctest::Approx((0.12 + 0.22 + 0.05) / 3).epsilon(1e-12));
}

TEST_CASE("scaled boundaries") {
  auto same = [](LayerBoundaries b, int l1, int l2) { return b.shallow_end == l1 && b.middle_end == l2; };
  CHECK(same(scaled_boundaries(48), 17, 29));
  CHECK(same(scaled_boundaries(32), 11, 19));
  CHECK(same(scaled_boundaries(8), 2, 4));
  for (int layers = 3; layers <= 96; ++layers) CHECK_NOTHROW(scaled_boundaries(layers).validate(layers));
  CHECK_THROWS_AS(scaled_boundaries(2), InputError);
}

TEST_CASE("overlap matrix") {
  std::mt19937_64 rng(12);
  const auto a = random_profile(rng, "a", 4, 4, 9);
  auto a2 = a;
  a2.language = "a2";
  const MatrixXd dup = overlap_matrix({a, a2, a}, 5);
  CHECK((dup.array() == 1.0).all());

  std::vector<RoutingProfile> ps;
  for (int m = 0; m < 5; ++m) ps.push_back(random_profile(rng, "l" + std::to_string(m), 4, 4, 9));
  const MatrixXd om = overlap_matrix(ps, 6);
  for (int i = 0; i < 5; ++i) {
    CHECK(om(i, i) == 1.0);
    for (int j = 0; j < 5; ++j) {
      CHECK(om(i, j) == om(j, i));
      CHECK(om(i, j) == jaccard(global_topk(ps[i], 6), global_topk(ps[j], 6)));
    }
  }
  CHECK_THROWS_AS(overlap_matrix({a}, 2), InputError);
}

TEST_CASE("profile JSON round-trip and validation") {
  std::mt19937_64 rng(13);
  const auto p = random_profile(rng, "sw", 6, 5, 1000);
  CHECK(profile_from_json(profile_to_json(p)) == p);
  CHECK(profile_to_json(profile_from_json(profile_to_json(p))) == profile_to_json(p));
  CHECK_THROWS_AS(profile_from_json("{"), InputError);
  CHECK_THROWS_AS(profile_from_json(R"({"language":"x","token_total":1,"shape":[1,2],"counts":[1]})"),
                  InputError);
  CHECK_THROWS_AS(profile_from_json(R"({"language":"x","token_total":1,"shape":[1,2],"counts":[1,2]})"),
                  InputError);
}

}  // TEST_SUITE
