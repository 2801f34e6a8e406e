#include "doctest.h"
#include "support.hpp"

#include "rise/isolation.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <random>

using namespace rise;
using namespace rise::testing;

namespace {

TrainConfig gd(double lr, int steps, std::uint64_t seed = 7) {
  TrainConfig c;
  c.optimizer = OptimizerKind::GradientDescent;
  c.learning_rate = lr;
  c.max_steps = steps;
  c.epochs = 1000;
  c.seed = seed;
  return c;
}

// Copy of `m` with every expert of `ids` moved by `delta` (same direction
// for all of them).
Model perturbed(const Model& m, const ExpertSet& ids, double delta, std::uint64_t seed) {
  Model out = m;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  for (const auto& id : ids) {
    auto& e = out.expert(id);
    MatrixXd d_in(e.w_in.rows(), e.w_in.cols()), d_out(e.w_out.rows(), e.w_out.cols());
    for (Eigen::Index i = 0; i < d_in.size(); ++i) d_in.data()[i] = normal(rng);
    for (Eigen::Index i = 0; i < d_out.size(); ++i) d_out.data()[i] = normal(rng);
    const double norm = std::sqrt(d_in.squaredNorm() + d_out.squaredNorm());
    e.w_in += d_in * (delta / norm);
    e.w_out += d_out * (delta / norm);
  }
  return out;
}

}  // namespace

TEST_SUITE("isolation") {

TEST_CASE("routing support") {
  const auto full = routing_support(collect_profile(init_model<double>(small_config(1, 3, 3)), {{1, 2}}, "x"));
  for (const auto& layer : full) CHECK(layer == std::vector<int>{0, 1, 2});

  const auto single = routing_support(collect_profile(hand_model(), {{1}}, "x"));
  for (const auto& layer : single) CHECK(layer.size() == 1);

  const auto tallied = routing_support(collect_profile(hand_model(), {{0, 1, 2}}, "x"));
  CHECK(tallied == RoutingSupport{{0, 1}, {0}, {0}});
}

TEST_CASE("overlap mass") {
  const Model m = init_model<double>(ModelConfig{});
  std::mt19937_64 rng(61);
  const auto p = collect_profile(m, random_batch(rng, 64, 10, 30), "x");
  CHECK(overlap_mass(p, {}) == 0.0);
  CHECK(overlap_mass(p, all_experts(m.config)) == doctest::Approx(2.0 * 8).epsilon(1e-12));

  const auto hp = collect_profile(hand_model(), {{0, 2, 0}}, "x");
  CHECK(overlap_mass(hp, {{0, 1}, {1, 1}, {2, 1}}) == 0.0);
  CHECK(overlap_mass(hp, all_experts(hand_model().config)) == 3.0);

  // Adding experts never lowers the mass.
  ExpertSet grow;
  double last = 0;
  for (const auto& id : all_experts(m.config)) {
    grow.insert(id);
    const double now = overlap_mass(p, grow);
    CHECK(now >= last);
    last = now;
  }
}

TEST_CASE("gradient isolation on random batches") {
  const Model m = init_model<double>(small_config(62, 6, 2));
  std::mt19937_64 rng(62);
  std::size_t asserted = 0;
  for (int b = 0; b < 50; ++b) {
    const auto r = verify_gradient_isolation(m, random_batch(rng, 10, 1, 3));
    CHECK(r.passed);
    CHECK(r.violations.empty());
    asserted += r.outside_support.size();
    for (const auto& id : r.outside_support) CHECK(r.max_abs_gradient.at(id) == 0.0);
  }
  CHECK(asserted > 0);
}

TEST_CASE("full support asserts nothing") {
  const auto r = verify_gradient_isolation(init_model<double>(small_config(63, 3, 3)), {{1, 2, 3}});
  CHECK(r.passed);
  CHECK(r.outside_support.empty());
}

TEST_CASE("crafted routing isolates every expert but the used ones") {
  const Model m = hand_model();
  const auto r = verify_gradient_isolation(m, {{0, 2, 0, 2}}, {{0, 1}, {0, 0}});
  CHECK(r.passed);
  CHECK(r.outside_support == ExpertSet{{0, 1}, {1, 1}, {2, 1}});
  CHECK(r.selected_outside_support == ExpertSet{{0, 1}});
  CHECK(r.max_abs_gradient.at({0, 0}) > 0);
}

TEST_CASE("exact invariance") {
  SUBCASE("empty selection") {
    const auto sc = make_disjoint_scenario(71);
    const auto trained = train(sc.model, sc.target_train, build_mask({}, sc.model), gd(0.05, 10));
    const auto profile = collect_profile(sc.model, sc.other_held_out, "other");
    const auto r = verify_exact_invariance(sc.model, trained.model, sc.other_held_out, {}, profile);
    CHECK(r.status == InvarianceStatus::Pass);
  }
  SUBCASE("disjoint scenario after 50 steps") {
    const auto sc = make_disjoint_scenario(72);
    const auto trained = train(sc.model, sc.target_train, build_mask(sc.selected, sc.model), gd(0.05, 50));
    const auto profile = collect_profile(sc.model, sc.other_held_out, "other");
    CHECK(shared_with_support(profile, sc.selected).empty());
    const auto r = verify_exact_invariance(sc.model, trained.model, sc.other_held_out, sc.selected, profile);
    CHECK(r.status == InvarianceStatus::Pass);
    CHECK(r.sequences_checked == 200);
    CHECK(r.sequences_differing == 0);
    CHECK(corpus_loss(trained.model, sc.target_held_out) != corpus_loss(sc.model, sc.target_held_out));
  }
  SUBCASE("one shared expert") {
    const auto sc = make_disjoint_scenario(73, true);
    const auto trained = train(sc.model, sc.target_train, build_mask(sc.selected, sc.model), gd(0.05, 50));
    const auto profile = collect_profile(sc.model, sc.other_held_out, "other");
    const auto r = verify_exact_invariance(sc.model, trained.model, sc.other_held_out, sc.selected, profile);
    CHECK(r.status == InvarianceStatus::NotDisjoint);
    CHECK(r.shared_experts.count({0, 0}) == 1);
    CHECK(r.sequences_differing > 0);
    CHECK(r.summary().find("not disjoint") == 0);
  }
}

TEST_CASE("spectral norm agrees with the SVD") {
  std::mt19937_64 rng(74);
  std::normal_distribution<double> normal;
  for (int n = 0; n < 200; ++n) {
    MatrixXd a(1 + n % 9, 1 + (n / 9) % 9);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
    const double ref = Eigen::JacobiSVD<MatrixXd>(a).singularValues()(0);
    CHECK(spectral_norm(a, 1e-12) == doctest::Approx(ref).epsilon(1e-6));
  }
  CHECK(spectral_norm(MatrixXd::Zero(3, 4)) == 0.0);
}

TEST_CASE("expert Lipschitz constants") {
  Expert<double> zero{MatrixXd::Zero(3, 2), MatrixXd::Zero(2, 3)};
  const auto z = expert_lipschitz(zero, 5.0, 0.0);
  CHECK(z.input_factor == 0.0);
  CHECK(z.output_factor == 0.0);
  CHECK(z.constant == 0.0);

  // 1x1 expert with unit weights at |h| <= 2:
  // input 1.0998393194 * 2 * 1, output 2 * 1.
  Expert<double> unit{MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)};
  const auto u = expert_lipschitz(unit, 2.0, 0.0);
  CHECK(u.input_factor == doctest::Approx(2.1996786388).epsilon(1e-12));
  CHECK(u.output_factor == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(u.constant == doctest::Approx(std::sqrt(2.1996786388 * 2.1996786388 + 4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(estimate_lipschitz(hand_model(), {}), InputError);
  CHECK_THROWS_AS(estimate_lipschitz(hand_model(), {{}}), InputError);
}

TEST_CASE("Monte Carlo soundness of the expert bound") {
  constexpr double kEps = 0.05;
  const Model m = init_model<double>(small_config(75, 4, 2));
  std::mt19937_64 rng(75);
  const auto lip = estimate_lipschitz(m, random_batch(rng, 10, 8, 12), 1.5, kEps);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, 11);
  int violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const ExpertId id{pick(rng) / 4, pick(rng) % 4};
    const auto& e = m.expert(id);
    RowVectorXd h(m.config.d_model);
    for (auto& v : h) v = normal(rng);
    h *= lip.hidden_norm_bound[id.layer] * unit(rng) / h.norm();
    MatrixXd d_in(e.w_in.rows(), e.w_in.cols()), d_out(e.w_out.rows(), e.w_out.cols());
    for (Eigen::Index i = 0; i < d_in.size(); ++i) d_in.data()[i] = normal(rng);
    for (Eigen::Index i = 0; i < d_out.size(); ++i) d_out.data()[i] = normal(rng);
    const double scale = kEps / std::sqrt(d_in.squaredNorm() + d_out.squaredNorm());
    d_in *= scale;
    d_out *= scale;
    auto f = [&](const MatrixXd& w_in, const MatrixXd& w_out) -> RowVectorXd {
      const RowVectorXd a = h * w_in;
      return a.unaryExpr([](double x) { return scalar_silu(x); }) * w_out;
    };
    const double change = (f(e.w_in + d_in, e.w_out + d_out) - f(e.w_in, e.w_out)).norm();
    if (change > lip.expert(id) * kEps) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("perturbation bound") {
  SUBCASE("no update") {
    const auto sc = make_disjoint_scenario(76, true, 16);
    const auto lip = estimate_lipschitz(sc.model, sc.target_held_out);
    const auto profile = collect_profile(sc.model, sc.target_held_out, "target");
    const auto r = perturbation_check(sc.model, sc.model, sc.selected, sc.target_held_out, profile, lip);
    CHECK(r.measured == 0.0);
    CHECK(r.bound == 0.0);
    CHECK(r.holds);
  }
  SUBCASE("disjoint language") {
    const auto sc = make_disjoint_scenario(77, false, 16);
    const auto trained = train(sc.model, sc.target_train, build_mask(sc.selected, sc.model), gd(0.01, 3));
    double radius = 0;
    for (const auto& [id, n] : update_norms(sc.model, trained.model)) radius = std::max(radius, n);
    const auto lip = estimate_lipschitz(sc.model, sc.other_held_out, 1.5, radius);
    const auto profile = collect_profile(sc.model, sc.other_held_out, "other");
    const auto r = perturbation_check(sc.model, trained.model, sc.selected, sc.other_held_out, profile, lip);
    CHECK(r.overlap_mass == 0.0);
    CHECK(r.bound == 0.0);
    CHECK(r.measured == 0.0);
  }
  SUBCASE("seeded sweep of small updates") {
    int stable = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto sc = make_disjoint_scenario(5000 + trial, true, 16);
      const auto trained =
          train(sc.model, sc.target_train, build_mask(sc.selected, sc.model), gd(0.002 + 0.0002 * trial, 1 + trial % 3));
      double radius = 0;
      for (const auto& [id, n] : update_norms(sc.model, trained.model)) radius = std::max(radius, n);
      auto samples = sc.target_held_out;
      samples.insert(samples.end(), sc.other_held_out.begin(), sc.other_held_out.end());
      const auto lip = estimate_lipschitz(sc.model, samples, 1.5, radius);
      for (const auto* corpus : {&sc.target_held_out, &sc.other_held_out}) {
        const auto profile = collect_profile(sc.model, *corpus, "lang");
        const auto r = perturbation_check(sc.model, trained.model, sc.selected, *corpus, profile, lip);
        if (!r.routing_stable || !r.within_norm_bound) continue;
        ++stable;
        CHECK(r.measured <= r.bound);
        CHECK(r.holds);
      }
    }
    CHECK(stable >= 150);
  }
}

TEST_CASE("the bound grows with the selected set") {
  const auto sc = make_disjoint_scenario(78, true, 16);
  const auto profile = collect_profile(sc.model, sc.other_held_out, "other");
  const ExpertSet small{{0, 0}}, large{{0, 0}, {0, 1}, {1, 2}, {2, 3}};
  const Model a = perturbed(sc.model, small, 1e-3, 1), b = perturbed(sc.model, large, 1e-3, 1);
  const auto lip = estimate_lipschitz(sc.model, sc.other_held_out, 1.5, 2e-3);
  const auto ra = perturbation_check(sc.model, a, small, sc.other_held_out, profile, lip);
  const auto rb = perturbation_check(sc.model, b, large, sc.other_held_out, profile, lip);
  CHECK(rb.overlap_mass >= ra.overlap_mass);
  CHECK(rb.bound >= ra.bound);
}

TEST_CASE("report JSON carries the verdicts") {
  IsolationReport report;
  report.mode = "invariance";
  report.status.push_back("exact-invariance: PASS (bitwise)");
  report.has_invariance = true;
  const std::string text = report_to_json(report);
  CHECK(text.find("\"exact-invariance: PASS (bitwise)\"") != std::string::npos);
  CHECK(text.find("\"invariance\"") != std::string::npos);
}

}  // TEST_SUITE
