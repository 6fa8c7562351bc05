#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "osev/metrics.hpp"
#include "support.hpp"

using namespace osev;
using namespace osev::metrics;
using doctest::Approx;

namespace {

OpenSetRecord rec(std::vector<double> probs, double score, std::size_t label,
                  std::size_t origin = 0) {
  OpenSetRecord r;
  r.probs = std::move(probs);
  r.score = score;
  r.label = label;
  r.origin = label == kUnknown ? origin : label;
  return r;
}

// Brute-force pair counting in integer half-units.
double auc_pairs(const std::vector<double>& known, const std::vector<double>& unknown) {
  long long twice = 0;
  for (double u : unknown) {
    for (double k : known) twice += u > k ? 2 : (u == k ? 1 : 0);
  }
  return static_cast<double>(twice) /
         (2.0 * static_cast<double>(known.size()) * static_cast<double>(unknown.size()));
}

std::vector<double> random_probs(Rng& rng, std::size_t k) {
  std::vector<double> p(k);
  double s = 0.0;
  for (double& v : p) s += (v = rng.uniform(0.01, 1.0));
  for (double& v : p) v /= s;
  return p;
}

ScoredSplits random_splits(Rng& rng, std::size_t k, std::size_t unknown_classes) {
  ScoredSplits s;
  s.num_known = k;
  auto fill = [&](std::vector<OpenSetRecord>& out, std::size_t n, bool unknown) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t label = unknown ? kUnknown : rng.below(k);
      out.push_back(rec(random_probs(rng, k), rng.uniform(0.0, 1.0), label,
                        k + rng.below(unknown_classes)));
    }
  };
  fill(s.train, 40, false);
  fill(s.test_biased, 30, false);
  fill(s.test_unbiased, 30, false);
  fill(s.test_unknown, 30, true);
  return s;
}

}  // namespace

TEST_CASE("openness values") {
  CHECK(openness(5, 0) == 0.0);
  CHECK(std::abs(openness(101, 51) - 0.10646) < 1e-5);
  CHECK(std::abs(openness(101, 51) - (1.0 - std::sqrt(202.0 / 253.0))) <= 1e-15);
  CHECK(std::abs(openness(1, 2) - (1.0 - std::sqrt(0.5))) <= 1e-15);
  CHECK(std::abs(openness(1, 2) - 0.29289) < 1e-5);
}

TEST_CASE("open predictions") {
  const std::vector<OpenSetRecord> r = {
      rec({0.7, 0.2, 0.1}, 0.1, 0),
      rec({0.2, 0.5, 0.3}, 0.6, 1),
      rec({0.3, 0.3, 0.4}, 0.4, 2),
      rec({0.1, 0.1, 0.8}, 0.9, kUnknown),
  };
  // tau 0.5: records 1 and 3 exceed it.
  CHECK(open_predictions(r, 0.5, 3) == std::vector<std::size_t>{0, 3, 2, 3});
  CHECK(open_labels(r, 3) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(open_predictions(r, 0.0, 3) == std::vector<std::size_t>{3, 3, 3, 3});
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(open_predictions(r, inf, 3) == std::vector<std::size_t>{0, 1, 2, 2});
}

TEST_CASE("infinite threshold gives closed-set argmax accuracy") {
  testing::for_all("closed_via_open", 100, [](Rng& rng) {
    const std::size_t k = 2 + rng.below(5);
    std::vector<OpenSetRecord> r;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < 50; ++i) {
      r.push_back(rec(random_probs(rng, k), rng.uniform(0.0, 1.0), rng.below(k)));
      const auto& p = r.back().probs;
      hits += static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) ==
              r.back().label;
    }
    const auto preds = open_predictions(r, std::numeric_limits<double>::infinity(), k);
    CHECK(accuracy(preds, open_labels(r, k)) == static_cast<double>(hits) / 50.0);
  });
}

TEST_CASE("macro F1 examples") {
  const std::vector<std::size_t> labels = {0, 1, 0, 1};
  CHECK(macro_f1(labels, labels, 2) == 1.0);
  const std::vector<std::size_t> preds = {0, 0, 1, 1};
  const std::vector<std::size_t> l2 = {0, 1, 0, 1};
  CHECK(macro_f1(preds, l2, 2) == Approx(0.5).epsilon(1e-15));
  const std::vector<std::size_t> all0 = {0, 0, 0, 0};
  CHECK(macro_f1(all0, l2, 2) == Approx(1.0 / 3.0).epsilon(1e-15));
  // Class 2 absent from both sides is skipped.
  CHECK(macro_f1(all0, l2, 3) == Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("macro F1 is invariant to sample order") {
  testing::for_all("maf1_perm", 100, [](Rng& rng) {
    const std::size_t k = 2 + rng.below(5), n = 1 + rng.below(40);
    std::vector<std::size_t> p(n), l(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.below(k);
      l[i] = rng.below(k);
    }
    const auto perm = rng.permutation(n);
    std::vector<std::size_t> pp, lp;
    for (std::size_t i : perm) {
      pp.push_back(p[i]);
      lp.push_back(l[i]);
    }
    const double a = macro_f1(p, l, k);
    CHECK(std::abs(macro_f1(pp, lp, k) - a) <= 1e-15);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  });
}

TEST_CASE("weighted means") {
  const std::vector<double> w = {0.1, 0.2}, f = {0.8, 0.6};
  CHECK(weighted_mean(w, f) == Approx(0.2 / 0.3).epsilon(1e-15));
  CHECK(std::abs(weighted_mean(w, f) - 0.6667) < 1e-4);
  const std::vector<double> c = {0.37, 0.37, 0.37}, w3 = {0.05, 0.11, 0.3};
  CHECK(weighted_mean(w3, c) == Approx(0.37).epsilon(1e-15));
  const std::vector<double> z = {0.0, 0.0};
  CHECK_THROWS_AS(weighted_mean(z, f), std::invalid_argument);
}

TEST_CASE("open maF1 curve") {
  // Perfectly separated scores and correct argmax: F1 = 1 at every point.
  std::vector<OpenSetRecord> known;
  for (std::size_t i = 0; i < 6; ++i) {
    std::vector<double> p(3, 0.1);
    p[i % 3] = 0.8;
    known.push_back(rec(p, 0.1, i % 3));
  }
  std::vector<std::vector<OpenSetRecord>> pool(4);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t j = 0; j < 3; ++j) pool[c].push_back(rec({0.4, 0.3, 0.3}, 0.9, kUnknown, 10 + c));
  }
  CurveOptions o;
  o.num_selections = 5;
  const auto perfect = open_maf1_curve(known, pool, 0.5, 3, o);
  CHECK(perfect.points.size() == 4);
  CHECK(perfect.value == 1.0);
  CHECK(perfect.note.empty());
  for (const auto& p : perfect.points) {
    CHECK(p.f1_mean == 1.0);
    CHECK(p.f1_std == 0.0);
    CHECK(p.omega == openness(3, p.i));
    CHECK(p.f1.size() == 5);
  }

  // Mixed quality: the scalar sits between the per-point means.
  pool[1][0].score = 0.2;
  pool[2][1].score = 0.3;
  known[0].score = 0.7;
  const auto mixed = open_maf1_curve(known, pool, 0.5, 3, o);
  double lo = 1.0, hi = 0.0;
  for (const auto& p : mixed.points) {
    lo = std::min(lo, p.f1_mean);
    hi = std::max(hi, p.f1_mean);
  }
  CHECK(mixed.value >= lo);
  CHECK(mixed.value <= hi);
  CHECK(open_maf1_curve(known, pool, 0.5, 3, o).value == mixed.value);

  // Single unknown class: one point, and the scalar is its F1.
  const std::vector<std::vector<OpenSetRecord>> one = {pool[1]};
  const auto single = open_maf1_curve(known, one, 0.5, 3, o);
  REQUIRE(single.points.size() == 1);
  CHECK(single.value == Approx(single.points[0].f1_mean).epsilon(1e-15));

  o.max_unknown = 9;
  const auto truncated = open_maf1_curve(known, pool, 0.5, 3, o);
  CHECK(truncated.points.size() == 4);
  CHECK_FALSE(truncated.note.empty());
  o.max_unknown = 2;
  CHECK(open_maf1_curve(known, pool, 0.5, 3, o).points.size() == 2);
  CHECK_THROWS_AS(open_maf1_curve(known, {}, 0.5, 3, o), std::invalid_argument);
}

TEST_CASE("AUC examples") {
  CHECK(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<double>{0.3, 0.4}) == 1.0);
  CHECK(roc_auc(std::vector<double>{0.5, 0.5, 0.5}, std::vector<double>{0.5, 0.5}) == 0.5);
  CHECK(roc_auc(std::vector<double>{0.1, 0.3}, std::vector<double>{0.3, 0.4}) == 0.875);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{}, std::vector<double>{0.1}), std::invalid_argument);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1}, std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("AUC equals brute-force pair counting with ties") {
  testing::for_all("auc_brute", 300, [](Rng& rng) {
    const std::size_t nk = 1 + rng.below(100), nu = 1 + rng.below(100);
    const double grid = static_cast<double>(1 + rng.below(20));
    std::vector<double> k(nk), u(nu);
    for (double& v : k) v = std::floor(rng.uniform(0.0, grid)) / grid;
    for (double& v : u) v = std::floor(rng.uniform(0.0, grid)) / grid;
    const double a = roc_auc(k, u);
    CHECK(a == auc_pairs(k, u));
    CHECK(a + roc_auc(u, k) == 1.0);
    // Strictly monotone transform.
    std::vector<double> k2, u2;
    for (double v : k) k2.push_back(std::exp(3.0 * v) - 7.0);
    for (double v : u) u2.push_back(std::exp(3.0 * v) - 7.0);
    CHECK(roc_auc(k2, u2) == a);
  });
}

TEST_CASE("ECE examples") {
  const std::vector<double> ones = {1.0, 1.0, 1.0};
  const bool all_true[] = {true, true, true};
  CHECK(ece(ones, all_true) == 0.0);
  const std::vector<double> conf = {0.8, 0.6};
  const bool mixed[] = {true, false};
  CHECK(ece(conf, mixed, 1) == 0.2);
  // 1.0 falls in the last bin, 0.0 in the first.
  const std::vector<double> edges = {0.0, 1.0};
  const bool e2[] = {false, true};
  CHECK(ece(edges, e2, 15) == 0.0);
}

TEST_CASE("ECE of a calibrated oracle is small and order-free") {
  Rng rng(testing::base_seed());
  const std::size_t n = 100000;
  std::vector<double> conf(n);
  auto correct = std::make_unique<bool[]>(n);
  for (std::size_t i = 0; i < n; ++i) {
    conf[i] = rng.uniform(0.0, 1.0);
    correct[i] = rng.uniform(0.0, 1.0) < conf[i];
  }
  const std::span<const bool> flags(correct.get(), n);
  const double e = ece(conf, flags);
  CHECK(e < 0.02);

  const auto perm = rng.permutation(n);
  std::vector<double> pc;
  auto pf = std::make_unique<bool[]>(n);
  for (std::size_t i = 0; i < n; ++i) {
    pc.push_back(conf[perm[i]]);
    pf[i] = correct[perm[i]];
  }
  CHECK(ece(pc, std::span<const bool>(pf.get(), n)) == Approx(e).epsilon(1e-12));
}

TEST_CASE("confusion matrices") {
  const std::vector<std::size_t> id = {0, 1, 2, 3, 3};
  const std::vector<std::size_t> org = {0, 1, 2, 7, 7};
  const auto c = confusion_and_top_confusions(id, id, org, 3);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t q = 0; q < 4; ++q) CHECK(c.normalized[r][q] == (r == q ? 1.0 : 0.0));
  }

  const std::vector<std::size_t> labels = {3, 3, 3}, preds = {2, 2, 2}, origins = {9, 9, 9};
  const auto s = confusion_and_top_confusions(preds, labels, origins, 3);
  REQUIRE(s.top_unknown.size() == 1);
  CHECK(s.top_unknown[0].origin == 9);
  CHECK(s.top_unknown[0].rate == 1.0);
  CHECK(s.top_unknown[0].top_target == 2);

  // K = 4, so "3" is a known class here and 4 is unknown.
  const std::vector<std::size_t> l4 = {4, 4, 4}, p4 = {3, 3, 3};
  const auto s4 = confusion_and_top_confusions(p4, l4, origins, 4);
  CHECK(s4.top_unknown[0].top_target == 3);
  CHECK(s4.top_unknown[0].rate == 1.0);

  // Mixed 6-sample case with K = 2, unknown classes 5 and 6.
  const std::vector<std::size_t> ml = {0, 1, 2, 2, 2, 2};
  const std::vector<std::size_t> mp = {0, 0, 1, 2, 0, 0};
  const std::vector<std::size_t> mo = {0, 1, 5, 5, 6, 6};
  const auto m = confusion_and_top_confusions(mp, ml, mo, 2);
  CHECK(m.counts[0] == std::vector<std::size_t>{1, 0, 0});
  CHECK(m.counts[1] == std::vector<std::size_t>{1, 0, 0});
  CHECK(m.counts[2] == std::vector<std::size_t>{2, 1, 1});
  CHECK(m.normalized[2][0] == 0.5);
  CHECK(m.normalized[2][2] == 0.25);
  REQUIRE(m.top_unknown.size() == 2);
  CHECK(m.top_unknown[0].origin == 6);
  CHECK(m.top_unknown[0].rate == 1.0);
  CHECK(m.top_unknown[0].top_target == 0);
  CHECK(m.top_unknown[1].origin == 5);
  CHECK(m.top_unknown[1].rate == 0.5);
  CHECK(m.top_unknown[1].top_target == 1);
  CHECK(m.top_unknown[1].top_target_rate == 0.5);
}

TEST_CASE("mean and population std") {
  const std::vector<double> v = {2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0};
  const auto ms = mean_std(v);
  CHECK(ms.mean == 5.0);
  CHECK(ms.std == 2.0);
  const std::vector<double> c = {0.25, 0.25, 0.25};
  CHECK(mean_std(c).std == 0.0);
}

TEST_CASE("report fields stay in range") {
  testing::for_all("report", 20, [](Rng& rng) {
    const auto splits = random_splits(rng, 3, 3);
    const auto r = build_report(splits, {}).report;
    for (const char* key : {"closed_acc", "unbiased_acc", "open_auc", "ece", "closed_ece", "avu",
                            "train_known_fraction"}) {
      INFO(key);
      CHECK(r[key].get<double>() >= 0.0);
      CHECK(r[key].get<double>() <= 1.0);
    }
    CHECK(r["train_known_fraction"].get<double>() >= 0.95);
    CHECK(r["open_maf1"]["mean"].get<double>() >= 0.0);
    CHECK(r["open_maf1"]["mean"].get<double>() <= 1.0);
    CHECK(r["confusion"]["counts"].size() == 4);
  });
}

TEST_CASE("score dump round trip reproduces the report") {
  Rng rng(testing::base_seed());
  const auto splits = random_splits(rng, 4, 3);
  const auto text = score_dump(splits);
  const auto back = parse_score_dump(text);
  CHECK(back.num_known == 4);
  CHECK(back.train.size() == splits.train.size());
  CHECK(back.test_unknown.size() == splits.test_unknown.size());
  for (std::size_t i = 0; i < splits.test_unknown.size(); ++i) {
    CHECK(back.test_unknown[i].probs == splits.test_unknown[i].probs);
    CHECK(back.test_unknown[i].score == splits.test_unknown[i].score);
    CHECK(back.test_unknown[i].origin == splits.test_unknown[i].origin);
    CHECK(back.test_unknown[i].is_unknown());
  }
  EvaluationSettings s;
  s.seed = 42;
  const auto a = build_report(splits, s);
  const auto b = build_report(back, EvaluationSettings::from_json(s.to_json()));
  CHECK(a.report.dump() == b.report.dump());
  CHECK(curve_csv(a.curve) == curve_csv(b.curve));
  CHECK(curve_csv(a.curve).rfind("i,omega,f1_mean,f1_std\n", 0) == 0);

  CHECK_THROWS(parse_score_dump("{\"probs\": [0.5, 0.5], \"score\": \"x\"}\n"));
  CHECK_THROWS(parse_score_dump("not json\n"));
}

TEST_CASE("report rejects malformed splits") {
  Rng rng(3);
  auto splits = random_splits(rng, 3, 2);
  auto no_unknown = splits;
  no_unknown.test_unknown.clear();
  CHECK_THROWS_AS(build_report(no_unknown, {}), std::invalid_argument);
  auto leaked = splits;
  leaked.train.push_back(splits.test_unknown[0]);
  CHECK_THROWS_AS(build_report(leaked, {}), std::invalid_argument);
}
