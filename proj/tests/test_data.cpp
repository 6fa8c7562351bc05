#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "osev/data.hpp"
#include "osev/debias.hpp"
#include "osev/nn/layers.hpp"
#include "osev/nn/optim.hpp"
#include "support.hpp"

using namespace osev;
using namespace osev::data;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Index of the largest DFT magnitude over bins 1..T/2 of one channel.
std::size_t peak_bin(const std::vector<double>& values, std::size_t channel, std::size_t t_len) {
  std::size_t best = 0;
  double best_mag = -1.0;
  for (std::size_t k = 1; k <= t_len / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * t) /
                         static_cast<double>(t_len);
      acc += values[channel * t_len + t] * std::polar(1.0, ang);
    }
    if (std::abs(acc) > best_mag) {
      best_mag = std::abs(acc);
      best = k;
    }
  }
  return best;
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.known_classes = 3;
  s.unknown_classes = 2;
  s.train_per_class = 4;
  s.test_per_class = 3;
  s.timesteps = 16;
  s.channels = 3;
  s.dynamic_channels = 1;
  s.seed = 5;
  return s;
}

}  // namespace

TEST_CASE("full bias ties every biased scene to its class") {
  auto spec = small_spec();
  spec.bias_strength = 1.0;
  spec.train_per_class = 50;
  const auto d = generate(spec);
  for (const auto& s : d.train.samples) CHECK(s.scene == s.label);
  for (const auto& s : d.test_biased.samples) CHECK(s.scene == s.label);
  spec.bias_strength = 0.0;
  for (const auto& s : generate_split(spec, SplitKind::kTrain).samples) CHECK(s.scene != s.label);
}

TEST_CASE("noiseless sinusoids peak at their class frequency") {
  SyntheticSpec spec;
  spec.noise_sigma = 0.0;
  spec.timesteps = 128;
  spec.train_per_class = 5;
  spec.test_per_class = 5;
  const auto plan = frequency_plan(spec);
  const auto d = generate(spec);
  for (const auto& s : d.train.samples) {
    for (std::size_t ch = 0; ch < spec.dynamic_channels; ++ch) {
      CHECK(static_cast<double>(peak_bin(s.values, ch, spec.timesteps)) == plan.known[s.label]);
    }
  }
  for (const auto& s : d.test_unknown.samples) {
    const std::size_t u = s.label - spec.known_classes;
    CHECK(static_cast<double>(peak_bin(s.values, 0, spec.timesteps)) == plan.unknown[u]);
  }
}

TEST_CASE("known and unknown frequencies are disjoint and below Nyquist") {
  testing::for_all("freq_plan", 200, [](Rng& rng) {
    SyntheticSpec s;
    s.known_classes = 2 + rng.below(9);
    s.unknown_classes = 1 + rng.below(9);
    const std::size_t total = s.known_classes + s.unknown_classes;
    s.timesteps = 2 * total + 2 + rng.below(100);
    const auto plan = frequency_plan(s);
    CHECK(plan.known.size() == s.known_classes);
    CHECK(plan.unknown.size() == s.unknown_classes);
    std::set<double> a(plan.known.begin(), plan.known.end());
    std::set<double> b(plan.unknown.begin(), plan.unknown.end());
    CHECK(a.size() == s.known_classes);
    CHECK(b.size() == s.unknown_classes);
    for (double f : b) CHECK(a.count(f) == 0);
    for (double f : a) CHECK(f < static_cast<double>(s.timesteps) / 2.0);
    for (double f : b) CHECK(f < static_cast<double>(s.timesteps) / 2.0);
  });
}

TEST_CASE("generation is deterministic and seed dependent") {
  const auto spec = small_spec();
  const auto a = generate(spec);
  const auto b = generate(spec);
  CHECK(a.train == b.train);
  CHECK(to_csv(a.test_unknown) == to_csv(b.test_unknown));
  auto other = spec;
  other.seed = 6;
  CHECK_FALSE(generate(other).train == a.train);
  CHECK(a.train.samples.size() == 12);
  CHECK(a.test_unknown.samples.size() == 6);
  for (const auto& s : a.test_unknown.samples) {
    CHECK(s.label >= 3);
    CHECK(s.scene < 3);
  }
}

TEST_CASE("split files round trip exactly") {
  const auto dir = testing::scratch_dir("data_roundtrip");
  auto spec = small_spec();
  spec.train_per_class = 4;
  const auto d = generate(spec);
  DatasetSplit ten = d.train;
  ten.samples.resize(10);
  save_split(ten, dir / "ten.csv");
  CHECK(load_split(dir / "ten.csv", SplitKind::kTrain, 3, 16) == ten);

  save_dataset(d, dir / "nested" / "ds");
  const auto back = load_dataset(dir / "nested" / "ds");
  CHECK(back.train == d.train);
  CHECK(back.test_biased == d.test_biased);
  CHECK(back.test_unbiased == d.test_unbiased);
  CHECK(back.test_unknown == d.test_unknown);
  CHECK(back.manifest() == d.manifest());
  CHECK(d.manifest()["spec"]["seed"] == 5);

  save_dataset(d, dir / "again");
  for (auto kind : kAllSplits) {
    const std::string name = std::string(split_name(kind)) + ".csv";
    CHECK(slurp(dir / "nested" / "ds" / name) == slurp(dir / "again" / name));
  }
  CHECK(slurp(dir / "nested" / "ds" / "manifest.json") == slurp(dir / "again" / "manifest.json"));
}

TEST_CASE("empty split is a header-only file") {
  DatasetSplit empty;
  empty.channels = 1;
  empty.timesteps = 2;
  CHECK(to_csv(empty) == "id,class,scene,v0,v1\n");
  CHECK(parse_csv(to_csv(empty), SplitKind::kTrain, 1, 2) == empty);
}

TEST_CASE("hand-written fixture parses") {
  const std::string text =
      "id,class,scene,v0,v1,v2,v3\n"
      "7,2,1,0.5,-1.25,3,1e-3\n";
  const auto s = parse_csv(text, SplitKind::kTestBiased, 2, 2);
  REQUIRE(s.samples.size() == 1);
  CHECK(s.kind == SplitKind::kTestBiased);
  CHECK(s.samples[0].id == 7);
  CHECK(s.samples[0].label == 2);
  CHECK(s.samples[0].scene == 1);
  CHECK(s.samples[0].values == std::vector<double>{0.5, -1.25, 3.0, 0.001});
  const auto t = to_tensor(s);
  CHECK(t.at(0, 0, 1) == -1.25);
  CHECK(t.at(0, 1, 0) == 3.0);
}

TEST_CASE("malformed files name the offending line") {
  const auto expect_line = [](const std::string& text, const std::string& needle) {
    try {
      parse_csv(text, SplitKind::kTrain, 1, 2, "fixture.csv");
      FAIL("expected rejection");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      INFO(msg);
      CHECK(msg.find(needle) != std::string::npos);
    }
  };
  expect_line("id,class,scene,v0\n", "fixture.csv:1:");
  expect_line("id,class,scene,v0,v1\n0,0,0,1.0\n", "fixture.csv:2:");
  expect_line("id,class,scene,v0,v1\n0,0,0,1.0,2.0\n1,0,0,1.0,abc\n", "fixture.csv:3:");
  expect_line("id,class,scene,v0,v1\n0,0,0,1.0,2.0,3.0\n", "fixture.csv:2:");
  expect_line("id,class,scene,v0,v1\n0,-1,0,1.0,2.0\n", "fixture.csv:2:");
  CHECK_THROWS(load_split("/nonexistent/osev/split.csv", SplitKind::kTrain, 1, 2));
}

TEST_CASE("unbiased split carries no scene-class dependence") {
  SyntheticSpec spec;
  spec.test_per_class = 400;
  const auto s = generate_split(spec, SplitKind::kTestUnbiased);
  const std::size_t k = spec.known_classes;
  std::vector<std::vector<double>> table(k, std::vector<double>(k, 0.0));
  for (const auto& x : s.samples) table[x.label][x.scene] += 1.0;
  const double n = static_cast<double>(s.samples.size());
  double chi2 = 0.0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      double ra = 0.0, cb = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        ra += table[a][j];
        cb += table[j][b];
      }
      const double expected = ra * cb / n;
      chi2 += (table[a][b] - expected) * (table[a][b] - expected) / expected;
    }
  }
  // 99.9th percentile of chi-square with 16 degrees of freedom.
  CHECK(chi2 < 39.25);

  // The biased split is strongly dependent by contrast.
  const auto biased = generate_split(spec, SplitKind::kTestBiased);
  std::size_t same = 0;
  for (const auto& x : biased.samples) same += x.scene == x.label;
  CHECK(static_cast<double>(same) / static_cast<double>(biased.samples.size()) > 0.9);
}

TEST_CASE("temporal shuffling keeps channel means and breaks the frequency") {
  SyntheticSpec spec;
  spec.noise_sigma = 0.0;
  spec.timesteps = 64;
  spec.train_per_class = 10;
  const auto split = generate_split(spec, SplitKind::kTrain);
  const auto plan = frequency_plan(spec);
  const auto x = to_tensor(split);
  Rng rng(7);
  const auto y = nn::temporal_shuffle(x, rng);
  std::size_t kept = 0;
  for (std::size_t b = 0; b < split.samples.size(); ++b) {
    for (std::size_t c = 0; c < spec.channels; ++c) {
      double mx = 0.0, my = 0.0;
      for (std::size_t t = 0; t < spec.timesteps; ++t) {
        mx += x.at(b, c, t);
        my += y.at(b, c, t);
      }
      CHECK(std::abs(mx - my) <= 1e-12);
    }
    std::vector<double> vals(spec.timesteps);
    for (std::size_t t = 0; t < spec.timesteps; ++t) vals[t] = y.at(b, 0, t);
    kept += static_cast<double>(peak_bin(vals, 0, spec.timesteps)) ==
            plan.known[split.samples[b].label];
  }
  CHECK(static_cast<double>(kept) / static_cast<double>(split.samples.size()) < 0.3);
}

TEST_CASE("a time-blind model learns the scene shortcut") {
  SyntheticSpec spec;
  spec.train_per_class = 100;
  const auto d = generate(spec);
  debias::Architecture arch;
  arch.input_channels = spec.channels;
  arch.num_classes = spec.known_classes;
  arch.hidden = 8;
  Rng init(1);
  auto model = debias::make_static_branch("static", arch, init);
  nn::SgdOptions sgd;
  sgd.lr = 0.05;
  Rng rng(2);
  for (std::size_t step = 0; step < 400; ++step) {
    std::vector<std::size_t> idx, labels;
    for (std::size_t i = 0; i < 32; ++i) idx.push_back(rng.below(d.train.samples.size()));
    for (std::size_t i : idx) labels.push_back(d.train.samples[i].label);
    const auto out = model.forward(to_tensor(d.train, idx));
    const auto ev = debias::evidence_from_logits(out.logits, arch);
    const auto loss = debias::edl_batch(labels, ev);
    model.backward(debias::evidence_backward(out.logits, loss.grad_evidence, arch), nullptr);
    auto params = model.parameters();
    nn::sgd_step(params, sgd);
  }
  const auto acc = [&](const DatasetSplit& s) {
    const auto out = model.forward(to_tensor(s));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < s.samples.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < arch.num_classes; ++k) {
        if (out.logits.at(i, k) > out.logits.at(i, best)) best = k;
      }
      hits += best == s.samples[i].label;
    }
    return static_cast<double>(hits) / static_cast<double>(s.samples.size());
  };
  const double train_acc = acc(d.train);
  const double unbiased_acc = acc(d.test_unbiased);
  INFO(train_acc << " " << unbiased_acc);
  CHECK(train_acc > 0.85);
  CHECK(unbiased_acc < 0.5);
}

TEST_CASE("invalid specs are rejected field by field") {
  SyntheticSpec s;
  CHECK(s.problems().empty());
  s.known_classes = 1;
  s.unknown_classes = 0;
  s.bias_strength = 1.5;
  s.channels = 2;
  const auto p = s.problems();
  CHECK(p.size() == 4);
  try {
    s.validate();
    FAIL("expected InvalidSpec");
  } catch (const InvalidSpec& e) {
    const std::string msg = e.what();
    CHECK(msg.find("known_classes") != std::string::npos);
    CHECK(msg.find("unknown_classes") != std::string::npos);
    CHECK(msg.find("bias_strength") != std::string::npos);
    CHECK(msg.find("channels") != std::string::npos);
  }
  SyntheticSpec short_t;
  short_t.timesteps = 8;
  CHECK_THROWS_AS(generate(short_t), InvalidSpec);
  SyntheticSpec noisy;
  noisy.noise_sigma = -1.0;
  CHECK_THROWS_AS(noisy.validate(), InvalidSpec);
}

TEST_CASE("spec files") {
  const auto kv = config::KeyValues::parse("known_classes = 3\nseed = 9 # comment\n");
  const auto s = SyntheticSpec::from_config(kv);
  CHECK(s.known_classes == 3);
  CHECK(s.seed == 9);
  CHECK(s.unknown_classes == SyntheticSpec{}.unknown_classes);
  CHECK(SyntheticSpec::from_json(s.to_json()).to_json() == s.to_json());
  CHECK_THROWS(SyntheticSpec::from_config(config::KeyValues::parse("colour = red\n")));

  const auto shipped = config::KeyValues::load(testing::source_dir() / "configs" / "dataset.conf");
  const auto d = SyntheticSpec::from_config(shipped);
  CHECK(d.to_json() == SyntheticSpec{}.to_json());
}
