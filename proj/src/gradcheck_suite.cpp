#include "osev/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <stdexcept>

#include "osev/debias.hpp"
#include "osev/hsic.hpp"
#include "osev/nn/gradcheck.hpp"
#include "osev/nn/layers.hpp"
#include "osev/random.hpp"

namespace osev::checks {
namespace {

using nn::Evaluation;
using nn::Parameter;
using nn::Tensor;

void fill_normal(Tensor& t, Rng& rng, double scale = 1.0) {
  for (double& v : t.values()) v = scale * rng.normal();
}

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (double& v : t.values()) v = rng.uniform(lo, hi);
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> row(const Tensor& t, std::size_t i) {
  const std::size_t k = t.dim(1);
  return {t.values().begin() + static_cast<std::ptrdiff_t>(i * k),
          t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * k)};
}

// Folds exp-clamp activity into the kink pattern.
void hash_clamps(std::uint64_t& h, const Tensor& logits, double clamp) {
  for (double z : logits.values()) nn::fold_hash(h, z > clamp ? 1 : (z < -clamp ? 2 : 0));
}

void hash_argmax(std::uint64_t& h, const Tensor& scores) {
  for (std::size_t i = 0; i < scores.dim(0); ++i) nn::fold_hash(h, evidential::argmax(row(scores, i)));
}

class CaseRunner {
 public:
  CaseRunner(std::string name, const SuiteOptions& options) : options_(options) {
    result_.name = std::move(name);
    result_.tolerance = options.tolerance;
  }

  // Checks one instance. The injected bug adds 0.01 * sum(theta^2) to the
  // value without its gradient.
  void check(std::size_t instance, const nn::Objective& objective,
             std::vector<Parameter*> params) {
    nn::Objective wrapped = objective;
    if (options_.inject_bug) {
      wrapped = [&objective, params](bool acc) {
        Evaluation e = objective(acc);
        for (const Parameter* p : params) {
          for (double v : p->value.values()) e.value += 0.01 * v * v;
        }
        return e;
      };
    }
    nn::GradcheckOptions go;
    go.eps = options_.eps;
    go.tolerance = options_.tolerance;
    go.seed = derive_seed(options_.seed, instance);
    const auto report = nn::gradcheck(wrapped, params, go);
    ++result_.instances;
    for (const auto& p : report.parameters) {
      result_.checked += p.checked;
      result_.skipped += p.skipped;
      if (!(p.max_rel_error < options_.tolerance)) {
        result_.failing.push_back(std::to_string(instance) + ":" + p.name);
      }
      // NaN and inf must register as failures in the maximum as well.
      if (!(p.max_rel_error <= result_.max_rel_error)) result_.max_rel_error = p.max_rel_error;
    }
  }

  CaseResult result() const { return result_; }

 private:
  const SuiteOptions& options_;
  CaseResult result_;
};

Rng instance_rng(const SuiteOptions& o, const char* name, std::size_t i) {
  return Rng(derive_seed(derive_seed(o.seed, name), static_cast<std::uint64_t>(i)));
}

// ---------------------------------------------------------------------------
// Layers: objective = <w, layer(x)> with a random projection w.

template <typename MakeLayer>
CaseResult layer_case(const char* name, const SuiteOptions& o, MakeLayer make_layer) {
  CaseRunner runner(name, o);
  for (std::size_t i = 0; i < o.instances; ++i) {
    Rng rng = instance_rng(o, name, i);
    auto [layer, input_shape] = make_layer(rng);
    for (Parameter* p : layer->parameters()) fill_normal(p->value, rng, 0.5);
    Parameter x("input", input_shape);
    fill_normal(x.value, rng);
    const Tensor probe_out = layer->forward(x.value);
    Tensor w(probe_out.shape());
    fill_normal(w, rng);
    nn::Layer* l = layer.get();
    const nn::Objective objective = [l, &x, &w](bool acc) {
      const Tensor out = l->forward(x.value);
      Evaluation e{dot(w, out), 0};
      l->hash_pattern(e.pattern);
      if (acc) {
        const Tensor gin = l->backward(w);
        for (std::size_t k = 0; k < gin.size(); ++k) x.grad[k] += gin[k];
      }
      return e;
    };
    auto params = l->parameters();
    params.push_back(&x);
    runner.check(i, objective, params);
  }
  return runner.result();
}

using LayerFactory = std::pair<std::unique_ptr<nn::Layer>, nn::Shape>;

CaseResult temporal_conv_case(const SuiteOptions& o) {
  return layer_case("temporal_conv", o, [](Rng& rng) {
    const std::size_t cin = 1 + rng.below(3), cout = 1 + rng.below(3), width = 2 + rng.below(4);
    const std::size_t t = width + rng.below(5);
    return LayerFactory{std::make_unique<nn::TemporalConv>("conv", cin, cout, width),
                        nn::Shape{2, cin, t}};
  });
}

CaseResult pointwise_conv_case(const SuiteOptions& o) {
  return layer_case("pointwise_conv", o, [](Rng& rng) {
    const std::size_t cin = 1 + rng.below(3), cout = 1 + rng.below(3), t = 1 + rng.below(6);
    return LayerFactory{std::make_unique<nn::PointwiseConv>("pointwise", cin, cout),
                        nn::Shape{2, cin, t}};
  });
}

CaseResult dense_case(const SuiteOptions& o) {
  return layer_case("dense", o, [](Rng& rng) {
    const std::size_t fin = 1 + rng.below(5), fout = 1 + rng.below(5);
    return LayerFactory{std::make_unique<nn::Dense>("dense", fin, fout), nn::Shape{3, fin}};
  });
}

CaseResult relu_case(const SuiteOptions& o) {
  return layer_case("relu", o, [](Rng& rng) {
    return LayerFactory{std::make_unique<nn::Relu>(), nn::Shape{2, 1 + rng.below(3), 5}};
  });
}

CaseResult mean_pool_case(const SuiteOptions& o) {
  return layer_case("temporal_mean_pool", o, [](Rng& rng) {
    return LayerFactory{std::make_unique<nn::TemporalMeanPool>(),
                        nn::Shape{2, 1 + rng.below(3), 1 + rng.below(6)}};
  });
}

// ---------------------------------------------------------------------------
// Losses with evidence as the free variable.

CaseResult edl_case(const SuiteOptions& o) {
  CaseRunner runner("edl_loss", o);
  for (std::size_t i = 0; i < o.instances; ++i) {
    Rng rng = instance_rng(o, "edl_loss", i);
    const std::size_t k = 2 + rng.below(7);
    Parameter e("evidence", {k});
    fill_uniform(e.value, rng, 0.05, 6.0);
    std::vector<double> y(k, 0.0);
    y[rng.below(k)] = 1.0;
    const nn::Objective objective = [&](bool acc) {
      const std::vector<double> ev(e.value.values().begin(), e.value.values().end());
      const auto r = losses::edl_loss(y, evidential::EvidenceVector(ev));
      if (acc) {
        for (std::size_t j = 0; j < k; ++j) e.grad[j] += r.grad_evidence[j];
      }
      return Evaluation{r.loss, 0};
    };
    runner.check(i, objective, {&e});
  }
  return runner.result();
}

CaseResult euc_case(const SuiteOptions& o) {
  CaseRunner runner("euc_loss", o);
  for (std::size_t i = 0; i < o.instances; ++i) {
    Rng rng = instance_rng(o, "euc_loss", i);
    const std::size_t k = 2 + rng.below(4);
    const std::size_t n = 2 + rng.below(6);
    Parameter e("evidence", {n, k});
    fill_uniform(e.value, rng, 0.05, 8.0);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng.below(k);
    const double lambda = rng.uniform(0.01, 1.0);
    // Alternate reductions so both normalizations are covered.
    const auto reduction =
        i % 2 == 0 ? losses::EucReduction::kSubsetMean : losses::EucReduction::kBatchMean;
    const nn::Objective objective = [&](bool acc) {
      losses::BatchPrediction batch;
      for (std::size_t s = 0; s < n; ++s) {
        batch.add(labels[s], evidential::EvidenceVector(row(e.value, s)));
      }
      const auto r = losses::euc_loss(batch, lambda, reduction);
      Evaluation ev{r.loss, 0};
      hash_argmax(ev.pattern, e.value);
      if (acc) {
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t j = 0; j < k; ++j) e.grad.at(s, j) += r.grad_evidence[s][j];
        }
      }
      return ev;
    };
    runner.check(i, objective, {&e});
  }
  return runner.result();
}

CaseResult hsic_case(const SuiteOptions& o) {
  CaseRunner runner("hsic_value_and_grad", o);
  for (std::size_t i = 0; i < o.instances; ++i) {
    Rng rng = instance_rng(o, "hsic", i);
    const std::size_t n = 3 + rng.below(8);
    const std::size_t dx = 1 + rng.below(4);
    const std::size_t dy = 1 + rng.below(4);
    Parameter x("x", {n, dx});
    fill_normal(x.value, rng);
    Tensor y({n, dy});
    fill_normal(y, rng);
    // Bandwidths held at their base-point values.
    auto px = hsic::KernelParams::fixed(hsic::median_heuristic_sigma(x.value.as_matrix()));
    const auto py = hsic::KernelParams::fixed(hsic::median_heuristic_sigma(y.as_matrix()));
    px.center_features = i % 2 == 1;
    const nn::Objective objective = [&](bool acc) {
      const auto r = hsic::hsic_value_and_grad(x.value.as_matrix(), y.as_matrix(), px, py);
      if (acc) {
        for (std::size_t a = 0; a < n; ++a) {
          for (std::size_t b = 0; b < dx; ++b) x.grad.at(a, b) += r.grad_x(a, b);
        }
      }
      return Evaluation{r.value, 0};
    };
    runner.check(i, objective, {&x});
  }
  return runner.result();
}

// ---------------------------------------------------------------------------
// CED objectives and the composed model on a tiny three-branch network.

struct TinyProblem {
  debias::CedBranches branches;
  debias::Batch batch;
  Rng shuffle{0};
  double lambda = 1.0;
};

TinyProblem tiny_problem(const SuiteOptions& o, const char* name, std::size_t i) {
  Rng rng = instance_rng(o, name, i);
  debias::Architecture arch;
  arch.input_channels = 2 + rng.below(2);
  arch.num_classes = 2 + rng.below(2);
  arch.hidden = 2 + rng.below(3);
  arch.conv_layers = 1 + rng.below(2);
  arch.kernel_width = 2 + rng.below(3);
  arch.evidence = o.evidence;
  arch.exp_clamp = o.exp_clamp;
  TinyProblem p;
  p.branches = debias::make_branches(arch, rng.next(), true);
  // Zero-initialized biases put dead units exactly on the ReLU kink.
  for (Parameter* q : p.branches.all_parameters()) {
    for (double& v : q->value.values()) v += 0.1 * rng.normal();
  }
  const std::size_t b = 3 + rng.below(4);
  const std::size_t t = 4 + rng.below(4);
  p.batch.x = Tensor({b, arch.input_channels, t});
  fill_normal(p.batch.x, rng);
  for (std::size_t s = 0; s < b; ++s) p.batch.labels.push_back(rng.below(arch.num_classes));
  p.shuffle = Rng(rng.next());
  p.lambda = rng.uniform(0.1, 2.0);
  return p;
}

std::uint64_t forward_pattern(const debias::CedBranches& br, const debias::CedForward& fwd) {
  std::uint64_t h = 0;
  br.f.hash_pattern(h);
  br.h_shuffled->hash_pattern(h);
  br.h_static->hash_pattern(h);
  hash_clamps(h, fwd.f.logits, br.arch.exp_clamp);
  hash_clamps(h, fwd.h_shuffled.logits, br.arch.exp_clamp);
  hash_clamps(h, fwd.h_static.logits, br.arch.exp_clamp);
  hash_argmax(h, fwd.evidence);
  return h;
}

template <bool kDebias>
CaseResult ced_objective_case(const SuiteOptions& o) {
  const char* name = kDebias ? "debias_objective" : "bias_objective";
  CaseRunner runner(name, o);
  for (std::size_t i = 0; i < o.instances; ++i) {
    TinyProblem p = tiny_problem(o, name, i);
    Rng shuffle0 = p.shuffle;
    const auto base = debias::ced_forward(p.branches, p.batch.x, shuffle0);
    const auto kernels = debias::freeze_bandwidths(base, {});
    const nn::Objective objective = [&](bool acc) {
      Rng shuffle = p.shuffle;  // same permutation at every evaluation
      const auto fwd = debias::ced_forward(p.branches, p.batch.x, shuffle);
      Evaluation e{0.0, forward_pattern(p.branches, fwd)};
      if constexpr (kDebias) {
        e.value = acc ? debias::debias_objective(p.branches, fwd, p.batch.labels, p.lambda,
                                                 kernels, true)
                            .loss
                      : debias::debias_terms(p.batch.labels, fwd, p.lambda, kernels).loss;
      } else {
        e.value = acc ? debias::bias_objective(p.branches, fwd, p.batch.labels, p.lambda, kernels,
                                               true)
                            .loss
                      : debias::bias_terms(p.batch.labels, fwd, p.lambda, kernels).loss;
      }
      return e;
    };
    runner.check(i, objective, kDebias ? p.branches.f_parameters() : p.branches.h_parameters());
  }
  return runner.result();
}

CaseResult composed_case(const SuiteOptions& o) {
  CaseRunner runner("composed_model", o);
  for (std::size_t i = 0; i < o.instances; ++i) {
    TinyProblem p = tiny_problem(o, "composed", i);
    Rng shuffle0 = p.shuffle;
    const auto base = debias::ced_forward(p.branches, p.batch.x, shuffle0);
    debias::StepOptions opts;
    opts.use_euc = true;
    opts.use_ced = true;
    opts.weights = o.weights;
    opts.weights.lambda_hsic = p.lambda;
    opts.euc_reduction = o.euc_reduction;
    opts.kernel = hsic::KernelParams::fixed(
        hsic::median_heuristic_sigma(base.f.features.as_matrix()));
    const double lambda_t = 0.01 + 0.99 * static_cast<double>(i) /
                                       static_cast<double>(std::max<std::size_t>(1, o.instances));
    for (const bool f_side : {true, false}) {
      const nn::Objective objective = [&, f_side](bool /*acc*/) {
        for (Parameter* q : p.branches.all_parameters()) q->zero_grad();
        Rng shuffle = p.shuffle;
        const auto g = debias::step_gradients(p.branches, p.batch, opts, lambda_t, 0, shuffle);
        return Evaluation{f_side ? g.objective_f : g.objective_h,
                          forward_pattern(p.branches, g.forward)};
      };
      runner.check(i, objective,
                   f_side ? p.branches.f_parameters() : p.branches.h_parameters());
    }
  }
  return runner.result();
}

using CaseFn = std::function<CaseResult(const SuiteOptions&)>;

const std::vector<std::pair<std::string, CaseFn>>& registry() {
  static const std::vector<std::pair<std::string, CaseFn>> cases = {
      {"temporal_conv", temporal_conv_case},
      {"pointwise_conv", pointwise_conv_case},
      {"dense", dense_case},
      {"relu", relu_case},
      {"temporal_mean_pool", mean_pool_case},
      {"edl_loss", edl_case},
      {"euc_loss", euc_case},
      {"hsic_value_and_grad", hsic_case},
      {"debias_objective", ced_objective_case<true>},
      {"bias_objective", ced_objective_case<false>},
      {"composed_model", composed_case},
  };
  return cases;
}

}  // namespace

bool SuiteResult::passed() const {
  return !cases.empty() &&
         std::all_of(cases.begin(), cases.end(), [](const CaseResult& c) { return c.passed(); });
}

nlohmann::json SuiteResult::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : cases) {
    out.push_back({{"name", c.name},
                   {"instances", c.instances},
                   {"checked", c.checked},
                   {"skipped", c.skipped},
                   {"max_rel_error", c.max_rel_error},
                   {"tolerance", c.tolerance},
                   {"passed", c.passed()},
                   {"failing", c.failing}});
  }
  return {{"passed", passed()}, {"cases", out}};
}

std::vector<std::string> case_names() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : registry()) out.push_back(name);
  return out;
}

SuiteResult run_suite(const SuiteOptions& options, const std::vector<std::string>& only) {
  for (const auto& name : only) {
    const auto& r = registry();
    if (std::none_of(r.begin(), r.end(), [&](const auto& e) { return e.first == name; })) {
      throw std::invalid_argument("unknown gradcheck case '" + name + "'");
    }
  }
  SuiteResult result;
  for (const auto& [name, fn] : registry()) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    result.cases.push_back(fn(options));
  }
  return result;
}

}  // namespace osev::checks
