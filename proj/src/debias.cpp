#include "osev/debias.hpp"

#include <cmath>
#include <stdexcept>

namespace osev::debias {
namespace {

std::vector<nn::LayerSpec> conv_specs(const Architecture& arch, bool temporal) {
  std::vector<nn::LayerSpec> specs;
  for (std::size_t l = 0; l < arch.conv_layers; ++l) {
    specs.push_back(temporal ? nn::LayerSpec::temporal_conv(arch.hidden, arch.kernel_width)
                             : nn::LayerSpec::pointwise_conv(arch.hidden));
    specs.push_back(nn::LayerSpec::relu());
  }
  specs.push_back(nn::LayerSpec::temporal_mean_pool());
  return specs;
}

Branch make_branch(const std::string& name, const Architecture& arch, Rng& rng, bool temporal) {
  arch.validate();
  // Time length is free; 1 is a placeholder for shape composition checks.
  const auto backbone = nn::Sequential::build(name + ".backbone", conv_specs(arch, temporal),
                                              {arch.input_channels, 1}, rng);
  const std::vector<nn::LayerSpec> head_specs = {nn::LayerSpec::dense(arch.num_classes)};
  auto head = nn::Sequential::build(name + ".head", head_specs, backbone.output_shape(), rng);
  return Branch(backbone, std::move(head));
}

std::vector<double> row(const Tensor& t, std::size_t i) {
  const std::size_t k = t.dim(1);
  return {t.values().begin() + static_cast<std::ptrdiff_t>(i * k),
          t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * k)};
}

void scale_into(Tensor& dst, const Tensor& src, double scale) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

Tensor scaled(const Tensor& src, double scale) {
  Tensor out(src.shape());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = scale * src[i];
  return out;
}

Tensor matrix_to_tensor(const Matrix& m) {
  return Tensor({m.rows(), m.cols()}, std::vector<double>(m.data().begin(), m.data().end()));
}

std::vector<Tensor> snapshot_grads(std::span<nn::Parameter* const> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const nn::Parameter* p : params) out.push_back(p->grad);
  return out;
}

void verify_unchanged(std::span<nn::Parameter* const> params, const std::vector<Tensor>& before,
                      const char* objective) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(params[i]->grad == before[i])) {
      throw std::logic_error(std::string(objective) + " leaked a gradient into " +
                             params[i]->name);
    }
  }
}

void check_labels(std::span<const std::size_t> labels, const Tensor& evidence) {
  if (evidence.rank() != 2 || evidence.dim(0) != labels.size()) {
    throw std::invalid_argument("labels (" + std::to_string(labels.size()) +
                                ") do not match evidence " + nn::shape_string(evidence.shape()));
  }
}

}  // namespace

HeadKind parse_head_kind(std::string_view name) {
  if (name == "evidential") return HeadKind::kEvidential;
  if (name == "softmax") return HeadKind::kSoftmax;
  throw std::invalid_argument("unknown head '" + std::string(name) +
                              "' (expected evidential or softmax)");
}

std::string_view to_string(HeadKind kind) {
  return kind == HeadKind::kSoftmax ? "softmax" : "evidential";
}

void Architecture::validate() const {
  if (input_channels == 0) throw std::invalid_argument("architecture: input_channels must be > 0");
  if (num_classes < 2) throw std::invalid_argument("architecture: need at least 2 classes");
  if (hidden == 0) throw std::invalid_argument("architecture: hidden must be > 0");
  if (conv_layers == 0) throw std::invalid_argument("architecture: conv_layers must be > 0");
  if (kernel_width < 2) throw std::invalid_argument("architecture: kernel_width must be >= 2");
  if (!(exp_clamp > 0.0)) throw std::invalid_argument("architecture: exp_clamp must be > 0");
}

nlohmann::json Architecture::to_json() const {
  return {{"input_channels", input_channels},
          {"num_classes", num_classes},
          {"hidden", hidden},
          {"conv_layers", conv_layers},
          {"kernel_width", kernel_width},
          {"head", std::string(to_string(head))},
          {"evidence", std::string(evidential::to_string(evidence))},
          {"exp_clamp", exp_clamp}};
}

Architecture Architecture::from_json(const nlohmann::json& j) {
  Architecture a;
  a.input_channels = j.at("input_channels").get<std::size_t>();
  a.num_classes = j.at("num_classes").get<std::size_t>();
  a.hidden = j.at("hidden").get<std::size_t>();
  a.conv_layers = j.at("conv_layers").get<std::size_t>();
  a.kernel_width = j.at("kernel_width").get<std::size_t>();
  a.head = parse_head_kind(j.at("head").get<std::string>());
  a.evidence = evidential::parse_evidence_function(j.at("evidence").get<std::string>());
  a.exp_clamp = j.at("exp_clamp").get<double>();
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------

Branch::Output Branch::forward(const Tensor& x) {
  Output out;
  out.features = backbone_.forward(x);
  out.logits = head_.forward(out.features);
  return out;
}

void Branch::backward(const Tensor& grad_logits, const Tensor* grad_features) {
  Tensor g = head_.backward(grad_logits);
  if (grad_features != nullptr) {
    if (grad_features->shape() != g.shape()) {
      throw std::invalid_argument("feature gradient shape " +
                                  nn::shape_string(grad_features->shape()) + " != " +
                                  nn::shape_string(g.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*grad_features)[i];
  }
  backbone_.backward(g);
}

std::vector<nn::Parameter*> Branch::parameters() {
  auto p = backbone_.parameters();
  for (nn::Parameter* q : head_.parameters()) p.push_back(q);
  return p;
}

std::vector<const nn::Parameter*> Branch::parameters() const {
  auto mutable_params = const_cast<Branch*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

void Branch::hash_pattern(std::uint64_t& h) const {
  backbone_.hash_pattern(h);
  head_.hash_pattern(h);
}

Branch make_temporal_branch(const std::string& name, const Architecture& arch, Rng& rng) {
  return make_branch(name, arch, rng, true);
}

Branch make_static_branch(const std::string& name, const Architecture& arch, Rng& rng) {
  return make_branch(name, arch, rng, false);
}

std::vector<nn::Parameter*> CedBranches::h_parameters() {
  std::vector<nn::Parameter*> out;
  if (h_shuffled) {
    for (nn::Parameter* p : h_shuffled->parameters()) out.push_back(p);
  }
  if (h_static) {
    for (nn::Parameter* p : h_static->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<nn::Parameter*> CedBranches::all_parameters() {
  auto out = f.parameters();
  for (nn::Parameter* p : h_parameters()) out.push_back(p);
  return out;
}

std::vector<const nn::Parameter*> CedBranches::all_parameters() const {
  auto mutable_params = const_cast<CedBranches*>(this)->all_parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

CedBranches make_branches(const Architecture& arch, std::uint64_t seed, bool with_biased) {
  CedBranches b;
  b.arch = arch;
  Rng f_rng(derive_seed(seed, "init.f"));
  b.f = make_temporal_branch("f", arch, f_rng);
  if (with_biased) {
    Rng s_rng(derive_seed(seed, "init.h_shuffled"));
    Rng t_rng(derive_seed(seed, "init.h_static"));
    b.h_shuffled = make_temporal_branch("h_shuffled", arch, s_rng);
    b.h_static = make_static_branch("h_static", arch, t_rng);
  }
  return b;
}

CedBranches strip_for_inference(const CedBranches& branches) {
  CedBranches out;
  out.arch = branches.arch;
  out.f = branches.f;
  return out;
}

// ---------------------------------------------------------------------------

Tensor evidence_from_logits(const Tensor& logits, const Architecture& arch) {
  Tensor out(logits.shape());
  if (arch.head == HeadKind::kSoftmax) {
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
      const auto p = losses::softmax(row(logits, i));
      for (std::size_t k = 0; k < p.size(); ++k) out.at(i, k) = p[k];
    }
    return out;
  }
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) {
      throw NonFiniteLoss("non-finite logit at flat index " + std::to_string(i));
    }
    out[i] = evidential::evidence_value(logits[i], arch.evidence, arch.exp_clamp);
  }
  return out;
}

Tensor evidence_backward(const Tensor& logits, const Tensor& grad_evidence,
                         const Architecture& arch) {
  Tensor g(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    g[i] = grad_evidence[i] *
           evidential::evidence_derivative(logits[i], arch.evidence, arch.exp_clamp);
  }
  return g;
}

CedForward ced_forward(CedBranches& branches, const Tensor& x, Rng& shuffle_rng) {
  if (!branches.has_biased()) {
    throw std::logic_error("ced_forward requires the biased branches (model was stripped?)");
  }
  if (x.rank() != 3 || x.dim(0) < 2) {
    throw std::invalid_argument("ced_forward needs a B x C x T batch with B >= 2, got " +
                                nn::shape_string(x.shape()));
  }
  CedForward fwd;
  fwd.f = branches.f.forward(x);
  const Tensor shuffled = nn::temporal_shuffle(x, shuffle_rng);
  fwd.h_shuffled = branches.h_shuffled->forward(shuffled);
  fwd.h_static = branches.h_static->forward(x);
  fwd.evidence = evidence_from_logits(fwd.f.logits, branches.arch);
  fwd.evidence_shuffled = evidence_from_logits(fwd.h_shuffled.logits, branches.arch);
  fwd.evidence_static = evidence_from_logits(fwd.h_static.logits, branches.arch);
  return fwd;
}

EdlBatch edl_batch(std::span<const std::size_t> labels, const Tensor& evidence) {
  check_labels(labels, evidence);
  const std::size_t n = labels.size();
  const std::size_t k = evidence.dim(1);
  EdlBatch out;
  out.grad_evidence = Tensor(evidence.shape());
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> y(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(y.begin(), y.end(), 0.0);
    y.at(labels[i]) = 1.0;
    const auto r = losses::edl_loss(y, evidential::EvidenceVector(row(evidence, i)));
    out.loss += r.loss;
    for (std::size_t j = 0; j < k; ++j) out.grad_evidence.at(i, j) = r.grad_evidence[j] * inv_n;
  }
  out.loss *= inv_n;
  return out;
}

CedKernels freeze_bandwidths(const CedForward& fwd, const hsic::KernelParams& base) {
  auto freeze = [&](const Tensor& features) {
    if (base.mode == hsic::KernelParams::Bandwidth::kFixed) return base;
    auto p = hsic::KernelParams::fixed(hsic::resolve_sigma(features.as_matrix(), base));
    p.center_features = base.center_features;
    return p;
  };
  // Centering never changes pairwise distances, so the median can be taken on
  // the raw features.
  return {freeze(fwd.f.features), freeze(fwd.h_shuffled.features),
          freeze(fwd.h_static.features)};
}

DebiasTerms debias_terms(std::span<const std::size_t> labels, const CedForward& fwd,
                         double lambda, const CedKernels& kernels) {
  DebiasTerms t;
  const auto edl = edl_batch(labels, fwd.evidence);
  t.edl = edl.loss;
  t.grad_evidence = edl.grad_evidence;
  const auto f = fwd.f.features.as_matrix();
  const auto a = hsic::hsic_value_and_grad(f, fwd.h_shuffled.features.as_matrix(), kernels.f,
                                           kernels.h_shuffled);
  const auto b = hsic::hsic_value_and_grad(f, fwd.h_static.features.as_matrix(), kernels.f,
                                           kernels.h_static);
  t.hsic_shuffled = a.value;
  t.hsic_static = b.value;
  t.loss = t.edl + lambda * (a.value + b.value);
  t.grad_features = Tensor(fwd.f.features.shape());
  scale_into(t.grad_features, matrix_to_tensor(a.grad_x), lambda);
  scale_into(t.grad_features, matrix_to_tensor(b.grad_x), lambda);
  return t;
}

BiasTerms bias_terms(std::span<const std::size_t> labels, const CedForward& fwd, double lambda,
                     const CedKernels& kernels) {
  BiasTerms t;
  const auto edl_s = edl_batch(labels, fwd.evidence_shuffled);
  const auto edl_t = edl_batch(labels, fwd.evidence_static);
  t.edl_shuffled = edl_s.loss;
  t.edl_static = edl_t.loss;
  t.grad_evidence_shuffled = edl_s.grad_evidence;
  t.grad_evidence_static = edl_t.grad_evidence;
  const auto f = fwd.f.features.as_matrix();
  // HSIC is symmetric; differentiate with the biased feature in the first slot.
  const auto a = hsic::hsic_value_and_grad(fwd.h_shuffled.features.as_matrix(), f,
                                           kernels.h_shuffled, kernels.f);
  const auto b =
      hsic::hsic_value_and_grad(fwd.h_static.features.as_matrix(), f, kernels.h_static, kernels.f);
  t.hsic_shuffled = a.value;
  t.hsic_static = b.value;
  t.loss = (t.edl_shuffled - lambda * a.value) + (t.edl_static - lambda * b.value);
  t.grad_features_shuffled = scaled(matrix_to_tensor(a.grad_x), -lambda);
  t.grad_features_static = scaled(matrix_to_tensor(b.grad_x), -lambda);
  return t;
}

DebiasTerms debias_objective(CedBranches& branches, const CedForward& fwd,
                             std::span<const std::size_t> labels, double lambda,
                             const CedKernels& kernels, bool verify) {
  const auto others = branches.h_parameters();
  std::vector<Tensor> before;
  if (verify) before = snapshot_grads(others);
  DebiasTerms t = debias_terms(labels, fwd, lambda, kernels);
  branches.f.backward(evidence_backward(fwd.f.logits, t.grad_evidence, branches.arch),
                      &t.grad_features);
  if (verify) verify_unchanged(others, before, "debias_objective");
  return t;
}

BiasTerms bias_objective(CedBranches& branches, const CedForward& fwd,
                         std::span<const std::size_t> labels, double lambda,
                         const CedKernels& kernels, bool verify) {
  const auto others = branches.f_parameters();
  std::vector<Tensor> before;
  if (verify) before = snapshot_grads(others);
  BiasTerms t = bias_terms(labels, fwd, lambda, kernels);
  branches.h_shuffled->backward(
      evidence_backward(fwd.h_shuffled.logits, t.grad_evidence_shuffled, branches.arch),
      &t.grad_features_shuffled);
  branches.h_static->backward(
      evidence_backward(fwd.h_static.logits, t.grad_evidence_static, branches.arch),
      &t.grad_features_static);
  if (verify) verify_unchanged(others, before, "bias_objective");
  return t;
}

// ---------------------------------------------------------------------------

TrainingMode TrainingMode::alternating(std::size_t period) {
  if (period < 1) throw std::invalid_argument("alternating period must be >= 1");
  return {Kind::kAlternating, period};
}

StepGradients step_gradients(CedBranches& branches, const Batch& batch,
                             const StepOptions& options, double lambda_t, std::size_t step_index,
                             Rng& shuffle_rng) {
  const Architecture& arch = branches.arch;
  const auto& labels = batch.labels;
  const auto& w = options.weights;
  const bool softmax = arch.head == HeadKind::kSoftmax;
  if (softmax && (options.use_euc || options.use_ced)) {
    throw std::invalid_argument("the softmax baseline trains with cross-entropy only");
  }
  const bool ced = options.use_ced;
  if (ced && !branches.has_biased()) {
    throw std::logic_error("debiasing requested but the model has no biased branches");
  }

  StepGradients out;
  StepRecord& rec = out.record;
  if (ced && options.mode.kind == TrainingMode::Kind::kAlternating) {
    rec.side = (step_index / options.mode.period) % 2 == 0 ? StepRecord::Side::kUnbiased
                                                           : StepRecord::Side::kBiased;
  }
  const bool update_f = rec.side != StepRecord::Side::kBiased;
  const bool update_h = ced && rec.side != StepRecord::Side::kUnbiased;

  CedForward& fwd = out.forward;
  if (ced) {
    fwd = ced_forward(branches, batch.x, shuffle_rng);
  } else {
    fwd.f = branches.f.forward(batch.x);
    fwd.evidence = evidence_from_logits(fwd.f.logits, arch);
  }
  const std::size_t n = labels.size();
  if (fwd.f.logits.dim(0) != n) {
    throw std::invalid_argument("batch has " + std::to_string(fwd.f.logits.dim(0)) +
                                " samples but " + std::to_string(n) + " labels");
  }

  Tensor grad_e_f(fwd.evidence.shape());
  Tensor grad_logits_f;
  if (softmax) {
    grad_logits_f = Tensor(fwd.f.logits.shape());
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = losses::softmax_cross_entropy(row(fwd.f.logits, i), labels[i]);
      rec.edl += r.loss * inv_n;
      for (std::size_t k = 0; k < r.grad_logits.size(); ++k) {
        grad_logits_f.at(i, k) = r.grad_logits[k] * inv_n;
      }
      if (evidential::argmax(r.probs) == labels[i]) ++rec.correct;
    }
  } else {
    const auto edl = edl_batch(labels, fwd.evidence);
    rec.edl = edl.loss;
    grad_e_f = edl.grad_evidence;
    losses::BatchPrediction preds;
    for (std::size_t i = 0; i < n; ++i) {
      preds.add(labels[i], evidential::EvidenceVector(row(fwd.evidence, i)));
      if (preds[i].correct) ++rec.correct;
    }
    if (options.use_euc) {
      const auto euc = losses::euc_loss(preds, lambda_t, options.euc_reduction);
      rec.euc = euc.loss;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < arch.num_classes; ++k) {
          grad_e_f.at(i, k) += w.w_euc * euc.grad_evidence[i][k];
        }
      }
    }
  }

  std::optional<Tensor> grad_features_f;
  BiasTerms bias;
  if (ced) {
    const CedKernels kernels = freeze_bandwidths(fwd, options.kernel);
    const DebiasTerms debias = debias_terms(labels, fwd, w.lambda_hsic, kernels);
    bias = bias_terms(labels, fwd, w.lambda_hsic, kernels);
    rec.hsic_shuffled = debias.hsic_shuffled;
    rec.hsic_static = debias.hsic_static;
    const double hsic_f = w.lambda_hsic * (debias.hsic_shuffled + debias.hsic_static);
    rec.ced = hsic_f + bias.loss;
    out.objective_f = w.w_ced * hsic_f;
    out.objective_h = w.w_ced * bias.loss;
    if (w.w_ced * w.lambda_hsic != 0.0) grad_features_f = scaled(debias.grad_features, w.w_ced);
  }
  try {
    rec.total = losses::total_loss(rec.edl, rec.euc, rec.ced, w);
  } catch (const std::domain_error& e) {
    throw NonFiniteLoss(e.what());
  }
  out.objective_f += rec.edl + w.w_euc * rec.euc;

  const auto require_zero = [](std::span<nn::Parameter* const> params) {
    for (const nn::Parameter* p : params) {
      for (double g : p->grad.values()) {
        if (g != 0.0) throw std::logic_error("stop-gradient violated in " + p->name);
      }
    }
  };
  const bool verify = options.verify_stop_gradients;
  auto& active = out.active;
  std::vector<Tensor> f_grads;
  if (update_f) {
    if (verify) require_zero(branches.h_parameters());
    if (!softmax) grad_logits_f = evidence_backward(fwd.f.logits, grad_e_f, arch);
    branches.f.backward(grad_logits_f, grad_features_f ? &*grad_features_f : nullptr);
    for (nn::Parameter* p : branches.f_parameters()) active.push_back(p);
    // The f-side objective must leave every biased parameter untouched.
    if (verify) require_zero(branches.h_parameters());
    if (verify) f_grads = snapshot_grads(branches.f_parameters());
  } else if (verify) {
    require_zero(branches.f_parameters());
  }
  if (update_h) {
    const Tensor gs = scaled(bias.grad_evidence_shuffled, w.w_ced);
    const Tensor gt = scaled(bias.grad_evidence_static, w.w_ced);
    const Tensor fs = scaled(bias.grad_features_shuffled, w.w_ced);
    const Tensor ft = scaled(bias.grad_features_static, w.w_ced);
    branches.h_shuffled->backward(evidence_backward(fwd.h_shuffled.logits, gs, arch), &fs);
    branches.h_static->backward(evidence_backward(fwd.h_static.logits, gt, arch), &ft);
    for (nn::Parameter* p : branches.h_parameters()) active.push_back(p);
    // ...and the biased-side objective every f parameter.
    if (verify && update_f) verify_unchanged(branches.f_parameters(), f_grads, "bias objective");
    if (verify && !update_f) require_zero(branches.f_parameters());
  }
  return out;
}

StepRecord train_step(CedBranches& branches, const Batch& batch, const StepOptions& options,
                      double lambda_t, std::size_t step_index, Rng& shuffle_rng) {
  const auto where = [&](const char* what) {
    return std::string("step ") + std::to_string(step_index) + ": " + what;
  };
  StepGradients g;
  try {
    g = step_gradients(branches, batch, options, lambda_t, step_index, shuffle_rng);
  } catch (const NonFiniteLoss& e) {
    throw NonFiniteLoss(where(e.what()));
  }
  try {
    nn::sgd_step(g.active, options.sgd);
  } catch (const nn::NonFiniteGradient& e) {
    nn::zero_grads(g.active);
    throw NonFiniteLoss(where(e.what()));
  }
  return g.record;
}

Inference infer(CedBranches& branches, const Tensor& x) {
  const auto out = branches.f.forward(x);
  const std::size_t n = out.logits.dim(0);
  const std::size_t k = out.logits.dim(1);
  Inference inf;
  inf.probs = Tensor({n, k});
  inf.scores.resize(n);
  inf.predicted.resize(n);
  const Tensor ev = evidence_from_logits(out.logits, branches.arch);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> p;
    if (branches.arch.head == HeadKind::kSoftmax) {
      p = row(ev, i);
      inf.scores[i] = 1.0 - p[evidential::argmax(p)];
    } else {
      const auto op = evidential::opinion_from_evidence(evidential::EvidenceVector(row(ev, i)));
      p = op.probs;
      inf.scores[i] = op.uncertainty;
    }
    for (std::size_t j = 0; j < k; ++j) inf.probs.at(i, j) = p[j];
    inf.predicted[i] = evidential::argmax(p);
  }
  return inf;
}

}  // namespace osev::debias
