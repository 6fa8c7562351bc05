#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "osev/evidential.hpp"
#include "osev/hsic.hpp"
#include "osev/losses.hpp"
#include "osev/nn/layers.hpp"
#include "osev/nn/optim.hpp"
#include "osev/random.hpp"

namespace osev::debias {

using nn::Tensor;

enum class HeadKind { kEvidential, kSoftmax };

HeadKind parse_head_kind(std::string_view name);
std::string_view to_string(HeadKind kind);

struct Architecture {
  std::size_t input_channels = 4;
  std::size_t num_classes = 5;
  std::size_t hidden = 16;        // channels of every conv layer; also the feature width
  std::size_t conv_layers = 2;
  std::size_t kernel_width = 5;
  HeadKind head = HeadKind::kEvidential;
  evidential::EvidenceFunction evidence = evidential::EvidenceFunction::kExponential;
  double exp_clamp = evidential::kDefaultExpClamp;

  void validate() const;
  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j);
};

// Feature extractor (conv stack + temporal mean pool, B x d features) followed
// by a linear head producing K logits.
class Branch {
 public:
  struct Output {
    Tensor features;  // B x d
    Tensor logits;    // B x K
  };

  Branch() = default;
  Branch(nn::Sequential backbone, nn::Sequential head)
      : backbone_(std::move(backbone)), head_(std::move(head)) {}

  Output forward(const Tensor& x);
  // Backpropagates d loss / d logits plus an optional direct gradient on the
  // pooled features into this branch's parameters.
  void backward(const Tensor& grad_logits, const Tensor* grad_features);

  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  void hash_pattern(std::uint64_t& h) const;

  nn::Sequential& backbone() { return backbone_; }
  nn::Sequential& head() { return head_; }

 private:
  nn::Sequential backbone_;
  nn::Sequential head_;
};

// Temporal branch: [TemporalConv, ReLU] x L, TemporalMeanPool, Dense(K).
Branch make_temporal_branch(const std::string& name, const Architecture& arch, Rng& rng);
// Time-blind branch: [PointwiseConv, ReLU] x L, TemporalMeanPool, Dense(K).
Branch make_static_branch(const std::string& name, const Architecture& arch, Rng& rng);

// Unbiased f-branch plus the two bias-characterising branches. The biased
// branches are absent in a model trained without debiasing and after
// strip_for_inference.
struct CedBranches {
  Architecture arch;
  Branch f;
  std::optional<Branch> h_shuffled;
  std::optional<Branch> h_static;

  bool has_biased() const { return h_shuffled.has_value() && h_static.has_value(); }
  std::vector<nn::Parameter*> f_parameters() { return f.parameters(); }
  std::vector<nn::Parameter*> h_parameters();
  std::vector<nn::Parameter*> all_parameters();
  std::vector<const nn::Parameter*> all_parameters() const;
};

// Each branch is initialized from its own stream derived from `seed`, so the
// f-branch weights do not depend on whether the biased branches exist.
CedBranches make_branches(const Architecture& arch, std::uint64_t seed, bool with_biased);

// Drops the biased branches. Idempotent.
CedBranches strip_for_inference(const CedBranches& branches);

// Evidence (or softmax probabilities) from logits, row-wise.
Tensor evidence_from_logits(const Tensor& logits, const Architecture& arch);
// d loss / d logits from d loss / d evidence.
Tensor evidence_backward(const Tensor& logits, const Tensor& grad_evidence,
                         const Architecture& arch);

struct CedForward {
  Branch::Output f;
  Branch::Output h_shuffled;
  Branch::Output h_static;
  Tensor evidence;             // e
  Tensor evidence_shuffled;    // e~
  Tensor evidence_static;      // e-bar
};

// Runs the three branches on x (the shuffled branch on a fresh temporal
// permutation drawn from shuffle_rng). Requires B >= 2 and biased branches.
CedForward ced_forward(CedBranches& branches, const Tensor& x, Rng& shuffle_rng);

// Mean over the batch of the per-sample closed-form EDL loss and its gradient
// with respect to the evidence rows.
struct EdlBatch {
  double loss = 0.0;
  Tensor grad_evidence;
};
EdlBatch edl_batch(std::span<const std::size_t> labels, const Tensor& evidence);

struct CedKernels {
  hsic::KernelParams f;
  hsic::KernelParams h_shuffled;
  hsic::KernelParams h_static;
};

// Resolves median-heuristic bandwidths on the given forward pass into fixed
// ones, so repeated evaluations at perturbed parameters share them.
CedKernels freeze_bandwidths(const CedForward& fwd, const hsic::KernelParams& base);

struct DebiasTerms {
  double edl = 0.0;
  double hsic_shuffled = 0.0;
  double hsic_static = 0.0;
  double loss = 0.0;
  Tensor grad_evidence;  // d loss / d e
  Tensor grad_features;  // d loss / d f (HSIC part only)
};

// L(theta_f, phi_f) = L_EDL(y, e) + lambda [HSIC(f, h~) + HSIC(f, h-bar)] with
// the biased features held constant.
DebiasTerms debias_terms(std::span<const std::size_t> labels, const CedForward& fwd,
                         double lambda, const CedKernels& kernels);

struct BiasTerms {
  double edl_shuffled = 0.0;
  double edl_static = 0.0;
  double hsic_shuffled = 0.0;
  double hsic_static = 0.0;
  double loss = 0.0;
  Tensor grad_evidence_shuffled;
  Tensor grad_evidence_static;
  Tensor grad_features_shuffled;
  Tensor grad_features_static;
};

// L(theta_h, phi_h) = sum_h [L_EDL(y, e_h) - lambda HSIC(f, h)] with f held
// constant.
BiasTerms bias_terms(std::span<const std::size_t> labels, const CedForward& fwd, double lambda,
                     const CedKernels& kernels);

// Branch-level objectives: evaluate and accumulate gradients into the owning
// side only (f-branch for debias, both biased branches for bias). With
// `verify` set, throws std::logic_error if any other parameter's gradient
// changed.
DebiasTerms debias_objective(CedBranches& branches, const CedForward& fwd,
                             std::span<const std::size_t> labels, double lambda,
                             const CedKernels& kernels, bool verify = false);
BiasTerms bias_objective(CedBranches& branches, const CedForward& fwd,
                         std::span<const std::size_t> labels, double lambda,
                         const CedKernels& kernels, bool verify = false);

struct TrainingMode {
  enum class Kind { kJoint, kAlternating };
  Kind kind = Kind::kJoint;
  std::size_t period = 1;

  static TrainingMode joint() { return {}; }
  static TrainingMode alternating(std::size_t period);
};

struct StepOptions {
  bool use_euc = true;
  bool use_ced = true;
  losses::EucReduction euc_reduction = losses::EucReduction::kBatchMean;
  TrainingMode mode;
  losses::LossWeights weights;
  hsic::KernelParams kernel;
  nn::SgdOptions sgd;
  bool verify_stop_gradients = false;
};

struct StepRecord {
  enum class Side { kBoth, kUnbiased, kBiased };

  Side side = Side::kBoth;
  double edl = 0.0;
  double euc = 0.0;
  double ced = 0.0;
  double hsic_shuffled = 0.0;
  double hsic_static = 0.0;
  double total = 0.0;
  std::size_t correct = 0;
};

struct Batch {
  Tensor x;  // B x C x T
  std::vector<std::size_t> labels;
};

// Thrown when a step produced a non-finite loss or gradient; parameters are
// left untouched.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepGradients {
  StepRecord record;
  CedForward forward;
  // Parameters that received gradients (the side(s) this step updates).
  std::vector<nn::Parameter*> active;
  // Scalar objectives whose gradients were accumulated: f side
  // edl + w_euc euc + w_ced lambda sum HSIC; biased side w_ced sum [EDL_h - lambda HSIC].
  double objective_f = 0.0;
  double objective_h = 0.0;
};

// Forward pass plus gradient accumulation for one step, without the update.
// With verify_stop_gradients, checks after each side's backward pass that the
// other side's gradients were not touched (std::logic_error otherwise).
StepGradients step_gradients(CedBranches& branches, const Batch& batch,
                             const StepOptions& options, double lambda_t, std::size_t step_index,
                             Rng& shuffle_rng);

// One optimizer step. Joint mode applies both objectives' gradients (each
// with its own stop-gradient) in one update. Alternating mode updates only the
// f-branch on even periods and only the biased branches on odd periods.
// Total loss: L_EDL + w_euc L_EUC + w_ced L_CED where L_CED contributes
// lambda sum HSIC(f, h) on the f side and sum [L_EDL(e_h) - lambda HSIC] on
// the biased side.
StepRecord train_step(CedBranches& branches, const Batch& batch, const StepOptions& options,
                      double lambda_t, std::size_t step_index, Rng& shuffle_rng);

struct Inference {
  Tensor probs;                      // B x K
  std::vector<double> scores;        // u, or 1 - max softmax
  std::vector<std::size_t> predicted;
};

// Uses the f-branch only.
Inference infer(CedBranches& branches, const Tensor& x);

}  // namespace osev::debias
