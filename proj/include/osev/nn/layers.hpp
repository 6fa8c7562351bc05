#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "osev/nn/tensor.hpp"
#include "osev/random.hpp"

namespace osev::nn {

// Declarative layer description used to build a Sequential.
struct LayerSpec {
  enum class Kind { kTemporalConv, kPointwiseConv, kDense, kRelu, kTemporalMeanPool };

  Kind kind = Kind::kRelu;
  std::size_t out = 0;    // output channels or features
  std::size_t width = 1;  // temporal kernel width

  static LayerSpec temporal_conv(std::size_t out_channels, std::size_t width);
  static LayerSpec pointwise_conv(std::size_t out_channels);
  static LayerSpec dense(std::size_t out_features);
  static LayerSpec relu();
  static LayerSpec temporal_mean_pool();
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x) = 0;
  // Accumulates parameter gradients and returns the gradient with respect to
  // the input of the most recent forward call.
  virtual Tensor backward(const Tensor& grad_out) = 0;

  virtual std::vector<Parameter*> parameters() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual std::string describe() const = 0;

  // Folds any piecewise-linear switching state (ReLU masks) into a hash so
  // finite-difference checks can tell when a perturbation crossed a kink.
  virtual void hash_pattern(std::uint64_t& /*h*/) const {}
};

void fold_hash(std::uint64_t& h, std::uint64_t v);

// Convolution over time with zero "same" padding: B x Cin x T -> B x Cout x T.
// Left padding is (width - 1) / 2.
class TemporalConv final : public Layer {
 public:
  TemporalConv(std::string name, std::size_t in_channels, std::size_t out_channels,
               std::size_t width);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<TemporalConv>(*this); }
  std::string describe() const override;

  Parameter& weight() { return weight_; }  // Cout x Cin x width
  Parameter& bias() { return bias_; }

 private:
  std::size_t in_;
  std::size_t out_;
  std::size_t width_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
  bool has_input_ = false;
};

// Per-timestep channel mixing (kernel width 1): B x Cin x T -> B x Cout x T.
class PointwiseConv final : public Layer {
 public:
  PointwiseConv(std::string name, std::size_t in_channels, std::size_t out_channels);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<PointwiseConv>(*this); }
  std::string describe() const override;

  Parameter& weight() { return weight_; }  // Cout x Cin
  Parameter& bias() { return bias_; }

 private:
  std::size_t in_;
  std::size_t out_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
  bool has_input_ = false;
};

// Affine map B x Fin -> B x Fout, y = x W^T + b.
class Dense final : public Layer {
 public:
  Dense(std::string name, std::size_t in_features, std::size_t out_features);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }
  std::string describe() const override;

  Parameter& weight() { return weight_; }  // Fout x Fin
  Parameter& bias() { return bias_; }

 private:
  std::size_t in_;
  std::size_t out_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
  bool has_input_ = false;
};

class Relu final : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }
  std::string describe() const override { return "Relu"; }
  void hash_pattern(std::uint64_t& h) const override;

 private:
  Tensor input_;
  bool has_input_ = false;
};

// Mean over the time axis: B x C x T -> B x C.
class TemporalMeanPool final : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<TemporalMeanPool>(*this);
  }
  std::string describe() const override { return "TemporalMeanPool"; }

 private:
  Shape input_shape_;
  bool has_input_ = false;
};

// Ordered stack of layers. Copyable (deep copy of parameters and caches).
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  // Builds layers named "<prefix>.<index>" for per-sample input shape
  // {channels, time} (rank 2) or {features} (rank 1), checking that the layer specs
  // compose. Weights are Glorot-uniform from `rng`, biases zero.
  static Sequential build(const std::string& prefix, std::span<const LayerSpec> specs,
                          const Shape& sample_shape, Rng& rng);

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

  std::vector<Parameter*> parameters();
  std::size_t num_layers() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  void hash_pattern(std::uint64_t& h) const;
  // Per-sample output shape for the per-sample input shape given at build time.
  const Shape& output_shape() const { return output_shape_; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  Shape output_shape_;
};

// Applies the Glorot-uniform initialization to a weight of the given fans.
void glorot_uniform(Parameter& weight, std::size_t fan_in, std::size_t fan_out, Rng& rng);

// Independent uniform permutation of the time axis for every sample; all
// channels of a timestep move together. Returns the permutations used when
// `permutations` is non-null.
Tensor temporal_shuffle(const Tensor& x, Rng& rng,
                        std::vector<std::vector<std::size_t>>* permutations = nullptr);

}  // namespace osev::nn
