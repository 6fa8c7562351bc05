#include "osev/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace osev::nn {
namespace {

void require_rank(const Tensor& x, std::size_t rank, std::size_t channels, const char* layer,
                  std::size_t channel_axis = 1) {
  if (x.rank() != rank || x.dim(channel_axis) != channels) {
    std::string want = "B";
    for (std::size_t i = 1; i < rank; ++i) {
      want += "x" + (i == channel_axis ? std::to_string(channels) : std::string("*"));
    }
    throw std::invalid_argument(std::string(layer) + ": input shape " + shape_string(x.shape()) +
                                " does not match expected [" + want + "]");
  }
}

void require_forward(bool has_input, const char* layer) {
  if (!has_input) {
    throw std::logic_error(std::string(layer) + ": backward called before forward");
  }
}

void require_same_shape(const Shape& expected, const Tensor& grad, const char* layer) {
  if (grad.shape() != expected) {
    throw std::invalid_argument(std::string(layer) + ": upstream gradient shape " +
                                shape_string(grad.shape()) + " does not match output shape " +
                                shape_string(expected));
  }
}

}  // namespace

void fold_hash(std::uint64_t& h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
}

LayerSpec LayerSpec::temporal_conv(std::size_t out_channels, std::size_t width) {
  if (width < 2) throw std::invalid_argument("TemporalConv width must be at least 2");
  return {Kind::kTemporalConv, out_channels, width};
}
LayerSpec LayerSpec::pointwise_conv(std::size_t out_channels) {
  return {Kind::kPointwiseConv, out_channels, 1};
}
LayerSpec LayerSpec::dense(std::size_t out_features) { return {Kind::kDense, out_features, 1}; }
LayerSpec LayerSpec::relu() { return {Kind::kRelu, 0, 1}; }
LayerSpec LayerSpec::temporal_mean_pool() { return {Kind::kTemporalMeanPool, 0, 1}; }

// ---------------------------------------------------------------------------

TemporalConv::TemporalConv(std::string name, std::size_t in_channels, std::size_t out_channels,
                           std::size_t width)
    : in_(in_channels),
      out_(out_channels),
      width_(width),
      weight_(name + ".weight", {out_channels, in_channels, width}),
      bias_(name + ".bias", {out_channels}) {}

std::string TemporalConv::describe() const {
  return "TemporalConv(" + std::to_string(in_) + "->" + std::to_string(out_) +
         ", width=" + std::to_string(width_) + ")";
}

Tensor TemporalConv::forward(const Tensor& x) {
  require_rank(x, 3, in_, "TemporalConv");
  const std::size_t batch = x.dim(0);
  const std::size_t len = x.dim(2);
  const auto pad = static_cast<std::ptrdiff_t>((width_ - 1) / 2);
  Tensor y({batch, out_, len});
  const auto& w = weight_.value;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      for (std::size_t t = 0; t < len; ++t) {
        double acc = bias_.value[o];
        for (std::size_t i = 0; i < in_; ++i) {
          for (std::size_t k = 0; k < width_; ++k) {
            const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + k) - pad;
            if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
            acc += w.at(o, i, k) * x.at(b, i, static_cast<std::size_t>(s));
          }
        }
        y.at(b, o, t) = acc;
      }
    }
  }
  input_ = x;
  has_input_ = true;
  return y;
}

Tensor TemporalConv::backward(const Tensor& grad_out) {
  require_forward(has_input_, "TemporalConv");
  const std::size_t batch = input_.dim(0);
  const std::size_t len = input_.dim(2);
  require_same_shape({batch, out_, len}, grad_out, "TemporalConv");
  const auto pad = static_cast<std::ptrdiff_t>((width_ - 1) / 2);
  Tensor grad_in(input_.shape());
  auto& w = weight_.value;
  auto& gw = weight_.grad;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      for (std::size_t t = 0; t < len; ++t) {
        const double g = grad_out.at(b, o, t);
        bias_.grad[o] += g;
        for (std::size_t i = 0; i < in_; ++i) {
          for (std::size_t k = 0; k < width_; ++k) {
            const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + k) - pad;
            if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) continue;
            const auto su = static_cast<std::size_t>(s);
            gw.at(o, i, k) += g * input_.at(b, i, su);
            grad_in.at(b, i, su) += g * w.at(o, i, k);
          }
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------

PointwiseConv::PointwiseConv(std::string name, std::size_t in_channels, std::size_t out_channels)
    : in_(in_channels),
      out_(out_channels),
      weight_(name + ".weight", {out_channels, in_channels}),
      bias_(name + ".bias", {out_channels}) {}

std::string PointwiseConv::describe() const {
  return "PointwiseConv(" + std::to_string(in_) + "->" + std::to_string(out_) + ")";
}

Tensor PointwiseConv::forward(const Tensor& x) {
  require_rank(x, 3, in_, "PointwiseConv");
  const std::size_t batch = x.dim(0);
  const std::size_t len = x.dim(2);
  Tensor y({batch, out_, len});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      for (std::size_t t = 0; t < len; ++t) {
        double acc = bias_.value[o];
        for (std::size_t i = 0; i < in_; ++i) acc += weight_.value.at(o, i) * x.at(b, i, t);
        y.at(b, o, t) = acc;
      }
    }
  }
  input_ = x;
  has_input_ = true;
  return y;
}

Tensor PointwiseConv::backward(const Tensor& grad_out) {
  require_forward(has_input_, "PointwiseConv");
  const std::size_t batch = input_.dim(0);
  const std::size_t len = input_.dim(2);
  require_same_shape({batch, out_, len}, grad_out, "PointwiseConv");
  Tensor grad_in(input_.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      for (std::size_t t = 0; t < len; ++t) {
        const double g = grad_out.at(b, o, t);
        bias_.grad[o] += g;
        for (std::size_t i = 0; i < in_; ++i) {
          weight_.grad.at(o, i) += g * input_.at(b, i, t);
          grad_in.at(b, i, t) += g * weight_.value.at(o, i);
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------

Dense::Dense(std::string name, std::size_t in_features, std::size_t out_features)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", {out_features, in_features}),
      bias_(name + ".bias", {out_features}) {}

std::string Dense::describe() const {
  return "Dense(" + std::to_string(in_) + "->" + std::to_string(out_) + ")";
}

Tensor Dense::forward(const Tensor& x) {
  require_rank(x, 2, in_, "Dense");
  const std::size_t batch = x.dim(0);
  Tensor y({batch, out_});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      double acc = bias_.value[o];
      for (std::size_t i = 0; i < in_; ++i) acc += weight_.value.at(o, i) * x.at(b, i);
      y.at(b, o) = acc;
    }
  }
  input_ = x;
  has_input_ = true;
  return y;
}

Tensor Dense::backward(const Tensor& grad_out) {
  require_forward(has_input_, "Dense");
  const std::size_t batch = input_.dim(0);
  require_same_shape({batch, out_}, grad_out, "Dense");
  Tensor grad_in(input_.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_; ++o) {
      const double g = grad_out.at(b, o);
      bias_.grad[o] += g;
      for (std::size_t i = 0; i < in_; ++i) {
        weight_.grad.at(o, i) += g * input_.at(b, i);
        grad_in.at(b, i) += g * weight_.value.at(o, i);
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------

Tensor Relu::forward(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  input_ = x;
  has_input_ = true;
  return y;
}

Tensor Relu::backward(const Tensor& grad_out) {
  require_forward(has_input_, "Relu");
  require_same_shape(input_.shape(), grad_out, "Relu");
  Tensor grad_in(input_.shape());
  for (std::size_t i = 0; i < input_.size(); ++i) {
    grad_in[i] = input_[i] > 0.0 ? grad_out[i] : 0.0;
  }
  return grad_in;
}

void Relu::hash_pattern(std::uint64_t& h) const {
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (std::size_t i = 0; i < input_.size(); ++i) {
    word = (word << 1) | (input_[i] > 0.0 ? 1U : 0U);
    if (++bits == 64) {
      fold_hash(h, word);
      word = 0;
      bits = 0;
    }
  }
  fold_hash(h, word);
}

// ---------------------------------------------------------------------------

Tensor TemporalMeanPool::forward(const Tensor& x) {
  if (x.rank() != 3) {
    throw std::invalid_argument("TemporalMeanPool: input shape " + shape_string(x.shape()) +
                                " does not match expected [BxCxT]");
  }
  const std::size_t batch = x.dim(0);
  const std::size_t channels = x.dim(1);
  const std::size_t len = x.dim(2);
  Tensor y({batch, channels});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < len; ++t) acc += x.at(b, c, t);
      y.at(b, c) = acc / static_cast<double>(len);
    }
  }
  input_shape_ = x.shape();
  has_input_ = true;
  return y;
}

Tensor TemporalMeanPool::backward(const Tensor& grad_out) {
  require_forward(has_input_, "TemporalMeanPool");
  const std::size_t batch = input_shape_[0];
  const std::size_t channels = input_shape_[1];
  const std::size_t len = input_shape_[2];
  require_same_shape({batch, channels}, grad_out, "TemporalMeanPool");
  Tensor grad_in(input_shape_);
  const double scale = 1.0 / static_cast<double>(len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double g = grad_out.at(b, c) * scale;
      for (std::size_t t = 0; t < len; ++t) grad_in.at(b, c, t) = g;
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------

void glorot_uniform(Parameter& weight, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : weight.value.values()) v = rng.uniform(-limit, limit);
}

Sequential::Sequential(const Sequential& other) : output_shape_(other.output_shape_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Sequential Sequential::build(const std::string& prefix, std::span<const LayerSpec> specs,
                             const Shape& sample_shape, Rng& rng) {
  if (sample_shape.empty() || sample_shape.size() > 2) {
    throw std::invalid_argument("sample shape must be {channels, time} or {features}, got " +
                                shape_string(sample_shape));
  }
  Sequential net;
  Shape shape = sample_shape;
  for (std::size_t idx = 0; idx < specs.size(); ++idx) {
    const LayerSpec& spec = specs[idx];
    const std::string name = prefix + "." + std::to_string(idx);
    const bool temporal = shape.size() == 2;
    auto mismatch = [&](const char* what) {
      return std::invalid_argument("layer " + name + " (" + what + ") cannot follow shape " +
                                   shape_string(shape));
    };
    switch (spec.kind) {
      case LayerSpec::Kind::kTemporalConv: {
        if (!temporal) throw mismatch("TemporalConv");
        auto layer = std::make_unique<TemporalConv>(name, shape[0], spec.out, spec.width);
        glorot_uniform(layer->weight(), shape[0] * spec.width, spec.out * spec.width, rng);
        net.add(std::move(layer));
        shape[0] = spec.out;
        break;
      }
      case LayerSpec::Kind::kPointwiseConv: {
        if (!temporal) throw mismatch("PointwiseConv");
        auto layer = std::make_unique<PointwiseConv>(name, shape[0], spec.out);
        glorot_uniform(layer->weight(), shape[0], spec.out, rng);
        net.add(std::move(layer));
        shape[0] = spec.out;
        break;
      }
      case LayerSpec::Kind::kDense: {
        if (temporal) throw mismatch("Dense");
        auto layer = std::make_unique<Dense>(name, shape[0], spec.out);
        glorot_uniform(layer->weight(), shape[0], spec.out, rng);
        net.add(std::move(layer));
        shape[0] = spec.out;
        break;
      }
      case LayerSpec::Kind::kRelu:
        net.add(std::make_unique<Relu>());
        break;
      case LayerSpec::Kind::kTemporalMeanPool:
        if (!temporal) throw mismatch("TemporalMeanPool");
        net.add(std::make_unique<TemporalMeanPool>());
        shape = {shape[0]};
        break;
    }
  }
  net.output_shape_ = shape;
  return net;
}

Tensor Sequential::forward(const Tensor& x) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) {
    for (Parameter* p : l->parameters()) out.push_back(p);
  }
  return out;
}

void Sequential::hash_pattern(std::uint64_t& h) const {
  for (const auto& l : layers_) l->hash_pattern(h);
}

Tensor temporal_shuffle(const Tensor& x, Rng& rng,
                        std::vector<std::vector<std::size_t>>* permutations) {
  if (x.rank() != 3) {
    throw std::invalid_argument("temporal_shuffle: expected BxCxT, got " +
                                shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t channels = x.dim(1);
  const std::size_t len = x.dim(2);
  Tensor y(x.shape());
  if (permutations != nullptr) permutations->clear();
  for (std::size_t b = 0; b < batch; ++b) {
    const auto perm = rng.permutation(len);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t t = 0; t < len; ++t) y.at(b, c, t) = x.at(b, c, perm[t]);
    }
    if (permutations != nullptr) permutations->push_back(perm);
  }
  return y;
}

}  // namespace osev::nn
