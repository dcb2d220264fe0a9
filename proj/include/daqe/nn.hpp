#pragma once

// Parameterized building blocks: convolutions, normalization and residual
// stacks. Modules own their tensors and expose them by name for optimizers,
// checkpoints and precision casts.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "daqe/ops.hpp"
#include "daqe/tensor.hpp"

namespace daqe::nn {

enum class Activation { Relu, LeakyRelu, Gelu };

template <typename T>
Var<T> activate(Var<T> x, Activation a) {
  switch (a) {
    case Activation::Relu:
      return relu(x);
    case Activation::LeakyRelu:
      return leaky_relu(x);
    case Activation::Gelu:
      return gelu(x);
  }
  return x;
}

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
  bool trainable;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

/// Fan-in scaled Gaussian initialization, std = sqrt(2 / fan_in).
template <typename T>
void init_fan_in(Tensor<T>& w, std::size_t fan_in, std::mt19937_64& rng, double gain = 1.0) {
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : w.data) v = static_cast<T>(dist(rng));
}

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  bool depthwise = false;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t k, std::mt19937_64& rng,
         bool zero_init = false, bool dw = false, double gain = 1.0)
      : weight(dw ? Shape{cin, 1, 3, 3} : Shape{cout, cin, k, k}), bias(Shape{dw ? cin : cout}),
        depthwise(dw) {
    weight.requires_grad = bias.requires_grad = true;
    if (!zero_init) init_fan_in(weight, dw ? 9 : cin * k * k, rng, gain);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) {
    return conv2d(x, t.param(weight), t.param(bias), depthwise);
  }

  std::size_t out_channels() const { return weight.shape[0]; }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", &weight, true});
    out.push_back({prefix + ".bias", &bias, true});
  }
};

template <typename T>
struct Norm {
  Tensor<T> gamma, beta, running_mean, running_var;

  Norm() = default;
  explicit Norm(std::size_t c)
      : gamma(Shape{c}, T(1)), beta(Shape{c}, T(0)), running_mean(Shape{c}, T(0)),
        running_var(Shape{c}, T(1)) {
    gamma.requires_grad = beta.requires_grad = true;
  }

  Var<T> operator()(Tape<T>& t, Var<T> x, bool training) {
    return batch_norm(x, t.param(gamma), t.param(beta), running_mean, running_var, training);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gamma", &gamma, true});
    out.push_back({prefix + ".beta", &beta, true});
    out.push_back({prefix + ".running_mean", &running_mean, false});
    out.push_back({prefix + ".running_var", &running_var, false});
  }
};

/// conv3x3 -> norm -> activation -> conv3x3, plus identity skip.
template <typename T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2;
  Norm<T> norm;
  Activation act = Activation::Relu;

  ResidualBlock() = default;
  ResidualBlock(std::size_t c, Activation a, std::mt19937_64& rng, bool zero_last = false)
      : conv1(c, c, 3, rng), conv2(c, c, 3, rng, zero_last), norm(c), act(a) {}

  Var<T> operator()(Tape<T>& t, Var<T> x, bool training) {
    Var<T> h = conv1(t, x);
    h = norm(t, h, training);
    h = activate(h, act);
    h = conv2(t, h);
    return add(x, h);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    conv1.collect(prefix + ".conv1", out);
    norm.collect(prefix + ".norm", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

/// Optional channel-changing head conv followed by residual blocks.
template <typename T>
struct ResStack {
  std::vector<Conv2d<T>> head;  // zero or one entry
  std::vector<ResidualBlock<T>> blocks;

  ResStack() = default;
  /// With `identity_init` the blocks start as identities (zero last conv) and
  /// the head preserves the input variance, so the stack starts linear.
  ResStack(std::size_t cin, std::size_t c, std::size_t depth, Activation a, std::mt19937_64& rng,
           bool identity_init = false) {
    if (cin != c) head.emplace_back(cin, c, 3, rng, false, false, identity_init ? std::sqrt(0.5) : 1.0);
    for (std::size_t i = 0; i < depth; ++i) blocks.emplace_back(c, a, rng, identity_init);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x, bool training) {
    for (auto& h : head) x = h(t, x);
    for (auto& b : blocks) x = b(t, x, training);
    return x;
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    for (std::size_t i = 0; i < head.size(); ++i) head[i].collect(prefix + ".head", out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
  }
};

/// Free-function form of a residual block forward pass.
template <typename T>
Var<T> residual_block(Tape<T>& t, Var<T> x, ResidualBlock<T>& params, bool training) {
  return params(t, x, training);
}

}  // namespace daqe::nn
