#pragma once

// Network building blocks: conv / linear layers with seeded He-uniform
// initialization and the attention-gated stage used by every backbone.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "kinjoint/autograd.hpp"
#include "kinjoint/rng.hpp"
#include "kinjoint/tensor.hpp"

namespace kinjoint {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline Tensor he_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape), 0.0, /*requires_grad=*/true);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = rng.uniform(-limit, limit);
  return t;
}

}  // namespace detail

struct Conv2dLayer {
  Tensor weight;  // [out,in,k,k]
  Tensor bias;    // [out]
  int stride = 1;
  int pad = 1;

  static Conv2dLayer create(int in_ch, int out_ch, int kernel, Rng& rng,
                            int stride = 1, int pad = 1) {
    Conv2dLayer l;
    l.weight = detail::he_uniform({out_ch, in_ch, kernel, kernel},
                                  in_ch * kernel * kernel, rng);
    l.bias = Tensor({out_ch}, 0.0, true);
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  Tensor forward(const Tensor& x) const {
    return conv2d(x, weight, bias, stride, pad);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w", weight);
    out.emplace_back(prefix + ".b", bias);
  }
};

struct LinearLayer {
  Tensor weight;  // [in,out]
  Tensor bias;    // [out]

  static LinearLayer create(int in, int out, Rng& rng) {
    LinearLayer l;
    l.weight = detail::he_uniform({in, out}, in, rng);
    l.bias = Tensor({out}, 0.0, true);
    return l;
  }

  // Classifier layers start at zero so fresh heads emit uniform
  // probabilities.
  static LinearLayer create_zero(int in, int out) {
    LinearLayer l;
    l.weight = Tensor({in, out}, 0.0, true);
    l.bias = Tensor({out}, 0.0, true);
    return l;
  }

  Tensor forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w", weight);
    out.emplace_back(prefix + ".b", bias);
  }
};

// One backbone stage: conv + residual conv, an optional bottom-up/top-down
// attention gate (trunk times 1 + sigmoid mask), then 2x max pooling. Halves
// the spatial size; input extent must be even (and >= 4 with attention on).
struct AttentionStage {
  Conv2dLayer conv1;
  Conv2dLayer conv2;
  Conv2dLayer mask_conv;  // only created when attention is on
  bool attention = true;

  static AttentionStage create(int in_ch, int out_ch, bool attention, Rng& rng) {
    AttentionStage s;
    s.conv1 = Conv2dLayer::create(in_ch, out_ch, 3, rng);
    s.conv2 = Conv2dLayer::create(out_ch, out_ch, 3, rng);
    s.attention = attention;
    if (attention) s.mask_conv = Conv2dLayer::create(out_ch, out_ch, 3, rng);
    return s;
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = relu(conv1.forward(x));
    Tensor u = relu(add(h, conv2.forward(h)));
    if (attention) {
      Tensor m = sigmoid(upsample2x(mask_conv.forward(maxpool2d(u, 2))));
      u = add(u, mul(u, m));  // u * (1 + mask)
    }
    return maxpool2d(u, 2);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
    if (attention) mask_conv.collect(prefix + ".mask", out);
  }
};

inline std::vector<Tensor> values_of(const NamedParams& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

}  // namespace kinjoint
