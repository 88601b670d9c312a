#pragma once

// Adam with bias correction, operating on a flat list of parameter tensors.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinjoint/tensor.hpp"

namespace kinjoint {

struct AdamState {
  std::int64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  void reset_moments() {
    step = 0;
    first_moment.clear();
    second_moment.clear();
  }
};

// One Adam update over params using their accumulated grads. Moment buffers
// are sized on first use and must keep matching the parameter shapes.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i].numel(), 0.0);
      state.second_moment[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw std::runtime_error("adam_step: state tracks " +
                             std::to_string(state.first_moment.size()) +
                             " parameters, got " +
                             std::to_string(params.size()));
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    std::vector<double>& m = state.first_moment[i];
    std::vector<double>& v = state.second_moment[i];
    if (static_cast<std::int64_t>(m.size()) != p.numel())
      throw std::runtime_error(
          "adam_step: moment buffer size " + std::to_string(m.size()) +
          " does not match parameter shape " + shape_str(p.shape()));
    const std::vector<double>& g = p.grad_vec();
    double* pd = p.data();
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      pd[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

inline void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace kinjoint
