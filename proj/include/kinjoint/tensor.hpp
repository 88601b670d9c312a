#pragma once

// Dense n-dimensional tensor over doubles, the value type of the autograd
// engine. A Tensor is a cheap handle to a shared node; ops in autograd.hpp
// create fresh nodes and may record themselves on the active tape.

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kinjoint {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    node_->shape = std::move(shape);
    node_->data.assign(static_cast<std::size_t>(numel_of(node_->shape)), fill);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false) {
    validate_shape(shape);
    if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
      throw std::runtime_error("Tensor: shape " + shape_str(shape) +
                               " does not match data length " +
                               std::to_string(values.size()));
    Tensor t;
    t.node_ = std::make_shared<TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  int dim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const {
    return static_cast<std::int64_t>(node_->data.size());
  }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& vec() { return node_->data; }
  const std::vector<double>& vec() const { return node_->data; }

  double item() const {
    if (numel() != 1)
      throw std::runtime_error("Tensor::item: tensor has " +
                               std::to_string(numel()) + " elements");
    return node_->data[0];
  }

  double operator[](std::int64_t i) const { return node_->data[i]; }
  double& operator[](std::int64_t i) { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rq) {
    node_->requires_grad = rq;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  // Grad buffer, zero-allocated on first use; always shaped like data.
  std::vector<double>& grad_vec() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
  }
  const std::vector<double>& grad_vec() const { return node_->grad; }

  void zero_grad() {
    if (!node_->grad.empty())
      node_->grad.assign(node_->data.size(), 0.0);
  }

  void fill(double v) { node_->data.assign(node_->data.size(), v); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty())
      throw std::runtime_error("Tensor: shape must have at least one axis");
    for (int d : shape)
      if (d <= 0)
        throw std::runtime_error("Tensor: nonpositive dimension in shape " +
                                 shape_str(shape));
  }

  std::shared_ptr<TensorNode> node_;
};

inline void ensure_grad(const std::shared_ptr<TensorNode>& n) {
  if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
}

}  // namespace kinjoint
