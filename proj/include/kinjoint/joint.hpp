#pragma once

// Joint identification over four binary verification heads: joint-output
// assembly, the three decision rules, and the multi-task loss.
//
// A HeadOutput is the post-softmax (negative, positive) pair of one
// verification head. The joint output o has o[0] = min over heads of the
// negative probability and o[m] = head m's positive probability. All argmax
// decisions break ties toward the lowest class index.

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "kinjoint/autograd.hpp"
#include "kinjoint/tensor.hpp"
#include "kinjoint/types.hpp"

namespace kinjoint {

struct HeadOutput {
  // probs[0] = negative component, probs[1] = positive component.
  std::array<double, 2> probs{0.5, 0.5};

  double negative() const { return probs[0]; }
  double positive() const { return probs[1]; }
};

using HeadOutputs = std::array<HeadOutput, kNumKinTypes>;

struct JointOutput {
  std::array<double, kNumClasses> o{};
};

struct MultiClassOutput {
  std::array<double, kNumClasses> probs{};
};

struct LossWeights {
  std::vector<double> verification_class_weights{0.25, 8.0};
  std::vector<double> identification_class_weights{0.18, 2.0, 2.0, 2.0, 2.0};
  std::vector<double> lambda{1.0, 1.0, 1.0, 1.0, 10.0};

  void validate() const {
    if (verification_class_weights.size() != 2 ||
        identification_class_weights.size() != kNumClasses ||
        lambda.size() != kNumClasses)
      throw std::runtime_error(
          "LossWeights: expected 2 verification weights, 5 identification "
          "weights and 5 lambdas");
    for (double w : verification_class_weights)
      if (w <= 0.0) throw std::runtime_error("LossWeights: weights must be > 0");
    for (double w : identification_class_weights)
      if (w <= 0.0) throw std::runtime_error("LossWeights: weights must be > 0");
    for (double l : lambda)
      if (l < 0.0) throw std::runtime_error("LossWeights: lambdas must be >= 0");
  }
};

namespace detail {

template <typename It>
int argmax_lowest(It begin, It end) {
  int best = 0, i = 0;
  auto bv = *begin;
  for (It it = begin; it != end; ++it, ++i)
    if (*it > bv) {
      bv = *it;
      best = i;
    }
  return best;
}

}  // namespace detail

inline JointOutput build_joint_output(const HeadOutputs& heads) {
  JointOutput out;
  double min_neg = heads[0].negative();
  for (int n = 1; n < kNumKinTypes; ++n)
    min_neg = std::min(min_neg, heads[n].negative());
  out.o[0] = min_neg;
  for (int n = 0; n < kNumKinTypes; ++n) out.o[n + 1] = heads[n].positive();
  return out;
}

inline std::array<double, kNumClasses> softmax5(
    const std::array<double, kNumClasses>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  std::array<double, kNumClasses> e{};
  double sum = 0.0;
  for (int i = 0; i < kNumClasses; ++i) {
    e[i] = std::exp(v[i] - mx);
    sum += e[i];
  }
  for (double& x : e) x /= sum;
  return e;
}

// Identification distribution: softmax of the joint output.
inline std::array<double, kNumClasses> identification_distribution(
    const JointOutput& joint) {
  return softmax5(joint.o);
}

// Argmax of softmax(o), which is the argmax of o itself.
inline int identify_class(const JointOutput& joint) {
  const auto p = identification_distribution(joint);
  return detail::argmax_lowest(p.begin(), p.end());
}

// Five-class distribution induced by the ensemble rule: the negative mass is
// 1 - max positive, renormalized.
inline std::array<double, kNumClasses> ensemble_distribution(
    const HeadOutputs& heads) {
  std::array<double, kNumClasses> p{};
  double max_pos = 0.0;
  for (int n = 0; n < kNumKinTypes; ++n) {
    p[n + 1] = heads[n].positive();
    max_pos = std::max(max_pos, heads[n].positive());
  }
  p[0] = 1.0 - max_pos;
  double sum = 0.0;
  for (double v : p) sum += v;
  if (sum > 0.0)
    for (double& v : p) v /= sum;
  return p;
}

// Negative when every positive probability is below 0.5, otherwise the
// strongest head. Exactly 0.5 routes to the argmax branch (strict "<").
inline int ensemble_decision(const HeadOutputs& heads) {
  double max_pos = heads[0].positive();
  for (int n = 1; n < kNumKinTypes; ++n)
    max_pos = std::max(max_pos, heads[n].positive());
  if (max_pos < 0.5) return 0;
  int best = 0;
  for (int n = 1; n < kNumKinTypes; ++n)
    if (heads[n].positive() > heads[best].positive()) best = n;
  return best + 1;
}

// Confidence combination of the identification and ensemble views: argmax of
// the average of the two five-class distributions.
inline int combined_decision(const HeadOutputs& heads,
                             const JointOutput& joint) {
  const auto p_id = identification_distribution(joint);
  const auto p_ens = ensemble_distribution(heads);
  std::array<double, kNumClasses> avg{};
  for (int i = 0; i < kNumClasses; ++i) avg[i] = 0.5 * (p_id[i] + p_ens[i]);
  return detail::argmax_lowest(avg.begin(), avg.end());
}

inline std::array<double, kNumClasses> combined_distribution(
    const HeadOutputs& heads, const JointOutput& joint) {
  const auto p_id = identification_distribution(joint);
  const auto p_ens = ensemble_distribution(heads);
  std::array<double, kNumClasses> avg{};
  for (int i = 0; i < kNumClasses; ++i) avg[i] = 0.5 * (p_id[i] + p_ens[i]);
  return avg;
}

// Head n's binary target: positive iff the sample's class is kin type n+1.
// Every head sees every sample under joint training.
inline int head_binary_label(int label, int head_index) {
  check_class_label(label);
  return label == head_index + 1 ? 1 : 0;
}

namespace detail {

inline double wce_value(double p, double w) {
  return -w * std::log(std::max(p, kLogFloor));
}

}  // namespace detail

// Value form of the multi-task loss: sum of the four weighted verification
// cross entropies plus the weighted identification cross entropy of
// softmax(o).
inline double joint_loss(const HeadOutputs& heads, const JointOutput& joint,
                         int label, const LossWeights& w) {
  check_class_label(label);
  w.validate();
  double total = 0.0;
  for (int n = 0; n < kNumKinTypes; ++n) {
    const int bin = head_binary_label(label, n);
    const double p = bin == 1 ? heads[n].positive() : heads[n].negative();
    total += w.lambda[n] * detail::wce_value(p, w.verification_class_weights[bin]);
  }
  const auto p_id = softmax5(joint.o);
  total += w.lambda[4] *
           detail::wce_value(p_id[label], w.identification_class_weights[label]);
  return total;
}

// ---------------------------------------------------------------------------
// differentiable (batched) forms used in training
// ---------------------------------------------------------------------------

// Assembles the joint output [B,5] from four [B,2] head probability tensors:
// column 0 is the row-wise min of the negative columns (gradient routes to
// the single achieving head), columns 1..4 the positive columns.
inline Tensor assemble_joint_graph(const std::array<Tensor, 4>& head_probs) {
  std::vector<Tensor> negatives, parts;
  for (const Tensor& p : head_probs) negatives.push_back(slice(p, 1, 0, 1));
  parts.push_back(reduce_min(concat(negatives, 1), 1));
  for (const Tensor& p : head_probs) parts.push_back(slice(p, 1, 1, 1));
  return concat(parts, 1);
}

struct JointLossTerms {
  Tensor total;                        // scalar
  std::array<Tensor, 4> verification;  // per-head scalars
  Tensor identification;               // scalar; undefined when skipped
};

// Batched multi-task loss over head probabilities [B,2] x 4. When
// include_identification is false only the verification terms contribute
// (phase 1 and the no-multi-output ablation).
inline JointLossTerms joint_loss_graph(const std::array<Tensor, 4>& head_probs,
                                       const std::vector<int>& labels,
                                       const LossWeights& w,
                                       bool include_identification) {
  w.validate();
  JointLossTerms terms;
  Tensor total;
  for (int n = 0; n < kNumKinTypes; ++n) {
    std::vector<int> bin(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
      bin[i] = head_binary_label(labels[i], n);
    Tensor ln = weighted_cross_entropy_batch(head_probs[n], bin,
                                             w.verification_class_weights);
    terms.verification[n] = ln;
    Tensor scaled = mul(ln, Tensor::scalar(w.lambda[n]));
    total = total.defined() ? add(total, scaled) : scaled;
  }
  if (include_identification) {
    Tensor joint = assemble_joint_graph(head_probs);
    Tensor p_id = softmax(joint, 1);
    terms.identification = weighted_cross_entropy_batch(
        p_id, labels, w.identification_class_weights);
    total = add(total, mul(terms.identification, Tensor::scalar(w.lambda[4])));
  }
  terms.total = total;
  return terms;
}

}  // namespace kinjoint
