#pragma once

// The network zoo. All models share one backbone design: both images of a
// pair pass through the same shared trunk (tied weights), the two feature
// maps are concatenated channel-wise, and a branch stage plus a linear
// classifier produce logits. JLNet owns four kin-type branches over one
// trunk; SingleHeadNet (ensemble members, the multi-class net) owns one.
//
// Any input-to-head path crosses num_shared_stages + 1 stages; with the
// default two shared stages that is the three attention stages of the
// backbone contract.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinjoint/autograd.hpp"
#include "kinjoint/checkpoint.hpp"
#include "kinjoint/joint.hpp"
#include "kinjoint/nn.hpp"
#include "kinjoint/rng.hpp"
#include "kinjoint/tensor.hpp"
#include "kinjoint/types.hpp"

namespace kinjoint {

struct BackboneConfig {
  int height = 64;
  int width = 64;
  std::vector<int> stage_channel_widths{8, 16, 32};  // shared stages + branch
  bool attention_enabled = true;
  int num_shared_stages = 2;
  int branch_stage_depth = 1;  // default keeps three stages on every path

  void validate() const {
    if (num_shared_stages < 1)
      throw std::runtime_error("BackboneConfig: need at least 1 shared stage");
    if (branch_stage_depth < 1)
      throw std::runtime_error("BackboneConfig: need at least 1 branch stage");
    if (static_cast<int>(stage_channel_widths.size()) != num_shared_stages + 1)
      throw std::runtime_error(
          "BackboneConfig: expected " + std::to_string(num_shared_stages + 1) +
          " channel widths, got " +
          std::to_string(stage_channel_widths.size()));
    const int total_stages = num_shared_stages + branch_stage_depth;
    const int div = 1 << total_stages;
    if (height % div != 0 || width % div != 0 || height < 2 * div ||
        width < 2 * div)
      throw std::runtime_error(
          "BackboneConfig: input " + std::to_string(height) + "x" +
          std::to_string(width) + " must be a multiple of " +
          std::to_string(div) + " and at least " + std::to_string(2 * div));
    for (int w : stage_channel_widths)
      if (w < 1) throw std::runtime_error("BackboneConfig: bad channel width");
  }

  // Stages any input-to-head path traverses.
  int attention_stages_on_path() const {
    return num_shared_stages + branch_stage_depth;
  }

  int trunk_out_channels() const {
    return stage_channel_widths[num_shared_stages - 1];
  }
  int branch_channels() const { return stage_channel_widths.back(); }

  int feature_height() const { return height >> num_shared_stages; }
  int feature_width() const { return width >> num_shared_stages; }

  // Flattened size entering a head after the branch stages pool further.
  int head_input_size() const {
    return branch_channels() * (feature_height() >> branch_stage_depth) *
           (feature_width() >> branch_stage_depth);
  }
};

// The pair of pre-cropped face images, HWC in [0,1].
struct PairInput {
  Tensor parent_image;
  Tensor child_image;
};

// Packs HWC [0,1] images into an NCHW batch.
inline Tensor to_nchw_batch(const std::vector<const Tensor*>& images,
                            int height, int width) {
  if (images.empty()) throw std::runtime_error("to_nchw_batch: empty batch");
  const int b = static_cast<int>(images.size());
  Tensor out({b, 3, height, width});
  for (int i = 0; i < b; ++i) {
    const Tensor& img = *images[i];
    if (img.shape() != Shape{height, width, 3})
      throw std::runtime_error("to_nchw_batch: image " + std::to_string(i) +
                               " has shape " + shape_str(img.shape()) +
                               ", expected [" + std::to_string(height) + "," +
                               std::to_string(width) + ",3]");
    double* dst = out.data() + static_cast<std::int64_t>(i) * 3 * height * width;
    const double* src = img.data();
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int c = 0; c < 3; ++c)
          dst[(c * height + y) * width + x] = src[(y * width + x) * 3 + c];
  }
  return out;
}

namespace detail {

inline std::vector<AttentionStage> make_trunk(const BackboneConfig& cfg,
                                              Rng& rng) {
  std::vector<AttentionStage> trunk;
  int in_ch = 3;
  for (int s = 0; s < cfg.num_shared_stages; ++s) {
    trunk.push_back(AttentionStage::create(in_ch, cfg.stage_channel_widths[s],
                                           cfg.attention_enabled, rng));
    in_ch = cfg.stage_channel_widths[s];
  }
  return trunk;
}

inline Tensor trunk_forward(const std::vector<AttentionStage>& trunk,
                            const Tensor& x) {
  Tensor h = x;
  for (const AttentionStage& stage : trunk) h = stage.forward(h);
  return h;
}

}  // namespace detail

// Branch: the per-task stage stack plus its classifier head.
struct BranchModule {
  std::vector<AttentionStage> stages;
  LinearLayer head;

  static BranchModule create(const BackboneConfig& cfg, int out_classes,
                             Rng& rng) {
    BranchModule b;
    int in_ch = 2 * cfg.trunk_out_channels();
    for (int s = 0; s < cfg.branch_stage_depth; ++s) {
      b.stages.push_back(AttentionStage::create(in_ch, cfg.branch_channels(),
                                                cfg.attention_enabled, rng));
      in_ch = cfg.branch_channels();
    }
    b.head = LinearLayer::create_zero(cfg.head_input_size(), out_classes);
    return b;
  }

  Tensor forward(const Tensor& fused_features) const {
    Tensor h = fused_features;
    for (const AttentionStage& stage : stages) h = stage.forward(h);
    return head.forward(flatten(h));
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t s = 0; s < stages.size(); ++s)
      stages[s].collect(prefix + ".s" + std::to_string(s), out);
    head.collect(prefix + ".head", out);
  }
};

// Joint learning network: shared trunk, four kin-type branches.
struct JLNetModel {
  BackboneConfig config;
  std::vector<AttentionStage> trunk;
  std::array<BranchModule, 4> branches;

  static JLNetModel create(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    JLNetModel m;
    m.config = cfg;
    Rng rng(mix_seed(seed, 0xA11CE));
    m.trunk = detail::make_trunk(cfg, rng);
    for (int n = 0; n < 4; ++n) m.branches[n] = BranchModule::create(cfg, 2, rng);
    return m;
  }

  // Runs both images through the tied trunk and concatenates channel-wise;
  // parents occupy the first channel block, children the second.
  Tensor shared_features(const Tensor& parents, const Tensor& children) const {
    check_batch(parents);
    check_batch(children);
    Tensor fp = detail::trunk_forward(trunk, parents);
    Tensor fc = detail::trunk_forward(trunk, children);
    return concat({fp, fc}, 1);
  }

  Tensor head_logits(const Tensor& features, int head) const {
    if (head < 0 || head >= 4)
      throw std::runtime_error("JLNetModel: head index " +
                               std::to_string(head) + " outside 0..3");
    return branches[head].forward(features);
  }

  // Single-pair convenience: HeadOutput of one verification branch.
  HeadOutput verification_head_forward(const PairInput& pair,
                                       KinType kin) const {
    const Tensor logits = head_logits(pair_features(pair), kin.code - 1);
    const Tensor probs = softmax(logits, 1);
    return HeadOutput{{probs[0], probs[1]}};
  }

  HeadOutputs all_heads(const PairInput& pair) const {
    const Tensor features = pair_features(pair);
    HeadOutputs heads;
    for (int n = 0; n < 4; ++n) {
      const Tensor probs = softmax(head_logits(features, n), 1);
      heads[n].probs = {probs[0], probs[1]};
    }
    return heads;
  }

  Tensor pair_features(const PairInput& pair) const {
    return shared_features(
        to_nchw_batch({&pair.parent_image}, config.height, config.width),
        to_nchw_batch({&pair.child_image}, config.height, config.width));
  }

  NamedParams named_parameters() const {
    NamedParams out;
    trunk_named(out);
    for (int n = 0; n < 4; ++n)
      branches[n].collect("branch" + std::to_string(n + 1), out);
    return out;
  }

  std::vector<Tensor> parameters() const { return values_of(named_parameters()); }

  std::vector<Tensor> trunk_parameters() const {
    NamedParams out;
    trunk_named(out);
    return values_of(out);
  }

  std::vector<Tensor> branch_parameters(int n) const {
    if (n < 0 || n >= 4)
      throw std::runtime_error("JLNetModel: branch index out of range");
    NamedParams out;
    branches[n].collect("branch" + std::to_string(n + 1), out);
    return values_of(out);
  }

 private:
  void trunk_named(NamedParams& out) const {
    for (std::size_t s = 0; s < trunk.size(); ++s)
      trunk[s].collect("trunk.s" + std::to_string(s), out);
  }

  void check_batch(const Tensor& batch) const {
    if (batch.dim() != 4 || batch.shape()[1] != 3 ||
        batch.shape()[2] != config.height || batch.shape()[3] != config.width)
      throw std::runtime_error("JLNetModel: batch shape " +
                               shape_str(batch.shape()) + " does not match " +
                               std::to_string(config.height) + "x" +
                               std::to_string(config.width) + " config");
  }
};

// Trunk + one branch: an ensemble verification member (2 classes) or the
// multi-class net (5 classes).
struct SingleHeadNet {
  BackboneConfig config;
  int out_classes = 2;
  std::vector<AttentionStage> trunk;
  BranchModule branch;

  static SingleHeadNet create(const BackboneConfig& cfg, int out_classes,
                              std::uint64_t seed) {
    cfg.validate();
    SingleHeadNet m;
    m.config = cfg;
    m.out_classes = out_classes;
    Rng rng(mix_seed(seed, 0xB0B));
    m.trunk = detail::make_trunk(cfg, rng);
    m.branch = BranchModule::create(cfg, out_classes, rng);
    return m;
  }

  Tensor logits(const Tensor& parents, const Tensor& children) const {
    Tensor fp = detail::trunk_forward(trunk, parents);
    Tensor fc = detail::trunk_forward(trunk, children);
    return branch.forward(concat({fp, fc}, 1));
  }

  MultiClassOutput multiclass_forward(const PairInput& pair) const {
    if (out_classes != kNumClasses)
      throw std::runtime_error("multiclass_forward: net has " +
                               std::to_string(out_classes) + " outputs");
    const Tensor probs = softmax(single_pair_logits(pair), 1);
    MultiClassOutput out;
    for (int c = 0; c < kNumClasses; ++c) out.probs[c] = probs[c];
    return out;
  }

  HeadOutput verification_forward(const PairInput& pair) const {
    if (out_classes != 2)
      throw std::runtime_error("verification_forward: net has " +
                               std::to_string(out_classes) + " outputs");
    const Tensor probs = softmax(single_pair_logits(pair), 1);
    return HeadOutput{{probs[0], probs[1]}};
  }

  Tensor single_pair_logits(const PairInput& pair) const {
    return logits(
        to_nchw_batch({&pair.parent_image}, config.height, config.width),
        to_nchw_batch({&pair.child_image}, config.height, config.width));
  }

  NamedParams named_parameters() const {
    NamedParams out;
    for (std::size_t s = 0; s < trunk.size(); ++s)
      trunk[s].collect("trunk.s" + std::to_string(s), out);
    branch.collect("branch", out);
    return out;
  }

  std::vector<Tensor> parameters() const { return values_of(named_parameters()); }
};

// ---------------------------------------------------------------------------
// checkpoint adapters
// ---------------------------------------------------------------------------

inline void store_params(Checkpoint& ckpt, const NamedParams& named,
                         const std::string& prefix = "") {
  for (const auto& [name, t] : named) ckpt.params.emplace_back(prefix + name, t);
}

// Copies checkpoint values into the model's parameters; shapes must match.
inline void restore_params(const Checkpoint& ckpt, const NamedParams& named,
                           const std::string& prefix = "") {
  for (const auto& [name, t] : named) {
    const Tensor* src = ckpt.find(prefix + name);
    if (!src)
      throw std::runtime_error("checkpoint: missing parameter " + prefix + name);
    if (src->shape() != t.shape())
      throw std::runtime_error("checkpoint: parameter " + prefix + name +
                               " has shape " + shape_str(src->shape()) +
                               ", model expects " + shape_str(t.shape()));
    Tensor dst = t;
    std::copy(src->vec().begin(), src->vec().end(), dst.vec().begin());
  }
}

}  // namespace kinjoint
