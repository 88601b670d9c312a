#pragma once

// Training and prediction for the six experiment methods.
//
// JLNet trains in two phases: phase 1 updates through the four verification
// losses only, phase 2 adds the identification loss of the joint output
// (all five terms of the weighted sum). The no-multi-output ablation runs
// every epoch in phase-1 mode over the same schedule and random streams, so
// with zero phase-2 epochs its checkpoint is bit-identical to JLNet's.
// Ensemble members are four separately parameterized verification nets;
// the multi-class net is a single five-way classifier over the same
// backbone. All loops are deterministic given the schedule seed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinjoint/augment.hpp"
#include "kinjoint/autograd.hpp"
#include "kinjoint/data.hpp"
#include "kinjoint/image.hpp"
#include "kinjoint/joint.hpp"
#include "kinjoint/models.hpp"
#include "kinjoint/optim.hpp"
#include "kinjoint/rng.hpp"
#include "kinjoint/synth.hpp"

namespace kinjoint {

enum class Method {
  EnsembleStar,
  Ensemble,
  Multiclass,
  JLNetDagger,
  JLNetDoubleDagger,
  JLNetFull,
  Oracle,  // perfect-predictor stub for harness testing
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::EnsembleStar: return "ensemble_star";
    case Method::Ensemble: return "ensemble";
    case Method::Multiclass: return "multiclass";
    case Method::JLNetDagger: return "jlnet_dagger";
    case Method::JLNetDoubleDagger: return "jlnet_ddagger";
    case Method::JLNetFull: return "jlnet_full";
    case Method::Oracle: return "oracle";
  }
  return "?";
}

inline Method method_from_name(const std::string& name) {
  for (Method m : {Method::EnsembleStar, Method::Ensemble, Method::Multiclass,
                   Method::JLNetDagger, Method::JLNetDoubleDagger,
                   Method::JLNetFull, Method::Oracle})
    if (name == method_name(m)) return m;
  throw std::runtime_error("unknown method '" + name + "'");
}

inline bool is_jlnet_method(Method m) {
  return m == Method::JLNetDagger || m == Method::JLNetDoubleDagger ||
         m == Method::JLNetFull;
}

struct TrainSchedule {
  int phase1_epochs = 12;
  int phase2_epochs = 8;
  int batch_size = 64;
  double lr = 1e-4;
  std::uint64_t seed = 42;

  void validate() const {
    if (phase1_epochs < 0 || phase2_epochs < 0)
      throw std::runtime_error("TrainSchedule: epoch counts must be >= 0");
    if (batch_size < 1)
      throw std::runtime_error("TrainSchedule: batch_size must be >= 1");
    if (lr <= 0.0) throw std::runtime_error("TrainSchedule: lr must be > 0");
  }
};

// ---------------------------------------------------------------------------
// image store
// ---------------------------------------------------------------------------

// All images of a manifest, resized to the model input size, loaded once.
class ImageStore {
 public:
  static ImageStore load(const Manifest& manifest, int height, int width) {
    ImageStore store;
    store.height_ = height;
    store.width_ = width;
    store.images_.reserve(manifest.records.size());
    for (const ManifestRecord& r : manifest.records) {
      const std::string path = manifest.base_dir + "/" + r.path;
      store.images_.push_back(resize_bilinear(load_ppm(path), height, width));
    }
    return store;
  }

  // In-memory path used by tests and the synth pipeline.
  static ImageStore adopt(std::vector<Tensor> images, int height, int width) {
    ImageStore store;
    store.height_ = height;
    store.width_ = width;
    store.images_.reserve(images.size());
    for (Tensor& img : images)
      store.images_.push_back(resize_bilinear(img, height, width));
    return store;
  }

  const Tensor& image(int record) const {
    return images_.at(static_cast<std::size_t>(record));
  }
  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return images_.size(); }

 private:
  int height_ = 0, width_ = 0;
  std::vector<Tensor> images_;
};

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

struct Batch {
  Tensor parents;   // [B,3,H,W]
  Tensor children;  // [B,3,H,W]
  std::vector<int> labels;
};

namespace detail {

inline Batch assemble_batch(const ImageStore& store,
                            const std::vector<PairSample>& samples,
                            const std::vector<int>& order, std::size_t begin,
                            std::size_t end, const AugmentConfig* aug,
                            std::uint64_t aug_seed_base) {
  Batch batch;
  std::vector<Tensor> parents, children;
  for (std::size_t i = begin; i < end; ++i) {
    const PairSample& s = samples[order[i]];
    Tensor p = store.image(s.parent_record);
    Tensor c = store.image(s.child_record);
    if (aug) {
      p = augment(p, *aug, mix_seed(aug_seed_base, order[i], 0));
      c = augment(c, *aug, mix_seed(aug_seed_base, order[i], 1));
    }
    parents.push_back(std::move(p));
    children.push_back(std::move(c));
    batch.labels.push_back(s.label);
  }
  std::vector<const Tensor*> pp, cp;
  for (const Tensor& t : parents) pp.push_back(&t);
  for (const Tensor& t : children) cp.push_back(&t);
  batch.parents = to_nchw_batch(pp, store.height(), store.width());
  batch.children = to_nchw_batch(cp, store.height(), store.width());
  return batch;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// models per method + training log
// ---------------------------------------------------------------------------

struct MethodModels {
  Method method = Method::JLNetFull;
  BackboneConfig backbone;
  std::optional<JLNetModel> jlnet;          // jlnet_* methods
  std::vector<SingleHeadNet> members;       // ensemble methods, 4 nets
  std::optional<SingleHeadNet> multiclass;  // multiclass
};

inline MethodModels create_models(Method method, const BackboneConfig& cfg,
                                  std::uint64_t seed) {
  MethodModels mm;
  mm.method = method;
  mm.backbone = cfg;
  if (is_jlnet_method(method)) {
    mm.jlnet = JLNetModel::create(cfg, mix_seed(seed, 0x11110));
  } else if (method == Method::Ensemble || method == Method::EnsembleStar) {
    for (int n = 0; n < 4; ++n)
      mm.members.push_back(
          SingleHeadNet::create(cfg, 2, mix_seed(seed, 0x11117, n)));
  } else if (method == Method::Multiclass) {
    mm.multiclass = SingleHeadNet::create(cfg, 5, mix_seed(seed, 0x11115));
  }
  return mm;
}

struct TrainLogRow {
  int epoch = 0;
  int phase = 1;
  double loss_total = 0.0;
  std::array<std::optional<double>, 4> loss_verification;
  std::optional<double> loss_identification;
};

struct TrainResult {
  MethodModels models;
  std::vector<AdamState> adam;  // one per trained net
  std::vector<TrainLogRow> log;
  // Deep-copied state at the phase boundary; set by two-phase training.
  std::optional<Checkpoint> phase1_checkpoint;
};

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int> epoch_order(std::size_t n, std::uint64_t seed,
                                    int epoch, std::uint64_t stream) {
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  Rng rng(mix_seed(seed, 0x0D0E + stream, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

inline std::uint64_t augment_stream(std::uint64_t seed, int epoch,
                                    std::uint64_t stream) {
  return mix_seed(seed, 0xA09 + stream, static_cast<std::uint64_t>(epoch));
}

}  // namespace detail

// Deep-copied checkpoint of the current model and optimizer state; later
// training steps do not mutate it.
inline Checkpoint snapshot_checkpoint(const MethodModels& mm,
                                      const std::vector<AdamState>& adam);

// Two-phase joint training. include_identification_phase2 = false gives the
// no-multi-output ablation; both variants share epoch streams.
inline TrainResult train_jlnet(const ImageStore& store,
                               const std::vector<PairSample>& data,
                               const BackboneConfig& backbone,
                               const TrainSchedule& schedule,
                               const LossWeights& weights,
                               const AugmentConfig& aug,
                               bool include_identification_phase2 = true) {
  schedule.validate();
  weights.validate();
  if (data.empty()) throw std::runtime_error("train_jlnet: empty dataset");
  MethodModels mm = create_models(include_identification_phase2
                                      ? Method::JLNetFull
                                      : Method::JLNetDagger,
                                  backbone, schedule.seed);
  JLNetModel& model = *mm.jlnet;
  std::vector<Tensor> params = model.parameters();
  AdamState adam;
  adam.lr = schedule.lr;
  TrainResult result;

  const int total_epochs = schedule.phase1_epochs + schedule.phase2_epochs;
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    if (epoch == schedule.phase1_epochs)
      result.phase1_checkpoint = snapshot_checkpoint(mm, {adam});
    const bool phase2 = epoch >= schedule.phase1_epochs;
    const bool with_id = phase2 && include_identification_phase2;
    std::vector<int> order =
        detail::epoch_order(data.size(), schedule.seed, epoch, 0);
    const std::uint64_t aug_base =
        detail::augment_stream(schedule.seed, epoch, 0);

    TrainLogRow row;
    row.epoch = epoch;
    row.phase = phase2 ? 2 : 1;
    std::array<double, 4> ver_sum{};
    double id_sum = 0.0, total_sum = 0.0;
    int batches = 0;

    for (std::size_t begin = 0; begin < order.size();
         begin += schedule.batch_size) {
      const std::size_t end =
          std::min(order.size(), begin + schedule.batch_size);
      Batch batch = detail::assemble_batch(store, data, order, begin, end,
                                           &aug, aug_base);
      GradTape tape;
      TapeScope scope(tape);
      Tensor feat = model.shared_features(batch.parents, batch.children);
      std::array<Tensor, 4> probs;
      for (int n = 0; n < 4; ++n)
        probs[n] = softmax(model.head_logits(feat, n), 1);
      JointLossTerms terms =
          joint_loss_graph(probs, batch.labels, weights, with_id);
      backward(terms.total, tape);
      adam_step(params, adam);
      zero_grads(params);

      total_sum += terms.total.item();
      for (int n = 0; n < 4; ++n) ver_sum[n] += terms.verification[n].item();
      if (with_id) id_sum += terms.identification.item();
      ++batches;
    }
    row.loss_total = total_sum / batches;
    for (int n = 0; n < 4; ++n) row.loss_verification[n] = ver_sum[n] / batches;
    if (with_id) row.loss_identification = id_sum / batches;
    result.log.push_back(row);
  }
  if (!result.phase1_checkpoint)  // no phase-2 epochs ran
    result.phase1_checkpoint = snapshot_checkpoint(mm, {adam});
  result.models = std::move(mm);
  result.adam.push_back(std::move(adam));
  return result;
}

// Four separate verification models. independent = true trains member n on
// its per-type 1:1 set (Ensemble Net*); false trains every member on the
// shared mixed stream with derived binary labels (Ensemble Net).
inline TrainResult train_ensemble_net(
    const ImageStore& store, const std::vector<PairSample>& mixed_data,
    const std::array<std::vector<PairSample>, 4>& independent_data,
    const BackboneConfig& backbone, const TrainSchedule& schedule,
    const LossWeights& weights, const AugmentConfig& aug, bool independent) {
  schedule.validate();
  weights.validate();
  MethodModels mm = create_models(
      independent ? Method::EnsembleStar : Method::Ensemble, backbone,
      schedule.seed);
  std::array<std::vector<Tensor>, 4> params;
  TrainResult result;
  result.adam.resize(4);
  for (int n = 0; n < 4; ++n) {
    params[n] = mm.members[n].parameters();
    result.adam[n].lr = schedule.lr;
  }

  const int total_epochs = schedule.phase1_epochs + schedule.phase2_epochs;
  if (!independent && mixed_data.empty())
    throw std::runtime_error("train_ensemble_net: empty dataset");
  if (independent)
    for (const auto& d : independent_data)
      if (d.empty() && total_epochs > 0)
        throw std::runtime_error("train_ensemble_net: empty independent set");

  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    TrainLogRow row;
    row.epoch = epoch;
    row.phase = 1;
    double total_sum = 0.0;

    if (!independent) {
      // one shared stream, every member sees the same batches
      std::vector<int> order =
          detail::epoch_order(mixed_data.size(), schedule.seed, epoch, 0);
      const std::uint64_t aug_base =
          detail::augment_stream(schedule.seed, epoch, 0);
      std::array<double, 4> member_sum{};
      int batches = 0;
      for (std::size_t begin = 0; begin < order.size();
           begin += schedule.batch_size) {
        const std::size_t end =
            std::min(order.size(), begin + schedule.batch_size);
        Batch batch = detail::assemble_batch(store, mixed_data, order, begin,
                                             end, &aug, aug_base);
        for (int n = 0; n < 4; ++n) {
          std::vector<int> bin(batch.labels.size());
          for (std::size_t i = 0; i < batch.labels.size(); ++i)
            bin[i] = head_binary_label(batch.labels[i], n);
          GradTape tape;
          TapeScope scope(tape);
          Tensor probs =
              softmax(mm.members[n].logits(batch.parents, batch.children), 1);
          Tensor loss = weighted_cross_entropy_batch(
              probs, bin, weights.verification_class_weights);
          backward(loss, tape);
          adam_step(params[n], result.adam[n]);
          zero_grads(params[n]);
          member_sum[n] += loss.item();
        }
        ++batches;
      }
      for (int n = 0; n < 4; ++n) {
        row.loss_verification[n] = member_sum[n] / batches;
        total_sum += member_sum[n] / batches;
      }
    } else {
      // per-member independent streams over per-type data
      for (int n = 0; n < 4; ++n) {
        const std::vector<PairSample>& data = independent_data[n];
        std::vector<int> order = detail::epoch_order(
            data.size(), schedule.seed, epoch, 100 + n);
        const std::uint64_t aug_base =
            detail::augment_stream(schedule.seed, epoch, 100 + n);
        double member_sum = 0.0;
        int batches = 0;
        for (std::size_t begin = 0; begin < order.size();
             begin += schedule.batch_size) {
          const std::size_t end =
              std::min(order.size(), begin + schedule.batch_size);
          Batch batch = detail::assemble_batch(store, data, order, begin, end,
                                               &aug, aug_base);
          std::vector<int> bin(batch.labels.size());
          for (std::size_t i = 0; i < batch.labels.size(); ++i)
            bin[i] = head_binary_label(batch.labels[i], n);
          GradTape tape;
          TapeScope scope(tape);
          Tensor probs =
              softmax(mm.members[n].logits(batch.parents, batch.children), 1);
          Tensor loss = weighted_cross_entropy_batch(
              probs, bin, weights.verification_class_weights);
          backward(loss, tape);
          adam_step(params[n], result.adam[n]);
          zero_grads(params[n]);
          member_sum += loss.item();
          ++batches;
        }
        row.loss_verification[n] = batches ? member_sum / batches : 0.0;
        total_sum += batches ? member_sum / batches : 0.0;
      }
    }
    row.loss_total = total_sum;
    result.log.push_back(row);
  }
  result.models = std::move(mm);
  return result;
}

// Single five-way classifier on the mixed set.
inline TrainResult train_multiclass(const ImageStore& store,
                                    const std::vector<PairSample>& data,
                                    const BackboneConfig& backbone,
                                    const TrainSchedule& schedule,
                                    const std::vector<double>& class_weights,
                                    const AugmentConfig& aug) {
  schedule.validate();
  if (data.empty()) throw std::runtime_error("train_multiclass: empty dataset");
  if (class_weights.size() != kNumClasses)
    throw std::runtime_error("train_multiclass: expected 5 class weights");
  MethodModels mm = create_models(Method::Multiclass, backbone, schedule.seed);
  std::vector<Tensor> params = mm.multiclass->parameters();
  AdamState adam;
  adam.lr = schedule.lr;
  TrainResult result;

  const int total_epochs = schedule.phase1_epochs + schedule.phase2_epochs;
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    std::vector<int> order =
        detail::epoch_order(data.size(), schedule.seed, epoch, 0);
    const std::uint64_t aug_base =
        detail::augment_stream(schedule.seed, epoch, 0);
    double total_sum = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += schedule.batch_size) {
      const std::size_t end =
          std::min(order.size(), begin + schedule.batch_size);
      Batch batch = detail::assemble_batch(store, data, order, begin, end,
                                           &aug, aug_base);
      GradTape tape;
      TapeScope scope(tape);
      Tensor probs =
          softmax(mm.multiclass->logits(batch.parents, batch.children), 1);
      Tensor loss =
          weighted_cross_entropy_batch(probs, batch.labels, class_weights);
      backward(loss, tape);
      adam_step(params, adam);
      zero_grads(params);
      total_sum += loss.item();
      ++batches;
    }
    TrainLogRow row;
    row.epoch = epoch;
    row.phase = 1;
    row.loss_total = total_sum / batches;
    result.log.push_back(row);
  }
  result.models = std::move(mm);
  result.adam.push_back(std::move(adam));
  return result;
}

// ---------------------------------------------------------------------------
// prediction
// ---------------------------------------------------------------------------

struct Predictions {
  std::vector<int> classes;
  std::vector<std::array<double, kNumClasses>> distributions;
};

namespace detail {

inline HeadOutputs heads_from_rows(const std::array<Tensor, 4>& probs, int row) {
  HeadOutputs heads;
  for (int n = 0; n < 4; ++n)
    heads[n].probs = {probs[n][row * 2], probs[n][row * 2 + 1]};
  return heads;
}

}  // namespace detail

// Five-class predictions for a batch. For the independent (verification)
// protocol pass the set's kin type; decisions are then restricted to
// {0, kin}: head-based methods threshold the matched head at 0.5, the
// distribution-based ones compare the kin class against the negative class.
inline Predictions predict_batch(const MethodModels& mm, const Tensor& parents,
                                 const Tensor& children,
                                 std::optional<KinType> verification_kin = {},
                                 const std::vector<int>* oracle_labels = nullptr) {
  NoGradScope no_grad;
  const int batch = parents.shape()[0];
  Predictions out;
  out.classes.resize(batch);
  out.distributions.resize(batch);

  if (mm.method == Method::Oracle) {
    if (!oracle_labels)
      throw std::runtime_error("predict_batch: oracle stub needs labels");
    for (int i = 0; i < batch; ++i) {
      out.classes[i] = (*oracle_labels)[i];
      out.distributions[i].fill(0.0);
      out.distributions[i][(*oracle_labels)[i]] = 1.0;
    }
    return out;
  }

  if (mm.method == Method::Multiclass) {
    Tensor probs = softmax(mm.multiclass->logits(parents, children), 1);
    for (int i = 0; i < batch; ++i) {
      std::array<double, 5>& d = out.distributions[i];
      for (int c = 0; c < 5; ++c) d[c] = probs[i * 5 + c];
      if (verification_kin) {
        const int t = verification_kin->code;
        out.classes[i] = d[t] > d[0] ? t : 0;
      } else {
        out.classes[i] =
            detail::argmax_lowest(d.begin(), d.end());
      }
    }
    return out;
  }

  std::array<Tensor, 4> head_probs;
  if (is_jlnet_method(mm.method)) {
    Tensor feat = mm.jlnet->shared_features(parents, children);
    for (int n = 0; n < 4; ++n)
      head_probs[n] = softmax(mm.jlnet->head_logits(feat, n), 1);
  } else {
    for (int n = 0; n < 4; ++n)
      head_probs[n] = softmax(mm.members[n].logits(parents, children), 1);
  }

  for (int i = 0; i < batch; ++i) {
    HeadOutputs heads = detail::heads_from_rows(head_probs, i);
    JointOutput joint = build_joint_output(heads);
    std::array<double, 5>& dist = out.distributions[i];
    switch (mm.method) {
      case Method::Ensemble:
      case Method::EnsembleStar:
      case Method::JLNetDagger:
        dist = ensemble_distribution(heads);
        break;
      case Method::JLNetDoubleDagger:
        dist = identification_distribution(joint);
        break;
      case Method::JLNetFull:
        dist = combined_distribution(heads, joint);
        break;
      default:
        throw std::runtime_error("predict_batch: unhandled method");
    }
    if (verification_kin) {
      const int t = verification_kin->code;
      switch (mm.method) {
        case Method::Ensemble:
        case Method::EnsembleStar:
        case Method::JLNetDagger:
        case Method::JLNetFull:
          // matched-head binary output; 0.5 goes positive as in the
          // ensemble rule
          out.classes[i] = heads[t - 1].positive() >= 0.5 ? t : 0;
          break;
        case Method::JLNetDoubleDagger: {
          const auto p = identification_distribution(joint);
          out.classes[i] = p[t] > p[0] ? t : 0;
          break;
        }
        default:
          throw std::runtime_error("predict_batch: unhandled method");
      }
    } else {
      switch (mm.method) {
        case Method::Ensemble:
        case Method::EnsembleStar:
        case Method::JLNetDagger:
          out.classes[i] = ensemble_decision(heads);
          break;
        case Method::JLNetDoubleDagger:
          out.classes[i] = identify_class(joint);
          break;
        case Method::JLNetFull:
          out.classes[i] = combined_decision(heads, joint);
          break;
        default:
          throw std::runtime_error("predict_batch: unhandled method");
      }
    }
  }
  return out;
}

// Single-pair convenience over predict_batch.
inline int predict(const MethodModels& mm, const PairInput& pair) {
  Tensor parents = to_nchw_batch({&pair.parent_image}, mm.backbone.height,
                                 mm.backbone.width);
  Tensor children = to_nchw_batch({&pair.child_image}, mm.backbone.height,
                                  mm.backbone.width);
  return predict_batch(mm, parents, children).classes[0];
}

// ---------------------------------------------------------------------------
// checkpoint adapters
// ---------------------------------------------------------------------------

namespace detail {

inline NamedParams model_named_params(const MethodModels& mm) {
  NamedParams all;
  if (mm.jlnet) {
    NamedParams p = mm.jlnet->named_parameters();
    all.insert(all.end(), p.begin(), p.end());
  }
  for (std::size_t n = 0; n < mm.members.size(); ++n) {
    NamedParams p = mm.members[n].named_parameters();
    for (auto& [name, t] : p)
      all.emplace_back("m" + std::to_string(n) + "." + name, t);
  }
  if (mm.multiclass) {
    NamedParams p = mm.multiclass->named_parameters();
    all.insert(all.end(), p.begin(), p.end());
  }
  return all;
}

}  // namespace detail

// Flattens the method's nets (and their Adam states, concatenated in
// parameter order) into one KJ-CKPT-1 container.
inline Checkpoint make_checkpoint(const MethodModels& mm,
                                  const std::vector<AdamState>& adam) {
  Checkpoint ckpt;
  store_params(ckpt, detail::model_named_params(mm));
  bool any_moments = false;
  for (const AdamState& st : adam)
    if (!st.first_moment.empty()) any_moments = true;
  if (!adam.empty() && any_moments) {
    ckpt.has_adam = true;
    ckpt.adam.step = adam[0].step;
    ckpt.adam.lr = adam[0].lr;
    ckpt.adam.beta1 = adam[0].beta1;
    ckpt.adam.beta2 = adam[0].beta2;
    ckpt.adam.epsilon = adam[0].epsilon;
    for (const AdamState& st : adam) {
      for (const auto& m : st.first_moment)
        ckpt.adam.first_moment.push_back(m);
      for (const auto& v : st.second_moment)
        ckpt.adam.second_moment.push_back(v);
    }
    if (ckpt.adam.first_moment.size() != ckpt.params.size())
      throw std::runtime_error(
          "make_checkpoint: adam buffers do not cover the parameters");
  }
  return ckpt;
}

inline void load_into_models(const Checkpoint& ckpt, MethodModels& mm) {
  restore_params(ckpt, detail::model_named_params(mm));
}

inline Checkpoint snapshot_checkpoint(const MethodModels& mm,
                                      const std::vector<AdamState>& adam) {
  Checkpoint live = make_checkpoint(mm, adam);
  for (auto& [name, t] : live.params)
    t = Tensor::from_data(t.shape(), t.vec());  // detach from the live model
  return live;
}

}  // namespace kinjoint
