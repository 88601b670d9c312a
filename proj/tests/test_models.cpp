#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "kinjoint/models.hpp"
#include "kinjoint/optim.hpp"
#include "kinjoint/rng.hpp"

using namespace kinjoint;

namespace {

BackboneConfig small_config(bool attention = true) {
  BackboneConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.stage_channel_widths = {4, 6, 8};
  cfg.attention_enabled = attention;
  return cfg;
}

Tensor random_image(int h, int w, Rng& rng) {
  Tensor img({h, w, 3});
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
  return img;
}

PairInput random_pair(const BackboneConfig& cfg, Rng& rng) {
  return {random_image(cfg.height, cfg.width, rng),
          random_image(cfg.height, cfg.width, rng)};
}

// Kick the zero-initialized heads so outputs are not uniform.
void perturb_heads(JLNetModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (int n = 0; n < 4; ++n) {
    Tensor w = m.branches[n].head.weight;
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-0.5, 0.5);
  }
}

}  // namespace

TEST_CASE("backbone config validation") {
  BackboneConfig cfg = small_config();
  cfg.validate();
  CHECK(cfg.attention_stages_on_path() == 3);

  BackboneConfig bad = cfg;
  bad.height = 20;  // not a multiple of 8
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.stage_channel_widths = {4, 6};
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.num_shared_stages = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("deeper branch stacks keep the path-length contract") {
  BackboneConfig cfg;
  cfg.height = 32;
  cfg.width = 32;
  cfg.stage_channel_widths = {3, 4, 6};
  cfg.branch_stage_depth = 2;
  cfg.validate();
  CHECK(cfg.attention_stages_on_path() == 4);
  JLNetModel m = JLNetModel::create(cfg, 77);
  Rng rng(78);
  PairInput pair = random_pair(cfg, rng);
  HeadOutput h = m.verification_head_forward(pair, KinType(2));
  CHECK(h.probs[0] == doctest::Approx(0.5));  // zero-init head still applies
}

TEST_CASE("shared features: shape contract on all-zero images") {
  BackboneConfig cfg = small_config();
  JLNetModel m = JLNetModel::create(cfg, 1);
  Tensor zero({cfg.height, cfg.width, 3});
  PairInput pair{zero, zero};
  Tensor feat = m.pair_features(pair);
  // two streams of trunk output channels at quarter resolution
  CHECK(feat.shape() == Shape{1, 2 * cfg.trunk_out_channels(),
                              cfg.feature_height(), cfg.feature_width()});
  for (std::int64_t i = 0; i < feat.numel(); ++i)
    CHECK(std::isfinite(feat[i]));
}

TEST_CASE("attention off keeps shapes and drops mask parameters") {
  BackboneConfig with = small_config(true);
  BackboneConfig without = small_config(false);
  JLNetModel a = JLNetModel::create(with, 3);
  JLNetModel b = JLNetModel::create(without, 3);
  Rng rng(5);
  PairInput pair = random_pair(with, rng);
  CHECK(a.pair_features(pair).shape() == b.pair_features(pair).shape());
  CHECK(a.named_parameters().size() > b.named_parameters().size());
  for (const auto& [name, t] : b.named_parameters())
    CHECK(name.find(".mask") == std::string::npos);
}

TEST_CASE("fixed seed and input give bit-identical features") {
  BackboneConfig cfg = small_config();
  Rng rng(7);
  PairInput pair = random_pair(cfg, rng);
  JLNetModel m1 = JLNetModel::create(cfg, 42);
  JLNetModel m2 = JLNetModel::create(cfg, 42);
  Tensor f1 = m1.pair_features(pair);
  Tensor f2 = m2.pair_features(pair);
  REQUIRE(f1.numel() == f2.numel());
  CHECK(std::memcmp(f1.data(), f2.data(), sizeof(double) * f1.numel()) == 0);
}

TEST_CASE("zero-initialized heads emit uniform probabilities") {
  BackboneConfig cfg = small_config();
  JLNetModel m = JLNetModel::create(cfg, 11);
  Rng rng(13);
  PairInput pair = random_pair(cfg, rng);
  for (KinType kin : all_kin_types()) {
    HeadOutput h = m.verification_head_forward(pair, kin);
    CHECK(h.probs[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(h.probs[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SingleHeadNet mc = SingleHeadNet::create(cfg, 5, 11);
  MultiClassOutput out = mc.multiclass_forward(pair);
  for (double p : out.probs) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("head outputs are distributions for random inputs") {
  BackboneConfig cfg = small_config();
  JLNetModel m = JLNetModel::create(cfg, 17);
  perturb_heads(m, 18);
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    PairInput pair = random_pair(cfg, rng);
    HeadOutputs heads = m.all_heads(pair);
    for (const HeadOutput& h : heads) {
      CHECK(h.probs[0] >= 0.0);
      CHECK(h.probs[1] >= 0.0);
      CHECK(std::abs(h.probs[0] + h.probs[1] - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("unknown kin code is rejected") {
  CHECK_THROWS(KinType(0));
  CHECK_THROWS(KinType(5));
  BackboneConfig cfg = small_config();
  JLNetModel m = JLNetModel::create(cfg, 3);
  CHECK_THROWS(m.head_logits(Tensor({1, 12, 4, 4}), 4));
}

TEST_CASE("parameter partition: each parameter lives in exactly one group") {
  BackboneConfig cfg = small_config();
  JLNetModel m = JLNetModel::create(cfg, 23);
  std::set<const TensorNode*> seen;
  std::size_t total = 0;
  auto absorb = [&](const std::vector<Tensor>& group) {
    for (const Tensor& t : group) {
      CHECK(seen.insert(t.node().get()).second);  // no overlap
      ++total;
    }
  };
  absorb(m.trunk_parameters());
  for (int n = 0; n < 4; ++n) absorb(m.branch_parameters(n));
  CHECK(total == m.parameters().size());
}

TEST_CASE("training one head with the trunk frozen only moves that branch") {
  BackboneConfig cfg = small_config();
  JLNetModel m = JLNetModel::create(cfg, 29);
  perturb_heads(m, 30);
  Rng rng(31);
  PairInput pair = random_pair(cfg, rng);
  Tensor parents = to_nchw_batch({&pair.parent_image}, cfg.height, cfg.width);
  Tensor children = to_nchw_batch({&pair.child_image}, cfg.height, cfg.width);

  const int target_head = 2;
  NamedParams before = m.named_parameters();
  std::vector<std::vector<double>> snapshot;
  for (const auto& [name, t] : before) snapshot.push_back(t.vec());

  GradTape tape;
  {
    TapeScope scope(tape);
    Tensor feat = m.shared_features(parents, children);
    Tensor probs = softmax(m.head_logits(feat, target_head), 1);
    Tensor loss = weighted_cross_entropy_batch(probs, {1}, {0.25, 8.0});
    backward(loss, tape);
  }
  std::vector<Tensor> branch_only = m.branch_parameters(target_head);
  AdamState st;
  st.lr = 1e-2;
  adam_step(branch_only, st);

  NamedParams after = m.named_parameters();
  for (std::size_t i = 0; i < after.size(); ++i) {
    const bool in_branch =
        after[i].first.find("branch" + std::to_string(target_head + 1)) == 0;
    const bool changed = after[i].second.vec() != snapshot[i];
    if (in_branch)
      CHECK(changed);  // gradient reaches the whole branch
    else
      CHECK_FALSE(changed);
  }
}

TEST_CASE("swapping parent and child changes the output") {
  BackboneConfig cfg = small_config();
  JLNetModel m = JLNetModel::create(cfg, 37);
  perturb_heads(m, 38);
  Rng rng(39);
  PairInput pair = random_pair(cfg, rng);
  PairInput swapped{pair.child_image, pair.parent_image};
  HeadOutputs a = m.all_heads(pair);
  HeadOutputs b = m.all_heads(swapped);
  double diff = 0.0;
  for (int n = 0; n < 4; ++n)
    diff += std::abs(a[n].positive() - b[n].positive());
  CHECK(diff > 1e-9);
}

TEST_CASE("checkpoint round trip restores exact behaviour") {
  BackboneConfig cfg = small_config();
  JLNetModel m = JLNetModel::create(cfg, 41);
  perturb_heads(m, 42);
  Checkpoint ckpt;
  store_params(ckpt, m.named_parameters());

  JLNetModel fresh = JLNetModel::create(cfg, 999);
  restore_params(ckpt, fresh.named_parameters());
  Rng rng(43);
  PairInput pair = random_pair(cfg, rng);
  HeadOutputs a = m.all_heads(pair);
  HeadOutputs b = fresh.all_heads(pair);
  for (int n = 0; n < 4; ++n) {
    CHECK(a[n].probs[0] == b[n].probs[0]);
    CHECK(a[n].probs[1] == b[n].probs[1]);
  }

  Checkpoint truncated = ckpt;
  truncated.params.pop_back();
  JLNetModel other = JLNetModel::create(cfg, 7);
  CHECK_THROWS_WITH_AS(restore_params(truncated, other.named_parameters()),
                       doctest::Contains("missing parameter"),
                       std::runtime_error);
}

TEST_CASE("checkpoint file round trip is bit exact") {
  BackboneConfig cfg = small_config();
  SingleHeadNet m = SingleHeadNet::create(cfg, 2, 47);
  Checkpoint ckpt;
  store_params(ckpt, m.named_parameters());
  ckpt.has_adam = true;
  ckpt.adam.step = 17;
  ckpt.adam.lr = 1e-4;
  for (const auto& [name, t] : ckpt.params) {
    std::vector<double> mbuf(t.numel()), vbuf(t.numel());
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      mbuf[i] = 0.125 * static_cast<double>(i);
      vbuf[i] = 0.25;
    }
    ckpt.adam.first_moment.push_back(mbuf);
    ckpt.adam.second_moment.push_back(vbuf);
  }
  const std::string path = "test_roundtrip.ckpt";
  save_checkpoint(ckpt, path);
  Checkpoint back = load_checkpoint(path);
  REQUIRE(back.params.size() == ckpt.params.size());
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    CHECK(back.params[i].first == ckpt.params[i].first);
    REQUIRE(back.params[i].second.numel() == ckpt.params[i].second.numel());
    CHECK(std::memcmp(back.params[i].second.data(),
                      ckpt.params[i].second.data(),
                      sizeof(double) * ckpt.params[i].second.numel()) == 0);
  }
  CHECK(back.has_adam);
  CHECK(back.adam.step == 17);
  CHECK(back.adam.first_moment == ckpt.adam.first_moment);
  CHECK(back.adam.second_moment == ckpt.adam.second_moment);

  std::remove(path.c_str());
  CHECK_THROWS(load_checkpoint("does_not_exist.ckpt"));
}

TEST_CASE("gradient flows through the full joint loss of a real model") {
  BackboneConfig cfg = small_config();
  cfg.stage_channel_widths = {2, 3, 4};
  JLNetModel m = JLNetModel::create(cfg, 53);
  perturb_heads(m, 54);
  Rng rng(55);
  PairInput pair = random_pair(cfg, rng);
  Tensor parents = to_nchw_batch({&pair.parent_image}, cfg.height, cfg.width);
  Tensor children = to_nchw_batch({&pair.child_image}, cfg.height, cfg.width);
  LossWeights w;

  // check one trunk kernel against finite differences by swapping the probe
  // tensor into the layer for the duration of each evaluation
  Tensor probe = m.trunk[0].conv1.weight;
  auto loss_fn = [&](const Tensor& t) {
    Tensor saved = m.trunk[0].conv1.weight;
    m.trunk[0].conv1.weight = t;
    Tensor feat = m.shared_features(parents, children);
    std::array<Tensor, 4> probs;
    for (int n = 0; n < 4; ++n) probs[n] = softmax(m.head_logits(feat, n), 1);
    Tensor loss = joint_loss_graph(probs, {2}, w, true).total;
    m.trunk[0].conv1.weight = saved;
    return loss;
  };
  CHECK(finite_diff_check(loss_fn, probe, 1e-5) < 1e-4);
}
