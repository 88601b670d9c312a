#pragma once

// Experiment configuration: one self-describing JSON document drives synth,
// train, evaluate and compare. Parsing is strict (unknown keys are errors)
// and serialization is canonical, so a config round-trips losslessly and its
// hash identifies the run.

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinjoint/augment.hpp"
#include "kinjoint/data.hpp"
#include "kinjoint/joint.hpp"
#include "kinjoint/models.hpp"
#include "kinjoint/synth.hpp"
#include "kinjoint/trainer.hpp"

namespace kinjoint {

struct DatasetConfig {
  std::string manifest_path;  // empty selects the synthetic dataset
  SynthConfig synth;

  bool synthetic() const { return manifest_path.empty(); }
};

struct ExperimentConfig {
  DatasetConfig dataset;
  Protocol protocol = Protocol::Mixed;
  Method method = Method::JLNetFull;
  TrainSchedule schedule;
  LossWeights loss_weights;
  std::vector<double> multiclass_weights{0.1, 1, 1, 1, 1};
  BackboneConfig backbone;
  AugmentConfig augment;
  int folds = 5;
  int fold = -1;  // -1 runs every fold
  std::uint64_t seed = 42;
  std::string output_dir = "out";

  // The schedule's seed always follows the experiment seed.
  void normalize() { schedule.seed = seed; }

  void validate() const {
    backbone.validate();
    schedule.validate();
    loss_weights.validate();
    if (multiclass_weights.size() != kNumClasses)
      throw std::runtime_error("config: multiclass_weights needs 5 entries");
    if (folds < 2) throw std::runtime_error("config: folds must be >= 2");
    if (fold < -1 || fold >= folds)
      throw std::runtime_error("config: fold index out of range");
  }

  std::vector<int> fold_list() const {
    if (fold >= 0) return {fold};
    std::vector<int> all(folds);
    for (int i = 0; i < folds; ++i) all[i] = i;
    return all;
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j,
                       std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::runtime_error("config: unknown key '" + it.key() + "' in " +
                               where);
  }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  if (cfg.dataset.synthetic()) {
    j["dataset"]["synthetic"] = {
        {"families_per_type", cfg.dataset.synth.families_per_type},
        {"image_size", cfg.dataset.synth.image_size},
        {"genome_dim", cfg.dataset.synth.genome_dim},
        {"seed", cfg.dataset.synth.seed},
        {"name", cfg.dataset.synth.dataset_name},
        {"genome_strength", cfg.dataset.synth.genome_strength},
        {"gender_strength", cfg.dataset.synth.gender_strength},
    };
  } else {
    j["dataset"]["manifest"] = cfg.dataset.manifest_path;
  }
  j["protocol"] = protocol_name(cfg.protocol);
  j["method"] = method_name(cfg.method);
  j["schedule"] = {{"phase1_epochs", cfg.schedule.phase1_epochs},
                   {"phase2_epochs", cfg.schedule.phase2_epochs},
                   {"batch_size", cfg.schedule.batch_size},
                   {"lr", cfg.schedule.lr}};
  j["loss_weights"] = {
      {"verification", cfg.loss_weights.verification_class_weights},
      {"identification", cfg.loss_weights.identification_class_weights},
      {"lambda", cfg.loss_weights.lambda}};
  j["multiclass_weights"] = cfg.multiclass_weights;
  j["backbone"] = {{"height", cfg.backbone.height},
                   {"width", cfg.backbone.width},
                   {"channels", cfg.backbone.stage_channel_widths},
                   {"attention", cfg.backbone.attention_enabled},
                   {"shared_stages", cfg.backbone.num_shared_stages},
                   {"branch_depth", cfg.backbone.branch_stage_depth}};
  j["augment"] = {{"jitter_prob", cfg.augment.jitter_prob},
                  {"jitter_range", cfg.augment.jitter_range},
                  {"grayscale_prob", cfg.augment.grayscale_prob},
                  {"hflip_prob", cfg.augment.hflip_prob},
                  {"perspective_prob", cfg.augment.perspective_prob},
                  {"perspective_max_shift", cfg.augment.perspective_max_shift},
                  {"crop_prob", cfg.augment.crop_prob},
                  {"crop_min_scale", cfg.augment.crop_min_scale}};
  j["folds"] = cfg.folds;
  j["fold"] = cfg.fold;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"dataset", "protocol", "method", "schedule",
                      "loss_weights", "multiclass_weights", "backbone",
                      "augment", "folds", "fold", "seed", "output_dir"},
                     "config");
  ExperimentConfig cfg;
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::check_keys(d, {"manifest", "synthetic"}, "dataset");
    if (d.contains("manifest") && d.contains("synthetic"))
      throw std::runtime_error(
          "config: dataset takes either 'manifest' or 'synthetic', not both");
    if (d.contains("manifest"))
      cfg.dataset.manifest_path = d.at("manifest").get<std::string>();
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      detail::check_keys(s,
                         {"families_per_type", "image_size", "genome_dim",
                          "seed", "name", "genome_strength", "gender_strength"},
                         "dataset.synthetic");
      detail::maybe(s, "families_per_type", cfg.dataset.synth.families_per_type);
      detail::maybe(s, "image_size", cfg.dataset.synth.image_size);
      detail::maybe(s, "genome_dim", cfg.dataset.synth.genome_dim);
      detail::maybe(s, "seed", cfg.dataset.synth.seed);
      detail::maybe(s, "name", cfg.dataset.synth.dataset_name);
      detail::maybe(s, "genome_strength", cfg.dataset.synth.genome_strength);
      detail::maybe(s, "gender_strength", cfg.dataset.synth.gender_strength);
    }
  }
  if (j.contains("protocol"))
    cfg.protocol = protocol_from_name(j.at("protocol").get<std::string>());
  if (j.contains("method"))
    cfg.method = method_from_name(j.at("method").get<std::string>());
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    detail::check_keys(
        s, {"phase1_epochs", "phase2_epochs", "batch_size", "lr"}, "schedule");
    detail::maybe(s, "phase1_epochs", cfg.schedule.phase1_epochs);
    detail::maybe(s, "phase2_epochs", cfg.schedule.phase2_epochs);
    detail::maybe(s, "batch_size", cfg.schedule.batch_size);
    detail::maybe(s, "lr", cfg.schedule.lr);
  }
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    detail::check_keys(w, {"verification", "identification", "lambda"},
                       "loss_weights");
    detail::maybe(w, "verification",
                  cfg.loss_weights.verification_class_weights);
    detail::maybe(w, "identification",
                  cfg.loss_weights.identification_class_weights);
    detail::maybe(w, "lambda", cfg.loss_weights.lambda);
  }
  detail::maybe(j, "multiclass_weights", cfg.multiclass_weights);
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    detail::check_keys(b,
                       {"height", "width", "channels", "attention",
                        "shared_stages", "branch_depth"},
                       "backbone");
    detail::maybe(b, "height", cfg.backbone.height);
    detail::maybe(b, "width", cfg.backbone.width);
    detail::maybe(b, "channels", cfg.backbone.stage_channel_widths);
    detail::maybe(b, "attention", cfg.backbone.attention_enabled);
    detail::maybe(b, "shared_stages", cfg.backbone.num_shared_stages);
    detail::maybe(b, "branch_depth", cfg.backbone.branch_stage_depth);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    detail::check_keys(a,
                       {"jitter_prob", "jitter_range", "grayscale_prob",
                        "hflip_prob", "perspective_prob",
                        "perspective_max_shift", "crop_prob", "crop_min_scale"},
                       "augment");
    detail::maybe(a, "jitter_prob", cfg.augment.jitter_prob);
    detail::maybe(a, "jitter_range", cfg.augment.jitter_range);
    detail::maybe(a, "grayscale_prob", cfg.augment.grayscale_prob);
    detail::maybe(a, "hflip_prob", cfg.augment.hflip_prob);
    detail::maybe(a, "perspective_prob", cfg.augment.perspective_prob);
    detail::maybe(a, "perspective_max_shift",
                  cfg.augment.perspective_max_shift);
    detail::maybe(a, "crop_prob", cfg.augment.crop_prob);
    detail::maybe(a, "crop_min_scale", cfg.augment.crop_min_scale);
  }
  detail::maybe(j, "folds", cfg.folds);
  detail::maybe(j, "fold", cfg.fold);
  detail::maybe(j, "seed", cfg.seed);
  detail::maybe(j, "output_dir", cfg.output_dir);
  cfg.normalize();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config: " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// Canonical form: nlohmann objects keep keys sorted, so a fixed-indent dump
// is byte-stable.
inline std::string canonical_config(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

// "key.path=value" override onto the JSON document; values parse as JSON
// when possible and fall back to strings.
inline void apply_override(nlohmann::json& j, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::runtime_error("override: expected KEY=VALUE, got '" + spec +
                             "'");
  const std::string key = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);
  nlohmann::json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i)
    node = &(*node)[parts[i]];
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded())
    (*node)[parts.back()] = value;  // plain string
  else
    (*node)[parts.back()] = parsed;
}

// FNV-1a hash of the canonical config; names the run directory.
inline std::string run_id(const ExperimentConfig& cfg) {
  const std::string text = canonical_config(cfg);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace kinjoint
