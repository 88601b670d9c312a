#pragma once

// Experiment orchestration behind the CLI: dataset materialization, per-fold
// training with checkpoints and loss logs, protocol evaluation with
// prediction dumps and confusion matrices, and the comparison table.
//
// Every run lives under <output_dir>/<run_id>/ where run_id hashes the
// canonical config; nothing is overwritten without force. All outputs are
// plain CSV/JSON with fixed formatting, so a rerun with the same config and
// seed reproduces them byte for byte. Folds may run in parallel worker
// threads (capped by KINJOINT_THREADS, default 1); each fold is internally
// single-threaded and writes only its own files.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kinjoint/config.hpp"
#include "kinjoint/metrics.hpp"
#include "kinjoint/trainer.hpp"

namespace kinjoint {

namespace fs = std::filesystem;

inline int worker_cap() {
  const char* env = std::getenv("KINJOINT_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct RunLayout {
  fs::path root;

  explicit RunLayout(const ExperimentConfig& cfg)
      : root(fs::path(cfg.output_dir) / run_id(cfg)) {}

  fs::path config_path() const { return root / "config.json"; }
  fs::path checkpoints_dir() const { return root / "checkpoints"; }
  fs::path checkpoint(int fold) const {
    return checkpoints_dir() / ("fold" + std::to_string(fold) + ".ckpt");
  }
  fs::path phase1_checkpoint(int fold) const {
    return checkpoints_dir() /
           ("fold" + std::to_string(fold) + "_phase1.ckpt");
  }
  fs::path logs_dir() const { return root / "logs"; }
  fs::path train_log(int fold) const {
    return logs_dir() / ("train_fold" + std::to_string(fold) + ".csv");
  }
  fs::path reports_dir() const { return root / "reports"; }
  fs::path predictions(int fold) const {
    return reports_dir() / ("predictions_fold" + std::to_string(fold) + ".csv");
  }
  fs::path confusion_full(int fold) const {
    return reports_dir() / ("confusion_fold" + std::to_string(fold) + ".csv");
  }
  fs::path confusion_positives(int fold) const {
    return reports_dir() /
           ("confusion_positives_fold" + std::to_string(fold) + ".csv");
  }
  fs::path fold_report(int fold) const {
    return reports_dir() / ("report_fold" + std::to_string(fold) + ".json");
  }
  fs::path aggregate_report() const { return reports_dir() / "report.json"; }
};

// ---------------------------------------------------------------------------
// dataset loading
// ---------------------------------------------------------------------------

struct LoadedDataset {
  Manifest manifest;
  ImageStore store;
};

inline LoadedDataset load_dataset(const ExperimentConfig& cfg) {
  LoadedDataset ds;
  if (cfg.dataset.synthetic()) {
    SynthResult synth = synth_families(cfg.dataset.synth);
    ds.manifest = std::move(synth.manifest);
    ds.store = ImageStore::adopt(std::move(synth.images), cfg.backbone.height,
                                 cfg.backbone.width);
  } else {
    ds.manifest = load_manifest(cfg.dataset.manifest_path);
    ds.store =
        ImageStore::load(ds.manifest, cfg.backbone.height, cfg.backbone.width);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// cmd_synth
// ---------------------------------------------------------------------------

// Materializes the synthetic dataset: manifest.csv plus images/*.ppm.
// Returns the manifest path.
inline std::string cmd_synth(const ExperimentConfig& cfg,
                             const std::string& out_dir, bool force = false) {
  if (!cfg.dataset.synthetic())
    throw std::runtime_error("synth: config selects a manifest dataset");
  const fs::path dir =
      out_dir.empty()
          ? fs::path(cfg.output_dir) / ("dataset_" + cfg.dataset.synth.dataset_name)
          : fs::path(out_dir);
  const fs::path manifest_path = dir / "manifest.csv";
  if (fs::exists(manifest_path) && !force)
    throw std::runtime_error("synth: " + manifest_path.string() +
                             " exists; pass force to overwrite");
  SynthResult synth = synth_families(cfg.dataset.synth);
  fs::create_directories(dir / "images");
  for (std::size_t i = 0; i < synth.manifest.records.size(); ++i)
    save_ppm(synth.images[i],
             (dir / synth.manifest.records[i].path).string());
  save_manifest(synth.manifest, manifest_path.string());
  return manifest_path.string();
}

// ---------------------------------------------------------------------------
// cmd_train
// ---------------------------------------------------------------------------

namespace detail {

inline void write_train_log(const std::vector<TrainLogRow>& log,
                            const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("train: cannot write " + path);
  os << "epoch,phase,loss_total,loss_ver_fd,loss_ver_fs,loss_ver_md,"
        "loss_ver_ms,loss_id\n";
  for (const TrainLogRow& row : log) {
    os << row.epoch << ',' << row.phase << ',' << fmt_double(row.loss_total);
    for (int n = 0; n < 4; ++n) {
      os << ',';
      if (row.loss_verification[n]) os << fmt_double(*row.loss_verification[n]);
    }
    os << ',';
    if (row.loss_identification) os << fmt_double(*row.loss_identification);
    os << '\n';
  }
}

inline TrainResult train_fold(const ExperimentConfig& cfg,
                              const LoadedDataset& ds, const FoldSplit& split,
                              int fold) {
  std::vector<PairSample> mixed =
      gen_mixed_set(ds.manifest, split, fold, true, cfg.seed);
  switch (cfg.method) {
    case Method::JLNetFull:
    case Method::JLNetDoubleDagger:
      return train_jlnet(ds.store, mixed, cfg.backbone, cfg.schedule,
                         cfg.loss_weights, cfg.augment, true);
    case Method::JLNetDagger:
      return train_jlnet(ds.store, mixed, cfg.backbone, cfg.schedule,
                         cfg.loss_weights, cfg.augment, false);
    case Method::Ensemble: {
      std::array<std::vector<PairSample>, 4> empty;
      return train_ensemble_net(ds.store, mixed, empty, cfg.backbone,
                                cfg.schedule, cfg.loss_weights, cfg.augment,
                                false);
    }
    case Method::EnsembleStar: {
      // protocol forced to the per-type independent subsets
      std::array<std::vector<PairSample>, 4> indep;
      for (int n = 0; n < 4; ++n)
        indep[n] = gen_independent_set(ds.manifest, split, fold, true,
                                       KinType(n + 1), cfg.seed);
      return train_ensemble_net(ds.store, mixed, indep, cfg.backbone,
                                cfg.schedule, cfg.loss_weights, cfg.augment,
                                true);
    }
    case Method::Multiclass:
      return train_multiclass(ds.store, mixed, cfg.backbone, cfg.schedule,
                              cfg.multiclass_weights, cfg.augment);
    case Method::Oracle:
      break;
  }
  throw std::runtime_error("train: method oracle has nothing to train");
}

template <typename Fn>
void run_folds(const std::vector<int>& folds, Fn&& work) {
  const int cap = std::min<int>(worker_cap(), static_cast<int>(folds.size()));
  if (cap <= 1) {
    for (int f : folds) work(f);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(folds.size());
  for (int t = 0; t < cap; ++t)
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= folds.size()) return;
        try {
          work(folds[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (std::thread& th : pool) th.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Trains every fold in the config's fold list; emits checkpoints, loss logs
// and the canonical config. Returns the run directory.
inline std::string cmd_train(const ExperimentConfig& cfg, bool force = false) {
  cfg.validate();
  if (cfg.method == Method::Oracle)
    throw std::runtime_error(
        "train: the oracle stub has no parameters to train");
  RunLayout layout(cfg);
  if (fs::exists(layout.checkpoints_dir()) && !force)
    throw std::runtime_error("train: " + layout.checkpoints_dir().string() +
                             " exists; pass force to overwrite");
  LoadedDataset ds = load_dataset(cfg);
  FoldSplit split = make_folds(ds.manifest, cfg.folds, cfg.seed);

  fs::create_directories(layout.checkpoints_dir());
  fs::create_directories(layout.logs_dir());
  {
    std::ofstream os(layout.config_path());
    os << canonical_config(cfg);
  }
  detail::run_folds(cfg.fold_list(), [&](int fold) {
    TrainResult result = detail::train_fold(cfg, ds, split, fold);
    save_checkpoint(make_checkpoint(result.models, result.adam),
                    layout.checkpoint(fold).string());
    if (result.phase1_checkpoint && is_jlnet_method(cfg.method))
      save_checkpoint(*result.phase1_checkpoint,
                      layout.phase1_checkpoint(fold).string());
    detail::write_train_log(result.log, layout.train_log(fold).string());
  });
  return layout.root.string();
}

// ---------------------------------------------------------------------------
// cmd_evaluate
// ---------------------------------------------------------------------------

namespace detail {

struct FoldEvaluation {
  MetricsReport metrics;
  nlohmann::json verification;  // per-type table, independent protocol only
};

struct SampleScores {
  std::vector<int> preds;
  std::vector<int> labels;
  std::vector<std::array<double, kNumClasses>> dists;
  std::vector<const PairSample*> samples;
};

inline void score_samples(const MethodModels& mm, const LoadedDataset& ds,
                          const std::vector<PairSample>& samples,
                          int batch_size, std::optional<KinType> kin,
                          SampleScores& out) {
  std::vector<int> order(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    order[i] = static_cast<int>(i);
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    const std::size_t end =
        std::min(samples.size(), begin + static_cast<std::size_t>(batch_size));
    Batch batch = assemble_batch(ds.store, samples, order, begin, end, nullptr, 0);
    Predictions p = predict_batch(mm, batch.parents, batch.children, kin,
                                  &batch.labels);
    for (std::size_t i = begin; i < end; ++i) {
      out.preds.push_back(p.classes[i - begin]);
      out.labels.push_back(batch.labels[i - begin]);
      out.dists.push_back(p.distributions[i - begin]);
      out.samples.push_back(&samples[i]);
    }
  }
}

inline void write_predictions_csv(const Manifest& manifest,
                                  const SampleScores& scores,
                                  const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("evaluate: cannot write " + path);
  os << "pair_id,parent_path,child_path,true_label,predicted_label,"
        "p0,p1,p2,p3,p4\n";
  for (std::size_t i = 0; i < scores.preds.size(); ++i) {
    const PairSample& s = *scores.samples[i];
    const ManifestRecord& p = manifest.records[s.parent_record];
    const ManifestRecord& c = manifest.records[s.child_record];
    os << p.image_id << ':' << c.image_id << ',' << p.path << ',' << c.path
       << ',' << scores.labels[i] << ',' << scores.preds[i];
    for (double v : scores.dists[i]) os << ',' << fmt_double(v);
    os << '\n';
  }
}

inline FoldEvaluation evaluate_fold(const ExperimentConfig& cfg,
                                    const LoadedDataset& ds,
                                    const FoldSplit& split, int fold,
                                    const MethodModels& mm,
                                    const RunLayout& layout) {
  SampleScores scores;
  std::vector<std::vector<PairSample>> keep_alive;
  FoldEvaluation eval;

  if (cfg.protocol == Protocol::Independent) {
    // four per-type verification sets, decisions restricted to {0, type}
    nlohmann::json per_type;
    double acc_sum = 0.0, f1_sum = 0.0;
    for (KinType kin : all_kin_types()) {
      keep_alive.push_back(gen_independent_set(ds.manifest, split, fold, false,
                                               kin, cfg.seed));
      SampleScores part;
      score_samples(mm, ds, keep_alive.back(), cfg.schedule.batch_size, kin,
                    part);
      // binary accuracy / F1 with the kin class as positive
      std::int64_t tp = 0, fp = 0, fn = 0, correct = 0;
      for (std::size_t i = 0; i < part.preds.size(); ++i) {
        if (part.preds[i] == part.labels[i]) ++correct;
        if (part.preds[i] == kin.code && part.labels[i] == kin.code) ++tp;
        if (part.preds[i] == kin.code && part.labels[i] != kin.code) ++fp;
        if (part.preds[i] != kin.code && part.labels[i] == kin.code) ++fn;
      }
      const double acc =
          static_cast<double>(correct) / static_cast<double>(part.preds.size());
      const double f1 =
          tp == 0 ? 0.0
                  : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
      per_type[kin.name()] = {{"accuracy", acc}, {"f1", f1}};
      acc_sum += acc;
      f1_sum += f1;
      scores.preds.insert(scores.preds.end(), part.preds.begin(),
                          part.preds.end());
      scores.labels.insert(scores.labels.end(), part.labels.begin(),
                           part.labels.end());
      scores.dists.insert(scores.dists.end(), part.dists.begin(),
                          part.dists.end());
      scores.samples.insert(scores.samples.end(), part.samples.begin(),
                            part.samples.end());
    }
    per_type["mean_accuracy"] = acc_sum / 4.0;
    per_type["mean_f1"] = f1_sum / 4.0;
    eval.verification = per_type;
  } else {
    keep_alive.push_back(
        cfg.protocol == Protocol::Mixed
            ? gen_mixed_set(ds.manifest, split, fold, false, cfg.seed)
            : gen_real_scenario_set(ds.manifest, split, fold));
    score_samples(mm, ds, keep_alive.back(), cfg.schedule.batch_size, {},
                  scores);
  }

  eval.metrics = report(confusion(scores.preds, scores.labels));
  write_predictions_csv(ds.manifest, scores, layout.predictions(fold).string());
  {
    std::ofstream os(layout.confusion_full(fold));
    os << confusion_to_csv(eval.metrics.cm, false);
  }
  {
    std::ofstream os(layout.confusion_positives(fold));
    os << confusion_to_csv(eval.metrics.cm, true);
  }
  return eval;
}

inline nlohmann::json report_wrapper(const ExperimentConfig& cfg, int fold,
                                     const FoldEvaluation& eval) {
  nlohmann::json j;
  j["method"] = method_name(cfg.method);
  j["protocol"] = protocol_name(cfg.protocol);
  j["fold"] = fold;  // -1 marks the aggregate
  j["metrics"] = report_to_json(eval.metrics);
  if (!eval.verification.is_null()) j["verification"] = eval.verification;
  return j;
}

}  // namespace detail

// Evaluates every fold in the config's fold list against its protocol;
// emits per-fold prediction CSVs, confusion matrices (full and with the
// negative row dropped) and metric reports plus the cross-fold aggregate.
// Returns the aggregate report path.
inline std::string cmd_evaluate(const ExperimentConfig& cfg,
                                bool force = false) {
  cfg.validate();
  RunLayout layout(cfg);
  const std::vector<int> folds = cfg.fold_list();

  if (cfg.method != Method::Oracle) {
    std::string missing;
    for (int f : folds)
      if (!fs::exists(layout.checkpoint(f)))
        missing += (missing.empty() ? "" : ", ") + std::to_string(f);
    if (!missing.empty())
      throw std::runtime_error("evaluate: missing checkpoints for folds " +
                               missing + " under " +
                               layout.checkpoints_dir().string());
  }
  if (fs::exists(layout.aggregate_report()) && !force)
    throw std::runtime_error("evaluate: " +
                             layout.aggregate_report().string() +
                             " exists; pass force to overwrite");

  LoadedDataset ds = load_dataset(cfg);
  FoldSplit split = make_folds(ds.manifest, cfg.folds, cfg.seed);
  fs::create_directories(layout.reports_dir());

  std::map<int, detail::FoldEvaluation> evals;
  std::mutex evals_mutex;
  detail::run_folds(folds, [&](int fold) {
    MethodModels mm = create_models(cfg.method, cfg.backbone, cfg.seed);
    if (cfg.method != Method::Oracle)
      load_into_models(load_checkpoint(layout.checkpoint(fold).string()), mm);
    detail::FoldEvaluation eval =
        detail::evaluate_fold(cfg, ds, split, fold, mm, layout);
    std::ofstream os(layout.fold_report(fold));
    os << detail::report_wrapper(cfg, fold, eval).dump(2) << '\n';
    std::lock_guard<std::mutex> lock(evals_mutex);
    evals[fold] = std::move(eval);
  });

  std::vector<MetricsReport> fold_reports;
  for (int f : folds) fold_reports.push_back(evals[f].metrics);
  detail::FoldEvaluation agg;
  agg.metrics = aggregate_folds(fold_reports);
  if (cfg.protocol == Protocol::Independent) {
    // mean of the per-type verification tables
    nlohmann::json table;
    for (KinType kin : all_kin_types()) {
      double acc = 0.0, f1 = 0.0;
      for (int f : folds) {
        acc += evals[f].verification[kin.name()]["accuracy"].get<double>();
        f1 += evals[f].verification[kin.name()]["f1"].get<double>();
      }
      table[kin.name()] = {{"accuracy", acc / folds.size()},
                           {"f1", f1 / folds.size()}};
    }
    double macc = 0.0, mf1 = 0.0;
    for (int f : folds) {
      macc += evals[f].verification["mean_accuracy"].get<double>();
      mf1 += evals[f].verification["mean_f1"].get<double>();
    }
    table["mean_accuracy"] = macc / folds.size();
    table["mean_f1"] = mf1 / folds.size();
    agg.verification = table;
  }
  nlohmann::json aggregate = detail::report_wrapper(cfg, -1, agg);
  aggregate["folds_evaluated"] = folds;
  std::ofstream os(layout.aggregate_report());
  os << aggregate.dump(2) << '\n';
  return layout.aggregate_report().string();
}

// ---------------------------------------------------------------------------
// cmd_compare
// ---------------------------------------------------------------------------

// Consolidates evaluated reports into one table, a row per method.
inline std::string cmd_compare(const std::vector<std::string>& report_paths,
                               const std::string& out_csv) {
  if (report_paths.size() < 2)
    throw std::runtime_error("compare: need at least 2 evaluated experiments");
  std::vector<nlohmann::json> reports;
  for (const std::string& p : report_paths) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error("compare: cannot open " + p);
    nlohmann::json j;
    is >> j;
    for (const char* key : {"method", "protocol", "metrics"})
      if (!j.contains(key))
        throw std::runtime_error("compare: " + p + " lacks '" + key + "'");
    reports.push_back(std::move(j));
  }
  const double beta0 = reports[0]["metrics"]["beta"].get<double>();
  for (const nlohmann::json& j : reports)
    if (j["metrics"]["beta"].get<double>() != beta0)
      throw std::runtime_error(
          "compare: metric sets disagree (different beta)");

  std::string csv =
      "method,protocol,accuracy,macro_f1,f10_fd,f10_fs,f10_md,f10_ms,"
      "f10_mean,f10_all\n";
  for (const nlohmann::json& j : reports) {
    const nlohmann::json& m = j["metrics"];
    csv += j["method"].get<std::string>() + ',' +
           j["protocol"].get<std::string>() + ',' +
           fmt_double(m["accuracy"].get<double>()) + ',' +
           fmt_double(m["macro_f1"].get<double>());
    for (int c = 1; c < 5; ++c)
      csv += ',' + fmt_double(m["per_class_f_beta"][c].get<double>());
    csv += ',' + fmt_double(m["f_beta_mean_positive"].get<double>()) + ',' +
           fmt_double(m["f_beta_all"].get<double>()) + '\n';
  }
  std::ofstream os(out_csv);
  if (!os) throw std::runtime_error("compare: cannot write " + out_csv);
  os << csv;
  return out_csv;
}

}  // namespace kinjoint
