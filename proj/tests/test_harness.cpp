#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "kinjoint/kinjoint.hpp"

using namespace kinjoint;
namespace fs = std::filesystem;

namespace {

struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& name){
    path = fs::path("scratch_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const {
    return (sub.empty() ? path : path / sub).string();
  }
};

ExperimentConfig tiny_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.dataset.synth.families_per_type = 8;
  cfg.dataset.synth.image_size = 16;
  cfg.dataset.synth.seed = 3;
  cfg.backbone.height = 16;
  cfg.backbone.width = 16;
  cfg.backbone.stage_channel_widths = {3, 4, 6};
  cfg.schedule.phase1_epochs = 1;
  cfg.schedule.phase2_epochs = 1;
  cfg.schedule.batch_size = 16;
  cfg.schedule.lr = 3e-3;
  cfg.folds = 2;
  cfg.fold = 0;
  cfg.seed = 11;
  cfg.output_dir = out_dir;
  cfg.normalize();
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config json round trip is lossless and canonical") {
  ExperimentConfig cfg = tiny_config("out");
  cfg.method = Method::EnsembleStar;
  cfg.protocol = Protocol::Real;
  cfg.loss_weights.lambda = {1, 2, 3, 4, 5};
  const std::string canon = canonical_config(cfg);
  ExperimentConfig back = config_from_json(config_to_json(cfg));
  CHECK(canonical_config(back) == canon);
  CHECK(back.method == Method::EnsembleStar);
  CHECK(back.protocol == Protocol::Real);
  CHECK(back.loss_weights.lambda == cfg.loss_weights.lambda);
  CHECK(back.schedule.seed == cfg.seed);

  // manifest-backed dataset round trips too
  ExperimentConfig mcfg = tiny_config("out");
  mcfg.dataset.manifest_path = "data/manifest.csv";
  ExperimentConfig mback = config_from_json(config_to_json(mcfg));
  CHECK(mback.dataset.manifest_path == "data/manifest.csv");
  CHECK(canonical_config(mback) == canonical_config(mcfg));
}

TEST_CASE("config parsing rejects unknown keys and bad combinations") {
  nlohmann::json j;
  j["no_such_key"] = 1;
  CHECK_THROWS_WITH_AS(config_from_json(j), doctest::Contains("unknown key"),
                       std::runtime_error);
  nlohmann::json j2;
  j2["dataset"]["manifest"] = "a.csv";
  j2["dataset"]["synthetic"] = {{"families_per_type", 5}};
  CHECK_THROWS_WITH_AS(config_from_json(j2), doctest::Contains("not both"),
                       std::runtime_error);
  nlohmann::json j3;
  j3["schedule"]["nope"] = 1;
  CHECK_THROWS(config_from_json(j3));
}

TEST_CASE("overrides patch nested keys with typed values") {
  nlohmann::json j;
  apply_override(j, "schedule.lr=0.001");
  apply_override(j, "backbone.attention=false");
  apply_override(j, "dataset.synthetic.families_per_type=12");
  apply_override(j, "output_dir=somewhere");
  CHECK(j["schedule"]["lr"].get<double>() == 0.001);
  CHECK(j["backbone"]["attention"].get<bool>() == false);
  CHECK(j["dataset"]["synthetic"]["families_per_type"].get<int>() == 12);
  CHECK(j["output_dir"].get<std::string>() == "somewhere");
  CHECK_THROWS(apply_override(j, "missing-equals"));
}

TEST_CASE("run_id is stable and sensitive to every field") {
  ExperimentConfig cfg = tiny_config("out");
  const std::string id = run_id(cfg);
  CHECK(id == run_id(cfg));
  CHECK(id.size() == 16);
  ExperimentConfig other = cfg;
  other.seed += 1;
  CHECK(run_id(other) != id);
  other = cfg;
  other.method = Method::Multiclass;
  CHECK(run_id(other) != id);
}

TEST_CASE("cmd_synth writes a loadable, byte-stable dataset") {
  ScratchDir scratch("synth");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cfg.dataset.synth.families_per_type = 20;
  const std::string manifest_path =
      cmd_synth(cfg, scratch.str("ds"), false);
  Manifest m = load_manifest(manifest_path);
  CHECK(m.records.size() == 160);
  int image_files = 0;
  for (const auto& entry :
       fs::directory_iterator(fs::path(scratch.str("ds")) / "images"))
    if (entry.path().extension() == ".ppm") ++image_files;
  CHECK(image_files == 160);

  // rerun without force refuses, with force reproduces bytes
  CHECK_THROWS_WITH_AS(cmd_synth(cfg, scratch.str("ds"), false),
                       doctest::Contains("force"), std::runtime_error);
  const std::string manifest_before = slurp(manifest_path);
  const std::string image_before =
      slurp(fs::path(scratch.str("ds")) / "images" / "fd_000_p.ppm");
  cmd_synth(cfg, scratch.str("ds"), true);
  CHECK(slurp(manifest_path) == manifest_before);
  CHECK(slurp(fs::path(scratch.str("ds")) / "images" / "fd_000_p.ppm") ==
        image_before);

  // the materialized dataset trains via the manifest path
  ExperimentConfig mcfg = cfg;
  mcfg.dataset.manifest_path = manifest_path;
  mcfg.schedule.phase1_epochs = 1;
  mcfg.schedule.phase2_epochs = 0;
  CHECK_NOTHROW(cmd_train(mcfg, false));
}

TEST_CASE("cmd_train emits one checkpoint per fold and method-shaped logs") {
  ScratchDir scratch("train");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cfg.folds = 5;
  cfg.fold = -1;  // a 5-fold run emits 5 checkpoints
  cmd_train(cfg, false);
  RunLayout layout(cfg);
  for (int f = 0; f < 5; ++f) CHECK(fs::exists(layout.checkpoint(f)));
  CHECK(fs::exists(layout.config_path()));

  // training twice without force is refused
  CHECK_THROWS_WITH_AS(cmd_train(cfg, false), doctest::Contains("force"),
                       std::runtime_error);

  // the no-multi-output ablation never logs an identification loss
  ExperimentConfig dagger = cfg;
  dagger.method = Method::JLNetDagger;
  cmd_train(dagger, false);
  RunLayout dlayout(dagger);
  std::ifstream log(dlayout.train_log(0));
  std::string header, line;
  std::getline(log, header);
  CHECK(header ==
        "epoch,phase,loss_total,loss_ver_fd,loss_ver_fs,loss_ver_md,"
        "loss_ver_ms,loss_id");
  while (std::getline(log, line)) CHECK(line.back() == ',');

  ExperimentConfig oracle = cfg;
  oracle.method = Method::Oracle;
  CHECK_THROWS_WITH_AS(cmd_train(oracle, false),
                       doctest::Contains("oracle"), std::runtime_error);
}

TEST_CASE("cmd_evaluate: oracle stub reaches accuracy 1 on any protocol") {
  ScratchDir scratch("oracle");
  for (Protocol p : {Protocol::Mixed, Protocol::Independent, Protocol::Real}) {
    ExperimentConfig cfg = tiny_config(scratch.str("out"));
    cfg.method = Method::Oracle;
    cfg.protocol = p;
    const std::string report_path = cmd_evaluate(cfg, false);
    std::ifstream is(report_path);
    nlohmann::json j;
    is >> j;
    CHECK(j["metrics"]["accuracy"].get<double>() == 1.0);
    CHECK(j["method"] == "oracle");
    CHECK(j["protocol"] == protocol_name(p));
  }
}

TEST_CASE("cmd_evaluate: real protocol scores every unordered pair") {
  ScratchDir scratch("real");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cfg.method = Method::Oracle;
  cfg.protocol = Protocol::Real;
  cmd_evaluate(cfg, false);
  RunLayout layout(cfg);
  std::ifstream is(layout.predictions(0));
  int rows = -1;  // discount the header
  std::string line;
  while (std::getline(is, line)) ++rows;
  // fold 0 holds 4 families per type: 32 images, C(32,2) pairs
  CHECK(rows == 496);
}

TEST_CASE("cmd_evaluate without checkpoints names the missing folds") {
  ScratchDir scratch("missing");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cfg.fold = -1;
  try {
    cmd_evaluate(cfg, false);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("missing checkpoints") != std::string::npos);
    CHECK(msg.find("0, 1") != std::string::npos);
  }
}

TEST_CASE("cmd_evaluate report json carries the documented schema") {
  ScratchDir scratch("schema");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cmd_train(cfg, false);
  const std::string report_path = cmd_evaluate(cfg, false);
  nlohmann::json j;
  std::ifstream(report_path) >> j;
  for (const char* key : {"method", "protocol", "fold", "metrics",
                          "folds_evaluated"})
    CHECK(j.contains(key));
  for (const char* key : {"accuracy", "macro_f1", "beta", "f_beta_all",
                          "f_beta_mean_positive", "per_class_f_beta",
                          "confusion"})
    CHECK(j["metrics"].contains(key));
  MetricsReport rep = report_from_json(j["metrics"]);
  CHECK(rep.cm.total() > 0);
}

TEST_CASE("independent protocol reports per-type verification tables") {
  ScratchDir scratch("indep");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cfg.protocol = Protocol::Independent;
  cmd_train(cfg, false);
  const std::string report_path = cmd_evaluate(cfg, false);
  nlohmann::json j;
  std::ifstream(report_path) >> j;
  REQUIRE(j.contains("verification"));
  for (const char* t : {"fd", "fs", "md", "ms"}) {
    CHECK(j["verification"][t].contains("accuracy"));
    CHECK(j["verification"][t].contains("f1"));
  }
  CHECK(j["verification"].contains("mean_accuracy"));
  // predictions stay within {0, type}
  RunLayout layout(cfg);
  std::ifstream is(layout.predictions(0));
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string col;
    for (int i = 0; i < 5; ++i) std::getline(ss, col, ',');
    const int pred = std::stoi(col);
    std::getline(ss, col, ',');
    CHECK(pred <= 4);
  }
}

TEST_CASE("cmd_compare consolidates reports with a fixed column order") {
  ScratchDir scratch("compare");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cfg.method = Method::Oracle;
  const std::string r1 = cmd_evaluate(cfg, false);

  ExperimentConfig cfg2 = cfg;
  cfg2.seed = 12;
  cfg2.normalize();
  const std::string r2 = cmd_evaluate(cfg2, false);

  const std::string table =
      cmd_compare({r1, r2}, scratch.str("table.csv"));
  std::ifstream is(table);
  std::string header, row1, row2;
  std::getline(is, header);
  CHECK(header ==
        "method,protocol,accuracy,macro_f1,f10_fd,f10_fs,f10_md,f10_ms,"
        "f10_mean,f10_all");
  std::getline(is, row1);
  std::getline(is, row2);
  CHECK(row1 == row2);  // two perfect oracle runs score identically

  CHECK_THROWS_WITH_AS(cmd_compare({r1}, scratch.str("t2.csv")),
                       doctest::Contains("at least 2"), std::runtime_error);

  // beta mismatch is a metric-set mismatch
  nlohmann::json j;
  std::ifstream(r1) >> j;
  j["metrics"]["beta"] = 2.0;
  {
    std::ofstream os(scratch.str("bad.json"));
    os << j.dump(2);
  }
  CHECK_THROWS_WITH_AS(
      cmd_compare({r1, scratch.str("bad.json")}, scratch.str("t3.csv")),
      doctest::Contains("metric sets"), std::runtime_error);
}

TEST_CASE("parallel fold workers reproduce the serial artifacts") {
  ScratchDir scratch("threads");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cfg.fold = -1;
  cmd_train(cfg, false);
  RunLayout layout(cfg);
  const std::string serial0 = slurp(layout.checkpoint(0));
  const std::string serial1 = slurp(layout.checkpoint(1));

  setenv("KINJOINT_THREADS", "2", 1);
  CHECK(worker_cap() == 2);
  cmd_train(cfg, true);
  unsetenv("KINJOINT_THREADS");
  CHECK(worker_cap() == 1);
  CHECK(slurp(layout.checkpoint(0)) == serial0);
  CHECK(slurp(layout.checkpoint(1)) == serial1);
}

TEST_CASE("jlnet training leaves a phase-boundary checkpoint per fold") {
  ScratchDir scratch("phase1");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cmd_train(cfg, false);
  RunLayout layout(cfg);
  CHECK(fs::exists(layout.phase1_checkpoint(0)));
  // stopping at the boundary reproduces it exactly
  ExperimentConfig stopped = cfg;
  stopped.schedule.phase2_epochs = 0;
  cmd_train(stopped, false);
  CHECK(slurp(RunLayout(stopped).checkpoint(0)) ==
        slurp(layout.phase1_checkpoint(0)));
}

TEST_CASE("train and evaluate reruns are byte-identical") {
  ScratchDir scratch("determinism");
  ExperimentConfig cfg = tiny_config(scratch.str("out"));
  cmd_train(cfg, false);
  cmd_evaluate(cfg, false);
  RunLayout layout(cfg);
  std::map<std::string, std::string> first;
  for (const auto& entry : fs::recursive_directory_iterator(layout.root))
    if (entry.is_regular_file())
      first[entry.path().string()] = slurp(entry.path());
  cmd_train(cfg, true);
  cmd_evaluate(cfg, true);
  for (const auto& [path, content] : first) CHECK(slurp(path) == content);
  CHECK(first.size() >= 7);
}
