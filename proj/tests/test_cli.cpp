// Run-configuration parsing plus an end-to-end exercise of the pipeline
// binary on a desk-sized configuration.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "ribtoy/binio.hpp"
#include "ribtoy/errors.hpp"
#include "ribtoy/runconfig.hpp"

using namespace ribtoy;
namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config --

TEST_CASE("defaults mirror the library structs") {
  RunConfig cfg = default_run_config();
  CHECK(cfg.dataset.n_per_class == 5000);
  CHECK(cfg.dataset.marker_fraction == doctest::Approx(0.10));
  CHECK(cfg.pretrain.epochs == 6);
  CHECK(cfg.pretrain.seed == cfg.model_init_seed);
  CHECK(cfg.rib_preset == "toy");
  CHECK(cfg.rib.K == 10);
  CHECK(cfg.rib.lambda == doctest::Approx(1e-3));
  CHECK(cfg.rib.pooling == PoolMode::Gndrp);
  CHECK(cfg.analysis_threshold == doctest::Approx(0.3));
  CHECK(cfg.analysis_n_images == 100);
  CHECK(cfg.eval_thresholds.size() == 19);
  CHECK(std::isinf(cfg.scratch.margin));
  CHECK(cfg.out == "run");
}

TEST_CASE("parse assigns every section") {
  json doc = {
      {"dataset", {{"n_per_class", 7}, {"marker_fraction", 0.25}, {"seed", 3}}},
      {"model", {{"init_seed", 9}}},
      {"pretrain", {{"epochs", 2}, {"lr", 0.5}}},
      {"rib", {{"K", 4}, {"lambda", 0.01}, {"pooling", "gap"}}},
      {"analysis", {{"threshold", 0.2}, {"n_images", 6}}},
      {"eval", {{"thresholds", {0.1, 0.9}}}},
      {"scratch", {{"epochs", 1}, {"margin", 12.0}}},
      {"out", "elsewhere"},
  };
  RunConfig cfg = parse_run_config(doc);
  CHECK(cfg.dataset.n_per_class == 7);
  CHECK(cfg.dataset.marker_fraction == doctest::Approx(0.25));
  CHECK(cfg.dataset.seed == 3);
  CHECK(cfg.model_init_seed == 9);
  CHECK(cfg.pretrain.seed == 9);  // mirrored
  CHECK(cfg.pretrain.epochs == 2);
  CHECK(cfg.pretrain.lr == doctest::Approx(0.5));
  CHECK(cfg.rib.K == 4);
  CHECK(cfg.rib.lambda == doctest::Approx(0.01));
  CHECK(cfg.rib.pooling == PoolMode::Gap);
  CHECK(cfg.analysis_threshold == doctest::Approx(0.2));
  CHECK(cfg.analysis_n_images == 6);
  CHECK(cfg.eval_thresholds == std::vector<double>{0.1, 0.9});
  CHECK(cfg.scratch.epochs == 1);
  CHECK(cfg.scratch.margin == doctest::Approx(12.0));
  CHECK(cfg.out == "elsewhere");
}

TEST_CASE("unknown keys are rejected with their dotted path") {
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"rib", {{"bogus", 1}}}}),
                       doctest::Contains("rib.bogus"), ValueError);
  CHECK_THROWS_WITH_AS(parse_run_config(json{{"nonsense", json::object()}}),
                       doctest::Contains("nonsense"), ValueError);
  CHECK_THROWS_AS(parse_run_config(json::array()), ValueError);
  CHECK_THROWS_AS(parse_run_config(json{{"dataset", 5}}), ValueError);
  CHECK_THROWS_AS(parse_run_config(json{{"out", 5}}), ValueError);
}

TEST_CASE("type mismatches are rejected") {
  CHECK_THROWS_AS(parse_run_config(json{{"pretrain", {{"epochs", "three"}}}}),
                  ValueError);
  CHECK_THROWS_AS(parse_run_config(json{{"rib", {{"pooling", "mean"}}}}),
                  ValueError);
  CHECK_THROWS_AS(parse_run_config(json{{"rib", {{"margin", "huge"}}}}),
                  ValueError);
  CHECK_THROWS_AS(parse_run_config(json{{"eval", {{"thresholds", "0.5"}}}}),
                  ValueError);
  CHECK_THROWS_AS(
      parse_run_config(json{{"eval", {{"thresholds", json::array()}}}}),
      ValueError);
}

TEST_CASE("the preset is applied before sibling keys override it") {
  // Alphabetically "B" precedes "preset", so this only works if the parser
  // pulls the preset forward.
  json doc = {{"rib", {{"B", 5}, {"preset", "paper"}}}};
  RunConfig cfg = parse_run_config(doc);
  CHECK(cfg.rib_preset == "paper");
  CHECK(cfg.rib.B == 5);                            // explicit key wins
  CHECK(cfg.rib.lambda == doctest::Approx(8e-6));   // from the preset
  CHECK(cfg.rib.margin == doctest::Approx(600.0));  // from the preset
  CHECK(cfg.rib.K == 10);

  CHECK_THROWS_AS(parse_run_config(json{{"rib", {{"preset", "huge"}}}}),
                  ValueError);
}

TEST_CASE("preset application preserves an already-set seed") {
  RunConfig cfg = default_run_config();
  apply_override(cfg, "rib.seed", "77");
  apply_override(cfg, "rib.preset", "paper");
  CHECK(cfg.rib.seed == 77);
  CHECK(cfg.rib.margin == doctest::Approx(600.0));
}

TEST_CASE("dotted overrides parse numbers, strings, and arrays") {
  RunConfig cfg = default_run_config();
  apply_override(cfg, "rib.lambda", "0.25");
  CHECK(cfg.rib.lambda == doctest::Approx(0.25));
  apply_override(cfg, "rib.pooling", "gap");  // bare string
  CHECK(cfg.rib.pooling == PoolMode::Gap);
  apply_override(cfg, "eval.thresholds", "[0.2,0.4]");
  CHECK(cfg.eval_thresholds == std::vector<double>{0.2, 0.4});
  apply_override(cfg, "out", "over_here");
  CHECK(cfg.out == "over_here");
  CHECK_THROWS_WITH_AS(apply_override(cfg, "rib.zeta", "1"),
                       doctest::Contains("rib.zeta"), ValueError);
  CHECK_THROWS_AS(apply_override(cfg, "mystery", "1"), ValueError);
}

TEST_CASE("infinite margins survive the JSON round trip") {
  RunConfig cfg = default_run_config();
  apply_override(cfg, "rib.margin", "inf");
  CHECK(std::isinf(cfg.rib.margin));
  json echo = run_config_json(cfg);
  CHECK(echo["rib"]["margin"] == "inf");
  CHECK(echo["scratch"]["margin"] == "inf");

  RunConfig back = parse_run_config(echo);
  CHECK(std::isinf(back.rib.margin));
  CHECK(std::isinf(back.scratch.margin));
}

TEST_CASE("the resolved echo round-trips every field") {
  RunConfig cfg = default_run_config();
  apply_override(cfg, "dataset.n_per_class", "17");
  apply_override(cfg, "rib.preset", "paper");
  apply_override(cfg, "rib.tau", "0.7");
  apply_override(cfg, "scratch.margin", "3.5");
  apply_global_seed(cfg, 123);

  RunConfig back = parse_run_config(run_config_json(cfg));
  CHECK(run_config_json(back) == run_config_json(cfg));
  CHECK(back.dataset.n_per_class == 17);
  CHECK(back.rib_preset == "paper");
  CHECK(back.rib.tau == doctest::Approx(0.7));
  CHECK(back.rib.seed == 123);
}

TEST_CASE("the master seed reaches every stage seed") {
  RunConfig cfg = default_run_config();
  apply_global_seed(cfg, 42);
  CHECK(cfg.dataset.seed == 42);
  CHECK(cfg.model_init_seed == 42);
  CHECK(cfg.pretrain.seed == 42);
  CHECK(cfg.rib.seed == 42);
  CHECK(cfg.scratch.seed == 42);
}

// ------------------------------------------------------------- pipeline --

namespace {

// The pipeline binary sits next to the test binary's directory tree; the
// build registers its location for us.
#ifndef RIBTOY_CLI_PATH
#error "RIBTOY_CLI_PATH must point at the pipeline binary"
#endif

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("ribtoy_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RIBTOY_CLI_PATH) + " " + args +
                          " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kDeskFlags =
    "--dataset.n_per_class=20 --dataset.marker_fraction=0.5 "
    "--dataset.eval_fraction=0.3 --pretrain.epochs=2 --analysis.n_images=3 "
    "--rib.K=2 --rib.B=4 --seed 9";

std::string flags_for(const TempDir& dir) {
  return "--out " + (dir.path / "run").string() + " " + kDeskFlags;
}

}  // namespace

TEST_CASE("pipeline stages produce their artifacts and manifests") {
  TempDir dir("stages");
  const std::string f = flags_for(dir);
  REQUIRE(run_cli(f + " gen-data") == 0);
  REQUIRE(run_cli(f + " pretrain") == 0);
  REQUIRE(run_cli(f + " rib") == 0);
  REQUIRE(run_cli(f + " analyze-hgr") == 0);
  REQUIRE(run_cli(f + " eval-seed") == 0);
  REQUIRE(run_cli(f + " scratch-rib --scratch.epochs=1") == 0);
  REQUIRE(run_cli(f + " render") == 0);

  const fs::path run = dir.path / "run";
  for (const char* rel :
       {"config.resolved.json", "data/dataset.ribd", "model/theta0.ribw",
        "model/pretrain_log.json", "maps/index.json",
        "analysis/hgr_by_layer.csv", "analysis/hgr_by_layer.json",
        "analysis/hgr_by_iteration.csv", "analysis/hgr_by_iteration.json",
        "eval/seed_metrics.csv", "eval/seed_metrics.json",
        "scratch/scratch_losses.json", "manifests/gen-data.json",
        "manifests/pretrain.json", "manifests/rib.json",
        "manifests/analyze-hgr.json", "manifests/eval-seed.json",
        "manifests/scratch-rib.json", "manifests/render.json"}) {
    INFO(rel);
    CHECK(fs::exists(run / rel));
  }

  // Three adapted images -> three map containers plus sidecars.
  int ribm = 0, sidecars = 0, pgm = 0, pbm = 0;
  for (const auto& e : fs::directory_iterator(run / "maps")) {
    if (e.path().extension() == ".ribm") ribm++;
    if (e.path().filename().string().ends_with(".ribm.json")) sidecars++;
  }
  CHECK(ribm == 3);
  CHECK(sidecars == 3);
  for (const auto& e : fs::directory_iterator(run / "renders")) {
    if (e.path().extension() == ".pgm") pgm++;
    if (e.path().extension() == ".pbm") pbm++;
  }
  CHECK(pgm == 8);  // input + six gradient maps + localization map
  CHECK(pbm == 1);

  // The manifest records hashes that match the files on disk.
  std::ifstream mf(run / "manifests" / "pretrain.json");
  json manifest = json::parse(mf);
  CHECK(manifest.at("stage") == "pretrain");
  CHECK(manifest.at("inputs").contains("data/dataset.ribd"));
  const std::string recorded =
      manifest.at("outputs").at("model/theta0.ribw").get<std::string>();
  CHECK(recorded == sha256_file((run / "model" / "theta0.ribw").string()));
  CHECK(manifest.at("wall_seconds").get<double>() >= 0.0);
}

TEST_CASE("stage reruns are byte-identical") {
  TempDir dir("rerun");
  const std::string f = flags_for(dir);
  REQUIRE(run_cli(f + " gen-data") == 0);
  REQUIRE(run_cli(f + " pretrain") == 0);
  REQUIRE(run_cli(f + " rib") == 0);
  const fs::path run = dir.path / "run";
  const std::string ds1 = sha256_file((run / "data" / "dataset.ribd").string());
  const std::string th1 =
      sha256_file((run / "model" / "theta0.ribw").string());
  std::string map_name;
  for (const auto& e : fs::directory_iterator(run / "maps")) {
    if (e.path().extension() == ".ribm") {
      map_name = e.path().string();
      break;
    }
  }
  REQUIRE(!map_name.empty());
  const std::string mp1 = sha256_file(map_name);

  REQUIRE(run_cli(f + " gen-data") == 0);
  REQUIRE(run_cli(f + " pretrain") == 0);
  REQUIRE(run_cli(f + " rib") == 0);
  CHECK(sha256_file((run / "data" / "dataset.ribd").string()) == ds1);
  CHECK(sha256_file((run / "model" / "theta0.ribw").string()) == th1);
  CHECK(sha256_file(map_name) == mp1);
}

TEST_CASE("worker-thread fan-out matches the serial maps") {
  TempDir dir("jobs");
  const std::string f = flags_for(dir);
  REQUIRE(run_cli(f + " gen-data") == 0);
  REQUIRE(run_cli(f + " pretrain") == 0);
  REQUIRE(run_cli(f + " rib") == 0);
  const fs::path run = dir.path / "run";
  std::map<std::string, std::string> serial;
  for (const auto& e : fs::directory_iterator(run / "maps")) {
    if (e.path().extension() == ".ribm") {
      serial[e.path().filename().string()] = sha256_file(e.path().string());
    }
  }
  REQUIRE(run_cli(f + " --jobs 3 rib") == 0);
  for (const auto& [name, hash] : serial) {
    CHECK(sha256_file((run / "maps" / name).string()) == hash);
  }
}

TEST_CASE("missing upstream artifacts exit with code 2 and name the path") {
  TempDir dir("missing");
  const std::string f = "--out " + (dir.path / "fresh").string();
  CHECK(run_cli(f + " pretrain") == 2);
  CHECK(run_cli(f + " rib") == 2);
  CHECK(run_cli(f + " eval-seed") == 2);
  CHECK(run_cli(f + " render") == 2);
}

TEST_CASE("bad inputs exit with code 2") {
  TempDir dir("bad");
  const std::string out = "--out " + (dir.path / "run").string();
  CHECK(run_cli(out + " --rib.bogus=1 gen-data") == 2);
  CHECK(run_cli(out + " --rib.pooling=mean gen-data") == 2);
  CHECK(run_cli(out + " --config /nonexistent_cfg.json gen-data") == 2);
  CHECK(run_cli(out + " --no-such-flag gen-data") == 2);
  CHECK(run_cli(out) == 2);  // no subcommand

  // Malformed JSON config file.
  const fs::path cfg = dir.path / "broken.json";
  std::ofstream(cfg) << "{ not json";
  CHECK(run_cli(out + " --config " + cfg.string() + " gen-data") == 2);
}

TEST_CASE("a truncated digit file is rejected with exit code 2") {
  TempDir dir("idx");
  // Conforming pair: four 28x28 digits per class.
  const fs::path imgs = dir.path / "digits.idx";
  const fs::path lbls = dir.path / "labels.idx";
  {
    std::ofstream f(imgs, std::ios::binary);
    const unsigned char head[] = {0, 0, 8, 3, 0, 0, 0, 8,
                                  0, 0, 0, 28, 0, 0, 0, 28};
    f.write(reinterpret_cast<const char*>(head), sizeof(head));
    for (int i = 0; i < 8; ++i) {
      std::vector<char> px(784, static_cast<char>(40 + 20 * i));
      f.write(px.data(), px.size());
    }
  }
  {
    std::ofstream f(lbls, std::ios::binary);
    const unsigned char head[] = {0, 0, 8, 1, 0, 0, 0, 8};
    f.write(reinterpret_cast<const char*>(head), sizeof(head));
    const char labels[] = {2, 8, 2, 8, 2, 8, 2, 8};
    f.write(labels, sizeof(labels));
  }
  const std::string base = "--out " + (dir.path / "run").string() +
                           " --dataset.source=idx --dataset.n_per_class=4 "
                           "--dataset.marker_fraction=0 "
                           "--dataset.eval_fraction=0.5 "
                           "--dataset.idx_labels=" +
                           lbls.string();
  CHECK(run_cli(base + " --dataset.idx_images=" + imgs.string() +
                " gen-data") == 0);

  // Corrupt the magic number.
  const fs::path bad = dir.path / "bad.idx";
  {
    auto bytes = read_file(imgs.string());
    bytes[2] = 0x09;
    write_file(bad.string(), bytes);
  }
  CHECK(run_cli(base + " --dataset.idx_images=" + bad.string() +
                " gen-data") == 2);

  // Truncate the pixel stream.
  const fs::path cut = dir.path / "cut.idx";
  {
    auto bytes = read_file(imgs.string());
    bytes.resize(bytes.size() - 100);
    write_file(cut.string(), bytes);
  }
  CHECK(run_cli(base + " --dataset.idx_images=" + cut.string() +
                " gen-data") == 2);
}

TEST_CASE("eval-seed --compare prints both runs") {
  TempDir dir("compare");
  const std::string fa =
      "--out " + (dir.path / "a").string() + " " + kDeskFlags;
  const std::string fb = "--out " + (dir.path / "b").string() + " " +
                         kDeskFlags + " --rib.pooling=gap";
  for (const std::string& f : {fa, fb}) {
    REQUIRE(run_cli(f + " gen-data") == 0);
    REQUIRE(run_cli(f + " pretrain") == 0);
    REQUIRE(run_cli(f + " rib") == 0);
  }
  REQUIRE(run_cli(fb + " eval-seed") == 0);
  CHECK(run_cli(fa + " eval-seed --compare " + (dir.path / "b").string()) ==
        0);
  // Comparing against a directory with no metrics is an input error.
  CHECK(run_cli(fa + " eval-seed --compare " + (dir.path / "empty").string()) ==
        2);
}

TEST_CASE("repeat-eval writes the mean and band") {
  TempDir dir("repeat");
  const std::string f = "--out " + (dir.path / "run").string() +
                        " --dataset.n_per_class=20 "
                        "--dataset.marker_fraction=0.5 "
                        "--dataset.eval_fraction=0.3 --pretrain.epochs=1 "
                        "--rib.K=0";
  REQUIRE(run_cli(f + " repeat-eval --seeds 1,2 --n-images 2") == 0);
  std::ifstream jf(dir.path / "run" / "eval" / "repeat_eval.json");
  json doc = json::parse(jf);
  CHECK(doc.at("best_mious").size() == 2);
  CHECK(std::isfinite(doc.at("mean").get<double>()));
  CHECK(std::isfinite(doc.at("stddev").get<double>()));

  CHECK(run_cli(f + " repeat-eval --seeds 1 --n-images 2") == 2);
  CHECK(run_cli(f + " repeat-eval --seeds 1,zebra") == 2);
}

TEST_CASE("ablation table covers all four variants") {
  TempDir dir("ablate");
  const std::string f = "--out " + (dir.path / "run").string() +
                        " --dataset.n_per_class=20 "
                        "--dataset.marker_fraction=0.5 "
                        "--dataset.eval_fraction=0.3 --pretrain.epochs=2 "
                        "--analysis.n_images=2 --rib.K=1 --rib.B=3";
  REQUIRE(run_cli(f + " gen-data") == 0);
  REQUIRE(run_cli(f + " pretrain") == 0);
  REQUIRE(run_cli(f + " ablate-activations") == 0);
  std::ifstream jf(dir.path / "run" / "eval" / "ablation.json");
  json doc = json::parse(jf);
  REQUIRE(doc.at("rows").size() == 4);
  std::vector<std::string> names;
  for (const auto& row : doc.at("rows")) {
    names.push_back(row.at("variant").get<std::string>());
    CHECK(std::isfinite(row.at("best_miou").get<double>()));
  }
  CHECK(names == std::vector<std::string>{"rib", "bce_sigmoid", "bce_tanh01",
                                          "bce_softsign01"});
}
