// Command-line pipeline driver: staged experiment runner with manifests.
//
// Stages write their artifacts under one output directory and record a
// manifest (config hash, input/output hashes, wall time) so that reruns
// can be checked for byte-identity. Exit codes: 0 success, 1 internal
// contract failure, 2 input/format/usage error.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ribtoy/analysis.hpp"
#include "ribtoy/binio.hpp"
#include "ribtoy/errors.hpp"
#include "ribtoy/eval.hpp"
#include "ribtoy/model.hpp"
#include "ribtoy/rib.hpp"
#include "ribtoy/runconfig.hpp"
#include "ribtoy/toydata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ribtoy;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Ctx {
  RunConfig cfg;
  fs::path out;
  std::string config_hash;  // sha256 of the resolved config dump
  int jobs = 1;
};

std::string dump_config(const RunConfig& cfg) {
  return run_config_json(cfg).dump(2) + "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  write_file(path.string(),
             {reinterpret_cast<const std::uint8_t*>(text.data()),
              text.size()});
}

std::string sha256_of_text(const std::string& text) {
  return sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()),
                     text.size()});
}

// A stage input that must already exist on disk; names the path and the
// stage that produces it so the error is actionable.
fs::path require_artifact(const Ctx& ctx, const std::string& rel,
                          const std::string& producer) {
  fs::path p = ctx.out / rel;
  if (!fs::exists(p)) {
    throw ValueError("missing upstream artifact: " + p.string() + " (run " +
                     producer + " first)");
  }
  return p;
}

class Manifest {
 public:
  Manifest(Ctx& ctx, std::string stage)
      : ctx_(ctx), stage_(std::move(stage)),
        t0_(std::chrono::steady_clock::now()) {}

  void input(const fs::path& p) { inputs_[rel(p)] = sha256_file(p.string()); }
  void output(const fs::path& p) {
    outputs_[rel(p)] = sha256_file(p.string());
  }

  void write() {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_)
            .count();
    json doc{{"stage", stage_},
             {"config_hash", ctx_.config_hash},
             {"inputs", inputs_},
             {"outputs", outputs_},
             {"wall_seconds", wall},
             {"versions",
              {{"ribtoy", kVersion}, {"ribd", 1}, {"ribw", 1}, {"ribm", 1}}}};
    write_text(ctx_.out / "manifests" / (stage_ + ".json"),
               doc.dump(2) + "\n");
    std::printf("[%s] done in %.1fs\n", stage_.c_str(), wall);
  }

 private:
  std::string rel(const fs::path& p) const {
    std::error_code ec;
    fs::path r = fs::relative(p, ctx_.out, ec);
    return (ec || r.empty()) ? p.string() : r.string();
  }
  Ctx& ctx_;
  std::string stage_;
  std::chrono::steady_clock::time_point t0_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

// First analysis.n_images marked evaluation samples, or every one of them
// (with a note) when the dataset holds fewer.
std::vector<std::size_t> cohort_indices(const Ctx& ctx, const ToyDataset& ds) {
  std::vector<std::size_t> marked = ds.marked_eval_indices();
  const auto want = static_cast<std::size_t>(ctx.cfg.analysis_n_images);
  if (marked.size() > want) {
    marked.resize(want);
  } else if (marked.size() < want) {
    std::fprintf(stderr,
                 "note: only %zu marked evaluation samples available "
                 "(wanted %zu); using all of them\n",
                 marked.size(), want);
  }
  return marked;
}

std::string map_filename(std::size_t image_index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05zu.ribm", image_index);
  return buf;
}

ToyDataset load_dataset(const Ctx& ctx) {
  return read_dataset(
      require_artifact(ctx, "data/dataset.ribd", "gen-data").string());
}

ModelParams load_theta(const Ctx& ctx) {
  return read_checkpoint(
      require_artifact(ctx, "model/theta0.ribw", "pretrain").string());
}

// ---------------------------------------------------------------- stages --

int cmd_gen_data(Ctx& ctx) {
  Manifest m(ctx, "gen-data");
  if (ctx.cfg.dataset.source == "idx") {
    m.input(ctx.cfg.dataset.idx_images);
    m.input(ctx.cfg.dataset.idx_labels);
  }
  ToyDataset ds = build_toy_dataset(ctx.cfg.dataset);
  fs::path out = ctx.out / "data" / "dataset.ribd";
  fs::create_directories(out.parent_path());
  write_dataset(ds, out.string());
  m.output(out);

  std::size_t per_class[2] = {0, 0};
  std::size_t marked = 0, eval_count = 0;
  for (const ToySample& s : ds.samples) {
    per_class[s.class_index()]++;
    if (s.split == Split::Eval) eval_count++;
    for (std::uint8_t r : s.region) {
      if (r == static_cast<std::uint8_t>(Region::ND)) {
        marked++;
        break;
      }
    }
  }
  std::printf(
      "dataset: %zu samples (%zu + %zu per class), %zu marked, %zu eval, "
      "%zu marked eval\n",
      ds.samples.size(), per_class[0], per_class[1], marked, eval_count,
      ds.marked_eval_indices().size());
  m.write();
  return 0;
}

int cmd_pretrain(Ctx& ctx) {
  Manifest m(ctx, "pretrain");
  fs::path ds_path = require_artifact(ctx, "data/dataset.ribd", "gen-data");
  m.input(ds_path);
  ToyDataset ds = read_dataset(ds_path.string());

  PretrainResult res = pretrain(ds, ctx.cfg.pretrain);

  fs::path ckpt = ctx.out / "model" / "theta0.ribw";
  fs::create_directories(ckpt.parent_path());
  write_checkpoint(res.params, ckpt.string());

  json log = json::array();
  for (std::size_t e = 0; e < res.log.size(); ++e) {
    log.push_back({{"epoch", e},
                   {"loss", res.log[e].loss},
                   {"train_accuracy", res.log[e].train_accuracy},
                   {"eval_accuracy", res.log[e].eval_accuracy}});
  }
  fs::path log_path = ctx.out / "model" / "pretrain_log.json";
  write_text(log_path, log.dump(2) + "\n");

  m.output(ckpt);
  m.output(log_path);
  for (std::size_t e = 0; e < res.log.size(); ++e) {
    std::printf("epoch %zu: loss %.4f train_acc %.4f eval_acc %.4f\n", e,
                res.log[e].loss, res.log[e].train_accuracy,
                res.log[e].eval_accuracy);
  }
  m.write();
  return 0;
}

int cmd_rib(Ctx& ctx) {
  Manifest m(ctx, "rib");
  fs::path ds_path = require_artifact(ctx, "data/dataset.ribd", "gen-data");
  fs::path th_path = require_artifact(ctx, "model/theta0.ribw", "pretrain");
  m.input(ds_path);
  m.input(th_path);
  ToyDataset ds = read_dataset(ds_path.string());
  ModelParams theta = read_checkpoint(th_path.string());
  validate(ctx.cfg.rib);

  std::vector<std::size_t> images = cohort_indices(ctx, ds);
  std::vector<LocalizationMap> maps(images.size());
  std::vector<int> fallbacks(images.size(), 0);

  const int jobs = std::max(1, ctx.jobs);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= images.size()) return;
      try {
        AdaptResult r = rib_adapt(ds, images[i], theta, ctx.cfg.rib);
        fallbacks[i] = r.loc.fallback_count;
        maps[i] = std::move(r.loc);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  fs::path maps_dir = ctx.out / "maps";
  fs::create_directories(maps_dir);
  json index = json::array();
  int total_fallbacks = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    fs::path map_path = maps_dir / map_filename(images[i]);
    write_localization_map(maps[i], ctx.cfg.rib, map_path.string());
    m.output(map_path);
    m.output(map_path.string() + ".json");
    index.push_back({{"image_index", images[i]},
                     {"file", map_path.filename().string()},
                     {"class", maps[i].cls},
                     {"fallback_count", fallbacks[i]}});
    total_fallbacks += fallbacks[i];
  }
  fs::path index_path = maps_dir / "index.json";
  write_text(index_path, index.dump(2) + "\n");
  m.output(index_path);
  std::printf("adapted %zu images (K=%d, %s, B=%d), %d pooling fallbacks\n",
              images.size(), ctx.cfg.rib.K,
              ctx.cfg.rib.pooling == PoolMode::Gap ? "gap" : "gndrp",
              ctx.cfg.rib.B, total_fallbacks);
  m.write();
  return 0;
}

int cmd_analyze_hgr(Ctx& ctx) {
  Manifest m(ctx, "analyze-hgr");
  fs::path ds_path = require_artifact(ctx, "data/dataset.ribd", "gen-data");
  fs::path th_path = require_artifact(ctx, "model/theta0.ribw", "pretrain");
  m.input(ds_path);
  m.input(th_path);
  ToyDataset ds = read_dataset(ds_path.string());
  ModelParams theta = read_checkpoint(th_path.string());

  fs::path dir = ctx.out / "analysis";
  fs::create_directories(dir);

  HgrReport by_layer = hgr_by_layer(theta, ds, ctx.cfg.analysis_n_images,
                                    ctx.cfg.analysis_threshold);
  write_text(dir / "hgr_by_layer.csv", hgr_report_csv(by_layer));
  write_text(dir / "hgr_by_layer.json", hgr_report_json(by_layer));
  m.output(dir / "hgr_by_layer.csv");
  m.output(dir / "hgr_by_layer.json");

  HgrReport by_iter =
      hgr_by_rib_iteration(ds, theta, ctx.cfg.rib, ctx.cfg.analysis_n_images,
                           ctx.cfg.analysis_threshold);
  write_text(dir / "hgr_by_iteration.csv", hgr_report_csv(by_iter));
  write_text(dir / "hgr_by_iteration.json", hgr_report_json(by_iter));
  m.output(dir / "hgr_by_iteration.csv");
  m.output(dir / "hgr_by_iteration.json");

  auto value_of = [](const HgrReport& r, int axis, Region reg) {
    for (const HgrRow& row : r.rows) {
      if (row.axis_value == axis && row.region == reg) return row.hgr;
    }
    return -1.0;
  };
  std::printf("layer sweep (threshold %.2f, %d images):\n",
              ctx.cfg.analysis_threshold, ctx.cfg.analysis_n_images);
  for (int l = 1; l <= 6; ++l) {
    std::printf("  layer %d: D %.4f  ND %.4f  BG %.4f\n", l,
                value_of(by_layer, l, Region::D),
                value_of(by_layer, l, Region::ND),
                value_of(by_layer, l, Region::BG));
  }
  std::printf("iteration sweep (k = 0..%d):\n", ctx.cfg.rib.K);
  for (int k = 0; k <= ctx.cfg.rib.K; ++k) {
    std::printf("  k %d: D %.4f  ND %.4f  BG %.4f\n", k,
                value_of(by_iter, k, Region::D),
                value_of(by_iter, k, Region::ND),
                value_of(by_iter, k, Region::BG));
  }
  m.write();
  return 0;
}

// Shared by eval-seed and the ablation stage: score a set of maps produced
// for `images` against the dataset ground truth.
SeedMetrics score_maps(const Ctx& ctx, const ToyDataset& ds,
                       const std::vector<std::size_t>& images,
                       const std::vector<LocalizationMap>& maps) {
  std::vector<ToySample> samples;
  samples.reserve(images.size());
  for (std::size_t i : images) samples.push_back(ds.samples[i]);
  return sweep(maps, samples, ctx.cfg.eval_thresholds);
}

int cmd_eval_seed(Ctx& ctx, const std::string& compare_dir) {
  Manifest m(ctx, "eval-seed");
  fs::path ds_path = require_artifact(ctx, "data/dataset.ribd", "gen-data");
  fs::path index_path = require_artifact(ctx, "maps/index.json", "rib");
  m.input(ds_path);
  m.input(index_path);
  ToyDataset ds = read_dataset(ds_path.string());

  auto index_bytes = read_file(index_path.string());
  json index = json::parse(index_bytes.begin(), index_bytes.end());
  std::vector<std::size_t> images;
  std::vector<LocalizationMap> maps;
  for (const auto& entry : index) {
    images.push_back(entry.at("image_index").get<std::size_t>());
    fs::path map_path =
        ctx.out / "maps" / entry.at("file").get<std::string>();
    m.input(map_path);
    maps.push_back(read_localization_map(map_path.string()));
  }

  SeedMetrics sm = score_maps(ctx, ds, images, maps);
  fs::path dir = ctx.out / "eval";
  write_text(dir / "seed_metrics.csv", seed_metrics_csv(sm));
  write_text(dir / "seed_metrics.json", seed_metrics_json(sm));
  m.output(dir / "seed_metrics.csv");
  m.output(dir / "seed_metrics.json");

  std::printf("seed sweep over %zu maps: best mIoU %.4f at threshold %.2f\n",
              maps.size(), sm.best_miou, sm.best_threshold);
  if (!compare_dir.empty()) {
    fs::path other = fs::path(compare_dir) / "eval" / "seed_metrics.json";
    if (!fs::exists(other)) {
      throw ValueError("missing comparison metrics: " + other.string() +
                       " (run eval-seed in that directory first)");
    }
    auto other_bytes = read_file(other.string());
    json od = json::parse(other_bytes.begin(), other_bytes.end());
    std::printf("comparison           %-28s %-28s\n", ctx.out.c_str(),
                compare_dir.c_str());
    std::printf("  best mIoU          %-28.4f %-28.4f\n", sm.best_miou,
                od.at("best_miou").get<double>());
    std::printf("  best threshold     %-28.2f %-28.2f\n", sm.best_threshold,
                od.at("best_threshold").get<double>());
  }
  m.write();
  return 0;
}

int cmd_ablate(Ctx& ctx) {
  Manifest m(ctx, "ablate-activations");
  fs::path ds_path = require_artifact(ctx, "data/dataset.ribd", "gen-data");
  fs::path th_path = require_artifact(ctx, "model/theta0.ribw", "pretrain");
  m.input(ds_path);
  m.input(th_path);
  ToyDataset ds = read_dataset(ds_path.string());
  ModelParams theta = read_checkpoint(th_path.string());
  validate(ctx.cfg.rib);

  std::vector<std::size_t> images = cohort_indices(ctx, ds);

  struct Variant {
    std::string name;
    std::optional<ProbKind> prob;  // nullopt = margin-loss adaptation
  };
  const std::vector<Variant> variants = {
      {"rib", std::nullopt},
      {"bce_sigmoid", ProbKind::Sigmoid},
      {"bce_tanh01", ProbKind::Tanh01},
      {"bce_softsign01", ProbKind::Softsign01},
  };

  json rows = json::array();
  std::printf("%-16s %-10s %-10s\n", "variant", "best_miou", "threshold");
  for (const Variant& v : variants) {
    std::vector<LocalizationMap> maps;
    maps.reserve(images.size());
    for (std::size_t i : images) {
      AdaptResult r = v.prob
                          ? finetune_bce_variant(ds, i, theta, ctx.cfg.rib,
                                                 *v.prob)
                          : rib_adapt(ds, i, theta, ctx.cfg.rib);
      maps.push_back(std::move(r.loc));
    }
    SeedMetrics sm = score_maps(ctx, ds, images, maps);
    rows.push_back({{"variant", v.name},
                    {"best_miou", sm.best_miou},
                    {"best_threshold", sm.best_threshold}});
    std::printf("%-16s %-10.4f %-10.2f\n", v.name.c_str(), sm.best_miou,
                sm.best_threshold);
  }
  fs::path out = ctx.out / "eval" / "ablation.json";
  write_text(out, json{{"n_images", images.size()}, {"rows", rows}}.dump(2) +
                      "\n");
  m.output(out);
  m.write();
  return 0;
}

int cmd_scratch(Ctx& ctx) {
  Manifest m(ctx, "scratch-rib");
  fs::path ds_path = require_artifact(ctx, "data/dataset.ribd", "gen-data");
  m.input(ds_path);
  ToyDataset ds = read_dataset(ds_path.string());

  ScratchRibResult res = train_from_scratch_rib(ds, ctx.cfg.scratch);
  json doc{{"steps_per_epoch", res.steps_per_epoch},
           {"diverged", res.diverged},
           {"terminated_at_step", res.terminated_at_step},
           {"step_losses", res.step_losses}};
  fs::path out = ctx.out / "scratch" / "scratch_losses.json";
  write_text(out, doc.dump(2) + "\n");
  m.output(out);

  double last = res.step_losses.empty() ? 0.0 : res.step_losses.back();
  std::printf("scratch run: %zu steps (%d per epoch), last loss %.3g%s\n",
              res.step_losses.size(), res.steps_per_epoch, last,
              res.diverged ? ", overflowed (runaway confirmed)" : "");
  m.write();
  return 0;
}

int cmd_render(Ctx& ctx, std::vector<std::size_t> images, double threshold) {
  Manifest m(ctx, "render");
  fs::path ds_path = require_artifact(ctx, "data/dataset.ribd", "gen-data");
  fs::path th_path = require_artifact(ctx, "model/theta0.ribw", "pretrain");
  m.input(ds_path);
  m.input(th_path);
  ToyDataset ds = read_dataset(ds_path.string());
  ModelParams theta = read_checkpoint(th_path.string());

  if (images.empty()) {
    std::vector<std::size_t> cohort = cohort_indices(ctx, ds);
    if (cohort.empty()) throw ValueError("no marked evaluation samples");
    images.push_back(cohort.front());
  }

  fs::path dir = ctx.out / "renders";
  fs::create_directories(dir);
  for (std::size_t idx : images) {
    if (idx >= ds.samples.size()) {
      throw ValueError("image index " + std::to_string(idx) +
                       " out of range (dataset has " +
                       std::to_string(ds.samples.size()) + " samples)");
    }
    const ToySample& s = ds.samples[idx];
    char prefix[32];
    std::snprintf(prefix, sizeof(prefix), "img_%05zu", idx);

    fs::path input_path = dir / (std::string(prefix) + "_input.pgm");
    write_pgm(s.pixels, input_path);
    m.output(input_path);

    std::vector<GradientMap> gmaps =
        gradient_maps(theta, s.pixels, s.class_index());
    for (const GradientMap& g : gmaps) {
      fs::path p =
          dir / (std::string(prefix) + "_g" + std::to_string(g.layer) +
                 ".pgm");
      write_pgm(g.map, p);
      m.output(p);
    }

    fs::path map_path = ctx.out / "maps" / map_filename(idx);
    if (fs::exists(map_path)) {
      m.input(map_path);
      LocalizationMap loc = read_localization_map(map_path.string());
      fs::path loc_path = dir / (std::string(prefix) + "_loc.pgm");
      write_pgm(loc.map, loc_path);
      m.output(loc_path);
      fs::path seed_path = dir / (std::string(prefix) + "_seed.pbm");
      write_pbm(seed_from_map(loc.map, threshold), seed_path);
      m.output(seed_path);
    }
    std::printf("rendered %s\n", prefix);
  }
  m.write();
  return 0;
}

int cmd_repeat_eval(Ctx& ctx, const std::string& seeds_csv, int n_images) {
  Manifest m(ctx, "repeat-eval");
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(seeds_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      seeds.push_back(std::stoull(tok));
    } catch (const std::exception&) {
      throw ValueError("bad seed list entry: \"" + tok + "\"");
    }
  }

  RepeatEvalConfig rc;
  rc.dataset = ctx.cfg.dataset;
  rc.pretrain = ctx.cfg.pretrain;
  rc.rib = ctx.cfg.rib;
  rc.n_images = n_images;
  rc.thresholds = ctx.cfg.eval_thresholds;
  RepeatEvalResult res = repeat_eval(rc, seeds);

  json doc{{"seeds", seeds},
           {"best_mious", res.best_mious},
           {"mean", res.mean},
           {"stddev", res.stddev},
           {"n_images", n_images}};
  fs::path out = ctx.out / "eval" / "repeat_eval.json";
  write_text(out, doc.dump(2) + "\n");
  m.output(out);
  std::printf("repeat-eval over %zu seeds: best mIoU %.4f +/- %.4f\n",
              seeds.size(), res.mean, res.stddev);
  m.write();
  return 0;
}

// ------------------------------------------------------------------ main --

int run(int argc, char** argv) {
  // Dotted --section.key=value overrides are routed to the run config, not
  // to the flag parser; peel them off before CLI11 sees the command line.
  std::vector<std::string> args;
  std::vector<std::pair<std::string, std::string>> overrides;
  const std::regex override_re("^--([A-Za-z_][A-Za-z0-9_]*\\.[A-Za-z0-9_.]+)=(.*)$");
  for (int i = 1; i < argc; ++i) {
    std::string tok = argv[i];
    std::smatch match;
    if (std::regex_match(tok, match, override_re)) {
      overrides.emplace_back(match[1].str(), match[2].str());
    } else {
      args.push_back(std::move(tok));
    }
  }

  CLI::App app{"toy information-bottleneck localization pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir, preset, seeds_csv = "1,2,3,4,5";
  std::optional<std::uint64_t> global_seed;
  int jobs = 1, repeat_n_images = 8;
  double render_threshold = 0.5;
  std::string compare_dir;
  std::vector<std::size_t> render_images;

  app.add_option("--config", config_path, "JSON run configuration file");
  app.add_option("--out", out_dir, "output directory (overrides config)");
  app.add_option("--seed", global_seed,
                 "master seed applied to every stage's seed field");
  app.add_option("--jobs", jobs, "worker threads for per-image stages")
      ->check(CLI::PositiveNumber);
  app.add_option("--preset", preset, "rib preset: toy or paper")
      ->check(CLI::IsMember({"toy", "paper"}));

  CLI::App* c_gen = app.add_subcommand("gen-data", "build the dataset");
  CLI::App* c_pre = app.add_subcommand("pretrain", "train the classifier");
  CLI::App* c_rib =
      app.add_subcommand("rib", "per-image adaptation localization maps");
  CLI::App* c_hgr = app.add_subcommand(
      "analyze-hgr", "gradient coverage by layer and by iteration");
  CLI::App* c_eval =
      app.add_subcommand("eval-seed", "threshold-sweep seed metrics");
  c_eval->add_option("--compare", compare_dir,
                     "second run directory to compare metrics against");
  CLI::App* c_abl = app.add_subcommand(
      "ablate-activations", "margin loss vs squashed cross-entropy variants");
  CLI::App* c_scr = app.add_subcommand(
      "scratch-rib", "train from scratch on the margin loss alone");
  CLI::App* c_ren =
      app.add_subcommand("render", "write PGM/PBM images of maps and seeds");
  c_ren->add_option("--image", render_images,
                    "dataset index to render (repeatable)");
  c_ren->add_option("--threshold", render_threshold,
                    "seed threshold for the rendered mask");
  CLI::App* c_rep = app.add_subcommand(
      "repeat-eval", "full pipeline repeated over seeds; mean/std of mIoU");
  c_rep->add_option("--seeds", seeds_csv, "comma-separated seed list");
  c_rep->add_option("--n-images", repeat_n_images,
                    "evaluation images scored per run")
      ->check(CLI::PositiveNumber);

  try {
    std::reverse(args.begin(), args.end());  // CLI11 consumes back-to-front
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  Ctx ctx;
  ctx.cfg = default_run_config();
  if (!config_path.empty()) {
    auto bytes = read_file(config_path);
    json doc = json::parse(bytes.begin(), bytes.end(), nullptr,
                           /*allow_exceptions=*/false);
    if (doc.is_discarded()) {
      throw FormatError("config file is not valid JSON: " + config_path);
    }
    ctx.cfg = parse_run_config(doc);
  }
  if (!preset.empty()) apply_override(ctx.cfg, "rib.preset", preset);
  if (global_seed) apply_global_seed(ctx.cfg, *global_seed);
  for (const auto& [key, value] : overrides) {
    apply_override(ctx.cfg, key, value);
  }
  if (!out_dir.empty()) ctx.cfg.out = out_dir;

  ctx.out = ctx.cfg.out;
  ctx.jobs = jobs;
  fs::create_directories(ctx.out);
  const std::string resolved = dump_config(ctx.cfg);
  ctx.config_hash = sha256_of_text(resolved);
  write_text(ctx.out / "config.resolved.json", resolved);

  if (*c_gen) return cmd_gen_data(ctx);
  if (*c_pre) return cmd_pretrain(ctx);
  if (*c_rib) return cmd_rib(ctx);
  if (*c_hgr) return cmd_analyze_hgr(ctx);
  if (*c_eval) return cmd_eval_seed(ctx, compare_dir);
  if (*c_abl) return cmd_ablate(ctx);
  if (*c_scr) return cmd_scratch(ctx);
  if (*c_ren) return cmd_render(ctx, render_images, render_threshold);
  if (*c_rep) return cmd_repeat_eval(ctx, seeds_csv, repeat_n_images);
  return 2;  // unreachable: require_subcommand(1)
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ValueError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
