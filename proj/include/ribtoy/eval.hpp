#pragma once

// Seed extraction and scoring: threshold a localization map into a
// foreground/background seed mask and score it against the region ground
// truth (foreground = D union ND), with a threshold sweep selecting the best
// mean IoU and a multi-seed repetition protocol for error bars.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ribtoy/model.hpp"
#include "ribtoy/rib.hpp"
#include "ribtoy/toydata.hpp"

namespace ribtoy {

// mask(p) = 1 iff map(p) >= threshold. Total over any threshold: 0 marks
// everything foreground, anything above the map's range marks nothing.
std::vector<std::uint8_t> seed_from_map(std::span<const double> map,
                                        double threshold);

// Pixel confusion of a seed mask against a sample's foreground (D union ND).
struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
};

ConfusionCounts seed_confusion(std::span<const std::uint8_t> mask,
                               const ToySample& sample);

struct SeedScore {
  double iou_fg = 0.0;
  double iou_bg = 0.0;
  double miou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // An IoU whose union was empty scores 1 by convention; these record when
  // that convention fired.
  bool empty_union_fg = false;
  bool empty_union_bg = false;
};

// All ratios from one set of confusion counts, so the metric identities
// (f1 from precision/recall, IoU_fg = TP/(TP+FP+FN)) hold exactly.
SeedScore score_from_counts(const ConfusionCounts& counts);
SeedScore score_seed(std::span<const std::uint8_t> mask,
                     const ToySample& sample);

struct SeedRow {
  double threshold = 0.0;
  double iou_fg = 0.0;
  double iou_bg = 0.0;
  double miou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool empty_union_fg = false;
  bool empty_union_bg = false;
};

struct SeedMetrics {
  std::vector<SeedRow> rows;    // one per threshold, input order
  double best_threshold = 0.0;  // lowest threshold achieving best_miou
  double best_miou = 0.0;
};

// 0.05, 0.10, ..., 0.95.
std::vector<double> default_seed_thresholds();

// Scores every map against its sample at every threshold. Dataset-level
// aggregation: confusion counts are summed across images before any ratio is
// taken. Raises ShapeError when maps and samples disagree in length and
// ValueError when either maps or thresholds is empty.
SeedMetrics sweep(std::span<const LocalizationMap> maps,
                  std::span<const ToySample> samples,
                  std::span<const double> thresholds);

std::string seed_metrics_csv(const SeedMetrics& metrics);
// Full table plus the best row.
std::string seed_metrics_json(const SeedMetrics& metrics);

// 1-bit-per-pixel binary PBM (P4) of a 28x28 seed mask; foreground bits set.
std::vector<std::uint8_t> encode_pbm(std::span<const std::uint8_t> mask);
void write_pbm(std::span<const std::uint8_t> mask,
               const std::filesystem::path& path);

// One full pretrain -> adapt -> sweep pipeline, repeated per seed.
struct RepeatEvalConfig {
  DatasetConfig dataset;          // built once; shared by every run
  PretrainConfig pretrain;        // seed field overridden per run
  RibConfig rib;                  // seed field overridden per run
  int n_images = 8;               // first n evaluation samples are scored
  std::vector<double> thresholds = default_seed_thresholds();
};

struct RepeatEvalResult {
  std::vector<double> best_mious;  // one per seed, input order
  double mean = 0.0;
  double stddev = 0.0;             // sample standard deviation (n-1)
};

// Requires at least two seeds. A failing run is rethrown naming the seed
// that failed.
RepeatEvalResult repeat_eval(const RepeatEvalConfig& cfg,
                             std::span<const std::uint64_t> seeds);

}  // namespace ribtoy
