#include "ribtoy/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

#include "ribtoy/binio.hpp"
#include "ribtoy/errors.hpp"

namespace ribtoy {

namespace {

bool is_foreground(std::uint8_t region_code) {
  return region_code == static_cast<std::uint8_t>(Region::D) ||
         region_code == static_cast<std::uint8_t>(Region::ND);
}

SeedScore score_counts(std::size_t tp, std::size_t fp, std::size_t fn,
                       std::size_t tn) {
  SeedScore s;
  const std::size_t union_fg = tp + fp + fn;
  const std::size_t union_bg = tn + fn + fp;
  s.empty_union_fg = union_fg == 0;
  s.empty_union_bg = union_bg == 0;
  s.iou_fg = s.empty_union_fg
                 ? 1.0
                 : static_cast<double>(tp) / static_cast<double>(union_fg);
  s.iou_bg = s.empty_union_bg
                 ? 1.0
                 : static_cast<double>(tn) / static_cast<double>(union_bg);
  s.miou = 0.5 * (s.iou_fg + s.iou_bg);
  s.precision = (tp + fp) == 0 ? 0.0
                               : static_cast<double>(tp) /
                                     static_cast<double>(tp + fp);
  s.recall = (tp + fn) == 0 ? 0.0
                            : static_cast<double>(tp) /
                                  static_cast<double>(tp + fn);
  s.f1 = (s.precision + s.recall) > 0.0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  return s;
}

void append_double(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

}  // namespace

std::vector<std::uint8_t> seed_from_map(std::span<const double> map,
                                        double threshold) {
  std::vector<std::uint8_t> mask(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    mask[i] = map[i] >= threshold ? 1 : 0;
  }
  return mask;
}

ConfusionCounts seed_confusion(std::span<const std::uint8_t> mask,
                               const ToySample& sample) {
  if (mask.size() != sample.region.size()) {
    throw ShapeError("seed mask has " + std::to_string(mask.size()) +
                     " pixels but the sample has " +
                     std::to_string(sample.region.size()));
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool predicted = mask[i] != 0;
    const bool actual = is_foreground(sample.region[i]);
    if (predicted && actual) ++c.tp;
    else if (predicted && !actual) ++c.fp;
    else if (!predicted && actual) ++c.fn;
    else ++c.tn;
  }
  return c;
}

SeedScore score_from_counts(const ConfusionCounts& counts) {
  return score_counts(counts.tp, counts.fp, counts.fn, counts.tn);
}

SeedScore score_seed(std::span<const std::uint8_t> mask,
                     const ToySample& sample) {
  return score_from_counts(seed_confusion(mask, sample));
}

std::vector<double> default_seed_thresholds() {
  std::vector<double> out;
  for (int i = 1; i <= 19; ++i) out.push_back(0.05 * i);
  return out;
}

SeedMetrics sweep(std::span<const LocalizationMap> maps,
                  std::span<const ToySample> samples,
                  std::span<const double> thresholds) {
  if (maps.empty()) throw ValueError("sweep needs at least one map");
  if (thresholds.empty()) {
    throw ValueError("sweep needs at least one threshold");
  }
  if (maps.size() != samples.size()) {
    throw ShapeError("sweep got " + std::to_string(maps.size()) +
                     " maps for " + std::to_string(samples.size()) +
                     " samples");
  }

  SeedMetrics out;
  for (double t : thresholds) {
    ConfusionCounts total;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const ConfusionCounts c =
          seed_confusion(seed_from_map(maps[i].map, t), samples[i]);
      total.tp += c.tp;
      total.fp += c.fp;
      total.fn += c.fn;
      total.tn += c.tn;
    }
    const SeedScore s = score_from_counts(total);
    SeedRow row;
    row.threshold = t;
    row.iou_fg = s.iou_fg;
    row.iou_bg = s.iou_bg;
    row.miou = s.miou;
    row.precision = s.precision;
    row.recall = s.recall;
    row.f1 = s.f1;
    row.empty_union_fg = s.empty_union_fg;
    row.empty_union_bg = s.empty_union_bg;
    out.rows.push_back(row);
  }

  out.best_miou = out.rows.front().miou;
  out.best_threshold = out.rows.front().threshold;
  for (const SeedRow& row : out.rows) {
    if (row.miou > out.best_miou) {
      out.best_miou = row.miou;
      out.best_threshold = row.threshold;
    }
  }
  return out;
}

std::string seed_metrics_csv(const SeedMetrics& metrics) {
  std::string out =
      "threshold,iou_fg,iou_bg,miou,precision,recall,f1,"
      "empty_union_fg,empty_union_bg\n";
  for (const SeedRow& r : metrics.rows) {
    append_double(out, r.threshold);
    for (double v : {r.iou_fg, r.iou_bg, r.miou, r.precision, r.recall,
                     r.f1}) {
      out += ',';
      append_double(out, v);
    }
    out += ',';
    out += r.empty_union_fg ? '1' : '0';
    out += ',';
    out += r.empty_union_bg ? '1' : '0';
    out += '\n';
  }
  return out;
}

std::string seed_metrics_json(const SeedMetrics& metrics) {
  auto row_json = [](const SeedRow& r) {
    return nlohmann::json{{"threshold", r.threshold},
                          {"iou_fg", r.iou_fg},
                          {"iou_bg", r.iou_bg},
                          {"miou", r.miou},
                          {"precision", r.precision},
                          {"recall", r.recall},
                          {"f1", r.f1},
                          {"empty_union_fg", r.empty_union_fg},
                          {"empty_union_bg", r.empty_union_bg}};
  };
  nlohmann::json rows = nlohmann::json::array();
  const SeedRow* best = nullptr;
  for (const SeedRow& r : metrics.rows) {
    rows.push_back(row_json(r));
    if (r.threshold == metrics.best_threshold) best = &r;
  }
  nlohmann::json doc = {{"rows", rows},
                        {"best_threshold", metrics.best_threshold},
                        {"best_miou", metrics.best_miou}};
  if (best != nullptr) doc["best_row"] = row_json(*best);
  return doc.dump(2);
}

std::vector<std::uint8_t> encode_pbm(std::span<const std::uint8_t> mask) {
  if (mask.size() != kImagePixels) {
    throw ShapeError("PBM render expects " + std::to_string(kImagePixels) +
                     " pixels, got " + std::to_string(mask.size()));
  }
  char header[32];
  const int n = std::snprintf(header, sizeof header, "P4\n%d %d\n",
                              static_cast<int>(kImageW),
                              static_cast<int>(kImageH));
  std::vector<std::uint8_t> out(header, header + n);
  const std::size_t row_bytes = (kImageW + 7) / 8;
  for (std::size_t y = 0; y < kImageH; ++y) {
    for (std::size_t b = 0; b < row_bytes; ++b) {
      std::uint8_t packed = 0;
      for (std::size_t bit = 0; bit < 8; ++bit) {
        const std::size_t x = b * 8 + bit;
        if (x < kImageW && mask[y * kImageW + x] != 0) {
          packed |= static_cast<std::uint8_t>(0x80u >> bit);
        }
      }
      out.push_back(packed);
    }
  }
  return out;
}

void write_pbm(std::span<const std::uint8_t> mask,
               const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_pbm(mask);
  write_file(path.string(), bytes);
}

RepeatEvalResult repeat_eval(const RepeatEvalConfig& cfg,
                             std::span<const std::uint64_t> seeds) {
  if (seeds.size() < 2) {
    throw ValueError("repeat_eval needs at least 2 seeds, got " +
                     std::to_string(seeds.size()));
  }
  if (cfg.n_images < 1) {
    throw ValueError("n_images must be >= 1, got " +
                     std::to_string(cfg.n_images));
  }
  const ToyDataset ds = build_toy_dataset(cfg.dataset);
  const std::vector<std::size_t> eval_indices = ds.split_indices(Split::Eval);
  if (eval_indices.size() < static_cast<std::size_t>(cfg.n_images)) {
    throw ValueError("need " + std::to_string(cfg.n_images) +
                     " evaluation samples but the dataset has only " +
                     std::to_string(eval_indices.size()));
  }

  RepeatEvalResult out;
  for (std::uint64_t seed : seeds) {
    try {
      PretrainConfig pcfg = cfg.pretrain;
      pcfg.seed = seed;
      const ModelParams theta0 = pretrain(ds, pcfg).params;

      RibConfig rcfg = cfg.rib;
      rcfg.seed = seed;
      std::vector<LocalizationMap> maps;
      std::vector<ToySample> samples;
      for (int i = 0; i < cfg.n_images; ++i) {
        const std::size_t xi = eval_indices[static_cast<std::size_t>(i)];
        maps.push_back(rib_adapt(ds, xi, theta0, rcfg).loc);
        samples.push_back(ds.samples[xi]);
      }
      const SeedMetrics metrics = sweep(maps, samples, cfg.thresholds);
      out.best_mious.push_back(metrics.best_miou);
    } catch (const std::exception& e) {
      throw Error("repeat_eval run for seed " + std::to_string(seed) +
                  " failed: " + e.what());
    }
  }

  double sum = 0.0;
  for (double v : out.best_mious) sum += v;
  out.mean = sum / static_cast<double>(out.best_mious.size());
  double sq = 0.0;
  for (double v : out.best_mious) sq += (v - out.mean) * (v - out.mean);
  out.stddev =
      std::sqrt(sq / static_cast<double>(out.best_mious.size() - 1));
  return out;
}

}  // namespace ribtoy
