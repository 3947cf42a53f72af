#include "ribtoy/rib.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "json.hpp"
#include "ribtoy/binio.hpp"
#include "ribtoy/util.hpp"

namespace ribtoy {

namespace {

constexpr char kMapMagic[] = "RIBM";

std::string pooling_name(PoolMode m) {
  return m == PoolMode::Gap ? "gap" : "gndrp";
}

// Normalized activation map of sample x under the given parameters, with
// failures attributed to the adaptation iteration that produced them.
std::vector<double> map_at(const ModelParams& params, const ToySample& x,
                           int cls, int k) {
  try {
    return cam(params, x.pixels, cls).normalized;
  } catch (const DegenerateMapError& e) {
    throw DegenerateMapError(std::string(e.what()) +
                             " (at iteration k=" + std::to_string(k) + ")");
  }
}

enum class AdaptLoss { Margin, CrossEntropy };

AdaptResult adapt_loop(const ToyDataset& ds, std::size_t x_index,
                       const ModelParams& theta0, const RibConfig& cfg,
                       AdaptLoss which, ProbKind prob_kind) {
  validate(cfg);
  if (x_index >= ds.samples.size())
    throw ValueError("adapt: sample index " + std::to_string(x_index) +
                     " out of range for dataset of size " +
                     std::to_string(ds.samples.size()));
  const ToySample& x = ds.samples[x_index];
  const int cls = x.class_index();

  AdaptResult result;
  result.loc.cls = cls;
  result.loc.stack.reserve(static_cast<std::size_t>(cfg.K) + 1);
  result.thetas.reserve(static_cast<std::size_t>(cfg.K));

  ModelParams theta = theta0.deep_copy();
  result.loc.stack.push_back(map_at(theta, x, cls, 0));
  result.logit_trajectory.push_back(gap_logits(theta, x.pixels)[cls]);

  for (int k = 1; k <= cfg.K; ++k) {
    const auto batch = batch_sampler(ds, x_index, cfg.B, cfg.seed, k);
    const std::size_t n = batch.size();

    std::vector<double> pixels;
    pixels.reserve(n * kImagePixels);
    std::vector<double> labels;
    labels.reserve(n * kNumClasses);
    PoolingSpec spec;
    spec.mode = cfg.pooling;
    spec.tau = cfg.tau;
    for (std::size_t idx : batch) {
      const ToySample& s = ds.samples[idx];
      pixels.insert(pixels.end(), s.pixels.begin(), s.pixels.end());
      labels.insert(labels.end(), s.label.begin(), s.label.end());
      spec.classes.push_back(s.class_index());
    }

    Tape tape;
    Tensor xb = Tensor::from_data({n, 1, kImageH, kImageW}, std::move(pixels));
    Tensor tb = Tensor::from_data({n, static_cast<std::size_t>(kNumClasses)},
                                  std::move(labels));
    try {
      ForwardTrace trace = forward(tape, theta, xb, spec);
      result.loc.fallback_count += trace.fallback_count;
      Tensor loss = which == AdaptLoss::Margin
                        ? tape.rib_loss(trace.logits, tb, cfg.margin)
                        : tape.bce_loss(trace.logits, tb, prob_kind);
      theta.zero_grads();
      tape.backward(loss);
    } catch (const DegenerateMapError& e) {
      throw DegenerateMapError(std::string(e.what()) +
                               " (at iteration k=" + std::to_string(k) + ")");
    }
    sgd_step(theta, cfg.lambda);

    result.loc.stack.push_back(map_at(theta, x, cls, k));
    result.logit_trajectory.push_back(gap_logits(theta, x.pixels)[cls]);
    result.thetas.push_back(theta.deep_copy());
  }

  // Aggregate: sum the stack, clamp negatives, normalize the maximum to 1.
  std::vector<double> agg(kImagePixels, 0.0);
  for (const auto& m : result.loc.stack)
    for (std::size_t p = 0; p < kImagePixels; ++p) agg[p] += m[p];
  double mx = 0.0;
  for (std::size_t p = 0; p < kImagePixels; ++p) {
    if (agg[p] < 0.0) agg[p] = 0.0;
    mx = std::max(mx, agg[p]);
  }
  if (mx <= 0.0)
    throw DegenerateMapError(
        "adapt: aggregated localization map is identically zero");
  for (auto& v : agg) v /= mx;
  result.loc.map = std::move(agg);
  return result;
}

}  // namespace

void validate(const RibConfig& cfg) {
  if (cfg.K < 0) throw ValueError("RibConfig: K must be >= 0");
  if (cfg.B < 1) throw ValueError("RibConfig: B must be >= 1");
  if (!(cfg.tau > 0.0) || !(cfg.tau <= 1.0))
    throw ValueError("RibConfig: tau must be in (0, 1]");
  if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda))
    throw ValueError("RibConfig: lambda must be finite and >= 0");
  if (!(cfg.margin > 0.0)) throw ValueError("RibConfig: margin must be > 0");
}

RibConfig paper_rib_config() {
  RibConfig cfg;
  cfg.K = 10;
  cfg.lambda = 8e-6;
  cfg.margin = 600.0;
  cfg.B = 20;
  cfg.tau = 0.4;
  cfg.pooling = PoolMode::Gndrp;
  return cfg;
}

std::vector<std::size_t> batch_sampler(const ToyDataset& ds,
                                       std::size_t x_index, int B,
                                       std::uint64_t seed, int k) {
  if (B < 1) throw ValueError("batch_sampler: B must be >= 1");
  const std::size_t n = ds.samples.size();
  if (x_index >= n)
    throw ValueError("batch_sampler: sample index out of range");
  if (n < static_cast<std::size_t>(B))
    throw ValueError("batch_sampler: dataset has " + std::to_string(n) +
                     " samples, need at least " + std::to_string(B));

  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(B));
  out.push_back(x_index);
  if (B == 1) return out;

  std::vector<std::size_t> others;
  others.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i)
    if (i != x_index) others.push_back(i);

  std::mt19937_64 rng(derive_seed({seed, 0x62, x_index,
                                   static_cast<std::uint64_t>(k)}));
  // Partial Fisher-Yates: the first B-1 entries become a uniform
  // without-replacement draw.
  for (std::size_t i = 0; i + 1 < static_cast<std::size_t>(B); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, others.size() - 1);
    std::swap(others[i], others[pick(rng)]);
    out.push_back(others[i]);
  }
  return out;
}

AdaptResult rib_adapt(const ToyDataset& ds, std::size_t x_index,
                      const ModelParams& theta0, const RibConfig& cfg) {
  return adapt_loop(ds, x_index, theta0, cfg, AdaptLoss::Margin,
                    ProbKind::Sigmoid);
}

AdaptResult finetune_bce_variant(const ToyDataset& ds, std::size_t x_index,
                                 const ModelParams& theta0,
                                 const RibConfig& cfg, ProbKind prob_kind) {
  return adapt_loop(ds, x_index, theta0, cfg, AdaptLoss::CrossEntropy,
                    prob_kind);
}

ScratchRibResult train_from_scratch_rib(const ToyDataset& ds,
                                        const ScratchRibConfig& cfg) {
  if (cfg.epochs < 1)
    throw ValueError("train_from_scratch_rib: epochs must be >= 1");
  if (cfg.batch < 1)
    throw ValueError("train_from_scratch_rib: batch must be >= 1");
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr))
    throw ValueError("train_from_scratch_rib: lr must be finite and >= 0");
  if (!(cfg.margin > 0.0))
    throw ValueError("train_from_scratch_rib: margin must be > 0");
  const auto train = ds.split_indices(Split::Train);
  if (train.empty())
    throw ValueError("train_from_scratch_rib: empty training split");

  ModelParams params = init_model(cfg.seed);
  ScratchRibResult result;
  result.steps_per_epoch = static_cast<int>(
      (train.size() + cfg.batch - 1) / static_cast<std::size_t>(cfg.batch));

  int global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train;
    std::mt19937_64 rng(derive_seed({cfg.seed, 0x72,
                                     static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      const std::size_t n = stop - start;
      std::vector<double> pixels;
      pixels.reserve(n * kImagePixels);
      std::vector<double> labels;
      labels.reserve(n * kNumClasses);
      for (std::size_t i = start; i < stop; ++i) {
        const ToySample& s = ds.samples[order[i]];
        pixels.insert(pixels.end(), s.pixels.begin(), s.pixels.end());
        labels.insert(labels.end(), s.label.begin(), s.label.end());
      }
      try {
        Tape tape;
        Tensor xb =
            Tensor::from_data({n, 1, kImageH, kImageW}, std::move(pixels));
        Tensor tb = Tensor::from_data(
            {n, static_cast<std::size_t>(kNumClasses)}, std::move(labels));
        ForwardTrace trace = forward(tape, params, xb, {});
        Tensor loss = tape.rib_loss(trace.logits, tb, cfg.margin);
        result.step_losses.push_back(loss.item());
        params.zero_grads();
        tape.backward(loss);
        sgd_step(params, cfg.lr);
      } catch (const NumericError&) {
        // Divergence is the expected observable here, not a failure.
        result.diverged = true;
        result.terminated_at_step = global_step;
        return result;
      }
      ++global_step;
    }
  }
  return result;
}

std::vector<std::uint8_t> serialize_localization_map(
    const LocalizationMap& m) {
  if (m.map.size() != kImagePixels)
    throw ValueError("serialize_localization_map: map must hold " +
                     std::to_string(kImagePixels) + " values");
  if (m.stack.empty())
    throw ValueError("serialize_localization_map: empty map stack");
  for (const auto& s : m.stack)
    if (s.size() != kImagePixels)
      throw ValueError(
          "serialize_localization_map: stack entry of wrong size");
  ByteWriter w;
  w.magic(kMapMagic);
  w.u32be(static_cast<std::uint32_t>(kImageH));
  w.u32be(static_cast<std::uint32_t>(kImageW));
  w.u32be(static_cast<std::uint32_t>(m.stack.size()));
  for (const auto& s : m.stack)
    for (double v : s) w.f64be(v);
  for (double v : m.map) w.f64be(v);
  return w.take();
}

LocalizationMap deserialize_localization_map(
    std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kMapMagic, "localization map");
  const std::uint32_t h = r.u32be("image height");
  const std::uint32_t w = r.u32be("image width");
  if (h != kImageH || w != kImageW)
    throw FormatError("localization map: expected 28x28 maps, found " +
                      std::to_string(h) + "x" + std::to_string(w));
  const std::uint32_t count = r.u32be("stack count");
  if (count == 0) throw FormatError("localization map: empty stack");
  const std::size_t expect =
      (static_cast<std::size_t>(count) + 1) * kImagePixels * 8;
  if (r.remaining() != expect)
    throw FormatError("localization map: payload holds " +
                      std::to_string(r.remaining()) + " bytes, expected " +
                      std::to_string(expect));
  LocalizationMap m;
  m.stack.resize(count);
  for (auto& s : m.stack) {
    s.resize(kImagePixels);
    for (auto& v : s) v = r.f64be("stack value");
  }
  m.map.resize(kImagePixels);
  for (auto& v : m.map) v = r.f64be("map value");
  return m;
}

void write_localization_map(const LocalizationMap& m, const RibConfig& cfg,
                            const std::string& path) {
  write_file(path, serialize_localization_map(m));
  nlohmann::json side;
  side["config"] = {{"K", cfg.K},          {"lambda", cfg.lambda},
                    {"margin", cfg.margin}, {"B", cfg.B},
                    {"tau", cfg.tau},       {"pooling", pooling_name(cfg.pooling)},
                    {"seed", cfg.seed}};
  side["class"] = m.cls;
  side["fallback_count"] = m.fallback_count;
  std::ofstream out(path + ".json");
  if (!out) throw FormatError("cannot write sidecar for " + path);
  out << side.dump(2) << "\n";
}

LocalizationMap read_localization_map(const std::string& path) {
  LocalizationMap m = deserialize_localization_map(read_file(path));
  const std::string side_path = path + ".json";
  if (std::filesystem::exists(side_path)) {
    std::ifstream in(side_path);
    nlohmann::json side;
    try {
      in >> side;
      m.cls = side.at("class").get<int>();
      m.fallback_count = side.at("fallback_count").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed sidecar " + side_path + ": " + e.what());
    }
  }
  return m;
}

}  // namespace ribtoy
