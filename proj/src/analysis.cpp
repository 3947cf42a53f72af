#include "ribtoy/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <vector>

#include "json.hpp"

#include "ribtoy/binio.hpp"
#include "ribtoy/errors.hpp"
#include "ribtoy/tensor.hpp"

namespace ribtoy {

namespace {

constexpr std::array<Region, 3> kReportRegions = {Region::D, Region::ND,
                                                  Region::BG};

void validate_layer(int layer) {
  if (layer < 1 || layer > kLogitLayer) {
    throw ValueError("gradient map layer must be in [1, 6], got " +
                     std::to_string(layer));
  }
}

// Computes the requested maps from one forward pass, in request order.
// Layer 1 is always evaluated internally: it defines the shared scale.
std::vector<GradientMap> maps_for_layers(const ModelParams& params,
                                         std::span<const double> pixels,
                                         int cls,
                                         std::span<const int> layers) {
  if (pixels.size() != kImagePixels) {
    throw ShapeError("gradient map input must have " +
                     std::to_string(kImagePixels) + " pixels, got " +
                     std::to_string(pixels.size()));
  }
  if (cls < 0 || cls >= kNumClasses) {
    throw ValueError("class index out of range: " + std::to_string(cls));
  }
  for (int l : layers) validate_layer(l);

  // Private parameter copy: backward passes scribble on leaf gradient
  // buffers, and callers may share one ModelParams across threads.
  ModelParams local = params.deep_copy();
  Tape tape;
  Tensor x = Tensor::from_data(
      {1, 1, kImageH, kImageW},
      std::vector<double>(pixels.begin(), pixels.end()),
      /*requires_grad=*/true);
  ForwardTrace trace = forward(tape, local, x, {});

  auto root_for = [&](int layer) -> Tensor {
    if (layer == kLogitLayer) {
      return tape.select(trace.logits, static_cast<std::size_t>(cls));
    }
    return tape.sum(trace.features[static_cast<std::size_t>(layer - 1)]);
  };

  x.ensure_grad();
  auto abs_grad_of = [&](const Tensor& root) {
    x.zero_grad();
    tape.backward(root);
    std::vector<double> out(kImagePixels);
    auto g = x.grad();
    for (std::size_t i = 0; i < kImagePixels; ++i) out[i] = std::abs(g[i]);
    return out;
  };

  std::vector<double> g1 = abs_grad_of(root_for(1));
  const double norm = *std::max_element(g1.begin(), g1.end());
  if (norm <= 0.0) {
    throw DegenerateMapError(
        "layer-1 input gradient is identically zero; the image has no "
        "shared gradient scale");
  }

  std::vector<GradientMap> out;
  out.reserve(layers.size());
  for (int l : layers) {
    GradientMap gm;
    gm.layer = l;
    gm.norm_ref = norm;
    gm.map = (l == 1) ? g1 : abs_grad_of(root_for(l));
    for (double& v : gm.map) v /= norm;
    out.push_back(std::move(gm));
  }
  return out;
}

// First n_images marked evaluation samples, in dataset order.
std::vector<std::size_t> qualifying_images(const ToyDataset& ds,
                                           int n_images) {
  if (n_images < 1) {
    throw ValueError("n_images must be >= 1, got " + std::to_string(n_images));
  }
  std::vector<std::size_t> marked = ds.marked_eval_indices();
  if (marked.size() < static_cast<std::size_t>(n_images)) {
    throw ValueError(
        "need " + std::to_string(n_images) +
        " marked evaluation samples but the dataset has only " +
        std::to_string(marked.size()) + " (short by " +
        std::to_string(n_images - static_cast<int>(marked.size())) + ")");
  }
  marked.resize(static_cast<std::size_t>(n_images));
  return marked;
}

void append_double(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

}  // namespace

const char* region_name(Region r) {
  switch (r) {
    case Region::BG: return "BG";
    case Region::D: return "D";
    case Region::ND: return "ND";
  }
  throw ValueError("unknown region code");
}

std::vector<GradientMap> gradient_maps(const ModelParams& params,
                                       std::span<const double> pixels,
                                       int cls) {
  static constexpr std::array<int, 6> kAll = {1, 2, 3, 4, 5, 6};
  return maps_for_layers(params, pixels, cls, kAll);
}

GradientMap gradient_map(const ModelParams& params,
                         std::span<const double> pixels, int cls, int layer) {
  validate_layer(layer);
  std::array<int, 1> one = {layer};
  return std::move(maps_for_layers(params, pixels, cls, one).front());
}

double hgr(std::span<const double> map, std::span<const std::uint8_t> regions,
           Region which, double threshold) {
  if (map.size() != regions.size()) {
    throw ShapeError("map and region spans disagree: " +
                     std::to_string(map.size()) + " vs " +
                     std::to_string(regions.size()));
  }
  std::size_t total = 0;
  std::size_t above = 0;
  const auto code = static_cast<std::uint8_t>(which);
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (regions[i] != code) continue;
    ++total;
    if (map[i] > threshold) ++above;
  }
  if (total == 0) {
    throw ValueError(std::string("region ") + region_name(which) +
                     " is empty; its high-gradient ratio is undefined");
  }
  return static_cast<double>(above) / static_cast<double>(total);
}

HgrReport hgr_by_layer(const ModelParams& params, const ToyDataset& ds,
                       int n_images, double threshold) {
  const std::vector<std::size_t> images = qualifying_images(ds, n_images);

  std::array<std::array<double, 3>, 6> acc{};
  for (std::size_t xi : images) {
    const ToySample& s = ds.samples[xi];
    std::vector<GradientMap> maps =
        gradient_maps(params, s.pixels, s.class_index());
    for (std::size_t l = 0; l < 6; ++l) {
      for (std::size_t r = 0; r < kReportRegions.size(); ++r) {
        acc[l][r] += hgr(maps[l].map, s.region, kReportRegions[r], threshold);
      }
    }
  }

  HgrReport rep;
  for (std::size_t l = 0; l < 6; ++l) {
    for (std::size_t r = 0; r < kReportRegions.size(); ++r) {
      HgrRow row;
      row.axis_kind = "layer";
      row.axis_value = static_cast<int>(l) + 1;
      row.region = kReportRegions[r];
      row.hgr = acc[l][r] / static_cast<double>(n_images);
      row.n_images = n_images;
      row.threshold = threshold;
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

HgrReport hgr_by_rib_iteration(const ToyDataset& ds,
                               const ModelParams& theta0, const RibConfig& cfg,
                               int n_images, double threshold) {
  validate(cfg);
  const std::vector<std::size_t> images = qualifying_images(ds, n_images);

  std::vector<std::array<double, 3>> acc(static_cast<std::size_t>(cfg.K) + 1,
                                         std::array<double, 3>{});
  for (std::size_t xi : images) {
    const ToySample& s = ds.samples[xi];
    AdaptResult adapted = rib_adapt(ds, xi, theta0, cfg);
    for (int k = 0; k <= cfg.K; ++k) {
      const ModelParams& th =
          (k == 0) ? theta0 : adapted.thetas[static_cast<std::size_t>(k - 1)];
      GradientMap g6 =
          gradient_map(th, s.pixels, s.class_index(), kLogitLayer);
      for (std::size_t r = 0; r < kReportRegions.size(); ++r) {
        acc[static_cast<std::size_t>(k)][r] +=
            hgr(g6.map, s.region, kReportRegions[r], threshold);
      }
    }
  }

  HgrReport rep;
  for (int k = 0; k <= cfg.K; ++k) {
    for (std::size_t r = 0; r < kReportRegions.size(); ++r) {
      HgrRow row;
      row.axis_kind = "iteration";
      row.axis_value = k;
      row.region = kReportRegions[r];
      row.hgr = acc[static_cast<std::size_t>(k)][r] /
                static_cast<double>(n_images);
      row.n_images = n_images;
      row.threshold = threshold;
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

std::string hgr_report_csv(const HgrReport& report) {
  std::string out = "axis_kind,axis_value,region,hgr,n_images,threshold\n";
  for (const HgrRow& r : report.rows) {
    out += r.axis_kind;
    out += ',';
    out += std::to_string(r.axis_value);
    out += ',';
    out += region_name(r.region);
    out += ',';
    append_double(out, r.hgr);
    out += ',';
    out += std::to_string(r.n_images);
    out += ',';
    append_double(out, r.threshold);
    out += '\n';
  }
  return out;
}

std::string hgr_report_json(const HgrReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const HgrRow& r : report.rows) {
    rows.push_back({{"axis_kind", r.axis_kind},
                    {"axis_value", r.axis_value},
                    {"region", region_name(r.region)},
                    {"hgr", r.hgr},
                    {"n_images", r.n_images},
                    {"threshold", r.threshold}});
  }
  return rows.dump(2);
}

std::vector<std::uint8_t> encode_pgm(std::span<const double> values) {
  if (values.size() != kImagePixels) {
    throw ShapeError("PGM render expects " + std::to_string(kImagePixels) +
                     " values, got " + std::to_string(values.size()));
  }
  char header[32];
  const int n = std::snprintf(header, sizeof header, "P5\n%d %d\n255\n",
                              static_cast<int>(kImageW),
                              static_cast<int>(kImageH));
  std::vector<std::uint8_t> out(header, header + n);
  out.reserve(out.size() + values.size());
  for (double v : values) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * c)));
  }
  return out;
}

void write_pgm(std::span<const double> values,
               const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_pgm(values);
  write_file(path.string(), bytes);
}

}  // namespace ribtoy
