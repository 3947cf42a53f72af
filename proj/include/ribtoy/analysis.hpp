#pragma once

// Attribution instruments: input-gradient maps for every feature layer and
// for the labeled-class logit, plus the high-gradient ratio (HGR) statistic
// that summarizes how much of each annotated region carries gradient signal.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ribtoy/model.hpp"
#include "ribtoy/rib.hpp"
#include "ribtoy/toydata.hpp"

namespace ribtoy {

// Absolute input gradient of one network quantity, on a scale shared by all
// maps of the same image.
//
// layer 1..5: gradient of the spatial sum of that post-activation feature
// map. layer 6: gradient of the labeled-class logit under average pooling.
// Every map of one image is divided by the same constant norm_ref =
// max |G_1| of that image, so layer 1 has max exactly 1 and deeper maps are
// directly comparable to it (they may exceed 1).
struct GradientMap {
  int layer = 1;             // 1..5 = feature layers, 6 = labeled-class logit
  std::vector<double> map;   // kImagePixels absolute normalized gradients
  double norm_ref = 0.0;     // shared per-image scale (max |G_1|, pre-division)
};

inline constexpr int kLogitLayer = 6;
inline constexpr double kDefaultHgrThreshold = 0.3;

// All six maps of one image from a single forward pass.
// Raises ShapeError on a wrong pixel count, ValueError on a bad class, and
// DegenerateMapError when the layer-1 gradient is identically zero (no
// normalization scale exists).
std::vector<GradientMap> gradient_maps(const ModelParams& params,
                                       std::span<const double> pixels,
                                       int cls);

// One map only (still normalized by the same image's layer-1 scale).
GradientMap gradient_map(const ModelParams& params,
                         std::span<const double> pixels, int cls, int layer);

// High-gradient ratio: the fraction of the region's pixels whose map value
// strictly exceeds the threshold. `regions` holds a Region code per pixel;
// pixels with code `which` form the region. Raises ShapeError when the spans
// disagree and ValueError when the region is empty.
double hgr(std::span<const double> map, std::span<const std::uint8_t> regions,
           Region which, double threshold = kDefaultHgrThreshold);

// One averaged HGR figure: the axis tells which sweep produced it.
struct HgrRow {
  std::string axis_kind;        // "layer" or "iteration"
  int axis_value = 0;           // layer 1..6, or adaptation iteration 0..K
  Region region = Region::D;
  double hgr = 0.0;             // mean over n_images
  int n_images = 0;
  double threshold = kDefaultHgrThreshold;
};

struct HgrReport {
  std::vector<HgrRow> rows;
};

// Mean HGR per (layer 1..6, region D/ND/BG) over the first n_images marked
// evaluation samples, in dataset order. Raises ValueError (stating the
// shortfall) when fewer marked evaluation samples exist.
HgrReport hgr_by_layer(const ModelParams& params, const ToyDataset& ds,
                       int n_images = 100,
                       double threshold = kDefaultHgrThreshold);

// Mean HGR of the logit map per (adaptation iteration 0..K, region) over the
// same image selection: each image is adapted from theta0 under cfg and the
// logit gradient is re-measured at every iterate.
HgrReport hgr_by_rib_iteration(const ToyDataset& ds,
                               const ModelParams& theta0, const RibConfig& cfg,
                               int n_images = 100,
                               double threshold = kDefaultHgrThreshold);

// CSV with header axis_kind,axis_value,region,hgr,n_images,threshold.
std::string hgr_report_csv(const HgrReport& report);
// JSON array of row objects with the same keys.
std::string hgr_report_json(const HgrReport& report);

const char* region_name(Region r);

// 8-bit binary PGM (P5) of a 28x28 map: byte = round(255 * clamp(v, 0, 1)).
std::vector<std::uint8_t> encode_pgm(std::span<const double> values);
void write_pgm(std::span<const double> values,
               const std::filesystem::path& path);

}  // namespace ribtoy
