#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ribtoy/errors.hpp"

namespace ribtoy {

inline constexpr std::size_t kImageH = 28;
inline constexpr std::size_t kImageW = 28;
inline constexpr std::size_t kImagePixels = kImageH * kImageW;
inline constexpr int kNumClasses = 2;

// Region codes, stored as-is in the dataset container.
enum class Region : std::uint8_t { BG = 0, D = 1, ND = 2 };
enum class Split : std::uint8_t { Train = 0, Eval = 1 };

// Class 0 is the digit '2' (circle marker), class 1 is '8' (square marker).
struct ToySample {
  std::vector<double> pixels;        // 784 values on the k/255 grid
  std::array<double, 2> label{};     // one-hot
  std::vector<std::uint8_t> region;  // 784 region codes
  Split split = Split::Train;

  int class_index() const { return label[1] == 1.0 ? 1 : 0; }
  int digit() const { return class_index() == 0 ? 2 : 8; }
  bool marked() const;
  std::size_t region_count(Region r) const;
};

struct ToyDataset {
  std::vector<ToySample> samples;
  std::uint64_t seed = 0;

  std::vector<std::size_t> split_indices(Split s) const;
  // Eval samples carrying a marker, in index order.
  std::vector<std::size_t> marked_eval_indices() const;
};

struct GlyphImage {
  std::vector<double> pixels;  // 784, [0,1]
  int digit = 0;               // 2 or 8
};

// Deterministic stroke glyphs with per-sample jitter: translation within
// +/-2 px, stroke thickness 1-2 px. Intensities quantized to the k/255 grid.
std::vector<GlyphImage> synthesize_glyphs(std::size_t n_per_class,
                                          std::uint64_t seed);

// IDX ingestion (big-endian; image magic 0x00000803, label magic 0x00000801,
// 28x28 only). Returns one entry per image with its digit label.
std::vector<GlyphImage> parse_idx(std::span<const std::uint8_t> image_bytes,
                                  std::span<const std::uint8_t> label_bytes);

// Fixture writer for round-trip tests and offline IDX preparation.
void write_idx(const std::vector<GlyphImage>& images,
               std::vector<std::uint8_t>& image_bytes,
               std::vector<std::uint8_t>& label_bytes);

struct DatasetConfig {
  std::string source = "synthetic";  // "synthetic" or "idx"
  std::string idx_images;            // paths used when source == "idx"
  std::string idx_labels;
  std::size_t n_per_class = 5000;
  double marker_fraction = 0.10;
  double eval_fraction = 0.10;
  std::uint64_t seed = 0;
};

// Full dataset build: glyphs (or IDX digits 2/8), marker injection on the
// configured fraction of each class, region maps, stratified train/eval
// split. Pure function of the config.
ToyDataset build_toy_dataset(const DatasetConfig& cfg);

// As above but over an explicit base image list (the source-independent
// core; exposed for tests that inject handcrafted glyphs).
ToyDataset build_toy_dataset_from(const std::vector<GlyphImage>& base,
                                  const DatasetConfig& cfg);

// "RIBD" container. read(write(ds)) reproduces every persisted field;
// the in-memory generation seed is not part of the container layout.
std::vector<std::uint8_t> serialize_dataset(const ToyDataset& ds);
ToyDataset deserialize_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const ToyDataset& ds, const std::string& path);
ToyDataset read_dataset(const std::string& path);

}  // namespace ribtoy
