#include "ribtoy/toydata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "ribtoy/binio.hpp"
#include "ribtoy/util.hpp"

namespace ribtoy {

bool ToySample::marked() const {
  for (std::uint8_t r : region)
    if (r == static_cast<std::uint8_t>(Region::ND)) return true;
  return false;
}

std::size_t ToySample::region_count(Region r) const {
  std::size_t n = 0;
  for (std::uint8_t v : region)
    if (v == static_cast<std::uint8_t>(r)) ++n;
  return n;
}

std::vector<std::size_t> ToyDataset::split_indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == s) out.push_back(i);
  return out;
}

std::vector<std::size_t> ToyDataset::marked_eval_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == Split::Eval && samples[i].marked())
      out.push_back(i);
  return out;
}

// ------------------------------------------------------------- glyphs

namespace {

struct Vec2 {
  double x, y;  // x = column, y = row (y grows downward)
};

double dist_point(Vec2 p, Vec2 q) {
  return std::hypot(p.x - q.x, p.y - q.y);
}

double dist_segment(Vec2 p, Vec2 a, Vec2 b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return dist_point(p, {a.x + t * vx, a.y + t * vy});
}

// Distance to a circular arc spanning [deg0, deg1] (degrees, deg1 > deg0,
// may exceed 360 to wrap). Off-sector points measure to the arc endpoints.
double dist_arc(Vec2 p, Vec2 c, double r, double deg0, double deg1) {
  const double dx = p.x - c.x, dy = p.y - c.y;
  const double len = std::hypot(dx, dy);
  double a = std::atan2(dy, dx) * 180.0 / M_PI;
  while (a < deg0) a += 360.0;
  if (a <= deg1) return std::abs(len - r);
  auto at = [&](double deg) {
    const double rad = deg * M_PI / 180.0;
    return Vec2{c.x + r * std::cos(rad), c.y + r * std::sin(rad)};
  };
  return std::min(dist_point(p, at(deg0)), dist_point(p, at(deg1)));
}

double quantize255(double v) { return std::round(v * 255.0) / 255.0; }

// Skeleton distance for a '2': head arc, diagonal, base bar.
double glyph2_dist(Vec2 p) {
  const Vec2 head{13.5, 10.0};
  const double r = 4.5;
  const double d_arc = dist_arc(p, head, r, 170.0, 390.0);
  const double rad = 30.0 * M_PI / 180.0;
  const Vec2 arc_end{head.x + r * std::cos(rad), head.y + r * std::sin(rad)};
  const Vec2 corner{9.5, 21.0};
  const Vec2 bar_end{18.5, 21.0};
  return std::min({d_arc, dist_segment(p, arc_end, corner),
                   dist_segment(p, corner, bar_end)});
}

// Skeleton distance for an '8': two stacked rings.
double glyph8_dist(Vec2 p) {
  const double d1 = std::abs(dist_point(p, {14.0, 9.5}) - 3.8);
  const double d2 = std::abs(dist_point(p, {14.0, 18.5}) - 4.6);
  return std::min(d1, d2);
}

GlyphImage render_glyph(int digit, double shift_x, double shift_y,
                        double thickness) {
  GlyphImage img;
  img.digit = digit;
  img.pixels.assign(kImagePixels, 0.0);
  const double half = thickness * 0.5;
  for (std::size_t row = 0; row < kImageH; ++row)
    for (std::size_t col = 0; col < kImageW; ++col) {
      const Vec2 p{static_cast<double>(col) - shift_x,
                   static_cast<double>(row) - shift_y};
      const double d = digit == 2 ? glyph2_dist(p) : glyph8_dist(p);
      // Soft 1-px edge falloff, then quantization to the byte grid.
      const double v = std::clamp(half + 0.5 - d, 0.0, 1.0);
      img.pixels[row * kImageW + col] = quantize255(v);
    }
  return img;
}

}  // namespace

std::vector<GlyphImage> synthesize_glyphs(std::size_t n_per_class,
                                          std::uint64_t seed) {
  if (n_per_class < 1)
    throw ValueError("synthesize_glyphs: n_per_class must be >= 1");
  std::vector<GlyphImage> out;
  out.reserve(2 * n_per_class);
  for (int cls = 0; cls < kNumClasses; ++cls) {
    const int digit = cls == 0 ? 2 : 8;
    for (std::size_t i = 0; i < n_per_class; ++i) {
      std::mt19937_64 rng(derive_seed(
          {seed, 0x67, static_cast<std::uint64_t>(cls), i}));
      std::uniform_real_distribution<double> shift(-2.0, 2.0);
      std::uniform_real_distribution<double> thick(1.0, 2.0);
      const double sx = shift(rng), sy = shift(rng), t = thick(rng);
      out.push_back(render_glyph(digit, sx, sy, t));
    }
  }
  return out;
}

// ---------------------------------------------------------------- IDX

namespace {
constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
}  // namespace

std::vector<GlyphImage> parse_idx(std::span<const std::uint8_t> image_bytes,
                                  std::span<const std::uint8_t> label_bytes) {
  ByteReader ir(image_bytes);
  const std::uint32_t imagic = ir.u32be("image magic");
  if (imagic != kIdxImageMagic) {
    std::ostringstream os;
    os << "IDX image file: bad magic, observed 0x" << std::hex << imagic
       << ", expected 0x" << kIdxImageMagic;
    throw FormatError(os.str());
  }
  const std::uint32_t n_images = ir.u32be("image count");
  const std::uint32_t rows = ir.u32be("row count");
  const std::uint32_t cols = ir.u32be("column count");
  if (rows != kImageH || cols != kImageW) {
    std::ostringstream os;
    os << "IDX image file: expected 28x28 images, got " << rows << "x" << cols;
    throw FormatError(os.str());
  }

  ByteReader lr(label_bytes);
  const std::uint32_t lmagic = lr.u32be("label magic");
  if (lmagic != kIdxLabelMagic) {
    std::ostringstream os;
    os << "IDX label file: bad magic, observed 0x" << std::hex << lmagic
       << ", expected 0x" << kIdxLabelMagic;
    throw FormatError(os.str());
  }
  const std::uint32_t n_labels = lr.u32be("label count");
  if (n_images != n_labels) {
    std::ostringstream os;
    os << "IDX count mismatch: " << n_images << " images vs " << n_labels
       << " labels";
    throw FormatError(os.str());
  }

  std::vector<GlyphImage> out;
  out.reserve(n_images);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    auto px = ir.bytes(kImagePixels, "image pixels");
    GlyphImage img;
    img.digit = lr.u8("label byte");
    img.pixels.resize(kImagePixels);
    for (std::size_t p = 0; p < kImagePixels; ++p)
      img.pixels[p] = static_cast<double>(px[p]) / 255.0;
    out.push_back(std::move(img));
  }
  if (ir.remaining() != 0 || lr.remaining() != 0)
    throw FormatError("IDX stream has trailing bytes past the declared count");
  return out;
}

void write_idx(const std::vector<GlyphImage>& images,
               std::vector<std::uint8_t>& image_bytes,
               std::vector<std::uint8_t>& label_bytes) {
  ByteWriter iw, lw;
  iw.u32be(kIdxImageMagic);
  iw.u32be(static_cast<std::uint32_t>(images.size()));
  iw.u32be(kImageH);
  iw.u32be(kImageW);
  lw.u32be(kIdxLabelMagic);
  lw.u32be(static_cast<std::uint32_t>(images.size()));
  for (const auto& img : images) {
    for (double v : img.pixels)
      iw.u8(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    lw.u8(static_cast<std::uint8_t>(img.digit));
  }
  image_bytes = iw.take();
  label_bytes = lw.take();
}

// ------------------------------------------------------- dataset build

namespace {

constexpr double kDigitThreshold = 0.1;

// Filled radius-2 disc: 13 offsets. Filled 5x5 square: 25 offsets.
std::vector<std::pair<int, int>> marker_offsets(int cls) {
  std::vector<std::pair<int, int>> out;
  for (int dr = -2; dr <= 2; ++dr)
    for (int dc = -2; dc <= 2; ++dc) {
      if (cls == 0 && dr * dr + dc * dc > 4) continue;
      out.emplace_back(dr, dc);
    }
  return out;
}

void place_marker(ToySample& s, int cls, std::uint64_t seed,
                  std::size_t sample_index) {
  const auto offsets = marker_offsets(cls);
  std::mt19937_64 rng(derive_seed({seed, 0x6d, sample_index}));
  std::uniform_int_distribution<int> pos(2, 25);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const int r = pos(rng), c = pos(rng);
    bool clear = true;
    for (auto [dr, dc] : offsets)
      if (s.region[(r + dr) * kImageW + (c + dc)] ==
          static_cast<std::uint8_t>(Region::D)) {
        clear = false;
        break;
      }
    if (!clear) continue;
    for (auto [dr, dc] : offsets) {
      const std::size_t p = (r + dr) * kImageW + (c + dc);
      s.region[p] = static_cast<std::uint8_t>(Region::ND);
      s.pixels[p] = 1.0;
    }
    return;
  }
  std::ostringstream os;
  os << "no valid marker position after 1000 attempts for sample "
     << sample_index;
  throw PlacementError(os.str());
}

void validate_config(const DatasetConfig& cfg) {
  if (cfg.marker_fraction < 0.0 || cfg.marker_fraction > 1.0)
    throw ValueError("marker_fraction must lie in [0,1]");
  if (!(cfg.eval_fraction > 0.0 && cfg.eval_fraction < 1.0))
    throw ValueError("eval_fraction must lie in (0,1)");
  if (cfg.n_per_class < 2)
    throw ValueError(
        "n_per_class must be >= 2 so both classes appear in both splits");
  if (cfg.source != "synthetic" && cfg.source != "idx")
    throw ValueError("dataset source must be \"synthetic\" or \"idx\"");
}

}  // namespace

ToyDataset build_toy_dataset_from(const std::vector<GlyphImage>& base,
                                  const DatasetConfig& cfg) {
  validate_config(cfg);
  ToyDataset ds;
  ds.seed = cfg.seed;
  ds.samples.reserve(base.size());

  std::vector<std::vector<std::size_t>> by_class(2);
  for (const auto& img : base) {
    ToySample s;
    s.pixels = img.pixels;
    const int cls = img.digit == 2 ? 0 : 1;
    s.label = cls == 0 ? std::array<double, 2>{1.0, 0.0}
                       : std::array<double, 2>{0.0, 1.0};
    s.region.assign(kImagePixels, static_cast<std::uint8_t>(Region::BG));
    for (std::size_t p = 0; p < kImagePixels; ++p)
      if (s.pixels[p] > kDigitThreshold)
        s.region[p] = static_cast<std::uint8_t>(Region::D);
    by_class[cls].push_back(ds.samples.size());
    ds.samples.push_back(std::move(s));
  }

  // Markers on the configured fraction of each class.
  for (int cls = 0; cls < kNumClasses; ++cls) {
    auto order = by_class[cls];
    std::mt19937_64 rng(
        derive_seed({cfg.seed, 0x73, static_cast<std::uint64_t>(cls)}));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_marked = static_cast<std::size_t>(
        std::llround(cfg.marker_fraction * static_cast<double>(order.size())));
    for (std::size_t i = 0; i < n_marked; ++i)
      place_marker(ds.samples[order[i]], cls, cfg.seed, order[i]);
  }

  // Stratified split by (class, marked); strata shuffled independently.
  for (int cls = 0; cls < kNumClasses; ++cls) {
    std::size_t class_eval = 0;
    std::vector<std::size_t> largest;
    for (int marked = 0; marked < 2; ++marked) {
      std::vector<std::size_t> stratum;
      for (std::size_t i : by_class[cls])
        if (static_cast<int>(ds.samples[i].marked()) == marked)
          stratum.push_back(i);
      if (stratum.empty()) continue;
      std::mt19937_64 rng(
          derive_seed({cfg.seed, 0x70, static_cast<std::uint64_t>(cls),
                       static_cast<std::uint64_t>(marked)}));
      std::shuffle(stratum.begin(), stratum.end(), rng);
      auto n_eval = static_cast<std::size_t>(std::llround(
          cfg.eval_fraction * static_cast<double>(stratum.size())));
      n_eval = std::min(n_eval, stratum.size());
      for (std::size_t i = 0; i < n_eval; ++i)
        ds.samples[stratum[i]].split = Split::Eval;
      class_eval += n_eval;
      if (stratum.size() > largest.size()) largest = stratum;
    }
    // Keep both classes present in both splits.
    if (class_eval == 0) {
      ds.samples[largest.back()].split = Split::Eval;
      class_eval = 1;
    }
    if (class_eval == by_class[cls].size())
      ds.samples[largest.back()].split = Split::Train;
  }
  return ds;
}

ToyDataset build_toy_dataset(const DatasetConfig& cfg) {
  validate_config(cfg);
  std::vector<GlyphImage> base;
  if (cfg.source == "synthetic") {
    base = synthesize_glyphs(cfg.n_per_class, cfg.seed);
  } else {
    auto images = read_file(cfg.idx_images);
    auto labels = read_file(cfg.idx_labels);
    auto parsed = parse_idx(images, labels);
    std::array<std::size_t, 2> kept{0, 0};
    for (auto& img : parsed) {
      if (img.digit != 2 && img.digit != 8) continue;
      const int cls = img.digit == 2 ? 0 : 1;
      if (kept[cls] >= cfg.n_per_class) continue;
      ++kept[cls];
      base.push_back(std::move(img));
    }
    if (kept[0] < cfg.n_per_class || kept[1] < cfg.n_per_class) {
      std::ostringstream os;
      os << "IDX source holds only " << kept[0] << " '2' and " << kept[1]
         << " '8' digits; " << cfg.n_per_class << " of each requested";
      throw ValueError(os.str());
    }
  }
  return build_toy_dataset_from(base, cfg);
}

// ----------------------------------------------------------- container

namespace {
constexpr std::uint32_t kDatasetVersion = 1;
}

std::vector<std::uint8_t> serialize_dataset(const ToyDataset& ds) {
  ByteWriter w;
  w.magic("RIBD");
  w.u32be(kDatasetVersion);
  w.u32be(static_cast<std::uint32_t>(ds.samples.size()));
  w.u32be(kImageH);
  w.u32be(kImageW);
  for (const auto& s : ds.samples) {
    w.u8(static_cast<std::uint8_t>(s.class_index()));
    for (double v : s.pixels)
      w.u8(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    for (std::uint8_t r : s.region) w.u8(r);
    w.u8(static_cast<std::uint8_t>(s.split));
  }
  w.finish_crc32();
  return w.take();
}

ToyDataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  // CRC is validated up front so payload corruption is reported as such
  // rather than as a bogus field value.
  {
    if (bytes.size() < 4) throw FormatError("dataset container: truncated");
    ByteReader whole(bytes);
    whole.bytes(bytes.size() - 4, "payload");
    whole.check_crc32("dataset container");
  }
  ByteReader r(bytes);
  r.expect_magic("RIBD", "dataset container");
  const std::uint32_t version = r.u32be("version");
  if (version != kDatasetVersion) {
    std::ostringstream os;
    os << "dataset container: unsupported version " << version;
    throw FormatError(os.str());
  }
  const std::uint32_t count = r.u32be("sample count");
  const std::uint32_t h = r.u32be("height");
  const std::uint32_t w = r.u32be("width");
  if (h != kImageH || w != kImageW) {
    std::ostringstream os;
    os << "dataset container: expected 28x28, got " << h << "x" << w;
    throw FormatError(os.str());
  }
  ToyDataset ds;
  ds.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ToySample s;
    const std::uint8_t cls = r.u8("label");
    if (cls > 1) throw FormatError("dataset container: label byte out of range");
    s.label = cls == 0 ? std::array<double, 2>{1.0, 0.0}
                       : std::array<double, 2>{0.0, 1.0};
    auto px = r.bytes(kImagePixels, "pixels");
    s.pixels.resize(kImagePixels);
    for (std::size_t p = 0; p < kImagePixels; ++p)
      s.pixels[p] = static_cast<double>(px[p]) / 255.0;
    auto rg = r.bytes(kImagePixels, "region codes");
    s.region.assign(rg.begin(), rg.end());
    for (std::uint8_t code : s.region)
      if (code > 2)
        throw FormatError("dataset container: region code out of range");
    const std::uint8_t split = r.u8("split tag");
    if (split > 1)
      throw FormatError("dataset container: split tag out of range");
    s.split = static_cast<Split>(split);
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 4)
    throw FormatError("dataset container: trailing bytes before CRC");
  return ds;
}

void write_dataset(const ToyDataset& ds, const std::string& path) {
  write_file(path, serialize_dataset(ds));
}

ToyDataset read_dataset(const std::string& path) {
  auto bytes = read_file(path);
  return deserialize_dataset(bytes);
}

}  // namespace ribtoy
