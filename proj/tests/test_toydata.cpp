#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cstring>
#include <deque>

#include "doctest.h"
#include "ribtoy/binio.hpp"
#include "ribtoy/toydata.hpp"

using namespace ribtoy;

namespace {

// Counts enclosed background regions (holes) of the >0.1 foreground via
// 4-connected flood fill of the background from the border.
int count_holes(const std::vector<double>& pixels) {
  std::vector<int> state(kImagePixels, 0);  // 0 bg-unvisited, 1 fg, 2 bg-outside
  for (std::size_t p = 0; p < kImagePixels; ++p)
    if (pixels[p] > 0.1) state[p] = 1;
  std::deque<std::size_t> queue;
  auto push = [&](std::size_t p) {
    if (state[p] == 0) {
      state[p] = 2;
      queue.push_back(p);
    }
  };
  for (std::size_t c = 0; c < kImageW; ++c) {
    push(c);
    push((kImageH - 1) * kImageW + c);
  }
  for (std::size_t r = 0; r < kImageH; ++r) {
    push(r * kImageW);
    push(r * kImageW + kImageW - 1);
  }
  while (!queue.empty()) {
    const std::size_t p = queue.front();
    queue.pop_front();
    const std::size_t r = p / kImageW, c = p % kImageW;
    if (r > 0) push(p - kImageW);
    if (r + 1 < kImageH) push(p + kImageW);
    if (c > 0) push(p - 1);
    if (c + 1 < kImageW) push(p + 1);
  }
  // Remaining unvisited background splits into enclosed components.
  int holes = 0;
  for (std::size_t p = 0; p < kImagePixels; ++p) {
    if (state[p] != 0) continue;
    ++holes;
    state[p] = 2;
    queue.push_back(p);
    while (!queue.empty()) {
      const std::size_t q = queue.front();
      queue.pop_front();
      const std::size_t r = q / kImageW, c = q % kImageW;
      auto visit = [&](std::size_t n) {
        if (state[n] == 0) {
          state[n] = 2;
          queue.push_back(n);
        }
      };
      if (r > 0) visit(q - kImageW);
      if (r + 1 < kImageH) visit(q + kImageW);
      if (c > 0) visit(q - 1);
      if (c + 1 < kImageW) visit(q + 1);
    }
  }
  return holes;
}

}  // namespace

TEST_CASE("glyph synthesis is deterministic") {
  auto a = synthesize_glyphs(5, 7);
  auto b = synthesize_glyphs(5, 7);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].digit == b[i].digit);
    CHECK(std::memcmp(a[i].pixels.data(), b[i].pixels.data(),
                      sizeof(double) * kImagePixels) == 0);
  }
}

TEST_CASE("glyph topology: '8' has two holes, '2' has none") {
  auto glyphs = synthesize_glyphs(50, 123);
  for (const auto& g : glyphs) {
    const int holes = count_holes(g.pixels);
    if (g.digit == 8) {
      CHECK(holes == 2);
    } else {
      CHECK(holes == 0);
    }
  }
}

TEST_CASE("glyph foreground coverage stays in the expected band") {
  auto glyphs = synthesize_glyphs(100, 5);
  double total = 0.0;
  for (const auto& g : glyphs) {
    std::size_t fg = 0;
    for (double v : g.pixels)
      if (v > 0.1) ++fg;
    total += static_cast<double>(fg) / kImagePixels;
  }
  const double mean = total / static_cast<double>(glyphs.size());
  CHECK(mean >= 0.08);
  CHECK(mean <= 0.30);
}

TEST_CASE("IDX parsing") {
  auto glyphs = synthesize_glyphs(2, 9);
  glyphs.resize(3);
  glyphs[2] = glyphs[0];
  std::vector<std::uint8_t> ib, lb;
  write_idx(glyphs, ib, lb);

  SUBCASE("well-formed fixture parses") {
    auto parsed = parse_idx(ib, lb);
    REQUIRE(parsed.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(parsed[i].digit == glyphs[i].digit);
      CHECK(std::memcmp(parsed[i].pixels.data(), glyphs[i].pixels.data(),
                        sizeof(double) * kImagePixels) == 0);
    }
  }
  SUBCASE("round-trip through the writer is bit-exact") {
    auto parsed = parse_idx(ib, lb);
    std::vector<std::uint8_t> ib2, lb2;
    write_idx(parsed, ib2, lb2);
    CHECK(ib2 == ib);
    CHECK(lb2 == lb);
  }
  SUBCASE("all-zero payload parses to zero pixels") {
    std::vector<GlyphImage> zeros(2);
    for (auto& g : zeros) {
      g.digit = 2;
      g.pixels.assign(kImagePixels, 0.0);
    }
    std::vector<std::uint8_t> zi, zl;
    write_idx(zeros, zi, zl);
    auto parsed = parse_idx(zi, zl);
    REQUIRE(parsed.size() == 2);
    for (double v : parsed[0].pixels) CHECK(v == 0.0);
  }
  SUBCASE("wrong image magic is cited") {
    auto bad = ib;
    bad[3] = 0x07;
    try {
      parse_idx(bad, lb);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("magic") != std::string::npos);
      CHECK(std::string(e.what()).find("807") != std::string::npos);
    }
  }
  SUBCASE("truncated image stream") {
    std::vector<std::uint8_t> bad(ib.begin(), ib.end() - 10);
    CHECK_THROWS_AS(parse_idx(bad, lb), FormatError);
  }
  SUBCASE("count mismatch") {
    auto bad_labels = lb;
    bad_labels[7] = 2;  // claim 2 labels for 3 images
    bad_labels.resize(bad_labels.size() - 1);
    CHECK_THROWS_AS(parse_idx(ib, bad_labels), FormatError);
  }
}

TEST_CASE("marker injection") {
  DatasetConfig cfg;
  cfg.n_per_class = 40;
  cfg.seed = 11;

  SUBCASE("fraction 0 leaves every ND empty") {
    cfg.marker_fraction = 0.0;
    auto ds = build_toy_dataset(cfg);
    for (const auto& s : ds.samples) CHECK_FALSE(s.marked());
  }
  SUBCASE("fraction 1 marks all with exact pixel counts") {
    cfg.marker_fraction = 1.0;
    auto ds = build_toy_dataset(cfg);
    for (const auto& s : ds.samples) {
      REQUIRE(s.marked());
      const std::size_t nd = s.region_count(Region::ND);
      CHECK(nd == (s.class_index() == 0 ? 13u : 25u));
    }
  }
  SUBCASE("fraction 0.1 at 1000 per class gives 100 +/- 1 marked per class") {
    cfg.n_per_class = 1000;
    cfg.marker_fraction = 0.10;
    cfg.seed = 3;
    auto ds = build_toy_dataset(cfg);
    std::array<int, 2> marked{0, 0};
    for (const auto& s : ds.samples)
      if (s.marked()) ++marked[s.class_index()];
    CHECK(std::abs(marked[0] - 100) <= 1);
    CHECK(std::abs(marked[1] - 100) <= 1);
  }
}

TEST_CASE("dataset invariants") {
  DatasetConfig cfg;
  cfg.n_per_class = 60;
  cfg.marker_fraction = 0.2;
  cfg.seed = 17;
  auto ds = build_toy_dataset(cfg);

  SUBCASE("region codes partition the image") {
    for (const auto& s : ds.samples) {
      CHECK(s.region_count(Region::BG) + s.region_count(Region::D) +
                s.region_count(Region::ND) ==
            kImagePixels);
    }
  }
  SUBCASE("markers never overlap digit pixels and match the class shape") {
    for (const auto& s : ds.samples) {
      if (!s.marked()) continue;
      CHECK(s.region_count(Region::ND) ==
            (s.class_index() == 0 ? 13u : 25u));
      // ND pixels were painted to full intensity.
      for (std::size_t p = 0; p < kImagePixels; ++p)
        if (s.region[p] == static_cast<std::uint8_t>(Region::ND))
          CHECK(s.pixels[p] == 1.0);
    }
  }
  SUBCASE("both classes in both splits") {
    std::array<std::array<int, 2>, 2> count{};  // [split][class]
    for (const auto& s : ds.samples)
      ++count[static_cast<int>(s.split)][s.class_index()];
    for (int sp = 0; sp < 2; ++sp)
      for (int cl = 0; cl < 2; ++cl) CHECK(count[sp][cl] > 0);
  }
  SUBCASE("regeneration is byte-identical") {
    auto ds2 = build_toy_dataset(cfg);
    CHECK(serialize_dataset(ds) == serialize_dataset(ds2));
  }
  SUBCASE("tiny datasets are rejected before they can break the split") {
    cfg.n_per_class = 1;
    CHECK_THROWS_AS(build_toy_dataset(cfg), ValueError);
  }
}

TEST_CASE("default-shaped config yields 100 marked eval images") {
  DatasetConfig cfg;
  cfg.n_per_class = 5000;
  cfg.marker_fraction = 0.10;
  cfg.eval_fraction = 0.10;
  cfg.seed = 1;
  auto ds = build_toy_dataset(cfg);
  CHECK(ds.samples.size() == 10000);
  CHECK(ds.marked_eval_indices().size() == 100);
  CHECK(ds.split_indices(Split::Eval).size() == 1000);
}

TEST_CASE("dataset container round-trips") {
  SUBCASE("empty dataset") {
    ToyDataset empty;
    auto bytes = serialize_dataset(empty);
    auto back = deserialize_dataset(bytes);
    CHECK(back.samples.empty());
    CHECK(serialize_dataset(back) == bytes);
  }
  SUBCASE("10-sample dataset round-trips bit-exactly") {
    DatasetConfig cfg;
    cfg.n_per_class = 5;
    cfg.marker_fraction = 0.4;
    cfg.seed = 23;
    auto ds = build_toy_dataset(cfg);
    auto bytes = serialize_dataset(ds);
    auto back = deserialize_dataset(bytes);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      CHECK(back.samples[i].label == ds.samples[i].label);
      CHECK(back.samples[i].split == ds.samples[i].split);
      CHECK(back.samples[i].region == ds.samples[i].region);
      CHECK(std::memcmp(back.samples[i].pixels.data(),
                        ds.samples[i].pixels.data(),
                        sizeof(double) * kImagePixels) == 0);
    }
    CHECK(serialize_dataset(back) == bytes);
  }
  SUBCASE("corrupted payload byte fails the checksum") {
    DatasetConfig cfg;
    cfg.n_per_class = 3;
    cfg.seed = 29;
    auto bytes = serialize_dataset(build_toy_dataset(cfg));
    bytes[bytes.size() / 2] ^= 0xFF;
    try {
      deserialize_dataset(bytes);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("CRC") != std::string::npos);
    }
  }
  SUBCASE("bad magic and version are rejected") {
    ToyDataset empty;
    auto bytes = serialize_dataset(empty);
    auto bad = bytes;
    bad[0] = 'X';
    // CRC sees the corruption first by design.
    CHECK_THROWS_AS(deserialize_dataset(bad), FormatError);
  }
}
