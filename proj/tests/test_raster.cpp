#include <doctest.h>

#include <png.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "clickseg/error.hpp"
#include "clickseg/raster.hpp"
#include "support.hpp"

using namespace clickseg;

namespace {

void write_gray_png(const std::filesystem::path& path, int h, int w, const std::vector<unsigned char>& values) {
  FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, f);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < h; ++r) png_write_row(png, const_cast<unsigned char*>(values.data() + r * w));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

// Every window start by enumeration: stride steps, then the border-clamped one.
std::vector<int> enumerate_offsets(int extent, int tile, int overlap) {
  if (extent <= tile) return {0};
  std::vector<int> out;
  int pos = 0;
  while (pos + tile < extent) {
    out.push_back(pos);
    pos += tile - overlap;
  }
  out.push_back(extent - tile);
  return out;
}

}  // namespace

TEST_CASE("load_raster normalizes 8-bit intensities to [0,1]") {
  const auto dir = testsupport::scratch_dir("raster_norm");
  write_gray_png(dir / "a.png", 2, 2, {0, 64, 128, 255});
  const auto loaded = load_raster(dir / "a.png");
  const auto& px = loaded.image.pixels.data;
  REQUIRE(px.size() == 4);
  for (float v : px) CHECK((v >= 0.0F && v <= 1.0F));
  CHECK(*std::max_element(px.begin(), px.end()) == 1.0F);
  CHECK(px[1] == doctest::Approx(64.0 / 255.0));
  CHECK_FALSE(loaded.labels.has_value());
}

TEST_CASE("label value equal to the class count is rejected with the offending value") {
  const auto dir = testsupport::scratch_dir("raster_labels");
  write_gray_png(dir / "img.png", 2, 2, {1, 2, 3, 4});
  write_gray_png(dir / "img.labels.png", 2, 2, {0, 1, 6, 2});
  bool threw = false;
  try {
    load_raster(dir / "img.png", 6);
  } catch (const Error& e) {
    threw = true;
    CHECK(e.code() == ErrorCode::validation);
    CHECK(std::string(e.what()).find('6') != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("unreadable file is an io error") {
  CHECK_THROWS_AS(load_raster("/nonexistent/x.png"), Error);
}

TEST_CASE("toy raster round-trips through PNG bit-exactly") {
  ToyConfig cfg;
  cfg.height = cfg.width = 64;
  auto toy = generate_toy(5, cfg);
  REQUIRE(toy.size() == 1);
  // 8-bit storage quantizes; a quantized raster must then survive exactly.
  const auto dir = testsupport::scratch_dir("raster_roundtrip");
  save_raster(dir / "t.png", toy[0].first);
  save_labels(dir / "t.labels.png", toy[0].second);
  const auto first = load_raster(dir / "t.png", 2);
  save_raster(dir / "u.png", first.image);
  save_labels(dir / "u.labels.png", *first.labels);
  const auto second = load_raster(dir / "u.png", 2);
  CHECK(second.image.pixels == first.image.pixels);
  CHECK(*second.labels == toy[0].second);
  for (std::size_t i = 0; i < first.image.pixels.data.size(); ++i)
    REQUIRE(std::abs(first.image.pixels.data[i] - toy[0].first.pixels.data[i]) <= 0.5F / 255.0F + 1e-6F);
}

TEST_CASE("TIFF round trip") {
  ToyConfig cfg;
  cfg.height = 20;
  cfg.width = 30;
  auto toy = generate_toy(9, cfg);
  const auto dir = testsupport::scratch_dir("raster_tiff");
  save_raster(dir / "t.png", toy[0].first);
  const auto png = load_raster(dir / "t.png");
  save_raster(dir / "t.tif", png.image);
  const auto tif = load_raster(dir / "t.tif");
  CHECK(tif.image.pixels == png.image.pixels);
}

TEST_CASE("tile examples") {
  SUBCASE("1024 / 512 / 128 gives a 3x3 grid with stride 384") {
    const TileGrid g = tile(1024, 1024, 512, 128);
    CHECK(g.rows == 3);
    CHECK(g.cols == 3);
    CHECK(g.size() == 9);
    CHECK(tile_offsets(1024, 512, 128) == std::vector<int>{0, 384, 512});
  }
  SUBCASE("exact fit") { CHECK(tile(512, 512, 512, 128).size() == 1); }
  SUBCASE("512 x 600 without overlap") {
    const TileGrid g = tile(512, 600, 512, 0);
    REQUIRE(g.size() == 2);
    CHECK(g.tiles[1].window.col + g.tiles[1].window.width == 600);
  }
  SUBCASE("tile larger than the image gives one full window") {
    const TileGrid g = tile(40, 50, 64, 16);
    REQUIRE(g.size() == 1);
    CHECK(g.tiles[0].window == Window{0, 0, 40, 50});
  }
  SUBCASE("overlap must be below the tile size") { CHECK_THROWS_AS(tile(64, 64, 16, 16), Error); }
}

TEST_CASE("tiling covers every pixel and matches brute-force enumeration") {
  for (int h = 1; h <= 30; h += 3)
    for (int w = 1; w <= 30; w += 4)
      for (int t = 2; t <= 12; t += 3)
        for (int ov = 0; ov < t; ov += 2) {
          const TileGrid g = tile(h, w, t, ov);
          const auto rows = enumerate_offsets(h, t, ov), cols = enumerate_offsets(w, t, ov);
          REQUIRE(g.size() == rows.size() * cols.size());
          std::vector<int> cover(static_cast<std::size_t>(h) * w, 0);
          for (std::size_t k = 0; k < g.size(); ++k) {
            const Window& win = g.tiles[k].window;
            CHECK(win.row == rows[k / cols.size()]);
            CHECK(win.col == cols[k % cols.size()]);
            for (int r = win.row; r < win.row + win.height; ++r)
              for (int c = win.col; c < win.col + win.width; ++c) ++cover[r * w + c];
          }
          for (int v : cover) REQUIRE(v >= 1);
          // interior neighbours overlap by exactly `overlap`
          for (std::size_t i = 0; i + 2 < rows.size(); ++i) CHECK(rows[i] + t - rows[i + 1] == ov);
        }
}

TEST_CASE("stitching raw tiles reproduces the raster") {
  std::mt19937_64 rng(3);
  const RasterImage img = testsupport::random_image(3, 37, 53, rng);
  const TileGrid g = tile(img, 16, 5);
  std::vector<Tensor3<float>> parts;
  for (const auto& t : g.tiles) parts.push_back(crop(img.pixels, t.window));
  const Tensor3<float> back = stitch_average(g, parts);
  REQUIRE(back.same_shape(img.pixels));
  // averaging identical covering values is exact in float
  CHECK(back == img.pixels);
}

TEST_CASE("generate_toy is deterministic per seed") {
  ToyConfig cfg;
  cfg.count = 2;
  cfg.class_count = 6;
  const auto a = generate_toy(11, cfg), b = generate_toy(11, cfg), c = generate_toy(12, cfg);
  CHECK(a[0].first.pixels == b[0].first.pixels);
  CHECK(a[1].second == b[1].second);
  CHECK_FALSE(a[0].first.pixels == c[0].first.pixels);
}

TEST_CASE("toy invariants") {
  for (int n : {2, 6}) {
    ToyConfig cfg;
    cfg.class_count = n;
    cfg.height = cfg.width = 128;
    cfg.count = 5;
    const auto set = generate_toy(21, cfg);
    for (const auto& [img, lab] : set) {
      CHECK_NOTHROW(validate(lab));
      for (float v : img.pixels.data) REQUIRE((std::isfinite(v) && v >= 0.0F && v <= 1.0F));
      std::vector<long long> counts(n, 0);
      for (int v : lab.labels) ++counts[v];
      for (int k = 0; k < n; ++k) CHECK(counts[k] >= static_cast<long long>(lab.labels.size()) / 100);
      if (n == 2) {
        const double frac = static_cast<double>(counts[1]) / static_cast<double>(lab.labels.size());
        CHECK(std::abs(frac - cfg.density) <= 0.1 * cfg.density);
      }
    }
  }
}

TEST_CASE("domain-shift variant moves every channel mean by at least the configured shift") {
  ToyConfig cfg;
  cfg.count = 4;
  ToyConfig shifted = cfg;
  shifted.domain_shift = true;
  const auto src = generate_toy(31, cfg), dst = generate_toy(31, shifted);
  for (std::size_t i = 0; i < src.size(); ++i) {
    CHECK(src[i].second == dst[i].second);
    for (int c = 0; c < src[i].first.channels(); ++c) {
      double a = 0, b = 0;
      for (float v : src[i].first.pixels.channel(c)) a += v;
      for (float v : dst[i].first.pixels.channel(c)) b += v;
      const double plane = static_cast<double>(src[i].first.pixels.plane());
      CHECK(std::abs(a / plane - b / plane) >= cfg.shift);
    }
  }
}

TEST_CASE("toy config file round trip") {
  const auto dir = testsupport::scratch_dir("toy_config");
  ToyConfig cfg;
  cfg.class_count = 6;
  cfg.density = 0.3;
  cfg.domain_shift = true;
  save_toy_config(dir / "toy.json", cfg);
  const ToyConfig back = load_toy_config(dir / "toy.json");
  CHECK(back.class_count == 6);
  CHECK(back.density == 0.3);
  CHECK(back.domain_shift);
}

TEST_CASE("resampling") {
  std::mt19937_64 rng(4);
  const RasterImage img = testsupport::random_image(2, 8, 8, rng);
  CHECK(resample_bilinear(img, 8, 8).pixels == img.pixels);
  const RasterImage half = resample_bilinear(img, 4, 4);
  // pixel-center alignment: output (0,0) averages the top-left 2x2 block
  const float expect =
      (img.pixels.at(0, 0, 0) + img.pixels.at(0, 0, 1) + img.pixels.at(0, 1, 0) + img.pixels.at(0, 1, 1)) / 4.0F;
  CHECK(half.pixels.at(0, 0, 0) == doctest::Approx(expect));
  const LabelMask lab = testsupport::random_labels(6, 6, 3, rng);
  CHECK(resample_nearest(lab, 6, 6) == lab);
}
