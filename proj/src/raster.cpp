#include "clickseg/raster.hpp"

#include <png.h>
#include <tiffio.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <random>

#include <json.hpp>

#include "clickseg/error.hpp"

namespace clickseg {

namespace fs = std::filesystem;

LabelMask crop(const LabelMask& mask, const Window& window) {
  LabelMask out(window.height, window.width, mask.class_count);
  for (int r = 0; r < window.height; ++r)
    for (int c = 0; c < window.width; ++c) out.at(r, c) = mask.at(window.row + r, window.col + c);
  return out;
}

RasterImage crop(const RasterImage& image, const Window& window) {
  return {crop(image.pixels, window), image.resolution_tag};
}

void validate(const LabelMask& mask) {
  if (mask.labels.size() != static_cast<std::size_t>(mask.height) * mask.width)
    throw Error(ErrorCode::validation, "label mask size does not match its shape");
  for (int v : mask.labels) {
    if (v < 0 || v > mask.class_count)
      throw Error(ErrorCode::validation, "label value " + std::to_string(v) + " out of range for " +
                                             std::to_string(mask.class_count) + " classes");
  }
}

// ---------------------------------------------------------------------------

std::vector<int> tile_offsets(int extent, int tile_size, int overlap) {
  if (tile_size <= overlap || overlap < 0)
    throw Error(ErrorCode::invalid_argument, "tile_size must exceed overlap >= 0");
  if (extent <= tile_size) return {0};
  const int stride = tile_size - overlap;
  std::vector<int> offsets;
  for (int pos = 0;; pos += stride) {
    offsets.push_back(std::min(pos, extent - tile_size));
    if (pos + tile_size >= extent) break;
  }
  return offsets;
}

TileGrid tile(int height, int width, int tile_size, int overlap) {
  if (height < 1 || width < 1) throw Error(ErrorCode::invalid_argument, "tile: empty image");
  TileGrid grid;
  grid.tile_size = tile_size;
  grid.overlap = overlap;
  grid.image_height = height;
  grid.image_width = width;
  const auto rows = tile_offsets(height, tile_size, overlap);
  const auto cols = tile_offsets(width, tile_size, overlap);
  grid.rows = static_cast<int>(rows.size());
  grid.cols = static_cast<int>(cols.size());
  for (int i = 0; i < grid.rows; ++i)
    for (int j = 0; j < grid.cols; ++j)
      grid.tiles.push_back({i, j, {rows[i], cols[j], std::min(tile_size, height), std::min(tile_size, width)}});
  return grid;
}

TileGrid tile(const RasterImage& image, int tile_size, int overlap) {
  return tile(image.height(), image.width(), tile_size, overlap);
}

Tensor3<float> stitch_average(const TileGrid& grid, const std::vector<Tensor3<float>>& per_tile) {
  if (per_tile.size() != grid.tiles.size())
    throw Error(ErrorCode::invalid_argument, "stitch: tile count mismatch");
  const int channels = per_tile.empty() ? 0 : per_tile.front().channels;
  Tensor3<double> sum(channels, grid.image_height, grid.image_width);
  std::vector<int> hits(sum.plane(), 0);
  for (std::size_t t = 0; t < per_tile.size(); ++t) {
    const Window& w = grid.tiles[t].window;
    const auto& patch = per_tile[t];
    for (int r = 0; r < w.height; ++r)
      for (int c = 0; c < w.width; ++c) {
        ++hits[static_cast<std::size_t>(w.row + r) * grid.image_width + w.col + c];
        for (int k = 0; k < channels; ++k) sum.at(k, w.row + r, w.col + c) += patch.at(k, r, c);
      }
  }
  // Double accumulation keeps the average of identical values exact.
  Tensor3<float> out(channels, grid.image_height, grid.image_width);
  for (std::size_t j = 0; j < out.data.size(); ++j)
    out.data[j] = static_cast<float>(sum.data[j] / hits[j % out.plane()]);
  return out;
}

// ---------------------------------------------------------------------------
// PNG / TIFF

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngData {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;  // interleaved
};

PngData read_png(const fs::path& path, bool expand_palette) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw Error(ErrorCode::io, "cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::io, "unreadable PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE && expand_palette) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
  if (color == PNG_COLOR_TYPE_PALETTE && !expand_palette) png_set_packing(png);
  png_read_update_info(png, info);

  PngData out;
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> buffer(rowbytes * out.height);
  std::vector<png_bytep> rows(out.height);
  for (int r = 0; r < out.height; ++r) rows[r] = buffer.data() + r * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
  out.samples.resize(n);
  if (out.bit_depth == 16) {
    for (int r = 0; r < out.height; ++r) {
      const auto* src = reinterpret_cast<const std::uint16_t*>(rows[r]);
      std::copy(src, src + static_cast<std::size_t>(out.width) * out.channels,
                out.samples.begin() + static_cast<std::ptrdiff_t>(r) * out.width * out.channels);
    }
  } else {
    for (int r = 0; r < out.height; ++r)
      for (int i = 0; i < out.width * out.channels; ++i)
        out.samples[static_cast<std::size_t>(r) * out.width * out.channels + i] = rows[r][i];
  }
  return out;
}

void write_png(const fs::path& path, int width, int height, int channels, const std::vector<std::uint8_t>& interleaved) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error(ErrorCode::io, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::io, "PNG encoding failed for " + path.string());
  }
  png_init_io(png, file.get());
  const int color = channels == 1   ? PNG_COLOR_TYPE_GRAY
                    : channels == 2 ? PNG_COLOR_TYPE_GRAY_ALPHA
                    : channels == 3 ? PNG_COLOR_TYPE_RGB
                                    : PNG_COLOR_TYPE_RGB_ALPHA;
  png_set_IHDR(png, info, width, height, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r)
    png_write_row(png, const_cast<png_bytep>(interleaved.data() + static_cast<std::size_t>(r) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_tiff(const fs::path& path, int width, int height, int channels,
                const std::vector<std::uint8_t>& interleaved) {
  std::unique_ptr<TIFF, void (*)(TIFF*)> tif(TIFFOpen(path.c_str(), "w"), [](TIFF* t) {
    if (t) TIFFClose(t);
  });
  if (!tif) throw Error(ErrorCode::io, "cannot write " + path.string());
  TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, width);
  TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, height);
  TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, channels);
  TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, 8);
  TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
  TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, channels >= 3 ? PHOTOMETRIC_RGB : PHOTOMETRIC_MINISBLACK);
  if (channels == 2 || channels == 4) {
    const std::uint16_t extra = EXTRASAMPLE_UNASSALPHA;
    TIFFSetField(tif.get(), TIFFTAG_EXTRASAMPLES, 1, &extra);
  }
  TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, height);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int r = 0; r < height; ++r) {
    std::vector<std::uint8_t> line(interleaved.begin() + r * stride, interleaved.begin() + (r + 1) * stride);
    if (TIFFWriteScanline(tif.get(), line.data(), r) < 0) throw Error(ErrorCode::io, "cannot write " + path.string());
  }
}

RasterImage read_tiff(const fs::path& path) {
  TIFFSetWarningHandler(nullptr);
  std::unique_ptr<TIFF, void (*)(TIFF*)> tif(TIFFOpen(path.c_str(), "r"), [](TIFF* t) {
    if (t) TIFFClose(t);
  });
  if (!tif) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::uint32_t width = 0, height = 0;
  std::uint16_t spp = 1, bps = 8, format = SAMPLEFORMAT_UINT, planar = PLANARCONFIG_CONTIG;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &width);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &height);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &format);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);
  if (planar != PLANARCONFIG_CONTIG || TIFFIsTiled(tif.get()))
    throw Error(ErrorCode::io, "unsupported TIFF layout in " + path.string());
  if (!((format == SAMPLEFORMAT_UINT && (bps == 8 || bps == 16)) || (format == SAMPLEFORMAT_IEEEFP && bps == 32)))
    throw Error(ErrorCode::io, "unsupported TIFF sample format in " + path.string());

  RasterImage image;
  image.pixels = Tensor3<float>(spp, static_cast<int>(height), static_cast<int>(width));
  std::vector<std::uint8_t> line(TIFFScanlineSize(tif.get()));
  for (std::uint32_t r = 0; r < height; ++r) {
    if (TIFFReadScanline(tif.get(), line.data(), r) < 0)
      throw Error(ErrorCode::io, "unreadable TIFF scanline in " + path.string());
    for (std::uint32_t c = 0; c < width; ++c)
      for (int k = 0; k < spp; ++k) {
        const std::size_t i = static_cast<std::size_t>(c) * spp + k;
        float v = 0.0F;
        if (bps == 8)
          v = line[i] / 255.0F;
        else if (bps == 16)
          v = reinterpret_cast<const std::uint16_t*>(line.data())[i] / 65535.0F;
        else
          v = reinterpret_cast<const float*>(line.data())[i];
        if (!std::isfinite(v) || v < 0.0F || v > 1.0F)
          throw Error(ErrorCode::validation, "floating-point TIFF sample outside [0,1] in " + path.string());
        image.pixels.at(k, static_cast<int>(r), static_cast<int>(c)) = v;
      }
  }
  return image;
}

std::string lower_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext;
}

}  // namespace

LabelMask load_labels(const fs::path& path, int class_count) {
  if (class_count < 1) throw Error(ErrorCode::invalid_argument, "class_count must be positive");
  const PngData png = read_png(path, false);
  if (png.channels != 1) throw Error(ErrorCode::validation, "label raster must be single-channel: " + path.string());
  LabelMask mask(png.height, png.width, class_count);
  for (std::size_t i = 0; i < png.samples.size(); ++i) {
    const int v = png.samples[i];
    if (v == kIgnoreFileValue) {
      mask.labels[i] = class_count;
      continue;
    }
    if (v >= class_count)
      throw Error(ErrorCode::validation, "label value " + std::to_string(v) + " out of range for " +
                                             std::to_string(class_count) + " classes in " + path.string());
    mask.labels[i] = v;
  }
  return mask;
}

LoadedRaster load_raster(const fs::path& path, int class_count) {
  if (!fs::exists(path)) throw Error(ErrorCode::io, "no such file " + path.string());
  LoadedRaster out;
  const std::string ext = lower_extension(path);
  if (ext == ".tif" || ext == ".tiff") {
    out.image = read_tiff(path);
  } else {
    const PngData png = read_png(path, true);
    const float scale = png.bit_depth == 16 ? 65535.0F : 255.0F;
    out.image.pixels = Tensor3<float>(png.channels, png.height, png.width);
    for (int r = 0; r < png.height; ++r)
      for (int c = 0; c < png.width; ++c)
        for (int k = 0; k < png.channels; ++k)
          out.image.pixels.at(k, r, c) =
              png.samples[(static_cast<std::size_t>(r) * png.width + c) * png.channels + k] / scale;
  }
  out.image.resolution_tag = path.filename().string();
  if (class_count > 0) {
    fs::path sidecar = path;
    sidecar.replace_extension(".labels.png");
    if (fs::exists(sidecar)) {
      out.labels = load_labels(sidecar, class_count);
      if (out.labels->height != out.image.height() || out.labels->width != out.image.width())
        throw Error(ErrorCode::validation, "label raster size differs from image " + path.string());
    }
  }
  return out;
}

void save_raster(const fs::path& path, const RasterImage& image) {
  const auto& px = image.pixels;
  if (px.channels < 1 || px.channels > 4) throw Error(ErrorCode::invalid_argument, "PNG supports 1-4 channels");
  std::vector<std::uint8_t> buf(px.size());
  for (int r = 0; r < px.height; ++r)
    for (int c = 0; c < px.width; ++c)
      for (int k = 0; k < px.channels; ++k) {
        const float v = std::clamp(px.at(k, r, c), 0.0F, 1.0F);
        buf[(static_cast<std::size_t>(r) * px.width + c) * px.channels + k] =
            static_cast<std::uint8_t>(std::lround(v * 255.0F));
      }
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (ext == ".tif" || ext == ".tiff")
    write_tiff(path, px.width, px.height, px.channels, buf);
  else
    write_png(path, px.width, px.height, px.channels, buf);
}

void save_labels(const fs::path& path, const LabelMask& mask) {
  validate(mask);
  if (mask.class_count >= kIgnoreFileValue)
    throw Error(ErrorCode::invalid_argument, "too many classes for an 8-bit raster");
  std::vector<std::uint8_t> buf(mask.labels.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<std::uint8_t>(mask.ignored(i) ? kIgnoreFileValue : mask.labels[i]);
  write_png(path, mask.width, mask.height, 1, buf);
}

RasterImage resample_bilinear(const RasterImage& image, int height, int width) {
  const auto& src = image.pixels;
  RasterImage out{Tensor3<float>(src.channels, height, width), image.resolution_tag};
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  for (int r = 0; r < height; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(y);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double fy = y - y0;
    for (int c = 0; c < width; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(x);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double fx = x - x0;
      for (int k = 0; k < src.channels; ++k) {
        const double top = src.at(k, y0, x0) * (1 - fx) + src.at(k, y0, x1) * fx;
        const double bottom = src.at(k, y1, x0) * (1 - fx) + src.at(k, y1, x1) * fx;
        out.pixels.at(k, r, c) = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }
  return out;
}

LabelMask resample_nearest(const LabelMask& mask, int height, int width) {
  LabelMask out(height, width, mask.class_count);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const int sr = std::min(mask.height - 1, static_cast<int>((r + 0.5) * mask.height / height));
      const int sc = std::min(mask.width - 1, static_cast<int>((c + 0.5) * mask.width / width));
      out.at(r, c) = mask.at(sr, sc);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

using Color = std::array<double, 3>;

struct Palette {
  Color ground{0.36, 0.46, 0.30};
  Color paved{0.54, 0.53, 0.55};
  Color roof{0.64, 0.33, 0.27};
  Color grey_roof{0.56, 0.55, 0.57};
  Color shadow_scale{0.55, 0.55, 0.60};
  Color low_vegetation{0.47, 0.62, 0.33};
  Color tree{0.20, 0.37, 0.18};
  Color car{0.22, 0.30, 0.68};
  Color clutter{0.52, 0.41, 0.26};
  double texture = 1.0;  // multiplies the noise level
};

Palette shifted(Palette p, double shift) {
  // Hue rotation towards magenta plus a brightness offset; every palette entry
  // moves by at least 1.5 * shift per channel so the image means move by >= shift.
  const double d = 1.5 * shift;
  const Color delta{+d, -d, +d};
  for (Color* c : {&p.ground, &p.paved, &p.roof, &p.grey_roof, &p.low_vegetation, &p.tree, &p.car, &p.clutter})
    for (int k = 0; k < 3; ++k) (*c)[k] = std::clamp((*c)[k] + delta[k], 0.05, 0.95);
  p.texture = 2.0;
  return p;
}

struct Canvas {
  int h, w;
  std::vector<Color> color;
  std::vector<int> label;
  std::vector<std::uint8_t> shadow;
  Canvas(int hh, int ww) : h(hh), w(ww), color(static_cast<std::size_t>(hh) * ww), label(color.size(), 0), shadow(color.size(), 0) {}
  std::size_t idx(int r, int c) const { return static_cast<std::size_t>(r) * w + c; }
  bool inside(int r, int c) const { return r >= 0 && r < h && c >= 0 && c < w; }
};

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Low-frequency multiplicative field in roughly [1-a, 1+a].
std::vector<double> smooth_field(std::mt19937_64& rng, int h, int w, double amplitude) {
  const int gh = h / 16 + 2, gw = w / 16 + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
  for (auto& g : grid) g = uniform(rng, -amplitude, amplitude);
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double y = r / 16.0, x = c / 16.0;
      const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
      const double fy = y - y0, fx = x - x0;
      const auto g = [&](int a, int b) { return grid[static_cast<std::size_t>(a) * gw + b]; };
      const double v = g(y0, x0) * (1 - fx) * (1 - fy) + g(y0, x0 + 1) * fx * (1 - fy) +
                       g(y0 + 1, x0) * (1 - fx) * fy + g(y0 + 1, x0 + 1) * fx * fy;
      out[static_cast<std::size_t>(r) * w + c] = 1.0 + v;
    }
  return out;
}

void fill_rect(Canvas& cv, int r0, int c0, int hh, int ww, const Color& col, int label) {
  for (int r = r0; r < r0 + hh; ++r)
    for (int c = c0; c < c0 + ww; ++c)
      if (cv.inside(r, c)) {
        cv.color[cv.idx(r, c)] = col;
        cv.label[cv.idx(r, c)] = label;
        cv.shadow[cv.idx(r, c)] = 0;
      }
}

void fill_ellipse(Canvas& cv, double cr, double cc, double rr, double rc, const Color& col, int label) {
  for (int r = static_cast<int>(cr - rr) - 1; r <= static_cast<int>(cr + rr) + 1; ++r)
    for (int c = static_cast<int>(cc - rc) - 1; c <= static_cast<int>(cc + rc) + 1; ++c) {
      if (!cv.inside(r, c)) continue;
      const double y = (r - cr) / rr, x = (c - cc) / rc;
      if (x * x + y * y <= 1.0) {
        cv.color[cv.idx(r, c)] = col;
        cv.label[cv.idx(r, c)] = label;
        cv.shadow[cv.idx(r, c)] = 0;
      }
    }
}

// Buildings cast a short shadow towards the bottom-right onto non-building pixels.
void cast_shadow(Canvas& cv, int r0, int c0, int hh, int ww, int building_label, int length) {
  for (int r = r0 + 1; r < r0 + hh + length; ++r)
    for (int c = c0 + 1; c < c0 + ww + length; ++c) {
      if (!cv.inside(r, c)) continue;
      const bool in_building = r < r0 + hh && c < c0 + ww;
      if (in_building || cv.label[cv.idx(r, c)] == building_label) continue;
      cv.shadow[cv.idx(r, c)] = 1;
    }
}

bool overlaps_label(const Canvas& cv, int r0, int c0, int hh, int ww, int label, int margin) {
  for (int r = r0 - margin; r < r0 + hh + margin; ++r)
    for (int c = c0 - margin; c < c0 + ww + margin; ++c)
      if (cv.inside(r, c) && cv.label[cv.idx(r, c)] == label) return true;
  return false;
}

double class_fraction(const Canvas& cv, int label) {
  return static_cast<double>(std::count(cv.label.begin(), cv.label.end(), label)) / cv.label.size();
}

void place_buildings(Canvas& cv, std::mt19937_64& rng, const ToyConfig& cfg, const Palette& pal, int building_label,
                     double target) {
  for (int attempt = 0; attempt < 4000 && class_fraction(cv, building_label) < target; ++attempt) {
    const int hh = uniform_int(rng, 8, 22), ww = uniform_int(rng, 8, 22);
    const int r0 = uniform_int(rng, -hh / 2, cv.h - hh / 2), c0 = uniform_int(rng, -ww / 2, cv.w - ww / 2);
    if (overlaps_label(cv, r0, c0, hh, ww, building_label, 3)) continue;
    const bool grey = uniform(rng, 0, 1) < cfg.ambiguity;
    fill_rect(cv, r0, c0, hh, ww, grey ? pal.grey_roof : pal.roof, building_label);
    cast_shadow(cv, r0, c0, hh, ww, building_label, 2);
  }
}

void place_paved(Canvas& cv, std::mt19937_64& rng, const ToyConfig& cfg, const Palette& pal, int building_label) {
  // Roads.
  const int roads = uniform_int(rng, 1, 2 + cv.h / 96);
  for (int i = 0; i < roads; ++i) {
    const int width = uniform_int(rng, 4, 7);
    if (uniform(rng, 0, 1) < 0.5)
      fill_rect(cv, uniform_int(rng, 0, cv.h - width), 0, width, cv.w, pal.paved, 0);
    else
      fill_rect(cv, 0, uniform_int(rng, 0, cv.w - width), cv.h, width, pal.paved, 0);
  }
  // Paved lots sharing the grey roof appearance.
  const double area = static_cast<double>(cv.h) * cv.w;
  const int lots = static_cast<int>(std::round(cfg.ambiguity * area / 1400.0 * uniform(rng, 0.6, 1.4)));
  for (int i = 0; i < lots; ++i) {
    const int hh = uniform_int(rng, 9, 22), ww = uniform_int(rng, 9, 22);
    const int r0 = uniform_int(rng, -hh / 2, cv.h - hh / 2), c0 = uniform_int(rng, -ww / 2, cv.w - ww / 2);
    if (overlaps_label(cv, r0, c0, hh, ww, building_label, 2)) continue;
    fill_rect(cv, r0, c0, hh, ww, pal.paved, 0);
  }
  (void)building_label;
}

Canvas draw_binary(std::mt19937_64& rng, const ToyConfig& cfg, const Palette& pal) {
  Canvas cv(cfg.height, cfg.width);
  std::fill(cv.color.begin(), cv.color.end(), pal.ground);
  place_paved(cv, rng, cfg, pal, 1);
  const double target = cfg.sparse ? cfg.density : std::max(cfg.density, 0.01);
  place_buildings(cv, rng, cfg, pal, 1, target);
  return cv;
}

Canvas draw_landcover(std::mt19937_64& rng, const ToyConfig& cfg, const Palette& pal) {
  // 0 impervious, 1 building, 2 low vegetation, 3 tree, 4 car, 5 clutter
  Canvas cv(cfg.height, cfg.width);
  std::fill(cv.color.begin(), cv.color.end(), pal.paved);
  const double minimum = cfg.sparse ? 0.0 : 0.012;
  for (int attempt = 0; attempt < 400 && (class_fraction(cv, 2) < std::max(0.18, minimum)); ++attempt)
    fill_ellipse(cv, uniform(rng, 0, cv.h), uniform(rng, 0, cv.w), uniform(rng, 6, 16), uniform(rng, 6, 16),
                 pal.low_vegetation, 2);
  place_buildings(cv, rng, cfg, pal, 1, std::max(cfg.density, minimum));
  for (int attempt = 0; attempt < 400 && class_fraction(cv, 3) < std::max(0.08, minimum); ++attempt) {
    const double rad = uniform(rng, 3, 7);
    fill_ellipse(cv, uniform(rng, 0, cv.h), uniform(rng, 0, cv.w), rad, rad, pal.tree, 3);
  }
  for (int attempt = 0; attempt < 4000 && class_fraction(cv, 4) < std::max(0.015, minimum); ++attempt) {
    const bool vertical = uniform(rng, 0, 1) < 0.5;
    const int hh = vertical ? 6 : 3, ww = vertical ? 3 : 6;
    const int r0 = uniform_int(rng, 0, cv.h - hh), c0 = uniform_int(rng, 0, cv.w - ww);
    if (overlaps_label(cv, r0, c0, hh, ww, 1, 1) || overlaps_label(cv, r0, c0, hh, ww, 3, 0)) continue;
    fill_rect(cv, r0, c0, hh, ww, pal.car, 4);
  }
  for (int attempt = 0; attempt < 400 && class_fraction(cv, 5) < std::max(0.03, minimum); ++attempt)
    fill_ellipse(cv, uniform(rng, 0, cv.h), uniform(rng, 0, cv.w), uniform(rng, 2, 6), uniform(rng, 2, 6),
                 pal.clutter, 5);
  return cv;
}

std::pair<RasterImage, LabelMask> render(const Canvas& cv, std::mt19937_64& rng, const ToyConfig& cfg,
                                         const Palette& pal) {
  RasterImage image{Tensor3<float>(3, cv.h, cv.w), cfg.domain_shift ? "toy-shifted" : "toy-source"};
  LabelMask mask(cv.h, cv.w, cfg.class_count);
  const auto field = smooth_field(rng, cv.h, cv.w, 0.06 * pal.texture);
  std::normal_distribution<double> noise(0.0, cfg.noise * pal.texture);
  for (int r = 0; r < cv.h; ++r)
    for (int c = 0; c < cv.w; ++c) {
      const std::size_t i = cv.idx(r, c);
      mask.labels[i] = cv.label[i];
      for (int k = 0; k < 3; ++k) {
        double v = cv.color[i][k] * field[i];
        if (cv.shadow[i]) v *= pal.shadow_scale[k];
        v += noise(rng);
        // Quantized to 8-bit levels so PNG round-trips are exact.
        image.pixels.at(k, r, c) = static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0F;
      }
    }
  return {std::move(image), std::move(mask)};
}

}  // namespace

std::vector<std::pair<RasterImage, LabelMask>> generate_toy(std::uint64_t seed, const ToyConfig& cfg) {
  if (cfg.class_count != 2 && cfg.class_count != 6)
    throw Error(ErrorCode::invalid_argument, "toy generator supports 2 or 6 classes");
  if (cfg.height < 8 || cfg.width < 8) throw Error(ErrorCode::invalid_argument, "toy images must be at least 8x8");
  const Palette base;
  const Palette pal = cfg.domain_shift ? shifted(base, cfg.shift) : base;
  std::vector<std::pair<RasterImage, LabelMask>> out;
  out.reserve(cfg.count);
  for (int i = 0; i < cfg.count; ++i) {
    // Geometry and noise streams are split so the shifted variant shares geometry.
    std::mt19937_64 geometry(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i) * 2 + 1);
    std::mt19937_64 texture(seed * 0xBF58476D1CE4E5B9ULL + static_cast<std::uint64_t>(i) * 2 + 2);
    const Canvas cv = cfg.class_count == 2 ? draw_binary(geometry, cfg, pal) : draw_landcover(geometry, cfg, pal);
    out.push_back(render(cv, texture, cfg, pal));
  }
  return out;
}

ToyConfig load_toy_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open toy config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::validation, "malformed toy config: " + std::string(e.what()));
  }
  ToyConfig cfg;
  cfg.height = j.value("height", cfg.height);
  cfg.width = j.value("width", cfg.width);
  cfg.class_count = j.value("class_count", cfg.class_count);
  cfg.count = j.value("count", cfg.count);
  cfg.density = j.value("density", cfg.density);
  cfg.noise = j.value("noise", cfg.noise);
  cfg.ambiguity = j.value("ambiguity", cfg.ambiguity);
  cfg.domain_shift = j.value("domain_shift", cfg.domain_shift);
  cfg.shift = j.value("shift", cfg.shift);
  cfg.sparse = j.value("sparse", cfg.sparse);
  return cfg;
}

void save_toy_config(const fs::path& path, const ToyConfig& cfg) {
  nlohmann::json j{{"height", cfg.height},     {"width", cfg.width},         {"class_count", cfg.class_count},
                   {"count", cfg.count},       {"density", cfg.density},     {"noise", cfg.noise},
                   {"ambiguity", cfg.ambiguity}, {"domain_shift", cfg.domain_shift}, {"shift", cfg.shift},
                   {"sparse", cfg.sparse}};
  std::ofstream(path) << j.dump(2) << '\n';
}

}  // namespace clickseg
