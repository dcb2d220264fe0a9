#pragma once

// Rasters, synthetic defocused scenes, a JPEG-like codec and patch grids.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "daqe/error.hpp"

namespace daqe::imaging {

/// Planar (C, H, W) float image with values in [0, 1].
struct ImageF32 {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> data;

  ImageF32() = default;
  ImageF32(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f);

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  std::size_t pixels() const { return height * width; }
  void clamp01();
  /// Luma (BT.601 weights) for 3-channel images, the channel itself otherwise.
  std::vector<float> luma() const;

  bool operator==(const ImageF32&) const = default;
};

/// Per-pixel defocus on the 8-bit scale [0, 255]; larger is farther from the
/// focal plane.
struct DefocusMap {
  std::size_t height = 0, width = 0;
  std::vector<float> data;

  DefocusMap() = default;
  DefocusMap(std::size_t h, std::size_t w, float fill = 0.0f);
  float& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

  bool operator==(const DefocusMap&) const = default;
};

// ------------------------------------------------------------------ raster I/O

/// PFR: "PFR1", u32 H, u32 W, u32 C, then H*W*C little-endian f32 in
/// row-major (H, W, C) order.
void save_pfr(const std::filesystem::path& path, const ImageF32& img);
void save_pfr(const std::filesystem::path& path, const DefocusMap& map);
ImageF32 load_pfr_image(const std::filesystem::path& path);
DefocusMap load_pfr_map(const std::filesystem::path& path);

/// Binary PGM (P5) for one channel, PPM (P6) for three; 8-bit.
void save_pnm(const std::filesystem::path& path, const ImageF32& img);
ImageF32 load_pnm(const std::filesystem::path& path);
/// Defocus maps as P5 with values rounded to the nearest integer.
void save_pgm(const std::filesystem::path& path, const DefocusMap& map);
DefocusMap load_pgm_map(const std::filesystem::path& path);

/// Dispatch on extension: .pfr, .pgm/.ppm.
void save_raster(const std::filesystem::path& path, const ImageF32& img);
ImageF32 load_raster(const std::filesystem::path& path);

// ------------------------------------------------------------------ synthesis

enum class Layout { TwoPlane, Regions, Gradient, Mixed };
Layout parse_layout(const std::string& name);
std::string layout_name(Layout layout);

struct SceneOptions {
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t patch_size = 32;
  Layout layout = Layout::Mixed;
};

struct Scene {
  ImageF32 sharp;
  DefocusMap defocus;
};

/// Procedural textured scene plus its ground-truth defocus map. Deterministic
/// in seed. Throws if either extent is below 2 * patch_size.
Scene synth_scene(std::uint64_t seed, const SceneOptions& opts);

/// Spatially varying Gaussian blur with sigma(p) = k * map(p) / 255, kernel
/// truncated at 3 sigma, weights renormalized over in-bounds taps.
ImageF32 apply_defocus_blur(const ImageF32& sharp, const DefocusMap& map, float k = 4.0f);

/// Same family with a uniform disc kernel of radius k * map / 255. Used for
/// the unlabeled "real" domain, which must differ from the labeled one.
ImageF32 apply_disc_blur(const ImageF32& sharp, const DefocusMap& map, float k = 4.0f);

// ---------------------------------------------------------------------- codec

struct CodecConfig {
  int quality = 50;
  bool chroma_subsampling = false;

  /// Quality-scaled 8x8 tables (luma, chroma) in natural order.
  std::vector<int> luma_table() const;
  std::vector<int> chroma_table() const;
};

struct CodecResult {
  ImageF32 image;
  double bits = 0.0;  // entropy estimate of the quantized coefficients
  double bpp = 0.0;
};

/// RGB -> YCbCr, 8x8 DCT-II, quantize, dequantize, inverse DCT, back to RGB at
/// 8-bit precision. Extents are padded to multiples of 8 by edge replication.
CodecResult compress_jpeg_like(const ImageF32& img, const CodecConfig& cfg);

/// IJG-style quality scaling of a base table.
std::vector<int> scale_table(const std::vector<int>& base, int quality);

// -------------------------------------------------------------------- patches

struct PatchRecord {
  ImageF32 pixels;
  std::size_t grid_row = 0, grid_col = 0;
  float mean_defocus = 0.0f;
  int cluster = 0;  // 1-based once assigned
};

/// Non-overlapping S x S patches in row-major grid order. Extents that are not
/// multiples of S are reflect-padded first.
std::vector<PatchRecord> patchify(const ImageF32& img, const DefocusMap* map, std::size_t S);
ImageF32 assemble(const std::vector<PatchRecord>& patches, std::size_t height, std::size_t width);

/// Reflect-pads to multiples of S (returns the input unchanged if aligned).
ImageF32 reflect_pad(const ImageF32& img, std::size_t S);
DefocusMap reflect_pad(const DefocusMap& map, std::size_t S);

float patch_defocus_value(const std::vector<float>& map_patch);

/// Rectangular crop.
ImageF32 crop(const ImageF32& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);
DefocusMap crop(const DefocusMap& map, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);

// --------------------------------------------------------------------- corpus

/// `<root>/<sub>/NNNN.<ext>` with a 1-based, zero-padded index.
std::filesystem::path corpus_file(const std::filesystem::path& root, const std::string& sub,
                                  std::size_t index, const std::string& ext);
/// Sorted indices of files present in `<root>/<sub>`.
std::vector<std::size_t> corpus_indices(const std::filesystem::path& root, const std::string& sub);

}  // namespace daqe::imaging
