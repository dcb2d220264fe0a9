#include "daqe/imaging.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <unordered_map>

namespace daqe::imaging {

namespace fs = std::filesystem;

ImageF32::ImageF32(std::size_t h, std::size_t w, std::size_t c, float fill)
    : height(h), width(w), channels(c), data(h * w * c, fill) {}

void ImageF32::clamp01() {
  for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
}

std::vector<float> ImageF32::luma() const {
  if (channels == 1) return data;
  std::vector<float> y(pixels());
  const std::size_t n = pixels();
  for (std::size_t i = 0; i < n; ++i)
    y[i] = 0.299f * data[i] + 0.587f * data[n + i] + 0.114f * data[2 * n + i];
  return y;
}

DefocusMap::DefocusMap(std::size_t h, std::size_t w, float fill) : height(h), width(w), data(h * w, fill) {}

// ------------------------------------------------------------------ raster I/O

namespace {

constexpr std::uint64_t kMaxRasterElems = std::uint64_t{1} << 31;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const fs::path& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path.string() + ": truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return is;
}

// Writes HWC-ordered floats from a planar buffer.
void save_pfr_planar(const fs::path& path, std::size_t h, std::size_t w, std::size_t c,
                     const std::vector<float>& planar) {
  auto os = open_out(path);
  os.write("PFR1", 4);
  write_u32(os, static_cast<std::uint32_t>(h));
  write_u32(os, static_cast<std::uint32_t>(w));
  write_u32(os, static_cast<std::uint32_t>(c));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) write_f32(os, planar[(ch * h + y) * w + x]);
  if (!os) throw FormatError("write failed for " + path.string());
}

struct Planar {
  std::size_t h, w, c;
  std::vector<float> data;
};

Planar load_pfr_planar(const fs::path& path) {
  auto is = open_in(path);
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(magic, "PFR1", 4) != 0) throw FormatError(path.string() + ": bad magic");
  const std::uint64_t h = read_u32(is, path), w = read_u32(is, path), c = read_u32(is, path);
  if (h == 0 || w == 0 || c == 0) throw FormatError(path.string() + ": zero extent");
  if (h * w > kMaxRasterElems || h * w * c > kMaxRasterElems)
    throw FormatError(path.string() + ": dimensions overflow");
  Planar p{h, w, c, std::vector<float>(h * w * c)};
  std::vector<unsigned char> raw(p.data.size() * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError(path.string() + ": truncated pixel data");
  std::size_t k = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch, k += 4) {
        const std::uint32_t bits = static_cast<std::uint32_t>(raw[k]) |
                                   (static_cast<std::uint32_t>(raw[k + 1]) << 8) |
                                   (static_cast<std::uint32_t>(raw[k + 2]) << 16) |
                                   (static_cast<std::uint32_t>(raw[k + 3]) << 24);
        p.data[(ch * h + y) * w + x] = std::bit_cast<float>(bits);
      }
  return p;
}

std::uint8_t to_u8(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

void write_pnm(const fs::path& path, std::size_t h, std::size_t w, std::size_t c,
               const std::vector<std::uint8_t>& hwc) {
  auto os = open_out(path);
  os << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(hwc.data()), static_cast<std::streamsize>(hwc.size()));
  if (!os) throw FormatError("write failed for " + path.string());
}

struct Pnm {
  std::size_t h, w, c;
  std::vector<std::uint8_t> hwc;
};

Pnm read_pnm(const fs::path& path) {
  auto is = open_in(path);
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P6") throw FormatError(path.string() + ": bad magic");
  auto next_int = [&]() -> long {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      is >> std::ws;
    }
    long v = -1;
    if (!(is >> v)) throw FormatError(path.string() + ": truncated header");
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0) throw FormatError(path.string() + ": zero extent");
  if (maxval != 255) throw FormatError(path.string() + ": only 8-bit PNM is supported");
  is.get();  // single whitespace before the raster
  const std::size_t c = magic == "P5" ? 1 : 3;
  if (static_cast<std::uint64_t>(w) * static_cast<std::uint64_t>(h) * c > kMaxRasterElems)
    throw FormatError(path.string() + ": dimensions overflow");
  Pnm p{static_cast<std::size_t>(h), static_cast<std::size_t>(w), c, {}};
  p.hwc.resize(p.h * p.w * c);
  if (!is.read(reinterpret_cast<char*>(p.hwc.data()), static_cast<std::streamsize>(p.hwc.size())))
    throw FormatError(path.string() + ": truncated pixel data");
  return p;
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return e;
}

}  // namespace

void save_pfr(const fs::path& path, const ImageF32& img) {
  save_pfr_planar(path, img.height, img.width, img.channels, img.data);
}

void save_pfr(const fs::path& path, const DefocusMap& map) {
  save_pfr_planar(path, map.height, map.width, 1, map.data);
}

ImageF32 load_pfr_image(const fs::path& path) {
  auto p = load_pfr_planar(path);
  ImageF32 img;
  img.height = p.h;
  img.width = p.w;
  img.channels = p.c;
  img.data = std::move(p.data);
  return img;
}

DefocusMap load_pfr_map(const fs::path& path) {
  auto p = load_pfr_planar(path);
  if (p.c != 1) throw FormatError(path.string() + ": defocus map must have one channel");
  DefocusMap m;
  m.height = p.h;
  m.width = p.w;
  m.data = std::move(p.data);
  return m;
}

void save_pnm(const fs::path& path, const ImageF32& img) {
  if (img.channels != 1 && img.channels != 3)
    throw FormatError("PNM supports 1 or 3 channels, got " + std::to_string(img.channels));
  std::vector<std::uint8_t> hwc(img.data.size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        hwc[(y * img.width + x) * img.channels + c] = to_u8(img.at(c, y, x));
  write_pnm(path, img.height, img.width, img.channels, hwc);
}

ImageF32 load_pnm(const fs::path& path) {
  auto p = read_pnm(path);
  ImageF32 img(p.h, p.w, p.c);
  for (std::size_t y = 0; y < p.h; ++y)
    for (std::size_t x = 0; x < p.w; ++x)
      for (std::size_t c = 0; c < p.c; ++c)
        img.at(c, y, x) = static_cast<float>(p.hwc[(y * p.w + x) * p.c + c]) / 255.0f;
  return img;
}

void save_pgm(const fs::path& path, const DefocusMap& map) {
  std::vector<std::uint8_t> px(map.data.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map.data[i], 0.0f, 255.0f)));
  write_pnm(path, map.height, map.width, 1, px);
}

DefocusMap load_pgm_map(const fs::path& path) {
  auto p = read_pnm(path);
  if (p.c != 1) throw FormatError(path.string() + ": defocus map must be P5");
  DefocusMap m(p.h, p.w);
  for (std::size_t i = 0; i < p.hwc.size(); ++i) m.data[i] = static_cast<float>(p.hwc[i]);
  return m;
}

void save_raster(const fs::path& path, const ImageF32& img) {
  const auto ext = lower_ext(path);
  if (ext == ".pfr") return save_pfr(path, img);
  if (ext == ".ppm" || ext == ".pgm") return save_pnm(path, img);
  throw FormatError("unsupported raster extension: " + path.string());
}

ImageF32 load_raster(const fs::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".pfr") return load_pfr_image(path);
  if (ext == ".ppm" || ext == ".pgm") return load_pnm(path);
  throw FormatError("unsupported raster extension: " + path.string());
}

// ------------------------------------------------------------------ synthesis

Layout parse_layout(const std::string& name) {
  if (name == "two-plane") return Layout::TwoPlane;
  if (name == "regions") return Layout::Regions;
  if (name == "gradient") return Layout::Gradient;
  if (name == "mixed") return Layout::Mixed;
  throw ConfigError("unknown layout '" + name + "'");
}

std::string layout_name(Layout layout) {
  switch (layout) {
    case Layout::TwoPlane:
      return "two-plane";
    case Layout::Regions:
      return "regions";
    case Layout::Gradient:
      return "gradient";
    case Layout::Mixed:
      return "mixed";
  }
  return "mixed";
}

namespace {

enum class TextureKind { Checkers, Grating, Noise };

/// Zero-mean pattern in roughly [-1, 1].
struct Texture {
  TextureKind kind;
  double period = 6.0, freq = 0.2, theta = 0.0, phase = 0.0;
  double ox = 0.0, oy = 0.0;
  std::vector<std::vector<double>> octaves;  // value-noise lattices
  std::vector<std::size_t> cells;
  std::size_t lattice_w = 0;

  double operator()(double y, double x) const {
    constexpr double pi = std::numbers::pi;
    switch (kind) {
      case TextureKind::Checkers: {
        const double u = std::cos(theta) * x + std::sin(theta) * y + ox;
        const double v = -std::sin(theta) * x + std::cos(theta) * y + oy;
        const double s = std::sin(pi * u / period) * std::sin(pi * v / period);
        return s >= 0.0 ? 1.0 : -1.0;
      }
      case TextureKind::Grating:
        return std::sin(2.0 * pi * freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
      case TextureKind::Noise: {
        double s = 0.0, norm = 0.0, amp = 1.0;
        for (std::size_t o = 0; o < octaves.size(); ++o) {
          const double cell = static_cast<double>(cells[o]);
          const double fx = x / cell, fy = y / cell;
          const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
          const double tx = fx - x0, ty = fy - y0;
          const std::size_t lw = lattice_w * (std::size_t{1} << o) + 2;
          const auto& g = octaves[o];
          auto at = [&](std::size_t yy, std::size_t xx) { return g[yy * lw + xx]; };
          const double top = (1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1);
          const double bot = (1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1);
          s += amp * ((1 - ty) * top + ty * bot);
          norm += amp;
          amp *= 0.6;
        }
        return std::clamp(1.8 * s / norm, -1.0, 1.0);
      }
    }
    return 0.0;
  }
};

// Fine textures carry the high-frequency detail; coarse ones are large-scale
// structure that survives moderate blur.
Texture random_texture(std::mt19937_64& rng, std::size_t h, std::size_t w, bool fine) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Texture t;
  const double pick = u(rng);
  t.kind = pick < 0.33 ? TextureKind::Checkers : (pick < 0.66 ? TextureKind::Grating : TextureKind::Noise);
  t.period = fine ? 2.5 + 4.0 * u(rng) : 10.0 + 14.0 * u(rng);
  t.freq = fine ? 0.12 + 0.28 * u(rng) : 0.02 + 0.04 * u(rng);
  t.theta = std::numbers::pi * u(rng);
  t.phase = 2.0 * std::numbers::pi * u(rng);
  t.ox = 100.0 * u(rng);
  t.oy = 100.0 * u(rng);
  const std::size_t base_cell = fine ? 4 : 12;
  const std::size_t n_octaves = fine ? 3 : 2;
  t.lattice_w = std::max(h, w) / base_cell + 2;
  for (std::size_t o = 0; o < n_octaves; ++o) {
    const std::size_t cell = std::max<std::size_t>(1, base_cell >> o);
    const std::size_t lw = t.lattice_w * (std::size_t{1} << o) + 2;
    std::vector<double> g(lw * lw);
    for (auto& v : g) v = 2.0 * u(rng) - 1.0;
    t.octaves.push_back(std::move(g));
    t.cells.push_back(cell);
  }
  return t;
}

struct RegionStyle {
  Texture texture, structure;
  std::array<double, 3> mean{};
  double amplitude = 0.3, structure_amplitude = 0.2;
  std::array<double, 3> tint{};

  double value(std::size_t c, double y, double x) const {
    const double fine = amplitude * texture(y, x);
    const double coarse = structure_amplitude * (structure(y, x) >= 0.0 ? 1.0 : -1.0);
    return std::clamp(mean[c] + tint[c] * fine + coarse, 0.0, 1.0);
  }
};

RegionStyle random_style(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RegionStyle s;
  s.texture = random_texture(rng, h, w, true);
  s.structure = random_texture(rng, h, w, false);
  const double lum = 0.3 + 0.4 * u(rng);
  for (auto& m : s.mean) m = std::clamp(lum + 0.15 * (u(rng) - 0.5), 0.05, 0.95);
  s.amplitude = 0.25 + 0.2 * u(rng);
  s.structure_amplitude = 0.5 * u(rng);
  // Per-channel gain: a luma part plus a chromatic part that leaves luma unchanged.
  const double luma_gain = 0.1 + 0.7 * u(rng), chroma_gain = 2.0 * u(rng);
  std::array<double, 3> v{u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5};
  const double proj = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
  double norm = 0.0;
  for (auto& c : v) c -= proj, norm += c * c;
  norm = std::sqrt(std::max(norm, 1e-12));
  for (std::size_t c = 0; c < 3; ++c) s.tint[c] = luma_gain + chroma_gain * v[c] / norm;
  return s;
}

}  // namespace

Scene synth_scene(std::uint64_t seed, const SceneOptions& opts) {
  const std::size_t H = opts.height, W = opts.width;
  if (H < 2 * opts.patch_size || W < 2 * opts.patch_size)
    throw ConfigError("synth_scene: size " + std::to_string(H) + "x" + std::to_string(W) +
                      " is smaller than 2S = " + std::to_string(2 * opts.patch_size));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  Layout layout = opts.layout;
  bool random_two_plane = false;
  if (layout == Layout::Mixed) {
    const double p = u(rng);
    layout = p < 0.5 ? Layout::Regions : (p < 0.8 ? Layout::Gradient : Layout::TwoPlane);
    random_two_plane = layout == Layout::TwoPlane;
  }

  // Texture regions: Voronoi cells for regions/gradient, halves for two-plane.
  std::size_t n_regions = layout == Layout::TwoPlane ? 2 : 3 + static_cast<std::size_t>(u(rng) * 3);
  std::vector<std::pair<double, double>> seeds;
  for (std::size_t i = 0; i < n_regions; ++i) seeds.emplace_back(u(rng) * H, u(rng) * W);
  std::vector<RegionStyle> styles;
  for (std::size_t i = 0; i < n_regions; ++i) styles.push_back(random_style(rng, H, W));

  std::vector<std::size_t> region(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (layout == Layout::TwoPlane) {
        region[y * W + x] = x < W / 2 ? 0 : 1;
        continue;
      }
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::max();
      for (std::size_t i = 0; i < n_regions; ++i) {
        const double dy = y - seeds[i].first, dx = x - seeds[i].second;
        const double d = dy * dy + dx * dx;
        if (d < best_d) best_d = d, best = i;
      }
      region[y * W + x] = best;
    }

  // Defocus: one in-focus region, the rest spread over the defocused range.
  std::vector<double> region_defocus(n_regions);
  for (std::size_t i = 0; i < n_regions; ++i)
    region_defocus[i] = i == 0 ? std::floor(u(rng) * 16.0) : std::floor(60.0 + u(rng) * 196.0);
  double g0 = 0.0, g1 = 0.0, gtheta = 0.0;
  if (layout == Layout::Gradient) {
    g0 = std::floor(u(rng) * 20.0);
    g1 = std::floor(150.0 + u(rng) * 106.0);
    gtheta = 2.0 * std::numbers::pi * u(rng);
  }
  double left = 0.0, right = 200.0;
  if (random_two_plane) {
    left = std::floor(u(rng) * 16.0);
    right = std::floor(120.0 + u(rng) * 136.0);
    if (u(rng) < 0.5) std::swap(left, right);
  }

  Scene scene{ImageF32(H, W, 3), DefocusMap(H, W)};
  const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
  const double half_extent = 0.5 * (std::abs(std::cos(gtheta)) * (W - 1) + std::abs(std::sin(gtheta)) * (H - 1));
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t r = region[y * W + x];
      const RegionStyle& s = styles[r];
      for (std::size_t c = 0; c < 3; ++c)
        scene.sharp.at(c, y, x) = static_cast<float>(s.value(c, static_cast<double>(y), static_cast<double>(x)));
      double d = 0.0;
      switch (layout) {
        case Layout::TwoPlane:
          d = x < W / 2 ? left : right;
          break;
        case Layout::Gradient: {
          const double proj = (x - cx) * std::cos(gtheta) + (y - cy) * std::sin(gtheta);
          const double f = std::clamp(0.5 + 0.5 * proj / std::max(half_extent, 1.0), 0.0, 1.0);
          d = std::round(g0 + (g1 - g0) * f);
          break;
        }
        default:
          d = region_defocus[r];
      }
      scene.defocus.at(y, x) = static_cast<float>(d);
    }
  return scene;
}

ImageF32 apply_defocus_blur(const ImageF32& sharp, const DefocusMap& map, float k) {
  if (sharp.height != map.height || sharp.width != map.width)
    throw ShapeError("apply_defocus_blur: image " + std::to_string(sharp.height) + "x" +
                     std::to_string(sharp.width) + " vs map " + std::to_string(map.height) + "x" +
                     std::to_string(map.width));
  if (!(k > 0.0f)) throw ConfigError("apply_defocus_blur: k must be positive");
  const std::size_t H = sharp.height, W = sharp.width, C = sharp.channels;
  ImageF32 out = sharp;
  std::vector<double> wts;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double sigma = static_cast<double>(k) * map.at(y, x) / 255.0;
      if (sigma <= 0.0) continue;
      const long r = static_cast<long>(std::ceil(3.0 * sigma));
      wts.resize(2 * r + 1);
      for (long i = -r; i <= r; ++i) wts[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));
      std::array<double, 4> acc{};
      double norm = 0.0;
      const long y0 = std::max<long>(0, static_cast<long>(y) - r), y1 = std::min<long>(H - 1, y + r);
      const long x0 = std::max<long>(0, static_cast<long>(x) - r), x1 = std::min<long>(W - 1, x + r);
      for (long yy = y0; yy <= y1; ++yy) {
        const double wy = wts[yy - static_cast<long>(y) + r];
        for (long xx = x0; xx <= x1; ++xx) {
          const double wgt = wy * wts[xx - static_cast<long>(x) + r];
          norm += wgt;
          for (std::size_t c = 0; c < C; ++c) acc[c] += wgt * sharp.at(c, yy, xx);
        }
      }
      for (std::size_t c = 0; c < C; ++c) out.at(c, y, x) = static_cast<float>(acc[c] / norm);
    }
  out.clamp01();
  return out;
}

ImageF32 apply_disc_blur(const ImageF32& sharp, const DefocusMap& map, float k) {
  if (sharp.height != map.height || sharp.width != map.width)
    throw ShapeError("apply_disc_blur: image and map sizes differ");
  const std::size_t H = sharp.height, W = sharp.width, C = sharp.channels;
  ImageF32 out = sharp;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double radius = 1.5 * static_cast<double>(k) * map.at(y, x) / 255.0;
      if (radius < 0.5) continue;
      const long r = static_cast<long>(std::ceil(radius));
      std::array<double, 4> acc{};
      double norm = 0.0;
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          if (dy * dy + dx * dx > radius * radius) continue;
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
          norm += 1.0;
          for (std::size_t c = 0; c < C; ++c) acc[c] += sharp.at(c, yy, xx);
        }
      for (std::size_t c = 0; c < C; ++c) out.at(c, y, x) = static_cast<float>(acc[c] / norm);
    }
  out.clamp01();
  return out;
}

// ---------------------------------------------------------------------- codec

namespace {

const std::vector<int> kLumaBase = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

const std::vector<int> kChromaBase = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99,
    99, 99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

// Orthonormal 8-point DCT-II basis, basis[u][x].
const std::array<std::array<double, 8>, 8>& dct_basis() {
  static const auto basis = [] {
    std::array<std::array<double, 8>, 8> b{};
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x) {
        const double cu = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        b[u][x] = cu * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
    return b;
  }();
  return basis;
}

void dct8x8(const double* in, double* out) {
  const auto& b = dct_basis();
  double tmp[64];
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int x = 0; x < 8; ++x) s += b[u][x] * in[y * 8 + x];
      tmp[y * 8 + u] = s;
    }
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int y = 0; y < 8; ++y) s += b[v][y] * tmp[y * 8 + u];
      out[v * 8 + u] = s;
    }
}

void idct8x8(const double* in, double* out) {
  const auto& b = dct_basis();
  double tmp[64];
  for (int v = 0; v < 8; ++v)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int u = 0; u < 8; ++u) s += b[u][x] * in[v * 8 + u];
      tmp[v * 8 + x] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int v = 0; v < 8; ++v) s += b[v][y] * tmp[v * 8 + x];
      out[y * 8 + x] = s;
    }
}

// Codes one plane (values on the 0..255 scale), returns the reconstruction and
// accumulates coefficient histograms per frequency position.
std::vector<double> code_plane(const std::vector<double>& plane, std::size_t H, std::size_t W,
                               const std::vector<int>& table,
                               std::array<std::unordered_map<long, std::size_t>, 64>& hist) {
  const std::size_t Hp = (H + 7) / 8 * 8, Wp = (W + 7) / 8 * 8;
  std::vector<double> out(H * W);
  double block[64], coef[64], rec[64];
  for (std::size_t by = 0; by < Hp; by += 8)
    for (std::size_t bx = 0; bx < Wp; bx += 8) {
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t sy = std::min(by + y, H - 1), sx = std::min(bx + x, W - 1);
          block[y * 8 + x] = plane[sy * W + sx] - 128.0;
        }
      dct8x8(block, coef);
      for (int i = 0; i < 64; ++i) {
        const long q = std::lround(coef[i] / table[i]);
        ++hist[i][q];
        coef[i] = static_cast<double>(q * table[i]);
      }
      idct8x8(coef, rec);
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          if (by + y >= H || bx + x >= W) continue;
          out[(by + y) * W + bx + x] = rec[y * 8 + x] + 128.0;
        }
    }
  return out;
}

double entropy_bits(const std::array<std::unordered_map<long, std::size_t>, 64>& hist) {
  double bits = 0.0;
  for (const auto& h : hist) {
    std::size_t n = 0;
    for (const auto& [v, c] : h) n += c;
    // sum in key order for a platform-independent result
    std::vector<std::pair<long, std::size_t>> sorted(h.begin(), h.end());
    std::sort(sorted.begin(), sorted.end());
    for (const auto& [v, c] : sorted)
      bits -= static_cast<double>(c) * std::log2(static_cast<double>(c) / static_cast<double>(n));
  }
  return bits;
}

}  // namespace

std::vector<int> scale_table(const std::vector<int>& base, int quality) {
  if (quality < 1 || quality > 100)
    throw ConfigError("codec quality must be in [1,100], got " + std::to_string(quality));
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::vector<int> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) out[i] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
  return out;
}

std::vector<int> CodecConfig::luma_table() const { return scale_table(kLumaBase, quality); }
std::vector<int> CodecConfig::chroma_table() const { return scale_table(kChromaBase, quality); }

CodecResult compress_jpeg_like(const ImageF32& img, const CodecConfig& cfg) {
  if (cfg.quality < 1 || cfg.quality > 100)
    throw ConfigError("codec quality must be in [1,100], got " + std::to_string(cfg.quality));
  if (img.channels != 1 && img.channels != 3)
    throw ShapeError("codec supports 1 or 3 channels, got " + std::to_string(img.channels));
  const std::size_t H = img.height, W = img.width, n = H * W;
  const auto lt = cfg.luma_table();
  const auto ct = cfg.chroma_table();
  auto px8 = [&](std::size_t c, std::size_t i) {
    return std::round(std::clamp(static_cast<double>(img.data[c * n + i]), 0.0, 1.0) * 255.0);
  };
  std::array<std::unordered_map<long, std::size_t>, 64> hist_y, hist_cb, hist_cr;
  CodecResult res;
  res.image = ImageF32(H, W, img.channels);
  if (img.channels == 1) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = px8(0, i);
    auto r = code_plane(y, H, W, lt, hist_y);
    for (std::size_t i = 0; i < n; ++i)
      res.image.data[i] = static_cast<float>(std::clamp(std::round(r[i]), 0.0, 255.0) / 255.0);
    res.bits = entropy_bits(hist_y);
  } else {
    std::vector<double> Y(n), Cb(n), Cr(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double R = px8(0, i), G = px8(1, i), B = px8(2, i);
      Y[i] = 0.299 * R + 0.587 * G + 0.114 * B;
      Cb[i] = -0.168736 * R - 0.331264 * G + 0.5 * B + 128.0;
      Cr[i] = 0.5 * R - 0.418688 * G - 0.081312 * B + 128.0;
    }
    auto ry = code_plane(Y, H, W, lt, hist_y);
    std::vector<double> rcb, rcr;
    if (cfg.chroma_subsampling) {
      const std::size_t h2 = (H + 1) / 2, w2 = (W + 1) / 2;
      auto down = [&](const std::vector<double>& p) {
        std::vector<double> d(h2 * w2);
        for (std::size_t y = 0; y < h2; ++y)
          for (std::size_t x = 0; x < w2; ++x) {
            double s = 0.0;
            int cnt = 0;
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t yy = 2 * y + dy, xx = 2 * x + dx;
                if (yy < H && xx < W) s += p[yy * W + xx], ++cnt;
              }
            d[y * w2 + x] = s / cnt;
          }
        return d;
      };
      auto up = [&](const std::vector<double>& d) {
        std::vector<double> p(n);
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) p[y * W + x] = d[(y / 2) * w2 + x / 2];
        return p;
      };
      rcb = up(code_plane(down(Cb), h2, w2, ct, hist_cb));
      rcr = up(code_plane(down(Cr), h2, w2, ct, hist_cr));
    } else {
      rcb = code_plane(Cb, H, W, ct, hist_cb);
      rcr = code_plane(Cr, H, W, ct, hist_cr);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double y = ry[i], cb = rcb[i] - 128.0, cr = rcr[i] - 128.0;
      const double rgb[3] = {y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb};
      for (std::size_t c = 0; c < 3; ++c)
        res.image.data[c * n + i] = static_cast<float>(std::clamp(std::round(rgb[c]), 0.0, 255.0) / 255.0);
    }
    res.bits = entropy_bits(hist_y) + entropy_bits(hist_cb) + entropy_bits(hist_cr);
  }
  res.bpp = res.bits / static_cast<double>(n);
  return res;
}

// -------------------------------------------------------------------- patches

namespace {

std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - m);
}

std::size_t round_up(std::size_t v, std::size_t S) { return (v + S - 1) / S * S; }

}  // namespace

ImageF32 reflect_pad(const ImageF32& img, std::size_t S) {
  const std::size_t Hp = round_up(img.height, S), Wp = round_up(img.width, S);
  if (Hp == img.height && Wp == img.width) return img;
  ImageF32 out(Hp, Wp, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < Hp; ++y)
      for (std::size_t x = 0; x < Wp; ++x)
        out.at(c, y, x) = img.at(c, reflect_index(static_cast<long>(y), img.height),
                                 reflect_index(static_cast<long>(x), img.width));
  return out;
}

DefocusMap reflect_pad(const DefocusMap& map, std::size_t S) {
  const std::size_t Hp = round_up(map.height, S), Wp = round_up(map.width, S);
  if (Hp == map.height && Wp == map.width) return map;
  DefocusMap out(Hp, Wp);
  for (std::size_t y = 0; y < Hp; ++y)
    for (std::size_t x = 0; x < Wp; ++x)
      out.at(y, x) = map.at(reflect_index(static_cast<long>(y), map.height),
                            reflect_index(static_cast<long>(x), map.width));
  return out;
}

float patch_defocus_value(const std::vector<float>& map_patch) {
  if (map_patch.empty()) throw ShapeError("patch_defocus_value: empty patch");
  double s = 0.0;
  for (float v : map_patch) s += v;
  return static_cast<float>(s / static_cast<double>(map_patch.size()));
}

ImageF32 crop(const ImageF32& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > img.height || x0 + w > img.width) throw ShapeError("crop: window outside image");
  ImageF32 out(h, w, img.channels);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(&img.data[(c * img.height + y0 + y) * img.width + x0], w, &out.data[(c * h + y) * w]);
  return out;
}

DefocusMap crop(const DefocusMap& map, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > map.height || x0 + w > map.width) throw ShapeError("crop: window outside map");
  DefocusMap out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(&map.data[(y0 + y) * map.width + x0], w, &out.data[y * w]);
  return out;
}

std::vector<PatchRecord> patchify(const ImageF32& img, const DefocusMap* map, std::size_t S) {
  if (S == 0) throw ConfigError("patchify: patch size must be positive");
  if (map && (map->height != img.height || map->width != img.width))
    throw ShapeError("patchify: image and defocus map sizes differ");
  const ImageF32 padded = reflect_pad(img, S);
  DefocusMap padded_map;
  if (map) padded_map = reflect_pad(*map, S);
  const std::size_t rows = padded.height / S, cols = padded.width / S;
  std::vector<PatchRecord> out;
  out.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      PatchRecord p;
      p.pixels = crop(padded, r * S, c * S, S, S);
      p.grid_row = r;
      p.grid_col = c;
      if (map) p.mean_defocus = patch_defocus_value(crop(padded_map, r * S, c * S, S, S).data);
      out.push_back(std::move(p));
    }
  return out;
}

ImageF32 assemble(const std::vector<PatchRecord>& patches, std::size_t height, std::size_t width) {
  if (patches.empty()) throw ShapeError("assemble: no patches");
  const std::size_t S = patches[0].pixels.height;
  const std::size_t C = patches[0].pixels.channels;
  const std::size_t rows = (height + S - 1) / S, cols = (width + S - 1) / S;
  if (patches.size() != rows * cols)
    throw ShapeError("assemble: expected " + std::to_string(rows * cols) + " patches for " +
                     std::to_string(height) + "x" + std::to_string(width) + ", got " +
                     std::to_string(patches.size()));
  ImageF32 full(rows * S, cols * S, C);
  std::vector<bool> seen(rows * cols, false);
  for (const auto& p : patches) {
    if (p.pixels.height != S || p.pixels.width != S || p.pixels.channels != C)
      throw ShapeError("assemble: inconsistent patch size");
    if (p.grid_row >= rows || p.grid_col >= cols || seen[p.grid_row * cols + p.grid_col])
      throw ShapeError("assemble: inconsistent patch grid");
    seen[p.grid_row * cols + p.grid_col] = true;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < S; ++y)
        std::copy_n(&p.pixels.data[(c * S + y) * S], S,
                    &full.data[(c * full.height + p.grid_row * S + y) * full.width + p.grid_col * S]);
  }
  return crop(full, 0, 0, height, width);
}

// --------------------------------------------------------------------- corpus

fs::path corpus_file(const fs::path& root, const std::string& sub, std::size_t index,
                     const std::string& ext) {
  std::ostringstream name;
  name << std::setw(4) << std::setfill('0') << index << "." << ext;
  return root / sub / name.str();
}

std::vector<std::size_t> corpus_indices(const fs::path& root, const std::string& sub) {
  std::vector<std::size_t> out;
  const fs::path dir = root / sub;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string stem = entry.path().stem().string();
    const auto ext = lower_ext(entry.path());
    if (ext != ".ppm" && ext != ".pgm" && ext != ".pfr") continue;
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), ::isdigit)) continue;
    out.push_back(std::stoul(stem));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace daqe::imaging
