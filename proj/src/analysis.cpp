#include "daqe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "daqe/error.hpp"
#include "daqe/parallel.hpp"

namespace daqe::analysis {

namespace {

void require_same(const ImageF32& a, const ImageF32& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str({a.channels, a.height, a.width}) +
                     " vs " + shape_str({b.channels, b.height, b.width}));
}

}  // namespace

double psnr(const ImageF32& a, const ImageF32& b, double peak) {
  require_same(a, b, "psnr");
  if (a.data.empty()) throw ShapeError("psnr: empty image");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    sse += d * d;
  }
  if (sse == 0.0) return kIdenticalPsnr;
  return 10.0 * std::log10(peak * peak / (sse / static_cast<double>(a.data.size())));
}

double ssim(const ImageF32& a, const ImageF32& b, double peak) {
  require_same(a, b, "ssim");
  constexpr int win = 11;
  constexpr double sigma = 1.5;
  if (a.height < win || a.width < win)
    throw ShapeError("ssim: image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " is smaller than the 11x11 window");
  double g[win];
  double gs = 0.0;
  for (int i = 0; i < win; ++i) gs += g[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (sigma * sigma));
  for (auto& v : g) v /= gs;
  const auto ya = a.luma(), yb = b.luma();
  const std::size_t H = a.height, W = a.width;
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + win <= H; ++y)
    for (std::size_t x = 0; x + win <= W; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = 0; dy < win; ++dy)
        for (int dx = 0; dx < win; ++dx) {
          const double w = g[dy] * g[dx];
          const double va = ya[(y + dy) * W + x + dx], vb = yb[(y + dy) * W + x + dx];
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * (va * vb);
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - (ma * mb);
      total += ((2 * (ma * mb) + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

double tdim(const ImageF32& a, const ImageF32& b) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError("tdim: patch sizes differ");
  const std::size_t R = a.height, C = a.width;
  auto ya = a.luma(), yb = b.luma();
  for (auto& v : ya) v *= 255.0f;
  for (auto& v : yb) v *= 255.0f;
  double fro = 0.0;
  const double norm = static_cast<double>(R);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = i; j < R; ++j) {
      double ga = 0.0, gb = 0.0;
      for (std::size_t k = 0; k < C; ++k) {
        ga += static_cast<double>(ya[i * C + k]) * ya[j * C + k];
        gb += static_cast<double>(yb[i * C + k]) * yb[j * C + k];
      }
      const double d = (ga - gb) / norm;
      fro += (i == j ? 1.0 : 2.0) * d * d;
    }
  return std::sqrt(fro);
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

// Pearson with a flag for zero variance.
std::pair<double, bool> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return {0.0, false};
  return {std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), true};
}

}  // namespace

Correlation correlation(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw ShapeError("correlation: lengths differ (" + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()) + ")");
  if (x.size() < 3) throw ShapeError("correlation: need at least 3 samples");
  Correlation c;
  auto [p, ok] = pearson(x, y);
  if (!ok) {
    c.defined = false;
    return c;
  }
  c.pcc = p;
  c.srcc = pearson(average_ranks(x), average_ranks(y)).first;
  return c;
}

BaselineFeatures baseline_features(const ImageF32& patch) {
  if (patch.data.empty()) throw ShapeError("baseline_features: empty patch");
  const auto y = patch.luma();
  const std::size_t H = patch.height, W = patch.width;
  BaselineFeatures f;
  double mean = 0.0;
  for (float v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double var = 0.0;
  for (float v : y) var += (v - mean) * (v - mean);
  f.luminance = mean;
  f.contrast = std::sqrt(var / static_cast<double>(y.size()));
  double tv = 0.0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      if (c + 1 < W) tv += std::abs(static_cast<double>(y[r * W + c + 1]) - y[r * W + c]);
      if (r + 1 < H) tv += std::abs(static_cast<double>(y[(r + 1) * W + c]) - y[r * W + c]);
    }
  f.total_variation = tv;
  return f;
}

double wavelet_energy(const ImageF32& patch) {
  if (patch.height % 2 || patch.width % 2)
    throw ShapeError("wavelet_energy: patch extents must be even, got " + std::to_string(patch.height) + "x" +
                     std::to_string(patch.width));
  const auto y = patch.luma();
  const std::size_t W = patch.width;
  double e = 0.0;
  for (std::size_t r = 0; r < patch.height; r += 2)
    for (std::size_t c = 0; c < W; c += 2) {
      const double a = y[r * W + c], b = y[r * W + c + 1], d = y[(r + 1) * W + c], f = y[(r + 1) * W + c + 1];
      const double lh = 0.5 * (a + b - d - f), hl = 0.5 * (a - b + d - f), hh = 0.5 * (a - b - d + f);
      e += lh * lh + hl * hl + hh * hh;
    }
  return e;
}

namespace {

std::size_t nearest(const std::vector<double>& centers, double v) {
  std::size_t best = 0;
  double best_d = std::abs(v - centers[0]);
  for (std::size_t i = 1; i < centers.size(); ++i) {
    const double d = std::abs(v - centers[i]);
    if (d < best_d) best_d = d, best = i;
  }
  return best;
}

}  // namespace

ClusterModel kmeans_fit(const std::vector<double>& values, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ConfigError("kmeans_fit: k must be positive");
  if (values.size() < k)
    throw ShapeError("kmeans_fit: " + std::to_string(values.size()) + " values for k = " + std::to_string(k));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> centers{values[static_cast<std::size_t>(u(rng) * values.size()) % values.size()]};
  while (centers.size() < k) {
    std::vector<double> d2(values.size());
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double d = values[i] - centers[nearest(centers, values[i])];
      total += d2[i] = d * d;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = u(rng) * total;
      for (pick = 0; pick + 1 < values.size(); ++pick) {
        r -= d2[pick];
        if (r < 0.0 && d2[pick] > 0.0) break;
      }
    }
    centers.push_back(values[pick]);
  }

  ClusterModel m;
  std::vector<std::size_t> labels(values.size(), k);
  for (std::size_t it = 0; it < 100; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const std::size_t c = nearest(centers, values[i]);
      if (c != labels[i]) changed = true, labels[i] = c;
    }
    if (!changed) break;
    std::vector<double> sum(k, 0.0);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < values.size(); ++i) sum[labels[i]] += values[i], ++cnt[labels[i]];
    for (std::size_t c = 0; c < k; ++c)
      if (cnt[c]) centers[c] = sum[c] / static_cast<double>(cnt[c]);
    double obj = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i)
      obj += (values[i] - centers[labels[i]]) * (values[i] - centers[labels[i]]);
    m.objective_history.push_back(obj);
    m.iterations = it + 1;
  }
  std::sort(centers.begin(), centers.end(), std::greater<>());
  m.centers = std::move(centers);
  return m;
}

int assign(const ClusterModel& model, double value) {
  if (model.centers.empty()) throw ConfigError("assign: empty cluster model");
  return static_cast<int>(nearest(model.centers, value)) + 1;
}

StatsReport dispersion_stats(const std::vector<std::vector<double>>& per_image) {
  if (per_image.empty()) throw ShapeError("dispersion_stats: no images");
  StatsReport r;
  auto stats = [](const std::vector<double>& v) {
    ImageDispersion d;
    for (double x : v) d.mean += x;
    d.mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - d.mean) * (x - d.mean);
    d.std = std::sqrt(var / static_cast<double>(v.size()));
    d.cv = d.std == 0.0 ? 0.0 : d.std / d.mean;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    d.range = *hi - *lo;
    return d;
  };
  std::vector<double> pooled;
  for (const auto& v : per_image) {
    if (v.size() < 2) throw ShapeError("dispersion_stats: an image needs at least 2 patches");
    r.images.push_back(stats(v));
    pooled.insert(pooled.end(), v.begin(), v.end());
  }
  const double n = static_cast<double>(r.images.size());
  for (const auto& d : r.images) {
    r.mean_std += d.std / n;
    r.mean_mean += d.mean / n;
    r.mean_cv += d.cv / n;
    r.mean_range += d.range / n;
  }
  r.pooled_cv = stats(pooled).cv;
  return r;
}

namespace {

struct Cubic {
  long double c[4];   // coefficients in the normalized variable
  long double shift;  // x_norm = (q - shift) / scale
  long double scale;

  long double integral(long double lo, long double hi) const {
    auto prim = [&](long double q) {
      const long double t = (q - shift) / scale;
      return scale * (c[0] * t + c[1] * t * t / 2 + c[2] * t * t * t / 3 + c[3] * t * t * t * t / 4);
    };
    return prim(hi) - prim(lo);
  }
};

Cubic fit_log_rate(const std::vector<RDPoint>& pts, const char* which) {
  if (pts.size() < 4)
    throw ConfigError(std::string("bd_rate: ") + which + " curve needs at least 4 points, got " +
                      std::to_string(pts.size()));
  std::vector<double> qs;
  for (const auto& p : pts) {
    if (!(p.bpp > 0.0) || !std::isfinite(p.bpp) || !std::isfinite(p.quality))
      throw ConfigError(std::string("bd_rate: ") + which + " curve has a non-positive or non-finite point");
    qs.push_back(p.quality);
  }
  std::sort(qs.begin(), qs.end());
  if (std::unique(qs.begin(), qs.end()) - qs.begin() < 4)
    throw NumericError(std::string("bd_rate: degenerate fit, ") + which + " curve has fewer than 4 distinct qualities");
  Cubic f{};
  long double lo = qs.front(), hi = qs.back();
  f.shift = (lo + hi) / 2;
  f.scale = std::max<long double>((hi - lo) / 2, 1e-12L);
  // Normal equations A^T A c = A^T y.
  long double ata[4][5] = {};
  for (const auto& p : pts) {
    const long double t = (p.quality - f.shift) / f.scale;
    const long double y = std::log(static_cast<long double>(p.bpp));
    long double pw[4] = {1, t, t * t, t * t * t};
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) ata[i][j] += pw[i] * pw[j];
      ata[i][4] += pw[i] * y;
    }
  }
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(ata[r][col]) > std::abs(ata[piv][col])) piv = r;
    if (std::abs(ata[piv][col]) < 1e-18L) throw NumericError("bd_rate: degenerate fit");
    std::swap(ata[piv], ata[col]);
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      const long double fct = ata[r][col] / ata[col][col];
      for (int j = col; j < 5; ++j) ata[r][j] -= fct * ata[col][j];
    }
  }
  for (int i = 0; i < 4; ++i) f.c[i] = ata[i][4] / ata[i][i];
  return f;
}

std::pair<double, double> quality_range(const std::vector<RDPoint>& pts) {
  auto [lo, hi] = std::minmax_element(pts.begin(), pts.end(),
                                      [](const RDPoint& a, const RDPoint& b) { return a.quality < b.quality; });
  return {lo->quality, hi->quality};
}

}  // namespace

double bd_rate(const std::vector<RDPoint>& anchor, const std::vector<RDPoint>& test) {
  const Cubic fa = fit_log_rate(anchor, "anchor");
  const Cubic ft = fit_log_rate(test, "test");
  const auto [alo, ahi] = quality_range(anchor);
  const auto [tlo, thi] = quality_range(test);
  const long double lo = std::max(alo, tlo), hi = std::min(ahi, thi);
  if (!(hi > lo)) throw ConfigError("bd_rate: anchor and test quality ranges do not overlap");
  const long double avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
  return static_cast<double>((std::exp(avg) - 1.0L) * 100.0L);
}

// ------------------------------------------------------------ observation runs

ObservationReport observe(const std::vector<CorpusImage>& corpus, const ObservationOptions& opts) {
  if (corpus.empty()) throw ShapeError("observe: empty corpus");
  const std::size_t S = opts.patch_size;
  std::vector<std::vector<PatchRow>> rows(corpus.size());
  std::vector<std::vector<ImageF32>> coded(corpus.size());
  parallel_for(0, corpus.size(), [&](std::size_t i) {
    const auto& ci = corpus[i];
    require_same(ci.raw, ci.compressed, "observe");
    const auto pr = imaging::patchify(ci.raw, &ci.defocus, S);
    auto pc = imaging::patchify(ci.compressed, nullptr, S);
    for (std::size_t p = 0; p < pr.size(); ++p) {
      PatchRow row;
      row.image = i;
      row.grid_row = pr[p].grid_row;
      row.grid_col = pr[p].grid_col;
      row.defocus = pr[p].mean_defocus;
      row.psnr = std::min(psnr(pr[p].pixels, pc[p].pixels), kPsnrCap);
      row.ssim = S >= 11 ? ssim(pr[p].pixels, pc[p].pixels) : 0.0;
      row.features = baseline_features(pr[p].pixels);
      rows[i].push_back(row);
      coded[i].push_back(std::move(pc[p].pixels));
    }
  });

  ObservationReport r;
  std::vector<std::vector<double>> per_image;
  std::vector<double> def, q, lum, con, tv;
  for (const auto& img : rows) {
    std::vector<double> v;
    for (const auto& row : img) {
      v.push_back(row.defocus);
      def.push_back(row.defocus);
      q.push_back(row.psnr);
      lum.push_back(row.features.luminance);
      con.push_back(row.features.contrast);
      tv.push_back(row.features.total_variation);
    }
    per_image.push_back(std::move(v));
  }
  r.dispersion = dispersion_stats(per_image);
  r.defocus_psnr = correlation(def, q);
  r.luminance_psnr = correlation(lum, q);
  r.contrast_psnr = correlation(con, q);
  r.tv_psnr = correlation(tv, q);
  auto strength = [](const Correlation& c) { return c.defined ? std::abs(c.srcc) : 0.0; };
  r.defocus_outranks_baselines = r.defocus_psnr.defined && strength(r.defocus_psnr) > strength(r.luminance_psnr) &&
                                 strength(r.defocus_psnr) > strength(r.contrast_psnr) &&
                                 strength(r.defocus_psnr) > strength(r.tv_psnr);

  const std::size_t K = opts.clusters;
  r.clusters = kmeans_fit(def, K, opts.seed);
  for (auto& img : rows)
    for (auto& row : img) row.cluster = assign(r.clusters, row.defocus);

  // Pairs are taken within each image, in row-major pair order.
  std::vector<std::vector<std::vector<double>>> sums(corpus.size(), std::vector<std::vector<double>>(K, std::vector<double>(K, 0.0)));
  std::vector<std::vector<std::vector<std::size_t>>> counts(
      corpus.size(), std::vector<std::vector<std::size_t>>(K, std::vector<std::size_t>(K, 0)));
  parallel_for(0, corpus.size(), [&](std::size_t i) {
    std::size_t taken = 0;
    for (std::size_t a = 0; a < rows[i].size(); ++a)
      for (std::size_t b = a + 1; b < rows[i].size(); ++b) {
        if (opts.max_pairs_per_image && taken >= opts.max_pairs_per_image) return;
        ++taken;
        const std::size_t ca = rows[i][a].cluster - 1, cb = rows[i][b].cluster - 1;
        const double d = tdim(coded[i][a], coded[i][b]);
        sums[i][ca][cb] += d;
        ++counts[i][ca][cb];
        if (ca != cb) {
          sums[i][cb][ca] += d;
          ++counts[i][cb][ca];
        }
      }
  });
  r.tdim_matrix.assign(K, std::vector<double>(K, 0.0));
  r.tdim_pairs.assign(K, std::vector<std::size_t>(K, 0));
  for (std::size_t i = 0; i < corpus.size(); ++i)
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = 0; b < K; ++b) {
        r.tdim_matrix[a][b] += sums[i][a][b];
        r.tdim_pairs[a][b] += counts[i][a][b];
      }
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = 0; b < K; ++b)
      if (r.tdim_pairs[a][b]) r.tdim_matrix[a][b] /= static_cast<double>(r.tdim_pairs[a][b]);
  const std::size_t last = K - 1;
  r.intra_lt_inter = K >= 2 && r.tdim_pairs[0][0] && r.tdim_pairs[0][last] && r.tdim_pairs[last][last] &&
                     r.tdim_matrix[0][0] < r.tdim_matrix[0][last] && r.tdim_matrix[last][last] < r.tdim_matrix[0][last];

  if (opts.include_patches)
    for (auto& img : rows) r.patches.insert(r.patches.end(), img.begin(), img.end());
  return r;
}

namespace {

nlohmann::json corr_json(const Correlation& c) {
  if (!c.defined) return {{"defined", false}, {"pcc", nullptr}, {"srcc", nullptr}};
  return {{"defined", true}, {"pcc", c.pcc}, {"srcc", c.srcc}};
}

}  // namespace

nlohmann::json ObservationReport::to_json() const {
  using nlohmann::json;
  json j;
  json per_image = json::array();
  for (const auto& d : dispersion.images)
    per_image.push_back({{"std", d.std}, {"mean", d.mean}, {"cv", d.cv}, {"range", d.range}});
  j["observation1"] = {{"images", dispersion.images.size()},
                       {"mean_std", dispersion.mean_std},
                       {"mean_mean", dispersion.mean_mean},
                       {"mean_cv", dispersion.mean_cv},
                       {"mean_cv_percent", 100.0 * dispersion.mean_cv},
                       {"pooled_cv", dispersion.pooled_cv},
                       {"mean_range", dispersion.mean_range},
                       {"per_image", per_image}};
  j["observation2"] = {{"patches", patches.size()},
                       {"pcc_defocus_psnr", defocus_psnr.defined ? json(defocus_psnr.pcc) : json(nullptr)},
                       {"srcc_defocus_psnr", defocus_psnr.defined ? json(defocus_psnr.srcc) : json(nullptr)},
                       {"defocus", corr_json(defocus_psnr)},
                       {"luminance", corr_json(luminance_psnr)},
                       {"contrast", corr_json(contrast_psnr)},
                       {"total_variation", corr_json(tv_psnr)},
                       {"ranking", "abs_srcc"},
                       {"defocus_outranks_baselines", defocus_outranks_baselines}};
  j["observation3"] = {{"cluster_centers", clusters.centers},
                       {"kmeans_iterations", clusters.iterations},
                       {"tdim_matrix", tdim_matrix},
                       {"tdim_pairs", tdim_pairs},
                       {"tdim_intra_1", tdim_matrix.empty() ? 0.0 : tdim_matrix[0][0]},
                       {"tdim_inter_1_n", tdim_matrix.empty() ? 0.0 : tdim_matrix[0].back()},
                       {"intra_lt_inter", intra_lt_inter}};
  json pt = json::array();
  for (const auto& p : patches)
    pt.push_back({{"image", p.image + 1},
                  {"row", p.grid_row},
                  {"col", p.grid_col},
                  {"defocus", p.defocus},
                  {"cluster", p.cluster},
                  {"psnr", p.psnr},
                  {"ssim", p.ssim},
                  {"luminance", p.features.luminance},
                  {"contrast", p.features.contrast},
                  {"total_variation", p.features.total_variation}});
  j["patches"] = pt;
  return j;
}

}  // namespace daqe::analysis
