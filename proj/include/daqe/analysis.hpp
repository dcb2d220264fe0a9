#pragma once

// Quality metrics, texture statistics, correlation, clustering and BD-rate.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "daqe/imaging.hpp"
#include "json.hpp"

namespace daqe::analysis {

using imaging::ImageF32;

/// Returned by psnr() for identical inputs.
inline constexpr double kIdenticalPsnr = std::numeric_limits<double>::infinity();
/// Finite stand-in used wherever PSNR values enter statistics or JSON.
inline constexpr double kPsnrCap = 100.0;

double psnr(const ImageF32& a, const ImageF32& b, double peak = 1.0);
/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) of the luma plane.
double ssim(const ImageF32& a, const ImageF32& b, double peak = 1.0);

/// Frobenius distance between Gram matrices G = Y Y^T / S of the 8-bit luma.
double tdim(const ImageF32& a, const ImageF32& b);

struct Correlation {
  double pcc = 0.0;
  double srcc = 0.0;
  bool defined = true;  // false when either input has zero variance
};
Correlation correlation(const std::vector<double>& x, const std::vector<double>& y);
/// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(const std::vector<double>& v);

struct BaselineFeatures {
  double luminance = 0.0;        // mean luma
  double contrast = 0.0;         // luma standard deviation
  double total_variation = 0.0;  // sum of absolute horizontal and vertical luma differences
};
BaselineFeatures baseline_features(const ImageF32& patch);

/// Sum of squared one-level orthonormal Haar detail coefficients of the luma.
double wavelet_energy(const ImageF32& patch);

struct ClusterModel {
  std::vector<double> centers;  // strictly descending; cluster m is centers[m-1]
  std::vector<double> objective_history;
  std::size_t iterations = 0;

  std::size_t k() const { return centers.size(); }
};
/// 1-D k-means with k-means++ seeding. Stops when assignments are stable or
/// after 100 iterations.
ClusterModel kmeans_fit(const std::vector<double>& values, std::size_t k, std::uint64_t seed);
/// 1-based nearest center; ties go to the lower index.
int assign(const ClusterModel& model, double value);

struct ImageDispersion {
  double std = 0.0, mean = 0.0, cv = 0.0, range = 0.0;
};
struct StatsReport {
  std::vector<ImageDispersion> images;
  double mean_std = 0.0, mean_mean = 0.0, mean_cv = 0.0, mean_range = 0.0;
  double pooled_cv = 0.0;  // CV of all values pooled across images
};
/// Population statistics; CV is a fraction (0.5 means 50%).
StatsReport dispersion_stats(const std::vector<std::vector<double>>& per_image);

struct RDPoint {
  double bpp = 0.0;
  double quality = 0.0;  // PSNR in dB, or SSIM
};
/// Bjontegaard delta rate in percent: cubic fit of ln(rate) against quality,
/// averaged over the overlapping quality interval. Negative means savings.
double bd_rate(const std::vector<RDPoint>& anchor, const std::vector<RDPoint>& test);

// ------------------------------------------------------------ observation runs

struct CorpusImage {
  ImageF32 raw;         // uncompressed (defocused) image
  ImageF32 compressed;  // decoded codec output
  imaging::DefocusMap defocus;
};

struct ObservationOptions {
  std::size_t patch_size = 32;
  std::size_t clusters = 3;
  std::uint64_t seed = 0;
  bool include_patches = true;
  std::size_t max_pairs_per_image = 0;  // 0 means all pairs
};

struct PatchRow {
  std::size_t image = 0, grid_row = 0, grid_col = 0;
  double defocus = 0.0;
  int cluster = 0;
  double psnr = 0.0, ssim = 0.0;
  BaselineFeatures features;
};

struct ObservationReport {
  StatsReport dispersion;
  Correlation defocus_psnr;
  Correlation luminance_psnr, contrast_psnr, tv_psnr;
  bool defocus_outranks_baselines = false;
  ClusterModel clusters;
  std::vector<std::vector<double>> tdim_matrix;  // mean TDIM between clusters i and j
  std::vector<std::vector<std::size_t>> tdim_pairs;
  bool intra_lt_inter = false;  // TDIM(1,1) < TDIM(1,N) and TDIM(N,N) < TDIM(1,N)
  std::vector<PatchRow> patches;

  nlohmann::json to_json() const;
};

/// Observations on defocus dispersion, defocus vs. compressed quality, and
/// texture similarity of defocus clusters.
ObservationReport observe(const std::vector<CorpusImage>& corpus, const ObservationOptions& opts);

}  // namespace daqe::analysis
