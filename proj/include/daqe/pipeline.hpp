#pragma once

// Image-level DAQE: defocus prediction, patch routing, enhancement, training
// loops and checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "daqe/analysis.hpp"
#include "daqe/imaging.hpp"
#include "daqe/model.hpp"
#include "json.hpp"

namespace daqe::pipeline {

using analysis::CorpusImage;
using imaging::DefocusMap;
using imaging::ImageF32;
using model::DaqeModel;
using model::ModelConfig;

/// [1, C, H, W] view of a planar image.
template <typename T>
Tensor<T> image_tensor(const ImageF32& img) {
  return Tensor<T>(Shape{1, img.channels, img.height, img.width},
                   std::vector<T>(img.data.begin(), img.data.end()));
}

/// DENet on a whole image in eval mode. The input is reflect-padded to a
/// multiple of 4 and the clamped map is cropped back.
DefocusMap predict_defocus(DaqeModel<float>& m, const ImageF32& img, Tape<float>* tape = nullptr);

struct PatchRoute {
  std::size_t grid_row = 0, grid_col = 0;
  double feature = 0.0;
  int cluster = 0;  // 1-based
  std::size_t agnet = 0, exit = 0;
};

/// Everything the enhancer graph needs for one image, in plain data.
struct PreparedImage {
  std::size_t height = 0, width = 0;  // original extents
  std::size_t patch_size = 0;
  ImageF32 padded;                    // reflect-padded to multiples of S
  std::size_t rows = 0, cols = 0;
  std::vector<PatchRoute> patches;    // row-major grid order
  std::size_t ref_rows = 0, ref_cols = 0;
  Tensor<float> ref_inits;            // [R, 3, S, S]
  Tensor<float> pooled;               // [1, 3, ref_rows, ref_cols]
  std::vector<double> ref_features;
  std::vector<int> ref_clusters;
  std::vector<std::vector<std::size_t>> refs_for;  // per AGNet
};

struct PrepareOptions {
  const ImageF32* raw = nullptr;   // required for PSNR clustering
  std::optional<int> force_cluster;  // route every patch to this cluster
};

/// Clustering feature of every S x S patch of the padded image, row-major.
std::vector<double> patch_features(const ModelConfig& c, const ImageF32& compressed,
                                   const DefocusMap& predicted, const ImageF32* raw);

/// Routes patches with the model's cluster centers and builds the reference
/// grid. Throws ConfigError if the image holds no 4S x 4S reference cell.
PreparedImage prepare_image(const DaqeModel<float>& m, const ImageF32& compressed,
                            const DefocusMap& predicted, const PrepareOptions& opts = {});

/// Patches [N, 3, S, S] taken from the padded image.
template <typename T>
Tensor<T> patch_tensor(const PreparedImage& p, const std::vector<std::size_t>& which) {
  const std::size_t S = p.patch_size, C = p.padded.channels;
  Tensor<T> out(Shape{which.size(), C, S, S});
  for (std::size_t k = 0; k < which.size(); ++k) {
    const PatchRoute& r = p.patches[which[k]];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x)
          out.data[((k * C + c) * S + y) * S + x] =
              static_cast<T>(p.padded.at(c, r.grid_row * S + y, r.grid_col * S + x));
  }
  return out;
}

template <typename T>
struct GroupResult {
  std::size_t agnet = 0, exit = 0;
  std::vector<std::size_t> patches;
  Var<T> output;  // [N, 3, S, S]
  std::uint64_t flops = 0;
};

/// Enhancer graph for the patches of one prepared image, grouped by
/// (AGNet, exit level). `only` restricts the run to a subset of patches.
template <typename T>
std::vector<GroupResult<T>> enhance_graph(Tape<T>& t, DaqeModel<T>& m, const PreparedImage& p,
                                          bool training,
                                          const std::vector<std::size_t>* only = nullptr) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
  auto add_patch = [&](std::size_t i) {
    groups[{p.patches[i].agnet, p.patches[i].exit}].push_back(i);
  };
  if (only) {
    for (std::size_t i : *only) add_patch(i);
  } else {
    for (std::size_t i = 0; i < p.patches.size(); ++i) add_patch(i);
  }
  Var<T> inits = t.constant(p.ref_inits.template cast<T>());
  Var<T> pooled = t.constant(p.pooled.template cast<T>());
  std::vector<GroupResult<T>> out;
  for (auto& [key, members] : groups) {
    const std::uint64_t before = t.flops().total();
    Var<T> patches = t.constant(patch_tensor<T>(p, members));
    Var<T> f = m.agnet_forward(t, key.first, patches, inits, pooled, p.refs_for.at(key.first - 1),
                               training);
    GroupResult<T> g;
    g.agnet = key.first;
    g.exit = key.second;
    g.patches = members;
    g.output = m.qenet_forward(t, f, patches, key.second, training);
    g.flops = t.flops().total() - before;
    out.push_back(std::move(g));
  }
  return out;
}

struct PatchReport {
  std::size_t grid_row = 0, grid_col = 0;
  double feature = 0.0;
  int cluster = 0;
  std::size_t agnet = 0, exit = 0;
  double flops = 0.0;  // share of its group's FLOPs
};

struct RoutingReport {
  std::vector<PatchReport> patches;
  std::uint64_t denet_flops = 0;
  std::uint64_t enhancer_flops = 0;
  std::uint64_t encode_path_flops = 0;  // QENet encoders and CA subnets
  std::uint64_t total_flops = 0;
  std::map<std::string, std::uint64_t> by_stage;
  std::vector<std::string> stage_trace;

  nlohmann::json to_json() const;
};

struct EnhanceOptions {
  PrepareOptions prepare;
  bool keep_trace = false;
};

struct EnhanceResult {
  ImageF32 image;
  DefocusMap defocus;
  RoutingReport routing;
};

EnhanceResult enhance_image(DaqeModel<float>& m, const ImageF32& compressed,
                            const EnhanceOptions& opts = {});

// ------------------------------------------------------------------ training

struct TrainConfig {
  std::size_t denet_epochs = 20;
  std::size_t enhancer_epochs = 20;
  double lr = 1e-4;
  double denet_lr = 1e-4;
  std::size_t batch = 4;         // DENet crops per domain per step
  std::size_t crop = 64;         // DENet crop size
  std::size_t enhancer_batch = 1;  // images per enhancer step
  std::uint64_t seed = 0;
  model::LossConfig loss;
};

struct History {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
  nlohmann::json to_json() const;
};

/// Adam with bias correction over the trainable entries of a parameter list.
class Adam {
 public:
  explicit Adam(nn::ParamList<float> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void zero_grad();
  void step(double lr);

 private:
  nn::ParamList<float> params_;
  std::vector<std::vector<float>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// lr * (1 + cos(pi * step / total)) / 2
double cosine_lr(double lr, std::size_t step, std::size_t total);

/// Trains DENet on labeled scenes plus unlabeled "real" images, alternating
/// with the discriminator. Aborts with NumericError on a non-finite loss.
History train_denet(DaqeModel<float>& m, const std::vector<CorpusImage>& labeled,
                    const std::vector<ImageF32>& real, const TrainConfig& cfg);

/// Fits the cluster centers, then trains AGNet and QENet with DENet frozen.
/// Throws if any DENet tensor changes.
History train_enhancer(DaqeModel<float>& m, const std::vector<CorpusImage>& corpus,
                       const TrainConfig& cfg);

struct Evaluation {
  double defocus_mae = 0.0;
  double psnr_compressed = 0.0;
  double psnr_enhanced = 0.0;
  double ssim_compressed = 0.0;
  double ssim_enhanced = 0.0;
  nlohmann::json to_json() const;
};
Evaluation evaluate(DaqeModel<float>& m, const std::vector<CorpusImage>& held_out);

/// FNV-1a over names and bytes of a parameter list.
std::uint64_t param_hash(const nn::ParamList<float>& params);

// ---------------------------------------------------------------- checkpoints

/// "DAQM", u32 version, u32 length + config JSON, u32 tensor count, then per
/// tensor: u32 name length, name, u32 rank, u32 extents, little-endian f32.
void save_checkpoint(const std::filesystem::path& path, DaqeModel<float>& m);
DaqeModel<float> load_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& c);
/// Rejects unknown keys.
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace daqe::pipeline
