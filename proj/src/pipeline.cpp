#include "daqe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace daqe::pipeline {

using nlohmann::json;

namespace {

Tensor<float> stack(const std::vector<ImageF32>& imgs) {
  const ImageF32& f = imgs.front();
  Tensor<float> out(Shape{imgs.size(), f.channels, f.height, f.width});
  for (std::size_t i = 0; i < imgs.size(); ++i)
    std::copy(imgs[i].data.begin(), imgs[i].data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(i * f.data.size()));
  return out;
}

ImageF32 map_image(const DefocusMap& m) {
  ImageF32 img(m.height, m.width, 1);
  img.data = m.data;
  return img;
}

double feature_of(const ModelConfig& c, const ImageF32& comp, const DefocusMap& map,
                  const ImageF32* raw, std::size_t y0, std::size_t x0, std::size_t S) {
  switch (c.cluster_feature) {
    case model::ClusterFeature::Defocus:
      return imaging::patch_defocus_value(imaging::crop(map, y0, x0, S, S).data);
    case model::ClusterFeature::Frequency:
      return -analysis::wavelet_energy(imaging::crop(comp, y0, x0, S, S));
    case model::ClusterFeature::Psnr: {
      if (!raw) throw ConfigError("PSNR clustering needs the raw image");
      const double p = analysis::psnr(imaging::crop(comp, y0, x0, S, S), imaging::crop(*raw, y0, x0, S, S));
      return std::min(p, analysis::kPsnrCap);
    }
  }
  return 0.0;
}

void check_finite(double v, const std::string& where) {
  if (!std::isfinite(v)) throw NumericError(where + ": non-finite loss " + std::to_string(v));
}

}  // namespace

DefocusMap predict_defocus(DaqeModel<float>& m, const ImageF32& img, Tape<float>* tape) {
  Tape<float> local(false);
  Tape<float>& t = tape ? *tape : local;
  const ImageF32 padded = imaging::reflect_pad(img, 4);
  auto out = m.denet.forward(t, t.constant(image_tensor<float>(padded)), false);
  const Tensor<float>& raw = out.raw.value();
  DefocusMap map(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      map.at(y, x) = std::clamp(raw.data[y * padded.width + x], 0.0f, 255.0f);
  return map;
}

std::vector<double> patch_features(const ModelConfig& c, const ImageF32& compressed,
                                   const DefocusMap& predicted, const ImageF32* raw) {
  const std::size_t S = c.patch_size;
  const ImageF32 comp = imaging::reflect_pad(compressed, S);
  const DefocusMap map = imaging::reflect_pad(predicted, S);
  std::optional<ImageF32> rawp;
  if (raw) rawp = imaging::reflect_pad(*raw, S);
  std::vector<double> out;
  for (std::size_t r = 0; r < comp.height / S; ++r)
    for (std::size_t col = 0; col < comp.width / S; ++col)
      out.push_back(feature_of(c, comp, map, rawp ? &*rawp : nullptr, r * S, col * S, S));
  return out;
}

PreparedImage prepare_image(const DaqeModel<float>& m, const ImageF32& compressed,
                            const DefocusMap& predicted, const PrepareOptions& opts) {
  const ModelConfig& c = m.config;
  const std::size_t S = c.patch_size;
  if (compressed.channels != 3) throw ShapeError("enhancement expects a 3-channel image");
  if (predicted.height != compressed.height || predicted.width != compressed.width)
    throw ShapeError("defocus map and image extents differ");
  PreparedImage p;
  p.height = compressed.height;
  p.width = compressed.width;
  p.patch_size = S;
  p.padded = imaging::reflect_pad(compressed, S);
  p.rows = p.padded.height / S;
  p.cols = p.padded.width / S;
  p.ref_rows = p.padded.height / (4 * S);
  p.ref_cols = p.padded.width / (4 * S);
  if (p.ref_rows == 0 || p.ref_cols == 0)
    throw ConfigError("image " + std::to_string(compressed.width) + "x" +
                      std::to_string(compressed.height) + " holds no " + std::to_string(4 * S) +
                      "-pixel reference cell; use a patch size of at most " +
                      std::to_string(std::min(p.padded.height, p.padded.width) / 4));
  const DefocusMap map = imaging::reflect_pad(predicted, S);
  std::optional<ImageF32> raw;
  if (opts.raw) raw = imaging::reflect_pad(*opts.raw, S);
  const ImageF32* rawp = raw ? &*raw : nullptr;

  analysis::ClusterModel clusters;
  clusters.centers.assign(m.centers.data.begin(), m.centers.data.end());
  auto route = [&](double feature) {
    return opts.force_cluster ? *opts.force_cluster : analysis::assign(clusters, feature);
  };
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t col = 0; col < p.cols; ++col) {
      PatchRoute pr;
      pr.grid_row = r;
      pr.grid_col = col;
      pr.feature = feature_of(c, p.padded, map, rawp, r * S, col * S, S);
      pr.cluster = route(pr.feature);
      if (pr.cluster < 1 || static_cast<std::size_t>(pr.cluster) > c.clusters)
        throw ConfigError("cluster index out of range");
      const auto m_idx = static_cast<std::size_t>(pr.cluster);
      pr.agnet = c.blind ? 1 : m_idx;
      pr.exit = c.fixed_exit ? c.fixed_exit : (c.blind ? c.clusters : m_idx);
      p.patches.push_back(pr);
    }

  const std::size_t R = p.ref_rows * p.ref_cols, C = p.padded.channels;
  p.ref_inits = Tensor<float>(Shape{R, C, S, S});
  p.pooled = Tensor<float>(Shape{1, C, p.ref_rows, p.ref_cols});
  for (std::size_t gy = 0; gy < p.ref_rows; ++gy)
    for (std::size_t gx = 0; gx < p.ref_cols; ++gx) {
      const std::size_t j = gy * p.ref_cols + gx;
      const std::size_t y0 = gy * 4 * S + 3 * S / 2, x0 = gx * 4 * S + 3 * S / 2;
      for (std::size_t ch = 0; ch < C; ++ch) {
        double sum = 0.0;
        for (std::size_t y = 0; y < 4 * S; ++y)
          for (std::size_t x = 0; x < 4 * S; ++x) sum += p.padded.at(ch, gy * 4 * S + y, gx * 4 * S + x);
        p.pooled.data[(ch * p.ref_rows + gy) * p.ref_cols + gx] = static_cast<float>(sum / (16.0 * S * S));
        for (std::size_t y = 0; y < S; ++y)
          for (std::size_t x = 0; x < S; ++x)
            p.ref_inits.data[((j * C + ch) * S + y) * S + x] = p.padded.at(ch, y0 + y, x0 + x);
      }
      const double f = feature_of(c, p.padded, map, rawp, y0, x0, S);
      p.ref_features.push_back(f);
      p.ref_clusters.push_back(analysis::assign(clusters, f));
    }

  p.refs_for.resize(c.agnets());
  for (std::size_t a = 1; a <= c.agnets(); ++a) {
    auto& list = p.refs_for[a - 1];
    for (std::size_t j = 0; j < R && list.size() < c.max_refs; ++j)
      if (c.blind || p.ref_clusters[j] == static_cast<int>(a)) list.push_back(j);
    if (list.empty()) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < R; ++j)
        if (std::abs(p.ref_features[j] - clusters.centers[a - 1]) <
            std::abs(p.ref_features[best] - clusters.centers[a - 1]))
          best = j;
      list.push_back(best);
    }
  }
  return p;
}

json RoutingReport::to_json() const {
  json rows = json::array();
  for (const auto& p : patches)
    rows.push_back({{"grid_row", p.grid_row},
                    {"grid_col", p.grid_col},
                    {"feature", p.feature},
                    {"cluster", p.cluster},
                    {"agnet", p.agnet},
                    {"exit_level", p.exit},
                    {"flops", p.flops}});
  json stages = json::object();
  for (const auto& [k, v] : by_stage) stages[k] = v;
  return json{{"patches", rows},
              {"denet_flops", denet_flops},
              {"enhancer_flops", enhancer_flops},
              {"encode_path_flops", encode_path_flops},
              {"total_flops", total_flops},
              {"by_stage", stages}};
}

EnhanceResult enhance_image(DaqeModel<float>& m, const ImageF32& compressed, const EnhanceOptions& opts) {
  Tape<float> t(false);
  EnhanceResult res;
  res.defocus = predict_defocus(m, compressed, &t);
  const std::uint64_t denet_flops = t.flops().total();
  const PreparedImage p = prepare_image(m, compressed, res.defocus, opts.prepare);
  auto groups = enhance_graph(t, m, p, false);

  ImageF32 out = p.padded;
  const std::size_t S = p.patch_size;
  RoutingReport& r = res.routing;
  r.patches.resize(p.patches.size());
  for (const auto& g : groups) {
    const Tensor<float>& v = g.output.value();
    for (std::size_t k = 0; k < g.patches.size(); ++k) {
      const PatchRoute& pr = p.patches[g.patches[k]];
      for (std::size_t c = 0; c < out.channels; ++c)
        for (std::size_t y = 0; y < S; ++y)
          for (std::size_t x = 0; x < S; ++x)
            out.at(c, pr.grid_row * S + y, pr.grid_col * S + x) =
                v.data[((k * out.channels + c) * S + y) * S + x];
      PatchReport& rep = r.patches[g.patches[k]];
      rep.grid_row = pr.grid_row;
      rep.grid_col = pr.grid_col;
      rep.feature = pr.feature;
      rep.cluster = pr.cluster;
      rep.agnet = pr.agnet;
      rep.exit = pr.exit;
      rep.flops = static_cast<double>(g.flops) / static_cast<double>(g.patches.size());
    }
  }
  res.image = imaging::crop(out, 0, 0, p.height, p.width);
  res.image.clamp01();
  r.denet_flops = denet_flops;
  r.total_flops = t.flops().total();
  r.enhancer_flops = r.total_flops - denet_flops;
  r.by_stage = t.flops().by_stage();
  for (const auto& [name, v] : r.by_stage) {
    const bool enc = name.size() > 4 && name.compare(name.size() - 4, 4, "/enc") == 0;
    const bool ca = name.size() > 3 && name.compare(name.size() - 3, 3, "/ca") == 0;
    if (name.rfind("qenet/", 0) == 0 && (enc || ca)) r.encode_path_flops += v;
  }
  if (opts.keep_trace) r.stage_trace = t.stage_trace();
  return res;
}

// ------------------------------------------------------------------ training

Adam::Adam(nn::ParamList<float> params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& p : params)
    if (p.trainable) params_.push_back(p);
  for (auto& p : params_) {
    m_.emplace_back(p.tensor->numel(), 0.0f);
    v_.emplace_back(p.tensor->numel(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor->zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<float>& p = *params_[i].tensor;
    p.ensure_grad();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double g = p.grad[k];
      m_[i][k] = static_cast<float>(beta1_ * m_[i][k] + (1.0 - beta1_) * g);
      v_[i][k] = static_cast<float>(beta2_ * v_[i][k] + (1.0 - beta2_) * g * g);
      const double mh = m_[i][k] / c1, vh = v_[i][k] / c2;
      p.data[k] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps_));
    }
  }
}

double cosine_lr(double lr, std::size_t step, std::size_t total) {
  if (total == 0) return lr;
  const double pi = std::acos(-1.0);
  return lr * 0.5 * (1.0 + std::cos(pi * static_cast<double>(step) / static_cast<double>(total)));
}

json History::to_json() const { return json{{"epoch_loss", epoch_loss}, {"steps", steps}}; }

History train_denet(DaqeModel<float>& m, const std::vector<CorpusImage>& labeled,
                    const std::vector<ImageF32>& real, const TrainConfig& cfg) {
  if (labeled.empty()) throw ConfigError("train_denet: empty corpus");
  std::mt19937_64 rng(cfg.seed);
  model::Discriminator<float> disc(m.config.denet_width, rng);
  model::FeatureNet<float> phi(std::max<std::size_t>(cfg.loss.feature_layer, 4), rng);
  nn::ParamList<float> gen_params, disc_params;
  m.collect_denet(gen_params);
  disc.collect("disc", disc_params);
  Adam gen(gen_params), dopt(disc_params);

  const std::size_t B = std::min(cfg.batch, labeled.size());
  const std::size_t steps_per_epoch = (labeled.size() + B - 1) / B;
  const std::size_t total = steps_per_epoch * cfg.denet_epochs;
  std::size_t crop = cfg.crop / 4 * 4;
  for (const auto& s : labeled) crop = std::min(crop, std::min(s.compressed.height, s.compressed.width) / 4 * 4);
  for (const auto& r : real) crop = std::min(crop, std::min(r.height, r.width) / 4 * 4);
  if (crop < 16) throw ConfigError("train_denet: images too small for training crops");

  auto random_crop = [&](std::size_t h, std::size_t w) {
    std::uniform_int_distribution<std::size_t> dy(0, h - crop), dx(0, w - crop);
    const std::size_t y = dy(rng);
    return std::pair{y, dx(rng)};
  };

  History hist;
  std::vector<std::size_t> order(labeled.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.denet_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<ImageF32> inputs;
      std::vector<ImageF32> targets;
      for (std::size_t b = 0; b < B; ++b) {
        const CorpusImage& ci = labeled[order[(s * B + b) % order.size()]];
        auto [y, x] = random_crop(ci.compressed.height, ci.compressed.width);
        inputs.push_back(imaging::crop(ci.compressed, y, x, crop, crop));
        targets.push_back(map_image(imaging::crop(ci.defocus, y, x, crop, crop)));
      }
      const bool adversarial = !real.empty();
      if (adversarial) {
        std::uniform_int_distribution<std::size_t> pick(0, real.size() - 1);
        for (std::size_t b = 0; b < B; ++b) {
          const ImageF32& ri = real[pick(rng)];
          auto [y, x] = random_crop(ri.height, ri.width);
          inputs.push_back(imaging::crop(ri, y, x, crop, crop));
        }
      }
      const double lr = cosine_lr(cfg.denet_lr, hist.steps, total);
      gen.zero_grad();
      dopt.zero_grad();
      Tensor<float> psi_values;
      double loss_value = 0.0;
      {
        Tape<float> t;
        auto out = m.denet.forward(t, t.constant(stack(inputs)), true);
        Var<float> raw = adversarial ? model::slice_batch(out.raw, 0, B) : out.raw;
        Var<float> target = t.constant(stack(targets));
        Var<float> loss = model::loss_pix(raw, target);
        loss = add(loss, mul_scalar(model::loss_feat(t, phi, raw, target, cfg.loss.feature_layer),
                                    static_cast<float>(cfg.loss.lambda_feat)));
        if (adversarial) {
          Var<float> adv = add(model::loss_adv(disc(t, model::slice_batch(out.psi, 0, B)), 1),
                               model::loss_adv(disc(t, model::slice_batch(out.psi, B, B)), 0));
          loss = add(loss, mul_scalar(adv, static_cast<float>(cfg.loss.lambda_adv)));
          psi_values = out.psi.value();
        }
        loss_value = loss.value()[0];
        check_finite(loss_value, "train_denet epoch " + std::to_string(epoch + 1));
        t.backward(loss);
      }
      gen.step(lr);
      if (adversarial) {
        dopt.zero_grad();
        Tape<float> t;
        Var<float> psi = t.constant(std::move(psi_values));
        Var<float> adv = add(model::loss_adv(disc(t, model::slice_batch(psi, 0, B)), 1),
                             model::loss_adv(disc(t, model::slice_batch(psi, B, B)), 0));
        Var<float> ld = mul_scalar(adv, -1.0f);
        check_finite(ld.value()[0], "train_denet discriminator");
        t.backward(ld);
        dopt.step(lr);
      }
      gen.zero_grad();
      epoch_sum += loss_value;
      ++hist.steps;
    }
    hist.epoch_loss.push_back(epoch_sum / static_cast<double>(steps_per_epoch));
  }
  return hist;
}

History train_enhancer(DaqeModel<float>& m, const std::vector<CorpusImage>& corpus,
                       const TrainConfig& cfg) {
  if (corpus.empty()) throw ConfigError("train_enhancer: empty corpus");
  nn::ParamList<float> denet_params;
  m.collect_denet(denet_params);
  const std::uint64_t frozen = param_hash(denet_params);

  std::vector<DefocusMap> maps;
  std::vector<double> features;
  for (const auto& ci : corpus) {
    maps.push_back(predict_defocus(m, ci.compressed));
    auto f = patch_features(m.config, ci.compressed, maps.back(), &ci.raw);
    features.insert(features.end(), f.begin(), f.end());
  }
  const auto km = analysis::kmeans_fit(features, m.config.clusters, cfg.seed);
  for (std::size_t k = 0; k < km.centers.size(); ++k) m.centers.data[k] = static_cast<float>(km.centers[k]);

  std::vector<PreparedImage> prepared;
  std::vector<ImageF32> targets;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    PrepareOptions po;
    po.raw = &corpus[i].raw;
    prepared.push_back(prepare_image(m, corpus[i].compressed, maps[i], po));
    targets.push_back(imaging::reflect_pad(corpus[i].raw, m.config.patch_size));
  }

  nn::ParamList<float> params;
  m.collect_enhancer(params);
  Adam opt(params);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t B = std::max<std::size_t>(1, std::min(cfg.enhancer_batch, corpus.size()));
  const std::size_t steps_per_epoch = (corpus.size() + B - 1) / B;
  const std::size_t total = steps_per_epoch * cfg.enhancer_epochs;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  History hist;
  for (std::size_t epoch = 0; epoch < cfg.enhancer_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      opt.zero_grad();
      Tape<float> t;
      // One residual norm over every patch of the step.
      std::optional<Var<float>> ss;
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t i = order[(s * B + b) % order.size()];
        PreparedImage target_view;
        target_view.padded = targets[i];
        target_view.patch_size = prepared[i].patch_size;
        target_view.patches = prepared[i].patches;
        for (auto& g : enhance_graph(t, m, prepared[i], false)) {
          Var<float> target = t.constant(patch_tensor<float>(target_view, g.patches));
          Var<float> e = sum_squares(sub(g.output, target));
          ss = ss ? add(*ss, e) : e;
        }
      }
      Var<float> l = sqrt(add_scalar(*ss, static_cast<float>(cfg.loss.epsilon * cfg.loss.epsilon)));
      check_finite(l.value()[0], "train_enhancer epoch " + std::to_string(epoch + 1));
      t.backward(l);
      opt.step(cosine_lr(cfg.lr, hist.steps, total));
      epoch_sum += l.value()[0];
      ++hist.steps;
    }
    hist.epoch_loss.push_back(epoch_sum / static_cast<double>(steps_per_epoch));
  }
  opt.zero_grad();
  if (param_hash(denet_params) != frozen) throw Error("train_enhancer: DENet parameters changed");
  return hist;
}

json Evaluation::to_json() const {
  return json{{"defocus_mae", defocus_mae},
              {"psnr_compressed", psnr_compressed},
              {"psnr_enhanced", psnr_enhanced},
              {"psnr_gain", psnr_enhanced - psnr_compressed},
              {"ssim_compressed", ssim_compressed},
              {"ssim_enhanced", ssim_enhanced}};
}

Evaluation evaluate(DaqeModel<float>& m, const std::vector<CorpusImage>& held_out) {
  if (held_out.empty()) throw ConfigError("evaluate: empty corpus");
  Evaluation e;
  for (const auto& ci : held_out) {
    EnhanceOptions opts;
    opts.prepare.raw = &ci.raw;
    const EnhanceResult r = enhance_image(m, ci.compressed, opts);
    double mae = 0.0;
    for (std::size_t i = 0; i < r.defocus.data.size(); ++i) mae += std::abs(r.defocus.data[i] - ci.defocus.data[i]);
    e.defocus_mae += mae / static_cast<double>(r.defocus.data.size());
    e.psnr_compressed += std::min(analysis::psnr(ci.compressed, ci.raw), analysis::kPsnrCap);
    e.psnr_enhanced += std::min(analysis::psnr(r.image, ci.raw), analysis::kPsnrCap);
    e.ssim_compressed += analysis::ssim(ci.compressed, ci.raw);
    e.ssim_enhanced += analysis::ssim(r.image, ci.raw);
  }
  const double n = static_cast<double>(held_out.size());
  e.defocus_mae /= n;
  e.psnr_compressed /= n;
  e.psnr_enhanced /= n;
  e.ssim_compressed /= n;
  e.ssim_enhanced /= n;
  return e;
}

std::uint64_t param_hash(const nn::ParamList<float>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.tensor->data.data(), p.tensor->data.size() * sizeof(float));
  }
  return h;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated reading " + what);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

std::string get_bytes(std::istream& is, std::size_t n, const std::string& what) {
  if (n > (std::size_t{1} << 30)) throw FormatError("checkpoint field too large: " + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n)))
    throw FormatError("checkpoint truncated reading " + what);
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, DaqeModel<float>& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  os.write("DAQM", 4);
  put_u32(os, kCheckpointVersion);
  const std::string cfg = model_config_to_json(m.config).dump();
  put_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  auto params = m.params();
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(os, static_cast<std::uint32_t>(p.tensor->shape.size()));
    for (auto e : p.tensor->shape) put_u32(os, static_cast<std::uint32_t>(e));
    for (float v : p.tensor->data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(os, bits);
    }
  }
  if (!os) throw Error("failed writing checkpoint " + path.string());
}

DaqeModel<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  if (get_bytes(is, 4, "magic") != "DAQM") throw FormatError("not a DAQM checkpoint: " + path.string());
  const std::uint32_t version = get_u32(is, "version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::string cfg = get_bytes(is, get_u32(is, "config length"), "config");
  json j;
  try {
    j = json::parse(cfg);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint config is not JSON: ") + e.what());
  }
  DaqeModel<float> m(model_config_from_json(j), 0);
  auto params = m.params();
  const std::uint32_t count = get_u32(is, "tensor count");
  if (count != params.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (auto& p : params) {
    const std::string name = get_bytes(is, get_u32(is, "name length"), "name");
    if (name != p.name) throw FormatError("checkpoint tensor '" + name + "' where '" + p.name + "' expected");
    const std::uint32_t rank = get_u32(is, "rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get_u32(is, "extent"));
    if (shape != p.tensor->shape) throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape));
    for (auto& v : p.tensor->data) {
      const std::uint32_t bits = get_u32(is, name);
      std::memcpy(&v, &bits, 4);
    }
  }
  return m;
}

}  // namespace daqe::pipeline
