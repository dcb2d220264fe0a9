#include "daqe/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <random>
#include <set>

#include "CLI11.hpp"
#include "daqe/parallel.hpp"

namespace daqe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

json header(const std::string& command, const RunConfig& cfg) {
  return json{{"schema", kReportSchema}, {"command", command}, {"config", cfg.to_json()}};
}

std::string qdir(int quality) { return "q" + std::to_string(quality); }

json train_to_json(const pipeline::TrainConfig& t) {
  return json{{"denet_epochs", t.denet_epochs},
              {"enhancer_epochs", t.enhancer_epochs},
              {"lr", t.lr},
              {"denet_lr", t.denet_lr},
              {"batch", t.batch},
              {"crop", t.crop},
              {"enhancer_batch", t.enhancer_batch},
              {"loss",
               {{"epsilon", t.loss.epsilon},
                {"feature_layer", t.loss.feature_layer},
                {"lambda_feat", t.loss.lambda_feat},
                {"lambda_adv", t.loss.lambda_adv}}}};
}

void require_object(const json& j, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
}

pipeline::TrainConfig train_from_json(const json& j) {
  require_object(j, "train");
  pipeline::TrainConfig t;
  for (const auto& [key, v] : j.items()) {
    if (key == "denet_epochs") t.denet_epochs = v.get<std::size_t>();
    else if (key == "enhancer_epochs") t.enhancer_epochs = v.get<std::size_t>();
    else if (key == "lr") t.lr = v.get<double>();
    else if (key == "denet_lr") t.denet_lr = v.get<double>();
    else if (key == "batch") t.batch = v.get<std::size_t>();
    else if (key == "crop") t.crop = v.get<std::size_t>();
    else if (key == "enhancer_batch") t.enhancer_batch = v.get<std::size_t>();
    else if (key == "loss") {
      require_object(v, "train.loss");
      for (const auto& [lk, lv] : v.items()) {
        if (lk == "epsilon") t.loss.epsilon = lv.get<double>();
        else if (lk == "feature_layer") t.loss.feature_layer = lv.get<std::size_t>();
        else if (lk == "lambda_feat") t.loss.lambda_feat = lv.get<double>();
        else if (lk == "lambda_adv") t.loss.lambda_adv = lv.get<double>();
        else throw ConfigError("unknown train.loss key '" + lk + "'");
      }
    } else {
      throw ConfigError("unknown train key '" + key + "'");
    }
  }
  return t;
}

std::vector<std::size_t> labeled_indices(const fs::path& corpus) {
  auto idx = imaging::corpus_indices(corpus, "raw");
  if (idx.empty()) throw FormatError("no scenes in " + (corpus / "raw").string());
  return idx;
}

analysis::CorpusImage load_scene(const fs::path& corpus, std::size_t i, int quality) {
  analysis::CorpusImage ci;
  ci.raw = imaging::load_pfr_image(imaging::corpus_file(corpus, "raw", i, "pfr"));
  ci.defocus = imaging::load_pgm_map(imaging::corpus_file(corpus, "defocus", i, "pgm"));
  const fs::path c = imaging::corpus_file(corpus, qdir(quality), i, "ppm");
  if (!fs::exists(c)) throw FormatError("missing " + c.string() + " (run compress first)");
  ci.compressed = imaging::load_pnm(c);
  return ci;
}

std::vector<imaging::ImageF32> load_real(const fs::path& corpus, int quality) {
  std::vector<imaging::ImageF32> out;
  for (std::size_t i : imaging::corpus_indices(corpus, "real_" + qdir(quality)))
    out.push_back(imaging::load_pnm(imaging::corpus_file(corpus, "real_" + qdir(quality), i, "ppm")));
  return out;
}

struct Split {
  std::vector<analysis::CorpusImage> train, held_out;
  std::vector<std::size_t> train_idx, held_idx;
};

Split split_corpus(const RunConfig& cfg, const fs::path& corpus, int quality) {
  const auto idx = labeled_indices(corpus);
  if (cfg.held_out >= idx.size())
    throw ConfigError("held_out (" + std::to_string(cfg.held_out) + ") leaves no training scenes");
  Split s;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const bool held = k + cfg.held_out >= idx.size();
    (held ? s.held_idx : s.train_idx).push_back(idx[k]);
    (held ? s.held_out : s.train).push_back(load_scene(corpus, idx[k], quality));
  }
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---------------------------------------------------------------- RunConfig

json RunConfig::to_json() const {
  return json{{"seed", seed},
              {"images", images},
              {"real_images", real_images},
              {"held_out", held_out},
              {"height", height},
              {"width", width},
              {"layout", layout},
              {"qualities", qualities},
              {"bench_images", bench_images},
              {"model", pipeline::model_config_to_json(model)},
              {"train", train_to_json(train)}};
}

RunConfig RunConfig::from_json(const json& j) {
  require_object(j, "run config");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "images") c.images = v.get<std::size_t>();
      else if (key == "real_images") c.real_images = v.get<std::size_t>();
      else if (key == "held_out") c.held_out = v.get<std::size_t>();
      else if (key == "height") c.height = v.get<std::size_t>();
      else if (key == "width") c.width = v.get<std::size_t>();
      else if (key == "layout") c.layout = v.get<std::string>();
      else if (key == "qualities") c.qualities = v.get<std::vector<int>>();
      else if (key == "bench_images") c.bench_images = v.get<std::size_t>();
      else if (key == "model") c.model = pipeline::model_config_from_json(v);
      else if (key == "train") c.train = train_from_json(v);
      else throw ConfigError("unknown run config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("run config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  model.validate();
  imaging::parse_layout(layout);
  if (qualities.empty()) throw ConfigError("at least one codec quality is required");
  for (int q : qualities)
    if (q < 1 || q > 100) throw ConfigError("codec quality must be in [1, 100]");
  if (images == 0) throw ConfigError("images must be positive");
  if (bench_images == 0) throw ConfigError("bench_images must be positive");
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

std::vector<analysis::CorpusImage> load_corpus(const fs::path& corpus, int quality) {
  std::vector<analysis::CorpusImage> out;
  for (std::size_t i : labeled_indices(corpus)) out.push_back(load_scene(corpus, i, quality));
  return out;
}

// ------------------------------------------------------------------ commands

json cmd_synth(const RunConfig& cfg, const fs::path& root) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  imaging::SceneOptions so;
  so.height = cfg.height;
  so.width = cfg.width;
  so.patch_size = cfg.model.patch_size;
  so.layout = imaging::parse_layout(cfg.layout);
  std::vector<std::uint64_t> seeds(cfg.images + cfg.real_images);
  for (auto& s : seeds) s = rng();

  std::vector<std::vector<double>> per_image(cfg.images);
  stage("synth", [&] {
    fs::create_directories(root / "raw");
    fs::create_directories(root / "defocus");
    if (cfg.real_images) fs::create_directories(root / "real");
    parallel_for(0, seeds.size(), [&](std::size_t k) {
      const imaging::Scene sc = imaging::synth_scene(seeds[k], so);
      if (k < cfg.images) {
        imaging::save_pfr(imaging::corpus_file(root, "raw", k + 1, "pfr"),
                          imaging::apply_defocus_blur(sc.sharp, sc.defocus));
        imaging::save_pgm(imaging::corpus_file(root, "defocus", k + 1, "pgm"), sc.defocus);
        for (const auto& p : imaging::patchify(sc.sharp, &sc.defocus, cfg.model.patch_size))
          per_image[k].push_back(p.mean_defocus);
      } else {
        imaging::save_pfr(imaging::corpus_file(root, "real", k - cfg.images + 1, "pfr"),
                          imaging::apply_disc_blur(sc.sharp, sc.defocus));
      }
    });
  });
  json r = header("synth", cfg);
  const auto stats = analysis::dispersion_stats(per_image);
  r["dispersion"] = {{"mean_std", stats.mean_std},
                     {"mean_mean", stats.mean_mean},
                     {"mean_cv", stats.mean_cv},
                     {"mean_range", stats.mean_range},
                     {"pooled_cv", stats.pooled_cv}};
  r["images"] = cfg.images;
  r["real_images"] = cfg.real_images;
  return r;
}

json cmd_compress(const RunConfig& cfg, const fs::path& corpus, const fs::path& out) {
  cfg.validate();
  const auto idx = labeled_indices(corpus);
  const auto real_idx = imaging::corpus_indices(corpus, "real");
  json rd_images = json::array();
  std::vector<json> rows(idx.size(), json::array());
  for (int q : cfg.qualities) {
    stage("compress q" + std::to_string(q), [&] {
      fs::create_directories(corpus / qdir(q));
      parallel_for(0, idx.size(), [&](std::size_t k) {
        const auto raw = imaging::load_pfr_image(imaging::corpus_file(corpus, "raw", idx[k], "pfr"));
        const auto res = imaging::compress_jpeg_like(raw, {q, false});
        imaging::save_pnm(imaging::corpus_file(corpus, qdir(q), idx[k], "ppm"), res.image);
        rows[k].push_back({{"quality", q},
                           {"bpp", res.bpp},
                           {"psnr", std::min(analysis::psnr(res.image, raw), analysis::kPsnrCap)},
                           {"ssim", analysis::ssim(res.image, raw)}});
      });
      if (!real_idx.empty()) fs::create_directories(corpus / ("real_" + qdir(q)));
      parallel_for(0, real_idx.size(), [&](std::size_t k) {
        const auto raw = imaging::load_pfr_image(imaging::corpus_file(corpus, "real", real_idx[k], "pfr"));
        imaging::save_pnm(imaging::corpus_file(corpus, "real_" + qdir(q), real_idx[k], "ppm"),
                          imaging::compress_jpeg_like(raw, {q, false}).image);
      });
    });
  }
  for (std::size_t k = 0; k < idx.size(); ++k) rd_images.push_back({{"index", idx[k]}, {"points", rows[k]}});
  json rd{{"schema", kReportSchema}, {"source", "compressed"}, {"images", rd_images}};
  write_json(out / "rd.json", rd);

  json r = header("compress", cfg);
  json summary = json::array();
  for (std::size_t qi = 0; qi < cfg.qualities.size(); ++qi) {
    double bpp = 0.0, psnr = 0.0, ssim = 0.0;
    for (const auto& row : rows) {
      bpp += row[qi]["bpp"].get<double>();
      psnr += row[qi]["psnr"].get<double>();
      ssim += row[qi]["ssim"].get<double>();
    }
    const double n = static_cast<double>(rows.size());
    summary.push_back({{"quality", cfg.qualities[qi]}, {"mean_bpp", bpp / n}, {"mean_psnr", psnr / n},
                       {"mean_ssim", ssim / n}});
  }
  r["summary"] = summary;
  r["images"] = rd_images;
  return r;
}

json cmd_analyze(const RunConfig& cfg, const fs::path& corpus) {
  cfg.validate();
  const int q = cfg.qualities.front();
  const auto scenes = stage("load", [&] { return load_corpus(corpus, q); });
  analysis::ObservationOptions o;
  o.patch_size = cfg.model.patch_size;
  o.clusters = cfg.model.clusters;
  o.seed = cfg.seed;
  const auto obs = stage("observe", [&] { return analysis::observe(scenes, o); });
  json r = header("analyze", cfg);
  r["quality"] = q;
  r["observations"] = obs.to_json();
  r["pcc_defocus_psnr"] = obs.defocus_psnr.pcc;
  r["srcc_defocus_psnr"] = obs.defocus_psnr.srcc;
  r["defocus_outranks_baselines"] = obs.defocus_outranks_baselines;
  r["intra_lt_inter_tdim"] = obs.intra_lt_inter;
  return r;
}

json cmd_train(const RunConfig& cfg, const fs::path& corpus, const fs::path& out) {
  cfg.validate();
  const int q = cfg.qualities.front();
  const Split s = stage("load", [&] { return split_corpus(cfg, corpus, q); });
  const auto real = stage("load", [&] { return load_real(corpus, q); });
  std::mt19937_64 rng(cfg.seed);
  const std::uint64_t init_seed = rng();
  pipeline::TrainConfig tc = cfg.train;
  tc.seed = rng();
  model::DaqeModel<float> m(cfg.model, init_seed);
  const auto hd = stage("train_denet", [&] { return pipeline::train_denet(m, s.train, real, tc); });
  const auto he = stage("train_enhancer", [&] { return pipeline::train_enhancer(m, s.train, tc); });
  stage("checkpoint", [&] {
    fs::create_directories(out);
    pipeline::save_checkpoint(out / "model.daqm", m);
  });
  json r = header("train", cfg);
  r["quality"] = q;
  r["train_images"] = s.train_idx;
  r["held_out_images"] = s.held_idx;
  r["denet_history"] = hd.to_json();
  r["enhancer_history"] = he.to_json();
  r["cluster_centers"] = m.centers.data;
  if (!s.held_out.empty()) r["held_out"] = stage("evaluate", [&] { return pipeline::evaluate(m, s.held_out).to_json(); });
  nn::ParamList<float> all = m.params();
  r["param_hash"] = pipeline::param_hash(all);
  return r;
}

json cmd_enhance(const RunConfig& cfg, const fs::path& model_path, const fs::path& corpus, const fs::path& out,
                 bool all, json& timing) {
  cfg.validate();
  auto m = stage("load model", [&] { return pipeline::load_checkpoint(model_path); });
  const auto idx = labeled_indices(corpus);
  std::vector<std::size_t> use;
  for (std::size_t k = 0; k < idx.size(); ++k)
    if (all || k + cfg.held_out >= idx.size()) use.push_back(idx[k]);
  if (use.empty()) throw ConfigError("no scenes selected (held_out is 0; pass --all)");

  json images = json::array();
  std::vector<json> points(use.size(), json::array());
  json per_quality = json::array();
  json timing_rows = json::array();
  for (int q : cfg.qualities) {
    const auto t0 = std::chrono::steady_clock::now();
    double psnr_c = 0.0, psnr_e = 0.0, ssim_c = 0.0, ssim_e = 0.0;
    std::map<std::size_t, std::size_t> exits;
    std::uint64_t flops = 0;
    json rows = json::array();
    std::size_t pixels = 0;
    stage("enhance q" + std::to_string(q), [&] {
      for (std::size_t k = 0; k < use.size(); ++k) {
        const auto ci = load_scene(corpus, use[k], q);
        pipeline::EnhanceOptions o;
        o.prepare.raw = &ci.raw;
        const auto res = pipeline::enhance_image(m, ci.compressed, o);
        imaging::save_pfr(imaging::corpus_file(out, qdir(q), use[k], "pfr"), res.image);
        const double pc = std::min(analysis::psnr(ci.compressed, ci.raw), analysis::kPsnrCap);
        const double pe = std::min(analysis::psnr(res.image, ci.raw), analysis::kPsnrCap);
        const double sc = analysis::ssim(ci.compressed, ci.raw), se = analysis::ssim(res.image, ci.raw);
        const double bpp = imaging::compress_jpeg_like(ci.raw, {q, false}).bpp;
        points[k].push_back({{"quality", q}, {"bpp", bpp}, {"psnr", pe}, {"ssim", se}});
        psnr_c += pc;
        psnr_e += pe;
        ssim_c += sc;
        ssim_e += se;
        for (const auto& p : res.routing.patches) ++exits[p.exit];
        flops += res.routing.total_flops;
        pixels += ci.raw.height * ci.raw.width;
        rows.push_back({{"index", use[k]},
                        {"psnr_compressed", pc},
                        {"psnr_enhanced", pe},
                        {"ssim_compressed", sc},
                        {"ssim_enhanced", se},
                        {"total_flops", res.routing.total_flops},
                        {"encode_path_flops", res.routing.encode_path_flops}});
      }
    });
    const double n = static_cast<double>(use.size());
    json exit_counts = json::object();
    for (const auto& [e, c] : exits) exit_counts[std::to_string(e)] = c;
    per_quality.push_back({{"quality", q},
                           {"mean_psnr_compressed", psnr_c / n},
                           {"mean_psnr_enhanced", psnr_e / n},
                           {"mean_psnr_gain", (psnr_e - psnr_c) / n},
                           {"mean_ssim_compressed", ssim_c / n},
                           {"mean_ssim_enhanced", ssim_e / n},
                           {"patches_per_exit", exit_counts},
                           {"flops_per_pixel", static_cast<double>(flops) / static_cast<double>(pixels)},
                           {"images", rows}});
    const double secs = seconds_since(t0);
    timing_rows.push_back({{"quality", q}, {"seconds", secs}, {"fps", n / secs}});
  }
  for (std::size_t k = 0; k < use.size(); ++k) images.push_back({{"index", use[k]}, {"points", points[k]}});
  write_json(out / "rd.json", json{{"schema", kReportSchema}, {"source", "enhanced"}, {"images", images}});
  timing = json{{"schema", kReportSchema}, {"command", "enhance"}, {"runs", timing_rows}};
  json r = header("enhance", cfg);
  r["model_config"] = pipeline::model_config_to_json(m.config);
  r["results"] = per_quality;
  return r;
}

json cmd_bdrate(const fs::path& anchor, const fs::path& test) {
  auto load = [](const fs::path& dir) {
    std::ifstream is(dir / "rd.json");
    if (!is) throw FormatError("missing " + (dir / "rd.json").string());
    try {
      return json::parse(is);
    } catch (const json::exception& e) {
      throw FormatError((dir / "rd.json").string() + ": " + e.what());
    }
  };
  const json a = stage("load anchor", [&] { return load(anchor); });
  const json t = stage("load test", [&] { return load(test); });
  std::map<std::size_t, json> by_index;
  for (const auto& img : a.at("images")) by_index[img.at("index").get<std::size_t>()] = img.at("points");

  json rows = json::array();
  double sum_psnr = 0.0, sum_ssim = 0.0;
  std::size_t n = 0;
  for (const auto& img : t.at("images")) {
    const std::size_t i = img.at("index").get<std::size_t>();
    auto it = by_index.find(i);
    if (it == by_index.end()) continue;
    auto curve = [](const json& pts, const char* metric, const std::set<int>& keep) {
      std::vector<analysis::RDPoint> out;
      for (const auto& p : pts)
        if (keep.count(p.at("quality").get<int>()))
          out.push_back({p.at("bpp").get<double>(), p.at(metric).get<double>()});
      return out;
    };
    std::set<int> qa, qt, both;
    for (const auto& p : it->second) qa.insert(p.at("quality").get<int>());
    for (const auto& p : img.at("points")) qt.insert(p.at("quality").get<int>());
    std::set_intersection(qa.begin(), qa.end(), qt.begin(), qt.end(), std::inserter(both, both.begin()));
    const double bp = stage("bd_rate image " + std::to_string(i), [&] {
      return analysis::bd_rate(curve(it->second, "psnr", both), curve(img.at("points"), "psnr", both));
    });
    const double bs = stage("bd_rate image " + std::to_string(i), [&] {
      return analysis::bd_rate(curve(it->second, "ssim", both), curve(img.at("points"), "ssim", both));
    });
    rows.push_back({{"index", i}, {"bd_rate_psnr", bp}, {"bd_rate_ssim", bs}});
    sum_psnr += bp;
    sum_ssim += bs;
    ++n;
  }
  if (n == 0) throw StageError("bd_rate", "anchor and test share no images");
  return json{{"schema", kReportSchema},
              {"command", "bdrate"},
              {"method", "cubic fit of log rate over quality, integrated over the overlap"},
              {"anchor_source", a.value("source", "")},
              {"test_source", t.value("source", "")},
              {"images", rows},
              {"mean_bd_rate_psnr", sum_psnr / static_cast<double>(n)},
              {"mean_bd_rate_ssim", sum_ssim / static_cast<double>(n)}};
}

namespace {

struct Ablation {
  std::string name;
  model::ModelConfig config;
};

std::vector<Ablation> ablations(const model::ModelConfig& base) {
  std::vector<Ablation> out;
  auto add = [&](const std::string& name, auto&& edit) {
    model::ModelConfig c = base;
    edit(c);
    out.push_back({name, c});
  };
  add("daqe", [](model::ModelConfig&) {});
  add("no_local_attn", [](model::ModelConfig& c) { c.no_local_attn = true; });
  add("no_global_attn", [](model::ModelConfig& c) { c.no_global_attn = true; });
  add("no_ca", [](model::ModelConfig& c) { c.no_ca = true; });
  add("freq_cluster", [](model::ModelConfig& c) { c.cluster_feature = model::ClusterFeature::Frequency; });
  add("oracle_cluster", [](model::ModelConfig& c) { c.cluster_feature = model::ClusterFeature::Psnr; });
  add("renorm_attention", [](model::ModelConfig& c) { c.renorm_attention = true; });
  add("fixed_exit_max", [](model::ModelConfig& c) { c.fixed_exit = c.clusters; });
  add("blind", [](model::ModelConfig& c) { c.blind = true; });
  add("blind_exit1", [](model::ModelConfig& c) {
    c.blind = true;
    c.fixed_exit = 1;
  });
  return out;
}

/// Enhancer FLOPs for one scene. `truth_routing` routes by the ground-truth
/// defocus map instead of the DENet prediction.
pipeline::RoutingReport bench_run(model::DaqeModel<float>& m, const analysis::CorpusImage& ci, bool truth_routing,
                                  std::optional<int> force) {
  if (!truth_routing) {
    pipeline::EnhanceOptions o;
    o.prepare.raw = &ci.raw;
    o.prepare.force_cluster = force;
    return pipeline::enhance_image(m, ci.compressed, o).routing;
  }
  Tape<float> t(false);
  pipeline::predict_defocus(m, ci.compressed, &t);
  const std::uint64_t denet = t.flops().total();
  pipeline::PrepareOptions po;
  po.raw = &ci.raw;
  po.force_cluster = force;
  const auto p = pipeline::prepare_image(m, ci.compressed, ci.defocus, po);
  const auto groups = pipeline::enhance_graph(t, m, p, false);
  pipeline::RoutingReport r;
  r.patches.resize(p.patches.size());
  for (const auto& g : groups)
    for (std::size_t k : g.patches) {
      auto& rep = r.patches[k];
      rep.grid_row = p.patches[k].grid_row;
      rep.grid_col = p.patches[k].grid_col;
      rep.cluster = p.patches[k].cluster;
      rep.agnet = g.agnet;
      rep.exit = g.exit;
      rep.flops = static_cast<double>(g.flops) / static_cast<double>(g.patches.size());
    }
  r.denet_flops = denet;
  r.total_flops = t.flops().total();
  r.enhancer_flops = r.total_flops - denet;
  r.by_stage = t.flops().by_stage();
  for (const auto& [name, v] : r.by_stage) {
    const bool enc = name.size() > 4 && name.compare(name.size() - 4, 4, "/enc") == 0;
    const bool ca = name.size() > 3 && name.compare(name.size() - 3, 3, "/ca") == 0;
    if (name.rfind("qenet/", 0) == 0 && (enc || ca)) r.encode_path_flops += v;
  }
  return r;
}

void fit_truth_centers(model::DaqeModel<float>& m, const std::vector<analysis::CorpusImage>& scenes,
                       std::uint64_t seed) {
  std::vector<double> feats;
  for (const auto& ci : scenes) {
    const auto f = pipeline::patch_features(m.config, ci.compressed, ci.defocus, &ci.raw);
    feats.insert(feats.end(), f.begin(), f.end());
  }
  const auto km = analysis::kmeans_fit(feats, m.config.clusters, seed);
  for (std::size_t k = 0; k < km.centers.size(); ++k) m.centers.data[k] = static_cast<float>(km.centers[k]);
}

}  // namespace

json cmd_bench(const RunConfig& cfg, const fs::path* model_path, const fs::path* corpus, json& timing) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int q = cfg.qualities.front();
  imaging::SceneOptions so;
  so.height = cfg.height;
  so.width = cfg.width;
  so.patch_size = cfg.model.patch_size;
  so.layout = imaging::parse_layout(cfg.layout);
  std::vector<analysis::CorpusImage> scenes;
  for (std::size_t i = 0; i < cfg.bench_images; ++i) {
    const auto sc = imaging::synth_scene(rng(), so);
    analysis::CorpusImage ci;
    ci.raw = imaging::apply_defocus_blur(sc.sharp, sc.defocus);
    ci.compressed = imaging::compress_jpeg_like(ci.raw, {q, false}).image;
    ci.defocus = sc.defocus;
    scenes.push_back(std::move(ci));
  }
  const std::uint64_t init_seed = rng();
  std::optional<model::DaqeModel<float>> loaded;
  if (model_path) loaded = stage("load model", [&] { return pipeline::load_checkpoint(*model_path); });
  const model::ModelConfig base = loaded ? loaded->config : cfg.model;
  const bool truth_routing = !loaded;

  json r = header("bench", cfg);
  r["routing"] = truth_routing ? "k-means over ground-truth defocus" : "model";
  json timing_rows = json::array();

  // Per-exit cost with every patch forced to one cluster.
  {
    model::DaqeModel<float> m = loaded ? *loaded : model::DaqeModel<float>(base, init_seed);
    json exits = json::array();
    std::vector<double> per_patch;
    std::vector<std::uint64_t> encode;
    for (std::size_t e = 1; e <= base.clusters; ++e) {
      const auto rep = stage("bench exit " + std::to_string(e), [&] {
        return bench_run(m, scenes.front(), true, static_cast<int>(e));
      });
      double mean = 0.0;
      for (const auto& p : rep.patches) mean += p.flops;
      mean /= static_cast<double>(rep.patches.size());
      per_patch.push_back(mean);
      encode.push_back(rep.encode_path_flops);
      exits.push_back({{"exit_level", e},
                       {"flops_per_patch", mean},
                       {"encode_path_flops", rep.encode_path_flops},
                       {"enhancer_flops", rep.enhancer_flops}});
    }
    bool increasing = true;
    for (std::size_t e = 1; e < per_patch.size(); ++e) increasing = increasing && per_patch[e] > per_patch[e - 1];
    r["exits"] = exits;
    r["flops_strictly_increasing"] = increasing;
    r["encode_path_ratio_first_to_last"] =
        static_cast<double>(encode.front()) / static_cast<double>(encode.back());
  }

  // Ablations.
  json rows = json::array();
  std::vector<std::pair<double, std::string>> by_flops;
  std::vector<std::pair<double, std::string>> by_gain;
  std::optional<Split> split;
  std::vector<imaging::ImageF32> real;
  if (corpus) {
    split = stage("load", [&] { return split_corpus(cfg, *corpus, q); });
    real = stage("load", [&] { return load_real(*corpus, q); });
  }
  for (const auto& ab : ablations(base)) {
    model::DaqeModel<float> m(ab.config, init_seed);
    if (loaded && !ab.config.blind) {
      // Reuse trained weights where the structure matches.
      auto src = loaded->params(), dst = m.params();
      if (src.size() == dst.size())
        for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor->data = src[i].tensor->data;
    }
    if (truth_routing) fit_truth_centers(m, scenes, init_seed);
    json row{{"name", ab.name}, {"model", pipeline::model_config_to_json(ab.config)}};
    if (split) {
      pipeline::TrainConfig tc = cfg.train;
      tc.seed = init_seed;
      model::DaqeModel<float> tm(ab.config, init_seed);
      stage("train " + ab.name, [&] {
        pipeline::train_denet(tm, split->train, real, tc);
        pipeline::train_enhancer(tm, split->train, tc);
      });
      const auto ev = stage("evaluate " + ab.name, [&] { return pipeline::evaluate(tm, split->held_out); });
      row["held_out"] = ev.to_json();
      by_gain.push_back({ev.psnr_enhanced - ev.psnr_compressed, ab.name});
    }
    const auto t0 = std::chrono::steady_clock::now();
    std::uint64_t total = 0, encode = 0;
    std::map<std::size_t, std::size_t> exits;
    stage("bench " + ab.name, [&] {
      for (const auto& ci : scenes) {
        const auto rep = bench_run(m, ci, truth_routing, std::nullopt);
        total += rep.total_flops;
        encode += rep.encode_path_flops;
        for (const auto& p : rep.patches) ++exits[p.exit];
      }
    });
    const double secs = seconds_since(t0);
    const double n = static_cast<double>(scenes.size());
    json ex = json::object();
    for (const auto& [e, c] : exits) ex[std::to_string(e)] = c;
    row["mean_flops_per_image"] = static_cast<double>(total) / n;
    row["mean_encode_path_flops"] = static_cast<double>(encode) / n;
    row["patches_per_exit"] = ex;
    rows.push_back(row);
    by_flops.push_back({static_cast<double>(total) / n, ab.name});
    timing_rows.push_back({{"name", ab.name}, {"seconds", secs}, {"fps", n / secs}});
  }
  std::stable_sort(by_flops.begin(), by_flops.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::stable_sort(by_gain.begin(), by_gain.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  json order_flops = json::array(), order_gain = json::array();
  for (const auto& [v, name] : by_flops) order_flops.push_back(name);
  for (const auto& [v, name] : by_gain) order_gain.push_back(name);
  r["ablations"] = rows;
  r["ablation_order_by_flops"] = order_flops;
  if (split) r["ablation_order_by_psnr_gain"] = order_gain;
  timing = json{{"schema", kReportSchema}, {"command", "bench"}, {"runs", timing_rows}};
  return r;
}

// ----------------------------------------------------------------------- CLI

namespace {

struct Common {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::vector<int> quality;
  std::size_t patch_size = 0, clusters = 0, fixed_exit = 0;
  bool no_ca = false, no_global_attn = false, no_local_attn = false, blind = false;
  bool freq_cluster = false, oracle_cluster = false, renorm = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Run configuration JSON");
  app->add_option("--seed", c.seed, "Seed of the run generator");
  app->add_option("--quality", c.quality, "Codec qualities")->delimiter(',');
  app->add_option("--patch-size", c.patch_size, "Patch size S");
  app->add_option("--clusters", c.clusters, "Number of defocus clusters");
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_flag("--no-ca", c.no_ca, "Disable the context-adaptation subnets");
  app->add_flag("--no-global-attn", c.no_global_attn, "Disable global attention");
  app->add_flag("--no-local-attn", c.no_local_attn, "Disable local attention");
  app->add_flag("--blind", c.blind, "Single cluster with every reference");
  app->add_flag("--freq-cluster", c.freq_cluster, "Cluster on wavelet energy");
  app->add_flag("--oracle-cluster,--oracle-defocus", c.oracle_cluster, "Cluster on true patch PSNR");
  app->add_option("--fixed-exit", c.fixed_exit, "Exit every patch at this level");
  app->add_flag("--renorm-attention", c.renorm, "Average rather than sum over references");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    std::ifstream is(c.config);
    if (!is) throw ConfigError("cannot read config " + c.config);
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config " + c.config + ": " + e.what());
    }
    cfg = RunConfig::from_json(j);
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.quality.empty()) cfg.qualities = c.quality;
  if (c.patch_size) cfg.model.patch_size = c.patch_size;
  if (c.clusters) cfg.model.clusters = c.clusters;
  if (c.fixed_exit) cfg.model.fixed_exit = c.fixed_exit;
  cfg.model.no_ca = cfg.model.no_ca || c.no_ca;
  cfg.model.no_global_attn = cfg.model.no_global_attn || c.no_global_attn;
  cfg.model.no_local_attn = cfg.model.no_local_attn || c.no_local_attn;
  cfg.model.blind = cfg.model.blind || c.blind;
  cfg.model.renorm_attention = cfg.model.renorm_attention || c.renorm;
  if (c.freq_cluster && c.oracle_cluster) throw ConfigError("--freq-cluster and --oracle-cluster are exclusive");
  if (c.freq_cluster) cfg.model.cluster_feature = model::ClusterFeature::Frequency;
  if (c.oracle_cluster) cfg.model.cluster_feature = model::ClusterFeature::Psnr;
  cfg.validate();
  return cfg;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Defocus-aware quality enhancement of compressed images"};
  app.require_subcommand(1);
  Common c;
  std::string corpus, model_path, anchor, test;
  bool all = false;

  auto* synth = app.add_subcommand("synth", "Synthesize a labeled corpus");
  add_common(synth, c);
  auto* compress = app.add_subcommand("compress", "Code the corpus at each quality");
  add_common(compress, c);
  compress->add_option("--corpus", corpus, "Corpus directory")->required();
  auto* analyze = app.add_subcommand("analyze", "Observation report");
  add_common(analyze, c);
  analyze->add_option("--corpus", corpus, "Corpus directory")->required();
  auto* train = app.add_subcommand("train", "Staged DENet then enhancer training");
  add_common(train, c);
  train->add_option("--corpus", corpus, "Corpus directory")->required();
  auto* enhance = app.add_subcommand("enhance", "Enhance held-out scenes");
  add_common(enhance, c);
  enhance->add_option("--corpus", corpus, "Corpus directory")->required();
  enhance->add_option("--model", model_path, "Checkpoint")->required();
  enhance->add_flag("--all", all, "Enhance every scene, not only the held-out ones");
  auto* bdrate = app.add_subcommand("bdrate", "BD-rate of test against anchor");
  bdrate->add_option("--anchor", anchor, "Directory holding rd.json")->required();
  bdrate->add_option("--test", test, "Directory holding rd.json")->required();
  bdrate->add_option("--out", c.out, "Output directory")->required();
  auto* bench = app.add_subcommand("bench", "FLOPs and throughput per configuration");
  add_common(bench, c);
  bench->add_option("--model", model_path, "Checkpoint");
  bench->add_option("--corpus", corpus, "Corpus for training every ablation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* cmd = app.get_subcommands().front();
  try {
    const fs::path out(c.out);
    json report, timing;
    if (cmd == bdrate) {
      report = cmd_bdrate(anchor, test);
    } else {
      const RunConfig cfg = stage("config", [&] { return resolve(c); });
      if (cmd == synth) report = cmd_synth(cfg, out);
      else if (cmd == compress) report = cmd_compress(cfg, corpus, out);
      else if (cmd == analyze) report = cmd_analyze(cfg, corpus);
      else if (cmd == train) report = cmd_train(cfg, corpus, out);
      else if (cmd == enhance) report = cmd_enhance(cfg, model_path, corpus, out, all, timing);
      else if (cmd == bench) {
        const fs::path mp(model_path), cp(corpus);
        report = cmd_bench(cfg, model_path.empty() ? nullptr : &mp, corpus.empty() ? nullptr : &cp, timing);
      }
    }
    write_json(out / "report.json", report);
    if (!timing.is_null()) write_json(out / "timing.json", timing);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "daqe " << cmd->get_name() << ": " << e.what() << "\n";
    return 1;
  }
}

}  // namespace daqe::cli
