// Command-line front end: data generation, tiling, training, evaluation,
// whole-slide prediction, and gradient checking over the cmsk library.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "cmsk/config.hpp"
#include "cmsk/data.hpp"
#include "cmsk/gradcheck.hpp"
#include "cmsk/model.hpp"
#include "cmsk/train.hpp"
#include "cmsk/vote.hpp"
#include "cmsk/wsi.hpp"

namespace fs = std::filesystem;
using namespace cmsk;

namespace {

constexpr const char* kToolVersion = "cmswinkan 1.0";

Config load_run_config(const std::string& path,
                       const std::vector<std::string>& overrides) {
  Config cfg = path.empty() ? Config{} : load_config(path);
  apply_overrides(cfg, overrides);
  return cfg;
}

ModelConfig model_from_config(const Config& cfg) {
  ModelConfig mc = ModelConfig::preset(cfg_str(cfg, "model.variant", "toy"));
  mc.num_classes = cfg_int(cfg, "model.num_classes", mc.num_classes);
  mc.head_hidden = cfg_int(cfg, "model.head_hidden", mc.head_hidden);
  mc.use_cmsa = cfg_bool(cfg, "model.use_cmsa", mc.use_cmsa);
  mc.backbone.embed_dim = cfg_int(cfg, "model.embed_dim", mc.backbone.embed_dim);
  mc.backbone.window = int(cfg_int(cfg, "model.window", mc.backbone.window));
  int64_t img = cfg_int(cfg, "model.img", mc.backbone.img_h);
  mc.backbone.img_h = mc.backbone.img_w = img;
  mc.backbone.kan_expansion =
      cfg_double(cfg, "model.kan_expansion", mc.backbone.kan_expansion);
  if (cfg.count("model.embed_dim") || cfg.count("model.window") ||
      cfg.count("model.img") || cfg.count("model.kan_expansion"))
    mc.variant = "custom";
  mc.validate();
  return mc;
}

CorpusSpec corpus_from_config(const Config& cfg) {
  CorpusSpec spec;
  spec.num_classes = int(cfg_int(cfg, "data.classes", spec.num_classes));
  spec.per_class = int(cfg_int(cfg, "data.per_class", spec.per_class));
  spec.size = cfg_int(cfg, "data.size", spec.size);
  spec.train_frac = cfg_double(cfg, "data.train_frac", spec.train_frac);
  return spec;
}

TrainConfig train_from_config(const Config& cfg) {
  TrainConfig tc;
  tc.epochs = int(cfg_int(cfg, "train.epochs", tc.epochs));
  tc.batch_size = int(cfg_int(cfg, "train.batch_size", tc.batch_size));
  tc.lr = cfg_double(cfg, "train.lr", tc.lr);
  tc.weight_decay = cfg_double(cfg, "train.weight_decay", tc.weight_decay);
  tc.warmup_frac = cfg_double(cfg, "train.warmup_frac", tc.warmup_frac);
  tc.seed = uint64_t(cfg_int(cfg, "train.seed", 0));
  tc.validate();
  return tc;
}

// Every report opens with the tool version, seed, and the full effective
// configuration so any run can be replayed exactly.
std::string repro_stanza(const Config& cfg, uint64_t seed) {
  std::ostringstream os;
  os << "# " << kToolVersion << "\n";
  os << "# seed=" << seed << "\n";
  os << "# config:\n";
  std::istringstream lines(config_to_text(cfg));
  std::string line;
  while (std::getline(lines, line)) os << "#   " << line << "\n";
  return os.str();
}

void emit_report(const std::string& path, const std::string& text) {
  std::cout << text;
  if (!path.empty()) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot write report: " + path);
    out << text;
  }
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) {
    std::cerr << "error: missing " << what << ": " << path << "\n";
    std::exit(2);
  }
}

Tensor image_from_ppm(const SlideImage& img) {
  std::vector<double> data(size_t(3 * img.height * img.width));
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        data[size_t((c * img.height + y) * img.width + x)] =
            img.at(x, y, c) / 255.0;
  return Tensor::from_data({3, img.height, img.width}, std::move(data));
}

void tensor_to_ppm(const Tensor& t, const std::string& path) {
  int64_t h = t.dim(1), w = t.dim(2);
  SlideImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(size_t(3 * h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.pixels[size_t((y * w + x) * 3 + c)] = uint8_t(std::lround(
            std::clamp(t.data()[size_t((c * h + y) * w + x)], 0.0, 1.0) *
            255.0));
  write_ppm(img, path);
}

void save_dataset(const Dataset& d, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream labels(dir + "/labels.txt");
  for (size_t i = 0; i < d.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    tensor_to_ppm(d.images[i], dir + "/" + name);
    labels << name << " " << d.labels[i] << "\n";
  }
}

Dataset load_dataset(const std::string& dir) {
  require_file(dir + "/labels.txt", "dataset label file");
  std::ifstream labels(dir + "/labels.txt");
  Dataset d;
  std::string name;
  int label;
  while (labels >> name >> label) {
    SlideImage img = read_ppm(dir + "/" + name);
    d.images.push_back(image_from_ppm(img));
    d.labels.push_back(label);
  }
  check(!d.images.empty(), "dataset is empty: " + dir);
  return d;
}

int cmd_gen_data(const std::string& cfg_path,
                 const std::vector<std::string>& overrides,
                 const std::string& out_dir) {
  Config cfg = load_run_config(cfg_path, overrides);
  CorpusSpec spec = corpus_from_config(cfg);
  uint64_t seed = uint64_t(cfg_int(cfg, "data.seed", 0));
  auto [train_set, test_set] = gen_patch_corpus(spec, seed);
  fs::create_directories(out_dir);
  save_dataset(train_set, out_dir + "/train");
  save_dataset(test_set, out_dir + "/test");
  std::ostringstream os;
  os << repro_stanza(cfg, seed);
  os << "train_images " << train_set.images.size() << "\n";
  os << "test_images " << test_set.images.size() << "\n";
  emit_report(out_dir + "/gen_report.txt", os.str());
  return 0;
}

int cmd_tile(const std::string& input, const std::string& out_dir,
             int64_t window, int64_t stride, const FilterParams& params,
             int threads) {
  require_file(input, "slide image");
  std::string id = fs::path(input).stem().string();
  SlideImage slide = read_ppm(input, id);
  fs::create_directories(out_dir);
  auto records = run_pipeline(slide, out_dir, window, stride, params, threads);
  int64_t kept = 0;
  for (const TileRecord& r : records) kept += r.kept;
  std::cout << "# " << kToolVersion << "\n"
            << "slide " << id << " tiles " << records.size() << " kept " << kept
            << "\n";
  return 0;
}

int cmd_train(const std::string& cfg_path,
              const std::vector<std::string>& overrides,
              const std::string& data_dir, const std::string& ckpt_out,
              const std::string& report_path) {
  Config cfg = load_run_config(cfg_path, overrides);
  Dataset train_set, test_set;
  if (!data_dir.empty()) {
    train_set = load_dataset(data_dir + "/train");
    test_set = load_dataset(data_dir + "/test");
  } else {
    auto pair = gen_patch_corpus(corpus_from_config(cfg),
                                 uint64_t(cfg_int(cfg, "data.seed", 0)));
    train_set = pair.first;
    test_set = pair.second;
  }
  ModelConfig mc = model_from_config(cfg);
  TrainConfig tc = train_from_config(cfg);
  double stop_acc = cfg_double(cfg, "train.stop_acc", 0.0);
  Rng rng(tc.seed);
  Model model(mc, rng);

  std::ostringstream os;
  os << repro_stanza(cfg, tc.seed);
  os << "params " << model.param_count() << "\n";
  TrainResult res = train(model, train_set, test_set, tc, stop_acc,
                          [&](const EpochLog& log) {
                            std::cout << "epoch " << log.epoch << " loss "
                                      << log.train_loss << " lr " << log.lr
                                      << " test_acc " << log.test.acc << "\n";
                          });
  for (const EpochLog& log : res.history)
    os << "epoch " << log.epoch << " loss " << log.train_loss << " lr "
       << log.lr << " test_acc " << log.test.acc << "\n";
  if (!res.history.empty()) os << res.history.back().test.to_text();
  if (!ckpt_out.empty()) save_checkpoint(model, ckpt_out);
  emit_report(report_path, os.str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& cfg_path,
             const std::vector<std::string>& overrides,
             const std::string& data_dir, const std::string& report_path) {
  require_file(ckpt, "checkpoint");
  Config cfg = load_run_config(cfg_path, overrides);
  Model model = load_checkpoint(ckpt);
  Dataset test_set;
  if (!data_dir.empty()) {
    test_set = load_dataset(data_dir + "/test");
  } else {
    test_set = gen_patch_corpus(corpus_from_config(cfg),
                                uint64_t(cfg_int(cfg, "data.seed", 0)))
                   .second;
  }
  uint64_t seed = uint64_t(cfg_int(cfg, "data.seed", 0));
  MetricsReport rep = evaluate(model, test_set);
  std::ostringstream os;
  os << repro_stanza(cfg, seed);
  os << "variant " << model.cfg.variant << "\n";
  os << "params " << model.param_count() << "\n";
  os << rep.to_text();
  emit_report(report_path, os.str());
  return 0;
}

int cmd_predict_wsi(const std::string& ckpt, const std::string& svm_path,
                    const std::string& tiles, const VoteParams& vp, bool hard,
                    const std::string& report_path) {
  require_file(ckpt, "checkpoint");
  require_file(svm_path, "tissue classifier checkpoint");
  std::string manifest = tiles;
  std::string tile_dir = tiles;
  if (fs::is_directory(tiles)) {
    manifest = tiles + "/manifest.txt";
  } else {
    tile_dir = fs::path(tiles).parent_path().string();
    if (tile_dir.empty()) tile_dir = ".";
  }
  require_file(manifest, "tile manifest");
  vp.validate();

  Model model = load_checkpoint(ckpt);
  LinearSvm svm = svm_load(svm_path);
  int64_t in_px = model.cfg.backbone.img_h;

  std::map<std::string, std::vector<PatchRecord>> slides;
  std::ifstream mf(manifest);
  std::string slide_id, reason;
  int64_t x, y;
  int kept;
  while (mf >> slide_id >> x >> y >> kept >> reason) {
    if (!kept) continue;
    std::string tile_path = tile_dir + "/" + slide_id + "_" +
                            std::to_string(x) + "_" + std::to_string(y) +
                            ".ppm";
    require_file(tile_path, "kept tile");
    SlideImage tile = read_ppm(tile_path, slide_id);
    check(tile.width == tile.height, "tile is not square: " + tile_path);
    Tensor input = tile.width == in_px
                       ? image_from_ppm(tile)
                       : tile_to_input(tile.pixels, tile.width, in_px);
    Tensor logits = model.forward(input, false);
    Tensor probs = softmax(logits, 0);
    Tensor feat = model.features(input, false);
    PatchRecord rec;
    rec.slide_id = slide_id;
    rec.x = x;
    rec.y = y;
    rec.class_probs = probs.data();
    rec.tissue_probs = svm_predict_probs(svm, feat.data());
    slides[slide_id].push_back(rec);
  }
  check(!slides.empty(), "no kept tiles in manifest: " + manifest);

  std::ostringstream os;
  os << "# " << kToolVersion << "\n";
  os << "# vote alpha=" << vp.alpha << " beta=" << vp.beta
     << " gamma=" << vp.gamma << (hard ? " mode=hard" : " mode=soft") << "\n";
  for (auto& [id, records] : slides) {
    SlideVerdict v = hard ? hard_vote(records) : soft_vote(records, vp);
    os << "slide " << id << " label " << v.label << " probs";
    for (double p : v.probs) os << " " << p;
    os << "\n";
    // histogram of patch weights (audit trail for the weighting scheme)
    std::map<double, int> hist;
    for (double w : v.weights) ++hist[w];
    os << "  weights";
    for (auto& [w, n] : hist) os << " " << w << "x" << n;
    if (v.tie) os << " (tie)";
    if (v.uniform_fallback) os << " (uniform fallback)";
    os << "\n";
  }
  emit_report(report_path, os.str());
  return 0;
}

int cmd_gradcheck(const std::string& cfg_path,
                  const std::vector<std::string>& overrides, int64_t samples) {
  Config cfg = load_run_config(cfg_path, overrides);
  ModelConfig mc = model_from_config(cfg);
  uint64_t seed = uint64_t(cfg_int(cfg, "train.seed", 0));
  Rng rng(seed);
  Model model(mc, rng);
  NamedParams np;
  model.named_params(np);
  std::vector<Tensor> params;
  for (auto& [name, t] : np) params.push_back(t);

  size_t n = size_t(3 * mc.backbone.img_h * mc.backbone.img_w);
  std::vector<double> img(n);
  for (double& v : img) v = rng.uniform();
  Tensor input =
      Tensor::from_data({3, mc.backbone.img_h, mc.backbone.img_w}, img);
  int target = int(rng.uniform_int(0, mc.num_classes - 1));
  std::function<Tensor()> loss_fn = [&]() {
    return cross_entropy(model.forward(input, true), target);
  };
  GradCheckResult res = finite_diff_check(loss_fn, params, rng, samples);
  std::cout << "# " << kToolVersion << " seed=" << seed << "\n";
  std::cout << "checked " << res.entries_checked << " entries\n";
  std::cout << "max relative error " << res.max_rel_err << "\n";
  return res.max_rel_err < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale texture classifier: training, tiling, and "
               "whole-slide prediction"};
  app.require_subcommand(1);

  std::string cfg_path, out_dir, data_dir, ckpt, svm_path, tiles, input,
      report_path;
  std::vector<std::string> overrides;
  int64_t window = 512, stride = 512, samples = 200;
  int threads = 1;
  FilterParams fp;
  VoteParams vp;
  bool hard = false;

  auto add_cfg = [&](CLI::App* sub) {
    sub->add_option("--config", cfg_path, "key=value configuration file");
    sub->add_option("--set", overrides,
                    "key=value overrides applied after the config file");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  add_cfg(gen);
  gen->add_option("--out", out_dir, "output directory")->required();

  CLI::App* tile = app.add_subcommand("tile", "tile and filter a slide image");
  tile->add_option("--input", input, "slide image (binary PPM)")->required();
  tile->add_option("--out", out_dir, "output directory")->required();
  tile->add_option("--window", window, "tile size in pixels");
  tile->add_option("--stride", stride, "tile stride in pixels");
  tile->add_option("--white-thresh", fp.white_thresh,
                   "white pixel threshold on min(R,G,B)");
  tile->add_option("--white-frac", fp.white_frac,
                   "reject when the white fraction exceeds this");
  tile->add_option("--red-frac", fp.red_frac,
                   "reject when the red fraction exceeds this");
  tile->add_option("--threads", threads, "worker threads");

  CLI::App* tr = app.add_subcommand("train", "train a classifier");
  add_cfg(tr);
  tr->add_option("--data", data_dir,
                 "dataset directory from gen-data (default: generate "
                 "in-memory from the config)");
  tr->add_option("--out", ckpt, "checkpoint output path");
  tr->add_option("--report", report_path, "report output path");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_cfg(ev);
  ev->add_option("--model", ckpt, "model checkpoint")->required();
  ev->add_option("--data", data_dir, "dataset directory from gen-data");
  ev->add_option("--report", report_path, "report output path");

  CLI::App* pw = app.add_subcommand(
      "predict-wsi", "aggregate tile predictions into slide verdicts");
  pw->add_option("--model", ckpt, "model checkpoint")->required();
  pw->add_option("--svm", svm_path, "tissue classifier checkpoint")->required();
  pw->add_option("--tiles", tiles, "tile directory or manifest file")
      ->required();
  pw->add_option("--alpha", vp.alpha, "weight on the first tissue component");
  pw->add_option("--beta", vp.beta, "weight on the second tissue component");
  pw->add_option("--gamma", vp.gamma, "weight for other-dominant patches");
  pw->add_flag("--hard", hard, "unweighted majority vote");
  pw->add_option("--report", report_path, "report output path");

  CLI::App* gc = app.add_subcommand(
      "gradcheck", "finite-difference check of the model gradients");
  add_cfg(gc);
  gc->add_option("--samples", samples, "parameter entries to sample");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(cfg_path, overrides, out_dir);
    if (tile->parsed())
      return cmd_tile(input, out_dir, window, stride, fp, threads);
    if (tr->parsed())
      return cmd_train(cfg_path, overrides, data_dir, ckpt, report_path);
    if (ev->parsed())
      return cmd_eval(ckpt, cfg_path, overrides, data_dir, report_path);
    if (pw->parsed())
      return cmd_predict_wsi(ckpt, svm_path, tiles, vp, hard, report_path);
    if (gc->parsed()) return cmd_gradcheck(cfg_path, overrides, samples);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
