#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "qmrs/error.hpp"
#include "qmrs/eval.hpp"
#include "qmrs/io/checkpoint.hpp"
#include "qmrs/io/config.hpp"
#include "qmrs/io/dataset_io.hpp"
#include "qmrs/io/overlay.hpp"
#include "qmrs/io/png.hpp"
#include "qmrs/model.hpp"
#include "qmrs/probes.hpp"
#include "qmrs/synthetic.hpp"
#include "qmrs/training.hpp"

// Command-line front end. Exit codes: 0 success, 1 usage or configuration
// error, 2 data, checkpoint or model error.
namespace qmrs::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

struct EvalOutcome {
  eval::MetricReport metrics;
  eval::IouSummary iou;
};

// Predictions use the ground-truth box and class (detection is out of scope);
// the refined RoI mask is pasted into the image frame and scored by its mean
// foreground confidence.
inline EvalOutcome evaluate_samples(const model::ModelParams<float>& p, const std::vector<InstanceSample>& samples,
                                    const io::EvalConfig& ecfg, bool timing) {
  EvalOutcome r;
  std::vector<eval::PredictionRecord> preds;
  std::vector<eval::GroundTruthRecord> gts;
  for (const auto& s : samples) {
    nc::Graph<float> g(false);
    const auto out = model::forward_refine(g, p, s.image, s.box);
    preds.push_back({s.id, s.cls, eval::mask_score(out.refined), eval::paste_mask(out.refined, s.box, s.image.width, s.image.height)});
    gts.push_back({s.id, s.cls, eval::paste_mask(s.gt_fine, s.box, s.image.width, s.image.height)});
  }
  r.metrics = eval::coco_metrics(preds, gts);
  r.iou = train::evaluate_iou(p, samples);
  if (timing && !samples.empty()) {
    const auto fps = eval::measure_fps(
        [&](std::size_t k) {
          nc::Graph<float> g(false);
          model::forward_refine(g, p, samples[k].image, samples[k].box);
        },
        samples.size(), ecfg.warmup, ecfg.repeats);
    r.metrics.fps = fps.mean;
    r.metrics.fps_std = fps.stddev;
  }
  return r;
}

// Zero-pads the right and bottom edges up to the next multiple of 32 (at least 64).
inline Image pad_to_stride(const Image& img) {
  auto up = [](int v) { return std::max(64, (v + 31) / 32 * 32); };
  if (up(img.width) == img.width && up(img.height) == img.height) return img;
  Image out(up(img.width), up(img.height));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, y, c);
  return out;
}

inline Box parse_box(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      raise<InputError>("--box: cannot parse '", part, "' as a number");
    }
  }
  if (v.size() != 4) raise<InputError>("--box expects x0,y0,x1,y1");
  const Box b{v[0], v[1], v[2], v[3]};
  if (!b.valid()) raise<InputError>("--box must have x1 > x0 and y1 > y0");
  return b;
}

inline const std::vector<InstanceSample>& pick_split(const DatasetSplit& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "val") return d.val;
  return d.test;
}

class App {
 public:
  App(std::ostream& out, std::ostream& err) : out_(out), err_(err) {
    app_.name("qmrs");
    app_.description("Quadtree mask refinement: synthetic data, training, evaluation and visualization");
    app_.require_subcommand(1);
    app_.set_help_all_flag("--help-all", "Expand all help");

    auto* gen = app_.add_subcommand("gen-data", "Generate a seeded synthetic dataset directory");
    gen->add_option("--n", gen_.n, "Number of samples")->capture_default_str();
    gen->add_option("--seed", gen_.seed, "Generator seed")->capture_default_str();
    gen->add_option("--size", gen_.image_size, "Image side in pixels (multiple of 32)")->capture_default_str();
    gen->add_option("--out", out_dir_, "Output directory")->required();
    gen->callback([this] { code_ = gen_data(); });

    auto* tr = app_.add_subcommand("train", "Train a model and write the best-validation checkpoint");
    tr->add_option("--data", data_dir_, "Dataset directory")->required();
    tr->add_option("--config", config_path_, "Config file (key = value lines)");
    tr->add_option("--set", overrides_, "Override a config key, key=value (repeatable)");
    tr->add_option("--out", ckpt_path_, "Checkpoint path")->required();
    tr->add_option("--log", log_path_, "Also write the epoch log to this file");
    tr->callback([this] { code_ = train(); });

    auto* ev = app_.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    ev->add_option("--data", data_dir_, "Dataset directory")->required();
    ev->add_option("--ckpt", ckpt_path_, "Checkpoint path")->required();
    ev->add_option("--split", split_, "Split to evaluate")->check(CLI::IsMember({"val", "test"}))->capture_default_str();
    ev->add_option("--report", report_path_, "Report output path")->required();
    ev->add_flag("--no-timing", no_timing_, "Skip the FPS measurement (report is then fully deterministic)");
    ev->callback([this] { code_ = evaluate(); });

    auto* rf = app_.add_subcommand("refine", "Refine one box of one image and write the pasted mask");
    rf->add_option("--ckpt", ckpt_path_, "Checkpoint path")->required();
    rf->add_option("--image", image_path_, "Input PNG")->required();
    rf->add_option("--box", box_text_, "Box as x0,y0,x1,y1 in pixels")->required();
    rf->add_option("--out", out_png_, "Output mask PNG (image resolution, 0/255)")->required();
    rf->add_option("--overlay", overlay_png_, "Also write a coarse/refined comparison PNG");
    rf->callback([this] { code_ = refine(); });

    auto* vz = app_.add_subcommand("viz", "Write coarse/refined comparison panels for a split");
    vz->add_option("--data", data_dir_, "Dataset directory")->required();
    vz->add_option("--ckpt", ckpt_path_, "Checkpoint path")->required();
    vz->add_option("--out", out_dir_, "Output directory")->required();
    vz->add_option("--split", split_, "Split to render")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    vz->add_option("--limit", limit_, "Render at most this many samples (0 = all)")->capture_default_str();
    vz->callback([this] { code_ = viz(); });

    auto* gc = app_.add_subcommand("gradcheck", "Finite-difference check of the full model gradient");
    gc->add_option("--seed", gc_seed_, "Probe seed")->capture_default_str();
    gc->add_option("--eps", gc_eps_, "Central-difference step")->capture_default_str();
    gc->add_option("--tol", gc_tol_, "Maximum accepted relative error")->capture_default_str();
    gc->callback([this] { code_ = gradcheck(); });
  }

  int run(int argc, const char* const* argv) {
    try {
      app_.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out_ << app_.help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out_ << app_.help("", CLI::AppFormatMode::All);
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err_ << "error: " << e.what() << "\n\n" << app_.help();
      return kExitUsage;
    } catch (const ConfigError& e) {
      err_ << "config error: " << e.what() << "\n";
      return kExitUsage;
    } catch (const InputError& e) {
      err_ << "input error: " << e.what() << "\n";
      return kExitUsage;
    } catch (const Error& e) {
      err_ << "error: " << e.what() << "\n";
      return kExitData;
    } catch (const std::filesystem::filesystem_error& e) {
      err_ << "error: " << e.what() << "\n";
      return kExitData;
    }
    return code_;
  }

 private:
  int gen_data() {
    io::DataConfig d = gen_;
    if (d.n < 10) raise<ConfigError>("--n must be at least 10");
    const auto split = synth::generate_synthetic_dataset(d.n, d.seed, d.image_size);
    io::write_dataset(split, out_dir_, d.seed);
    out_ << "wrote " << split.size() << " samples (" << split.train.size() << " train, " << split.val.size() << " val, "
         << split.test.size() << " test) to " << out_dir_ << "\n";
    return kExitOk;
  }

  int train() {
    io::Config cfg = config_path_.empty() ? io::Config{} : io::load_config(config_path_);
    for (const auto& o : overrides_) io::apply_override(cfg, o);
    cfg.validate();
    const auto data = io::read_dataset(data_dir_);
    std::ofstream log;
    if (!log_path_.empty()) {
      log.open(log_path_);
      if (!log) raise<DataError>("cannot write log ", log_path_);
    }
    const auto res = train::train(data, cfg.model, cfg.train, [&](const std::string& line) {
      out_ << line << "\n" << std::flush;
      if (log.is_open()) log << line << "\n";
    });
    io::save_checkpoint({cfg, res.params, res.best_epoch, res.best_val_iou}, ckpt_path_);
    return kExitOk;
  }

  int evaluate() {
    const auto ck = io::load_checkpoint(ckpt_path_);
    const auto data = io::read_dataset(data_dir_);
    const auto& samples = pick_split(data, split_);
    const auto r = evaluate_samples(ck.params, samples, ck.config.eval, !no_timing_);
    const auto text = eval::format_report(r.metrics, r.iou, split_);
    std::ofstream f(report_path_);
    f << text;
    if (!f) raise<DataError>("cannot write report ", report_path_);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s refined_iou=%.9f coarse_iou=%.9f AP=%s", split_.c_str(), r.iou.refined, r.iou.coarse,
                  eval::format_value(r.metrics.ap, 100.0).c_str());
    out_ << buf << "\n";
    return kExitOk;
  }

  int refine() {
    const auto ck = io::load_checkpoint(ckpt_path_);
    const auto original = io::read_image(image_path_);
    const auto box = parse_box(box_text_);
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > original.width || box.y1 > original.height)
      raise<InputError>("--box lies outside the ", original.width, "x", original.height, " image");
    const auto padded = pad_to_stride(original);
    nc::Graph<float> g(false);
    const auto out = model::forward_refine(g, ck.params, padded, box);
    const auto mask = eval::paste_mask(out.refined, box, original.width, original.height);
    io::Raster r{original.width, original.height, 1, {}};
    for (auto b : mask.bits) r.bytes.push_back(b ? 255 : 0);
    io::write_png(out_png_, r);
    if (!overlay_png_.empty()) io::write_file(overlay_png_, io::render_overlay(original, out.coarse, out.refined, box));
    out_ << "refined " << out.tree.size() << " nodes, " << mask.area() << " foreground pixels\n";
    return kExitOk;
  }

  int viz() {
    const auto ck = io::load_checkpoint(ckpt_path_);
    const auto data = io::read_dataset(data_dir_);
    const auto& samples = pick_split(data, split_);
    std::filesystem::create_directories(out_dir_);
    std::size_t written = 0;
    for (const auto& s : samples) {
      if (limit_ && written == limit_) break;
      nc::Graph<float> g(false);
      const auto out = model::forward_refine(g, ck.params, s.image, s.box);
      io::write_file(std::filesystem::path(out_dir_) / (s.id + ".png"), io::render_overlay(s.image, out.coarse, out.refined, s.box));
      ++written;
    }
    out_ << "wrote " << written << " overlays to " << out_dir_ << "\n";
    return kExitOk;
  }

  int gradcheck() {
    const auto r = probes::model_gradcheck(gc_seed_, gc_eps_);
    char buf[256];
    std::snprintf(buf, sizeof buf, "gradcheck: %zu tensors, %zu entries, max relative error %.3e at %s (%.1f s)", r.tensors,
                  r.result.entries, r.result.max_error, r.result.worst.c_str(), r.seconds);
    out_ << buf << "\n";
    return r.result.max_error < gc_tol_ ? kExitOk : kExitData;
  }

  std::ostream& out_;
  std::ostream& err_;
  CLI::App app_;
  int code_ = kExitOk;

  io::DataConfig gen_;
  std::string out_dir_, data_dir_, config_path_, ckpt_path_, log_path_, report_path_, image_path_, box_text_, out_png_, overlay_png_;
  std::vector<std::string> overrides_;
  std::string split_ = "test";
  bool no_timing_ = false;
  std::size_t limit_ = 0;
  std::uint64_t gc_seed_ = 4;
  double gc_eps_ = 1e-3;
  double gc_tol_ = 1e-3;
};

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  App app(out, err);
  return app.run(argc, argv);
}

}  // namespace qmrs::cli
