/*
Copyright 2026 The panodr Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS-IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
*/

#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "panodr/checkpoint.hpp"
#include "panodr/dr_dataset.hpp"
#include "panodr/dr_generator.hpp"
#include "panodr/image_io.hpp"
#include "panodr/pipeline.hpp"
#include "panodr/structure_net.hpp"
#include "panodr/supervision.hpp"

#ifndef PANODR_GIT_REV
#define PANODR_GIT_REV "unknown"
#endif

namespace panodr::train {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Stage { kStructure, kGenerator };

struct TrainConfig {
  Stage stage = Stage::kStructure;
  std::string data_dir;  // empty: synthesize toy scenes
  int synth_count = 200;
  std::uint64_t data_seed = 7;
  int height = 64;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  int batch_size = 4;
  int steps = 2000;
  double lr_g = 1e-4;
  double lr_d = 4e-4;
  double lr_s = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  std::uint64_t seed = 0;
  int eval_every = 200;
  int eval_limit = 0;  // 0 evaluates the whole validation split
  std::string ckpt_dir = "runs/default";
  std::string structure_ckpt;
  bool disable_structure_guidance = false;
  // Generator stage only: also update a copy of the structure net through the
  // generator loss plus its layout loss. The critic stays frozen either way.
  bool joint_finetune = false;
  StructureNetConfig structure;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;

  void validate() const {
    if (steps <= 0) throw std::invalid_argument("steps must be > 0");
    if (batch_size <= 0) throw std::invalid_argument("batch_size must be > 0");
    if (eval_every <= 0) throw std::invalid_argument("eval_every must be > 0");
    if (height < 16 || height % 2 != 0) throw std::invalid_argument("height must be even and >= 16");
    if (data_dir.empty() && synth_count < 3) throw std::invalid_argument("synth_count must be >= 3");
    if (!(lr_g > 0 && lr_d > 0 && lr_s > 0)) throw std::invalid_argument("learning rates must be > 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) {
      throw std::invalid_argument("invalid Adam settings");
    }
    weights.validate();
    structure.validate();
    generator.validate();
  }

  // The ablation is on if either copy of the flag is set.
  bool ablated() const { return disable_structure_guidance || generator.disable_structure_guidance; }

  json to_json() const {
    GeneratorConfig g = generator;
    g.disable_structure_guidance = ablated();
    return {{"stage", stage == Stage::kStructure ? "structure" : "generator"},
            {"data_dir", data_dir},
            {"synth_count", synth_count},
            {"data_seed", data_seed},
            {"height", height},
            {"split", split},
            {"batch_size", batch_size},
            {"steps", steps},
            {"lr_g", lr_g},
            {"lr_d", lr_d},
            {"lr_s", lr_s},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"loss_weights", weights.to_json()},
            {"seed", seed},
            {"eval_every", eval_every},
            {"eval_limit", eval_limit},
            {"ckpt_dir", ckpt_dir},
            {"structure_ckpt", structure_ckpt},
            {"disable_structure_guidance", ablated()},
            {"joint_finetune", joint_finetune},
            {"structure_net", structure.to_json()},
            {"generator", g.to_json()},
            {"discriminator", discriminator.to_json()}};
  }

  static TrainConfig from_json(const json& j) {
    static const std::set<std::string> known = {
        "stage",   "data_dir",   "synth_count", "data_seed",      "height",         "split",
        "batch_size", "steps",   "lr_g",        "lr_d",           "lr_s",           "beta1",
        "beta2",   "adam_eps",   "loss_weights", "seed",          "eval_every",     "eval_limit",
        "ckpt_dir", "structure_ckpt", "disable_structure_guidance", "joint_finetune", "structure_net",
        "generator", "discriminator"};
    for (const auto& [k, _] : j.items()) {
      if (!known.count(k)) throw std::invalid_argument("unknown TrainConfig field '" + k + "'");
    }
    TrainConfig c;
    const std::string stage = j.value("stage", "structure");
    if (stage == "structure") {
      c.stage = Stage::kStructure;
    } else if (stage == "generator") {
      c.stage = Stage::kGenerator;
    } else {
      throw std::invalid_argument("stage must be 'structure' or 'generator', got '" + stage + "'");
    }
    c.data_dir = j.value("data_dir", c.data_dir);
    c.synth_count = j.value("synth_count", c.synth_count);
    c.data_seed = j.value("data_seed", c.data_seed);
    c.height = j.value("height", c.height);
    c.split = j.value("split", c.split);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.lr_g = j.value("lr_g", c.lr_g);
    c.lr_d = j.value("lr_d", c.lr_d);
    c.lr_s = j.value("lr_s", c.lr_s);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    if (j.contains("loss_weights")) c.weights = LossWeights::from_json(j.at("loss_weights"));
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_limit = j.value("eval_limit", c.eval_limit);
    c.ckpt_dir = j.value("ckpt_dir", c.ckpt_dir);
    c.structure_ckpt = j.value("structure_ckpt", c.structure_ckpt);
    c.joint_finetune = j.value("joint_finetune", c.joint_finetune);
    if (j.contains("structure_net")) c.structure = StructureNetConfig::from_json(j.at("structure_net"));
    if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j.at("generator"));
    if (j.contains("discriminator")) c.discriminator = DiscriminatorConfig::from_json(j.at("discriminator"));
    // The top-level flag wins; it is the documented switch for the ablation.
    c.disable_structure_guidance =
        j.value("disable_structure_guidance", c.generator.disable_structure_guidance);
    c.generator.disable_structure_guidance = c.disable_structure_guidance;
    c.validate();
    return c;
  }

  std::string fingerprint() const { return ckpt::config_fingerprint(to_json()); }
};

// A loss term or parameter became NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& term, std::int64_t step)
      : std::runtime_error("non-finite value in '" + term + "' at step " + std::to_string(step)),
        term_(term),
        step_(step) {}
  const std::string& term() const { return term_; }
  std::int64_t step() const { return step_; }

 private:
  std::string term_;
  std::int64_t step_;
};

struct StepRecord {
  std::int64_t step = 0;
  std::map<std::string, double> losses;
  double wall_s = 0;
};

struct EvalRecord {
  std::int64_t step = 0;
  json metrics;
  double wall_s = 0;
};

struct RunLog {
  std::string stage;
  json config;
  std::string config_fingerprint;
  std::string git_rev = PANODR_GIT_REV;
  std::string started_at;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  // Everything except wall-clock fields; two runs of the same (config, seed)
  // on the same platform produce identical documents.
  json deterministic_json() const {
    json st = json::array(), ev = json::array();
    for (const auto& s : steps) st.push_back({{"step", s.step}, {"losses", s.losses}});
    for (const auto& e : evals) ev.push_back({{"step", e.step}, {"metrics", e.metrics}});
    return {{"stage", stage}, {"config", config}, {"config_fingerprint", config_fingerprint},
            {"git_rev", git_rev}, {"steps", st}, {"evals", ev}};
  }

  json to_json() const {
    json j = deterministic_json();
    j["started_at"] = started_at;
    for (std::size_t i = 0; i < steps.size(); ++i) j["steps"][i]["wall_s"] = steps[i].wall_s;
    for (std::size_t i = 0; i < evals.size(); ++i) j["evals"][i]["wall_s"] = evals[i].wall_s;
    return j;
  }

  static RunLog from_json(const json& j) {
    RunLog r;
    r.stage = j.at("stage").get<std::string>();
    r.config = j.value("config", json::object());
    r.config_fingerprint = j.value("config_fingerprint", "");
    r.git_rev = j.value("git_rev", "unknown");
    r.started_at = j.value("started_at", "");
    for (const auto& s : j.at("steps")) {
      r.steps.push_back({s.at("step").get<std::int64_t>(), s.at("losses").get<std::map<std::string, double>>(),
                         s.value("wall_s", 0.0)});
    }
    for (const auto& e : j.at("evals")) {
      r.evals.push_back({e.at("step").get<std::int64_t>(), e.at("metrics"), e.value("wall_s", 0.0)});
    }
    return r;
  }

  static RunLog load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open run log " + path.string());
    return from_json(json::parse(in));
  }

  void save(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << to_json().dump(1) << "\n";
    if (!out) throw std::runtime_error("cannot write run log " + path.string());
  }
};

// ---------------------------------------------------------------------------
// Data.

inline data::Split load_split(const TrainConfig& cfg) {
  std::vector<data::DRSample> samples;
  if (cfg.data_dir.empty()) {
    samples = data::synth_dataset(cfg.synth_count, cfg.height, cfg.data_seed);
  } else {
    if (!fs::is_directory(cfg.data_dir)) throw std::runtime_error("dataset directory not found: " + cfg.data_dir);
    samples = data::load_dataset(cfg.data_dir);
    if (samples.empty()) throw std::runtime_error("dataset directory " + cfg.data_dir + " holds no samples");
    for (const auto& s : samples) {
      if (s.height() != cfg.height) {
        throw std::runtime_error("sample " + s.scene_id + " has height " + std::to_string(s.height()) +
                                 ", config expects " + std::to_string(cfg.height));
      }
    }
  }
  auto split = data::split_dataset(std::move(samples), cfg.split);
  if (split.train.empty()) throw std::runtime_error("training split is empty");
  return split;
}

struct Batch {
  Tensor<float> input;   // (N,4,H,W)
  Tensor<float> rgb;     // (N,3,H,W) observed image
  Tensor<float> target;  // (N,3,H,W) empty scene
  Tensor<float> mask;    // (N,1,H,W)
  std::vector<const data::LayoutMap*> layouts;
  std::vector<std::uint8_t> labels;
};

inline Batch make_batch(const std::vector<data::DRSample>& samples, const std::vector<std::size_t>& idx) {
  std::vector<Tensor<float>> rgb, target, mask;
  Batch b;
  for (std::size_t i : idx) {
    rgb.push_back(samples[i].furnished);
    target.push_back(samples[i].empty);
    mask.push_back(samples[i].mask);
    b.layouts.push_back(&samples[i].layout);
  }
  b.rgb = stack_batch<float>(rgb);
  b.target = stack_batch<float>(target);
  b.mask = stack_batch<float>(mask);
  b.input = model_input(b.rgb, b.mask);
  b.labels = stack_labels(b.layouts);
  return b;
}

// Seed-determined order: a fresh permutation of the training set per epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, int batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {}

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (static_cast<int>(out.size()) < batch_) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    Rng rng(mix_seed(seed_, epoch_++));
    rng.shuffle(order_);
    pos_ = 0;
  }

  std::size_t n_;
  int batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation.

// Maps (sample, (1,4,H,W) model input) to a (1,3,H,W) composited prediction.
using Predictor = std::function<Tensor<float>(const data::DRSample&, const Tensor<float>&)>;

// Layout the structure net assigns to a fully observed image.
inline data::LayoutMap observed_layout(const StructureNet<float>& net, const Tensor<float>& image) {
  ag::NoGradGuard no_grad;
  const Tensor<float> zero({image.n(), 1, image.h(), image.w()});
  return argmax_layout(net.forward(ag::Var<float>(model_input(image, zero))).value());
}

// Per-sample hole metrics. layout_iou_hole scores the structure net's layout
// of the prediction against the ground truth inside the mask.
inline std::vector<MetricsReport> evaluate_predictions(const StructureNet<float>& evaluator,
                                                       const std::vector<data::DRSample>& samples,
                                                       const Predictor& predict, int limit = 0) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
  const std::size_t n = limit > 0 ? std::min<std::size_t>(limit, samples.size()) : samples.size();
  std::vector<MetricsReport> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    const Tensor<float> pred = predict(s, model_input(s.furnished, s.mask));
    MetricsReport r;
    r.scene_id = s.scene_id;
    r.psnr_hole = psnr_hole(pred, s.empty, s.mask);
    r.ssim_hole = ssim_hole(pred, s.empty, s.mask);
    r.l1_hole = l1_hole(pred, s.empty, s.mask);
    r.layout_iou_hole = layout_miou(observed_layout(evaluator, pred), s.layout, &s.mask);
    out.push_back(std::move(r));
  }
  return out;
}

inline Predictor pipeline_predictor(const StructureNet<float>& structure, const Generator<float>& generator) {
  return [&structure, &generator](const data::DRSample& s, const Tensor<float>& input) {
    ag::NoGradGuard no_grad;
    const ag::Var<float> in(input);
    const auto raw = generator.generate(in, structure.forward(in));
    return ag::composite(ag::Var<float>(s.furnished), raw, s.mask).value();
  };
}

// Baseline: every hole pixel takes the per-channel mean of the observed pixels.
inline Predictor context_mean_fill_predictor() {
  return [](const data::DRSample& s, const Tensor<float>&) {
    Tensor<float> raw(s.furnished.shape());
    const std::size_t plane = s.furnished.shape().plane();
    const float* m = s.mask.data();
    for (int c = 0; c < 3; ++c) {
      double sum = 0;
      std::size_t count = 0;
      const float* p = s.furnished.plane(0, c);
      for (std::size_t i = 0; i < plane; ++i) {
        if (m[i] == 0.0f) {
          sum += p[i];
          ++count;
        }
      }
      std::fill_n(raw.plane(0, c), plane, count ? static_cast<float>(sum / count) : 0.5f);
    }
    return ag::composite(ag::Var<float>(s.furnished), ag::Var<float>(raw), s.mask).value();
  };
}

// Perfect prediction: the empty scene itself.
inline Predictor target_predictor() {
  return [](const data::DRSample& s, const Tensor<float>&) { return s.empty; };
}

inline json structure_metrics(const StructureNet<float>& net, const std::vector<data::DRSample>& samples,
                              int limit = 0) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
  const std::size_t n = limit > 0 ? std::min<std::size_t>(limit, samples.size()) : samples.size();
  ag::NoGradGuard no_grad;
  double miou = 0, miou_hole = 0, acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = samples[i];
    const auto pred = argmax_layout(net.forward(ag::Var<float>(model_input(s.furnished, s.mask))).value());
    miou += layout_miou(pred, s.layout);
    miou_hole += data::mask_area_fraction(s.mask) > 0 ? layout_miou(pred, s.layout, &s.mask) : 1.0;
    std::size_t hit = 0;
    for (std::size_t k = 0; k < pred.labels.size(); ++k) hit += pred.labels[k] == s.layout.labels[k];
    acc += static_cast<double>(hit) / static_cast<double>(pred.labels.size());
  }
  const double d = static_cast<double>(n);
  return {{"miou", miou / d}, {"miou_hole", miou_hole / d}, {"pixel_acc", acc / d}};
}

// ---------------------------------------------------------------------------
// Training.

struct TrainResult {
  RunLog log;
  fs::path checkpoint;  // final model checkpoint
  ckpt::CheckpointMeta meta;
};

// Called after each evaluation; may be used for progress output.
using EvalHook = std::function<void(const EvalRecord&)>;

namespace detail {

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

inline double check_finite(const ag::Var<float>& v, const std::string& term, std::int64_t step) {
  const double x = v.value().item();
  if (!std::isfinite(x)) throw NonFiniteError(term, step);
  return x;
}

inline void check_params(const nn::ParamSet<float>& ps, const std::string& model, std::int64_t step) {
  for (const auto& [name, v] : ps.items()) {
    if (!v.value().all_finite()) throw NonFiniteError(model + " parameter " + name, step);
  }
}

inline nn::AdamConfig adam(const TrainConfig& c, double lr) { return {lr, c.beta1, c.beta2, c.adam_eps}; }

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline fs::path step_path(const TrainConfig& c, const std::string& kind, std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_step%06lld.ckpt", static_cast<long long>(step));
  return fs::path(c.ckpt_dir) / (kind + buf);
}

inline json history(const RunLog& log) {
  json h = json::array();
  for (const auto& e : log.evals) h.push_back({{"step", e.step}, {"metrics", e.metrics}});
  return h;
}

}  // namespace detail

inline TrainResult train_structure(const TrainConfig& cfg, const EvalHook& hook = {}) {
  cfg.validate();
  const auto split = load_split(cfg);
  const auto& val = split.val.empty() ? split.train : split.val;
  require_divisible({1, 4, cfg.height, 2 * cfg.height}, cfg.structure.depth, "structure net");

  RunLog log;
  log.stage = "structure";
  log.config = cfg.to_json();
  log.config_fingerprint = cfg.fingerprint();
  log.started_at = detail::utc_now();
  detail::Clock clock;

  StructureNet<float> net(cfg.structure, mix_seed(cfg.seed, 1));
  nn::Adam<float> opt(net.params(), detail::adam(cfg, cfg.lr_s));
  BatchSampler sampler(split.train.size(), cfg.batch_size, mix_seed(cfg.seed, 2));
  const fs::path final_path = fs::path(cfg.ckpt_dir) / "structure_net.ckpt";
  ckpt::CheckpointMeta meta;

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    const Batch b = make_batch(split.train, sampler.next());
    const auto loss = layout_loss(net.forward(ag::Var<float>(b.input)), b.layouts);
    const double l = detail::check_finite(loss, "layout", step);
    ag::backward(loss);
    opt.step();
    detail::check_params(net.params(), "structure_net", step);
    log.steps.push_back({step, {{"layout", l}}, clock.seconds()});

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      log.evals.push_back({step, structure_metrics(net, val, cfg.eval_limit), clock.seconds()});
      const auto hist = detail::history(log);
      ckpt::save(detail::step_path(cfg, "structure_net", step), "structure_net", cfg.structure.to_json(),
                 net.params(), step, hist);
      meta = ckpt::save(final_path, "structure_net", cfg.structure.to_json(), net.params(), step, hist);
      if (hook) hook(log.evals.back());
    }
  }
  log.save(fs::path(cfg.ckpt_dir) / "runlog.json");
  return {std::move(log), final_path, meta};
}

inline TrainResult train_generator(const TrainConfig& cfg, const EvalHook& hook = {}) {
  cfg.validate();
  if (cfg.structure_ckpt.empty()) {
    throw std::invalid_argument("generator stage requires structure_ckpt (train the structure stage first)");
  }
  const auto split = load_split(cfg);
  const auto& val = split.val.empty() ? split.train : split.val;

  // Frozen structural critic, also the layout source unless fine-tuning.
  ckpt::CheckpointMeta structure_meta;
  const auto critic = load_structure_net(cfg.structure_ckpt, &structure_meta);
  critic->params().set_trainable(false);
  require_divisible({1, 4, cfg.height, 2 * cfg.height}, critic->config().depth, "structure checkpoint");
  std::unique_ptr<StructureNet<float>> tuned;
  if (cfg.joint_finetune) tuned = load_structure_net(cfg.structure_ckpt);
  const StructureNet<float>& layout_net = tuned ? *tuned : *critic;
  const std::vector<float> critic_before = critic->params().flatten();

  GeneratorConfig gcfg = cfg.generator;
  gcfg.disable_structure_guidance = cfg.ablated();
  require_divisible({1, 4, cfg.height, 2 * cfg.height}, gcfg.depth, "generator");
  require_divisible({1, 3, cfg.height, 2 * cfg.height}, static_cast<int>(cfg.discriminator.channels.size()),
                    "discriminator");
  Generator<float> gen(gcfg, mix_seed(cfg.seed, 3));
  Discriminator<float> disc(cfg.discriminator, mix_seed(cfg.seed, 4));
  nn::Adam<float> opt_g(gen.params(), detail::adam(cfg, cfg.lr_g));
  nn::Adam<float> opt_d(disc.params(), detail::adam(cfg, cfg.lr_d));
  std::optional<nn::Adam<float>> opt_s;
  if (tuned) opt_s.emplace(tuned->params(), detail::adam(cfg, cfg.lr_s));
  BatchSampler sampler(split.train.size(), cfg.batch_size, mix_seed(cfg.seed, 2));

  RunLog log;
  log.stage = "generator";
  log.config = cfg.to_json();
  log.config["structure_fingerprint"] = structure_meta.fingerprint;
  log.config["structure_weights_hash"] = structure_meta.weights_hash;
  log.config_fingerprint = ckpt::config_fingerprint(log.config);
  log.started_at = detail::utc_now();
  detail::Clock clock;
  const LossWeights& w = cfg.weights;
  const fs::path final_path = fs::path(cfg.ckpt_dir) / "generator.ckpt";
  ckpt::CheckpointMeta meta;

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    const Batch b = make_batch(split.train, sampler.next());
    const ag::Var<float> input(b.input), rgb(b.rgb), target(b.target);
    std::map<std::string, double> rec;

    ag::Var<float> layout;
    if (tuned) {
      layout = tuned->forward(input);
    } else {
      ag::NoGradGuard no_grad;
      layout = ag::Var<float>(critic->forward(input).value());
    }

    // Discriminator step on the detached composite.
    Tensor<float> fake;
    {
      ag::NoGradGuard no_grad;
      fake = ag::composite(rgb, gen.generate(input, ag::Var<float>(layout.value())), b.mask).value();
    }
    const auto d_loss = hinge_d_loss(disc.forward(target), disc.forward(ag::Var<float>(fake)));
    rec["d_hinge"] = detail::check_finite(d_loss, "d_hinge", step);
    ag::backward(d_loss);
    opt_d.step();

    // Generator step; the discriminator is held fixed.
    disc.params().set_trainable(false);
    const auto raw = gen.generate(input, layout);
    const auto comp = ag::composite(rgb, raw, b.mask);
    const auto adv = hinge_g_loss(disc.forward(comp));
    const auto recon = recon_loss(raw, target, b.mask, static_cast<float>(w.w_rec_hole),
                                  static_cast<float>(w.w_rec_valid));
    const auto perc = perceptual_loss(comp, target);
    const auto st = structure_consistency_loss(comp, *critic, b.labels, b.mask);
    rec["g_adv"] = detail::check_finite(adv, "g_adv", step);
    rec["recon"] = detail::check_finite(recon, "recon", step);
    rec["perceptual"] = detail::check_finite(perc, "perceptual", step);
    rec["structure"] = detail::check_finite(st, "structure", step);
    std::vector<std::pair<float, ag::Var<float>>> terms = {{static_cast<float>(w.w_adv), adv},
                                                           {1.0f, recon},
                                                           {static_cast<float>(w.w_perc), perc},
                                                           {static_cast<float>(w.w_struct), st}};
    if (tuned) {
      const auto lay = layout_loss(layout, b.layouts);
      rec["layout"] = detail::check_finite(lay, "layout", step);
      terms.push_back({1.0f, lay});
    }
    const auto g_total = ag::weighted_sum(terms);
    rec["g_total"] = detail::check_finite(g_total, "g_total", step);
    ag::backward(g_total);
    opt_g.step();
    if (opt_s) opt_s->step();
    disc.params().set_trainable(true);
    detail::check_params(gen.params(), "generator", step);
    detail::check_params(disc.params(), "discriminator", step);
    log.steps.push_back({step, std::move(rec), clock.seconds()});

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const auto reports =
          evaluate_predictions(*critic, val, pipeline_predictor(layout_net, gen), cfg.eval_limit);
      log.evals.push_back({step, aggregate(reports).to_json(), clock.seconds()});
      const auto hist = detail::history(log);
      ckpt::save(detail::step_path(cfg, "generator", step), "generator", gcfg.to_json(), gen.params(), step, hist);
      meta = ckpt::save(final_path, "generator", gcfg.to_json(), gen.params(), step, hist);
      ckpt::save(fs::path(cfg.ckpt_dir) / "discriminator.ckpt", "discriminator", cfg.discriminator.to_json(),
                 disc.params(), step);
      if (tuned) {
        ckpt::save(fs::path(cfg.ckpt_dir) / "structure_net_tuned.ckpt", "structure_net", tuned->config().to_json(),
                   tuned->params(), step);
      }
      if (hook) hook(log.evals.back());
    }
  }
  if (critic->params().flatten() != critic_before) {
    throw std::logic_error("structural critic parameters changed during generator training");
  }
  log.save(fs::path(cfg.ckpt_dir) / "runlog.json");
  return {std::move(log), final_path, meta};
}

inline TrainResult train(const TrainConfig& cfg, const EvalHook& hook = {}) {
  return cfg.stage == Stage::kStructure ? train_structure(cfg, hook) : train_generator(cfg, hook);
}

// ---------------------------------------------------------------------------
// Convergence comparison.

inline constexpr std::int64_t kNever = std::numeric_limits<std::int64_t>::max();

struct ConvergenceReport {
  double threshold = 0;
  std::string metric = "psnr_hole";
  std::int64_t steps_a = kNever;  // kNever: threshold never reached
  std::int64_t steps_b = kNever;
  std::vector<std::int64_t> grid;
  std::vector<double> a, b;

  json to_json() const {
    const auto steps = [](std::int64_t s) -> json { return s == kNever ? json("inf") : json(s); };
    json deltas = json::array();
    for (std::size_t i = 0; i < grid.size(); ++i) {
      deltas.push_back({{"step", grid[i]}, {"a", a[i]}, {"b", b[i]}, {"delta", a[i] - b[i]}});
    }
    return {{"metric", metric},
            {"threshold", threshold},
            {"steps_to_threshold", {{"a", steps(steps_a)}, {"b", steps(steps_b)}}},
            {"per_eval", deltas}};
  }
};

inline std::int64_t steps_to_threshold(const std::vector<std::int64_t>& grid, const std::vector<double>& values,
                                       double threshold) {
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (values[i] >= threshold) return grid[i];
  }
  return kNever;
}

inline ConvergenceReport convergence_report(const RunLog& log_a, const RunLog& log_b, double threshold,
                                            const std::string& metric = "psnr_hole") {
  ConvergenceReport r;
  r.threshold = threshold;
  r.metric = metric;
  if (log_a.evals.size() != log_b.evals.size()) {
    throw std::invalid_argument("convergence_report: eval grids differ in length (" +
                                std::to_string(log_a.evals.size()) + " vs " + std::to_string(log_b.evals.size()) +
                                ")");
  }
  for (std::size_t i = 0; i < log_a.evals.size(); ++i) {
    if (log_a.evals[i].step != log_b.evals[i].step) {
      throw std::invalid_argument("convergence_report: eval grids differ at index " + std::to_string(i) + " (step " +
                                  std::to_string(log_a.evals[i].step) + " vs " +
                                  std::to_string(log_b.evals[i].step) + ")");
    }
    r.grid.push_back(log_a.evals[i].step);
    r.a.push_back(log_a.evals[i].metrics.at(metric).get<double>());
    r.b.push_back(log_b.evals[i].metrics.at(metric).get<double>());
  }
  r.steps_a = steps_to_threshold(r.grid, r.a, threshold);
  r.steps_b = steps_to_threshold(r.grid, r.b, threshold);
  return r;
}

namespace detail {

inline void plot_line(std::vector<std::uint8_t>& px, int w, int h, int x0, int y0, int x1, int y1,
                      std::array<std::uint8_t, 3> color) {
  const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
  for (int i = 0; i <= steps; ++i) {
    const int x = x0 + (x1 - x0) * i / steps, y = y0 + (y1 - y0) * i / steps;
    for (int dy = 0; dy <= 1; ++dy) {
      const int yy = y + dy;
      if (x < 0 || x >= w || yy < 0 || yy >= h) continue;
      for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(yy) * w + x) * 3 + c] = color[c];
    }
  }
}

}  // namespace detail

// Metric-vs-step curves: run a in blue, run b in orange, threshold dashed gray.
inline std::vector<std::uint8_t> plot_convergence_png(const ConvergenceReport& r, int width = 480, int height = 320) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height * 3, 255);
  const int left = 40, right = width - 10, top = 10, bottom = height - 30;
  double lo = r.threshold, hi = r.threshold;
  for (double v : r.a) lo = std::min(lo, v), hi = std::max(hi, v);
  for (double v : r.b) lo = std::min(lo, v), hi = std::max(hi, v);
  if (hi - lo < 1e-9) hi = lo + 1;
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  const double s0 = r.grid.empty() ? 0 : static_cast<double>(r.grid.front());
  const double s1 = r.grid.empty() ? 1 : std::max(s0 + 1, static_cast<double>(r.grid.back()));
  const auto X = [&](double s) { return left + static_cast<int>(std::lround((s - s0) / (s1 - s0) * (right - left))); };
  const auto Y = [&](double v) { return bottom - static_cast<int>(std::lround((v - lo) / (hi - lo) * (bottom - top))); };
  const std::array<std::uint8_t, 3> axis{0, 0, 0}, gray{150, 150, 150}, blue{31, 119, 180}, orange{255, 127, 14};
  detail::plot_line(px, width, height, left, bottom, right, bottom, axis);
  detail::plot_line(px, width, height, left, top, left, bottom, axis);
  for (int x = left; x < right; x += 12) {
    detail::plot_line(px, width, height, x, Y(r.threshold), std::min(x + 6, right), Y(r.threshold), gray);
  }
  const auto curve = [&](const std::vector<double>& v, std::array<std::uint8_t, 3> color) {
    for (std::size_t i = 0; i + 1 < v.size(); ++i) {
      detail::plot_line(px, width, height, X(static_cast<double>(r.grid[i])), Y(v[i]),
                        X(static_cast<double>(r.grid[i + 1])), Y(v[i + 1]), color);
    }
    if (v.size() == 1) detail::plot_line(px, width, height, X(s0) - 2, Y(v[0]), X(s0) + 2, Y(v[0]), color);
  };
  curve(r.a, blue);
  curve(r.b, orange);
  return io::encode_png(width, height, 3, px);
}

}  // namespace panodr::train
