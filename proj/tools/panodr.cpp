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

// panodr: training, evaluation, comparison, inference and serving.

#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "panodr/service.hpp"
#include "panodr/trainer.hpp"

namespace {

using namespace panodr;
namespace fs = std::filesystem;
using nlohmann::json;

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

train::TrainConfig read_config(const std::string& path, train::Stage stage) {
  json j = path.empty() ? json::object() : read_json(path);
  j["stage"] = stage == train::Stage::kStructure ? "structure" : "generator";
  return train::TrainConfig::from_json(j);
}

void print_eval(const train::EvalRecord& e) {
  std::cerr << "step " << e.step << " " << e.metrics.dump() << " (" << e.wall_s << " s)\n";
}

// Samples of DIR restricted to one split; "all" keeps every sample.
std::vector<data::DRSample> select_split(const std::string& dir, const std::string& split) {
  auto samples = data::load_dataset(dir);
  if (samples.empty()) throw std::runtime_error("no samples under " + dir);
  if (split == "all") return samples;
  auto parts = data::split_dataset(std::move(samples), train::TrainConfig{}.split);
  if (split == "train") return parts.train;
  if (split == "val") return parts.val;
  return parts.test;
}

int run_train(const std::string& config, train::Stage stage) {
  const auto cfg = read_config(config, stage);
  const auto r = train::train(cfg, print_eval);
  std::cout << r.checkpoint.string() << "\n";
  return 0;
}

int run_eval_structure(const std::string& ckpt, const std::string& dir, const std::string& split) {
  const auto net = load_structure_net(ckpt);
  std::cout << train::structure_metrics(*net, select_split(dir, split)).dump() << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_g, const std::string& ckpt_s, const std::string& dir, const std::string& split,
             const std::string& out, bool baseline) {
  const auto samples = select_split(dir, split);
  if (samples.empty()) throw std::runtime_error("split '" + split + "' of " + dir + " is empty");
  const auto s = load_structure_net(ckpt_s);
  std::unique_ptr<Generator<float>> g;
  train::Predictor predict;
  if (baseline) {
    predict = train::context_mean_fill_predictor();
  } else {
    if (ckpt_g.empty()) throw std::runtime_error("--ckpt-g is required unless --baseline is given");
    g = load_generator(ckpt_g);
    predict = train::pipeline_predictor(*s, *g);
  }
  const auto reports = train::evaluate_predictions(*s, samples, predict);
  std::ofstream os(out);
  if (!os) throw std::runtime_error("cannot write " + out);
  write_metrics_jsonl(os, reports);
  std::cout << aggregate(reports).to_json().dump() << "\n";
  return 0;
}

int run_compare(const std::string& a, const std::string& b, double threshold, const std::string& metric,
                const std::string& out, std::string plot) {
  const auto report = train::convergence_report(train::RunLog::load(a), train::RunLog::load(b), threshold, metric);
  const json j = report.to_json();
  std::ofstream(out) << j.dump(2) << "\n";
  if (plot.empty()) plot = fs::path(out).replace_extension(".png").string();
  io::write_file(plot, train::plot_convergence_png(report));
  std::cout << j.at("steps_to_threshold").dump() << "\n";
  return 0;
}

int run_diminish(const std::string& pano, const std::string& mask_path, const std::string& ckpt_g,
                 const std::string& ckpt_s, const std::string& out, const std::string& layout_out) {
  const io::Raster pr = io::read_png(pano);
  if (pr.channels != 3) throw std::runtime_error(pano + ": expected an RGB panorama");
  geo::require_equirect(pr.width, pr.height);
  const io::Raster mr = io::read_png(mask_path);
  if (mr.width != pr.width || mr.height != pr.height || mr.channels != 1) {
    throw std::runtime_error(mask_path + ": expected a grayscale mask the size of the panorama");
  }
  const auto pipeline = Pipeline::load(ckpt_g, ckpt_s);
  const auto d = run_any_size(pipeline, io::to_rgb_tensor(pr), data::binary_mask_from_raster(mr));
  io::write_tensor_png(out, d.result);
  if (!layout_out.empty()) io::write_gray_png(layout_out, d.layout.width, d.layout.height, d.layout.labels);
  return 0;
}

httplib::Server* g_server = nullptr;

int run_serve(service::ServiceConfig cfg) {
  service::DiminishService svc(cfg);
  svc.load_async();
  httplib::Server server;
  svc.mount(server);
  g_server = &server;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });
  std::cerr << "listening on " << cfg.host << ":" << cfg.port << "\n";
  if (!server.listen(cfg.host, cfg.port)) throw std::runtime_error("cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Panorama diminished reality: training, evaluation and inference"};
  app.require_subcommand(1);

  std::string config;
  auto* ts = app.add_subcommand("train-structure", "Train the layout network");
  ts->add_option("--config", config, "TrainConfig JSON (defaults if omitted)")->check(CLI::ExistingFile);

  std::string ckpt, data_dir, split = "all";
  auto* es = app.add_subcommand("eval-structure", "Layout metrics of a structure checkpoint");
  es->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingFile);
  es->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  es->add_option("--split", split)->check(CLI::IsMember({"all", "train", "val", "test"}));

  auto* tr = app.add_subcommand("train", "Train the generator against a trained structure network");
  tr->add_option("--config", config, "TrainConfig JSON; must set structure_ckpt")->check(CLI::ExistingFile);

  std::string ckpt_g, ckpt_s, out, eval_split = "test";
  bool baseline = false;
  auto* ev = app.add_subcommand("eval", "Per-sample hole metrics as JSON lines");
  ev->add_option("--ckpt-g", ckpt_g)->check(CLI::ExistingFile);
  ev->add_option("--ckpt-s", ckpt_s)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", eval_split)->check(CLI::IsMember({"all", "train", "val", "test"}));
  ev->add_option("--out", out)->required();
  ev->add_flag("--baseline", baseline, "Score the context-mean-fill baseline instead of a generator");

  std::string log_a, log_b, metric = "psnr_hole", plot;
  double threshold = 22.0;
  auto* cmp = app.add_subcommand("compare", "Steps-to-threshold comparison of two run logs");
  cmp->add_option("--log-a", log_a)->required()->check(CLI::ExistingFile);
  cmp->add_option("--log-b", log_b)->required()->check(CLI::ExistingFile);
  cmp->add_option("--threshold", threshold);
  cmp->add_option("--metric", metric);
  cmp->add_option("--out", out)->required();
  cmp->add_option("--plot", plot, "PNG path (default: --out with .png)");

  std::string pano, mask, layout_out;
  auto* dm = app.add_subcommand("diminish", "Remove the masked content from one panorama");
  dm->add_option("--pano", pano)->required()->check(CLI::ExistingFile);
  dm->add_option("--mask", mask)->required()->check(CLI::ExistingFile);
  dm->add_option("--ckpt-g", ckpt_g)->required()->check(CLI::ExistingFile);
  dm->add_option("--ckpt-s", ckpt_s)->required()->check(CLI::ExistingFile);
  dm->add_option("--out", out)->required();
  dm->add_option("--layout-out", layout_out);

  auto* pc = app.add_subcommand("print-config", "Print the default TrainConfig");

  service::ServiceConfig scfg;
  auto* sv = app.add_subcommand("serve", "HTTP service; PANODR_* environment variables, overridable by flags");
  sv->add_option("--ckpt-g", ckpt_g);
  sv->add_option("--ckpt-s", ckpt_s);
  sv->add_option("--host", scfg.host);
  sv->add_option("--port", scfg.port);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*ts) return run_train(config, train::Stage::kStructure);
    if (*es) return run_eval_structure(ckpt, data_dir, split);
    if (*tr) return run_train(config, train::Stage::kGenerator);
    if (*ev) return run_eval(ckpt_g, ckpt_s, data_dir, eval_split, out, baseline);
    if (*cmp) return run_compare(log_a, log_b, threshold, metric, out, plot);
    if (*dm) return run_diminish(pano, mask, ckpt_g, ckpt_s, out, layout_out);
    if (*pc) {
      std::cout << train::TrainConfig{}.to_json().dump(2) << "\n";
      return 0;
    }
    if (*sv) {
      auto env = service::ServiceConfig::from_env();
      if (!ckpt_g.empty()) env.ckpt_g = ckpt_g;
      if (!ckpt_s.empty()) env.ckpt_s = ckpt_s;
      if (sv->count("--host")) env.host = scfg.host;
      if (sv->count("--port")) env.port = scfg.port;
      return run_serve(env);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
