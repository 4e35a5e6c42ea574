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

// drdata: build, ingest and check on-disk datasets.

#include <iostream>

#include "CLI11.hpp"
#include "panodr/dr_dataset.hpp"

namespace {

using namespace panodr;
namespace fs = std::filesystem;

void write_all(const std::vector<data::DRSample>& samples, const fs::path& out) {
  fs::create_directories(out);
  for (const auto& s : samples) data::save_sample(s, out / s.scene_id);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dataset tools"};
  app.require_subcommand(1);

  int count = 200, height = 64;
  std::uint64_t seed = 7;
  std::string out;
  auto* synth = app.add_subcommand("synth", "Render procedural rooms");
  synth->add_option("--count", count)->check(CLI::PositiveNumber);
  synth->add_option("--height", height)->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed);
  synth->add_option("--out", out)->required();

  std::string source;
  data::IngestConfig icfg;
  auto* ingest = app.add_subcommand("ingest", "Convert furnished/empty panorama pairs");
  ingest->add_option("--structured3d", source, "Root holding scene directories")->required()->check(
      CLI::ExistingDirectory);
  ingest->add_option("--out", out)->required();
  ingest->add_option("--height", icfg.height)->check(CLI::PositiveNumber);
  ingest->add_option("--dilate", icfg.dilate_px, "Mask dilation in pixels");

  std::string dir;
  auto* validate = app.add_subcommand("validate", "Check every sample under DIR");
  validate->add_option("dir", dir)->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) {
      write_all(data::synth_dataset(count, height, seed), out);
      std::cout << count << " samples written to " << out << "\n";
    } else if (*ingest) {
      const auto rep = data::ingest_structured3d(source, icfg);
      write_all(rep.samples, out);
      for (const auto& [scene, msg] : rep.errors) std::cerr << "skipped " << scene << ": " << msg << "\n";
      std::cout << rep.samples.size() << " samples written to " << out << "\n";
      return rep.samples.empty() ? 1 : 0;
    } else if (*validate) {
      const auto rep = data::validate_dir(dir);
      for (const auto& [sample, problem] : rep.failures) std::cout << sample << ": " << problem << "\n";
      std::cout << rep.checked << " checked, " << rep.failures.size() << " problems\n";
      return rep.ok() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
