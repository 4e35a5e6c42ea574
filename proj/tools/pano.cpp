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

// pano: panorama utilities.

#include <iostream>

#include "CLI11.hpp"
#include "panodr/image_io.hpp"
#include "panodr/pano_geometry.hpp"

int main(int argc, char** argv) {
  using namespace panodr;
  CLI::App app{"Panorama utilities"};
  app.require_subcommand(1);

  std::string in, out, size = "256x256";
  double lon = 0, lat = 0, fov = 90;
  auto* persp = app.add_subcommand("perspective", "Render a pinhole view of an equirectangular panorama");
  persp->add_option("--in", in)->required()->check(CLI::ExistingFile);
  persp->add_option("--lon", lon, "View center longitude, degrees");
  persp->add_option("--lat", lat, "View center latitude, degrees (+ is up)");
  persp->add_option("--fov", fov, "Horizontal field of view, degrees");
  persp->add_option("--size", size, "WxH");
  persp->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    int w = 0, h = 0;
    char x = 0;
    std::istringstream ss(size);
    if (!(ss >> w >> x >> h) || x != 'x' || !ss.eof()) throw std::invalid_argument("--size must look like 320x240");
    const io::Raster r = io::read_png(in);
    if (r.channels != 3) throw std::runtime_error(in + ": expected an RGB panorama");
    geo::ViewSpec view{{lon * geo::kPi / 180.0, lat * geo::kPi / 180.0}, fov, w, h};
    io::write_tensor_png(out, geo::gnomonic_project(io::to_rgb_tensor(r), view));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
