#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "mbpb/tensor.hpp"

namespace testing {

// fresh, empty scratch directory under the build tree
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mbpb_unit_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline mbpb::Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  mbpb::Tensor t(r, c);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// central difference of f with respect to entry i of p
inline double central_difference(mbpb::Tensor& p, std::size_t i, const std::function<double()>& f,
                                 double h = 1e-5) {
  const double keep = p[i];
  p[i] = keep + h;
  const double up = f();
  p[i] = keep - h;
  const double down = f();
  p[i] = keep;
  return (up - down) / (2 * h);
}

inline bool grad_close(double analytic, double numeric, double rel = 1e-4, double abs = 1e-7) {
  return std::fabs(analytic - numeric) <= std::max(abs, rel * std::max(std::fabs(analytic), std::fabs(numeric)));
}

}  // namespace testing
