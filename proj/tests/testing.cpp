// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "testing.hpp"

#include <atomic>
#include <cstring>
#include <random>

namespace kgpl::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  std::random_device rd;
  path_ = fs::temp_directory_path() /
          (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter.fetch_add(1)));
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

LabelMap labels(const Dims3& dims, int num_classes, const std::vector<int>& values, Vec3 spacing) {
  return LabelMap(Geometry{dims, spacing, {0, 0, 0}}, num_classes, values);
}

LabelMap mask(const Dims3& dims, int num_classes, const std::vector<std::array<std::int64_t, 3>>& voxels, int value) {
  LabelMap m(Geometry{dims, {1, 1, 1}, {0, 0, 0}}, num_classes);
  for (const auto& v : voxels) m.set(v[0], v[1], v[2], value);
  return m;
}

double gradient_check(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x0,
                      double h) {
  auto x = x0.detach().to(torch::kFloat64).clone().set_requires_grad(true);
  f(x).backward();
  const auto analytic = x.grad().detach().clone();
  auto base = x0.detach().to(torch::kFloat64).clone();
  auto flat = base.view({-1});
  auto grad_flat = analytic.view({-1});
  double worst = 0.0;
  torch::NoGradGuard guard;
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = f(base).item<double>();
    flat[i] = orig - h;
    const double down = f(base).item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double a = grad_flat[i].item<double>();
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

std::vector<std::byte> bytes_of(const torch::Tensor& t) {
  const auto c = t.detach().contiguous();
  std::vector<std::byte> out(static_cast<std::size_t>(c.numel() * c.element_size()));
  std::memcpy(out.data(), c.data_ptr(), out.size());
  return out;
}

}  // namespace kgpl::testing
