#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <doctest.h>

#include "ege/error.hpp"
#include "ege/tensor.hpp"

namespace testing {

inline ege::Tensor random_tensor(ege::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(ege::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return ege::Tensor(std::move(shape), std::move(v));
}

inline ege::Tensor leaf(ege::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  auto t = random_tensor(std::move(shape), rng, scale);
  t.set_requires_grad(true);
  return t;
}

// Central-difference gradient of `f` with respect to every coordinate of `x`.
inline std::vector<double> numeric_grad(const std::function<double()>& f, ege::Tensor& x, double h = 1e-5) {
  auto data = x.mutable_data();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double keep = data[i];
    data[i] = keep + h;
    const double up = f();
    data[i] = keep - h;
    const double down = f();
    data[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor), vector 2-norms.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename F>
ege::ErrorCode error_code_of(F&& f) {
  try {
    f();
  } catch (const ege::Error& e) {
    return e.code();
  }
  FAIL("expected an ege::Error");
  return ege::ErrorCode{};
}

template <typename F>
std::string error_message_of(F&& f) {
  try {
    f();
  } catch (const ege::Error& e) {
    return e.what();
  }
  FAIL("expected an ege::Error");
  return {};
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("ege_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "cannot open " << path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out << bytes;
}

}  // namespace testing
