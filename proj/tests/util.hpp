#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <random>
#include <string>
#include <vector>

#include "steermoe/kernels.hpp"
#include "steermoe/tensor.hpp"

namespace testutil {

inline steermoe::Matrix random_matrix(steermoe::Index rows, steermoe::Index cols, std::mt19937_64& rng,
                                      double stddev = 1.0) {
  std::normal_distribution<double> d(0.0, stddev);
  steermoe::Matrix m(rows, cols);
  for (steermoe::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline steermoe::Parameter trainable(const std::string& name, steermoe::Matrix value,
                                     steermoe::LrGroup group = steermoe::LrGroup::base) {
  return steermoe::Parameter(name, steermoe::Tensor::from_matrix(std::move(value)), true, group);
}

inline bool bitwise_equal(const steermoe::Matrix& a, const steermoe::Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (steermoe::Index i = 0; i < a.size(); ++i) {
    if (std::memcmp(a.data() + i, b.data() + i, sizeof(double)) != 0) return false;
  }
  return true;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("steermoe-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

}  // namespace testutil
