#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dosr {

/// Label value excluded from every loss and metric.
inline constexpr std::uint8_t kIgnore = 255;

/// Dense NCHW tensor of doubles.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, double fill = 0.0);

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x;
  }
  double& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  double at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  /// Pointer to the h*w plane of (n, c).
  double* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const double* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  /// Pointer to the c*h*w block of sample n.
  double* sample(int n) { return data_.data() + index(n, 0, 0, 0); }
  const double* sample(int n) const { return data_.data() + index(n, 0, 0, 0); }

  void fill(double v);
  bool same_shape(const Tensor& other) const {
    return n_ == other.n_ && c_ == other.c_ && h_ == other.h_ && w_ == other.w_;
  }
  std::string shape_str() const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  /// Copy of samples [first, first + count).
  Tensor slice(int first, int count) const;
  /// Writes `src` (one sample) into sample slot n.
  void set_sample(int n, const Tensor& src);

 private:
  int n_ = 0;
  int c_ = 0;
  int h_ = 0;
  int w_ = 0;
  std::vector<double> data_;
};

/// 8-bit per-pixel label map (class index or 0/1 outlier flag, 255 = ignore).
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return data.size(); }
  std::size_t count(std::uint8_t v) const;
  bool operator==(const LabelMap&) const = default;
};

/// Single-channel real map (scores, probabilities).
struct RealMap {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  RealMap() = default;
  RealMap(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return data.size(); }
};

/// Thrown when tensor shapes or configuration are inconsistent.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace dosr
