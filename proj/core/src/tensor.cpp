#include "dosr/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace dosr {

Tensor::Tensor(int n, int c, int h, int w, double fill)
    : n_(n), c_(c), h_(h), w_(w) {
  if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  data_.assign(static_cast<std::size_t>(n) * c * h * w, fill);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << n_ << "x" << c_ << "x" << h_ << "x" << w_;
  return os.str();
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) {
    throw ShapeError("tensor add: " + shape_str() + " vs " + other.shape_str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Tensor Tensor::slice(int first, int count) const {
  if (first < 0 || count < 0 || first + count > n_) throw ShapeError("tensor slice out of range");
  Tensor out(count, c_, h_, w_);
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(index(first, 0, 0, 0)),
            data_.begin() + static_cast<std::ptrdiff_t>(index(first, 0, 0, 0) + out.size()),
            out.data_.begin());
  return out;
}

void Tensor::set_sample(int n, const Tensor& src) {
  if (src.n_ != 1 || src.c_ != c_ || src.h_ != h_ || src.w_ != w_) {
    throw ShapeError("set_sample: " + src.shape_str() + " into " + shape_str());
  }
  std::copy(src.data_.begin(), src.data_.end(), data_.begin() + static_cast<std::ptrdiff_t>(index(n, 0, 0, 0)));
}

std::size_t LabelMap::count(std::uint8_t v) const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), v));
}

}  // namespace dosr
