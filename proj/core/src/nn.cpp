#include "dosr/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace dosr {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// cols: (c * k * k) x (ho * wo)
void im2col(const double* img, int c, int h, int w, int k, int stride, int ho, int wo, double* cols) {
  const int pad = k / 2;
  const int plane = ho * wo;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + static_cast<std::size_t>((ch * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = img + (static_cast<std::size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int c, int h, int w, int k, int stride, int ho, int wo, double* img) {
  const int pad = k / 2;
  const int plane = ho * wo;
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + static_cast<std::size_t>((ch * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = img + (static_cast<std::size_t>(ch) * h + iy) * w;
          const double* src = row + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct AxisWeights {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

AxisWeights bilinear_axis(int in, int out, double scale) {
  AxisWeights a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.frac.resize(out);
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) / scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    a.lo[i] = lo;
    a.hi[i] = hi;
    a.frac[i] = (hi == lo) ? 0.0 : src - lo;
  }
  return a;
}

int grid_cell(int i, int n, int grid) { return static_cast<int>(static_cast<long long>(i) * grid / n); }

}  // namespace

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
               ParamGroup group, Rng& rng)
    : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || kernel % 2 == 0 || stride <= 0) {
    throw ShapeError("conv " + name + ": invalid geometry");
  }
  weight_.name = name + ".weight";
  weight_.group = group;
  weight_.value = Tensor(out_, in_, k_, k_);
  weight_.grad = Tensor(out_, in_, k_, k_);
  const double std = std::sqrt(2.0 / (in_ * k_ * k_));
  for (double& v : weight_.value.values()) v = rng.normal(0.0, std);
  bias_.name = name + ".bias";
  bias_.group = group;
  bias_.value = Tensor(1, out_, 1, 1);
  bias_.grad = Tensor(1, out_, 1, 1);
}

Tensor Conv2d::infer(const Tensor& x) const {
  if (x.c() != in_) {
    throw ShapeError(weight_.name + ": expected " + std::to_string(in_) + " channels, got " + x.shape_str());
  }
  const int ho = output_size(x.h());
  const int wo = output_size(x.w());
  const int depth = in_ * k_ * k_;
  Tensor y(x.n(), out_, ho, wo);
  ConstMapMat wmat(weight_.value.data(), out_, depth);
  const bool direct = (k_ == 1 && stride_ == 1);
  std::vector<double> cols(direct ? 0 : static_cast<std::size_t>(depth) * ho * wo);
  for (int n = 0; n < x.n(); ++n) {
    const double* src = x.sample(n);
    if (!direct) {
      im2col(src, in_, x.h(), x.w(), k_, stride_, ho, wo, cols.data());
      src = cols.data();
    }
    MapMat ymat(y.sample(n), out_, ho * wo);
    ymat.noalias() = wmat * ConstMapMat(src, depth, ho * wo);
    for (int o = 0; o < out_; ++o) ymat.row(o).array() += bias_.value.data()[o];
  }
  return y;
}

Tensor Conv2d::forward(const Tensor& x) {
  input_ = x;
  return infer(x);
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const Tensor& x = input_;
  const int ho = output_size(x.h());
  const int wo = output_size(x.w());
  if (grad_out.n() != x.n() || grad_out.c() != out_ || grad_out.h() != ho || grad_out.w() != wo) {
    throw ShapeError(weight_.name + ": backward gradient shape " + grad_out.shape_str());
  }
  const int depth = in_ * k_ * k_;
  Tensor dx(x.n(), in_, x.h(), x.w());
  ConstMapMat wmat(weight_.value.data(), out_, depth);
  MapMat dw(weight_.grad.data(), out_, depth);
  const bool direct = (k_ == 1 && stride_ == 1);
  std::vector<double> cols(direct ? 0 : static_cast<std::size_t>(depth) * ho * wo);
  std::vector<double> dcols(direct ? 0 : cols.size());
  for (int n = 0; n < x.n(); ++n) {
    ConstMapMat g(grad_out.sample(n), out_, ho * wo);
    for (int o = 0; o < out_; ++o) bias_.grad.data()[o] += g.row(o).sum();
    if (direct) {
      dw.noalias() += g * ConstMapMat(x.sample(n), depth, ho * wo).transpose();
      MapMat(dx.sample(n), depth, ho * wo).noalias() = wmat.transpose() * g;
    } else {
      im2col(x.sample(n), in_, x.h(), x.w(), k_, stride_, ho, wo, cols.data());
      dw.noalias() += g * ConstMapMat(cols.data(), depth, ho * wo).transpose();
      MapMat(dcols.data(), depth, ho * wo).noalias() = wmat.transpose() * g;
      col2im(dcols.data(), in_, x.h(), x.w(), k_, stride_, ho, wo, dx.sample(n));
    }
  }
  return dx;
}

void Conv2d::collect(std::vector<Param*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void Conv2d::collect(std::vector<const Param*>& out) const {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values())
    if (v < 0.0) v = 0.0;  // NaN passes through
  return y;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& output) {
  Tensor g = grad_out;
  auto gv = g.values();
  auto ov = output.values();
  for (std::size_t i = 0; i < gv.size(); ++i) {
    if (!(ov[i] > 0.0)) gv[i] = 0.0;
  }
  return g;
}

Tensor grid_avg_pool(const Tensor& x, int grid) {
  Tensor y(x.n(), x.c(), grid, grid);
  std::vector<int> count(static_cast<std::size_t>(grid) * grid, 0);
  for (int yy = 0; yy < x.h(); ++yy)
    for (int xx = 0; xx < x.w(); ++xx) ++count[grid_cell(yy, x.h(), grid) * grid + grid_cell(xx, x.w(), grid)];
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double* src = x.plane(n, c);
      double* dst = y.plane(n, c);
      for (int yy = 0; yy < x.h(); ++yy) {
        const int gy = grid_cell(yy, x.h(), grid);
        for (int xx = 0; xx < x.w(); ++xx) dst[gy * grid + grid_cell(xx, x.w(), grid)] += src[yy * x.w() + xx];
      }
      for (int i = 0; i < grid * grid; ++i)
        if (count[i] > 0) dst[i] /= count[i];
    }
  }
  return y;
}

Tensor grid_avg_pool_backward(const Tensor& grad_out, int in_h, int in_w) {
  const int grid = grad_out.h();
  std::vector<int> count(static_cast<std::size_t>(grid) * grid, 0);
  for (int yy = 0; yy < in_h; ++yy)
    for (int xx = 0; xx < in_w; ++xx) ++count[grid_cell(yy, in_h, grid) * grid + grid_cell(xx, in_w, grid)];
  Tensor dx(grad_out.n(), grad_out.c(), in_h, in_w);
  for (int n = 0; n < dx.n(); ++n) {
    for (int c = 0; c < dx.c(); ++c) {
      const double* g = grad_out.plane(n, c);
      double* dst = dx.plane(n, c);
      for (int yy = 0; yy < in_h; ++yy) {
        const int gy = grid_cell(yy, in_h, grid);
        for (int xx = 0; xx < in_w; ++xx) {
          const int cell = gy * grid + grid_cell(xx, in_w, grid);
          dst[yy * in_w + xx] = g[cell] / count[cell];
        }
      }
    }
  }
  return dx;
}

Tensor grid_broadcast(const Tensor& pooled, int out_h, int out_w) {
  const int grid = pooled.h();
  Tensor y(pooled.n(), pooled.c(), out_h, out_w);
  for (int n = 0; n < y.n(); ++n) {
    for (int c = 0; c < y.c(); ++c) {
      const double* src = pooled.plane(n, c);
      double* dst = y.plane(n, c);
      for (int yy = 0; yy < out_h; ++yy) {
        const int gy = grid_cell(yy, out_h, grid);
        for (int xx = 0; xx < out_w; ++xx) dst[yy * out_w + xx] = src[gy * grid + grid_cell(xx, out_w, grid)];
      }
    }
  }
  return y;
}

Tensor grid_broadcast_backward(const Tensor& grad_out, int grid) {
  Tensor dp(grad_out.n(), grad_out.c(), grid, grid);
  const int h = grad_out.h();
  const int w = grad_out.w();
  for (int n = 0; n < dp.n(); ++n) {
    for (int c = 0; c < dp.c(); ++c) {
      const double* g = grad_out.plane(n, c);
      double* dst = dp.plane(n, c);
      for (int yy = 0; yy < h; ++yy) {
        const int gy = grid_cell(yy, h, grid);
        for (int xx = 0; xx < w; ++xx) dst[gy * grid + grid_cell(xx, w, grid)] += g[yy * w + xx];
      }
    }
  }
  return dp;
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w, double scale) {
  const AxisWeights ay = bilinear_axis(x.h(), out_h, scale > 0 ? scale : double(out_h) / x.h());
  const AxisWeights ax = bilinear_axis(x.w(), out_w, scale > 0 ? scale : double(out_w) / x.w());
  Tensor y(x.n(), x.c(), out_h, out_w);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double* src = x.plane(n, c);
      double* dst = y.plane(n, c);
      for (int i = 0; i < out_h; ++i) {
        const double* r0 = src + ay.lo[i] * x.w();
        const double* r1 = src + ay.hi[i] * x.w();
        const double fy = ay.frac[i];
        for (int j = 0; j < out_w; ++j) {
          const double fx = ax.frac[j];
          const double top = r0[ax.lo[j]] * (1.0 - fx) + r0[ax.hi[j]] * fx;
          const double bot = r1[ax.lo[j]] * (1.0 - fx) + r1[ax.hi[j]] * fx;
          dst[i * out_w + j] = top * (1.0 - fy) + bot * fy;
        }
      }
    }
  }
  return y;
}

Tensor resize_bilinear_backward(const Tensor& grad_out, int in_h, int in_w, double scale) {
  const int out_h = grad_out.h();
  const int out_w = grad_out.w();
  const AxisWeights ay = bilinear_axis(in_h, out_h, scale > 0 ? scale : double(out_h) / in_h);
  const AxisWeights ax = bilinear_axis(in_w, out_w, scale > 0 ? scale : double(out_w) / in_w);
  Tensor dx(grad_out.n(), grad_out.c(), in_h, in_w);
  for (int n = 0; n < dx.n(); ++n) {
    for (int c = 0; c < dx.c(); ++c) {
      const double* g = grad_out.plane(n, c);
      double* dst = dx.plane(n, c);
      for (int i = 0; i < out_h; ++i) {
        double* r0 = dst + ay.lo[i] * in_w;
        double* r1 = dst + ay.hi[i] * in_w;
        const double fy = ay.frac[i];
        for (int j = 0; j < out_w; ++j) {
          const double v = g[i * out_w + j];
          const double fx = ax.frac[j];
          r0[ax.lo[j]] += v * (1.0 - fy) * (1.0 - fx);
          r0[ax.hi[j]] += v * (1.0 - fy) * fx;
          r1[ax.lo[j]] += v * fy * (1.0 - fx);
          r1[ax.hi[j]] += v * fy * fx;
        }
      }
    }
  }
  return dx;
}

Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const Tensor& first = *parts.front();
  int channels = 0;
  for (const Tensor* p : parts) {
    if (p->n() != first.n() || p->h() != first.h() || p->w() != first.w()) {
      throw ShapeError("concat: " + p->shape_str() + " vs " + first.shape_str());
    }
    channels += p->c();
  }
  Tensor y(first.n(), channels, first.h(), first.w());
  const std::size_t plane = static_cast<std::size_t>(first.h()) * first.w();
  for (int n = 0; n < first.n(); ++n) {
    double* dst = y.sample(n);
    for (const Tensor* p : parts) {
      std::copy(p->sample(n), p->sample(n) + plane * p->c(), dst);
      dst += plane * p->c();
    }
  }
  return y;
}

std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int>& widths) {
  int total = 0;
  for (int w : widths) total += w;
  if (total != x.c()) throw ShapeError("split: widths do not sum to " + std::to_string(x.c()));
  std::vector<Tensor> out;
  const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
  int offset = 0;
  for (int width : widths) {
    Tensor part(x.n(), width, x.h(), x.w());
    for (int n = 0; n < x.n(); ++n) {
      const double* src = x.plane(n, offset);
      std::copy(src, src + plane * width, part.sample(n));
    }
    out.push_back(std::move(part));
    offset += width;
  }
  return out;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

Tensor reflect_pad(const Tensor& x, int out_h, int out_w) {
  if (out_h < x.h() || out_w < x.w()) throw ShapeError("reflect_pad: target smaller than input");
  Tensor y(x.n(), x.c(), out_h, out_w);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double* src = x.plane(n, c);
      double* dst = y.plane(n, c);
      for (int i = 0; i < out_h; ++i) {
        const int sy = reflect_index(i, x.h());
        for (int j = 0; j < out_w; ++j) dst[i * out_w + j] = src[sy * x.w() + reflect_index(j, x.w())];
      }
    }
  }
  return y;
}

Tensor crop(const Tensor& x, int out_h, int out_w) {
  if (out_h > x.h() || out_w > x.w()) throw ShapeError("crop: target larger than input");
  if (out_h == x.h() && out_w == x.w()) return x;
  Tensor y(x.n(), x.c(), out_h, out_w);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < out_h; ++i)
        std::copy(x.plane(n, c) + i * x.w(), x.plane(n, c) + i * x.w() + out_w, y.plane(n, c) + i * out_w);
  return y;
}

Tensor crop_backward(const Tensor& grad_out, int in_h, int in_w) {
  if (grad_out.h() == in_h && grad_out.w() == in_w) return grad_out;
  Tensor dx(grad_out.n(), grad_out.c(), in_h, in_w);
  for (int n = 0; n < dx.n(); ++n)
    for (int c = 0; c < dx.c(); ++c)
      for (int i = 0; i < grad_out.h(); ++i)
        std::copy(grad_out.plane(n, c) + i * grad_out.w(), grad_out.plane(n, c) + (i + 1) * grad_out.w(),
                  dx.plane(n, c) + i * in_w);
  return dx;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, Tensor* mask) {
  Tensor m(x.n(), x.c(), x.h(), x.w(), 1.0);
  Tensor y = x;
  if (p > 0.0) {
    const double keep = 1.0 / (1.0 - p);
    auto mv = m.values();
    auto yv = y.values();
    for (std::size_t i = 0; i < mv.size(); ++i) {
      mv[i] = rng.bernoulli(p) ? 0.0 : keep;
      yv[i] *= mv[i];
    }
  }
  if (mask) *mask = std::move(m);
  return y;
}

}  // namespace dosr
