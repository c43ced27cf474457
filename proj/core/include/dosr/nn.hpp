#pragma once

// Differentiable building blocks with explicit forward/backward passes.
//
// Layers with parameters expose `infer` (const, no caching, safe to call from
// several threads), `forward` (caches what `backward` needs) and `backward`
// (accumulates parameter gradients, returns the input gradient). Stateless
// ops are free functions; their backward counterparts take whatever the
// forward pass produced.

#include <string>
#include <vector>

#include "dosr/rng.hpp"
#include "dosr/tensor.hpp"

namespace dosr {

/// Optimizer parameter group. Encoder parameters are "pretrained" and get a
/// reduced learning rate; everything else is "fresh".
enum class ParamGroup { kPretrained, kFresh };

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  ParamGroup group = ParamGroup::kFresh;
};

/// Square-kernel 2-D convolution with "same" padding (k / 2) and bias.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
         ParamGroup group, Rng& rng);

  Tensor infer(const Tensor& x) const;
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }
  int output_size(int input) const { return (input + 2 * (k_ / 2) - k_) / stride_ + 1; }

 private:
  int in_ = 0;
  int out_ = 0;
  int k_ = 1;
  int stride_ = 1;
  Param weight_;  // out x (in * k * k) stored as (out, in, k, k)
  Param bias_;    // (1, out, 1, 1)
  Tensor input_;
};

Tensor relu(const Tensor& x);
/// Gradient through ReLU given the forward *output*.
Tensor relu_backward(const Tensor& grad_out, const Tensor& output);

/// Adaptive average pooling onto a g x g grid. Pixel (y, x) belongs to cell
/// (y * g / H, x * g / W), so cells partition the input; empty cells are 0.
Tensor grid_avg_pool(const Tensor& x, int grid);
Tensor grid_avg_pool_backward(const Tensor& grad_out, int in_h, int in_w);

/// Piecewise-constant broadcast of a g x g grid back to H x W using the same
/// cell assignment as grid_avg_pool.
Tensor grid_broadcast(const Tensor& pooled, int out_h, int out_w);
Tensor grid_broadcast_backward(const Tensor& grad_out, int grid);

/// Bilinear resize with half-pixel centers; `scale` is output/input size
/// ratio used for the coordinate mapping (0 selects out/in per axis).
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w, double scale = 0.0);
Tensor resize_bilinear_backward(const Tensor& grad_out, int in_h, int in_w, double scale = 0.0);

Tensor concat_channels(const std::vector<const Tensor*>& parts);
/// Splits channel-wise into chunks of the given widths.
std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int>& widths);

/// Mirror padding (periodic reflection, edge pixel not repeated) to out_h x out_w,
/// anchored at the top-left corner.
Tensor reflect_pad(const Tensor& x, int out_h, int out_w);
/// Top-left crop; the backward of crop is zero-padding.
Tensor crop(const Tensor& x, int out_h, int out_w);
Tensor crop_backward(const Tensor& grad_out, int in_h, int in_w);

/// Inverted dropout; `mask` receives the per-element multiplier (0 or 1/(1-p)).
Tensor dropout(const Tensor& x, double p, Rng& rng, Tensor* mask);

/// Mirror index for periodic reflection into [0, n).
int reflect_index(int i, int n);

}  // namespace dosr
