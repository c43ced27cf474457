#include "dosr/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace dosr {
namespace {

void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

const std::vector<int>& png_params() {
  static const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
  return params;
}

cv::Mat to_mat(const Tensor& image) {
  const int h = image.h(), w = image.w(), c = image.c();
  cv::Mat m(h, w, CV_64FC(c));
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<double>(y);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) row[x * c + ch] = image.at(0, ch, y, x);
  }
  return m;
}

Tensor from_mat(const cv::Mat& m, int channels) {
  Tensor t(1, channels, m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<double>(y);
    for (int x = 0; x < m.cols; ++x)
      for (int ch = 0; ch < channels; ++ch) t.at(0, ch, y, x) = row[x * channels + ch];
  }
  return t;
}

}  // namespace

Tensor image_from_rgb8(const std::uint8_t* rgb, int height, int width, const Normalization& norm) {
  Tensor t(1, 3, height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] / 255.0;
        t.at(0, c, y, x) = (v - norm.mean[c]) / norm.std[c];
      }
  return t;
}

std::vector<std::uint8_t> image_to_rgb8(const Tensor& image, const Normalization& norm) {
  if (image.n() != 1 || image.c() != 3) throw ShapeError("image_to_rgb8 expects 1x3xHxW, got " + image.shape_str());
  std::vector<std::uint8_t> out(static_cast<std::size_t>(image.h()) * image.w() * 3);
  for (int y = 0; y < image.h(); ++y)
    for (int x = 0; x < image.w(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = (image.at(0, c, y, x) * norm.std[c] + norm.mean[c]) * 255.0;
        out[(static_cast<std::size_t>(y) * image.w() + x) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
  return out;
}

Tensor read_rgb_png(const std::filesystem::path& path, const Normalization& norm) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  if (!rgb.isContinuous()) rgb = rgb.clone();
  return image_from_rgb8(rgb.ptr<std::uint8_t>(0), rgb.rows, rgb.cols, norm);
}

void write_rgb8_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, int height, int width) {
  ensure_parent(path);
  cv::Mat m(height, width, CV_8UC3, const_cast<std::uint8_t*>(rgb.data()));
  cv::Mat bgr;
  cv::cvtColor(m, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr, png_params())) throw std::runtime_error("cannot write " + path.string());
}

void write_rgb_png(const std::filesystem::path& path, const Tensor& image, const Normalization& norm) {
  write_rgb8_png(path, image_to_rgb8(image, norm), image.h(), image.w());
}

LabelMap read_label_png(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("cannot read label map " + path.string());
  if (m.type() != CV_8UC1) throw std::runtime_error("label map " + path.string() + " is not 8-bit single channel");
  LabelMap out(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) std::copy(m.ptr<std::uint8_t>(y), m.ptr<std::uint8_t>(y) + m.cols, &out.at(y, 0));
  return out;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
  ensure_parent(path);
  cv::Mat m(labels.height, labels.width, CV_8UC1, const_cast<std::uint8_t*>(labels.data.data()));
  if (!cv::imwrite(path.string(), m, png_params())) throw std::runtime_error("cannot write " + path.string());
}

Tensor resize_image(const Tensor& image, int height, int width, Interp interp) {
  if (image.n() != 1) throw ShapeError("resize_image expects a single image");
  if (image.h() == height && image.w() == width) return image;
  int flag = cv::INTER_LINEAR;
  if (interp == Interp::kNearest) flag = cv::INTER_NEAREST;
  if (interp == Interp::kArea) flag = (height < image.h() && width < image.w()) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::Mat out;
  cv::resize(to_mat(image), out, cv::Size(width, height), 0, 0, flag);
  return from_mat(out, image.c());
}

LabelMap resize_labels(const LabelMap& labels, int height, int width) {
  if (labels.height == height && labels.width == width) return labels;
  LabelMap out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(static_cast<int>(std::floor((y + 0.5) * labels.height / height)), labels.height - 1);
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(static_cast<int>(std::floor((x + 0.5) * labels.width / width)), labels.width - 1);
      out.at(y, x) = labels.at(sy, sx);
    }
  }
  return out;
}

Tensor crop_image(const Tensor& image, int y0, int x0, int height, int width) {
  if (y0 < 0 || x0 < 0 || y0 + height > image.h() || x0 + width > image.w()) {
    throw ShapeError("crop_image: window outside " + image.shape_str());
  }
  Tensor out(image.n(), image.c(), height, width);
  for (int n = 0; n < image.n(); ++n)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < height; ++y)
        std::copy_n(image.data() + image.index(n, c, y0 + y, x0), width, &out.at(n, c, y, 0));
  return out;
}

LabelMap crop_labels(const LabelMap& labels, int y0, int x0, int height, int width) {
  if (y0 < 0 || x0 < 0 || y0 + height > labels.height || x0 + width > labels.width) {
    throw ShapeError("crop_labels: window outside label map");
  }
  LabelMap out(height, width);
  for (int y = 0; y < height; ++y)
    std::copy_n(labels.data.data() + static_cast<std::size_t>(y0 + y) * labels.width + x0, width, &out.at(y, 0));
  return out;
}

Tensor flip_image(const Tensor& image) {
  Tensor out = image;
  for (int n = 0; n < image.n(); ++n)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < image.h(); ++y) {
        double* row = &out.at(n, c, y, 0);
        std::reverse(row, row + image.w());
      }
  return out;
}

LabelMap flip_labels(const LabelMap& labels) {
  LabelMap out = labels;
  for (int y = 0; y < labels.height; ++y) std::reverse(&out.at(y, 0), &out.at(y, 0) + labels.width);
  return out;
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const Tensor& first = *images.front();
  Tensor batch(static_cast<int>(images.size()), first.c(), first.h(), first.w());
  for (std::size_t i = 0; i < images.size(); ++i) batch.set_sample(static_cast<int>(i), *images[i]);
  return batch;
}

}  // namespace dosr
