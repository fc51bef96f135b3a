#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "crossview/core.hpp"

namespace crossview {

// RGB image, interleaved, intensities nominally in [0,1].
template <typename T>
struct Image {
  int h = 0;
  int w = 0;
  std::vector<T> px;  // size h*w*3

  Image() = default;
  Image(int height, int width, T fill = T(0)) : h(height), w(width), px(size_t(height) * width * 3, fill) {}

  T& at(int y, int x, int c) { return px[(size_t(y) * w + x) * 3 + c]; }
  const T& at(int y, int x, int c) const { return px[(size_t(y) * w + x) * 3 + c]; }

  bool same_shape(const Image& o) const { return h == o.h && w == o.w; }

  // Border-clamped bilinear sample of one channel at continuous (x, y).
  T sample(T x, T y, int c) const {
    T xc = std::clamp(x, T(0), T(w - 1));
    T yc = std::clamp(y, T(0), T(h - 1));
    int x0 = int(std::floor(xc));
    int y0 = int(std::floor(yc));
    int x1 = std::min(x0 + 1, w - 1);
    int y1 = std::min(y0 + 1, h - 1);
    T fx = xc - T(x0);
    T fy = yc - T(y0);
    T v00 = at(y0, x0, c), v01 = at(y0, x1, c);
    T v10 = at(y1, x0, c), v11 = at(y1, x1, c);
    return (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) + fy * ((T(1) - fx) * v10 + fx * v11);
  }

  bool in_frame(T x, T y) const { return x >= T(0) && x < T(w) && y >= T(0) && y < T(h); }

  void clamp01() {
    for (T& v : px) v = std::clamp(v, T(0), T(1));
  }

  T mean() const {
    double s = 0;
    for (T v : px) s += double(v);
    return px.empty() ? T(0) : T(s / double(px.size()));
  }
};

template <typename T>
Image<T> resize_bilinear(const Image<T>& in, int out_h, int out_w) {
  if (in.h == out_h && in.w == out_w) return in;
  Image<T> out(out_h, out_w);
  T sx = T(in.w) / T(out_w);
  T sy = T(in.h) / T(out_h);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      T ix = (T(x) + T(0.5)) * sx - T(0.5);
      T iy = (T(y) + T(0.5)) * sy - T(0.5);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = in.sample(ix, iy, c);
    }
  return out;
}

template <typename T>
Image<T> crop(const Image<T>& in, int y0, int x0, int ch, int cw) {
  require(y0 >= 0 && x0 >= 0 && y0 + ch <= in.h && x0 + cw <= in.w, "crop out of bounds");
  Image<T> out(ch, cw);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = in.at(y0 + y, x0 + x, c);
  return out;
}

template <typename T>
Image<T> center_crop_resize(const Image<T>& in, int out_size) {
  int side = std::min(in.h, in.w);
  Image<T> c = crop(in, (in.h - side) / 2, (in.w - side) / 2, side, side);
  return resize_bilinear(c, out_size, out_size);
}

template <typename T, typename U>
Image<T> image_cast(const Image<U>& in) {
  Image<T> out(in.h, in.w);
  for (size_t i = 0; i < in.px.size(); ++i) out.px[i] = T(in.px[i]);
  return out;
}

}  // namespace crossview
