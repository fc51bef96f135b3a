#pragma once

#include <algorithm>
#include <cmath>

#include "crossview/core.hpp"
#include "crossview/image.hpp"

namespace crossview {

// Dense displacement field, target -> source. u is the x displacement,
// v the y displacement; valid marks pixels whose match stays in frame.
template <typename T>
struct FlowField {
  Mat<T> u;
  Mat<T> v;
  MatX8 valid;

  FlowField() = default;
  FlowField(int h, int w) : u(Mat<T>::Zero(h, w)), v(Mat<T>::Zero(h, w)), valid(MatX8::Constant(h, w, 1)) {}

  int h() const { return int(u.rows()); }
  int w() const { return int(u.cols()); }
  bool same_shape(const FlowField& o) const { return u.rows() == o.u.rows() && u.cols() == o.u.cols(); }
  std::int64_t valid_count() const { return valid.template cast<std::int64_t>().sum(); }
};

namespace detail {
template <typename T>
T sample_mat(const Mat<T>& m, T x, T y) {
  T xc = std::clamp(x, T(0), T(m.cols() - 1));
  T yc = std::clamp(y, T(0), T(m.rows() - 1));
  int x0 = int(std::floor(xc)), y0 = int(std::floor(yc));
  int x1 = std::min(x0 + 1, int(m.cols()) - 1), y1 = std::min(y0 + 1, int(m.rows()) - 1);
  T fx = xc - T(x0), fy = yc - T(y0);
  return (T(1) - fy) * ((T(1) - fx) * m(y0, x0) + fx * m(y0, x1)) +
         fy * ((T(1) - fx) * m(y1, x0) + fx * m(y1, x1));
}
}  // namespace detail

// Bilinear resize with displacement values rescaled by the per-axis size
// ratio; validity is carried over by nearest neighbor. The value rescaling
// is what converts token-unit flow into pixel-unit flow when the output
// grid is the pixel grid.
template <typename T>
FlowField<T> upsample_flow(const FlowField<T>& in, int out_h, int out_w) {
  if (in.h() == out_h && in.w() == out_w) return in;
  FlowField<T> out(out_h, out_w);
  T rx = T(out_w) / T(in.w());
  T ry = T(out_h) / T(in.h());
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      T ix = (T(x) + T(0.5)) / rx - T(0.5);
      T iy = (T(y) + T(0.5)) / ry - T(0.5);
      out.u(y, x) = detail::sample_mat(in.u, ix, iy) * rx;
      out.v(y, x) = detail::sample_mat(in.v, ix, iy) * ry;
      int nx = std::clamp(int(std::lround(ix)), 0, in.w() - 1);
      int ny = std::clamp(int(std::lround(iy)), 0, in.h() - 1);
      out.valid(y, x) = in.valid(ny, nx);
    }
  return out;
}

// Resize without value rescaling, for fields already in output units.
template <typename T>
FlowField<T> resize_flow_keep_units(const FlowField<T>& in, int out_h, int out_w) {
  FlowField<T> out = upsample_flow(in, out_h, out_w);
  T rx = T(out_w) / T(in.w());
  T ry = T(out_h) / T(in.h());
  out.u /= rx;
  out.v /= ry;
  return out;
}

// out(p) = source sampled at p + flow(p); out-of-frame points come back
// zero and invalid. Flow validity propagates.
template <typename T>
Image<T> warp_image(const Image<T>& source, const FlowField<T>& flow, MatX8* out_valid = nullptr) {
  require(source.h == flow.h() && source.w == flow.w(), "warp_image: flow/image shape mismatch");
  Image<T> out(source.h, source.w);
  if (out_valid) *out_valid = MatX8::Zero(source.h, source.w);
  for (int y = 0; y < source.h; ++y)
    for (int x = 0; x < source.w; ++x) {
      T sx = T(x) + flow.u(y, x);
      T sy = T(y) + flow.v(y, x);
      bool ok = flow.valid(y, x) != 0 && source.in_frame(sx, sy);
      if (ok)
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = source.sample(sx, sy, c);
      if (out_valid && ok) (*out_valid)(y, x) = 1;
    }
  return out;
}

}  // namespace crossview
