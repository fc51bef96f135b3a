#pragma once

// Synthetic cross-view pairs with exact ground-truth flow. A base image is
// warped by a sampled homography; the flow convention is target -> source
// (a target pixel stores where to sample the source), so gt_flow(p) =
// H_inv * p - p with H mapping source coordinates to target coordinates.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crossview/core.hpp"
#include "crossview/flow.hpp"
#include "crossview/image.hpp"
#include "crossview/pngio.hpp"
#include "crossview/rng.hpp"

namespace crossview {

struct HomographySpec {
  Eigen::Matrix3d H = Eigen::Matrix3d::Identity();  // H(2,2) kept at 1

  bool invertible() const { return std::abs(H.determinant()) > 1e-8; }

  Eigen::Matrix3d inverse() const {
    if (!invertible()) throw MatrixError("homography is singular");
    return H.inverse();
  }

  static HomographySpec normalized(const Eigen::Matrix3d& m) {
    HomographySpec h;
    require(std::abs(m(2, 2)) > 1e-12, "homography: cannot normalize H[2][2]=0");
    h.H = m / m(2, 2);
    return h;
  }
};

inline Eigen::Vector2d apply_h(const Eigen::Matrix3d& H, double x, double y) {
  Eigen::Vector3d p = H * Eigen::Vector3d(x, y, 1.0);
  if (std::abs(p.z()) < 1e-12) throw MatrixError("homography: point at infinity");
  return {p.x() / p.z(), p.y() / p.z()};
}

// Direct linear transform from 4 correspondences.
inline Eigen::Matrix3d dlt_homography(const Eigen::Vector2d src[4], const Eigen::Vector2d dst[4]) {
  Eigen::Matrix<double, 8, 8> A = Eigen::Matrix<double, 8, 8>::Zero();
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    double x = src[i].x(), y = src[i].y();
    double u = dst[i].x(), v = dst[i].y();
    A.row(2 * i) << x, y, 1, 0, 0, 0, -x * u, -y * u;
    A.row(2 * i + 1) << 0, 0, 0, x, y, 1, -x * v, -y * v;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  Eigen::Matrix<double, 8, 1> h = A.fullPivLu().solve(b);
  Eigen::Matrix3d H;
  H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return H;
}

struct PerturbRanges {
  double max_corner_shift = 0.25;  // fraction of image size, per corner and axis
  int width = 64;
  int height = 64;
};

// Image corners displaced by independent uniform draws scaled to
// max_corner_shift. Draws scale linearly with the range so that a smaller
// range with the same rng state is a shrunk version of the same warp.
// Degenerate or folding homographies are rejected and resampled.
inline HomographySpec sample_homography(Rng& rng, const PerturbRanges& ranges) {
  double W = ranges.width, Hh = ranges.height;
  const Eigen::Vector2d src[4] = {{0, 0}, {W, 0}, {W, Hh}, {0, Hh}};
  for (int attempt = 0; attempt < 100; ++attempt) {
    Eigen::Vector2d dst[4];
    for (int i = 0; i < 4; ++i) {
      double dx = rng.uniform(-1.0, 1.0) * ranges.max_corner_shift * W;
      double dy = rng.uniform(-1.0, 1.0) * ranges.max_corner_shift * Hh;
      dst[i] = src[i] + Eigen::Vector2d(dx, dy);
    }
    Eigen::Matrix3d H = dlt_homography(src, dst);
    if (std::abs(H(2, 2)) < 1e-12) continue;
    H /= H(2, 2);
    if (std::abs(H.determinant()) <= 1e-8) continue;
    // keep the projective denominator positive over the frame (no fold line)
    Eigen::Matrix3d Hi = H.inverse();
    bool ok = true;
    for (const auto& c : src) {
      if (Hi(2, 0) * c.x() + Hi(2, 1) * c.y() + Hi(2, 2) <= 1e-6) ok = false;
      if (H(2, 0) * c.x() + H(2, 1) * c.y() + H(2, 2) <= 1e-6) ok = false;
    }
    if (!ok) continue;
    HomographySpec spec;
    spec.H = H;
    return spec;
  }
  throw GenerationError("sample_homography: no invertible draw in 100 attempts");
}

// flow(p) = H_inv * p - p for every target pixel; invalid where the mapped
// point leaves [0,W) x [0,H).
template <typename T>
FlowField<T> gt_flow_from_homography(const HomographySpec& spec, int height, int width) {
  Eigen::Matrix3d Hi = spec.inverse();
  FlowField<T> flow(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      Eigen::Vector2d s = apply_h(Hi, double(x), double(y));
      flow.u(y, x) = T(s.x() - x);
      flow.v(y, x) = T(s.y() - y);
      flow.valid(y, x) = (s.x() >= 0 && s.x() < width && s.y() >= 0 && s.y() < height) ? 1 : 0;
    }
  return flow;
}

struct PhotometricSpec {
  double brightness = 0.1;  // additive, uniform in [-b, b]
  double contrast = 0.1;    // multiplicative about 0.5, uniform in [1-c, 1+c]
  double gamma = 0.1;       // exponent, uniform in [1-g, 1+g]

  static PhotometricSpec none() { return {0.0, 0.0, 0.0}; }
  bool enabled() const { return brightness > 0 || contrast > 0 || gamma > 0; }
};

template <typename T>
Image<T> apply_jitter(const Image<T>& img, const PhotometricSpec& spec, Rng& rng) {
  double b = rng.uniform(-spec.brightness, spec.brightness);
  double c = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast);
  double g = rng.uniform(1.0 - spec.gamma, 1.0 + spec.gamma);
  Image<T> out(img.h, img.w);
  for (size_t i = 0; i < img.px.size(); ++i) {
    double v = std::pow(std::max(0.0, double(img.px[i])), g);
    v = (v - 0.5) * c + 0.5 + b;
    out.px[i] = T(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

template <typename T>
struct SyntheticPair {
  Image<T> source;        // training input (jittered)
  Image<T> target;        // training input (jittered)
  Image<T> base;          // un-jittered source geometry
  Image<T> target_clean;  // un-jittered warped target
  FlowField<T> gt_flow;   // target -> source, pixels; carries the valid mask
  HomographySpec homography;
  std::string pair_id;
  int tier = 0;
};

// target(p) = base sampled at H_inv * p; out-of-frame pixels are zero and
// invalid (border-clamping is never used to extrapolate ground truth).
template <typename T>
SyntheticPair<T> render_pair(const Image<T>& base, const HomographySpec& spec,
                             const PhotometricSpec& jitter, Rng& rng) {
  SyntheticPair<T> pair;
  pair.base = base;
  pair.homography = spec;
  pair.gt_flow = gt_flow_from_homography<T>(spec, base.h, base.w);
  pair.target_clean = Image<T>(base.h, base.w);
  for (int y = 0; y < base.h; ++y)
    for (int x = 0; x < base.w; ++x)
      if (pair.gt_flow.valid(y, x))
        for (int c = 0; c < 3; ++c)
          pair.target_clean.at(y, x, c) =
              base.sample(T(x) + pair.gt_flow.u(y, x), T(y) + pair.gt_flow.v(y, x), c);
  if (jitter.enabled()) {
    Rng rs = rng.split(1), rt = rng.split(2);
    pair.source = apply_jitter(base, jitter, rs);
    pair.target = apply_jitter(pair.target_clean, jitter, rt);
    rng.next_u64();
  } else {
    pair.source = base;
    pair.target = pair.target_clean;
  }
  return pair;
}

// Multi-scale procedural texture: oriented sinusoid plaids, bilinear value
// noise at three scales, a few blended polygons. A contrast floor keeps
// correspondence well-posed.
template <typename T>
Image<T> generate_base_image(Rng& rng, int size) {
  Image<double> img(size, size, 0.5);
  int n_waves = 3 + int(rng.uniform_int(0, 3));
  for (int k = 0; k < n_waves; ++k) {
    double freq = rng.uniform(1.5, 10.0);
    double theta = rng.uniform(0.0, 6.283185307179586);
    double phase = rng.uniform(0.0, 6.283185307179586);
    double amp = rng.uniform(0.05, 0.22) / std::sqrt(double(k + 1));
    double fx = std::cos(theta) * freq / size, fy = std::sin(theta) * freq / size;
    double cr = rng.uniform(0.5, 1.0), cg = rng.uniform(0.5, 1.0), cb = rng.uniform(0.5, 1.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double s = amp * std::sin(6.283185307179586 * (fx * x + fy * y) + phase);
        img.at(y, x, 0) += s * cr;
        img.at(y, x, 1) += s * cg;
        img.at(y, x, 2) += s * cb;
      }
  }
  for (int grid : {4, 8, 16}) {
    double amp = grid == 4 ? 0.25 : grid == 8 ? 0.15 : 0.08;
    std::vector<double> cells(size_t(grid + 1) * (grid + 1) * 3);
    for (double& c : cells) c = rng.uniform(-1.0, 1.0);
    auto cell = [&](int gy, int gx, int ch) { return cells[(size_t(gy) * (grid + 1) + gx) * 3 + ch]; };
    double scale = double(grid) / size;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double gx = x * scale, gy = y * scale;
        int x0 = int(gx), y0 = int(gy);
        double fx = gx - x0, fy = gy - y0;
        for (int ch = 0; ch < 3; ++ch) {
          double v = (1 - fy) * ((1 - fx) * cell(y0, x0, ch) + fx * cell(y0, x0 + 1, ch)) +
                     fy * ((1 - fx) * cell(y0 + 1, x0, ch) + fx * cell(y0 + 1, x0 + 1, ch));
          img.at(y, x, ch) += amp * v;
        }
      }
  }
  int n_polys = 2 + int(rng.uniform_int(0, 4));
  for (int k = 0; k < n_polys; ++k) {
    double cx = rng.uniform(0.0, size), cy = rng.uniform(0.0, size);
    double r = rng.uniform(size * 0.06, size * 0.28);
    int sides = 3 + int(rng.uniform_int(0, 3));
    double rot = rng.uniform(0.0, 6.283185307179586);
    double base_v = rng.uniform(0.1, 0.9);
    double col[3] = {std::clamp(base_v + rng.uniform(-0.15, 0.15), 0.0, 1.0),
                     std::clamp(base_v + rng.uniform(-0.15, 0.15), 0.0, 1.0),
                     std::clamp(base_v + rng.uniform(-0.15, 0.15), 0.0, 1.0)};
    double alpha = rng.uniform(0.35, 0.8);
    std::vector<Eigen::Vector2d> verts(sides);
    for (int i = 0; i < sides; ++i) {
      double a = rot + 6.283185307179586 * i / sides;
      verts[i] = {cx + r * std::cos(a), cy + r * std::sin(a)};
    }
    auto inside = [&](double px, double py) {
      bool in = true;
      for (int i = 0; i < sides; ++i) {
        Eigen::Vector2d a = verts[i], b = verts[(i + 1) % sides];
        if ((b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x()) < 0) in = false;
      }
      return in;
    };
    int y0 = std::max(0, int(cy - r - 1)), y1 = std::min(size - 1, int(cy + r + 1));
    int x0 = std::max(0, int(cx - r - 1)), x1 = std::min(size - 1, int(cx + r + 1));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (inside(x + 0.5, y + 0.5))
          for (int ch = 0; ch < 3; ++ch)
            img.at(y, x, ch) = (1 - alpha) * img.at(y, x, ch) + alpha * col[ch];
  }
  // contrast floor
  double mean = 0, var = 0;
  for (double v : img.px) mean += v;
  mean /= double(img.px.size());
  for (double v : img.px) var += (v - mean) * (v - mean);
  var /= double(img.px.size());
  double sd = std::sqrt(var);
  double gain = sd < 0.12 ? 0.12 / std::max(sd, 1e-6) : 1.0;
  Image<T> out(size, size);
  for (size_t i = 0; i < img.px.size(); ++i)
    out.px[i] = T(std::clamp(0.5 + (img.px[i] - mean) * gain, 0.02, 0.98));
  return out;
}

template <typename T>
Image<T> load_base_image_from_dir(Rng& rng, const std::string& dir, int size) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IngestionError("no .png files in base image directory: " + dir);
  const std::string& f = files[size_t(rng.uniform_int(0, std::int64_t(files.size())))];
  return center_crop_resize(read_png<T>(f), size);
}

// ---- dataset manifest ----

struct ManifestEntry {
  std::string pair_id;
  std::string source_png, target_png, flow_flo, valid_png;  // relative to manifest dir
  double h[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  int tier = 0;

  HomographySpec homography() const {
    HomographySpec s;
    s.H << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
    return s;
  }
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write manifest: " + path);
  out << "# pair_id,source,target,flow,valid,h00,h01,h02,h10,h11,h12,h20,h21,h22,tier\n";
  out.precision(17);
  for (const auto& e : entries) {
    out << e.pair_id << ',' << e.source_png << ',' << e.target_png << ',' << e.flow_flo << ','
        << e.valid_png;
    for (double v : e.h) out << ',' << v;
    out << ',' << e.tier << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("manifest not found: " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    size_t pos = 0;
    while (true) {
      size_t c = line.find(',', pos);
      f.push_back(line.substr(pos, c == std::string::npos ? c : c - pos));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
    if (f.size() != 15) throw IngestionError("malformed manifest line: " + line);
    ManifestEntry e;
    e.pair_id = f[0];
    e.source_png = f[1];
    e.target_png = f[2];
    e.flow_flo = f[3];
    e.valid_png = f[4];
    for (int i = 0; i < 9; ++i) e.h[i] = std::stod(f[5 + i]);
    e.tier = std::stoi(f[14]);
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace crossview
