// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable emission-absorption rendering of voxel density grids with
// orthographic cameras, plus OBJ / PPM export.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "cg3d/tensor.hpp"

namespace cg3d {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raw density whose softplus underflows to exactly zero.
inline constexpr double kEmptyRawDensity = -1000.0;

// A cubic voxel grid covering [-1, 1]^3. Voxel (x, y, z) lives at flat index
// (z * R + y) * R + x and its center is at -1 + (i + 0.5) * 2 / R per axis.
struct DensityGrid {
  std::size_t resolution = 0;
  Tensor raw_density;  // [R, R, R]
  Tensor raw_albedo;   // [R, R, R, 3]

  static DensityGrid filled(std::size_t r, double raw_density, double raw_albedo = 0.0) {
    if (r < 2) throw std::invalid_argument("grid resolution must be >= 2");
    return {r, Tensor::full({r, r, r}, raw_density), Tensor::full({r, r, r, 3}, raw_albedo)};
  }
  static DensityGrid empty(std::size_t r) { return filled(r, kEmptyRawDensity); }

  std::size_t voxel_count() const { return resolution * resolution * resolution; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * resolution + y) * resolution + x;
  }
  double voxel_center(std::size_t i) const {
    return -1.0 + (static_cast<double>(i) + 0.5) * 2.0 / static_cast<double>(resolution);
  }

  Tensor density() const { return softplus(raw_density); }
  Tensor color() const { return sigmoid(raw_albedo); }

  // Copy whose parameters are fresh leaves on `tape`.
  DensityGrid attach(Tape& tape) const {
    return {resolution, tape.leaf(raw_density), tape.leaf(raw_albedo)};
  }
  DensityGrid detach() const { return {resolution, raw_density.detach(), raw_albedo.detach()}; }
};

using Vec3 = std::array<double, 3>;

struct Camera {
  double azimuth = 0.0;    // radians, about +y; 0 looks down -z
  double elevation = 0.0;  // radians
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t samples_per_ray = 64;
  double half_extent = 1.0;  // image plane covers [-e, e]^2 in world units

  // Unit vector from the origin toward the camera.
  Vec3 toward_camera() const {
    return {std::cos(elevation) * std::sin(azimuth), std::sin(elevation),
            std::cos(elevation) * std::cos(azimuth)};
  }
  Vec3 view_direction() const {
    Vec3 d = toward_camera();
    return {-d[0], -d[1], -d[2]};
  }
  Vec3 right() const { return {std::cos(azimuth), 0.0, -std::sin(azimuth)}; }
  Vec3 up() const {
    return {-std::sin(elevation) * std::sin(azimuth), std::cos(elevation),
            -std::sin(elevation) * std::cos(azimuth)};
  }
};

inline double degrees_to_radians(double deg) { return deg * std::numbers::pi / 180.0; }

inline std::vector<Camera> make_view_ring(std::size_t n, double elevation, std::size_t h = 64,
                                          std::size_t w = 64, std::size_t samples = 64) {
  if (n == 0) throw std::invalid_argument("view ring needs at least one camera");
  if (h < 8 || w < 8) throw std::invalid_argument("image size must be at least 8x8");
  if (samples == 0) throw std::invalid_argument("samples per ray must be positive");
  std::vector<Camera> cams;
  cams.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Camera c;
    c.azimuth = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    c.elevation = elevation;
    c.height = h;
    c.width = w;
    c.samples_per_ray = samples;
    cams.push_back(c);
  }
  return cams;
}

struct RenderedView {
  Tensor rgb;    // [H, W, 3]
  Tensor alpha;  // [H, W], 1 - residual transmittance
};

struct ViewSet {
  std::vector<Tensor> images;  // [H, W, 3] each
  std::vector<Tensor> alphas;  // [H, W] each
  std::vector<Camera> cameras;

  std::size_t size() const { return images.size(); }
};

namespace detail {

struct Ray {
  Vec3 origin;
  Vec3 dir;
  double t0 = 0.0;
  double t1 = 0.0;
  bool hit = false;
};

inline Ray pixel_ray(const Camera& cam, std::size_t row, std::size_t col) {
  const double u = ((static_cast<double>(col) + 0.5) / static_cast<double>(cam.width) * 2.0 - 1.0) *
                   cam.half_extent;
  const double v = (1.0 - (static_cast<double>(row) + 0.5) / static_cast<double>(cam.height) * 2.0) *
                   cam.half_extent;
  const Vec3 r = cam.right(), up = cam.up(), back = cam.toward_camera();
  Ray ray;
  ray.dir = cam.view_direction();
  for (int a = 0; a < 3; ++a) ray.origin[a] = u * r[a] + v * up[a] + 4.0 * back[a];
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(ray.dir[a]) < 1e-12) {
      if (ray.origin[a] < -1.0 || ray.origin[a] > 1.0) return ray;
      continue;
    }
    double ta = (-1.0 - ray.origin[a]) / ray.dir[a];
    double tb = (1.0 - ray.origin[a]) / ray.dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  ray.t0 = t0;
  ray.t1 = t1;
  ray.hit = t1 > t0;
  return ray;
}

struct Trilinear {
  std::array<std::size_t, 8> idx;
  std::array<double, 8> w;
};

inline Trilinear trilinear(std::size_t r, const Vec3& p) {
  std::array<std::size_t, 3> i0{};
  std::array<double, 3> f{};
  const double rd = static_cast<double>(r);
  for (int a = 0; a < 3; ++a) {
    double g = (p[a] + 1.0) * 0.5 * rd - 0.5;
    g = std::clamp(g, 0.0, rd - 1.0);
    auto i = static_cast<std::size_t>(g);
    if (i > r - 2) i = r - 2;
    i0[a] = i;
    f[a] = g - static_cast<double>(i);
  }
  Trilinear t{};
  int k = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx, ++k) {
        t.idx[k] = ((i0[2] + dz) * r + (i0[1] + dy)) * r + (i0[0] + dx);
        t.w[k] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
      }
  return t;
}

inline constexpr double kBackground = 1.0;

// Density and color interleaved per voxel so one trilinear tap touches one
// contiguous record.
inline std::vector<double> pack_voxels(std::span<const double> sigma, std::span<const double> color) {
  std::vector<double> packed(sigma.size() * 4);
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    packed[4 * i] = sigma[i];
    packed[4 * i + 1] = color[3 * i];
    packed[4 * i + 2] = color[3 * i + 1];
    packed[4 * i + 3] = color[3 * i + 2];
  }
  return packed;
}

// Interpolated (sigma, r, g, b) at one sample.
inline void sample_packed(const Trilinear& tl, const double* packed, double out[4]) {
  out[0] = out[1] = out[2] = out[3] = 0.0;
  for (int j = 0; j < 8; ++j) {
    const double* v = packed + 4 * tl.idx[j];
    const double w = tl.w[j];
    out[0] += w * v[0];
    out[1] += w * v[1];
    out[2] += w * v[2];
    out[3] += w * v[3];
  }
}

// Marches every pixel ray; writes [H, W, 4] = rgb + alpha.
inline std::vector<double> march(std::size_t r, std::span<const double> sigma,
                                 std::span<const double> color, const Camera& cam) {
  const std::size_t h = cam.height, w = cam.width, s = cam.samples_per_ray;
  const std::vector<double> packed = pack_voxels(sigma, color);
  std::vector<double> out(h * w * 4);
  for (std::size_t row = 0; row < h; ++row) {
    for (std::size_t col = 0; col < w; ++col) {
      double* px = &out[(row * w + col) * 4];
      const Ray ray = pixel_ray(cam, row, col);
      if (!ray.hit) {
        px[0] = px[1] = px[2] = kBackground;
        px[3] = 0.0;
        continue;
      }
      const double delta = (ray.t1 - ray.t0) / static_cast<double>(s);
      double trans = 1.0;
      double acc[3] = {0.0, 0.0, 0.0};
      for (std::size_t k = 0; k < s; ++k) {
        const double t = ray.t0 + (static_cast<double>(k) + 0.5) * delta;
        const Vec3 p{ray.origin[0] + t * ray.dir[0], ray.origin[1] + t * ray.dir[1],
                     ray.origin[2] + t * ray.dir[2]};
        double v[4];
        sample_packed(trilinear(r, p), packed.data(), v);
        const double atten = std::exp(-v[0] * delta);
        const double weight = trans * (1.0 - atten);
        for (int ch = 0; ch < 3; ++ch) acc[ch] += weight * v[ch + 1];
        trans *= atten;
      }
      for (int ch = 0; ch < 3; ++ch) px[ch] = acc[ch] + trans * kBackground;
      px[3] = 1.0 - trans;
    }
  }
  return out;
}

inline void march_backward(std::size_t r, std::span<const double> sigma,
                           std::span<const double> color, const Camera& cam,
                           std::span<const double> g, std::span<double> g_sigma,
                           std::span<double> g_color) {
  const std::size_t h = cam.height, w = cam.width, s = cam.samples_per_ray;
  const std::vector<double> packed = pack_voxels(sigma, color);
  std::vector<Trilinear> taps(s);
  std::vector<double> trans_before(s), atten(s), col(3 * s);
  for (std::size_t row = 0; row < h; ++row) {
    for (std::size_t pcol = 0; pcol < w; ++pcol) {
      const double* gp = &g[(row * w + pcol) * 4];
      if (gp[0] == 0.0 && gp[1] == 0.0 && gp[2] == 0.0 && gp[3] == 0.0) continue;
      const Ray ray = pixel_ray(cam, row, pcol);
      if (!ray.hit) continue;
      const double delta = (ray.t1 - ray.t0) / static_cast<double>(s);
      double trans = 1.0;
      for (std::size_t k = 0; k < s; ++k) {
        const double t = ray.t0 + (static_cast<double>(k) + 0.5) * delta;
        const Vec3 p{ray.origin[0] + t * ray.dir[0], ray.origin[1] + t * ray.dir[1],
                     ray.origin[2] + t * ray.dir[2]};
        taps[k] = trilinear(r, p);
        double v[4];
        sample_packed(taps[k], packed.data(), v);
        for (int ch = 0; ch < 3; ++ch) col[3 * k + ch] = v[ch + 1];
        trans_before[k] = trans;
        atten[k] = std::exp(-v[0] * delta);
        trans *= atten[k];
      }
      const double trans_final = trans;
      // suffix = sum_{j>k} T_j a_j c_j + T_final * background
      double suffix[3] = {trans_final * kBackground, trans_final * kBackground,
                          trans_final * kBackground};
      for (std::size_t k = s; k-- > 0;) {
        const double tk = trans_before[k];
        const double weight = tk * (1.0 - atten[k]);
        const double t_next = tk * atten[k];
        double d_sigma = gp[3] * delta * trans_final;
        for (int ch = 0; ch < 3; ++ch) {
          d_sigma += gp[ch] * delta * (t_next * col[3 * k + ch] - suffix[ch]);
        }
        for (int j = 0; j < 8; ++j) {
          const double wj = taps[k].w[j];
          if (wj == 0.0) continue;
          const std::size_t vi = taps[k].idx[j];
          g_sigma[vi] += wj * d_sigma;
          if (!g_color.empty())
            for (int ch = 0; ch < 3; ++ch) g_color[vi * 3 + ch] += wj * weight * gp[ch];
        }
        for (int ch = 0; ch < 3; ++ch) suffix[ch] += weight * col[3 * k + ch];
      }
    }
  }
}

// Records the render as a single op with parents (density, color).
inline Tensor render_rgba(std::size_t r, const Tensor& sigma, const Tensor& color, const Camera& cam) {
  std::vector<double> out = march(r, sigma.data(), color.data(), cam);
  BackwardFn bw;
  if (sigma.on_tape() || color.on_tape()) {
    bw = [r, sigma = sigma.detach(), color = color.detach(), cam](std::span<const double> g,
                                                                  std::span<std::span<double>> pg) {
      std::vector<double> scratch;
      std::span<double> gs = pg[0];
      if (gs.empty()) {
        scratch.assign(sigma.size(), 0.0);
        gs = scratch;
      }
      march_backward(r, sigma.data(), color.data(), cam, g, gs, pg[1]);
    };
  }
  return make_result("render", Shape{cam.height, cam.width, 4}, std::move(out), {&sigma, &color},
                     std::move(bw));
}

}  // namespace detail

inline RenderedView render_view(const DensityGrid& grid, const Camera& cam) {
  Tensor rgba = detail::render_rgba(grid.resolution, grid.density(), grid.color(), cam);
  return {take_channels(rgba, 0, 3), reshape(take_channels(rgba, 3, 1), {cam.height, cam.width})};
}

inline ViewSet render_views(const DensityGrid& grid, std::span<const Camera> cams) {
  if (cams.empty()) throw std::invalid_argument("render_views needs at least one camera");
  const Tensor sigma = grid.density();
  const Tensor color = grid.color();
  ViewSet vs;
  for (const Camera& cam : cams) {
    Tensor rgba = detail::render_rgba(grid.resolution, sigma, color, cam);
    vs.images.push_back(take_channels(rgba, 0, 3));
    vs.alphas.push_back(reshape(take_channels(rgba, 3, 1), {cam.height, cam.width}));
    vs.cameras.push_back(cam);
  }
  return vs;
}

// Images side by side: [H, N * W, 3].
inline Tensor contact_sheet(const ViewSet& views) {
  if (views.size() == 0) throw std::invalid_argument("empty view set");
  const std::size_t h = views.images[0].shape()[0], w = views.images[0].shape()[1];
  const std::size_t n = views.size();
  std::vector<double> out(h * n * w * 3);
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          out[(y * n * w + v * w + x) * 3 + c] = views.images[v][(y * w + x) * 3 + c];
  return Tensor({h, n * w, 3}, std::move(out));
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  return f;
}

// Binary P6, 8 bits per channel, v * 255 rounded half-up.
inline void export_image(const Tensor& img, const std::filesystem::path& path) {
  if (img.rank() != 3 || img.shape()[2] != 3) {
    throw ShapeError("export_image needs [H,W,3], got " + to_string(img.shape()));
  }
  for (double v : img.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("pixel value out of [0,1]: " + std::to_string(v));
  }
  std::string bytes;
  bytes.reserve(img.size());
  for (double v : img.data()) bytes.push_back(static_cast<char>(std::floor(v * 255.0 + 0.5)));
  std::ofstream f = open_for_write(path);
  f << "P6\n" << img.shape()[1] << ' ' << img.shape()[0] << "\n255\n";
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline Tensor read_image(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) throw IoError("not an 8-bit P6 file: " + path.string());
  f.get();
  std::string bytes(w * h * 3, '\0');
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("truncated image: " + path.string());
  std::vector<double> v(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  return Tensor({h, w, 3}, std::move(v));
}

// One quad (two triangles) per occupied-voxel face not shared with another
// occupied voxel. Returns the triangle count.
inline std::size_t export_obj(const DensityGrid& grid, double threshold,
                              const std::filesystem::path& path) {
  if (!(threshold > 0.0)) throw std::invalid_argument("OBJ threshold must be positive");
  const std::size_t r = grid.resolution;
  const Tensor sigma = grid.density().detach();
  auto occupied = [&](long x, long y, long z) {
    const long rr = static_cast<long>(r);
    if (x < 0 || y < 0 || z < 0 || x >= rr || y >= rr || z >= rr) return false;
    return sigma[grid.index(x, y, z)] > threshold;
  };
  std::map<std::tuple<long, long, long>, std::size_t> vertex_ids;
  std::vector<std::tuple<long, long, long>> vertices;
  std::vector<std::array<std::size_t, 3>> tris;
  auto vid = [&](long x, long y, long z) {
    auto [it, inserted] = vertex_ids.try_emplace({x, y, z}, vertices.size() + 1);
    if (inserted) vertices.emplace_back(x, y, z);
    return it->second;
  };
  // Corners of each face, counter-clockwise seen from outside.
  static constexpr int kFaces[6][4][3] = {
      {{1, 0, 0}, {1, 1, 0}, {1, 1, 1}, {1, 0, 1}},  // +x
      {{0, 0, 0}, {0, 0, 1}, {0, 1, 1}, {0, 1, 0}},  // -x
      {{0, 1, 0}, {0, 1, 1}, {1, 1, 1}, {1, 1, 0}},  // +y
      {{0, 0, 0}, {1, 0, 0}, {1, 0, 1}, {0, 0, 1}},  // -y
      {{0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}},  // +z
      {{0, 0, 0}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}},  // -z
  };
  static constexpr int kNeighbor[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                          {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (long z = 0; z < static_cast<long>(r); ++z)
    for (long y = 0; y < static_cast<long>(r); ++y)
      for (long x = 0; x < static_cast<long>(r); ++x) {
        if (!occupied(x, y, z)) continue;
        for (int f = 0; f < 6; ++f) {
          if (occupied(x + kNeighbor[f][0], y + kNeighbor[f][1], z + kNeighbor[f][2])) continue;
          std::array<std::size_t, 4> q{};
          for (int c = 0; c < 4; ++c)
            q[c] = vid(x + kFaces[f][c][0], y + kFaces[f][c][1], z + kFaces[f][c][2]);
          tris.push_back({q[0], q[1], q[2]});
          tris.push_back({q[0], q[2], q[3]});
        }
      }
  std::ofstream out = open_for_write(path);
  out << "# cg3d voxel export, " << tris.size() << " triangles\n";
  const double step = 2.0 / static_cast<double>(r);
  char buf[96];
  for (const auto& [x, y, z] : vertices) {
    std::snprintf(buf, sizeof(buf), "v %.6f %.6f %.6f\n", -1.0 + x * step, -1.0 + y * step,
                  -1.0 + z * step);
    out << buf;
  }
  for (const auto& t : tris) out << "f " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
  if (!out) throw IoError("write failed: " + path.string());
  return tris.size();
}

}  // namespace cg3d
