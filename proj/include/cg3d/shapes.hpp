// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Procedural voxel shapes built from analytic signed distances.

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cg3d/render.hpp"

namespace cg3d {

// Raw density = kLatentGain * (occupancy - 0.5): occupancy 1 gives density
// softplus(20) ~= 20, occupancy 0 gives ~2e-9. The native 3D prior works
// directly on occupancy, so this map doubles as its (fixed, affine) decoder.
inline constexpr double kLatentGain = 40.0;
inline constexpr double kDensityInside = 20.0;

enum class ShapeKind { sphere, cube, torus, two_spheres, janus_shell };

struct ShapeParams {
  double radius = 0.5;     // sphere, blob radius for two_spheres, plate radius for janus_shell
  double half_size = 0.4;  // cube
  double major = 0.5;      // torus ring radius
  double minor = 0.18;     // torus tube radius
  double gap = 0.2;        // two_spheres surface-to-surface gap
  double offset = 0.45;    // janus_shell plate depth
  double thickness = 0.15; // janus_shell plate thickness
  double elevation = 0.0;  // janus_shell plates face the azimuth-0 camera at this elevation
};

struct ConceptSpec {
  std::string name;
  ShapeKind kind = ShapeKind::sphere;
  ShapeParams params;
  std::size_t label = 0;
  double position_jitter = 0.0;  // uniform offset per axis in [-j, j]
  double size_jitter = 0.0;      // uniform size scale in [1 - j, 1 + j]
  Vec3 albedo{0.7, 0.7, 0.7};
};

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Default ring elevation shared by every module (15 degrees).
inline double default_elevation() { return degrees_to_radians(15.0); }

// Registered concepts. The first three form the training vocabulary; torus
// and janus_shell are probes that never enter training data.
inline const std::vector<ConceptSpec>& concept_registry() {
  static const std::vector<ConceptSpec> registry = [] {
    std::vector<ConceptSpec> r;
    r.push_back({"sphere", ShapeKind::sphere, {}, 0, 0.08, 0.15, {0.85, 0.35, 0.3}});
    r.push_back({"cube", ShapeKind::cube, {}, 1, 0.08, 0.15, {0.3, 0.55, 0.85}});
    r.push_back({"two_spheres", ShapeKind::two_spheres, {.radius = 0.3, .gap = 0.2}, 2, 0.06, 0.1,
                 {0.35, 0.8, 0.4}});
    r.push_back({"torus", ShapeKind::torus, {}, 3, 0.05, 0.1, {0.85, 0.7, 0.3}});
    ShapeParams janus;
    janus.elevation = default_elevation();
    r.push_back({"janus_shell", ShapeKind::janus_shell, janus, 4, 0.0, 0.0, {0.6, 0.6, 0.6}});
    return r;
  }();
  return registry;
}

inline constexpr std::size_t kTrainingVocabulary = 3;

inline const ConceptSpec& find_concept(const std::string& name) {
  for (const ConceptSpec& c : concept_registry())
    if (c.name == name) return c;
  throw std::invalid_argument("unknown concept: " + name);
}

inline const ConceptSpec& concept_by_label(std::size_t label) {
  for (const ConceptSpec& c : concept_registry())
    if (c.label == label) return c;
  throw std::out_of_range("unknown concept label: " + std::to_string(label));
}

namespace detail {

inline double sd_sphere(const Vec3& p, const Vec3& c, double r) {
  return std::hypot(p[0] - c[0], p[1] - c[1], p[2] - c[2]) - r;
}

inline double sd_box(const Vec3& p, const Vec3& c, double h) {
  double qx = std::abs(p[0] - c[0]) - h, qy = std::abs(p[1] - c[1]) - h, qz = std::abs(p[2] - c[2]) - h;
  double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0), std::max(qz, 0.0));
  return outside + std::min(std::max({qx, qy, qz}), 0.0);
}

inline double shape_sdf(const ConceptSpec& spec, const Vec3& p, const Vec3& center, double s) {
  const ShapeParams& q = spec.params;
  switch (spec.kind) {
    case ShapeKind::sphere:
      return sd_sphere(p, center, q.radius * s);
    case ShapeKind::cube:
      return sd_box(p, center, q.half_size * s);
    case ShapeKind::torus: {
      const double x = p[0] - center[0], y = p[1] - center[1], z = p[2] - center[2];
      return std::hypot(std::hypot(x, z) - q.major * s, y) - q.minor * s;
    }
    case ShapeKind::two_spheres: {
      const double off = q.radius * s + 0.5 * q.gap;
      return std::min(sd_sphere(p, {center[0] - off, center[1], center[2]}, q.radius * s),
                      sd_sphere(p, {center[0] + off, center[1], center[2]}, q.radius * s));
    }
    case ShapeKind::janus_shell: {
      const Vec3 n{0.0, std::sin(q.elevation), std::cos(q.elevation)};
      const Vec3 d{p[0] - center[0], p[1] - center[1], p[2] - center[2]};
      const double depth = d[0] * n[0] + d[1] * n[1] + d[2] * n[2];
      const double rho = std::hypot(d[0] - depth * n[0], d[1] - depth * n[1], d[2] - depth * n[2]);
      const double disk = rho - q.radius * s;
      const double front = std::max(disk, std::abs(depth - q.offset * s) - 0.5 * q.thickness * s);
      const double back = std::max(disk, std::abs(depth + q.offset * s) - 0.5 * q.thickness * s);
      return std::min(front, back);
    }
  }
  return 1.0;
}

inline void validate(const ConceptSpec& spec) {
  const ShapeParams& q = spec.params;
  bool ok = true;
  switch (spec.kind) {
    case ShapeKind::sphere: ok = q.radius > 0; break;
    case ShapeKind::cube: ok = q.half_size > 0; break;
    case ShapeKind::torus: ok = q.major > 0 && q.minor > 0; break;
    case ShapeKind::two_spheres: ok = q.radius > 0 && q.gap > 0; break;
    case ShapeKind::janus_shell: ok = q.radius > 0 && q.thickness > 0 && q.offset > 0; break;
  }
  if (!ok || spec.size_jitter < 0 || spec.size_jitter >= 1 || spec.position_jitter < 0) {
    throw std::invalid_argument("degenerate shape spec: " + spec.name);
  }
}

}  // namespace detail

// Occupancy in [0,1] with a one-voxel linear ramp across the surface.
inline std::vector<double> shape_occupancy(const ConceptSpec& spec, std::size_t r, const Vec3& center,
                                           double size_scale) {
  detail::validate(spec);
  const double voxel = 2.0 / static_cast<double>(r);
  std::vector<double> occ(r * r * r);
  for (std::size_t z = 0; z < r; ++z)
    for (std::size_t y = 0; y < r; ++y)
      for (std::size_t x = 0; x < r; ++x) {
        const Vec3 p{-1.0 + (x + 0.5) * voxel, -1.0 + (y + 0.5) * voxel, -1.0 + (z + 0.5) * voxel};
        const double sd = detail::shape_sdf(spec, p, center, size_scale);
        occ[(z * r + y) * r + x] = std::clamp(0.5 - sd / voxel, 0.0, 1.0);
      }
  return occ;
}

inline DensityGrid grid_from_occupancy(std::size_t r, std::span<const double> occ, const Vec3& albedo) {
  if (occ.size() != r * r * r) throw ShapeError("occupancy size does not match resolution");
  std::vector<double> raw(occ.size());
  for (std::size_t i = 0; i < occ.size(); ++i) raw[i] = kLatentGain * (occ[i] - 0.5);
  std::vector<double> alb(occ.size() * 3);
  for (std::size_t i = 0; i < occ.size(); ++i)
    for (int c = 0; c < 3; ++c) alb[i * 3 + c] = logit(albedo[c]);
  return {r, Tensor({r, r, r}, std::move(raw)), Tensor({r, r, r, 3}, std::move(alb))};
}

inline std::vector<double> occupancy_from_grid(const DensityGrid& grid) {
  std::vector<double> occ(grid.voxel_count());
  for (std::size_t i = 0; i < occ.size(); ++i) occ[i] = grid.raw_density[i] / kLatentGain + 0.5;
  return occ;
}

// Zero-jitter instance of the concept.
inline DensityGrid canonical_shape(const ConceptSpec& spec, std::size_t r) {
  return grid_from_occupancy(r, shape_occupancy(spec, r, {0.0, 0.0, 0.0}, 1.0), spec.albedo);
}

template <class Rng>
DensityGrid generate_shape(const ConceptSpec& spec, std::size_t r, Rng& rng) {
  detail::validate(spec);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Vec3 center{0.0, 0.0, 0.0};
  for (double& c : center) c = spec.position_jitter * unit(rng);
  const double s = 1.0 + spec.size_jitter * unit(rng);
  return grid_from_occupancy(r, shape_occupancy(spec, r, center, s), spec.albedo);
}

// 6-connected components of voxels whose density exceeds `threshold`.
// Returns a label per voxel (0 = empty, components numbered from 1).
inline std::vector<std::size_t> label_components(const DensityGrid& grid, double threshold,
                                                 std::size_t* count = nullptr) {
  const std::size_t r = grid.resolution;
  const Tensor sigma = grid.density().detach();
  std::vector<std::size_t> label(grid.voxel_count(), 0);
  std::vector<std::size_t> stack;
  std::size_t next = 0;
  for (std::size_t start = 0; start < label.size(); ++start) {
    if (label[start] != 0 || !(sigma[start] > threshold)) continue;
    ++next;
    label[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      const std::size_t x = v % r, y = (v / r) % r, z = v / (r * r);
      const std::size_t nbr[6][3] = {{x + 1, y, z}, {x - 1, y, z}, {x, y + 1, z},
                                     {x, y - 1, z}, {x, y, z + 1}, {x, y, z - 1}};
      for (const auto& n : nbr) {
        if (n[0] >= r || n[1] >= r || n[2] >= r) continue;  // wraps below zero too
        const std::size_t u = grid.index(n[0], n[1], n[2]);
        if (label[u] != 0 || !(sigma[u] > threshold)) continue;
        label[u] = next;
        stack.push_back(u);
      }
    }
  }
  if (count) *count = next;
  return label;
}

}  // namespace cg3d
