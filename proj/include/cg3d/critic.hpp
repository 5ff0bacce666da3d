// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Binary Yes/No critic over multi-view renders. The reward is the log-odds
// z_yes - z_no, which is differentiable with respect to the grid whenever the
// critic itself is (the programmatic toy critic here is).

#pragma once

#include <cmath>
#include <map>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "cg3d/render.hpp"
#include "cg3d/shapes.hpp"
#include "cg3d/tensor.hpp"

namespace cg3d {

inline constexpr const char* kContentHeading = "Content Match";
inline constexpr const char* kGeometryHeading = "Geometric Quality";
inline constexpr const char* kAnswerInstruction = "Strictly respond with only 'Yes' or 'No'.";

struct CriticQuery {
  std::string content_text;
  std::string template_id;  // registered concept name
  bool include_geometry = true;

  std::string serialize() const {
    std::string s =
        "Carefully evaluate the provided images, which show multiple views of a single 3D object. "
        "Does the underlying 3D object, considering all views together, meet all of the following "
        "criteria simultaneously?\n";
    s += std::string("1. ") + kContentHeading +
         ": The object corresponds to the description: " + content_text + ".\n";
    if (include_geometry) {
      s += std::string("2. ") + kGeometryHeading +
           ": Based on all views combined, the object appears geometrically sound and consistent. "
           "There are no visible signs of major flaws such as multiple faces on one part "
           "(Janus-faced issue), broken surfaces, intersecting geometry, or highly unrealistic "
           "polygonal facets when considering the object from these different perspectives.\n";
    }
    s += kAnswerInstruction;
    return s;
  }
};

inline CriticQuery build_query(std::string content_text, const std::string& template_id,
                               bool include_geometry) {
  find_concept(template_id);  // throws on unknown template
  return {std::move(content_text), template_id, include_geometry};
}

struct SilhouetteTemplate {
  std::string concept_name;
  std::vector<Tensor> masks;  // [H, W] in {0, 1}, one per camera
  std::vector<Camera> cameras;
};

inline constexpr std::size_t kTemplateResolution = 32;

// Silhouettes of the zero-jitter concept seen from `cams`, cached by
// (concept, camera layout).
inline SilhouetteTemplate make_template(const std::string& concept_name, std::span<const Camera> cams) {
  using Key = std::tuple<std::string, std::vector<std::tuple<double, double, std::size_t, std::size_t,
                                                             std::size_t, double>>>;
  static std::mutex mu;
  static std::map<Key, SilhouetteTemplate> cache;
  Key key{concept_name, {}};
  for (const Camera& c : cams)
    std::get<1>(key).emplace_back(c.azimuth, c.elevation, c.height, c.width, c.samples_per_ray,
                                  c.half_extent);
  {
    std::lock_guard lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  const DensityGrid shape = canonical_shape(find_concept(concept_name), kTemplateResolution);
  SilhouetteTemplate t{concept_name, {}, {cams.begin(), cams.end()}};
  for (const Camera& c : cams) {
    RenderedView v = render_view(shape, c);
    std::vector<double> m(v.alpha.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = v.alpha[i] > 0.5 ? 1.0 : 0.0;
    t.masks.emplace_back(v.alpha.shape(), std::move(m));
  }
  std::lock_guard lock(mu);
  return cache.emplace(key, std::move(t)).first->second;
}

struct CriticConfig {
  double content_scale = 4.0;   // a
  double geometry_scale = 4.0;  // b
  double no_scale = 8.0;        // c
  double kappa = 20.0;          // sigmoid sharpness of the occupancy relaxation
  double density_threshold = 1.0;
};

inline Tensor soft_iou(const Tensor& alpha, const Tensor& mask) {
  Tensor inter = dot(alpha, mask);
  Tensor uni = add_scalar(sub(add(sum(alpha), sum(mask)), inter), 1e-9);
  return div(inter, uni);
}

// Mean soft-IoU of rendered opacity against the template masks.
inline Tensor content_score(const ViewSet& views, const SilhouetteTemplate& tmpl) {
  if (views.size() != tmpl.masks.size()) {
    throw std::invalid_argument("view count " + std::to_string(views.size()) +
                                " does not match template mask count " +
                                std::to_string(tmpl.masks.size()));
  }
  if (views.size() == 0) throw std::invalid_argument("empty view set");
  Tensor total = soft_iou(views.alphas[0], tmpl.masks[0]);
  for (std::size_t v = 1; v < views.size(); ++v) total = add(total, soft_iou(views.alphas[v], tmpl.masks[v]));
  return scale(total, 1.0 / static_cast<double>(views.size()));
}

// Soft fraction of occupancy inside the largest hard-thresholded component.
// Empty grids count as fully connected.
inline Tensor connectedness(const DensityGrid& grid, const CriticConfig& cfg = {}) {
  std::size_t count = 0;
  const std::vector<std::size_t> label = label_components(grid, cfg.density_threshold, &count);
  if (count == 0) return Tensor::scalar(1.0);
  Tensor occ = sigmoid(scale(add_scalar(grid.density(), -cfg.density_threshold), cfg.kappa));
  std::vector<double> mass(count + 1, 0.0);
  for (std::size_t i = 0; i < label.size(); ++i) mass[label[i]] += occ[i];
  std::size_t best = 1;
  for (std::size_t c = 2; c <= count; ++c)
    if (mass[c] > mass[best]) best = c;
  // The largest component plus its 6-neighbour shell, so voxels growing on
  // its surface are not counted as floating.
  const std::size_t r = grid.resolution;
  std::vector<double> keep(label.size(), 0.0);
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (label[i] != best) continue;
    keep[i] = 1.0;
    const std::size_t x = i % r, y = (i / r) % r, z = i / (r * r);
    const std::size_t nbr[6][3] = {{x + 1, y, z}, {x - 1, y, z}, {x, y + 1, z},
                                   {x, y - 1, z}, {x, y, z + 1}, {x, y, z - 1}};
    for (const auto& n : nbr) {
      if (n[0] >= r || n[1] >= r || n[2] >= r) continue;
      const std::size_t u = grid.index(n[0], n[1], n[2]);
      if (label[u] == 0) keep[u] = 1.0;
    }
  }
  return div(dot(occ, Tensor(occ.shape(), std::move(keep))), sum(occ));
}

// 1 - var(area) / (mean(area)^2 * (N - 1)), in [0, 1].
inline Tensor view_consistency(const ViewSet& views) {
  const std::size_t n = views.size();
  std::vector<Tensor> areas;
  for (const Tensor& a : views.alphas) areas.push_back(mean(a));
  Tensor m = areas[0];
  for (std::size_t v = 1; v < n; ++v) m = add(m, areas[v]);
  m = scale(m, 1.0 / static_cast<double>(n));
  Tensor var = square(sub(areas[0], m));
  for (std::size_t v = 1; v < n; ++v) var = add(var, square(sub(areas[v], m)));
  var = scale(var, 1.0 / static_cast<double>(n));
  Tensor denom = scale(add_scalar(square(m), 1e-12), static_cast<double>(n - 1));
  return sub(Tensor::scalar(1.0), div(var, denom));
}

inline Tensor geometry_score(const ViewSet& views, const DensityGrid& grid, const CriticConfig& cfg = {}) {
  if (views.size() < 2) {
    throw std::invalid_argument("geometry score needs at least 2 views, got " +
                                std::to_string(views.size()));
  }
  return mul(view_consistency(views), connectedness(grid, cfg));
}

struct CriticVerdict {
  Tensor z_yes;
  Tensor z_no;
  Tensor reward;  // z_yes - z_no
  Tensor p_yes;
  Tensor p_no;
  bool differentiable = true;

  double reward_value() const { return reward.item(); }
  double p_yes_value() const { return p_yes.item(); }
  double p_no_value() const { return p_no.item(); }
  std::pair<double, double> log_probabilities() const { return log_softmax2(z_yes.item(), z_no.item()); }
};

inline CriticVerdict make_verdict(const Tensor& z_yes, const Tensor& z_no, bool differentiable) {
  BinaryProbabilities p = softmax2(z_yes, z_no);
  return {z_yes, z_no, sub(z_yes, z_no), p.p_yes, p.p_no, differentiable};
}

// z_yes = a*content + b*geometry, z_no = c*(1 - (a*content + b*geometry)/(a + b)).
// Without the geometry criterion the content weight becomes a + b.
inline CriticVerdict toy_critic_eval(const CriticQuery& query, const ViewSet& views,
                                     const DensityGrid& grid, const CriticConfig& cfg = {}) {
  const SilhouetteTemplate tmpl = make_template(query.template_id, views.cameras);
  Tensor content = content_score(views, tmpl);
  const double ab = cfg.content_scale + cfg.geometry_scale;
  Tensor z_yes;
  if (query.include_geometry) {
    z_yes = add(scale(content, cfg.content_scale),
                scale(geometry_score(views, grid, cfg), cfg.geometry_scale));
  } else {
    z_yes = scale(content, ab);
  }
  Tensor z_no = scale(sub(Tensor::scalar(1.0), scale(z_yes, 1.0 / ab)), cfg.no_scale);
  return make_verdict(z_yes, z_no, true);
}

enum class Decision { yes, no };

inline Decision hard_decision(const CriticVerdict& v) {
  return v.reward_value() > 0.0 ? Decision::yes : Decision::no;
}

inline const char* to_string(Decision d) { return d == Decision::yes ? "Yes" : "No"; }

}  // namespace cg3d
