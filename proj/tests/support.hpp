// Shared oracles and probes for the unit and acceptance tests.

#pragma once

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <map>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "cg3d/critic.hpp"
#include "cg3d/dataset.hpp"
#include "cg3d/diffusion.hpp"
#include "cg3d/evaluation.hpp"
#include "cg3d/guidance.hpp"
#include "cg3d/render.hpp"
#include "cg3d/shapes.hpp"
#include "cg3d/tensor.hpp"

namespace cg3d::testing {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(num_elements(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

struct GradPair {
  std::vector<double> analytic;
  std::vector<double> numeric;
};

struct Coord {
  std::size_t leaf;
  std::size_t index;
};

// Tape gradients next to central differences at the requested coordinates.
inline GradPair gradients_vs_central_differences(const Fn& f, const std::vector<Tensor>& point,
                                                 const std::vector<Coord>& coords, double h) {
  Tape tape;
  std::vector<Tensor> leaves;
  for (const Tensor& p : point) leaves.push_back(tape.leaf(p));
  const Tensor root = f(leaves);
  const Gradients g = tape.backward(root);
  GradPair out;
  for (const Coord& c : coords) {
    out.analytic.push_back(g.of(leaves[c.leaf])[c.index]);
    std::vector<Tensor> probe = point;
    std::vector<double> v = point[c.leaf].values();
    v[c.index] = point[c.leaf][c.index] + h;
    probe[c.leaf] = Tensor(point[c.leaf].shape(), v);
    const double fp = f(probe).item();
    v[c.index] = point[c.leaf][c.index] - h;
    probe[c.leaf] = Tensor(point[c.leaf].shape(), v);
    const double fm = f(probe).item();
    out.numeric.push_back((fp - fm) / (2.0 * h));
  }
  return out;
}

inline std::vector<Coord> all_coords(const std::vector<Tensor>& point) {
  std::vector<Coord> c;
  for (std::size_t l = 0; l < point.size(); ++l)
    for (std::size_t i = 0; i < point[l].size(); ++i) c.push_back({l, i});
  return c;
}

// Worst per-coordinate |a - n| / max(|a|, |n|), with exact agreement counting as 0.
inline double max_relative_error(const GradPair& p) {
  double worst = 0.0;
  for (std::size_t i = 0; i < p.analytic.size(); ++i) {
    const double a = p.analytic[i], n = p.numeric[i];
    const double d = std::abs(a - n);
    if (d == 0.0) continue;
    worst = std::max(worst, d / std::max(std::abs(a), std::abs(n)));
  }
  return worst;
}

// |a - n|_2 / |n|_2 over the checked coordinates.
inline double norm_relative_error(const GradPair& p) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < p.analytic.size(); ++i) {
    num += (p.analytic[i] - p.numeric[i]) * (p.analytic[i] - p.numeric[i]);
    den += p.numeric[i] * p.numeric[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

// sum(w * op(x)) with fixed random weights, so every output element matters.
inline Fn weighted(Fn op, std::mt19937_64& rng) {
  auto w = std::make_shared<std::optional<Tensor>>();
  auto local = std::make_shared<std::mt19937_64>(rng());
  return [op, w, local](const std::vector<Tensor>& in) {
    Tensor out = op(in);
    if (!*w) *w = random_tensor(out.shape(), *local, -1.0, 1.0);
    return dot(**w, out);
  };
}

inline std::vector<Tensor> one(Shape s, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  return {random_tensor(std::move(s), rng, lo, hi)};
}

// Values with a minimum magnitude so relu and max stay away from their kinks.
inline std::vector<Tensor> away_from_zero(Shape s, std::mt19937_64& rng) {
  Tensor t = random_tensor(std::move(s), rng, 0.1, 2.0);
  std::vector<double> v = t.values();
  std::bernoulli_distribution flip(0.5);
  for (double& x : v)
    if (flip(rng)) x = -x;
  return {Tensor(t.shape(), v)};
}

struct OpCase {
  const char* name;
  Fn op;
  std::function<std::vector<Tensor>(std::mt19937_64&)> point;
  // Judge by the norm of the error vector instead of the worst coordinate.
  // Used for the renderer, whose many tiny gradients sit at the finite
  // difference noise floor.
  bool by_norm = false;
};

// Every differentiable tensor op with a sampler for valid inputs.
inline std::vector<OpCase> op_cases() {
  using V = std::vector<Tensor>;
  using R = std::mt19937_64;
  return {
      {"exp", [](const V& in) { return exp(in[0]); }, [](R& r) { return one({7}, r); }},
      {"log", [](const V& in) { return log(in[0]); }, [](R& r) { return one({7}, r, 0.2, 3.0); }},
      {"softplus", [](const V& in) { return softplus(in[0]); }, [](R& r) { return one({7}, r, -6.0, 6.0); }},
      {"sigmoid", [](const V& in) { return sigmoid(in[0]); }, [](R& r) { return one({7}, r, -6.0, 6.0); }},
      {"relu", [](const V& in) { return relu(in[0]); }, [](R& r) { return away_from_zero({7}, r); }},
      {"neg", [](const V& in) { return neg(in[0]); }, [](R& r) { return one({7}, r); }},
      {"add", [](const V& in) { return add(in[0], in[1]); },
       [](R& r) { return V{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; }},
      {"sub", [](const V& in) { return sub(in[0], in[1]); },
       [](R& r) { return V{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; }},
      {"mul", [](const V& in) { return mul(in[0], in[1]); },
       [](R& r) { return V{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; }},
      {"div", [](const V& in) { return div(in[0], in[1]); },
       [](R& r) { return V{random_tensor({2, 3}, r), away_from_zero({2, 3}, r)[0]}; }},
      {"mul by scalar", [](const V& in) { return mul(in[0], in[1]); },
       [](R& r) { return V{random_tensor({4}, r), random_tensor({}, r)}; }},
      {"div by scalar", [](const V& in) { return div(in[0], in[1]); },
       [](R& r) { return V{random_tensor({4}, r), away_from_zero({}, r)[0]}; }},
      {"scale", [](const V& in) { return scale(in[0], -1.7); }, [](R& r) { return one({5}, r); }},
      {"add_scalar", [](const V& in) { return add_scalar(in[0], 0.3); }, [](R& r) { return one({5}, r); }},
      {"square", [](const V& in) { return square(in[0]); }, [](R& r) { return one({5}, r); }},
      {"matmul", [](const V& in) { return matmul(in[0], in[1]); },
       [](R& r) { return V{random_tensor({3, 4}, r), random_tensor({4, 2}, r)}; }},
      {"add_bias", [](const V& in) { return add_bias(in[0], in[1]); },
       [](R& r) { return V{random_tensor({3, 4}, r), random_tensor({4}, r)}; }},
      {"sum", [](const V& in) { return sum(in[0]); }, [](R& r) { return one({2, 3}, r); }},
      {"mean", [](const V& in) { return mean(in[0]); }, [](R& r) { return one({2, 3}, r); }},
      {"max", [](const V& in) { return max(in[0]); }, [](R& r) { return one({6}, r); }},
      {"sum axis 0", [](const V& in) { return reduce(in[0], Reduce::sum, 0); }, [](R& r) { return one({3, 4}, r); }},
      {"mean axis 1", [](const V& in) { return reduce(in[0], Reduce::mean, 1); }, [](R& r) { return one({3, 4}, r); }},
      {"max axis 1", [](const V& in) { return reduce(in[0], Reduce::max, 1); }, [](R& r) { return one({3, 4}, r); }},
      {"dot", [](const V& in) { return dot(in[0], in[1]); },
       [](R& r) { return V{random_tensor({6}, r), random_tensor({6}, r)}; }},
      {"reshape", [](const V& in) { return reshape(in[0], {3, 2}); }, [](R& r) { return one({2, 3}, r); }},
      {"take_channels", [](const V& in) { return take_channels(in[0], 1, 2); }, [](R& r) { return one({2, 2, 4}, r); }},
      {"avg_pool2d", [](const V& in) { return avg_pool2d(in[0], 2); }, [](R& r) { return one({4, 4, 3}, r); }},
      {"softmax2 p_yes", [](const V& in) { return softmax2(in[0], in[1]).p_yes; },
       [](R& r) { return V{random_tensor({}, r, -5.0, 5.0), random_tensor({}, r, -5.0, 5.0)}; }},
      {"softmax2 p_no", [](const V& in) { return softmax2(in[0], in[1]).p_no; },
       [](R& r) { return V{random_tensor({}, r, -5.0, 5.0), random_tensor({}, r, -5.0, 5.0)}; }},
      {"render", [](const V& in) { return detail::render_rgba(4, in[0], in[1], make_view_ring(4, 0.3, 8, 8, 8)[1]); },
       [](R& r) { return V{random_tensor({4, 4, 4}, r, 0.1, 3.0), random_tensor({4, 4, 4, 3}, r, 0.05, 0.95)}; },
       true},
  };
}

// Worst relative error over 100 random instances at h = 1e-5.
inline double op_gradient_error(const OpCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int instance = 0; instance < 100; ++instance) {
    const std::vector<Tensor> point = c.point(rng);
    const Fn f = weighted(c.op, rng);
    const GradPair p = gradients_vs_central_differences(f, point, all_coords(point), 1e-5);
    worst = std::max(worst, c.by_norm ? norm_relative_error(p) : max_relative_error(p));
  }
  return worst;
}

inline DensityGrid random_grid(std::size_t r, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {r, random_tensor({r, r, r}, rng, -4.0, 2.0), random_tensor({r, r, r, 3}, rng, -2.0, 2.0)};
}

// Contents turned +90 degrees about the vertical axis: (x, z) -> (z, -x).
inline DensityGrid rotate_quarter(const DensityGrid& g) {
  const std::size_t r = g.resolution;
  std::vector<double> d(g.voxel_count()), a(g.voxel_count() * 3);
  for (std::size_t z = 0; z < r; ++z)
    for (std::size_t y = 0; y < r; ++y)
      for (std::size_t x = 0; x < r; ++x) {
        const std::size_t src = g.index(x, y, z), dst = g.index(z, y, r - 1 - x);
        d[dst] = g.raw_density[src];
        for (int c = 0; c < 3; ++c) a[dst * 3 + c] = g.raw_albedo[src * 3 + c];
      }
  return {r, Tensor({r, r, r}, d), Tensor({r, r, r, 3}, a)};
}

// Relative error of the reward gradient through render and critic on a random
// 16^3 grid, over `coords_per_leaf` random density and albedo coordinates.
inline double chain_gradient_error(std::uint64_t seed, std::size_t coords_per_leaf = 150, double h = 1e-4) {
  const std::size_t r = 16;
  const DensityGrid g = random_grid(r, seed);
  const std::vector<Camera> cams = make_view_ring(4, default_elevation(), 32, 32);
  const CriticQuery query = build_query("a sphere", "sphere", true);
  const Fn f = [&](const std::vector<Tensor>& in) {
    const DensityGrid live{r, in[0], in[1]};
    return toy_critic_eval(query, render_views(live, cams), live).reward;
  };
  std::mt19937_64 rng(seed + 1);
  std::uniform_int_distribution<std::size_t> voxel(0, g.voxel_count() - 1), channel(0, 2);
  std::vector<Coord> coords;
  for (std::size_t k = 0; k < coords_per_leaf; ++k) coords.push_back({0, voxel(rng)});
  for (std::size_t k = 0; k < coords_per_leaf; ++k) coords.push_back({1, voxel(rng) * 3 + channel(rng)});
  return norm_relative_error(gradients_vs_central_differences(f, {g.raw_density, g.raw_albedo}, coords, h));
}

inline const ConceptSpec& sphere_spec() { return find_concept("sphere"); }

inline DensityGrid sphere_grid(std::size_t r, double scale = 1.0) {
  const ConceptSpec& s = sphere_spec();
  return grid_from_occupancy(r, shape_occupancy(s, r, {0.0, 0.0, 0.0}, scale), s.albedo);
}

inline DensityGrid split_sphere_grid(std::size_t r, double gap = 0.3) {
  const ConceptSpec& s = sphere_spec();
  const std::vector<double> occ = shape_occupancy(s, r, {0.0, 0.0, 0.0}, 1.0);
  return grid_from_occupancy(r, split_occupancy(occ, r, 0.0, gap), s.albedo);
}

struct SplitProbe {
  DensityGrid coherent;
  DensityGrid split;
};

// A split sphere and a single sphere whose radius is bisected until both have
// the same content score against the sphere template.
inline SplitProbe equal_content_split_probe(std::span<const Camera> cams, std::size_t r = 32) {
  const SilhouetteTemplate tmpl = make_template("sphere", cams);
  auto content = [&](const DensityGrid& g) { return content_score(render_views(g, cams), tmpl).item(); };
  SplitProbe p{sphere_grid(r), split_sphere_grid(r)};
  const double target = content(p.split);
  double lo = 0.3, hi = 1.0;
  for (int i = 0; i < 60 && hi - lo > 1e-13; ++i) {
    const double mid = 0.5 * (lo + hi);
    (content(sphere_grid(r, mid)) < target ? lo : hi) = mid;
  }
  p.coherent = sphere_grid(r, 0.5 * (lo + hi));
  return p;
}

// Ledger of `games` comparisons per ordered position, drawn from the Elo
// expectation of the given true ratings.
inline ComparisonLedger synthetic_ledger(const std::vector<std::pair<std::string, double>>& truth, std::size_t games,
                                         std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& [id, _] : truth) ids.push_back(id);
  ComparisonLedger ledger(ids);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (std::size_t j = i + 1; j < truth.size(); ++j) {
      const double p_i = 1.0 / (1.0 + std::pow(10.0, (truth[j].second - truth[i].second) / 400.0));
      for (std::size_t g = 0; g < games; ++g) {
        const bool swap = g % 2 == 1;
        const bool i_wins = u(rng) < p_i;
        Comparison c{swap ? ids[j] : ids[i], swap ? ids[i] : ids[j], "p" + std::to_string(g), Outcome::tie};
        c.outcome = (i_wins != swap) ? Outcome::a : Outcome::b;
        ledger.add(c);
      }
    }
  return ledger;
}

inline double raw_for_density(double sigma) { return std::log(std::expm1(sigma)); }

inline Camera front_camera(std::size_t size = 32, std::size_t samples = 64) {
  Camera c;
  c.height = c.width = size;
  c.samples_per_ray = samples;
  return c;
}

// SDS with no critic anywhere in the loop; returns the final raw parameters.
inline std::vector<double> pure_sds(DensityGrid grid, const NoisePredictor& prior, ConditionLabel label,
                                    const GuidanceConfig& cfg, const DiffusionSchedule& sched, std::uint64_t seed) {
  Rng rng = named_stream(seed, "sds");
  const std::vector<Camera> ring = make_view_ring(4, cfg.elevation);
  std::uniform_int_distribution<std::size_t> pick(0, ring.size() - 1);
  std::vector<double> params = flatten(grid);
  Adam adam;
  adam.lr = cfg.learning_rate;
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const Camera& cam = ring[pick(rng)];
    const std::size_t t = sds_timestep(step, cfg.total_steps, sched.steps, rng);
    const std::vector<double> eps = standard_normal(rng, (cam.height / kPriorPool) * (cam.width / kPriorPool) * 3);
    adam.step(params, flatten(sds_gradient(prior, grid, cam, label, t, eps, sched)));
    grid = unflatten(grid.resolution, params);
  }
  return params;
}

inline bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Runs the CLI with `args`, appending its output to `log`. Returns the exit code.
inline int run_cli(const std::string& cli, const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = cli + " " + args + " >>" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

inline std::map<std::string, std::string> tree_bytes(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

inline const char* kSmallRunConfig = R"([corpus]
samples_per_concept = 2
resolution = 16
views = 1
samples_per_ray = 16
split_fraction = 0.5

[schedule]
train_steps = 100
sample_steps = 4

[train]
steps = 10
batch_size = 4
hidden = 16

[guidance]
total_steps = 6

[generate]
resolution = 8

[ablate]
modes = full,single_view
seeds = 1
)";

// Every CLI command once on a small config, outputs under `out`. Returns the
// first failing command, or an empty string.
inline std::string cli_pipeline(const std::string& cli, const std::filesystem::path& config,
                                const std::filesystem::path& out, const std::filesystem::path& log) {
  const std::string base = "-c " + config.string() + " --run.out_dir=" + out.string();
  const std::string prior3d = " --generate.prior=" + (out / "prior3d.cg3d").string();
  const std::vector<std::string> steps = {
      "gen-corpus " + base + " -j 2",
      "train --target prior2d " + base + " --train.checkpoint=prior2d.cg3d",
      "train --target prior3d " + base + " --train.checkpoint=prior3d.cg3d",
      "generate --mode sds " + base + " --generate.prior=prior2d.cg3d --generate.name=sds",
      "generate --mode guided " + base + "/guided" + prior3d + " --generate.name=sphere",
      "generate --mode unguided " + base + "/unguided" + prior3d + " --generate.name=sphere",
      "generate --mode guided " + base + prior3d + " --guidance.lambda_ttg=0 --generate.name=g0",
      "generate --mode unguided " + base + prior3d + " --generate.name=ug",
      "eval " + base + "/eval --eval.methods=guided=" + (out / "guided").string() + ",unguided=" +
          (out / "unguided").string() + " --eval.anchor=unguided",
      "ablate " + base + "/ablate" + prior3d,
  };
  for (const std::string& s : steps)
    if (run_cli(cli, s, log) != 0) return s;
  return {};
}

// The 3-concept 2D training set: 30 jittered shapes per concept, 4 ring views
// each, pooled to 8x8x3.
inline std::vector<Sample> toy_2d_dataset() {
  const std::vector<Camera> cams = make_view_ring(4, default_elevation());
  Rng rng(1);
  std::vector<Sample> data;
  for (std::size_t c = 0; c < kTrainingVocabulary; ++c)
    for (int i = 0; i < 30; ++i) {
      const ViewSet vs = render_views(generate_shape(concept_by_label(c), 32, rng), cams);
      for (const Tensor& im : vs.images) data.push_back({to_prior_sample(im), c});
    }
  return data;
}

inline TrainResult train_toy_2d_prior(std::size_t steps = 2000) {
  const std::vector<Sample> data = toy_2d_dataset();
  Rng init(2);
  TrainConfig tc;
  tc.steps = steps;
  return train_prior(Denoiser::init({}, init), data, DiffusionSchedule::geometric(1000), tc);
}

// Best soft-IoU of a pooled 8x8x3 sample against every concept's pooled ring
// silhouettes. Opacity is read back from the color assuming a white background
// and the concept's albedo: x = 1 - alpha (1 - albedo).
inline double nearest_template_iou(std::span<const double> x) {
  const std::vector<Camera> cams = make_view_ring(4, default_elevation());
  double best = 0.0;
  for (std::size_t c = 0; c < kTrainingVocabulary; ++c) {
    const ConceptSpec& spec = concept_by_label(c);
    for (const Tensor& m : make_template(spec.name, cams).masks) {
      const Tensor pooled = avg_pool2d(Tensor({64, 64, 1}, m.values()), 8);
      double inter = 0.0, sa = 0.0, sb = 0.0;
      for (std::size_t p = 0; p < 64; ++p) {
        double a = 0.0;
        for (int k = 0; k < 3; ++k) a += (1.0 - x[p * 3 + k]) / (1.0 - spec.albedo[k]) / 3.0;
        a = std::clamp(a, 0.0, 1.0);
        inter += a * pooled[p];
        sa += a;
        sb += pooled[p];
      }
      best = std::max(best, inter / (sa + sb - inter + 1e-9));
    }
  }
  return best;
}

}  // namespace cg3d::testing
