#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "cg3d/critic.hpp"
#include "support.hpp"

using namespace cg3d;
using namespace cg3d::testing;

namespace {

std::vector<Camera> ring4() { return make_view_ring(4, default_elevation()); }

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string last_line(const std::string& s) { return s.substr(s.find_last_of('\n') + 1); }

DensityGrid with_albedo(DensityGrid g, double raw) {
  g.raw_albedo = Tensor::full(g.raw_albedo.shape(), raw);
  return g;
}

}  // namespace

TEST_CASE("query text follows the flags", "[critic]") {
  const CriticQuery dual = build_query("a sphere", "sphere", true);
  const CriticQuery content_only = build_query("a sphere", "sphere", false);
  CHECK(dual.serialize().find("Geometric Quality") != std::string::npos);
  CHECK(content_only.serialize().find("Geometric Quality") == std::string::npos);
  CHECK(content_only.serialize().find("Content Match") != std::string::npos);
  CHECK(last_line(dual.serialize()) == "Strictly respond with only 'Yes' or 'No'.");
  CHECK(last_line(content_only.serialize()) == "Strictly respond with only 'Yes' or 'No'.");
  CHECK_THROWS_AS(build_query("a teapot", "teapot", true), std::invalid_argument);
}

TEST_CASE("content score", "[critic]") {
  const auto cams = ring4();
  for (const char* name : {"sphere", "cube", "two_spheres"}) {
    INFO(name);
    const SilhouetteTemplate t = make_template(name, cams);
    CHECK(content_score(render_views(canonical_shape(find_concept(name), 32), cams), t).item() > 0.9);
    CHECK(content_score(render_views(DensityGrid::empty(32), cams), t).item() < 0.05);
  }
  const SilhouetteTemplate t = make_template("sphere", cams);
  const DensityGrid s = sphere_grid(32);
  CHECK(content_score(render_views(with_albedo(s, -3.0), cams), t).item() ==
        content_score(render_views(with_albedo(s, 2.5), cams), t).item());
  CHECK_THROWS(content_score(render_views(s, std::span(cams).first(2)), t));
}

TEST_CASE("geometry score", "[critic]") {
  const auto cams = ring4();
  const DensityGrid sphere = sphere_grid(32);
  CHECK(geometry_score(render_views(sphere, cams), sphere).item() > 0.9);

  const DensityGrid blobs = canonical_shape(find_concept("two_spheres"), 32);
  const double conn = connectedness(blobs).item();
  CHECK(conn <= 0.7);
  CHECK(geometry_score(render_views(blobs, cams), blobs).item() <= 0.7);

  const DensityGrid cube = canonical_shape(find_concept("cube"), 16);
  const auto small = make_view_ring(4, default_elevation(), 32, 32);
  const DensityGrid turned = rotate_quarter(cube);
  CHECK(std::abs(geometry_score(render_views(cube, small), cube).item() -
                 geometry_score(render_views(turned, small), turned).item()) < 1e-6);
  CHECK_THROWS(geometry_score(render_views(cube, std::span(small).first(1)), cube));
}

TEST_CASE("connectedness conventions", "[critic]") {
  CHECK(connectedness(DensityGrid::empty(8)).item() == 1.0);
  CHECK(connectedness(sphere_grid(16)).item() > 0.99);
  std::size_t count = 0;
  label_components(canonical_shape(find_concept("two_spheres"), 32), 0.5, &count);
  CHECK(count == 2);
}

TEST_CASE("toy critic logits", "[critic]") {
  const auto cams = ring4();
  const CriticQuery dual = build_query("a sphere", "sphere", true);
  const CriticQuery content_only = build_query("a sphere", "sphere", false);
  for (const DensityGrid& g : {sphere_grid(32), split_sphere_grid(32), DensityGrid::empty(32)}) {
    const ViewSet v = render_views(g, cams);
    const double c = content_score(v, make_template("sphere", cams)).item();
    const double geo = geometry_score(v, g).item();
    const CriticVerdict d = toy_critic_eval(dual, v, g);
    CHECK(d.z_yes.item() == Catch::Approx(4.0 * c + 4.0 * geo).epsilon(1e-14));
    CHECK(d.z_no.item() == Catch::Approx(8.0 * (1.0 - (4.0 * c + 4.0 * geo) / 8.0)).margin(1e-13));
    const CriticVerdict o = toy_critic_eval(content_only, v, g);
    CHECK(o.z_yes.item() == Catch::Approx(8.0 * c).epsilon(1e-14));
    CHECK(d.differentiable);
  }

  const CriticVerdict perfect = make_verdict(Tensor::scalar(8.0), Tensor::scalar(0.0), true);
  CHECK(perfect.reward_value() == 8.0);
  CHECK(perfect.p_yes_value() == Catch::Approx(logistic(8.0)).epsilon(1e-15));
  CHECK(perfect.p_yes_value() == Catch::Approx(0.99966).margin(1e-5));
  const CriticVerdict even = make_verdict(Tensor::scalar(4.0), Tensor::scalar(4.0), true);
  CHECK(even.reward_value() == 0.0);
  CHECK(even.p_yes_value() == 0.5);
}

TEST_CASE("reward identities", "[critic]") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-30.0, 30.0);
  for (int i = 0; i < 1000; ++i) {
    const double zy = u(rng), zn = u(rng), k = 10.0 * u(rng);
    const CriticVerdict v = make_verdict(Tensor::scalar(zy), Tensor::scalar(zn), true);
    CHECK(std::abs(v.reward_value() - (zy - zn)) <= 1e-12);
    CHECK(std::abs(v.reward_value() - (std::log(v.p_yes_value()) - std::log(v.p_no_value()))) <= 1e-12);
    const auto [lp_yes, lp_no] = v.log_probabilities();
    CHECK(std::abs(v.reward_value() - (lp_yes - lp_no)) <= 1e-12);
    const CriticVerdict s = make_verdict(Tensor::scalar(zy + k), Tensor::scalar(zn + k), true);
    CHECK(std::abs(s.reward_value() - v.reward_value()) <= 1e-12);
    CHECK(std::abs(s.p_yes_value() - v.p_yes_value()) <= 1e-12);
  }
  const CriticVerdict big = make_verdict(Tensor::scalar(1000.0), Tensor::scalar(-1000.0), true);
  CHECK(big.reward_value() == 2000.0);
  CHECK(big.log_probabilities().first - big.log_probabilities().second == 2000.0);
  CHECK(std::isfinite(big.p_yes_value()));
  CHECK(std::isfinite(big.p_no_value()));
  CHECK(std::isfinite(make_verdict(Tensor::scalar(-1000.0), Tensor::scalar(1000.0), true).p_yes_value()));
}

TEST_CASE("hard decision", "[critic]") {
  auto decide = [](double r) { return hard_decision(make_verdict(Tensor::scalar(r), Tensor::scalar(0.0), true)); };
  CHECK(decide(2.0) == Decision::yes);
  CHECK(decide(-0.001) == Decision::no);
  CHECK(decide(0.0) == Decision::no);
  CHECK(std::string(to_string(Decision::yes)) == "Yes");
}

TEST_CASE("split blobs lose reward only under the dual critic", "[critic][ablation]") {
  const auto cams = ring4();
  const SplitProbe p = equal_content_split_probe(cams);
  const ViewSet vc = render_views(p.coherent, cams), vs = render_views(p.split, cams);
  const CriticQuery dual = build_query("a sphere", "sphere", true);
  const CriticQuery content_only = build_query("a sphere", "sphere", false);
  CHECK(std::abs(toy_critic_eval(content_only, vc, p.coherent).reward_value() -
                 toy_critic_eval(content_only, vs, p.split).reward_value()) <= 1e-6);
  CHECK(toy_critic_eval(dual, vs, p.split).reward_value() < toy_critic_eval(dual, vc, p.coherent).reward_value());
  CHECK(toy_critic_eval(dual, vs, p.split).reward_value() < toy_critic_eval(content_only, vs, p.split).reward_value());
}

TEST_CASE("janus grid matches from the front but not from the ring", "[critic][ablation]") {
  const auto cams = ring4();
  const std::vector<Camera> front{cams[0]};
  const DensityGrid janus = canonical_shape(find_concept("janus_shell"), 32);
  const DensityGrid coherent = sphere_grid(32);
  const SilhouetteTemplate t1 = make_template("sphere", front);
  CHECK(std::abs(content_score(render_views(janus, front), t1).item() -
                 content_score(render_views(coherent, front), t1).item()) <= 0.05);
  CHECK(geometry_score(render_views(janus, cams), janus).item() <=
        geometry_score(render_views(coherent, cams), coherent).item() - 0.1);
}

TEST_CASE("templates come from the zero-jitter generator", "[critic]") {
  const auto cams = make_view_ring(2, default_elevation(), 32, 32);
  const SilhouetteTemplate t = make_template("cube", cams);
  const ViewSet v = render_views(canonical_shape(find_concept("cube"), kTemplateResolution), cams);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < v.alphas[k].size(); ++i) CHECK(t.masks[k][i] == (v.alphas[k][i] > 0.5 ? 1.0 : 0.0));
}

TEST_CASE("reward gradient through render matches central differences", "[critic][gradcheck]") {
  CHECK(chain_gradient_error(31, 60) < 1e-4);
}
