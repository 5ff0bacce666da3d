// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "cg3d/commands.hpp"

namespace {

int fail(int code, const std::string& what) {
  std::cerr << "cg3d: " << what << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Critic-guided 3D generation at desk scale"};
  app.require_subcommand(1);
  std::string config_path;
  std::size_t jobs = 1;
  bool print_config = false;
  // Shared options are accepted before or after the subcommand.
  auto common = [&](CLI::App* a) {
    a->add_option("-c,--config", config_path, "run configuration file");
    a->add_option("-j,--jobs", jobs, "worker cap")->check(CLI::PositiveNumber);
    a->add_flag("--print-config", print_config, "print the effective configuration and exit");
    a->allow_extras();
  };
  common(&app);

  auto* gen = app.add_subcommand("gen-corpus", "build a procedural corpus");
  auto* train = app.add_subcommand("train", "train a diffusion prior");
  std::string target = "prior2d";
  train->add_option("--target", target, "prior2d or prior3d");
  auto* generate = app.add_subcommand("generate", "produce an asset");
  std::string mode = "sds";
  generate->add_option("--mode", mode, "sds, guided or unguided");
  auto* eval = app.add_subcommand("eval", "judge assets and fit Elo ratings");
  auto* ablate = app.add_subcommand("ablate", "critic ablation report");
  for (auto* sub : {gen, train, generate, eval, ablate}) common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : cg3d::kExitConfig;
  }

  try {
    cg3d::CommandContext ctx;
    if (!config_path.empty()) ctx.config = cg3d::RunConfig::parse(cg3d::read_file(config_path));
    const std::vector<std::string> extras = app.remaining(true);
    for (const std::string& o : extras) ctx.config.apply_override(o);
    if (print_config) {
      std::cout << ctx.config.serialize();
      return cg3d::kExitOk;
    }
    ctx.out = cg3d::output_root(ctx.config);
    ctx.jobs = jobs;
    ctx.log = &std::cout;
    if (*gen) cg3d::cmd_gen_corpus(ctx);
    if (*train) cg3d::cmd_train(ctx, cg3d::parse_train_target(target));
    if (*generate) cg3d::cmd_generate(ctx, cg3d::parse_generate_mode(mode));
    if (*eval) cg3d::cmd_eval(ctx);
    if (*ablate) cg3d::cmd_ablate(ctx);
  } catch (const cg3d::NumericError& e) {
    return fail(cg3d::kExitNumeric, e.what());
  } catch (const cg3d::IoError& e) {
    return fail(cg3d::kExitIo, e.what());
  } catch (const cg3d::FormatError& e) {
    return fail(cg3d::kExitIo, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(cg3d::kExitIo, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(cg3d::kExitConfig, e.what());
  } catch (const std::out_of_range& e) {
    return fail(cg3d::kExitConfig, e.what());
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }
  return cg3d::kExitOk;
}
