// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// The cg3d command set (gen-corpus, train, generate, eval, ablate), callable
// in-process. Every command is a pure function of the config text and seed.

#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "cg3d/checkpoint.hpp"
#include "cg3d/config.hpp"
#include "cg3d/critic.hpp"
#include "cg3d/dataset.hpp"
#include "cg3d/diffusion.hpp"
#include "cg3d/evaluation.hpp"
#include "cg3d/guidance.hpp"
#include "cg3d/render.hpp"

namespace cg3d {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitNumeric = 3, kExitIo = 4 };

struct CommandContext {
  RunConfig config;
  std::filesystem::path out;  // output root
  std::size_t jobs = 1;
  std::ostream* log = nullptr;
};

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void say(const CommandContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << "\n";
}

inline std::filesystem::path output_root(const RunConfig& cfg) {
  if (const char* env = std::getenv("CG3D_OUT"); env && *env) return env;
  return cfg.text("run", "out_dir");
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (!std::filesystem::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

inline void cmd_gen_corpus(const CommandContext& ctx) {
  const CorpusManifest m = ctx.config.manifest();
  ensure_dir(ctx.out);
  const auto dir = ctx.out / ctx.config.text("corpus", "dir");
  const auto entries = build_corpus(m, dir, ctx.jobs);
  say(ctx, "wrote " + std::to_string(entries.size()) + " samples to " + dir.string());
}

enum class TrainTarget { prior2d, prior3d };

inline TrainTarget parse_train_target(const std::string& s) {
  if (s == "prior2d") return TrainTarget::prior2d;
  if (s == "prior3d") return TrainTarget::prior3d;
  throw ConfigError("--target must be prior2d or prior3d, got '" + s + "'");
}

inline std::vector<Sample> training_samples(const Corpus& corpus, TrainTarget target) {
  const std::vector<std::size_t> idx = all_indices(corpus);
  if (target == TrainTarget::prior2d) return prior2d_samples(load_batch(corpus, idx, BatchTarget::views2d));
  return prior3d_samples(load_batch(corpus, idx, BatchTarget::grids3d));
}

inline void cmd_train(const CommandContext& ctx, TrainTarget target) {
  const RunConfig& c = ctx.config;
  TrainConfig tc = c.train();
  const DiffusionSchedule sched = c.schedule(false);
  const Corpus corpus = load_corpus(ctx.out / c.text("corpus", "dir"));
  const std::vector<Sample> data = training_samples(corpus, target);
  DenoiserConfig dc;
  dc.sample_dim = data.at(0).x.size();
  dc.hidden = c.integer("train", "hidden");
  if (dc.hidden == 0) dc.hidden = target == TrainTarget::prior2d ? 256 : 512;
  if (tc.learning_rate == 0.0) tc.learning_rate = default_learning_rate(dc.sample_dim);
  Rng init_rng = named_stream(tc.seed, "init");
  const Denoiser model = Denoiser::init(dc, init_rng);
  const TrainResult res = train_prior(model, data, sched, tc);
  const auto ckpt = ctx.out / c.text("train", "checkpoint");
  save_checkpoint(ckpt, res.model.records());
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < res.losses.size(); ++i) csv += std::to_string(i) + "," + fmt(res.losses[i]) + "\n";
  auto loss_path = ckpt;
  loss_path.replace_extension(".loss.csv");
  write_file(loss_path, csv);
  say(ctx, "trained " + std::to_string(tc.steps) + " steps on " + std::to_string(data.size()) + " samples -> " +
               ckpt.string());
}

inline Denoiser load_prior(const CommandContext& ctx) {
  return Denoiser::from_records(load_checkpoint(ctx.out / ctx.config.text("generate", "prior")));
}

inline std::size_t latent_resolution(const Denoiser& prior) {
  const auto r = static_cast<std::size_t>(std::llround(std::cbrt(static_cast<double>(prior.config.sample_dim))));
  if (r * r * r != prior.config.sample_dim) throw ConfigError("prior sample size is not a cubic grid");
  return r;
}

inline std::string run_csv(const RunRecord& rec) {
  std::string csv = "step,sds_norm,reward,lambda,decision,reward_evaluated,guidance_skipped\n";
  for (const StepRecord& s : rec.steps) {
    csv += std::to_string(s.step) + "," + fmt(s.sds_norm) + "," + (std::isnan(s.reward) ? "" : fmt(s.reward)) + "," +
           fmt(s.lambda) + "," + to_string(s.decision) + "," + (s.reward_evaluated ? "1" : "0") + "," +
           (s.guidance_skipped ? "1" : "0") + "\n";
  }
  return csv;
}

inline void export_asset(const CommandContext& ctx, const std::string& name, const DensityGrid& grid) {
  save_checkpoint(ctx.out / (name + ".cg3d"), grid_records(grid));
  export_obj(grid, ctx.config.real("critic", "density_threshold"), ctx.out / (name + ".obj"));
  const ViewSet views = render_views(grid.detach(), make_view_ring(4, default_elevation()));
  export_image(contact_sheet(views), ctx.out / (name + "_views.ppm"));
}

enum class GenerateMode { sds, guided, unguided };

inline GenerateMode parse_generate_mode(const std::string& s) {
  if (s == "sds") return GenerateMode::sds;
  if (s == "guided") return GenerateMode::guided;
  if (s == "unguided") return GenerateMode::unguided;
  throw ConfigError("--mode must be sds, guided or unguided, got '" + s + "'");
}

inline void cmd_generate(const CommandContext& ctx, GenerateMode mode) {
  const RunConfig& c = ctx.config;
  const std::uint64_t seed = c.integer("run", "seed");
  const CriticQuery query = c.query();
  const CriticConfig critic = c.critic();
  GuidanceConfig gc = c.guidance();
  const ConceptSpec& spec = find_concept(c.text("generate", "label"));
  if (spec.label >= kTrainingVocabulary) throw ConfigError("generate.label must be a training concept");
  const Denoiser prior = load_prior(ctx);
  const std::string name = c.text("generate", "name");
  ensure_dir(ctx.out);
  RunRecord record;
  DensityGrid grid;
  if (mode == GenerateMode::sds) {
    Rng init_rng = named_stream(seed, "init");
    const DensityGrid init = random_init_grid(c.integer("generate", "resolution"), init_rng);
    SdsResult res = sds_optimize(init, prior.predictor(), spec.label, query, gc, c.schedule(false), seed, critic);
    grid = res.grid;
    record = std::move(res.record);
  } else {
    if (mode == GenerateMode::unguided) gc.lambda_ttg = 0.0;
    Rng rng = named_stream(seed, "sample");
    const LatentSpace space{latent_resolution(prior), spec.albedo};
    GuidedResult res = guided_sample(prior.predictor(), spec.label, query, gc, c.schedule(true), rng, space, critic);
    grid = res.grid;
    record = std::move(res.record);
  }
  record.seed = seed;
  write_file(ctx.out / (name + "_run.csv"), run_csv(record));
  export_asset(ctx, name, grid);
  say(ctx, "wrote " + (ctx.out / name).string() + ".{cg3d,obj,_views.ppm,_run.csv}");
}

// "id=dir,id=dir" -> ordered pairs.
inline std::vector<std::pair<std::string, std::filesystem::path>> parse_methods(const std::string& spec) {
  std::vector<std::pair<std::string, std::filesystem::path>> out;
  std::stringstream ss(spec);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("eval.methods entries must be id=dir: " + item);
    out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  return out;
}

inline Judge geometry_judge(const CriticConfig& cfg) {
  return [cfg](const CriticQuery&, const ViewSet& v, const DensityGrid& g) {
    const Tensor s = geometry_score(v, g, cfg);
    return make_verdict(s, sub(Tensor::scalar(1.0), s), true);
  };
}

inline void cmd_eval(const CommandContext& ctx) {
  const RunConfig& c = ctx.config;
  const CriticConfig critic = c.critic();
  const CriticQuery overall = c.query();
  CriticQuery alignment = overall;
  alignment.include_geometry = false;
  const JudgeOptions opt{1e-6, c.boolean("eval", "allow_ties")};
  ensure_dir(ctx.out);
  std::vector<std::string> names{"Alignment", "Plausibility", "Overall"};
  std::vector<ComparisonLedger> ledgers(3);
  const auto methods = parse_methods(c.text("eval", "methods"));
  const std::string& ledger_path = c.text("eval", "ledger");
  if (!ledger_path.empty()) {
    ledgers = {ComparisonLedger{}, ComparisonLedger{}, ComparisonLedger::from_csv(read_file(ledger_path))};
  } else {
    for (auto& l : ledgers)
      for (const auto& [id, _] : methods) l.register_method(id);
    // Prompts are asset stems present for every method.
    std::map<std::string, std::vector<Asset>> assets;
    std::set<std::string> common;
    bool first = true;
    const auto cams = make_view_ring(4, default_elevation());
    for (const auto& [id, dir] : methods) {
      std::set<std::string> stems;
      for (const auto& f : std::filesystem::directory_iterator(dir))
        if (f.path().extension() == ".cg3d") stems.insert(f.path().stem().string());
      if (first) common = stems;
      std::set<std::string> keep;
      for (const std::string& s : common)
        if (stems.count(s)) keep.insert(s);
      common = keep;
      first = false;
    }
    for (const auto& [id, dir] : methods)
      for (const std::string& stem : common) {
        const DensityGrid g = grid_from_records(load_checkpoint(dir / (stem + ".cg3d")));
        assets[id].push_back({render_views(g, cams), g});
      }
    const Judge toy = toy_judge(critic), geo = geometry_judge(critic);
    std::size_t p = 0;
    for (const std::string& prompt : common) {
      for (std::size_t i = 0; i < methods.size(); ++i)
        for (std::size_t j = i + 1; j < methods.size(); ++j) {
          const Asset& a = assets[methods[i].first][p];
          const Asset& b = assets[methods[j].first][p];
          const JudgeResult results[3] = {judge_pair(toy, a, b, alignment, opt), judge_pair(geo, a, b, overall, opt),
                                          judge_pair(toy, a, b, overall, opt)};
          for (int k = 0; k < 3; ++k) {
            if (results[k].outcome) {
              ledgers[k].add({methods[i].first, methods[j].first, prompt, *results[k].outcome});
            } else {
              say(ctx, "skipped " + methods[i].first + " vs " + methods[j].first + " on " + prompt + ": " +
                           results[k].skip_reason);
            }
          }
        }
      ++p;
    }
  }
  std::vector<ReportColumn> columns;
  for (std::size_t k = 0; k < 3; ++k) {
    std::string lower = names[k];
    for (char& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    write_file(ctx.out / ("ledger_" + lower + ".csv"), ledgers[k].to_csv());
    EloTable table;
    if (!ledgers[k].empty()) {
      std::string anchor = c.text("eval", "anchor");
      if (anchor.empty()) anchor = *ledgers[k].methods().begin();
      table = elo_fit(ledgers[k], anchor);
    }
    if (!ledger_path.empty() && k < 2) continue;
    columns.push_back({names[k], std::move(table)});
  }
  report_emit(columns, ctx.out);
  say(ctx, "wrote " + (ctx.out / "elo.csv").string());
}

inline void cmd_ablate(const CommandContext& ctx) {
  const RunConfig& c = ctx.config;
  std::vector<AblationMode> modes;
  std::stringstream ss(c.text("ablate", "modes"));
  for (std::string m; std::getline(ss, m, ',');) {
    try {
      modes.push_back(parse_ablation_mode(trim(m)));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("ablate.modes: ") + e.what());
    }
  }
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < c.integer("ablate", "seeds"); ++i) seeds.push_back(c.integer("run", "seed") + i);
  const ConceptSpec& spec = find_concept(c.text("generate", "label"));
  const Denoiser prior = load_prior(ctx);
  const LatentSpace space{latent_resolution(prior), spec.albedo};
  const auto predictor = prior.predictor();
  const GuidanceConfig gc = c.guidance();
  const CriticQuery query = c.query();
  const CriticConfig critic = c.critic();
  const auto sched = c.schedule(true);
  ensure_dir(ctx.out);
  std::vector<std::vector<AblationRow>> parts(modes.size() * seeds.size());
  parallel_for(parts.size(), ctx.jobs, [&](std::size_t k) {
    const AblationMode mode[1] = {modes[k / seeds.size()]};
    const std::uint64_t seed[1] = {seeds[k % seeds.size()]};
    parts[k] = ablation_run(mode, seed, predictor, spec.label, query, gc, sched, space, critic);
  });
  std::string csv = "mode,seed,content,geometry,connectedness\n";
  const auto ring = make_view_ring(4, default_elevation());
  for (const auto& part : parts)
    for (const AblationRow& r : part) {
      csv += std::string(to_string(r.mode)) + "," + std::to_string(r.seed) + "," + fmt(r.content) + "," +
             fmt(r.geometry) + "," + fmt(r.connectedness) + "\n";
      export_image(contact_sheet(render_views(r.grid, ring)),
                   ctx.out / ("ablate_" + std::string(to_string(r.mode)) + "_seed" + std::to_string(r.seed) + ".ppm"));
    }
  write_file(ctx.out / "ablation.csv", csv);
  say(ctx, "wrote " + (ctx.out / "ablation.csv").string());
}

}  // namespace cg3d
