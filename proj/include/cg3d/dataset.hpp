// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Procedural corpora on disk:
//   <dir>/manifest.txt           key=value, fully determines the corpus bytes
//   <dir>/grids/<id>.cg3d        grid checkpoint
//   <dir>/views/<id>_v<k>.ppm    ring renders
//   <dir>/index.csv              magic line, header, one row per sample

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "cg3d/checkpoint.hpp"
#include "cg3d/diffusion.hpp"
#include "cg3d/render.hpp"
#include "cg3d/rng.hpp"
#include "cg3d/shapes.hpp"

namespace cg3d {

inline constexpr const char* kIndexMagic = "# cg3d corpus index v1";
inline constexpr int kManifestVersion = 1;

struct CorpusManifest {
  int version = kManifestVersion;
  std::vector<std::string> concepts{"sphere", "cube", "two_spheres"};
  std::size_t samples_per_concept = 100;
  std::uint64_t seed = 0;
  std::size_t resolution = 32;
  std::size_t views = 4;
  double elevation_deg = 15.0;
  std::size_t image_size = 64;
  std::size_t samples_per_ray = 64;
  double split_fraction = 0.0;  // share of samples cut in half and pulled apart
  double split_gap = 0.3;       // world units between the two halves

  void validate() const {
    if (version != kManifestVersion) throw std::invalid_argument("unsupported manifest version");
    if (concepts.empty()) throw std::invalid_argument("manifest lists no concepts");
    for (const std::string& c : concepts) {
      const ConceptSpec& spec = find_concept(c);
      if (spec.label >= kTrainingVocabulary) {
        throw std::invalid_argument("concept " + c + " is a probe and cannot enter a corpus");
      }
    }
    if (resolution < 2) throw std::invalid_argument("resolution must be >= 2");
    if (views < 1) throw std::invalid_argument("views must be >= 1");
    if (image_size < 8) throw std::invalid_argument("image_size must be >= 8");
    if (samples_per_ray < 1) throw std::invalid_argument("samples_per_ray must be >= 1");
    if (!(split_fraction >= 0.0 && split_fraction <= 1.0)) throw std::invalid_argument("split_fraction outside [0,1]");
    if (!(split_gap >= 0.0)) throw std::invalid_argument("split_gap must be >= 0");
  }

  std::size_t total() const { return concepts.size() * samples_per_concept; }

  std::vector<Camera> cameras() const {
    return make_view_ring(views, degrees_to_radians(elevation_deg), image_size, image_size, samples_per_ray);
  }

  std::string serialize() const {
    std::ostringstream out;
    out.precision(17);
    std::string names;
    for (const std::string& c : concepts) names += (names.empty() ? "" : ",") + c;
    out << "version=" << version << "\n"
        << "concepts=" << names << "\n"
        << "samples_per_concept=" << samples_per_concept << "\n"
        << "seed=" << seed << "\n"
        << "resolution=" << resolution << "\n"
        << "views=" << views << "\n"
        << "elevation_deg=" << elevation_deg << "\n"
        << "image_size=" << image_size << "\n"
        << "samples_per_ray=" << samples_per_ray << "\n"
        << "split_fraction=" << split_fraction << "\n"
        << "split_gap=" << split_gap << "\n";
    return out.str();
  }

  static CorpusManifest parse(const std::string& text) {
    CorpusManifest m;
    std::istringstream in(text);
    std::string line, unknown;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("manifest line without '=': " + line);
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      try {
        if (key == "version") m.version = std::stoi(value);
        else if (key == "concepts") {
          m.concepts.clear();
          std::stringstream ss(value);
          for (std::string c; std::getline(ss, c, ',');) m.concepts.push_back(c);
        } else if (key == "samples_per_concept") m.samples_per_concept = std::stoull(value);
        else if (key == "seed") m.seed = std::stoull(value);
        else if (key == "resolution") m.resolution = std::stoull(value);
        else if (key == "views") m.views = std::stoull(value);
        else if (key == "elevation_deg") m.elevation_deg = std::stod(value);
        else if (key == "image_size") m.image_size = std::stoull(value);
        else if (key == "samples_per_ray") m.samples_per_ray = std::stoull(value);
        else if (key == "split_fraction") m.split_fraction = std::stod(value);
        else if (key == "split_gap") m.split_gap = std::stod(value);
        else unknown = key;
      } catch (const std::logic_error&) {
        throw std::invalid_argument("bad manifest value for " + key + ": " + value);
      }
      if (!unknown.empty()) throw std::invalid_argument("unknown manifest key: " + unknown);
    }
    m.validate();
    return m;
  }
};

// Cuts the occupancy along the x = cut plane and moves each half `gap / 2`
// away from it, leaving two floating parts.
inline std::vector<double> split_occupancy(std::span<const double> occ, std::size_t r, double cut, double gap) {
  const double voxel = 2.0 / static_cast<double>(r);
  const long shift = std::lround(0.5 * gap / voxel);
  const long rr = static_cast<long>(r);
  std::vector<double> out(occ.size(), 0.0);
  for (long z = 0; z < rr; ++z)
    for (long y = 0; y < rr; ++y)
      for (long x = 0; x < rr; ++x) {
        const double cx = -1.0 + (static_cast<double>(x) + 0.5) * voxel;
        const long nx = cx < cut ? x - shift : x + shift;
        if (nx < 0 || nx >= rr) continue;
        out[static_cast<std::size_t>((z * rr + y) * rr + nx)] = occ[static_cast<std::size_t>((z * rr + y) * rr + x)];
      }
  return out;
}

struct CorpusEntry {
  std::size_t id = 0;
  std::string concept_name;
  std::size_t label = 0;
  bool split = false;
  std::string grid_path;                // relative to the corpus root
  std::vector<std::string> view_paths;  // relative to the corpus root
};

inline std::string sample_stem(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", id);
  return buf;
}

// Grid of sample `id`: a pure function of (manifest, id).
inline std::pair<DensityGrid, bool> corpus_sample(const CorpusManifest& m, std::size_t id) {
  const ConceptSpec& spec = find_concept(m.concepts[id / m.samples_per_concept]);
  Rng rng = named_stream(m.seed, "corpus", id);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Vec3 center{0.0, 0.0, 0.0};
  for (double& c : center) c = spec.position_jitter * unit(rng);
  const double s = 1.0 + spec.size_jitter * unit(rng);
  std::vector<double> occ = shape_occupancy(spec, m.resolution, center, s);
  const bool split = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < m.split_fraction;
  if (split) occ = split_occupancy(occ, m.resolution, center[0], m.split_gap);
  return {grid_from_occupancy(m.resolution, occ, spec.albedo), split};
}

// Runs body(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& body) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::string index_csv(const std::vector<CorpusEntry>& entries) {
  std::string out = std::string(kIndexMagic) + "\nid,concept,label,split,grid,views\n";
  for (const CorpusEntry& e : entries) {
    std::string views;
    for (const std::string& v : e.view_paths) views += (views.empty() ? "" : ";") + v;
    out += std::to_string(e.id) + "," + e.concept_name + "," + std::to_string(e.label) + "," + (e.split ? "1" : "0") +
           "," + e.grid_path + "," + views + "\n";
  }
  return out;
}

// Writes the corpus under `dir`. The parent of `dir` must exist. The index is
// written last, so an interrupted build leaves no index behind.
inline std::vector<CorpusEntry> build_corpus(const CorpusManifest& m, const std::filesystem::path& dir,
                                             std::size_t jobs = 1) {
  namespace fs = std::filesystem;
  m.validate();
  const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) throw IoError("output parent directory does not exist: " + parent.string());
  std::error_code ec;
  fs::create_directory(dir, ec);
  fs::create_directory(dir / "grids", ec);
  fs::create_directory(dir / "views", ec);
  if (!fs::is_directory(dir / "grids") || !fs::is_directory(dir / "views")) {
    throw IoError("cannot create corpus directories under " + dir.string());
  }
  fs::remove(dir / "index.csv", ec);
  write_file(dir / "manifest.txt", m.serialize());
  const std::vector<Camera> cams = m.cameras();
  std::vector<CorpusEntry> entries(m.total());
  parallel_for(m.total(), jobs, [&](std::size_t id) {
    auto [grid, split] = corpus_sample(m, id);
    CorpusEntry& e = entries[id];
    e.id = id;
    e.concept_name = m.concepts[id / m.samples_per_concept];
    e.label = find_concept(e.concept_name).label;
    e.split = split;
    e.grid_path = "grids/" + sample_stem(id) + ".cg3d";
    save_checkpoint(dir / e.grid_path, grid_records(grid));
    const ViewSet views = render_views(grid, cams);
    for (std::size_t v = 0; v < views.size(); ++v) {
      e.view_paths.push_back("views/" + sample_stem(id) + "_v" + std::to_string(v) + ".ppm");
      export_image(views.images[v], dir / e.view_paths.back());
    }
  });
  const fs::path tmp = dir / "index.csv.tmp";
  write_file(tmp, index_csv(entries));
  fs::rename(tmp, dir / "index.csv");
  return entries;
}

struct Corpus {
  std::filesystem::path root;
  CorpusManifest manifest;
  std::vector<CorpusEntry> entries;
};

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.root = dir;
  c.manifest = CorpusManifest::parse(read_file(dir / "manifest.txt"));
  std::istringstream in(read_file(dir / "index.csv"));
  std::string line;
  if (!std::getline(in, line) || line != kIndexMagic) throw FormatError("corpus index has a bad magic line");
  if (!std::getline(in, line) || line != "id,concept,label,split,grid,views") {
    throw FormatError("corpus index has a bad header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw FormatError("corpus index row needs 6 fields: " + line);
    CorpusEntry e;
    try {
      e.id = std::stoull(f[0]);
      e.label = std::stoull(f[2]);
    } catch (const std::logic_error&) {
      throw FormatError("corpus index row has a bad number: " + line);
    }
    e.concept_name = f[1];
    e.split = f[3] == "1";
    e.grid_path = f[4];
    std::stringstream vs(f[5]);
    for (std::string v; std::getline(vs, v, ';');) e.view_paths.push_back(v);
    if (e.id != c.entries.size()) throw FormatError("corpus index ids are not dense");
    c.entries.push_back(std::move(e));
  }
  if (c.entries.size() != c.manifest.total()) throw FormatError("corpus index does not match its manifest");
  return c;
}

enum class BatchTarget { views2d, grids3d };

struct BatchItem {
  Tensor value;  // views2d: [V, H, W, 3] in [0,1]; grids3d: raw density [R, R, R]
  std::size_t label = 0;
};

inline std::vector<BatchItem> load_batch(const Corpus& corpus, std::span<const std::size_t> indices, BatchTarget target) {
  std::vector<BatchItem> batch;
  for (std::size_t i : indices) {
    if (i >= corpus.entries.size()) {
      throw std::out_of_range("corpus index " + std::to_string(i) + " outside [0, " +
                              std::to_string(corpus.entries.size()) + ")");
    }
    const CorpusEntry& e = corpus.entries[i];
    if (target == BatchTarget::grids3d) {
      batch.push_back({grid_from_records(load_checkpoint(corpus.root / e.grid_path)).raw_density, e.label});
      continue;
    }
    std::vector<double> all;
    Shape shape;
    for (const std::string& p : e.view_paths) {
      const Tensor img = read_image(corpus.root / p);
      shape = img.shape();
      all.insert(all.end(), img.data().begin(), img.data().end());
    }
    batch.push_back({Tensor({e.view_paths.size(), shape[0], shape[1], 3}, std::move(all)), e.label});
  }
  return batch;
}

inline std::vector<std::size_t> all_indices(const Corpus& corpus) {
  std::vector<std::size_t> idx(corpus.entries.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

// Training samples for the 2D prior: every stored view, pooled.
inline std::vector<Sample> prior2d_samples(const std::vector<BatchItem>& views) {
  std::vector<Sample> out;
  for (const BatchItem& item : views) {
    const Shape& s = item.value.shape();
    const std::size_t per = s[1] * s[2] * 3;
    for (std::size_t v = 0; v < s[0]; ++v) {
      Tensor img({s[1], s[2], 3}, {item.value.data().begin() + v * per, item.value.data().begin() + (v + 1) * per});
      out.push_back({to_prior_sample(img), item.label});
    }
  }
  return out;
}

// Training samples for the native-3D prior: occupancy latents.
inline std::vector<Sample> prior3d_samples(const std::vector<BatchItem>& grids) {
  std::vector<Sample> out;
  for (const BatchItem& item : grids) {
    std::vector<double> z(item.value.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = item.value[i] / kLatentGain + 0.5;
    out.push_back({std::move(z), item.label});
  }
  return out;
}

}  // namespace cg3d
