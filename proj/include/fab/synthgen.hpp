#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fab/bias.hpp"
#include "fab/objectives.hpp"
#include "fab/tensor.hpp"

namespace fab {

// One synthetic class: how much area it covers and three difficulty knobs
// (feature noise, prototype proximity to its confuser, label jitter depth).
struct ClassSpec {
  double target_frequency = 0.0;
  double noise_sigma = 0.0;
  double confusability = 0.0;
  int boundary_jitter = 0;

  nlohmann::json to_json() const {
    return {{"target_frequency", target_frequency},
            {"noise_sigma", noise_sigma},
            {"confusability", confusability},
            {"boundary_jitter", boundary_jitter}};
  }
  static ClassSpec from_json(const nlohmann::json& j) {
    return {j.at("target_frequency").get<double>(),
            j.at("noise_sigma").get<double>(),
            j.at("confusability").get<double>(),
            j.at("boundary_jitter").get<int>()};
  }
};

inline void validate_specs(const std::vector<ClassSpec>& specs) {
  if (specs.size() < 2) throw std::invalid_argument("need >= 2 class specs");
  double s = 0.0;
  for (const auto& c : specs) {
    if (c.target_frequency <= 0.0 || c.target_frequency >= 1.0)
      throw std::invalid_argument("target_frequency outside (0,1)");
    if (c.noise_sigma < 0.0 || c.confusability < 0.0 || c.confusability > 1.0 ||
        c.boundary_jitter < 0)
      throw std::invalid_argument("class spec knob out of range");
    s += c.target_frequency;
  }
  if (std::abs(s - 1.0) > 1e-6)
    throw std::invalid_argument("target frequencies sum to " +
                                std::to_string(s) + ", expected 1");
}

// One scene: per-pixel features plus one-hot class masks.
struct Sample {
  Tensor features;  // N x D_in
  Tensor labels;    // C x N, one-hot over classes
  std::uint64_t scene_seed = 0;
};

struct SplitCounts {
  std::size_t train = 8, val = 2, test = 2;
};

struct DatasetSplit {
  std::vector<Sample> train, val, test;
  std::vector<double> empirical_frequencies;  // from the train split only
  std::vector<ClassSpec> specs;
  std::size_t grid_h = 0, grid_w = 0, input_dim = 0;
  std::uint64_t master_seed = 0;

  ClassFrequencies empirical() const {
    return ClassFrequencies(empirical_frequencies);
  }
};

constexpr double kPrototypeRadius = 4.0;

// The class whose prototype a given class is pulled toward: the most
// frequent class other than itself (ties break to the lower index).
inline std::size_t confuser_of(const std::vector<ClassSpec>& specs,
                               std::size_t c) {
  std::size_t best = c == 0 ? 1 : 0;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    if (k != c && specs[k].target_frequency > specs[best].target_frequency)
      best = k;
  }
  return best;
}

// Class prototypes in feature space. Base positions are the vertices of a
// regular simplex of circumradius R; each class is then placed at distance
// (1 - confusability) * R from its confuser's anchor vertex, along the ray
// toward its own vertex. Anchoring on the fixed vertices keeps every
// placement independent of the other classes' knobs.
inline Tensor class_prototypes(const std::vector<ClassSpec>& specs,
                               std::size_t input_dim) {
  validate_specs(specs);
  const std::size_t c_count = specs.size();
  if (input_dim < c_count) {
    throw std::invalid_argument("input_dim " + std::to_string(input_dim) +
                                " too small for " + std::to_string(c_count) +
                                " class prototypes");
  }
  // Simplex vertices: centred standard basis, scaled to norm R.
  const double scale =
      kPrototypeRadius / std::sqrt(1.0 - 1.0 / static_cast<double>(c_count));
  Tensor base({c_count, input_dim});
  for (std::size_t c = 0; c < c_count; ++c)
    for (std::size_t j = 0; j < c_count; ++j)
      base.at(c, j) =
          scale * ((c == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(c_count));

  Tensor proto({c_count, input_dim});
  for (std::size_t c = 0; c < c_count; ++c) {
    std::size_t conf = confuser_of(specs, c);
    double norm = 0.0;
    std::vector<double> dir(input_dim);
    for (std::size_t j = 0; j < input_dim; ++j) {
      dir[j] = base.at(c, j) - base.at(conf, j);
      norm += dir[j] * dir[j];
    }
    norm = std::sqrt(norm);
    double dist = (1.0 - specs[c].confusability) * kPrototypeRadius;
    for (std::size_t j = 0; j < input_dim; ++j)
      proto.at(c, j) = base.at(conf, j) + dist * dir[j] / norm;
  }
  return proto;
}

namespace detail {

// Quota-driven multi-source region growth: anchors are random distinct
// cells, frontiers grow one random cell at a time, the class with the
// largest remaining deficit grows next.
inline std::vector<int> grow_regions(const std::vector<ClassSpec>& specs,
                                     std::size_t h, std::size_t w,
                                     std::mt19937_64& rng) {
  const std::size_t n = h * w;
  const std::size_t c_count = specs.size();

  std::vector<std::size_t> quota(c_count);
  std::size_t assigned_quota = 0;
  for (std::size_t c = 0; c < c_count; ++c) {
    quota[c] = static_cast<std::size_t>(
        std::llround(specs[c].target_frequency * static_cast<double>(n)));
    if (quota[c] == 0) {
      throw std::invalid_argument("class " + std::to_string(c) +
                                  " target frequency below 1/(H*W)");
    }
    assigned_quota += quota[c];
  }
  // Rounding slack goes to the largest class.
  std::size_t largest = 0;
  for (std::size_t c = 1; c < c_count; ++c)
    if (quota[c] > quota[largest]) largest = c;
  quota[largest] += n;
  quota[largest] -= assigned_quota;  // may wrap is impossible: slack < C

  std::vector<int> label(n, -1);
  std::vector<std::vector<std::size_t>> frontier(c_count);
  std::vector<std::size_t> grown(c_count, 0);

  auto push_neighbors = [&](std::size_t cell, std::size_t c) {
    std::size_t r = cell / w, col = cell % w;
    if (r > 0) frontier[c].push_back(cell - w);
    if (r + 1 < h) frontier[c].push_back(cell + w);
    if (col > 0) frontier[c].push_back(cell - 1);
    if (col + 1 < w) frontier[c].push_back(cell + 1);
  };

  // Distinct random anchors.
  for (std::size_t c = 0; c < c_count; ++c) {
    std::size_t cell;
    do {
      cell = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    } while (label[cell] != -1);
    label[cell] = static_cast<int>(c);
    grown[c] = 1;
    push_neighbors(cell, c);
  }

  std::size_t remaining = n - c_count;
  while (remaining > 0) {
    // Grow the class with the largest unfilled fraction of its quota so all
    // regions expand proportionally; small regions would otherwise be
    // enclosed before their turn. Fall back to any live frontier once the
    // under-quota classes are walled in.
    std::size_t pick = c_count;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int pass = 0; pass < 2 && pick == c_count; ++pass) {
      for (std::size_t c = 0; c < c_count; ++c) {
        if (frontier[c].empty()) continue;
        double deficit = static_cast<double>(quota[c]) -
                         static_cast<double>(grown[c]);
        if (pass == 0 && deficit <= 0.0) continue;
        double score = deficit / static_cast<double>(quota[c]);
        if (pick == c_count || score > best_score) {
          pick = c;
          best_score = score;
        }
      }
      if (pick != c_count) break;
    }
    if (pick == c_count) {
      throw std::logic_error("region growth stalled with unassigned cells");
    }
    auto& f = frontier[pick];
    std::size_t at = std::uniform_int_distribution<std::size_t>(0, f.size() - 1)(rng);
    std::size_t cell = f[at];
    f[at] = f.back();
    f.pop_back();
    if (label[cell] != -1) continue;  // stale frontier entry
    label[cell] = static_cast<int>(pick);
    ++grown[pick];
    --remaining;
    push_neighbors(cell, pick);
  }
  return label;
}

// Random-walk displacement of class boundaries. A boundary pixel may swap
// to a neighbouring class for `max(jitter)` rounds; a pair of classes keeps
// jittering while either side's knob is at least the round index.
inline void jitter_boundaries(std::vector<int>& label,
                              const std::vector<ClassSpec>& specs,
                              std::size_t h, std::size_t w,
                              std::mt19937_64& rng) {
  int max_rounds = 0;
  for (const auto& s : specs) max_rounds = std::max(max_rounds, s.boundary_jitter);
  if (max_rounds == 0) return;

  const std::size_t n = h * w;
  std::vector<std::size_t> count(specs.size(), 0);
  for (int c : label) ++count[static_cast<std::size_t>(c)];

  std::vector<std::size_t> visit(n);
  std::iota(visit.begin(), visit.end(), 0);

  for (int round = 0; round < max_rounds; ++round) {
    std::vector<int> snap = label;
    std::shuffle(visit.begin(), visit.end(), rng);
    for (std::size_t cell : visit) {
      int c = snap[cell];
      std::size_t r = cell / w, col = cell % w;
      int neighbor_class[4];
      int distinct = 0;
      auto consider = [&](std::size_t other) {
        int oc = snap[other];
        if (oc != c) neighbor_class[distinct++] = oc;
      };
      if (r > 0) consider(cell - w);
      if (r + 1 < h) consider(cell + w);
      if (col > 0) consider(cell - 1);
      if (col + 1 < w) consider(cell + 1);
      if (distinct == 0) continue;
      int oc = neighbor_class[std::uniform_int_distribution<int>(0, distinct - 1)(rng)];
      int depth = std::max(specs[static_cast<std::size_t>(c)].boundary_jitter,
                           specs[static_cast<std::size_t>(oc)].boundary_jitter);
      if (round >= depth) continue;
      if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= 0.5) continue;
      if (count[static_cast<std::size_t>(label[cell])] <= 1) continue;
      --count[static_cast<std::size_t>(label[cell])];
      label[cell] = oc;
      ++count[static_cast<std::size_t>(oc)];
    }
  }
}

}  // namespace detail

// Deterministic given seed: region layout, label jitter, then features
// drawn around the layout class's prototype. Features follow the pre-jitter
// layout; jitter displaces only the labels, so it is pure label noise.
inline Sample generate_scene(const std::vector<ClassSpec>& specs,
                             std::size_t grid_h, std::size_t grid_w,
                             std::size_t input_dim, std::uint64_t seed) {
  validate_specs(specs);
  const std::size_t n = grid_h * grid_w;
  const std::size_t c_count = specs.size();
  Tensor proto = class_prototypes(specs, input_dim);

  std::mt19937_64 rng(seed);
  std::vector<int> layout = detail::grow_regions(specs, grid_h, grid_w, rng);
  std::vector<int> labels_jittered = layout;
  detail::jitter_boundaries(labels_jittered, specs, grid_h, grid_w, rng);

  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor features({n, input_dim});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = static_cast<std::size_t>(layout[i]);
    const double sigma = specs[c].noise_sigma;
    for (std::size_t j = 0; j < input_dim; ++j)
      features.at(i, j) = proto.at(c, j) + sigma * normal(rng);
  }

  Tensor labels({c_count, n});
  for (std::size_t i = 0; i < n; ++i)
    labels.at(static_cast<std::size_t>(labels_jittered[i]), i) = 1.0;

  Sample s;
  s.features = std::move(features);
  s.labels = std::move(labels);
  s.scene_seed = seed;
  return s;
}

inline DatasetSplit generate_dataset(const std::vector<ClassSpec>& specs,
                                     std::size_t grid_h, std::size_t grid_w,
                                     std::size_t input_dim,
                                     const SplitCounts& counts,
                                     std::uint64_t master_seed) {
  if (counts.train < 1 || counts.val < 1 || counts.test < 1) {
    throw std::invalid_argument("each split needs at least one scene");
  }
  DatasetSplit ds;
  ds.specs = specs;
  ds.grid_h = grid_h;
  ds.grid_w = grid_w;
  ds.input_dim = input_dim;
  ds.master_seed = master_seed;

  auto gen_split = [&](std::size_t count, std::uint64_t offset) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
      out.push_back(
          generate_scene(specs, grid_h, grid_w, input_dim,
                         master_seed + offset + static_cast<std::uint64_t>(i)));
    return out;
  };
  ds.train = gen_split(counts.train, 0);
  ds.val = gen_split(counts.val, 1000000);
  ds.test = gen_split(counts.test, 2000000);

  const std::size_t c_count = specs.size();
  std::vector<double> freq(c_count, 0.0);
  double total = 0.0;
  for (const auto& s : ds.train) {
    for (std::size_t c = 0; c < c_count; ++c)
      for (std::size_t i = 0; i < s.labels.cols(); ++i) freq[c] += s.labels.at(c, i);
    total += static_cast<double>(s.labels.cols());
  }
  for (auto& f : freq) f /= total;
  ds.empirical_frequencies = std::move(freq);
  return ds;
}

// Four classes arranged so the frequency ranking and the difficulty ranking
// invert between the common-hard class B and the rare-easy class C.
inline std::vector<ClassSpec> disconnect_preset() {
  return {
      {0.55, 0.3, 0.10, 0},  // A: common, easy
      {0.30, 1.5, 0.85, 2},  // B: common, hard
      {0.10, 0.3, 0.10, 0},  // C: rare, easy
      {0.05, 1.5, 0.85, 2},  // D: rare, hard
  };
}

inline const std::vector<std::string>& disconnect_class_names() {
  static const std::vector<std::string> names = {"A", "B", "C", "D"};
  return names;
}

// ---------------------------------------------------------------------------
// Nearest-prototype oracle: the generator's own difficulty measure,
// independent of any decoder.
// ---------------------------------------------------------------------------

inline Tensor nearest_prototype_predict(const Tensor& features,
                                        const Tensor& prototypes) {
  const std::size_t n = features.rows();
  const std::size_t c_count = prototypes.rows();
  Tensor pred({c_count, n});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < c_count; ++c) {
      double d = 0.0;
      for (std::size_t j = 0; j < features.cols(); ++j) {
        double diff = features.at(i, j) - prototypes.at(c, j);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    pred.at(best, i) = 1.0;
  }
  return pred;
}

inline std::vector<double> nearest_prototype_dice(const Sample& sample,
                                                  const Tensor& prototypes) {
  return dice_metric(nearest_prototype_predict(sample.features, prototypes),
                     sample.labels);
}

// ---------------------------------------------------------------------------
// Newline-delimited JSON export/import with a manifest
// ---------------------------------------------------------------------------

inline void write_split_ndjson(const std::string& path,
                               const std::vector<Sample>& samples,
                               std::size_t grid_h, std::size_t grid_w,
                               std::size_t input_dim) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& s : samples) {
    nlohmann::json j = {
        {"scene_seed", s.scene_seed},
        {"shape",
         {{"h", grid_h}, {"w", grid_w}, {"d_in", input_dim},
          {"classes", s.labels.rows()}}},
        {"features", s.features.vec()},
        {"labels", s.labels.vec()}};
    out << j.dump() << '\n';
  }
}

inline std::vector<Sample> read_split_ndjson(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    const auto& shape = j.at("shape");
    std::size_t n = shape.at("h").get<std::size_t>() *
                    shape.at("w").get<std::size_t>();
    std::size_t d_in = shape.at("d_in").get<std::size_t>();
    std::size_t classes = shape.at("classes").get<std::size_t>();
    Sample s;
    s.scene_seed = j.at("scene_seed").get<std::uint64_t>();
    s.features = Tensor({n, d_in}, j.at("features").get<std::vector<double>>());
    s.labels = Tensor({classes, n}, j.at("labels").get<std::vector<double>>());
    out.push_back(std::move(s));
  }
  return out;
}

inline nlohmann::json dataset_manifest(const DatasetSplit& ds) {
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& s : ds.specs) specs.push_back(s.to_json());
  auto seeds_of = [](const std::vector<Sample>& v) {
    std::vector<std::uint64_t> s;
    for (const auto& x : v) s.push_back(x.scene_seed);
    return s;
  };
  return {{"specs", specs},
          {"grid", {{"h", ds.grid_h}, {"w", ds.grid_w}}},
          {"d_in", ds.input_dim},
          {"master_seed", ds.master_seed},
          {"empirical_frequencies", ds.empirical_frequencies},
          {"seeds",
           {{"train", seeds_of(ds.train)},
            {"val", seeds_of(ds.val)},
            {"test", seeds_of(ds.test)}}}};
}

inline void write_dataset(const DatasetSplit& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_split_ndjson(dir + "/train.ndjson", ds.train, ds.grid_h, ds.grid_w,
                     ds.input_dim);
  write_split_ndjson(dir + "/val.ndjson", ds.val, ds.grid_h, ds.grid_w,
                     ds.input_dim);
  write_split_ndjson(dir + "/test.ndjson", ds.test, ds.grid_h, ds.grid_w,
                     ds.input_dim);
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
  out << dataset_manifest(ds).dump(2) << '\n';
}

inline DatasetSplit read_dataset(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw std::runtime_error("cannot open manifest in " + dir);
  nlohmann::json j = nlohmann::json::parse(in);
  DatasetSplit ds;
  for (const auto& s : j.at("specs")) ds.specs.push_back(ClassSpec::from_json(s));
  ds.grid_h = j.at("grid").at("h").get<std::size_t>();
  ds.grid_w = j.at("grid").at("w").get<std::size_t>();
  ds.input_dim = j.at("d_in").get<std::size_t>();
  ds.master_seed = j.at("master_seed").get<std::uint64_t>();
  ds.empirical_frequencies =
      j.at("empirical_frequencies").get<std::vector<double>>();
  ds.train = read_split_ndjson(dir + "/train.ndjson");
  ds.val = read_split_ndjson(dir + "/val.ndjson");
  ds.test = read_split_ndjson(dir + "/test.ndjson");
  return ds;
}

}  // namespace fab
