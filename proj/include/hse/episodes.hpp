#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hse/errors.hpp"
#include "hse/rng.hpp"
#include "hse/tensor.hpp"

namespace hse {

// ---- dataset specification ---------------------------------------------------

struct DatasetSpec {
  std::vector<std::string> classes;        // ordered; folds partition this list
  int fold_count = 3;
  int extent = 64;                         // square images, H0 = W0
  int train_per_class = 60;
  int test_per_class = 20;

  void validate() const;
  // Fold f = classes[f*k .. (f+1)*k) with k = classes/folds.
  std::vector<std::string> fold_classes(int fold) const;
  std::vector<std::string> non_fold_classes(int fold) const;
};

DatasetSpec default_dataset_spec(int class_count = 9, int extent = 64, int train_per_class = 60,
                                 int test_per_class = 20);

// One shape instance, fully described so the mask can be re-rasterized from
// the manifest alone.
struct ShapeInstance {
  std::string kind;
  double cx = 0, cy = 0, size = 0;
  std::array<std::uint8_t, 3> color{};
};

struct ImageRecord {
  std::string klass;
  std::string phase;  // "train" | "test"
  int id = 0;
  std::vector<ShapeInstance> targets;      // labeled, define the mask
  std::vector<ShapeInstance> distractors;  // unlabeled background objects
};

struct Manifest {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  std::vector<ImageRecord> images;
};

// Rasterize `kind` at pixel centers; returns 1 inside the shape.
bool shape_contains(const ShapeInstance& s, double px, double py);
std::vector<std::uint8_t> rasterize_mask(const std::vector<ShapeInstance>& targets, int extent);

// ---- on-disk dataset -----------------------------------------------------------

// Generates <out>/<phase>/<class>/img_<id>.png + mask_<id>.png + manifest.json.
// Fully determined by (spec, seed).
Manifest generate_dataset(const DatasetSpec& spec, std::uint64_t seed, const std::string& out_dir);

Manifest read_manifest(const std::string& dir);

// In-memory index of a generated (or compatible) dataset tree.
struct Sample {
  std::string image_path;
  std::string mask_path;
};

struct LoadedDataset {
  DatasetSpec spec;                       // reconstructed from manifest when present
  std::string root;
  // phase -> class -> samples
  std::map<std::string, std::map<std::string, std::vector<Sample>>> index;

  int class_count() const { return static_cast<int>(spec.classes.size()); }
  const std::vector<Sample>& samples(const std::string& phase, const std::string& klass) const;
};

LoadedDataset load_dataset(const std::string& dir);

// ---- episodes ------------------------------------------------------------------

template <typename T>
struct SamplePair {
  Tensor<T> image;  // [3, H0, W0], values in [0,1]
  Tensor<T> mask;   // [H0, W0], values in {0,1}
};

// One few-shot task: K support pairs plus a query, all of one class.
template <typename T>
struct Episode {
  std::vector<SamplePair<T>> support;
  SamplePair<T> query;
  std::string class_name;
};

// Addressing of one episode without materializing pixels; sampling is pure in
// (seed, index) so episodes can be drawn independently and in parallel.
struct EpisodeRef {
  std::string klass;
  std::string phase;
  std::vector<int> support_ids;
  int query_id = 0;
};

enum class Phase { train, test };
inline const char* phase_name(Phase p) { return p == Phase::train ? "train" : "test"; }

EpisodeRef sample_episode_ref(const LoadedDataset& ds, int fold, Phase phase, int shots,
                              std::uint64_t seed, std::uint64_t index);

// Decode a sample pair from disk; images scaled to [0,1], masks thresholded
// to {0,1}.
SamplePair<float> load_sample_pair(const Sample& s);

Episode<float> materialize_episode(const LoadedDataset& ds, const EpisodeRef& ref);

inline Episode<float> sample_episode(const LoadedDataset& ds, int fold, Phase phase, int shots,
                                     std::uint64_t seed, std::uint64_t index) {
  return materialize_episode(ds, sample_episode_ref(ds, fold, phase, shots, seed, index));
}

template <typename T>
Episode<T> cast_episode(const Episode<float>& e) {
  Episode<T> out;
  out.class_name = e.class_name;
  out.query.image = cast_tensor<float, T>(e.query.image);
  out.query.mask = cast_tensor<float, T>(e.query.mask);
  for (const auto& s : e.support) out.support.push_back({cast_tensor<float, T>(s.image), cast_tensor<float, T>(s.mask)});
  return out;
}

}  // namespace hse
