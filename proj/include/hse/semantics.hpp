#pragma once

#include <string>
#include <vector>

#include "hse/backbone.hpp"
#include "hse/ops.hpp"
#include "hse/tensor.hpp"

namespace hse {

// Class-description embedding: class name -> vector t. Loaded from a
// JSON-lines export of some external language model, or synthesized
// deterministically when no export is supplied.
struct ClassEmbedding {
  std::string name;
  std::vector<double> vector;
};

// Parse a JSON-lines file, one {"name","dim","vector"} object per class.
// Empty file -> empty list. Duplicate names or mixed dimensions are format
// errors.
std::vector<ClassEmbedding> load_embeddings(const std::string& path);

// Deterministic unit-norm stand-in for a language-model embedding, keyed on
// (name, seed).
ClassEmbedding synth_embedding(const std::string& name, int ct, std::uint64_t seed);

enum class ProjectorKind { linear, mlp2, mlp3 };

inline const char* projector_kind_name(ProjectorKind k) {
  switch (k) {
    case ProjectorKind::linear: return "linear";
    case ProjectorKind::mlp2: return "mlp2";
    case ProjectorKind::mlp3: return "mlp3";
  }
  return "?";
}

ProjectorKind parse_projector_kind(const std::string& s);

template <typename T>
struct AffineLayer {
  Tensor<T> w;  // [out, in]
  Tensor<T> b;  // [out]
};

template <typename T>
AffineLayer<T> make_affine_layer(int out, int in, std::uint64_t seed, const std::string& name) {
  AffineLayer<T> l;
  l.w = scaled_uniform_init<T>({out, in}, in, out, seed, name + ".w");
  l.b = Tensor<T>::zeros({out});
  return l;
}

// Maps a CD embedding t in R^{C_t} into visual feature space R^C. The spatial
// and channel projectors are two independent instances of this.
template <typename T>
struct ProjectorParams {
  ProjectorKind kind = ProjectorKind::linear;
  std::vector<AffineLayer<T>> layers;
};

template <typename T>
ProjectorParams<T> build_projector(ProjectorKind kind, int ct, int c, std::uint64_t seed,
                                   const std::string& name) {
  if (ct < 1 || c < 1) throw ConfigError("projector dimensions must be positive");
  ProjectorParams<T> p;
  p.kind = kind;
  p.layers.push_back(make_affine_layer<T>(c, ct, seed, name + ".l0"));
  const int extra = kind == ProjectorKind::linear ? 0 : kind == ProjectorKind::mlp2 ? 1 : 2;
  for (int i = 0; i < extra; ++i)
    p.layers.push_back(make_affine_layer<T>(c, c, seed, name + ".l" + std::to_string(i + 1)));
  return p;
}

template <typename T>
Tensor<T> project(Tape<T>* tape, const ProjectorParams<T>& p, const Tensor<T>& t) {
  if (t.rank() != 1 || t.shape[0] != p.layers[0].w.shape[1])
    throw DimensionError("project: embedding " + shape_str(t.shape) + " vs weights " +
                         shape_str(p.layers[0].w.shape));
  Tensor<T> y = affine(tape, p.layers[0].w, p.layers[0].b, t);
  for (std::size_t i = 1; i < p.layers.size(); ++i)
    y = affine(tape, p.layers[i].w, p.layers[i].b, relu(tape, y));
  return y;
}

}  // namespace hse
