#include "hse/semantics.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hse/rng.hpp"

namespace hse {

using nlohmann::json;

std::vector<ClassEmbedding> load_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file " + path);
  std::vector<ClassEmbedding> out;
  std::set<std::string> seen;
  int dim = -1;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // skip blank lines so trailing newlines are harmless
    bool blank = true;
    for (char ch : line)
      if (!std::isspace(static_cast<unsigned char>(ch))) blank = false;
    if (blank) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("name") || !j.contains("vector"))
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected {\"name\",\"dim\",\"vector\"}");
    ClassEmbedding e;
    e.name = j.at("name").get<std::string>();
    e.vector = j.at("vector").get<std::vector<double>>();
    if (j.contains("dim") && j.at("dim").get<int>() != static_cast<int>(e.vector.size()))
      throw FormatError(path + ":" + std::to_string(lineno) + ": dim field " +
                        std::to_string(j.at("dim").get<int>()) + " does not match vector length " +
                        std::to_string(e.vector.size()));
    if (e.vector.empty()) throw FormatError(path + ":" + std::to_string(lineno) + ": empty vector");
    for (double v : e.vector)
      if (!std::isfinite(v)) throw FormatError(path + ":" + std::to_string(lineno) + ": non-finite value");
    if (!seen.insert(e.name).second)
      throw FormatError(path + ": duplicate class name '" + e.name + "'");
    if (dim < 0) dim = static_cast<int>(e.vector.size());
    if (static_cast<int>(e.vector.size()) != dim)
      throw FormatError(path + ": mixed embedding dimensions " + std::to_string(dim) + " and " +
                        std::to_string(e.vector.size()));
    out.push_back(std::move(e));
  }
  return out;
}

ClassEmbedding synth_embedding(const std::string& name, int ct, std::uint64_t seed) {
  if (name.empty()) throw ArgumentError("synth_embedding: empty class name");
  if (ct < 2) throw ArgumentError("synth_embedding: C_t must be >= 2");
  Rng rng(hash_combine(seed, fnv1a64(name)));
  ClassEmbedding e;
  e.name = name;
  e.vector.resize(static_cast<std::size_t>(ct));
  double norm2 = 0.0;
  for (auto& v : e.vector) {
    v = rng.normal();
    norm2 += v * v;
  }
  // a ct-dim gaussian is never this close to the origin in practice, but a
  // deterministic fallback keeps the contract airtight
  if (norm2 < 1e-24) {
    e.vector.assign(static_cast<std::size_t>(ct), 0.0);
    e.vector[0] = 1.0;
    norm2 = 1.0;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& v : e.vector) v *= inv;
  return e;
}

ProjectorKind parse_projector_kind(const std::string& s) {
  if (s == "linear") return ProjectorKind::linear;
  if (s == "mlp2") return ProjectorKind::mlp2;
  if (s == "mlp3") return ProjectorKind::mlp3;
  throw ArgumentError("unknown projector kind '" + s + "'");
}

}  // namespace hse
