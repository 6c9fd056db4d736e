#include "hse/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "hse/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hse {

// ---- spec ----------------------------------------------------------------------

namespace {

const std::vector<std::string> kCanonicalClasses = {"circle", "square",  "triangle", "ring",   "cross",
                                                    "bar",    "diamond", "ellipse",  "lshape"};

// Stable hue per class name, spread around the color wheel; distractors from
// a neighboring class sit close enough in hue to be confusable.
double class_hue(const std::string& name) {
  for (std::size_t i = 0; i < kCanonicalClasses.size(); ++i)
    if (kCanonicalClasses[i] == name) return static_cast<double>(i) * 40.0;
  return static_cast<double>(fnv1a64(name) % 360u);
}

std::array<std::uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  double r = 0, g = 0, b = 0;
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  auto u8 = [](double x) {
    int c = static_cast<int>(std::lround(x * 255.0));
    return static_cast<std::uint8_t>(std::clamp(c, 0, 255));
  };
  return {u8(r), u8(g), u8(b)};
}

}  // namespace

void DatasetSpec::validate() const {
  if (classes.empty()) throw ConfigError("dataset has no classes");
  if (fold_count < 1 || static_cast<int>(classes.size()) % fold_count != 0)
    throw ConfigError("class count " + std::to_string(classes.size()) + " not divisible into " +
                      std::to_string(fold_count) + " folds");
  if (extent < 16 || extent % 8 != 0) throw ConfigError("extent must be a multiple of 8 and at least 16");
  if (train_per_class < 2 || test_per_class < 2) throw ConfigError("per-class counts must be at least 2");
  std::set<std::string> uniq(classes.begin(), classes.end());
  if (uniq.size() != classes.size()) throw ConfigError("duplicate class names in dataset spec");
}

std::vector<std::string> DatasetSpec::fold_classes(int fold) const {
  if (fold < 0 || fold >= fold_count) throw ArgumentError("fold index " + std::to_string(fold));
  const int per = static_cast<int>(classes.size()) / fold_count;
  return {classes.begin() + static_cast<std::ptrdiff_t>(fold) * per,
          classes.begin() + static_cast<std::ptrdiff_t>(fold + 1) * per};
}

std::vector<std::string> DatasetSpec::non_fold_classes(int fold) const {
  auto held = fold_classes(fold);
  std::vector<std::string> out;
  for (const auto& c : classes)
    if (std::find(held.begin(), held.end(), c) == held.end()) out.push_back(c);
  return out;
}

DatasetSpec default_dataset_spec(int class_count, int extent, int train_per_class, int test_per_class) {
  if (class_count < 3 || class_count > static_cast<int>(kCanonicalClasses.size()) || class_count % 3 != 0)
    throw ConfigError("class count must be 3, 6 or 9");
  DatasetSpec spec;
  spec.classes.assign(kCanonicalClasses.begin(), kCanonicalClasses.begin() + class_count);
  spec.extent = extent;
  spec.train_per_class = train_per_class;
  spec.test_per_class = test_per_class;
  spec.validate();
  return spec;
}

// ---- shape geometry --------------------------------------------------------------

bool shape_contains(const ShapeInstance& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy, r = s.size;
  if (s.kind == "circle") return dx * dx + dy * dy <= r * r;
  if (s.kind == "square") return std::fabs(dx) <= r && std::fabs(dy) <= r;
  if (s.kind == "triangle") {
    // isoceles, apex up: vertices (0,-r), (+-0.95r, +0.8r) around the center
    const double x0 = 0.95 * r, y0 = 0.8 * r;
    if (dy < -r || dy > y0) return false;
    const double half = x0 * (dy + r) / (y0 + r);
    return std::fabs(dx) <= half;
  }
  if (s.kind == "ring") {
    const double d2 = dx * dx + dy * dy, inner = 0.55 * r;
    return d2 <= r * r && d2 >= inner * inner;
  }
  if (s.kind == "cross") {
    const double arm = 0.32 * r;
    return (std::fabs(dx) <= arm && std::fabs(dy) <= r) || (std::fabs(dy) <= arm && std::fabs(dx) <= r);
  }
  if (s.kind == "bar") return std::fabs(dx) <= 1.3 * r && std::fabs(dy) <= 0.3 * r;
  if (s.kind == "diamond") return std::fabs(dx) + std::fabs(dy) <= 1.2 * r;
  if (s.kind == "ellipse") {
    const double a = 1.25 * r, b = 0.65 * r;
    return (dx / a) * (dx / a) + (dy / b) * (dy / b) <= 1.0;
  }
  if (s.kind == "lshape") {
    const bool vertical = dx >= -r && dx <= -r + 0.6 * r && std::fabs(dy) <= r;
    const bool horizontal = std::fabs(dx) <= r && dy >= r - 0.6 * r && dy <= r;
    return vertical || horizontal;
  }
  throw ArgumentError("unknown shape kind '" + s.kind + "'");
}

std::vector<std::uint8_t> rasterize_mask(const std::vector<ShapeInstance>& targets, int extent) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(extent) * extent, 0);
  for (int y = 0; y < extent; ++y)
    for (int x = 0; x < extent; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      for (const auto& t : targets)
        if (shape_contains(t, px, py)) {
          mask[static_cast<std::size_t>(y) * extent + x] = 1;
          break;
        }
    }
  return mask;
}

// ---- generation -------------------------------------------------------------------

namespace {

ShapeInstance roll_instance(const std::string& kind, int extent, Rng& rng) {
  ShapeInstance s;
  s.kind = kind;
  const double smin = std::max(3.0, extent * 0.095);
  const double smax = std::max(smin + 1.0, extent * 0.19);
  s.size = rng.uniform(smin, smax);
  const double margin = 1.35 * s.size + 1.0;
  s.cx = rng.uniform(margin, extent - margin);
  s.cy = rng.uniform(margin, extent - margin);
  const double hue = class_hue(kind) + rng.uniform(-14.0, 14.0);
  s.color = hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95));
  return s;
}

void draw_instance(ImageU8& img, const ShapeInstance& s, Rng& rng) {
  // bounded scan window around the shape
  const int lo_x = std::max(0, static_cast<int>(s.cx - 1.4 * s.size - 2));
  const int hi_x = std::min(img.width - 1, static_cast<int>(s.cx + 1.4 * s.size + 2));
  const int lo_y = std::max(0, static_cast<int>(s.cy - 1.4 * s.size - 2));
  const int hi_y = std::min(img.height - 1, static_cast<int>(s.cy + 1.4 * s.size + 2));
  for (int y = lo_y; y <= hi_y; ++y)
    for (int x = lo_x; x <= hi_x; ++x) {
      if (!shape_contains(s, x + 0.5, y + 0.5)) continue;
      const double shade = rng.uniform(-10.0, 10.0);
      for (int c = 0; c < 3; ++c) {
        const int v = static_cast<int>(std::lround(s.color[static_cast<std::size_t>(c)] + shade));
        img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
      }
    }
}

ImageU8 textured_background(int extent, Rng& rng) {
  ImageU8 img;
  img.width = img.height = extent;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(extent) * extent * 3);
  const double base = rng.uniform(90.0, 160.0);
  double tint[3];
  for (double& t : tint) t = rng.uniform(-12.0, 12.0);
  // coarse grid of low-frequency noise
  const int grid = 9;
  std::vector<double> coarse(static_cast<std::size_t>(grid) * grid);
  for (auto& v : coarse) v = rng.uniform(-24.0, 24.0);
  auto coarse_at = [&](double fy, double fx) {
    const double gy = fy * (grid - 1), gx = fx * (grid - 1);
    const int y0 = std::min(static_cast<int>(gy), grid - 2), x0 = std::min(static_cast<int>(gx), grid - 2);
    const double ty = gy - y0, tx = gx - x0;
    const double a = coarse[static_cast<std::size_t>(y0) * grid + x0];
    const double b = coarse[static_cast<std::size_t>(y0) * grid + x0 + 1];
    const double c = coarse[static_cast<std::size_t>(y0 + 1) * grid + x0];
    const double d = coarse[static_cast<std::size_t>(y0 + 1) * grid + x0 + 1];
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
  };
  for (int y = 0; y < extent; ++y)
    for (int x = 0; x < extent; ++x) {
      const double low = coarse_at(static_cast<double>(y) / extent, static_cast<double>(x) / extent);
      const double fine = rng.uniform(-16.0, 16.0);
      for (int c = 0; c < 3; ++c) {
        const int v = static_cast<int>(std::lround(base + tint[c] + low + fine));
        img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
      }
    }
  return img;
}

ImageRecord make_image_record(const DatasetSpec& spec, const std::string& klass, const std::string& phase,
                              int id, std::uint64_t dataset_seed) {
  Rng rng(hash_combine(hash_combine(dataset_seed, fnv1a64(phase + "/" + klass)), static_cast<std::uint64_t>(id)));
  ImageRecord rec;
  rec.klass = klass;
  rec.phase = phase;
  rec.id = id;

  const int extent = spec.extent;
  const std::size_t total = static_cast<std::size_t>(extent) * extent;

  // distractors come from other classes in the dataset
  std::vector<std::string> others;
  for (const auto& c : spec.classes)
    if (c != klass) others.push_back(c);

  for (int attempt = 0; attempt < 24; ++attempt) {
    rec.targets.clear();
    rec.distractors.clear();
    const int n_targets = 1 + static_cast<int>(rng.uniform_int(3));
    const int n_distract = 1 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < n_targets; ++i) rec.targets.push_back(roll_instance(klass, extent, rng));
    for (int i = 0; i < n_distract; ++i) {
      const std::string& other = others[rng.uniform_int(others.size())];
      rec.distractors.push_back(roll_instance(other, extent, rng));
    }
    const auto mask = rasterize_mask(rec.targets, extent);
    std::size_t fg = 0;
    for (auto m : mask) fg += m;
    if (fg > 0 && fg * 2 <= total) return rec;
  }
  throw EvalError("could not place shapes within the foreground budget for class " + klass);
}

void render_record(const DatasetSpec& spec, const ImageRecord& rec, std::uint64_t dataset_seed,
                   ImageU8& image, ImageU8& mask_img) {
  // pixel-noise stream is separate from geometry so both stay reproducible
  Rng rng(hash_combine(
      hash_combine(dataset_seed, fnv1a64("px/" + rec.phase + "/" + rec.klass)), static_cast<std::uint64_t>(rec.id)));
  image = textured_background(spec.extent, rng);
  for (const auto& d : rec.distractors) draw_instance(image, d, rng);
  for (const auto& t : rec.targets) draw_instance(image, t, rng);

  const auto mask = rasterize_mask(rec.targets, spec.extent);
  mask_img.width = mask_img.height = spec.extent;
  mask_img.channels = 1;
  mask_img.pixels.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask_img.pixels[i] = mask[i] ? 255 : 0;
}

json spec_to_json(const DatasetSpec& spec) {
  return json{{"classes", spec.classes},
              {"fold_count", spec.fold_count},
              {"extent", spec.extent},
              {"train_per_class", spec.train_per_class},
              {"test_per_class", spec.test_per_class}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec spec;
  spec.classes = j.at("classes").get<std::vector<std::string>>();
  spec.fold_count = j.at("fold_count").get<int>();
  spec.extent = j.at("extent").get<int>();
  spec.train_per_class = j.at("train_per_class").get<int>();
  spec.test_per_class = j.at("test_per_class").get<int>();
  return spec;
}

json instance_to_json(const ShapeInstance& s) {
  return json{{"kind", s.kind},
              {"cx", s.cx},
              {"cy", s.cy},
              {"size", s.size},
              {"color", {s.color[0], s.color[1], s.color[2]}}};
}

ShapeInstance instance_from_json(const json& j) {
  ShapeInstance s;
  s.kind = j.at("kind").get<std::string>();
  s.cx = j.at("cx").get<double>();
  s.cy = j.at("cy").get<double>();
  s.size = j.at("size").get<double>();
  const auto col = j.at("color").get<std::vector<int>>();
  for (int i = 0; i < 3; ++i) s.color[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(col[static_cast<std::size_t>(i)]);
  return s;
}

}  // namespace

Manifest generate_dataset(const DatasetSpec& spec, std::uint64_t seed, const std::string& out_dir) {
  spec.validate();
  Manifest mf;
  mf.spec = spec;
  mf.seed = seed;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  for (const char* phase : {"train", "test"}) {
    const int count = std::string(phase) == "train" ? spec.train_per_class : spec.test_per_class;
    for (const auto& klass : spec.classes) {
      const fs::path cls_dir = fs::path(out_dir) / phase / klass;
      fs::create_directories(cls_dir, ec);
      if (ec) throw IoError("cannot create " + cls_dir.string() + ": " + ec.message());
      for (int id = 0; id < count; ++id) {
        ImageRecord rec = make_image_record(spec, klass, phase, id, seed);
        ImageU8 image, mask;
        render_record(spec, rec, seed, image, mask);
        write_png((cls_dir / ("img_" + std::to_string(id) + ".png")).string(), image);
        write_png((cls_dir / ("mask_" + std::to_string(id) + ".png")).string(), mask);
        mf.images.push_back(std::move(rec));
      }
    }
  }

  json j;
  j["seed"] = seed;
  j["spec"] = spec_to_json(spec);
  json imgs = json::array();
  for (const auto& rec : mf.images) {
    json r;
    r["class"] = rec.klass;
    r["phase"] = rec.phase;
    r["id"] = rec.id;
    json tg = json::array(), ds = json::array();
    for (const auto& t : rec.targets) tg.push_back(instance_to_json(t));
    for (const auto& d : rec.distractors) ds.push_back(instance_to_json(d));
    r["targets"] = tg;
    r["distractors"] = ds;
    imgs.push_back(std::move(r));
  }
  j["images"] = std::move(imgs);
  std::ofstream out(fs::path(out_dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + out_dir);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing manifest in " + out_dir);
  return mf;
}

Manifest read_manifest(const std::string& dir) {
  const fs::path p = fs::path(dir) / "manifest.json";
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
  Manifest mf;
  mf.seed = j.at("seed").get<std::uint64_t>();
  mf.spec = spec_from_json(j.at("spec"));
  for (const auto& r : j.at("images")) {
    ImageRecord rec;
    rec.klass = r.at("class").get<std::string>();
    rec.phase = r.at("phase").get<std::string>();
    rec.id = r.at("id").get<int>();
    for (const auto& t : r.at("targets")) rec.targets.push_back(instance_from_json(t));
    for (const auto& d : r.at("distractors")) rec.distractors.push_back(instance_from_json(d));
    mf.images.push_back(std::move(rec));
  }
  return mf;
}

// ---- loading ----------------------------------------------------------------------

const std::vector<Sample>& LoadedDataset::samples(const std::string& phase, const std::string& klass) const {
  auto pit = index.find(phase);
  if (pit == index.end()) throw ArgumentError("unknown phase '" + phase + "'");
  auto cit = pit->second.find(klass);
  if (cit == pit->second.end()) throw ArgumentError("unknown class '" + klass + "' in phase " + phase);
  return cit->second;
}

LoadedDataset load_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
  LoadedDataset ds;
  ds.root = dir;

  const bool have_manifest = fs::exists(fs::path(dir) / "manifest.json");
  if (have_manifest) {
    ds.spec = read_manifest(dir).spec;
  }

  std::set<std::string> class_names;
  for (const char* phase : {"train", "test"}) {
    const fs::path pdir = fs::path(dir) / phase;
    if (!fs::is_directory(pdir)) throw FormatError("missing phase directory " + pdir.string());
    for (const auto& cls_entry : fs::directory_iterator(pdir)) {
      if (!cls_entry.is_directory()) continue;
      const std::string klass = cls_entry.path().filename().string();
      class_names.insert(klass);
      auto& vec = ds.index[phase][klass];
      std::vector<std::string> img_files;
      for (const auto& f : fs::directory_iterator(cls_entry.path())) {
        const std::string name = f.path().filename().string();
        if (name.rfind("img_", 0) == 0 && name.size() > 8 && name.substr(name.size() - 4) == ".png")
          img_files.push_back(name);
      }
      std::sort(img_files.begin(), img_files.end(), [](const std::string& a, const std::string& b) {
        // numeric order on the id, so img_2 sorts before img_10
        const long ia = std::stol(a.substr(4, a.size() - 8));
        const long ib = std::stol(b.substr(4, b.size() - 8));
        return ia < ib;
      });
      for (const auto& name : img_files) {
        Sample s;
        s.image_path = (cls_entry.path() / name).string();
        const std::string mask_name = "mask_" + name.substr(4);
        s.mask_path = (cls_entry.path() / mask_name).string();
        if (!fs::exists(s.mask_path))
          throw FormatError("image " + s.image_path + " has no mask file " + mask_name);
        vec.push_back(std::move(s));
      }
    }
  }

  if (!have_manifest) {
    // compatible external tree: classes in sorted order, extent probed lazily
    ds.spec.classes.assign(class_names.begin(), class_names.end());
    if (!ds.spec.classes.empty() && static_cast<int>(ds.spec.classes.size()) % 3 == 0)
      ds.spec.fold_count = 3;
    ds.spec.extent = 0;  // unknown until a sample is decoded
    ds.spec.train_per_class = 0;
    ds.spec.test_per_class = 0;
  } else {
    for (const auto& klass : ds.spec.classes)
      for (const char* phase : {"train", "test"})
        if (ds.index[phase].find(klass) == ds.index[phase].end())
          throw FormatError("manifest class '" + klass + "' missing from " + std::string(phase) + " tree");
  }
  return ds;
}

// ---- sampling ---------------------------------------------------------------------

EpisodeRef sample_episode_ref(const LoadedDataset& ds, int fold, Phase phase, int shots,
                              std::uint64_t seed, std::uint64_t index) {
  if (shots < 1) throw ArgumentError("shots must be >= 1");
  const auto eligible = phase == Phase::train ? ds.spec.non_fold_classes(fold) : ds.spec.fold_classes(fold);
  if (eligible.empty()) throw SamplingError("no eligible classes for fold " + std::to_string(fold));

  Rng rng(hash_combine(seed, index));
  EpisodeRef ref;
  ref.phase = phase_name(phase);
  ref.klass = eligible[rng.uniform_int(eligible.size())];
  const auto& pool = ds.samples(ref.phase, ref.klass);
  const int n = static_cast<int>(pool.size());
  if (n < shots + 1)
    throw SamplingError("class '" + ref.klass + "' has " + std::to_string(n) + " samples, needs " +
                        std::to_string(shots + 1));
  auto picks = rng.sample_distinct(n, shots + 1);
  ref.query_id = picks.back();
  picks.pop_back();
  ref.support_ids = std::move(picks);
  return ref;
}

SamplePair<float> load_sample_pair(const Sample& s) {
  const ImageU8 img = read_png(s.image_path, 3);
  const ImageU8 msk = read_png(s.mask_path, 1);
  if (img.width != msk.width || img.height != msk.height)
    throw FormatError("image/mask extent mismatch for " + s.image_path);
  SamplePair<float> out;
  out.image = Tensor<float>({3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        out.image(c, y, x) = static_cast<float>(img.at(y, x, c)) / 255.0f;
  out.mask = Tensor<float>({msk.height, msk.width});
  for (int y = 0; y < msk.height; ++y)
    for (int x = 0; x < msk.width; ++x) out.mask(y, x) = msk.at(y, x, 0) > 127 ? 1.0f : 0.0f;
  return out;
}

Episode<float> materialize_episode(const LoadedDataset& ds, const EpisodeRef& ref) {
  const auto& pool = ds.samples(ref.phase, ref.klass);
  Episode<float> ep;
  ep.class_name = ref.klass;
  for (int id : ref.support_ids) {
    auto pair = load_sample_pair(pool[static_cast<std::size_t>(id)]);
    float fg = 0;
    for (float v : pair.mask.data) fg += v;
    if (fg < 1.0f) throw SamplingError("support sample " + pool[static_cast<std::size_t>(id)].mask_path +
                                       " has no foreground");
    ep.support.push_back(std::move(pair));
  }
  ep.query = load_sample_pair(pool[static_cast<std::size_t>(ref.query_id)]);
  return ep;
}

}  // namespace hse
