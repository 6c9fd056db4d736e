#include "hse/snapshot.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace hse {

namespace {

constexpr char kMagic[4] = {'H', 'S', 'E', 'B'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

float get_f32_checked(std::istream& in, const std::string& path) {
  std::uint32_t bits;
  if (!get_u32(in, bits)) throw FormatError(path + ": truncated tensor payload");
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

// __config__ payload layout (floats, in order)
enum ConfigField {
  kRev = 0,
  kInChannels,
  kMidChannels,
  kHighChannels,
  kMidFactor,
  kHighFactor,
  kCt,
  kProjector,
  kHeads,
  kDecoderDepth,
  kSdiTokenRepeat,
  kTrainBackbone,
  kSdiKind,
  kGcmKind,
  kConfigFields
};

}  // namespace

void save_named_tensors(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data) put_f32(out, v);
  }
  if (!out) throw IoError("failed writing " + path);
}

std::vector<std::pair<std::string, Tensor<float>>> load_named_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path + ": not an HSEB parameter snapshot");
  std::uint32_t version;
  if (!get_u32(in, version) || version != kVersion)
    throw FormatError(path + ": unsupported snapshot version");

  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (;;) {
    std::uint32_t name_len;
    if (!get_u32(in, name_len)) break;  // clean EOF
    if (name_len == 0 || name_len > 4096) throw FormatError(path + ": implausible name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len)) throw FormatError(path + ": truncated name");
    std::uint32_t rank;
    if (!get_u32(in, rank) || rank > 8) throw FormatError(path + ": bad tensor rank");
    std::vector<int> shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint32_t e;
      if (!get_u32(in, e) || e == 0) throw FormatError(path + ": bad extent");
      shape.push_back(static_cast<int>(e));
      numel *= e;
    }
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < numel; ++i) t.data[i] = get_f32_checked(in, path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void save_model(const std::string& path, const ModelParams<float>& model, const VariantConfig& variant) {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  Tensor<float> cfg({static_cast<int>(kConfigFields)});
  const ModelConfig& c = model.cfg;
  cfg(kRev) = 1;
  cfg(kInChannels) = static_cast<float>(c.backbone.in_channels);
  cfg(kMidChannels) = static_cast<float>(c.backbone.mid_channels);
  cfg(kHighChannels) = static_cast<float>(c.backbone.high_channels);
  cfg(kMidFactor) = static_cast<float>(c.backbone.mid_factor);
  cfg(kHighFactor) = static_cast<float>(c.backbone.high_factor);
  cfg(kCt) = static_cast<float>(c.ct);
  cfg(kProjector) = static_cast<float>(c.projector);
  cfg(kHeads) = static_cast<float>(c.heads);
  cfg(kDecoderDepth) = static_cast<float>(c.decoder_depth);
  cfg(kSdiTokenRepeat) = static_cast<float>(c.sdi_token_repeat);
  cfg(kTrainBackbone) = c.train_backbone ? 1.0f : 0.0f;
  cfg(kSdiKind) = static_cast<float>(variant.sdi);
  cfg(kGcmKind) = static_cast<float>(variant.gcm);
  tensors.emplace_back("__config__", std::move(cfg));

  ModelParams<float>& m = const_cast<ModelParams<float>&>(model);
  for_each_param(m, [&](const std::string& name, Tensor<float>& t, ParamGroup) {
    tensors.emplace_back(name, t);
  });
  save_named_tensors(path, tensors);
}

std::pair<ModelParams<float>, VariantConfig> load_model(const std::string& path) {
  auto tensors = load_named_tensors(path);
  const Tensor<float>* cfg_t = nullptr;
  for (const auto& [name, t] : tensors)
    if (name == "__config__") cfg_t = &t;
  if (!cfg_t || cfg_t->numel() < kConfigFields) throw FormatError(path + ": missing __config__ record");

  ModelConfig cfg;
  cfg.backbone.in_channels = static_cast<int>((*cfg_t)(kInChannels));
  cfg.backbone.mid_channels = static_cast<int>((*cfg_t)(kMidChannels));
  cfg.backbone.high_channels = static_cast<int>((*cfg_t)(kHighChannels));
  cfg.backbone.mid_factor = static_cast<int>((*cfg_t)(kMidFactor));
  cfg.backbone.high_factor = static_cast<int>((*cfg_t)(kHighFactor));
  cfg.ct = static_cast<int>((*cfg_t)(kCt));
  cfg.projector = static_cast<ProjectorKind>(static_cast<int>((*cfg_t)(kProjector)));
  cfg.heads = static_cast<int>((*cfg_t)(kHeads));
  cfg.decoder_depth = static_cast<int>((*cfg_t)(kDecoderDepth));
  cfg.sdi_token_repeat = static_cast<int>((*cfg_t)(kSdiTokenRepeat));
  cfg.train_backbone = (*cfg_t)(kTrainBackbone) != 0.0f;
  VariantConfig variant;
  variant.sdi = static_cast<SdiKind>(static_cast<int>((*cfg_t)(kSdiKind)));
  variant.gcm = static_cast<GcmKind>(static_cast<int>((*cfg_t)(kGcmKind)));

  ModelParams<float> model = build_model<float>(cfg, 0);
  std::size_t filled = 0;
  for_each_param(model, [&](const std::string& name, Tensor<float>& t, ParamGroup) {
    for (auto& [fname, ft] : tensors) {
      if (fname != name) continue;
      if (ft.shape != t.shape)
        throw FormatError(path + ": tensor '" + name + "' has shape " + shape_str(ft.shape) +
                          ", expected " + shape_str(t.shape));
      t = ft;
      ++filled;
      return;
    }
    throw FormatError(path + ": missing tensor '" + name + "'");
  });
  if (filled + 1 != tensors.size())
    throw FormatError(path + ": snapshot contains tensors unknown to this architecture");
  return {std::move(model), variant};
}

}  // namespace hse
