#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hse/backbone.hpp"
#include "hse/episodes.hpp"
#include "hse/ops.hpp"
#include "hse/semantics.hpp"
#include "hse/tensor.hpp"

// The segmentation pipeline: masked prototype extraction, correlation prior
// masks, spatial dense interaction (SDI) between support features and the
// projected class embedding, global content modulation (GCM), decoding, loss,
// and K-shot merging.

namespace hse {

// ---- variants -----------------------------------------------------------------

enum class SdiKind { off, sd1, sd2, sd3 };
enum class GcmKind { off, gc1, gc2 };

struct VariantConfig {
  SdiKind sdi = SdiKind::sd3;
  GcmKind gcm = GcmKind::gc2;

  static VariantConfig parse(const std::string& s);
  std::string str() const;
};

inline const char* sdi_kind_name(SdiKind k) {
  switch (k) {
    case SdiKind::off: return "off";
    case SdiKind::sd1: return "sd1";
    case SdiKind::sd2: return "sd2";
    case SdiKind::sd3: return "sd3";
  }
  return "?";
}
inline const char* gcm_kind_name(GcmKind k) {
  switch (k) {
    case GcmKind::off: return "off";
    case GcmKind::gc1: return "gc1";
    case GcmKind::gc2: return "gc2";
  }
  return "?";
}

inline VariantConfig VariantConfig::parse(const std::string& s) {
  auto comma = s.find(',');
  if (comma == std::string::npos) throw ArgumentError("variant must look like sd3,gc2 — got '" + s + "'");
  const std::string a = s.substr(0, comma), b = s.substr(comma + 1);
  VariantConfig v;
  if (a == "off") v.sdi = SdiKind::off;
  else if (a == "sd1") v.sdi = SdiKind::sd1;
  else if (a == "sd2") v.sdi = SdiKind::sd2;
  else if (a == "sd3") v.sdi = SdiKind::sd3;
  else throw ArgumentError("unknown sdi kind '" + a + "'");
  if (b == "off") v.gcm = GcmKind::off;
  else if (b == "gc1") v.gcm = GcmKind::gc1;
  else if (b == "gc2") v.gcm = GcmKind::gc2;
  else throw ArgumentError("unknown gcm kind '" + b + "'");
  return v;
}

inline std::string VariantConfig::str() const {
  return std::string(sdi_kind_name(sdi)) + "," + gcm_kind_name(gcm);
}

// ---- parameter blocks -----------------------------------------------------------

// Single-head self-attention over the token dimension; square projections in
// feature space.
template <typename T>
struct InteractorParams {
  Tensor<T> wq, wk, wv, wo;  // [C, C] each
};

// Two affine layers (2C -> C -> C) with ReLU between and sigmoid on top,
// producing the channel enhancement coefficient w in (0,1)^C.
template <typename T>
struct ModulatorParams {
  AffineLayer<T> a1;  // [C, 2C]
  AffineLayer<T> a2;  // [C, C]
};

template <typename T>
struct DecoderParams {
  std::vector<ConvLayer<T>> blocks;  // 3x3, width C
  ConvLayer<T> head;                 // 1x1 -> 2 logits
};

struct ModelConfig {
  BackboneConfig backbone;
  int ct = 16;  // CD embedding dimension
  ProjectorKind projector = ProjectorKind::linear;
  int heads = 1;
  int decoder_depth = 2;
  int sdi_token_repeat = 0;  // 0 -> repeat W times (token count HW+W); else explicit count
  bool train_backbone = false;

  void validate() const {
    backbone.validate();
    if (ct < 2) throw ConfigError("embedding dimension must be >= 2");
    if (heads < 1 || backbone.mid_channels % heads != 0)
      throw ConfigError("heads must divide the mid channel count");
    if (decoder_depth < 1) throw ConfigError("decoder depth must be >= 1");
    if (sdi_token_repeat < 0) throw ConfigError("sdi token repeat must be >= 0");
  }
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  BackboneParams<T> backbone;
  ProjectorParams<T> proj_spatial, proj_channel;
  InteractorParams<T> interactor;
  ModulatorParams<T> modulator;
  DecoderParams<T> decoder;
};

template <typename T>
ModelParams<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> m;
  m.cfg = cfg;
  const int c = cfg.backbone.mid_channels;
  m.backbone = build_backbone<T>(cfg.backbone, seed);
  m.proj_spatial = build_projector<T>(cfg.projector, cfg.ct, c, seed, "proj_spatial");
  m.proj_channel = build_projector<T>(cfg.projector, cfg.ct, c, seed, "proj_channel");
  m.interactor.wq = scaled_uniform_init<T>({c, c}, c, c, seed, "interactor.wq");
  m.interactor.wk = scaled_uniform_init<T>({c, c}, c, c, seed, "interactor.wk");
  m.interactor.wv = scaled_uniform_init<T>({c, c}, c, c, seed, "interactor.wv");
  m.interactor.wo = scaled_uniform_init<T>({c, c}, c, c, seed, "interactor.wo");
  m.modulator.a1 = make_affine_layer<T>(c, 2 * c, seed, "modulator.a1");
  m.modulator.a2 = make_affine_layer<T>(c, c, seed, "modulator.a2");
  int din = 2 * c + 1;
  for (int i = 0; i < cfg.decoder_depth; ++i) {
    m.decoder.blocks.push_back(make_conv_layer<T>(c, din, 3, seed, "decoder.b" + std::to_string(i)));
    din = c;
  }
  m.decoder.head.w = scaled_uniform_init<T>({2, c, 1, 1}, c, 2, seed, "decoder.head.w");
  m.decoder.head.b = Tensor<T>::zeros({2});
  return m;
}

// ---- parameter enumeration -------------------------------------------------------

enum class ParamGroup { backbone, proj_spatial, proj_channel, interactor, modulator, decoder };

inline bool group_active(ParamGroup g, const VariantConfig& v) {
  switch (g) {
    case ParamGroup::backbone: return true;
    case ParamGroup::decoder: return true;
    case ParamGroup::proj_spatial: return v.sdi != SdiKind::off;
    case ParamGroup::interactor: return v.sdi == SdiKind::sd3;
    case ParamGroup::proj_channel: return v.gcm != GcmKind::off;
    case ParamGroup::modulator: return v.gcm != GcmKind::off;
  }
  return false;
}

inline bool group_trainable(ParamGroup g, const ModelConfig& cfg) {
  return g != ParamGroup::backbone || cfg.train_backbone;
}

// Visit every parameter tensor as (name, tensor, group). Order is fixed and
// part of the snapshot contract.
template <typename Model, typename F>
void for_each_param(Model& m, F&& fn) {
  for (std::size_t i = 0; i < m.backbone.mid_blocks.size(); ++i) {
    fn("backbone.mid" + std::to_string(i) + ".w", m.backbone.mid_blocks[i].w, ParamGroup::backbone);
    fn("backbone.mid" + std::to_string(i) + ".b", m.backbone.mid_blocks[i].b, ParamGroup::backbone);
  }
  for (std::size_t i = 0; i < m.backbone.high_blocks.size(); ++i) {
    fn("backbone.high" + std::to_string(i) + ".w", m.backbone.high_blocks[i].w, ParamGroup::backbone);
    fn("backbone.high" + std::to_string(i) + ".b", m.backbone.high_blocks[i].b, ParamGroup::backbone);
  }
  auto visit_proj = [&](auto& proj, const std::string& base, ParamGroup g) {
    for (std::size_t i = 0; i < proj.layers.size(); ++i) {
      fn(base + ".l" + std::to_string(i) + ".w", proj.layers[i].w, g);
      fn(base + ".l" + std::to_string(i) + ".b", proj.layers[i].b, g);
    }
  };
  visit_proj(m.proj_spatial, "proj_spatial", ParamGroup::proj_spatial);
  visit_proj(m.proj_channel, "proj_channel", ParamGroup::proj_channel);
  fn("interactor.wq", m.interactor.wq, ParamGroup::interactor);
  fn("interactor.wk", m.interactor.wk, ParamGroup::interactor);
  fn("interactor.wv", m.interactor.wv, ParamGroup::interactor);
  fn("interactor.wo", m.interactor.wo, ParamGroup::interactor);
  fn("modulator.a1.w", m.modulator.a1.w, ParamGroup::modulator);
  fn("modulator.a1.b", m.modulator.a1.b, ParamGroup::modulator);
  fn("modulator.a2.w", m.modulator.a2.w, ParamGroup::modulator);
  fn("modulator.a2.b", m.modulator.a2.b, ParamGroup::modulator);
  for (std::size_t i = 0; i < m.decoder.blocks.size(); ++i) {
    fn("decoder.b" + std::to_string(i) + ".w", m.decoder.blocks[i].w, ParamGroup::decoder);
    fn("decoder.b" + std::to_string(i) + ".b", m.decoder.blocks[i].b, ParamGroup::decoder);
  }
  fn("decoder.head.w", m.decoder.head.w, ParamGroup::decoder);
  fn("decoder.head.b", m.decoder.head.b, ParamGroup::decoder);
}

// Copy of the model with the trainable parameters of variant-active groups
// registered on the tape. Inactive or frozen groups stay constants, so their
// ops never record and no gradient can reach them.
template <typename T>
ModelParams<T> watch_params(Tape<T>& tape, const ModelParams<T>& m, const VariantConfig& v) {
  ModelParams<T> out = m;
  for_each_param(out, [&](const std::string&, Tensor<T>& t, ParamGroup g) {
    if (group_active(g, v) && group_trainable(g, out.cfg)) t = tape.watch(std::move(t));
  });
  return out;
}

// ---- mask resizing ----------------------------------------------------------------

// Bilinear mask rescale; soft values for decoder input, thresholded at 0.5
// for pooling and prior foreground selection.
template <typename T>
Tensor<T> resize_mask_soft(const Tensor<T>& mask, int h, int w) {
  if (mask.rank() != 2) throw DimensionError("mask must be [H,W], got " + shape_str(mask.shape));
  if (mask.shape[0] == h && mask.shape[1] == w) return mask;
  Tensor<T> as3 = mask;
  as3.shape = {1, mask.shape[0], mask.shape[1]};
  Tensor<T> r = bilinear_resize<T>(nullptr, as3, h, w);
  r.shape = {h, w};
  return r;
}

template <typename T>
Tensor<T> threshold_mask(const Tensor<T>& mask, T thresh = T(0.5)) {
  Tensor<T> out(mask.shape);
  for (std::size_t i = 0; i < mask.numel(); ++i) out.data[i] = mask.data[i] > thresh ? T(1) : T(0);
  return out;
}

template <typename T>
Tensor<T> resize_mask_binary(const Tensor<T>& mask, int h, int w) {
  return threshold_mask(resize_mask_soft(mask, h, w));
}

// ---- prototypes ---------------------------------------------------------------------

// Foreground-average feature vector; empty foreground yields a zero vector
// and raises the flag instead of failing the episode.
template <typename T>
struct Prototype {
  Tensor<T> vec;  // [C]
  bool empty_foreground = false;
};

template <typename T>
Prototype<T> masked_avg_pool(Tape<T>* tape, const Tensor<T>& f, const Tensor<T>& mask) {
  Prototype<T> p;
  p.vec = masked_mean_hw(tape, f, mask);
  T s = T(0);
  for (T v : mask.data) s += v;
  p.empty_foreground = s <= T(0);
  return p;
}

template <typename T>
Prototype<T> general_prototype(Tape<T>* tape, const Tensor<T>& sdi_features, const Tensor<T>& mask) {
  return masked_avg_pool(tape, sdi_features, mask);
}

// ---- prior mask ----------------------------------------------------------------------

// Max cosine response of each query position against the support foreground,
// rescaled to the requested extent and min-max normalized to [0,1]. Constant
// responses (including empty foreground) give an all-zero map. Not
// differentiated: the high-level features feeding it are frozen.
template <typename T>
Tensor<T> prior_mask(const Tensor<T>& fs_high, const Tensor<T>& fq_high, const Tensor<T>& support_mask,
                     int out_h, int out_w) {
  if (fs_high.rank() != 3 || !fs_high.same_shape(fq_high))
    throw DimensionError("prior_mask feature shapes " + shape_str(fs_high.shape) + " vs " +
                         shape_str(fq_high.shape));
  const int c = fs_high.shape[0], h = fs_high.shape[1], w = fs_high.shape[2];
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor<T> mask = resize_mask_binary(support_mask, h, w);

  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < hw; ++i)
    if (mask.data[i] > T(0.5)) fg.push_back(i);

  Tensor<T> raw({h, w});
  if (!fg.empty()) {
    std::vector<T> snorm(fg.size());
    for (std::size_t j = 0; j < fg.size(); ++j) {
      T acc = T(0);
      for (int ci = 0; ci < c; ++ci) {
        const T v = fs_high.data[static_cast<std::size_t>(ci) * hw + fg[j]];
        acc += v * v;
      }
      snorm[j] = std::sqrt(acc);
    }
    for (std::size_t i = 0; i < hw; ++i) {
      T qacc = T(0);
      for (int ci = 0; ci < c; ++ci) {
        const T v = fq_high.data[static_cast<std::size_t>(ci) * hw + i];
        qacc += v * v;
      }
      const T qn = std::sqrt(qacc);
      T best = T(0);
      bool first = true;
      for (std::size_t j = 0; j < fg.size(); ++j) {
        T cosv = T(0);
        if (qn > T(0) && snorm[j] > T(0)) {
          T dot = T(0);
          for (int ci = 0; ci < c; ++ci)
            dot += fq_high.data[static_cast<std::size_t>(ci) * hw + i] *
                   fs_high.data[static_cast<std::size_t>(ci) * hw + fg[j]];
          cosv = dot / (qn * snorm[j]);
        }
        if (first || cosv > best) {
          best = cosv;
          first = false;
        }
      }
      raw.data[i] = best;
    }
  }

  Tensor<T> resized = resize_mask_soft(raw, out_h, out_w);
  // min-max normalize; resize commutes with the affine rescale, so
  // normalizing once here matches normalize-then-resize up to the exact
  // attainment of 0 and 1
  T mn = resized.data[0], mx = resized.data[0];
  for (T v : resized.data) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (!(mx - mn > T(1e-12))) return Tensor<T>::zeros({out_h, out_w});
  for (auto& v : resized.data) v = (v - mn) / (mx - mn);
  return resized;
}

// ---- spatial dense interaction ----------------------------------------------------

// Extended token count for sd3: HW visual tokens plus the repeated embedding
// token (W copies by default).
inline int sdi_token_count(int h, int w, int token_repeat = 0) {
  return h * w + (token_repeat > 0 ? token_repeat : w);
}

// sd3 appends repeated projected-embedding tokens to the flattened support
// feature tokens (HW + repeat columns), runs residual self-attention over all
// tokens, and keeps the visual ones. sd1/sd2 are the additive/multiplicative
// fallbacks; off passes the features through.
template <typename T>
Tensor<T> sdi(Tape<T>* tape, const Tensor<T>& f_s, const Tensor<T>& t_spatial,
              const InteractorParams<T>& ip, SdiKind kind, int heads = 1, int token_repeat = 0) {
  if (f_s.rank() != 3) throw DimensionError("sdi expects [C,H,W], got " + shape_str(f_s.shape));
  if (kind == SdiKind::off) return f_s;
  const int c = f_s.shape[0], h = f_s.shape[1], w = f_s.shape[2];
  if (t_spatial.rank() != 1 || t_spatial.shape[0] != c)
    throw DimensionError("sdi embedding " + shape_str(t_spatial.shape) + " vs C=" + std::to_string(c));
  if (kind == SdiKind::sd1) return add(tape, f_s, t_spatial);
  if (kind == SdiKind::sd2) return mul(tape, f_s, t_spatial);

  const int hw = h * w;
  const int rep = token_repeat > 0 ? token_repeat : w;
  Tensor<T> fs_flat = reshape(tape, f_s, {c, hw});
  Tensor<T> sem = tile_channel(tape, t_spatial, {rep});          // [C, rep]
  Tensor<T> tokens = concat(tape, {fs_flat, sem}, 1);            // [C, HW+rep]
  Tensor<T> x = transpose2d(tape, tokens);                       // [N, C], tokens as rows

  Tensor<T> q = matmul(tape, x, ip.wq);
  Tensor<T> k = matmul(tape, x, ip.wk);
  Tensor<T> v = matmul(tape, x, ip.wv);

  const int dh = c / heads;
  std::vector<Tensor<T>> head_outs;
  for (int hd = 0; hd < heads; ++hd) {
    Tensor<T> qh = heads == 1 ? q : slice(tape, q, 1, hd * dh, dh);
    Tensor<T> kh = heads == 1 ? k : slice(tape, k, 1, hd * dh, dh);
    Tensor<T> vh = heads == 1 ? v : slice(tape, v, 1, hd * dh, dh);
    Tensor<T> scores = scale(tape, matmul(tape, qh, transpose2d(tape, kh)), 1.0 / std::sqrt(double(dh)));
    Tensor<T> attn = softmax_lastdim(tape, scores);  // softmax over keys
    head_outs.push_back(matmul(tape, attn, vh));
  }
  Tensor<T> attended = heads == 1 ? head_outs[0] : concat(tape, head_outs, 1);
  Tensor<T> o = matmul(tape, attended, ip.wo);
  Tensor<T> y = add(tape, x, o);  // residual over all tokens

  Tensor<T> back = transpose2d(tape, y);            // [C, N]
  Tensor<T> kept = slice(tape, back, 1, 0, hw);     // visual tokens only
  return reshape(tape, kept, {c, h, w});
}

// ---- global content modulation ------------------------------------------------------

template <typename T>
Tensor<T> gcm_coefficient(Tape<T>* tape, const Tensor<T>& p, const Tensor<T>& t_channel,
                          const ModulatorParams<T>& mp) {
  Tensor<T> cat = concat(tape, {p, t_channel}, 0);  // [2C]
  Tensor<T> hdn = relu(tape, affine(tape, mp.a1.w, mp.a1.b, cat));
  return sigmoid(tape, affine(tape, mp.a2.w, mp.a2.b, hdn));
}

// gc2: x*w + t_channel on the prototype and on every query pixel (channel
// broadcast); gc1 drops the +t term; off passes both through.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> gcm_modulate(Tape<T>* tape, const Tensor<T>& p_gen, const Tensor<T>& f_q,
                                             const Tensor<T>& w, const Tensor<T>& t_channel, GcmKind kind) {
  if (kind == GcmKind::off) return {p_gen, f_q};
  Tensor<T> pm = mul(tape, p_gen, w);
  Tensor<T> fm = mul(tape, f_q, w);
  if (kind == GcmKind::gc2) {
    pm = add(tape, pm, t_channel);
    fm = add(tape, fm, t_channel);
  }
  return {pm, fm};
}

// ---- decoder -------------------------------------------------------------------------

// Tile the prototype over the grid, stack [prototype ; query ; prior], run the
// conv stack, project to 2 logit channels, and upsample to image extent.
template <typename T>
Tensor<T> decode(Tape<T>* tape, const Tensor<T>& p_mod, const Tensor<T>& f_q_mod, const Tensor<T>& prior,
                 const DecoderParams<T>& dp, int out_h, int out_w) {
  if (f_q_mod.rank() != 3) throw DimensionError("decode query features must be [C,H,W]");
  const int h = f_q_mod.shape[1], w = f_q_mod.shape[2];
  if (prior.rank() != 2 || prior.shape[0] != h || prior.shape[1] != w)
    throw DimensionError("decode prior " + shape_str(prior.shape) + " vs features " + shape_str(f_q_mod.shape));
  Tensor<T> tiled = tile_channel(tape, p_mod, {h, w});
  Tensor<T> prior3 = prior;
  prior3.shape = {1, h, w};
  Tensor<T> x = concat(tape, {tiled, f_q_mod, prior3}, 0);  // [2C+1, H, W]
  for (const auto& blk : dp.blocks) x = relu(tape, add(tape, conv2d(tape, x, blk.w, 1, 1), blk.b));
  Tensor<T> logits = add(tape, conv2d(tape, x, dp.head.w, 1, 0), dp.head.b);
  return bilinear_resize(tape, logits, out_h, out_w);
}

template <typename T>
Tensor<T> bce_loss(Tape<T>* tape, const Tensor<T>& logits, const Tensor<T>& query_mask) {
  return bce2(tape, logits, query_mask);
}

// Elementwise mean across shots (prototypes or prior maps).
template <typename T>
Tensor<T> kshot_merge(Tape<T>* tape, const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ArgumentError("kshot_merge of an empty list");
  for (const auto& t : items)
    if (!t.same_shape(items[0]))
      throw DimensionError("kshot_merge shape mismatch: " + shape_str(t.shape) + " vs " +
                           shape_str(items[0].shape));
  return mean_tensors(tape, items);
}

// ---- full episode --------------------------------------------------------------------

template <typename T>
struct EpisodeForward {
  Tensor<T> logits;  // [2, H0, W0]
  Tensor<T> loss;    // scalar; tracked on the tape when training
  Tensor<T> prior;   // [H, W] merged soft prior
  bool has_loss = false;
  bool empty_foreground = false;
};

// Composition of the whole pipeline for one episode: features, per-shot
// prototypes and priors, shot merging, SDI, GCM, decoding, and loss. Pure in
// (params, variant, episode, embeddings).
template <typename T>
EpisodeForward<T> forward_episode(Tape<T>* tape, const ModelParams<T>& m, const VariantConfig& var,
                                  const Episode<T>& ep, const std::vector<ClassEmbedding>& embeddings,
                                  bool with_loss = true) {
  if (ep.support.empty()) throw ArgumentError("episode has no support pairs");
  const ClassEmbedding* emb = nullptr;
  for (const auto& e : embeddings)
    if (e.name == ep.class_name) emb = &e;
  if (!emb) throw ArgumentError("no embedding for class '" + ep.class_name + "'");
  if (static_cast<int>(emb->vector.size()) != m.cfg.ct)
    throw DimensionError("embedding dim " + std::to_string(emb->vector.size()) + " vs configured C_t " +
                         std::to_string(m.cfg.ct));

  Tensor<T> t_emb({m.cfg.ct});
  for (int i = 0; i < m.cfg.ct; ++i) t_emb.data[static_cast<std::size_t>(i)] = static_cast<T>(emb->vector[static_cast<std::size_t>(i)]);

  Tape<T>* btape = m.cfg.train_backbone ? tape : nullptr;
  FeaturePair<T> fq = extract_features(btape, m.backbone, ep.query.image);
  const int c = m.cfg.backbone.mid_channels;
  (void)c;
  const int mh = fq.mid.shape[1], mw = fq.mid.shape[2];
  const int h0 = ep.query.image.shape[1], w0 = ep.query.image.shape[2];

  Tensor<T> t_spatial, t_channel;
  if (var.sdi != SdiKind::off) t_spatial = project(tape, m.proj_spatial, t_emb);
  if (var.gcm != GcmKind::off) t_channel = project(tape, m.proj_channel, t_emb);

  std::vector<Tensor<T>> protos, gen_protos, priors;
  bool empty_fg = false;
  for (const auto& shot : ep.support) {
    FeaturePair<T> fs = extract_features(btape, m.backbone, shot.image);
    Tensor<T> mid_mask = resize_mask_binary(shot.mask, mh, mw);

    Prototype<T> p = masked_avg_pool(tape, fs.mid, mid_mask);
    empty_fg = empty_fg || p.empty_foreground;
    protos.push_back(p.vec);

    priors.push_back(prior_mask(fs.high, fq.high, shot.mask, mh, mw));

    Tensor<T> interacted = sdi(tape, fs.mid, t_spatial, m.interactor, var.sdi, m.cfg.heads,
                               m.cfg.sdi_token_repeat);
    Prototype<T> pg = general_prototype(tape, interacted, mid_mask);
    empty_fg = empty_fg || pg.empty_foreground;
    gen_protos.push_back(pg.vec);
  }

  Tensor<T> p = kshot_merge(tape, protos);
  Tensor<T> p_gen = kshot_merge(tape, gen_protos);
  Tensor<T> prior = kshot_merge<T>(nullptr, priors);

  Tensor<T> p_use = p_gen, fq_use = fq.mid;
  if (var.gcm != GcmKind::off) {
    Tensor<T> w = gcm_coefficient(tape, p, t_channel, m.modulator);
    auto mod = gcm_modulate(tape, p_gen, fq.mid, w, t_channel, var.gcm);
    p_use = mod.first;
    fq_use = mod.second;
  }

  EpisodeForward<T> out;
  out.logits = decode(tape, p_use, fq_use, prior, m.decoder, h0, w0);
  out.prior = prior;
  out.empty_foreground = empty_fg;
  if (with_loss) {
    out.loss = bce_loss(tape, out.logits, ep.query.mask);
    out.has_loss = true;
  }
  return out;
}

// Binary prediction from decoded logits: argmax over the two channels.
template <typename T>
Tensor<T> predict_mask(const Tensor<T>& logits) {
  if (logits.rank() != 3 || logits.shape[0] != 2)
    throw DimensionError("predict_mask expects [2,H,W], got " + shape_str(logits.shape));
  const std::size_t hw = static_cast<std::size_t>(logits.shape[1]) * logits.shape[2];
  Tensor<T> out({logits.shape[1], logits.shape[2]});
  for (std::size_t i = 0; i < hw; ++i) out.data[i] = logits.data[hw + i] > logits.data[i] ? T(1) : T(0);
  return out;
}

}  // namespace hse
