#include "hse/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "hse/parallel.hpp"

namespace hse {

using nlohmann::json;

// ---- sgd ------------------------------------------------------------------------

void sgd_step(ModelParams<float>& model, const GradMap& grads, const TrainConfig& cfg,
              VelocityState& velocity, double lr_now) {
  for_each_param(model, [&](const std::string& name, Tensor<float>& t, ParamGroup) {
    auto git = grads.find(name);
    if (git == grads.end()) return;
    const std::vector<float>& g = git->second;
    if (g.size() != t.numel())
      throw std::logic_error("internal error: gradient size " + std::to_string(g.size()) +
                             " vs parameter '" + name + "' " + shape_str(t.shape));
    auto& v = velocity[name];
    if (v.empty()) v.assign(t.numel(), 0.0f);
    const float mom = static_cast<float>(cfg.momentum);
    const float wd = static_cast<float>(cfg.weight_decay);
    const float lr = static_cast<float>(lr_now);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      v[i] = mom * v[i] + (g[i] + wd * t.data[i]);
      t.data[i] -= lr * v[i];
    }
  });
}

// ---- training --------------------------------------------------------------------

namespace {

GradMap collect_grads(Tape<float>& tape, ModelParams<float>& watched) {
  GradMap out;
  for_each_param(watched, [&](const std::string& name, Tensor<float>& t, ParamGroup) {
    if (t.node >= 0) out[name] = tape.grad(t);
  });
  return out;
}

std::vector<std::pair<std::string, Tensor<float>>> frozen_snapshot(ModelParams<float>& model) {
  std::vector<std::pair<std::string, Tensor<float>>> snap;
  for_each_param(model, [&](const std::string& name, Tensor<float>& t, ParamGroup g) {
    if (!group_trainable(g, model.cfg)) snap.emplace_back(name, t);
  });
  return snap;
}

}  // namespace

TrainResult train(const LoadedDataset& ds, const TrainConfig& cfg, ModelParams<float>& model,
                  const std::vector<ClassEmbedding>& embeddings) {
  cfg.validate();
  TrainResult result;
  VelocityState velocity;
  auto frozen_before = cfg.paranoid_frozen_check ? frozen_snapshot(model) : decltype(frozen_snapshot(model)){};

  const int total_steps = cfg.epochs * ((cfg.episodes_per_epoch + cfg.batch - 1) / cfg.batch);
  int step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    int epoch_count = 0;
    for (int start = 0; start < cfg.episodes_per_epoch; start += cfg.batch) {
      const int bn = std::min(cfg.batch, cfg.episodes_per_epoch - start);
      std::vector<GradMap> grads(static_cast<std::size_t>(bn));
      std::vector<double> losses(static_cast<std::size_t>(bn), 0.0);

      parallel_for(bn, cfg.threads, [&](int bi) {
        const std::uint64_t index = static_cast<std::uint64_t>(epoch) * cfg.episodes_per_epoch + start + bi;
        Episode<float> ep = sample_episode(ds, cfg.fold, Phase::train, cfg.shots, cfg.train_seed, index);
        Tape<float> tape;
        ModelParams<float> watched = watch_params(tape, model, cfg.variant);
        EpisodeForward<float> fwd = forward_episode(&tape, watched, cfg.variant, ep, embeddings, true);
        tape.backward(fwd.loss);
        grads[static_cast<std::size_t>(bi)] = collect_grads(tape, watched);
        losses[static_cast<std::size_t>(bi)] = static_cast<double>(fwd.loss.data[0]);
      });

      // fixed-order reduction keeps training bitwise deterministic
      GradMap avg = std::move(grads[0]);
      for (int bi = 1; bi < bn; ++bi)
        for (auto& [name, g] : grads[static_cast<std::size_t>(bi)]) {
          auto& dst = avg[name];
          if (dst.empty()) dst.assign(g.size(), 0.0f);
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
      const float inv = 1.0f / static_cast<float>(bn);
      for (auto& [name, g] : avg)
        for (auto& v : g) v *= inv;

      double batch_loss = 0.0;
      for (double l : losses) batch_loss += l;
      batch_loss /= bn;
      if (!std::isfinite(batch_loss))
        throw EvalError("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
      epoch_loss += batch_loss * bn;
      epoch_count += bn;

      double lr_now = cfg.lr;
      if (cfg.lr_poly_decay)
        lr_now = cfg.lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), 0.9);
      sgd_step(model, avg, cfg, velocity, lr_now);
      ++step;
    }
    result.epoch_losses.push_back(epoch_loss / epoch_count);

    if (cfg.paranoid_frozen_check) {
      auto now = frozen_snapshot(model);
      for (std::size_t i = 0; i < now.size(); ++i)
        if (now[i].second.data != frozen_before[i].second.data)
          throw EvalError("frozen parameter '" + now[i].first + "' changed during epoch " +
                          std::to_string(epoch));
    }
  }
  return result;
}

// ---- miou ------------------------------------------------------------------------

MiouResult miou(const std::vector<Tensor<float>>& predictions, const std::vector<Tensor<float>>& truths,
                const std::vector<std::string>& episode_classes,
                const std::vector<std::string>& novel_classes, bool per_episode) {
  if (predictions.size() != truths.size() || predictions.size() != episode_classes.size())
    throw ArgumentError("miou: prediction/truth/class lists must align");
  struct Acc {
    double inter = 0, uni = 0;      // dataset-level tallies
    double iou_sum = 0;             // per-episode alternative
    int episodes = 0;
  };
  std::map<std::string, Acc> accs;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Tensor<float>& p = predictions[i];
    const Tensor<float>& t = truths[i];
    if (!p.same_shape(t))
      throw DimensionError("miou: prediction " + shape_str(p.shape) + " vs truth " + shape_str(t.shape));
    double inter = 0, uni = 0;
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const bool pp = p.data[j] > 0.5f, tt = t.data[j] > 0.5f;
      inter += (pp && tt) ? 1 : 0;
      uni += (pp || tt) ? 1 : 0;
    }
    Acc& a = accs[episode_classes[i]];
    a.inter += inter;
    a.uni += uni;
    if (uni > 0) {
      a.iou_sum += inter / uni;
      ++a.episodes;
    }
  }

  MiouResult out;
  double sum = 0;
  int defined = 0;
  for (const auto& klass : novel_classes) {
    auto it = accs.find(klass);
    const bool has = it != accs.end() && it->second.uni > 0;
    if (!has) {
      out.undefined.push_back(klass);
      continue;
    }
    const double v = per_episode ? it->second.iou_sum / it->second.episodes
                                 : it->second.inter / it->second.uni;
    out.per_class[klass] = v;
    sum += v;
    ++defined;
  }
  out.miou = defined > 0 ? sum / defined : 0.0;
  return out;
}

// ---- evaluation --------------------------------------------------------------------

std::string fingerprint_hex(const std::string& canonical) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(canonical);
  return os.str();
}

Predictor model_predictor(const ModelParams<float>& model, const VariantConfig& variant,
                          const std::vector<ClassEmbedding>& embeddings) {
  return [&model, variant, embeddings](const Episode<float>& ep) {
    EpisodeForward<float> fwd = forward_episode<float>(nullptr, model, variant, ep, embeddings, false);
    PredOut out;
    out.mask = predict_mask(fwd.logits);
    out.warn_empty_fg = fwd.empty_foreground;
    return out;
  };
}

EvalReport evaluate(const LoadedDataset& ds, const Predictor& predict, int fold, int shots,
                    int n_episodes, const std::vector<std::uint64_t>& seeds,
                    const std::string& fingerprint_payload, const EvalOptions& opts) {
  if (seeds.empty()) throw ArgumentError("evaluate needs at least one seed");
  if (n_episodes < 1) throw ArgumentError("evaluate needs at least one episode");
  const auto novel = ds.spec.fold_classes(fold);

  EvalReport rep;
  rep.fold = fold;
  rep.shots = shots;
  rep.episodes = n_episodes;
  rep.seeds = seeds;
  rep.config_fingerprint = fingerprint_hex(fingerprint_payload);

  struct Slot {
    std::string klass;
    Tensor<float> pred, truth;
    bool warn = false;
  };

  std::map<std::string, std::pair<double, int>> class_iou_sums;  // sum over seeds, count
  int empty_fg_total = 0;

  for (std::size_t si = 0; si < seeds.size(); ++si) {
    std::vector<Slot> slots(static_cast<std::size_t>(n_episodes));
    parallel_for(n_episodes, opts.threads, [&](int i) {
      Episode<float> ep =
          sample_episode(ds, fold, Phase::test, shots, seeds[si], static_cast<std::uint64_t>(i));
      PredOut po = predict(ep);
      Slot& s = slots[static_cast<std::size_t>(i)];
      s.klass = ep.class_name;
      s.pred = std::move(po.mask);
      s.truth = std::move(ep.query.mask);
      s.warn = po.warn_empty_fg;
    });

    std::vector<Tensor<float>> preds, truths;
    std::vector<std::string> classes;
    for (auto& s : slots) {
      preds.push_back(std::move(s.pred));
      truths.push_back(std::move(s.truth));
      classes.push_back(s.klass);
      if (s.warn) ++empty_fg_total;
    }
    MiouResult r = miou(preds, truths, classes, novel, opts.per_episode_iou);
    rep.per_seed_miou.push_back(r.miou);
    for (const auto& [klass, v] : r.per_class) {
      class_iou_sums[klass].first += v;
      class_iou_sums[klass].second += 1;
    }
    for (const auto& klass : r.undefined)
      rep.warnings.push_back("seed " + std::to_string(seeds[si]) + ": class '" + klass +
                             "' has zero union, excluded from the mean");
  }

  for (const auto& [klass, sc] : class_iou_sums) rep.per_class_iou[klass] = sc.first / sc.second;
  double sum = 0;
  for (double v : rep.per_seed_miou) sum += v;
  rep.miou = sum / static_cast<double>(rep.per_seed_miou.size());
  if (empty_fg_total > 0)
    rep.warnings.push_back(std::to_string(empty_fg_total) +
                           " episodes had empty support foreground after mask downsampling");
  return rep;
}

std::string EvalReport::payload() const {
  json j;
  j["config_fingerprint"] = config_fingerprint;
  j["fold"] = fold;
  j["shots"] = shots;
  j["episodes"] = episodes;
  j["seeds"] = seeds;
  j["per_seed_miou"] = per_seed_miou;
  json pc = json::object();
  for (const auto& [k, v] : per_class_iou) pc[k] = v;
  j["per_class_iou"] = pc;
  j["miou"] = miou;
  j["warnings"] = warnings;
  return j.dump(2);
}

// ---- ablation -----------------------------------------------------------------------

AblationTable run_ablation(const LoadedDataset& ds, const AblationConfig& cfg,
                           const std::vector<VariantConfig>& variants,
                           const std::vector<ClassEmbedding>& embeddings) {
  if (variants.empty()) throw ArgumentError("ablation needs at least one variant");
  AblationTable table;
  table.folds = cfg.folds;

  const int cells = static_cast<int>(variants.size() * cfg.folds.size());
  std::vector<double> cell_miou(static_cast<std::size_t>(cells), 0.0);

  parallel_for(cells, cfg.threads, [&](int cell) {
    const std::size_t vi = static_cast<std::size_t>(cell) / cfg.folds.size();
    const std::size_t fi = static_cast<std::size_t>(cell) % cfg.folds.size();
    TrainConfig tc = cfg.train;
    tc.variant = variants[vi];
    tc.fold = cfg.folds[fi];
    tc.threads = 1;  // parallelism is across cells here
    ModelParams<float> model = build_model<float>(cfg.model, cfg.model_seed);
    train(ds, tc, model, embeddings);
    const std::string fp = "ablate/" + variants[vi].str() + "/fold" + std::to_string(tc.fold);
    EvalReport rep = evaluate(ds, model_predictor(model, variants[vi], embeddings), tc.fold, tc.shots,
                              cfg.eval_episodes, cfg.eval_seeds, fp, {});
    cell_miou[static_cast<std::size_t>(cell)] = rep.miou;
  });

  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    AblationRow row;
    row.variant = variants[vi].str();
    double sum = 0;
    for (std::size_t fi = 0; fi < cfg.folds.size(); ++fi) {
      const double v = cell_miou[vi * cfg.folds.size() + fi];
      row.per_fold.push_back(v);
      sum += v;
    }
    row.mean = sum / static_cast<double>(cfg.folds.size());
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(12) << "variant";
  for (int f : folds) os << std::right << std::setw(10) << ("fold" + std::to_string(f));
  os << std::right << std::setw(10) << "mean" << "\n";
  for (const auto& row : rows) {
    os << std::left << std::setw(12) << row.variant;
    os << std::fixed << std::setprecision(4);
    for (double v : row.per_fold) os << std::right << std::setw(10) << v;
    os << std::right << std::setw(10) << row.mean << "\n";
  }
  return os.str();
}

std::string AblationTable::to_json() const {
  json j;
  j["folds"] = folds;
  json rows_j = json::array();
  for (const auto& row : rows) {
    json r;
    r["variant"] = row.variant;
    r["per_fold"] = row.per_fold;
    r["mean"] = row.mean;
    rows_j.push_back(std::move(r));
  }
  j["rows"] = std::move(rows_j);
  return j.dump(2);
}

std::vector<ClassEmbedding> synth_embeddings_for(const std::vector<std::string>& classes, int ct,
                                                 std::uint64_t seed) {
  std::vector<ClassEmbedding> out;
  out.reserve(classes.size());
  for (const auto& name : classes) out.push_back(synth_embedding(name, ct, seed));
  return out;
}

}  // namespace hse
