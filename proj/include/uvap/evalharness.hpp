#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvap/attack.hpp"
#include "uvap/model.hpp"
#include "uvap/prompts.hpp"
#include "uvap/synthclip.hpp"

// Quantitative evaluation: IoU/mIoU, benign vs adversarial comparisons,
// cross-prompt and multi-point protocols, avalanche curves, the random-noise
// floor, and seed-stability runs.
namespace uvap::eval {

using attack::Perturbation;
using data::VideoClip;
using prompts::PromptKind;

// |pred AND gt| / |pred OR gt|; 1.0 when both masks are empty.
inline double iou(const Tensor& pred, const Tensor& gt) {
  if (pred.shape != gt.shape) throw std::invalid_argument("iou: shape mismatch");
  double inter = 0, uni = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    bool p = pred[i] != 0.0, g = gt[i] != 0.0;
    if (p && g) ++inter;
    if (p || g) ++uni;
  }
  return uni == 0.0 ? 1.0 : inter / uni;
}

inline double miou(const std::vector<std::pair<Tensor, Tensor>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("miou: empty list");
  double s = 0;
  for (const auto& [p, g] : pairs) s += iou(p, g);
  return s / static_cast<double>(pairs.size());
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0;
  for (double v : xs) s += v;
  return s / static_cast<double>(xs.size());
}

inline double std_of(const std::vector<double>& xs) {
  double m = mean_of(xs);
  double s = 0;
  for (double v : xs) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(xs.size()));
}

// Evaluation prompt seeds are disjoint from optimization seeds by a fixed
// offset: optimization_seed + 10000 + index.
inline uint64_t eval_prompt_seed(uint64_t optimization_seed, uint64_t index) {
  return optimization_seed + 10000 + index;
}

// Universal perturbation or a per-clip set of sample-wise perturbations.
struct PerturbationSet {
  std::optional<Perturbation> universal;
  std::map<std::string, Perturbation> per_clip;

  static PerturbationSet from(Perturbation p) {
    PerturbationSet s;
    if (p.mode == attack::PerturbationMode::Universal)
      s.universal = std::move(p);
    else
      s.per_clip[p.clip_id] = std::move(p);
    return s;
  }

  bool empty() const { return !universal && per_clip.empty(); }

  const Perturbation* for_clip(const std::string& id) const {
    if (universal) return &*universal;
    auto it = per_clip.find(id);
    if (it == per_clip.end())
      throw std::invalid_argument("PerturbationSet: no perturbation for clip '" + id + "'");
    return &it->second;
  }
};

struct EvalRow {
  std::string dataset_id, model_id, task;
  std::string prompt_mode;   // "point" | "box" | "point*k"
  uint64_t prompt_seed = 0;
  std::string condition;     // "benign" | "adversarial" | "noise-baseline"
  std::string prompt_id;     // e.g. "P1".."P5", "B1".."B5", "" for default
  std::string defense_kind;  // "" when undefended
  double defense_level = 0.0;
  double miou = 0.0;
  std::vector<std::pair<std::string, double>> clip_ious;
};

struct AvalanchePoint {
  std::string clip_id;
  int frame_index = 0;       // 1-based pair index
  std::string series;        // "consecutive" | "vs_first"
  std::string condition;     // "benign" | "adversarial"
  double similarity = 0.0;
};

// Optional per-frame preprocessing (used by the corruption defense).
using FrameTransform = std::function<Tensor(const Tensor&)>;

struct EvalOptions {
  std::string dataset_id = "synthetic";
  std::string model_id = "toy";
  PromptKind prompt_mode = PromptKind::Point;
  int points_per_prompt = 1;   // >1 = multi-point prompts
  uint64_t prompt_seed = 0;
  int frames_per_clip = 15;
  std::string prompt_id;
  std::string defense_kind;
  double defense_level = 0.0;
  std::string condition_override;  // label noise baselines explicitly
  FrameTransform transform;        // applied to every frame before the model
};

namespace detail {

inline double clip_miou(const model::Model& net, const std::vector<Tensor>& frames,
                        const std::vector<Tensor>& masks, const std::vector<prompts::Prompt>& ps,
                        const FrameTransform& tf) {
  std::vector<Tensor> in;
  in.reserve(frames.size());
  for (const auto& f : frames) in.push_back(tf ? tf(f) : f);
  auto logits = net.segment_video_values(in, ps);
  double s = 0;
  for (size_t f = 0; f < logits.size(); ++f)
    s += iou(model::threshold_mask(logits[f]), masks[f]);
  return s / static_cast<double>(logits.size());
}

struct EvalUnit {
  std::string id;
  std::vector<Tensor> frames;
  std::vector<Tensor> masks;
  std::string source_clip;
};

inline std::vector<EvalUnit> test_units(const data::DatasetManifest& man,
                                        const io::fs::path& manifest_path, int frames_per_clip) {
  std::vector<EvalUnit> units;
  for (const auto* mc : man.split("test")) {
    VideoClip clip = data::load_manifest_clip(manifest_path, *mc);
    if (man.task == data::Task::Video) {
      EvalUnit u;
      u.id = mc->id;
      u.source_clip = mc->id;
      int n = std::min<int>(frames_per_clip, static_cast<int>(clip.frames.size()));
      u.frames.assign(clip.frames.begin(), clip.frames.begin() + n);
      u.masks.assign(clip.masks.begin(), clip.masks.begin() + n);
      units.push_back(std::move(u));
    } else {
      for (int f : mc->frame_ids) {
        EvalUnit u;
        u.id = mc->id + "#f" + std::to_string(f);
        u.source_clip = mc->id;
        u.frames.push_back(clip.frames.at(static_cast<size_t>(f)));
        u.masks.push_back(clip.masks.at(static_cast<size_t>(f)));
        units.push_back(std::move(u));
      }
    }
  }
  if (units.empty()) throw std::invalid_argument("evaluate: manifest test split is empty");
  return units;
}

inline int count_fg(const Tensor& mask) {
  int n = 0;
  for (double v : mask.data)
    if (v != 0.0) ++n;
  return n;
}

}  // namespace detail

// Benign evaluation plus, when a perturbation is given, adversarial
// evaluation under the same prompts. Never mutates params or perturbations.
inline std::vector<EvalRow> evaluate(const model::ModelParams& params,
                                     const data::DatasetManifest& man,
                                     const io::fs::path& manifest_path,
                                     const PerturbationSet* pert, const EvalOptions& opt) {
  model::Model net(params, false);
  auto units = detail::test_units(man, manifest_path, opt.frames_per_clip);

  EvalRow benign;
  benign.dataset_id = opt.dataset_id;
  benign.model_id = opt.model_id;
  benign.task = data::to_string(man.task);
  benign.prompt_mode = opt.points_per_prompt > 1
                           ? std::string("point*") + std::to_string(opt.points_per_prompt)
                           : (opt.prompt_mode == PromptKind::Point ? "point" : "box");
  benign.prompt_seed = opt.prompt_seed;
  benign.condition = "benign";
  benign.prompt_id = opt.prompt_id;
  benign.defense_kind = opt.defense_kind;
  benign.defense_level = opt.defense_level;

  EvalRow adv = benign;
  adv.condition = opt.condition_override.empty() ? "adversarial" : opt.condition_override;

  for (size_t ui = 0; ui < units.size(); ++ui) {
    const auto& u = units[ui];
    if (opt.points_per_prompt > detail::count_fg(u.masks[0]))
      throw std::invalid_argument("evaluate: points_per_prompt exceeds foreground pixel count");
    auto ps = prompts::sample_eval_prompts(u.masks[0], opt.prompt_mode, opt.points_per_prompt,
                                           Rng(opt.prompt_seed).fork("clip", ui).state);
    double b = detail::clip_miou(net, u.frames, u.masks, ps, opt.transform);
    benign.clip_ious.emplace_back(u.id, b);
    if (pert && !pert->empty()) {
      const Perturbation* p = pert->for_clip(u.source_clip);
      VideoClip tmp;
      tmp.frames = u.frames;
      tmp.masks = u.masks;
      tmp.spec.frame_count = static_cast<int>(u.frames.size());
      tmp.spec.height = u.frames[0].shape[1];
      tmp.spec.width = u.frames[0].shape[2];
      VideoClip advclip = attack::apply(tmp, *p);
      double a = detail::clip_miou(net, advclip.frames, u.masks, ps, opt.transform);
      adv.clip_ious.emplace_back(u.id, a);
    }
  }

  auto finish = [](EvalRow& r) {
    double s = 0;
    for (const auto& [id, v] : r.clip_ious) s += v;
    r.miou = s / static_cast<double>(r.clip_ious.size());
  };
  finish(benign);
  std::vector<EvalRow> rows{benign};
  if (pert && !pert->empty()) {
    finish(adv);
    rows.push_back(adv);
  }
  return rows;
}

// Five (by default) independently sampled prompts per kind, one evaluate pass
// each, plus mean/std summary rows per kind and condition.
inline std::vector<EvalRow> cross_prompt_eval(const model::ModelParams& params,
                                              const data::DatasetManifest& man,
                                              const io::fs::path& manifest_path,
                                              const PerturbationSet& pert,
                                              uint64_t optimization_seed, int count,
                                              const EvalOptions& base_opt) {
  std::vector<EvalRow> rows;
  for (PromptKind kind : {PromptKind::Point, PromptKind::Box}) {
    std::vector<double> benign_vals, adv_vals;
    for (int i = 0; i < count; ++i) {
      EvalOptions opt = base_opt;
      opt.prompt_mode = kind;
      opt.prompt_seed = eval_prompt_seed(optimization_seed, static_cast<uint64_t>(i));
      opt.prompt_id = (kind == PromptKind::Point ? "P" : "B") + std::to_string(i + 1);
      auto r = evaluate(params, man, manifest_path, &pert, opt);
      for (const auto& row : r) {
        if (row.condition == "benign") benign_vals.push_back(row.miou);
        else adv_vals.push_back(row.miou);
        rows.push_back(row);
      }
    }
    auto summary = [&](const char* cond, const std::vector<double>& vals) {
      EvalRow s;
      s.dataset_id = base_opt.dataset_id;
      s.model_id = base_opt.model_id;
      s.task = data::to_string(man.task);
      s.prompt_mode = kind == PromptKind::Point ? "point" : "box";
      s.condition = cond;
      s.prompt_id = std::string(kind == PromptKind::Point ? "P" : "B") + ":mean±std";
      s.miou = mean_of(vals);
      s.clip_ious.emplace_back("std", std_of(vals));
      rows.push_back(s);
    };
    summary("benign", benign_vals);
    summary("adversarial", adv_vals);
  }
  return rows;
}

// Multi-point protocol: k jointly encoded foreground points per prompt.
inline std::vector<EvalRow> multi_point_eval(const model::ModelParams& params,
                                             const data::DatasetManifest& man,
                                             const io::fs::path& manifest_path,
                                             const PerturbationSet& pert,
                                             const std::vector<int>& ks,
                                             const EvalOptions& base_opt) {
  std::vector<EvalRow> rows;
  for (int k : ks) {
    if (k < 1) throw std::invalid_argument("multi_point_eval: k must be >= 1");
    EvalOptions opt = base_opt;
    opt.prompt_mode = PromptKind::Point;
    opt.points_per_prompt = k;
    opt.prompt_id = "k" + std::to_string(k);
    auto r = evaluate(params, man, manifest_path, &pert, opt);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

// Consecutive-pair and vs-first encoder-feature cosine similarity for benign
// and (optionally) adversarial versions of one clip.
inline std::vector<AvalanchePoint> avalanche_curve(const model::ModelParams& params,
                                                   const VideoClip& clip,
                                                   const std::string& clip_id,
                                                   const Perturbation* pert) {
  if (clip.frames.size() < 2)
    throw std::invalid_argument("avalanche_curve: clip must have at least 2 frames");
  model::Model net(params, false);

  auto encode_all = [&](const std::vector<Tensor>& frames) {
    std::vector<Tensor> feats;
    for (const auto& f : frames) {
      Tensor t = net.encode_image(ad::constant(f))->value;
      feats.push_back(Tensor({static_cast<int>(t.numel())}, std::move(t.data)));
    }
    return feats;
  };
  auto cos = [](const Tensor& a, const Tensor& b) {
    double num = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      num += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    if (na <= 0 || nb <= 0) throw std::runtime_error("avalanche_curve: zero-norm features");
    return num / (std::sqrt(na) * std::sqrt(nb));
  };

  std::vector<AvalanchePoint> out;
  auto emit = [&](const std::vector<Tensor>& feats, const char* condition) {
    for (size_t i = 0; i + 1 < feats.size(); ++i) {
      out.push_back({clip_id, static_cast<int>(i + 1), "consecutive", condition,
                     cos(feats[i], feats[i + 1])});
      out.push_back({clip_id, static_cast<int>(i + 1), "vs_first", condition,
                     cos(feats[0], feats[i + 1])});
    }
  };
  emit(encode_all(clip.frames), "benign");
  if (pert) emit(encode_all(attack::apply(clip, *pert).frames), "adversarial");
  return out;
}

// Uniform +-epsilon noise baseline (Rademacher entries).
inline Perturbation noise_baseline(double epsilon, const std::vector<int>& shape, uint64_t seed) {
  Perturbation p;
  p.mode = attack::PerturbationMode::Universal;
  p.epsilon = epsilon;
  Tensor d = Tensor::zeros(shape);
  Rng rng(seed);
  for (double& v : d.data) v = rng.coin() ? epsilon : -epsilon;
  p.deltas.push_back(std::move(d));
  p.seed = seed;
  return p;
}

struct SeedStabilityResult {
  std::vector<uint64_t> seeds;
  std::vector<double> adversarial_miou;
  double mean = 0, stddev = 0;
};

// Full attack+eval pipeline per seed; reports mean and std of adversarial
// mIoU under point prompts.
inline SeedStabilityResult seed_stability(const model::ModelParams& params,
                                          const data::DatasetManifest& man,
                                          const io::fs::path& manifest_path,
                                          attack::AttackConfig cfg,
                                          const std::vector<uint64_t>& seeds,
                                          const EvalOptions& base_opt) {
  if (seeds.size() < 2) throw std::invalid_argument("seed_stability: need at least 2 seeds");
  SeedStabilityResult res;
  res.seeds = seeds;
  for (uint64_t s : seeds) {
    cfg.seed = s;
    auto ar = attack::optimize_uap(params, man, manifest_path, cfg);
    PerturbationSet ps = PerturbationSet::from(ar.perturbation);
    EvalOptions opt = base_opt;
    opt.prompt_seed = eval_prompt_seed(s, 0);
    auto rows = evaluate(params, man, manifest_path, &ps, opt);
    for (const auto& r : rows)
      if (r.condition == "adversarial") res.adversarial_miou.push_back(r.miou);
  }
  res.mean = mean_of(res.adversarial_miou);
  res.stddev = std_of(res.adversarial_miou);
  return res;
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

inline std::string report_csv_header() {
  return "dataset_id,model_id,task,prompt_mode,prompt_seed,condition,prompt_id,defense_kind,"
         "defense_level,miou,clip_ious\n";
}

inline std::string report_csv(const std::vector<EvalRow>& rows, bool with_header = true) {
  std::string out = with_header ? report_csv_header() : std::string();
  char buf[512];
  for (const auto& r : rows) {
    std::string ious;
    for (const auto& [id, v] : r.clip_ious) {
      std::snprintf(buf, sizeof(buf), "%s%s:%.10g", ious.empty() ? "" : ";", id.c_str(), v);
      ious += buf;
    }
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%llu,%s,%s,%s,%.10g,%.10g,%s\n",
                  r.dataset_id.c_str(), r.model_id.c_str(), r.task.c_str(), r.prompt_mode.c_str(),
                  static_cast<unsigned long long>(r.prompt_seed), r.condition.c_str(),
                  r.prompt_id.c_str(), r.defense_kind.c_str(), r.defense_level, r.miou,
                  ious.c_str());
    out += buf;
  }
  return out;
}

inline std::string avalanche_csv(const std::vector<AvalanchePoint>& pts) {
  std::string out = "clip_id,frame_index,series,condition,similarity\n";
  char buf[256];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%s,%s,%.10g\n", p.clip_id.c_str(), p.frame_index,
                  p.series.c_str(), p.condition.c_str(), p.similarity);
    out += buf;
  }
  return out;
}

}  // namespace uvap::eval
