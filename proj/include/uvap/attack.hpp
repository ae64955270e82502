#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvap/losses.hpp"
#include "uvap/model.hpp"
#include "uvap/prompts.hpp"
#include "uvap/synthclip.hpp"

// Constrained perturbation optimizers: a universal perturbation shared by all
// frames of all clips, and a sample-wise variant with one delta per frame.
// Both take projected sign-gradient steps on the total objective under an
// L-infinity budget.
namespace uvap::attack {

using ad::Var;
using data::VideoClip;
using losses::LossConfig;

enum class PerturbationMode { Universal, Samplewise };
enum class StepRule { Sign, Raw };

inline const char* to_string(PerturbationMode m) {
  return m == PerturbationMode::Universal ? "universal" : "samplewise";
}

struct Perturbation {
  PerturbationMode mode = PerturbationMode::Universal;
  double epsilon = 10.0 / 255.0;
  std::vector<Tensor> deltas;  // universal: 1 entry; samplewise: one per frame
  std::string clip_id;         // samplewise: source clip
  uint64_t seed = 0;
  uint64_t config_hash = 0;

  const Tensor& delta_for_frame(size_t frame_idx) const {
    if (mode == PerturbationMode::Universal) return deltas.at(0);
    return deltas.at(frame_idx);
  }
};

struct AttackConfig {
  PerturbationMode mode = PerturbationMode::Universal;
  double epsilon = 10.0 / 255.0;   // universal default; samplewise uses 8/255
  double alpha = 2.0 / 255.0;      // inner step size
  int epochs = 10;
  int scan_m = 256;
  uint64_t seed = 30;
  int frames_per_clip = 15;
  bool first_frame_only = false;   // diagnostic probe
  StepRule step_rule = StepRule::Sign;
  LossConfig loss;

  void validate() const {
    if (epsilon < 0.0 || epsilon > 1.0)
      throw std::invalid_argument("AttackConfig: epsilon must be in [0,1]");
    if (epochs < 1) throw std::invalid_argument("AttackConfig: epochs must be >= 1");
    if (epsilon > 0.0 && !(alpha > 0.0 && alpha <= epsilon))
      throw std::invalid_argument("AttackConfig: need 0 < alpha <= epsilon");
    if (frames_per_clip < 1)
      throw std::invalid_argument("AttackConfig: frames_per_clip must be >= 1");
    loss.validate();
  }

  io::json to_json() const {
    io::json j;
    j["mode"] = to_string(mode);
    j["epsilon"] = epsilon;
    j["alpha"] = alpha;
    j["epochs"] = epochs;
    j["scan_m"] = scan_m;
    j["seed"] = seed;
    j["frames_per_clip"] = frames_per_clip;
    j["first_frame_only"] = first_frame_only;
    j["step_rule"] = step_rule == StepRule::Sign ? "sign" : "raw";
    j["loss"] = loss.to_json();
    return j;
  }

  uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

// Elementwise clamp of delta to [-epsilon, +epsilon].
inline Tensor project_linf(Tensor delta, double epsilon) {
  for (double& v : delta.data) v = std::min(std::max(v, -epsilon), epsilon);
  return delta;
}

// Adversarial clip: per frame clamp(x + delta, 0, 1); masks copied unchanged.
inline VideoClip apply(const VideoClip& clip, const Perturbation& pert) {
  if (pert.mode == PerturbationMode::Samplewise && pert.deltas.size() != clip.frames.size())
    throw std::invalid_argument("apply: samplewise delta count does not match frame count");
  VideoClip out;
  out.spec = clip.spec;
  out.masks = clip.masks;
  out.frames.reserve(clip.frames.size());
  for (size_t f = 0; f < clip.frames.size(); ++f) {
    const Tensor& d = pert.delta_for_frame(f);
    if (!d.same_shape(clip.frames[f]))
      throw std::invalid_argument("apply: delta shape does not match frame shape");
    Tensor x = clip.frames[f];
    for (int64_t i = 0; i < x.numel(); ++i)
      x[i] = std::min(std::max(x[i] + d[i], 0.0), 1.0);
    out.frames.push_back(std::move(x));
  }
  return out;
}

struct TraceRow {
  int epoch = 0;
  std::string unit_id;
  double j_sa = 0, j_fa = 0, j_ma = 0, j_total = 0;
};

struct AttackResult {
  Perturbation perturbation;
  std::vector<TraceRow> trace;
};

namespace detail {

// One attackable sequence: a clip (video task) or a single sampled frame
// (image task), with per-frame region masks and benign prototypes.
struct Unit {
  std::string id;
  std::string source_clip;
  std::vector<Tensor> frames;
  std::vector<losses::RegionMasks> rms;
  std::vector<losses::Prototype> protos;
  std::vector<Tensor> negative_feats;  // flattened benign features, other clips
};

struct Workspace {
  std::vector<Unit> units;
  prompts::ScanGrid grid;
};

inline Workspace prepare(const model::Model& net, const data::DatasetManifest& man,
                         const io::fs::path& manifest_path, const AttackConfig& cfg,
                         const std::string& split) {
  auto clips = man.split(split);
  if (clips.empty()) throw std::invalid_argument("attack: manifest split '" + split + "' is empty");

  Workspace ws;
  const auto& mc0 = *clips.front();
  VideoClip first = data::load_manifest_clip(manifest_path, mc0);
  ws.grid = prompts::scan_targets(first.spec.height, first.spec.width, cfg.scan_m,
                                  Rng(cfg.seed).fork("scangrid").state);

  // Benign feature pool for negatives, keyed by owning clip.
  struct PoolEntry {
    std::string clip_id;
    Tensor feat;  // flattened
  };
  std::vector<PoolEntry> pool;

  for (const auto* mcp : clips) {
    VideoClip clip = data::load_manifest_clip(manifest_path, *mcp);
    int n = std::min<int>(cfg.frames_per_clip, static_cast<int>(clip.frames.size()));
    std::vector<std::vector<int>> frame_groups;
    if (man.task == data::Task::Video) {
      std::vector<int> idx(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
      frame_groups.push_back(std::move(idx));
    } else {
      for (int f : mcp->frame_ids) frame_groups.push_back({f});
    }
    for (size_t g = 0; g < frame_groups.size(); ++g) {
      Unit u;
      u.source_clip = mcp->id;
      u.id = man.task == data::Task::Video
                 ? mcp->id
                 : mcp->id + "#f" + std::to_string(frame_groups[g][0]);
      for (int f : frame_groups[g]) {
        u.frames.push_back(clip.frames.at(static_cast<size_t>(f)));
        u.rms.push_back(losses::build_region_masks(clip.masks.at(static_cast<size_t>(f)),
                                                   cfg.loss.threshold_value));
      }
      ws.units.push_back(std::move(u));
    }
    // pool every loaded frame once
    for (size_t f = 0; f < clip.frames.size(); ++f) {
      Tensor feat = net.encode_image(ad::constant(clip.frames[f]))->value;
      pool.push_back({mcp->id, Tensor({static_cast<int>(feat.numel())}, std::move(feat.data))});
    }
  }

  // Prototypes and negatives per unit.
  Rng base(cfg.seed);
  for (size_t ui = 0; ui < ws.units.size(); ++ui) {
    Unit& u = ws.units[ui];
    for (size_t f = 0; f < u.frames.size(); ++f) {
      uint64_t pseed = base.fork("proto", ui).fork("frame", f).state;
      u.protos.push_back(losses::prototype(u.frames[f], cfg.loss.rho, pseed, net));
    }
    std::vector<const PoolEntry*> others;
    for (const auto& e : pool)
      if (e.clip_id != u.source_clip) others.push_back(&e);
    if (others.empty())
      throw std::invalid_argument("attack: need frames from at least one other clip as negatives");
    Rng nrng = base.fork("negatives", ui);
    for (int k = 0; k < cfg.loss.negatives; ++k)
      u.negative_feats.push_back(others[nrng.below(others.size())]->feat);
  }
  return ws;
}

inline void check_finite_loss(double v, const char* term) {
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("attack: non-finite loss term ") + term);
}

// Builds the objective for the given adversarial frame vars and unit, runs
// backward. Returns the loss values.
inline TraceRow eval_objective(const model::Model& net, const Unit& u,
                               const std::vector<Var>& adv_frames, const prompts::Prompt& prompt,
                               const AttackConfig& cfg) {
  model::VideoTrace tr = net.segment_video(adv_frames, {prompt});

  Var j_sa, j_fa, j_ma;
  const LossConfig& lc = cfg.loss;
  try {
    if (lc.w_sa > 0.0) {
      j_sa = losses::semantic_confusion_mean(tr.logits, u.rms, lc.sa_form);
    } else {
      j_sa = ad::constant(Tensor::scalar(0.0));
    }
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("attack: loss term J_sa failed: ") + e.what());
  }
  bool want_ma = lc.w_ma > 0.0 && adv_frames.size() >= 2;
  try {
    if (lc.w_fa > 0.0) {
      std::vector<Var> terms;
      for (size_t f = 0; f < adv_frames.size(); ++f)
        terms.push_back(losses::feature_shift(tr.enc_feats[f], u.protos[f], u.negative_feats,
                                              lc.tau, lc.fa_form));
      Var s = terms[0];
      for (size_t i = 1; i < terms.size(); ++i) s = ad::add(s, terms[i]);
      j_fa = ad::scale(s, 1.0 / static_cast<double>(terms.size()));
    } else {
      j_fa = ad::constant(Tensor::scalar(0.0));
    }
    if (want_ma) j_ma = losses::memory_misalign(tr.enc_feats);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("attack: loss term ") +
                             (j_fa ? "J_ma" : "J_fa") + " failed: " + e.what());
  }

  check_finite_loss(j_sa->value[0], "J_sa");
  check_finite_loss(j_fa->value[0], "J_fa");
  if (want_ma) check_finite_loss(j_ma->value[0], "J_ma");

  Var total = losses::total_loss(j_sa, j_fa, want_ma ? j_ma : Var(), lc);
  ad::backward(total);

  TraceRow row;
  row.unit_id = u.id;
  row.j_sa = j_sa->value[0];
  row.j_fa = j_fa->value[0];
  row.j_ma = want_ma ? j_ma->value[0] : 0.0;
  row.j_total = total->value[0];
  return row;
}

inline void step_delta(Tensor& delta, const Tensor& grad, const AttackConfig& cfg) {
  if (!all_finite(grad))
    throw std::runtime_error("attack: non-finite gradient on delta");
  if (cfg.step_rule == StepRule::Sign) {
    for (int64_t i = 0; i < delta.numel(); ++i) {
      double g = grad[i];
      double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
      delta[i] -= cfg.alpha * s;
    }
  } else {
    double norm = max_abs(grad);
    double sc = norm > 0.0 ? cfg.alpha / norm : 0.0;
    for (int64_t i = 0; i < delta.numel(); ++i) delta[i] -= sc * grad[i];
  }
  delta = project_linf(std::move(delta), cfg.epsilon);
}

}  // namespace detail

// Universal perturbation over the manifest's train split. Epoch loop with
// seed-shuffled clip order, one delta step per clip; the scan-grid prompt for
// each step is sampled uniformly over regions.
inline AttackResult optimize_uap(const model::ModelParams& params,
                                 const data::DatasetManifest& man,
                                 const io::fs::path& manifest_path, const AttackConfig& cfg) {
  cfg.validate();
  model::Model net(params, false);
  detail::Workspace ws = detail::prepare(net, man, manifest_path, cfg, "train");

  const auto& c0 = net.config();
  Tensor delta = Tensor::zeros({c0.in_channels, c0.height, c0.width});
  Rng base(cfg.seed);
  AttackResult res;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<size_t> order(ws.units.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng orng = base.fork("order", static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[orng.below(i)]);

    for (size_t oi = 0; oi < order.size(); ++oi) {
      const detail::Unit& u = ws.units[order[oi]];
      Rng irng = base.fork("iter", static_cast<uint64_t>(epoch)).fork(u.id);
      const prompts::Prompt& prompt =
          ws.grid.regions[irng.below(ws.grid.regions.size())].prompt;

      Var dvar = ad::leaf(delta);
      std::vector<Var> adv;
      size_t nframes = cfg.first_frame_only ? std::min<size_t>(1, u.frames.size())
                                            : u.frames.size();
      for (size_t f = 0; f < nframes; ++f)
        adv.push_back(ad::clamp01(ad::add(ad::constant(u.frames[f]), dvar)));

      detail::Unit view;  // shallow view over the first nframes
      const detail::Unit* up = &u;
      if (adv.size() != u.frames.size()) {
        view.id = u.id;
        view.source_clip = u.source_clip;
        view.frames.assign(u.frames.begin(), u.frames.begin() + static_cast<long>(adv.size()));
        view.rms.assign(u.rms.begin(), u.rms.begin() + static_cast<long>(adv.size()));
        view.protos.assign(u.protos.begin(), u.protos.begin() + static_cast<long>(adv.size()));
        view.negative_feats = u.negative_feats;
        up = &view;
      }

      TraceRow row = detail::eval_objective(net, *up, adv, prompt, cfg);
      row.epoch = epoch;
      res.trace.push_back(row);

      detail::step_delta(delta, dvar->grad_ref(), cfg);
    }
  }

  res.perturbation.mode = PerturbationMode::Universal;
  res.perturbation.epsilon = cfg.epsilon;
  res.perturbation.deltas = {std::move(delta)};
  res.perturbation.seed = cfg.seed;
  res.perturbation.config_hash = cfg.hash();
  return res;
}

// Diagnostic: optimize on frame 0 only, then broadcast the delta to all
// frames at evaluation time (the perturbation is universal-shaped).
inline AttackResult first_frame_probe(const model::ModelParams& params,
                                      const data::DatasetManifest& man,
                                      const io::fs::path& manifest_path, AttackConfig cfg) {
  cfg.first_frame_only = true;
  return optimize_uap(params, man, manifest_path, cfg);
}

// Sample-wise variant: one delta per frame of the given clip, jointly
// optimized with the same objective and schedule.
inline AttackResult optimize_samplewise(const model::ModelParams& params, const VideoClip& clip,
                                        const std::string& clip_id,
                                        const std::vector<Tensor>& negative_frames,
                                        const AttackConfig& cfg) {
  cfg.validate();
  model::Model net(params, false);

  detail::Unit u;
  u.id = clip_id;
  u.source_clip = clip_id;
  int n = std::min<int>(cfg.frames_per_clip, static_cast<int>(clip.frames.size()));
  Rng base(cfg.seed);
  for (int f = 0; f < n; ++f) {
    u.frames.push_back(clip.frames[static_cast<size_t>(f)]);
    u.rms.push_back(losses::build_region_masks(clip.masks[static_cast<size_t>(f)],
                                               cfg.loss.threshold_value));
    uint64_t pseed = base.fork("proto-sw").fork("frame", static_cast<uint64_t>(f)).state;
    u.protos.push_back(losses::prototype(u.frames.back(), cfg.loss.rho, pseed, net));
  }
  if (negative_frames.empty())
    throw std::invalid_argument("optimize_samplewise: negative frames required");
  Rng nrng = base.fork("negatives-sw");
  for (int k = 0; k < cfg.loss.negatives; ++k) {
    const Tensor& nf = negative_frames[nrng.below(negative_frames.size())];
    Tensor feat = net.encode_image(ad::constant(nf))->value;
    u.negative_feats.push_back(Tensor({static_cast<int>(feat.numel())}, std::move(feat.data)));
  }

  prompts::ScanGrid grid = prompts::scan_targets(clip.spec.height, clip.spec.width, cfg.scan_m,
                                                 Rng(cfg.seed).fork("scangrid").state);

  std::vector<Tensor> deltas(static_cast<size_t>(n), Tensor::zeros(clip.frames[0].shape));
  AttackResult res;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng irng = base.fork("iter-sw", static_cast<uint64_t>(epoch));
    const prompts::Prompt& prompt = grid.regions[irng.below(grid.regions.size())].prompt;

    std::vector<Var> dvars, adv;
    for (int f = 0; f < n; ++f) {
      dvars.push_back(ad::leaf(deltas[static_cast<size_t>(f)]));
      adv.push_back(ad::clamp01(ad::add(ad::constant(u.frames[static_cast<size_t>(f)]), dvars.back())));
    }
    TraceRow row = detail::eval_objective(net, u, adv, prompt, cfg);
    row.epoch = epoch;
    res.trace.push_back(row);
    for (int f = 0; f < n; ++f)
      detail::step_delta(deltas[static_cast<size_t>(f)], dvars[static_cast<size_t>(f)]->grad_ref(),
                         cfg);
  }

  res.perturbation.mode = PerturbationMode::Samplewise;
  res.perturbation.epsilon = cfg.epsilon;
  res.perturbation.deltas = std::move(deltas);
  res.perturbation.clip_id = clip_id;
  res.perturbation.seed = cfg.seed;
  res.perturbation.config_hash = cfg.hash();
  return res;
}

// ---------------------------------------------------------------------------
// Perturbation checkpoint io
// ---------------------------------------------------------------------------

inline constexpr char kPertMagic[8] = {'U', 'V', 'A', 'P', 'P', 'R', 'T', '1'};

inline void save_perturbation(const Perturbation& p, const io::fs::path& path) {
  io::json header;
  header["format"] = "uvap-pert-v1";
  header["mode"] = to_string(p.mode);
  header["epsilon"] = p.epsilon;
  header["seed"] = p.seed;
  header["config_hash"] = io::hash_hex(p.config_hash);
  if (!p.clip_id.empty()) header["clip_id"] = p.clip_id;
  std::vector<io::NamedBlob> blobs;
  for (size_t i = 0; i < p.deltas.size(); ++i) {
    char name[32];
    if (p.mode == PerturbationMode::Universal)
      std::snprintf(name, sizeof(name), "delta");
    else
      std::snprintf(name, sizeof(name), "frame_%03zu", i);
    blobs.push_back({name, p.deltas[i].shape, p.deltas[i].data});
  }
  io::write_checkpoint(path, kPertMagic, header, blobs);
}

inline Perturbation load_perturbation(const io::fs::path& path) {
  auto ck = io::read_checkpoint(path, kPertMagic);
  Perturbation p;
  std::string mode = ck.header.at("mode").get<std::string>();
  p.mode = mode == "universal" ? PerturbationMode::Universal : PerturbationMode::Samplewise;
  p.epsilon = ck.header.at("epsilon").get<double>();
  p.seed = ck.header.value("seed", 0ull);
  if (ck.header.contains("clip_id")) p.clip_id = ck.header["clip_id"].get<std::string>();
  for (auto& b : ck.blobs) p.deltas.push_back(Tensor(b.shape, std::move(b.data)));
  if (p.deltas.empty()) throw std::runtime_error("perturbation file has no payload");
  return p;
}

inline std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string out = "epoch,clip_id,j_sa,j_fa,j_ma,j_total\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.unit_id.c_str(),
                  r.j_sa, r.j_fa, r.j_ma, r.j_total);
    out += buf;
  }
  return out;
}

}  // namespace uvap::attack
