#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvap/autodiff.hpp"
#include "uvap/model.hpp"
#include "uvap/rng.hpp"
#include "uvap/tensor.hpp"

// The dual semantic deviation objective: semantic confusion on decoder logits,
// feature shift on encoder features against a benign prototype and cross-clip
// negatives, and memory misalignment across consecutive adversarial frames.
// All terms are scalars the optimizer MINIMIZES; signs are normalized so that
// a descent step moves each targeted quantity in the attack direction.
namespace uvap::losses {

using ad::Var;

enum class SaForm { Bce, Mse };
enum class FaForm { Contrastive, Cosine };

inline SaForm sa_form_from(const std::string& s) {
  if (s == "bce") return SaForm::Bce;
  if (s == "mse") return SaForm::Mse;
  throw std::invalid_argument("unknown sa_form: " + s);
}
inline FaForm fa_form_from(const std::string& s) {
  if (s == "contrastive") return FaForm::Contrastive;
  if (s == "cosine") return FaForm::Cosine;
  throw std::invalid_argument("unknown fa_form: " + s);
}
inline const char* to_string(SaForm f) { return f == SaForm::Bce ? "bce" : "mse"; }
inline const char* to_string(FaForm f) {
  return f == FaForm::Contrastive ? "contrastive" : "cosine";
}

struct LossConfig {
  double tau = 0.1;      // contrastive temperature
  int rho = 4;           // augmentations per prototype
  int negatives = 30;    // cross-clip negative frames
  double w_sa = 1.0, w_fa = 1.0, w_ma = 1.0;
  SaForm sa_form = SaForm::Bce;
  FaForm fa_form = FaForm::Contrastive;
  double threshold_value = -1.0;  // logit-space target used by the mse form

  void validate() const {
    if (!(tau > 0)) throw std::invalid_argument("LossConfig: tau must be > 0");
    if (rho < 1) throw std::invalid_argument("LossConfig: rho must be >= 1");
    if (negatives < 1) throw std::invalid_argument("LossConfig: negatives must be >= 1");
    if (w_sa < 0 || w_fa < 0 || w_ma < 0)
      throw std::invalid_argument("LossConfig: weights must be >= 0");
  }

  io::json to_json() const {
    io::json j;
    j["tau"] = tau;
    j["rho"] = rho;
    j["negatives"] = negatives;
    j["w_sa"] = w_sa;
    j["w_fa"] = w_fa;
    j["w_ma"] = w_ma;
    j["sa_form"] = to_string(sa_form);
    j["fa_form"] = to_string(fa_form);
    j["threshold_value"] = threshold_value;
    return j;
  }
};

// Foreground/background region masks plus the logit-space target map used by
// the mse form: threshold_value on the foreground, 0 elsewhere.
struct RegionMasks {
  Tensor m_plus;   // [H,W] binary foreground
  Tensor m_minus;  // [H,W] binary background (complement)
  Tensor y_minus;  // [H,W] threshold_value on foreground, 0 elsewhere
};

inline RegionMasks build_region_masks(const Tensor& gt_mask, double threshold_value = -1.0) {
  if (gt_mask.shape.size() != 2)
    throw std::invalid_argument("build_region_masks: mask must be 2-D");
  RegionMasks rm;
  rm.m_plus = gt_mask;
  rm.m_minus = Tensor::zeros(gt_mask.shape);
  rm.y_minus = Tensor::zeros(gt_mask.shape);
  for (int64_t i = 0; i < gt_mask.numel(); ++i) {
    double v = gt_mask[i];
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument("build_region_masks: mask must be binary");
    rm.m_minus[i] = 1.0 - v;
    rm.y_minus[i] = threshold_value * v;
  }
  return rm;
}

// Semantic confusion on one frame's logits.
//
// bce form: probability-space targets over the whole masked maps. Foreground
// pixels are pushed toward the background class (target 0 on sigmoid(logit));
// background pixels are reinforced as background via the inverted-logit term
// with target 1. Pixels outside each term's own region contribute zero, and
// both terms are means over the full map.
//
// mse form: the literal two squared-error terms with the logit-space target
// map y_minus (threshold_value on the foreground).
inline Var semantic_confusion(const Var& logits, const RegionMasks& rm, SaForm form) {
  if (!all_finite(logits->value))
    throw std::invalid_argument("semantic_confusion: non-finite logits");
  if (logits->value.shape != rm.m_plus.shape)
    throw std::invalid_argument("semantic_confusion: logits/mask shape mismatch");
  if (form == SaForm::Bce) {
    double n = static_cast<double>(logits->value.numel());
    Var sp = ad::softplus(logits);  // BCE(sigmoid(l), 0) == softplus(l)
    Var term_fg = ad::scale(ad::sum_all(ad::mul(sp, ad::constant(rm.m_plus))), 1.0 / n);
    Var term_bg = ad::scale(ad::sum_all(ad::mul(sp, ad::constant(rm.m_minus))), 1.0 / n);
    return ad::add(term_fg, term_bg);
  }
  // mse form: squared error against the logit-space target, each term
  // restricted to its own region (the target map is foreground-supported)
  Var ym = ad::constant(rm.y_minus);
  Var t1 = ad::sub(ad::mul(logits, ad::constant(rm.m_plus)), ym);
  Var ones = ad::constant(Tensor::full(logits->value.shape, 1.0));
  Var t2 = ad::mul(ad::sub(ones, logits), ad::constant(rm.m_minus));
  return ad::add(ad::mean_all(ad::mul(t1, t1)), ad::mean_all(ad::mul(t2, t2)));
}

// Mean over frames; frames and region masks must be aligned.
inline Var semantic_confusion_mean(const std::vector<Var>& logits,
                                   const std::vector<RegionMasks>& rms, SaForm form) {
  if (logits.empty() || logits.size() != rms.size())
    throw std::invalid_argument("semantic_confusion_mean: bad arity");
  std::vector<Var> terms;
  terms.reserve(logits.size());
  for (size_t i = 0; i < logits.size(); ++i)
    terms.push_back(semantic_confusion(logits[i], rms[i], form));
  Var s = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) s = ad::add(s, terms[i]);
  return ad::scale(s, 1.0 / static_cast<double>(terms.size()));
}

// Benign-frame prototype: mean of encoder features over rho augmented views.
struct Prototype {
  Tensor e;        // flattened feature vector
  int rho = 0;
  uint64_t seed = 0;
};

// Augmentation family: identity, horizontal flip, +-4px translation,
// brightness +-0.1. One member sampled per view.
inline Tensor augment_frame(const Tensor& frame, Rng& rng) {
  int C = frame.shape[0], H = frame.shape[1], W = frame.shape[2];
  Tensor out = frame;
  switch (rng.below(4)) {
    case 0:  // identity
      break;
    case 1: {  // horizontal flip
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) out.at3(c, y, x) = frame.at3(c, y, W - 1 - x);
      break;
    }
    case 2: {  // translation, zero-padded
      int dx = static_cast<int>(rng.below(9)) - 4;
      int dy = static_cast<int>(rng.below(9)) - 4;
      out = Tensor::zeros(frame.shape);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            int sy = y - dy, sx = x - dx;
            if (sy >= 0 && sy < H && sx >= 0 && sx < W) out.at3(c, y, x) = frame.at3(c, sy, sx);
          }
      break;
    }
    default: {  // brightness
      double b = rng.pm(0.1);
      for (double& v : out.data) v = std::min(std::max(v + b, 0.0), 1.0);
      break;
    }
  }
  return out;
}

inline Prototype prototype(const Tensor& frame, int rho, uint64_t seed,
                           const model::Model& net) {
  if (rho < 1) throw std::invalid_argument("prototype: rho must be >= 1");
  Rng base(seed);
  Tensor acc;
  for (int j = 0; j < rho; ++j) {
    Rng rng = base.fork("aug", static_cast<uint64_t>(j));
    Tensor view = rho == 1 ? frame : augment_frame(frame, rng);
    Tensor feat = net.encode_image(ad::constant(view))->value;
    if (j == 0)
      acc = feat;
    else
      for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += feat[i];
  }
  for (double& v : acc.data) v /= static_cast<double>(rho);
  Prototype p;
  p.e = Tensor({static_cast<int>(acc.numel())}, std::move(acc.data));
  p.rho = rho;
  p.seed = seed;
  return p;
}

// Feature shift for one frame.
//
// cosine form: cos(adv, prototype). contrastive form: log-softmax of the
// prototype term over [prototype, negatives] at temperature tau. Either way
// the optimizer minimizes the returned value, which decreases cos(adv, proto)
// and (contrastive) increases similarity to the negatives.
inline Var feature_shift(const Var& adv_feat, const Prototype& proto,
                         const std::vector<Tensor>& negatives, double tau, FaForm form) {
  Var flat = adv_feat->value.shape.size() == 1
                 ? adv_feat
                 : ad::reshape(adv_feat, {static_cast<int>(adv_feat->value.numel())});
  Var proto_v = ad::constant(proto.e);
  Var cos_p = ad::cosine(flat, proto_v);
  if (form == FaForm::Cosine) return cos_p;
  if (negatives.empty())
    throw std::invalid_argument("feature_shift: contrastive form needs negatives");
  std::vector<Var> terms;
  terms.push_back(ad::scale(cos_p, 1.0 / tau));
  for (const auto& n : negatives) {
    Var nv = ad::constant(Tensor({static_cast<int>(n.numel())}, n.data));
    terms.push_back(ad::scale(ad::cosine(flat, nv), 1.0 / tau));
  }
  // log softmax of the prototype term over [prototype, negatives]
  return ad::sub(terms[0], ad::logsumexp(ad::stack_scalars(terms)));
}

// Mean cosine similarity over consecutive adversarial feature pairs.
// Minimizing drives consecutive frames apart in feature space.
inline Var memory_misalign(const std::vector<Var>& adv_feats) {
  if (adv_feats.size() < 2)
    throw std::invalid_argument("memory_misalign: need at least 2 frames");
  std::vector<Var> sims;
  for (size_t i = 0; i + 1 < adv_feats.size(); ++i)
    sims.push_back(ad::cosine(adv_feats[i], adv_feats[i + 1]));
  Var s = sims[0];
  for (size_t i = 1; i < sims.size(); ++i) s = ad::add(s, sims[i]);
  return ad::scale(s, 1.0 / static_cast<double>(sims.size()));
}

// Weighted total. j_ma may be null (single-frame/image task).
inline Var total_loss(const Var& j_sa, const Var& j_fa, const Var& j_ma, const LossConfig& cfg) {
  Var t = ad::add(ad::scale(j_sa, cfg.w_sa), ad::scale(j_fa, cfg.w_fa));
  if (j_ma) t = ad::add(t, ad::scale(j_ma, cfg.w_ma));
  return t;
}

}  // namespace uvap::losses
