#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "uvap/evalharness.hpp"
#include "uvap/model.hpp"

// Two input-side/model-side defenses: global magnitude pruning and
// deterministic input corruption (spatter / saturate), plus the sweep harness.
namespace uvap::defense {

enum class CorruptionKind { Spatter, Saturate };

inline const char* to_string(CorruptionKind k) {
  return k == CorruptionKind::Spatter ? "spatter" : "saturate";
}
inline CorruptionKind corruption_from(const std::string& s) {
  if (s == "spatter") return CorruptionKind::Spatter;
  if (s == "saturate") return CorruptionKind::Saturate;
  throw std::invalid_argument("unknown corruption kind: " + s);
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::Spatter;
  int severity = 0;  // 0..5, 0 = identity
  uint64_t seed = 0;

  void validate() const {
    if (severity < 0 || severity > 5)
      throw std::invalid_argument("CorruptionSpec: severity must be in 0..5");
  }
};

// Zero the floor(ratio*P) smallest-magnitude weights across all prunable
// arrays. Ties break by traversal order (arrays in name order, elements in
// flat order). The input is not modified.
inline model::ModelParams prune_model(const model::ModelParams& params, double ratio) {
  if (ratio < 0.0 || ratio > 0.9)
    throw std::invalid_argument("prune_model: ratio must be in [0, 0.9]");
  model::ModelParams out = params;
  int64_t total = out.prunable_count();
  int64_t k = static_cast<int64_t>(std::floor(ratio * static_cast<double>(total)));
  if (k <= 0) return out;

  // (magnitude, array index, element index) in traversal order
  std::vector<std::tuple<double, int, int64_t>> refs;
  refs.reserve(static_cast<size_t>(total));
  std::vector<std::string> names;
  for (const auto& [name, t] : out.arrays)
    if (out.prunable.at(name)) names.push_back(name);
  for (size_t ai = 0; ai < names.size(); ++ai) {
    Tensor& t = out.arrays.at(names[ai]);
    for (int64_t i = 0; i < t.numel(); ++i)
      refs.emplace_back(std::fabs(t[i]), static_cast<int>(ai), i);
  }
  std::stable_sort(refs.begin(), refs.end(),
                   [](const auto& a, const auto& b) { return std::get<0>(a) < std::get<0>(b); });
  for (int64_t j = 0; j < k; ++j) {
    auto [mag, ai, i] = refs[static_cast<size_t>(j)];
    out.arrays.at(names[static_cast<size_t>(ai)])[i] = 0.0;
  }
  return out;
}

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  double c = mx - mn;
  s = mx <= 0.0 ? 0.0 : c / mx;
  if (c <= 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = std::fmod((g - b) / c, 6.0);
  } else if (mx == g) {
    h = (b - r) / c + 2.0;
  } else {
    h = (r - g) / c + 4.0;
  }
  h *= 60.0;
  if (h < 0) h += 360.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  double c = v * s;
  double hp = h / 60.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  if (hp < 1) { r1 = c; g1 = x; }
  else if (hp < 2) { r1 = x; g1 = c; }
  else if (hp < 3) { g1 = c; b1 = x; }
  else if (hp < 4) { g1 = x; b1 = c; }
  else if (hp < 5) { r1 = x; b1 = c; }
  else { r1 = c; b1 = x; }
  double m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

}  // namespace detail

// Deterministic corruption of one [3,H,W] image in [0,1].
//
// spatter: 4*s random disks of radius 1+s px blended at opacity 0.15*s.
// saturate: scale the HSV saturation channel by {1.0,1.3,1.6,2.0,2.5,3.0}[s].
// Severity 0 returns the input bit-exactly.
inline Tensor corrupt(const Tensor& image, const CorruptionSpec& spec) {
  spec.validate();
  if (image.shape.size() != 3 || image.shape[0] != 3)
    throw std::invalid_argument("corrupt: image must be [3,H,W]");
  if (spec.severity == 0) return image;

  int H = image.shape[1], W = image.shape[2];
  Tensor out = image;
  if (spec.kind == CorruptionKind::Spatter) {
    int n = 4 * spec.severity;
    double radius = 1.0 + spec.severity;
    double opacity = 0.15 * spec.severity;
    Rng rng = Rng(spec.seed).fork("spatter");
    for (int i = 0; i < n; ++i) {
      double cx = rng.range(0.0, static_cast<double>(W));
      double cy = rng.range(0.0, static_cast<double>(H));
      double col[3] = {rng.real01(), rng.real01(), rng.real01()};
      int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
      int x1 = std::min(W - 1, static_cast<int>(std::ceil(cx + radius + 1)));
      int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
      int y1 = std::min(H - 1, static_cast<int>(std::ceil(cy + radius + 1)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          if (dx * dx + dy * dy <= radius * radius)
            for (int ch = 0; ch < 3; ++ch)
              out.at3(ch, y, x) = (1.0 - opacity) * out.at3(ch, y, x) + opacity * col[ch];
        }
    }
  } else {
    static const double factors[6] = {1.0, 1.3, 1.6, 2.0, 2.5, 3.0};
    double f = factors[spec.severity];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double h, s, v;
        detail::rgb_to_hsv(out.at3(0, y, x), out.at3(1, y, x), out.at3(2, y, x), h, s, v);
        s = std::min(s * f, 1.0);
        double r, g, b;
        detail::hsv_to_rgb(h, s, v, r, g, b);
        out.at3(0, y, x) = r;
        out.at3(1, y, x) = g;
        out.at3(2, y, x) = b;
      }
  }
  for (double& v : out.data) v = std::min(std::max(v, 0.0), 1.0);
  return out;
}

// Benign + adversarial evaluation per defense level. Pruning levels are
// ratios in [0,0.9]; corruption levels are severities 0..5.
inline std::vector<eval::EvalRow> defense_sweep(const model::ModelParams& params,
                                                const data::DatasetManifest& man,
                                                const io::fs::path& manifest_path,
                                                const eval::PerturbationSet& pert,
                                                const std::string& defense_kind,
                                                const std::vector<double>& levels,
                                                const eval::EvalOptions& base_opt,
                                                uint64_t corruption_seed = 0) {
  std::vector<eval::EvalRow> rows;
  for (double level : levels) {
    eval::EvalOptions opt = base_opt;
    opt.defense_kind = defense_kind;
    opt.defense_level = level;
    if (defense_kind == "prune") {
      model::ModelParams pruned = prune_model(params, level);
      auto r = eval::evaluate(pruned, man, manifest_path, &pert, opt);
      rows.insert(rows.end(), r.begin(), r.end());
    } else {
      CorruptionSpec cs;
      cs.kind = corruption_from(defense_kind);
      cs.severity = static_cast<int>(std::llround(level));
      cs.seed = corruption_seed;
      opt.transform = [cs](const Tensor& frame) { return corrupt(frame, cs); };
      auto r = eval::evaluate(params, man, manifest_path, &pert, opt);
      rows.insert(rows.end(), r.begin(), r.end());
    }
  }
  return rows;
}

}  // namespace uvap::defense
