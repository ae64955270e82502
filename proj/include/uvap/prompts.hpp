#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "uvap/rng.hpp"
#include "uvap/tensor.hpp"

namespace uvap::prompts {

using nlohmann::json;

enum class PromptKind { Point, Box };

struct Prompt {
  PromptKind kind = PromptKind::Point;
  // point: (x,y); box: (x1,y1)-(x2,y2) with x1<x2, y1<y2 (degenerate allowed)
  double x = 0, y = 0;
  double x2 = 0, y2 = 0;

  static Prompt point(double px, double py) {
    Prompt p;
    p.kind = PromptKind::Point;
    p.x = px;
    p.y = py;
    return p;
  }
  static Prompt box(double x1, double y1, double bx2, double by2) {
    if (bx2 < x1 || by2 < y1) throw std::invalid_argument("Prompt: box corners out of order");
    Prompt p;
    p.kind = PromptKind::Box;
    p.x = x1;
    p.y = y1;
    p.x2 = bx2;
    p.y2 = by2;
    return p;
  }

  void validate(int height, int width) const {
    auto in_bounds = [&](double px, double py) {
      return px >= 0 && px < width && py >= 0 && py < height;
    };
    if (!in_bounds(x, y) || (kind == PromptKind::Box && !in_bounds(x2, y2)))
      throw std::invalid_argument("Prompt: coordinates out of frame bounds");
  }

  json to_json() const {
    json j;
    if (kind == PromptKind::Point) {
      j["kind"] = "point";
      j["x"] = x;
      j["y"] = y;
    } else {
      j["kind"] = "box";
      j["x1"] = x;
      j["y1"] = y;
      j["x2"] = x2;
      j["y2"] = y2;
    }
    return j;
  }

  static Prompt from_json(const json& j) {
    std::string k = j.at("kind").get<std::string>();
    if (k == "point") return point(j.at("x").get<double>(), j.at("y").get<double>());
    if (k == "box")
      return box(j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(),
                 j.at("y2").get<double>());
    throw std::invalid_argument("Prompt: unknown kind '" + k + "'");
  }
};

struct ScanRegion {
  int x0, y0, x1, y1;  // half-open [x0,x1) x [y0,y1)
  Prompt prompt;
};

// Even tiling of the frame into m = s*s regions, one random point prompt per
// region. Boundaries use floor arithmetic, so any H,W partitions exactly.
struct ScanGrid {
  int m = 0;
  int height = 0, width = 0;
  std::vector<ScanRegion> regions;
};

inline ScanGrid scan_targets(int height, int width, int m, uint64_t seed) {
  if (m < 1) throw std::invalid_argument("scan_targets: m must be >= 1");
  int s = static_cast<int>(std::llround(std::sqrt(static_cast<double>(m))));
  if (s * s != m) throw std::invalid_argument("scan_targets: m must be a perfect square");
  if (s > height || s > width)
    throw std::invalid_argument("scan_targets: more regions per side than pixels");
  ScanGrid grid;
  grid.m = m;
  grid.height = height;
  grid.width = width;
  Rng base(seed);
  for (int ry = 0; ry < s; ++ry)
    for (int rx = 0; rx < s; ++rx) {
      ScanRegion r;
      r.x0 = (rx * width) / s;
      r.x1 = ((rx + 1) * width) / s;
      r.y0 = (ry * height) / s;
      r.y1 = ((ry + 1) * height) / s;
      Rng rng = base.fork("region", static_cast<uint64_t>(ry) * static_cast<uint64_t>(s) + rx);
      double px = r.x0 + static_cast<double>(rng.below(static_cast<uint64_t>(r.x1 - r.x0)));
      double py = r.y0 + static_cast<double>(rng.below(static_cast<uint64_t>(r.y1 - r.y0)));
      r.prompt = Prompt::point(px, py);
      grid.regions.push_back(r);
    }
  return grid;
}

// Evaluation prompts sampled from a ground-truth mask: points uniformly over
// foreground pixels; boxes are the tight bounding box jittered by up to
// +-10% of its size per side, clipped to the frame.
inline std::vector<Prompt> sample_eval_prompts(const Tensor& mask, PromptKind kind, int count,
                                               uint64_t seed) {
  if (mask.shape.size() != 2) throw std::invalid_argument("sample_eval_prompts: mask must be 2-D");
  int H = mask.shape[0], W = mask.shape[1];
  std::vector<std::pair<int, int>> fg;
  int minx = W, maxx = -1, miny = H, maxy = -1;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (mask.at2(y, x) != 0.0) {
        fg.emplace_back(x, y);
        minx = std::min(minx, x);
        maxx = std::max(maxx, x);
        miny = std::min(miny, y);
        maxy = std::max(maxy, y);
      }
  if (fg.empty()) throw std::invalid_argument("sample_eval_prompts: mask has no foreground");
  Rng base(seed);
  std::vector<Prompt> out;
  for (int i = 0; i < count; ++i) {
    Rng rng = base.fork("prompt", static_cast<uint64_t>(i));
    if (kind == PromptKind::Point) {
      auto [x, y] = fg[rng.below(fg.size())];
      out.push_back(Prompt::point(x, y));
    } else {
      double bw = maxx - minx + 1;
      double bh = maxy - miny + 1;
      double x1 = minx + rng.pm(0.1 * bw);
      double y1 = miny + rng.pm(0.1 * bh);
      double x2 = maxx + rng.pm(0.1 * bw);
      double y2 = maxy + rng.pm(0.1 * bh);
      x1 = std::min(std::max(x1, 0.0), static_cast<double>(W - 1));
      x2 = std::min(std::max(x2, 0.0), static_cast<double>(W - 1));
      y1 = std::min(std::max(y1, 0.0), static_cast<double>(H - 1));
      y2 = std::min(std::max(y2, 0.0), static_cast<double>(H - 1));
      if (x2 < x1) std::swap(x1, x2);
      if (y2 < y1) std::swap(y1, y2);
      out.push_back(Prompt::box(x1, y1, x2, y2));
    }
  }
  return out;
}

}  // namespace uvap::prompts
