#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvap/io.hpp"
#include "uvap/rng.hpp"
#include "uvap/tensor.hpp"

// Deterministic synthetic video clips: one moving shape over a procedural
// background, with exact rasterized ground-truth masks.
namespace uvap::data {

namespace fs = std::filesystem;
using io::json;

enum class ShapeKind { Circle, Square, Triangle };
enum class Background { Solid, Gradient, Noise };
enum class Task { Video, Image };

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    default: return "triangle";
  }
}
inline const char* to_string(Background b) {
  switch (b) {
    case Background::Solid: return "solid";
    case Background::Gradient: return "gradient";
    default: return "noise";
  }
}
inline const char* to_string(Task t) { return t == Task::Video ? "video" : "image"; }

inline ShapeKind shape_kind_from(const std::string& s) {
  if (s == "circle") return ShapeKind::Circle;
  if (s == "square") return ShapeKind::Square;
  if (s == "triangle") return ShapeKind::Triangle;
  throw std::invalid_argument("unknown shape_kind: " + s);
}
inline Background background_from(const std::string& s) {
  if (s == "solid") return Background::Solid;
  if (s == "gradient") return Background::Gradient;
  if (s == "noise") return Background::Noise;
  throw std::invalid_argument("unknown background: " + s);
}
inline Task task_from(const std::string& s) {
  if (s == "video") return Task::Video;
  if (s == "image") return Task::Image;
  throw std::invalid_argument("unknown task: " + s);
}

struct ClipSpec {
  int frame_count = 15;
  int height = 64;
  int width = 64;
  ShapeKind shape_kind = ShapeKind::Circle;
  double shape_size = 0.3;  // fraction of min(H,W); shape radius = shape_size*min/2
  double velocity[2] = {1.5, -1.0};  // pixels/frame (vx, vy)
  Background background = Background::Solid;
  uint64_t seed = 0;

  double radius_px() const { return shape_size * std::min(height, width) * 0.5; }

  void validate() const {
    if (frame_count < 1) throw std::invalid_argument("ClipSpec: frame_count must be >= 1");
    if (height < 8 || width < 8)
      throw std::invalid_argument("ClipSpec: invalid dimensions (need height,width >= 8)");
    if (!(shape_size > 0.1 && shape_size < 0.4))
      throw std::invalid_argument("ClipSpec: shape_size must be in (0.1, 0.4)");
    double margin = radius_px() + 2.0;
    if (2.0 * margin >= std::min(height, width))
      throw std::invalid_argument("ClipSpec: shape does not fit inside the frame");
    double vmax = std::min(height, width) / 4.0;
    if (std::fabs(velocity[0]) > vmax || std::fabs(velocity[1]) > vmax)
      throw std::invalid_argument("ClipSpec: velocity too large for frame size");
  }
};

struct VideoClip {
  ClipSpec spec;
  std::vector<Tensor> frames;  // each [3,H,W], values in [0,1]
  std::vector<Tensor> masks;   // each [H,W], values 0/1
};

// Signed distance to the shape boundary (>0 inside), used by the generator
// (membership = sdf >= 0 at the pixel center) and by tests as the analytic
// oracle for the mask/shape consistency invariant.
inline double shape_sdf(ShapeKind kind, double cx, double cy, double r, double px, double py) {
  double dx = px - cx, dy = py - cy;
  switch (kind) {
    case ShapeKind::Circle:
      return r - std::sqrt(dx * dx + dy * dy);
    case ShapeKind::Square:
      return r - std::max(std::fabs(dx), std::fabs(dy));
    case ShapeKind::Triangle: {
      // Equilateral, vertex up, circumradius r. Inside = min over the three
      // edge half-planes (positive inward).
      const double s3 = 0.8660254037844386;  // sqrt(3)/2
      double ax = cx, ay = cy - r;
      double bx = cx + r * s3, by = cy + r * 0.5;
      double ex = cx - r * s3, ey = cy + r * 0.5;
      auto edge = [&](double x1, double y1, double x2, double y2) {
        // distance to line through (x1,y1)-(x2,y2), positive on the interior
        // side (vertices wound clockwise in image coords, y down)
        double nx = y1 - y2, ny = x2 - x1;
        double len = std::sqrt(nx * nx + ny * ny);
        return ((px - x1) * nx + (py - y1) * ny) / len;
      };
      double d1 = edge(ax, ay, bx, by);
      double d2 = edge(bx, by, ex, ey);
      double d3 = edge(ex, ey, ax, ay);
      return std::min({d1, d2, d3});
    }
  }
  return -1.0;
}

inline double luminance(const double c[3]) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

// Shape centroid per frame with reflection so the shape stays fully inside.
inline std::vector<std::pair<double, double>> trajectory(const ClipSpec& spec) {
  Rng base(spec.seed);
  Rng rng = base.fork("trajectory");
  double margin = spec.radius_px() + 2.0;
  double lox = margin, hix = spec.width - margin;
  double loy = margin, hiy = spec.height - margin;
  double cx = rng.range(lox, hix);
  double cy = rng.range(loy, hiy);
  double vx = spec.velocity[0], vy = spec.velocity[1];
  std::vector<std::pair<double, double>> out;
  out.reserve(static_cast<size_t>(spec.frame_count));
  for (int f = 0; f < spec.frame_count; ++f) {
    out.emplace_back(cx, cy);
    cx += vx;
    cy += vy;
    while (cx < lox || cx > hix) {
      if (cx < lox) cx = 2 * lox - cx;
      if (cx > hix) cx = 2 * hix - cx;
      vx = -vx;
    }
    while (cy < loy || cy > hiy) {
      if (cy < loy) cy = 2 * loy - cy;
      if (cy > hiy) cy = 2 * hiy - cy;
      vy = -vy;
    }
  }
  return out;
}

inline VideoClip generate_clip(const ClipSpec& spec) {
  spec.validate();
  Rng base(spec.seed);
  int H = spec.height, W = spec.width;

  // Background colors live in a narrow luminance band so the shape color can
  // sit a guaranteed margin outside it everywhere in the frame.
  Rng brng = base.fork("background");
  double band_center = brng.range(0.3, 0.7);
  auto band_color = [&](Rng& rng, double out[3]) {
    double target = band_center + rng.pm(0.1);
    for (int ch = 0; ch < 3; ++ch) out[ch] = rng.range(0.2, 0.9);
    double lum = luminance(out);
    for (int ch = 0; ch < 3; ++ch)
      out[ch] = std::min(std::max(out[ch] * target / lum, 0.0), 1.0);
  };

  Tensor bg = Tensor::zeros({3, H, W});
  switch (spec.background) {
    case Background::Solid: {
      double c[3];
      band_color(brng, c);
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) bg.at3(ch, y, x) = c[ch];
      break;
    }
    case Background::Gradient: {
      double c0[3], c1[3];
      band_color(brng, c0);
      band_color(brng, c1);
      double dx, dy;
      do {
        dx = brng.pm(1.0);
        dy = brng.pm(1.0);
      } while (dx * dx + dy * dy < 0.25);
      double norm = std::sqrt(dx * dx + dy * dy);
      dx /= norm;
      dy /= norm;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double t = ((x + 0.5) / W - 0.5) * dx + ((y + 0.5) / H - 0.5) * dy + 0.5;
          t = std::min(std::max(t, 0.0), 1.0);
          for (int ch = 0; ch < 3; ++ch) bg.at3(ch, y, x) = c0[ch] + t * (c1[ch] - c0[ch]);
        }
      break;
    }
    case Background::Noise: {
      // Two-octave value noise: bilinear interpolation of seeded lattices.
      double c0[3], c1[3];
      band_color(brng, c0);
      band_color(brng, c1);
      auto lattice = [&](int n, Rng r) {
        std::vector<double> g(static_cast<size_t>(n) * n);
        for (auto& v : g) v = r.real01();
        return g;
      };
      int n1 = 5, n2 = 9;
      auto g1 = lattice(n1, brng.fork("oct1"));
      auto g2 = lattice(n2, brng.fork("oct2"));
      auto sample = [](const std::vector<double>& g, int n, double u, double v) {
        double fu = u * (n - 1), fv = v * (n - 1);
        int iu = std::min(static_cast<int>(fu), n - 2);
        int iv = std::min(static_cast<int>(fv), n - 2);
        double au = fu - iu, av = fv - iv;
        double v00 = g[static_cast<size_t>(iv) * n + iu], v01 = g[static_cast<size_t>(iv) * n + iu + 1];
        double v10 = g[(static_cast<size_t>(iv) + 1) * n + iu], v11 = g[(static_cast<size_t>(iv) + 1) * n + iu + 1];
        return (v00 * (1 - au) + v01 * au) * (1 - av) + (v10 * (1 - au) + v11 * au) * av;
      };
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double u = (x + 0.5) / W, v = (y + 0.5) / H;
          double t = 0.65 * sample(g1, n1, u, v) + 0.35 * sample(g2, n2, u, v);
          for (int ch = 0; ch < 3; ++ch) bg.at3(ch, y, x) = c0[ch] + t * (c1[ch] - c0[ch]);
        }
      break;
    }
  }

  // Shape color: near-gray at a luminance pushed just outside the background
  // band. The margin is deliberately moderate: large enough to learn from,
  // small enough that bounded perturbations remain meaningful.
  Rng crng = base.fork("colors");
  double side = band_center < 0.5 ? 1.0 : -1.0;
  double lum_s = band_center + side * (0.22 + 0.06 * crng.real01());
  double sc[3];
  for (int ch = 0; ch < 3; ++ch)
    sc[ch] = std::min(std::max(lum_s + crng.pm(0.04), 0.02), 0.98);

  auto centers = trajectory(spec);
  double r = spec.radius_px();
  Rng trng = base.fork("texture");
  Rng frng = base.fork("flicker");

  VideoClip clip;
  clip.spec = spec;
  clip.frames.reserve(static_cast<size_t>(spec.frame_count));
  clip.masks.reserve(static_cast<size_t>(spec.frame_count));
  for (int f = 0; f < spec.frame_count; ++f) {
    auto [cx, cy] = centers[static_cast<size_t>(f)];
    Tensor frame = bg;
    Tensor mask = Tensor::zeros({H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (shape_sdf(spec.shape_kind, cx, cy, r, x + 0.5, y + 0.5) >= 0.0) {
          mask.at2(y, x) = 1.0;
          for (int ch = 0; ch < 3; ++ch) frame.at3(ch, y, x) = sc[ch];
        }
      }
    // per-frame illumination flicker plus light pixel texture, so consecutive
    // frames differ the way real video does
    double flicker = frng.pm(0.05);
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double v = frame.at3(ch, y, x) + flicker + trng.pm(0.04);
          frame.at3(ch, y, x) = std::min(std::max(v, 0.0), 1.0);
        }
    clip.frames.push_back(std::move(frame));
    clip.masks.push_back(std::move(mask));
  }
  return clip;
}

// ---------------------------------------------------------------------------
// On-disk clip format: <dir>/meta.json + frames.bin + masks.bin (f32le,
// frame-major then channel-major then row-major).
// ---------------------------------------------------------------------------

inline json spec_to_json(const ClipSpec& s) {
  json j;
  j["frame_count"] = s.frame_count;
  j["height"] = s.height;
  j["width"] = s.width;
  j["shape_kind"] = to_string(s.shape_kind);
  j["shape_size"] = s.shape_size;
  j["velocity"] = {s.velocity[0], s.velocity[1]};
  j["background"] = to_string(s.background);
  j["seed"] = s.seed;
  return j;
}

inline ClipSpec spec_from_json(const json& j) {
  ClipSpec s;
  auto need = [&](const char* key) -> const json& {
    if (!j.contains(key))
      throw std::runtime_error(std::string("meta.json: missing field '") + key + "'");
    return j.at(key);
  };
  try {
    s.frame_count = need("frame_count").get<int>();
    s.height = need("height").get<int>();
    s.width = need("width").get<int>();
    s.shape_kind = shape_kind_from(need("shape_kind").get<std::string>());
    s.shape_size = need("shape_size").get<double>();
    auto v = need("velocity").get<std::vector<double>>();
    if (v.size() != 2) throw std::runtime_error("meta.json: field 'velocity' must have 2 entries");
    s.velocity[0] = v[0];
    s.velocity[1] = v[1];
    s.background = background_from(need("background").get<std::string>());
    s.seed = need("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("meta.json: invalid field value: ") + e.what());
  }
  return s;
}

inline void save_clip(const VideoClip& clip, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_text_atomic(dir / "meta.json", spec_to_json(clip.spec).dump(2) + "\n");
  std::vector<double> fbuf, mbuf;
  for (const auto& f : clip.frames) fbuf.insert(fbuf.end(), f.data.begin(), f.data.end());
  for (const auto& m : clip.masks) mbuf.insert(mbuf.end(), m.data.begin(), m.data.end());
  io::write_file_atomic(dir / "frames.bin", io::doubles_to_f32le(fbuf));
  io::write_file_atomic(dir / "masks.bin", io::doubles_to_f32le(mbuf));
}

inline VideoClip load_clip(const fs::path& dir) {
  auto meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw std::runtime_error("missing clip metadata: " + meta_path.string());
  json meta;
  try {
    auto buf = io::read_file(meta_path);
    meta = json::parse(buf.begin(), buf.end());
  } catch (const json::exception& e) {
    throw std::runtime_error("meta.json: parse error: " + std::string(e.what()));
  }
  ClipSpec spec = spec_from_json(meta);
  spec.validate();
  size_t n = static_cast<size_t>(spec.frame_count);
  size_t hw = static_cast<size_t>(spec.height) * spec.width;

  auto fbuf = io::read_file(dir / "frames.bin");
  if (fbuf.size() != n * 3 * hw * 4)
    throw std::runtime_error("frames.bin: expected " + std::to_string(n * 3 * hw * 4) +
                             " bytes, got " + std::to_string(fbuf.size()) + " (truncated or corrupt)");
  auto mbuf = io::read_file(dir / "masks.bin");
  if (mbuf.size() != n * hw * 4)
    throw std::runtime_error("masks.bin: expected " + std::to_string(n * hw * 4) + " bytes, got " +
                             std::to_string(mbuf.size()) + " (truncated or corrupt)");

  VideoClip clip;
  clip.spec = spec;
  for (size_t f = 0; f < n; ++f) {
    Tensor frame({3, spec.height, spec.width},
                 io::f32le_to_doubles(fbuf.data() + f * 3 * hw * 4, 3 * hw));
    Tensor mask({spec.height, spec.width}, io::f32le_to_doubles(mbuf.data() + f * hw * 4, hw));
    for (double v : mask.data)
      if (v != 0.0 && v != 1.0) throw std::runtime_error("masks.bin: non-binary mask value");
    clip.frames.push_back(std::move(frame));
    clip.masks.push_back(std::move(mask));
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct ManifestClip {
  std::string id;
  std::string rel_path;
  std::string split;            // "train" | "test"
  std::vector<int> frame_ids;   // image task: frames sampled from the clip
};

struct DatasetManifest {
  uint64_t global_seed = 0;
  Task task = Task::Video;
  std::vector<ManifestClip> clips;

  std::vector<const ManifestClip*> split(const std::string& which) const {
    std::vector<const ManifestClip*> out;
    for (const auto& c : clips)
      if (c.split == which) out.push_back(&c);
    return out;
  }
};

struct DatasetOptions {
  int frame_count = 15;
  int height = 64;
  int width = 64;
  int frames_per_image_unit = 5;  // image task: frames sampled per clip
};

// Clip specs + manifest, deterministic in base_seed. Per-clip seed is
// base_seed + index; split is 80/20 by index.
inline std::pair<DatasetManifest, std::vector<ClipSpec>> generate_dataset(
    int n_clips, uint64_t base_seed, Task task, const DatasetOptions& opt = {}) {
  if (n_clips < 2)
    throw std::invalid_argument("generate_dataset: need at least 2 clips to split train/test");
  if (std::min(opt.height, opt.width) < 16)
    throw std::invalid_argument("generate_dataset: frames must be at least 16x16");
  // keep the shape radius >= 2.5px so every rasterized mask is non-empty
  double lo_size = std::max(0.18, 5.0 / std::min(opt.height, opt.width));
  double hi_size = std::max(0.34, lo_size + 0.02);
  DatasetManifest man;
  man.global_seed = base_seed;
  man.task = task;
  std::vector<ClipSpec> specs;
  // 80/20 by index, test count rounded down (10 -> 8+2, 12 -> 10+2)
  int n_test = std::max(1, n_clips / 5);
  int n_train = n_clips - n_test;
  for (int i = 0; i < n_clips; ++i) {
    ClipSpec s;
    s.frame_count = opt.frame_count;
    s.height = opt.height;
    s.width = opt.width;
    s.seed = base_seed + static_cast<uint64_t>(i);
    Rng rng = Rng(s.seed).fork("clipspec");
    s.shape_kind = static_cast<ShapeKind>(rng.below(3));
    s.shape_size = rng.range(lo_size, hi_size);
    do {
      s.velocity[0] = rng.pm(3.5);
      s.velocity[1] = rng.pm(3.5);
    } while (std::max(std::fabs(s.velocity[0]), std::fabs(s.velocity[1])) < 1.5);
    s.background = static_cast<Background>(rng.below(3));

    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "clip%03d", i);
    ManifestClip mc;
    mc.id = idbuf;
    mc.rel_path = std::string("clips/") + idbuf;
    mc.split = i < n_train ? "train" : "test";
    if (task == Task::Image) {
      int k = std::min(opt.frames_per_image_unit, s.frame_count);
      // sample without replacement
      std::vector<int> all(static_cast<size_t>(s.frame_count));
      for (int f = 0; f < s.frame_count; ++f) all[static_cast<size_t>(f)] = f;
      Rng pick = Rng(s.seed).fork("imgpick");
      for (int j = 0; j < k; ++j) {
        int m = static_cast<int>(pick.below(static_cast<uint64_t>(all.size())));
        mc.frame_ids.push_back(all[static_cast<size_t>(m)]);
        all.erase(all.begin() + m);
      }
      std::sort(mc.frame_ids.begin(), mc.frame_ids.end());
    }
    man.clips.push_back(std::move(mc));
    specs.push_back(s);
  }
  return {man, specs};
}

inline json manifest_to_json(const DatasetManifest& man) {
  json j;
  j["format"] = "uvap-manifest-v1";
  j["global_seed"] = man.global_seed;
  j["task"] = to_string(man.task);
  json clips = json::array();
  for (const auto& c : man.clips) {
    json e;
    e["id"] = c.id;
    e["path"] = c.rel_path;
    e["split"] = c.split;
    if (!c.frame_ids.empty()) e["frames"] = c.frame_ids;
    clips.push_back(e);
  }
  j["clips"] = clips;
  return j;
}

inline DatasetManifest manifest_from_json(const json& j) {
  if (!j.contains("format") || j["format"] != "uvap-manifest-v1")
    throw std::runtime_error("manifest: missing or unknown 'format'");
  DatasetManifest man;
  man.global_seed = j.at("global_seed").get<uint64_t>();
  man.task = task_from(j.at("task").get<std::string>());
  for (const auto& e : j.at("clips")) {
    ManifestClip c;
    c.id = e.at("id").get<std::string>();
    c.rel_path = e.at("path").get<std::string>();
    c.split = e.at("split").get<std::string>();
    if (c.split != "train" && c.split != "test")
      throw std::runtime_error("manifest: clip '" + c.id + "' has invalid split '" + c.split + "'");
    if (e.contains("frames")) c.frame_ids = e["frames"].get<std::vector<int>>();
    man.clips.push_back(std::move(c));
  }
  return man;
}

// Write manifest + all clips under root. Returns the manifest path.
inline fs::path materialize_dataset(const DatasetManifest& man, const std::vector<ClipSpec>& specs,
                                    const fs::path& root) {
  fs::create_directories(root);
  for (size_t i = 0; i < specs.size(); ++i) {
    VideoClip clip = generate_clip(specs[i]);
    save_clip(clip, root / man.clips[i].rel_path);
  }
  fs::path mpath = root / "manifest.json";
  io::write_text_atomic(mpath, manifest_to_json(man).dump(2) + "\n");
  return mpath;
}

inline DatasetManifest load_manifest(const fs::path& manifest_path) {
  auto buf = io::read_file(manifest_path);
  json j;
  try {
    j = json::parse(buf.begin(), buf.end());
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest: parse error: " + std::string(e.what()));
  }
  DatasetManifest man = manifest_from_json(j);
  // verify referenced clips exist
  fs::path root = manifest_path.parent_path();
  std::string missing;
  for (const auto& c : man.clips)
    if (!fs::exists(root / c.rel_path / "meta.json"))
      missing += (missing.empty() ? "" : ", ") + (root / c.rel_path).string();
  if (!missing.empty())
    throw std::runtime_error("manifest references missing clips: " + missing);
  return man;
}

inline VideoClip load_manifest_clip(const fs::path& manifest_path, const ManifestClip& c) {
  return load_clip(manifest_path.parent_path() / c.rel_path);
}

}  // namespace uvap::data
