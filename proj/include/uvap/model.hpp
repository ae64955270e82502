#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvap/autodiff.hpp"
#include "uvap/io.hpp"
#include "uvap/prompts.hpp"
#include "uvap/rng.hpp"
#include "uvap/tensor.hpp"

// Prompt-conditioned video segmentation model: conv image encoder, sinusoidal
// prompt encoder, FIFO memory bank with single-head cross attention, and a
// transposed-conv mask decoder. Differentiable end to end with respect to the
// input frames.
namespace uvap::model {

using ad::Var;
using prompts::Prompt;
using prompts::PromptKind;

struct ModelConfig {
  int height = 64;
  int width = 64;
  int in_channels = 3;
  int enc1 = 16;   // encoder stage-1 channels
  int enc2 = 32;   // encoder stage-2 channels
  int feat = 32;   // feature/attention width d (must be divisible by 4)
  int dec1 = 16;   // decoder stage-1 channels
  int dec2 = 8;    // decoder stage-2 channels
  int memory_capacity = 4;
  double act_gain = 4.0;   // steepness of the deeper conv activations
  bool enc_attention = true;     // self-attention block in the encoder
  double attn_gain = 3.0;        // sharpness of the encoder self-attention
  double enc_residual = 0.25;    // conv-path weight next to the attention path

  int feat_h() const { return height / 4; }
  int feat_w() const { return width / 4; }
  int pe_freqs() const { return feat / 4; }

  void validate() const {
    if (height % 8 != 0 || width % 8 != 0)
      throw std::invalid_argument("ModelConfig: height and width must be multiples of 8");
    if (feat % 4 != 0) throw std::invalid_argument("ModelConfig: feat must be divisible by 4");
    if (enc1 < 1 || enc2 < 1 || feat < 4 || dec1 < 1 || dec2 < 1 || in_channels < 1)
      throw std::invalid_argument("ModelConfig: channel counts must be positive");
    if (memory_capacity < 1)
      throw std::invalid_argument("ModelConfig: memory_capacity must be >= 1");
    if (act_gain < 1.0) throw std::invalid_argument("ModelConfig: act_gain must be >= 1");
    if (attn_gain <= 0.0) throw std::invalid_argument("ModelConfig: attn_gain must be > 0");
  }

  io::json to_json() const {
    io::json j;
    j["height"] = height;
    j["width"] = width;
    j["in_channels"] = in_channels;
    j["enc1"] = enc1;
    j["enc2"] = enc2;
    j["feat"] = feat;
    j["dec1"] = dec1;
    j["dec2"] = dec2;
    j["memory_capacity"] = memory_capacity;
    j["act_gain"] = act_gain;
    j["enc_attention"] = enc_attention;
    j["attn_gain"] = attn_gain;
    j["enc_residual"] = enc_residual;
    return j;
  }

  static ModelConfig from_json(const io::json& j) {
    ModelConfig c;
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.enc1 = j.at("enc1").get<int>();
    c.enc2 = j.at("enc2").get<int>();
    c.feat = j.at("feat").get<int>();
    c.dec1 = j.at("dec1").get<int>();
    c.dec2 = j.at("dec2").get<int>();
    c.memory_capacity = j.at("memory_capacity").get<int>();
    c.act_gain = j.value("act_gain", 4.0);
    c.enc_attention = j.value("enc_attention", true);
    c.attn_gain = j.value("attn_gain", 3.0);
    c.enc_residual = j.value("enc_residual", 0.25);
    c.validate();
    return c;
  }
};

// Named weight arrays. Map order (lexicographic) fixes checkpoint layout and
// pruning traversal order.
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor> arrays;
  std::map<std::string, bool> prunable;

  int64_t prunable_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : arrays)
      if (prunable.at(name)) n += t.numel();
    return n;
  }
};

namespace detail {

inline void add_param(ModelParams& p, const std::string& name, std::vector<int> shape,
                      bool prune, Rng& seed_base, double scale) {
  Tensor t = Tensor::zeros(shape);
  Rng rng = seed_base.fork(name);
  for (double& v : t.data) v = rng.pm(scale);
  p.arrays[name] = std::move(t);
  p.prunable[name] = prune;
}

inline double fan_in_scale(int64_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  Rng base(seed);
  using detail::add_param;
  using detail::fan_in_scale;
  int d = cfg.feat;
  add_param(p, "enc.conv1.w", {cfg.enc1, cfg.in_channels, 3, 3}, true, base,
            fan_in_scale(cfg.in_channels * 9));
  add_param(p, "enc.conv1.b", {cfg.enc1}, false, base, 0.0);
  add_param(p, "enc.conv2.w", {cfg.enc2, cfg.enc1, 3, 3}, true, base, fan_in_scale(cfg.enc1 * 9));
  add_param(p, "enc.conv2.b", {cfg.enc2}, false, base, 0.0);
  add_param(p, "enc.conv3.w", {d, cfg.enc2, 3, 3}, true, base, fan_in_scale(cfg.enc2 * 9));
  add_param(p, "enc.conv3.b", {d}, false, base, 0.0);
  add_param(p, "enc.norm.g", {d}, false, base, 0.0);
  add_param(p, "enc.norm.b", {d}, false, base, 0.0);
  for (const char* nm : {"q", "k", "v", "o"}) {
    add_param(p, std::string("enc.attn.") + nm + ".w", {d, d}, true, base, fan_in_scale(d));
    add_param(p, std::string("enc.attn.") + nm + ".b", {d}, false, base, 0.0);
  }
  add_param(p, "enc.attn.diag", {1}, false, base, 0.0);
  add_param(p, "prompt.pos.w", {d, d}, true, base, fan_in_scale(d));
  add_param(p, "prompt.label.w", {3, d}, true, base, 0.5);
  add_param(p, "prompt.b", {d}, false, base, 0.0);
  for (const char* nm : {"q", "k", "v", "o"}) {
    add_param(p, std::string("attn.") + nm + ".w", {d, d}, true, base, fan_in_scale(d));
    add_param(p, std::string("attn.") + nm + ".b", {d}, false, base, 0.0);
  }
  add_param(p, "dec.up1.w", {d, cfg.dec1, 4, 4}, true, base, fan_in_scale(d * 4));
  add_param(p, "dec.up1.b", {cfg.dec1}, false, base, 0.0);
  add_param(p, "dec.up2.w", {cfg.dec1, cfg.dec2, 4, 4}, true, base, fan_in_scale(cfg.dec1 * 4));
  add_param(p, "dec.up2.b", {cfg.dec2}, false, base, 0.0);
  add_param(p, "dec.out.w", {1, cfg.dec2, 1, 1}, true, base, fan_in_scale(cfg.dec2));
  add_param(p, "dec.out.b", {1}, false, base, 0.0);
  // normalization starts as identity; self-attention starts self-preferring;
  // output bias leans background
  for (int i = 0; i < d; ++i) p.arrays["enc.norm.g"][i] = 1.0;
  p.arrays["enc.attn.diag"][0] = 6.0;
  p.arrays["dec.out.b"][0] = -1.0;
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint io
// ---------------------------------------------------------------------------

inline constexpr char kParamsMagic[8] = {'U', 'V', 'A', 'P', 'P', 'A', 'R', '1'};

inline void save_params(const ModelParams& p, const io::fs::path& path) {
  io::json header;
  header["format"] = "uvap-params-v1";
  header["config"] = p.config.to_json();
  std::vector<io::NamedBlob> blobs;
  io::json flags = io::json::object();
  for (const auto& [name, t] : p.arrays) {
    blobs.push_back({name, t.shape, t.data});
    flags[name] = p.prunable.at(name);
  }
  header["prunable"] = flags;
  io::write_checkpoint(path, kParamsMagic, header, blobs);
}

inline ModelParams load_params(const io::fs::path& path) {
  auto ck = io::read_checkpoint(path, kParamsMagic);
  if (!ck.header.contains("config"))
    throw std::runtime_error("params checkpoint: header missing field 'config'");
  ModelParams p;
  p.config = ModelConfig::from_json(ck.header["config"]);
  for (auto& b : ck.blobs) {
    p.prunable[b.name] = ck.header.at("prunable").at(b.name).get<bool>();
    p.arrays[b.name] = Tensor(b.shape, std::move(b.data));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Positional encodings
// ---------------------------------------------------------------------------

// Sinusoidal encoding of normalized (x,y) in [0,1]^2 -> 4*nf values.
inline std::vector<double> posenc_xy(double xn, double yn, int nf) {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(4 * nf));
  double wk = M_PI;
  for (int k = 0; k < nf; ++k) {
    out.push_back(std::sin(wk * xn));
    out.push_back(std::cos(wk * xn));
    wk *= 2.0;
  }
  wk = M_PI;
  for (int k = 0; k < nf; ++k) {
    out.push_back(std::sin(wk * yn));
    out.push_back(std::cos(wk * yn));
    wk *= 2.0;
  }
  return out;
}

// [d, h, w] positional field for feature-grid cells whose centers live at
// pixel stride `stride` in the original frame.
inline Tensor posenc_grid(const ModelConfig& cfg, int h, int w, double stride) {
  int d = cfg.feat;
  Tensor pe = Tensor::zeros({d, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double xp = (x + 0.5) * stride;
      double yp = (y + 0.5) * stride;
      auto v = posenc_xy(xp / cfg.width, yp / cfg.height, cfg.pe_freqs());
      for (int c = 0; c < d; ++c) pe.at3(c, y, x) = v[static_cast<size_t>(c)];
    }
  return pe;
}

// ---------------------------------------------------------------------------
// Memory bank
// ---------------------------------------------------------------------------

// FIFO of at most `capacity` fused feature maps plus the persistent
// first-frame prompt embedding.
struct MemoryBank {
  int capacity = 4;
  std::deque<Var> entries;
  Var prompt;  // [np, d]

  explicit MemoryBank(int cap = 4, Var prompt_embedding = nullptr)
      : capacity(cap), prompt(std::move(prompt_embedding)) {}

  void push(Var fused) {
    entries.push_back(std::move(fused));
    while (static_cast<int>(entries.size()) > capacity) entries.pop_front();
  }
};

inline MemoryBank memory_update(MemoryBank bank, Var fused) {
  bank.push(std::move(fused));
  return bank;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct VideoTrace {
  std::vector<Var> enc_feats;   // encoder outputs per frame [d,fh,fw]
  std::vector<Var> fused;       // post-attention features per frame
  std::vector<Var> logits;      // [H,W] per frame
};

class Model {
 public:
  // trainable=true turns parameter arrays into gradient leaves.
  Model(const ModelParams& params, bool trainable = false) : cfg_(params.config) {
    cfg_.validate();
    for (const auto& [name, t] : params.arrays)
      p_[name] = trainable ? ad::leaf(t) : ad::constant(t);
    pe_full_ = ad::constant(posenc_grid(cfg_, cfg_.feat_h(), cfg_.feat_w(),
                                        static_cast<double>(cfg_.width) / cfg_.feat_w()));
    pe_pool_ = ad::constant(posenc_grid(cfg_, cfg_.feat_h() / 2, cfg_.feat_w() / 2,
                                        static_cast<double>(cfg_.width) / (cfg_.feat_w() / 2)));
    int hw = cfg_.feat_h() * cfg_.feat_w();
    Tensor eye = Tensor::zeros({hw, hw});
    for (int i = 0; i < hw; ++i) eye.at2(i, i) = 1.0;
    eye_feat_ = ad::constant(std::move(eye));
  }

  const ModelConfig& config() const { return cfg_; }
  const std::map<std::string, Var>& params() const { return p_; }

  Var encode_image(const Var& frame) const {
    require_shape(frame->value, {cfg_.in_channels, cfg_.height, cfg_.width}, "encode_image");
    Var h1 = ad::silu(ad::conv2d(frame, p("enc.conv1.w"), p("enc.conv1.b"), 2, 1));
    Var h2 = ad::silu_gain(ad::conv2d(h1, p("enc.conv2.w"), p("enc.conv2.b"), 2, 1), cfg_.act_gain);
    Var h3 = ad::silu_gain(ad::conv2d(h2, p("enc.conv3.w"), p("enc.conv3.b"), 1, 1), cfg_.act_gain);
    Var nrm = ad::channel_norm(h3, p("enc.norm.g"), p("enc.norm.b"));
    if (!cfg_.enc_attention) return nrm;
    // optional self-attention block over feature positions: global context
    // mixing within the image encoder itself
    Var rows = ad::chw_to_rows(ad::add(nrm, pe_full_));
    Var q = ad::add_rowvec(ad::matmul(rows, p("enc.attn.q.w")), p("enc.attn.q.b"));
    Var k = ad::add_rowvec(ad::matmul(rows, p("enc.attn.k.w")), p("enc.attn.k.b"));
    Var v = ad::add_rowvec(ad::matmul(rows, p("enc.attn.v.w")), p("enc.attn.v.b"));
    Var logits = ad::scale(ad::matmul_nt(q, k), cfg_.attn_gain / std::sqrt(double(cfg_.feat)));
    Var attn = ad::softmax_rows(
        ad::add(logits, ad::mul_scalar_var(eye_feat_, p("enc.attn.diag"))));
    Var ctx = ad::add_rowvec(ad::matmul(ad::matmul(attn, v), p("enc.attn.o.w")),
                             p("enc.attn.o.b"));
    Var mixed = ad::add(ad::scale(ad::chw_to_rows(nrm), cfg_.enc_residual), ctx);
    return ad::rows_to_chw(mixed, cfg_.feat, cfg_.feat_h(), cfg_.feat_w());
  }

  // Joint embedding of one or more prompts -> [np, d] rows. A point yields one
  // vector (label 0); a box yields two corner vectors (labels 1 and 2).
  Var encode_prompts(const std::vector<Prompt>& ps) const {
    if (ps.empty()) throw std::invalid_argument("encode_prompts: no prompts given");
    std::vector<std::vector<double>> pos_rows;
    std::vector<int> labels;
    for (const auto& pr : ps) {
      pr.validate(cfg_.height, cfg_.width);
      if (pr.kind == PromptKind::Point) {
        pos_rows.push_back(posenc_xy((pr.x + 0.5) / cfg_.width, (pr.y + 0.5) / cfg_.height,
                                     cfg_.pe_freqs()));
        labels.push_back(0);
      } else {
        pos_rows.push_back(posenc_xy((pr.x + 0.5) / cfg_.width, (pr.y + 0.5) / cfg_.height,
                                     cfg_.pe_freqs()));
        labels.push_back(1);
        pos_rows.push_back(posenc_xy((pr.x2 + 0.5) / cfg_.width, (pr.y2 + 0.5) / cfg_.height,
                                     cfg_.pe_freqs()));
        labels.push_back(2);
      }
    }
    int np = static_cast<int>(pos_rows.size());
    int d = cfg_.feat;
    Tensor pos = Tensor::zeros({np, d});
    Tensor onehot = Tensor::zeros({np, 3});
    for (int i = 0; i < np; ++i) {
      for (int c = 0; c < d; ++c) pos.at2(i, c) = pos_rows[static_cast<size_t>(i)][static_cast<size_t>(c)];
      onehot.at2(i, labels[static_cast<size_t>(i)]) = 1.0;
    }
    Var proj = ad::matmul(ad::constant(std::move(pos)), p("prompt.pos.w"));
    Var lab = ad::matmul(ad::constant(std::move(onehot)), p("prompt.label.w"));
    return ad::add_rowvec(ad::add(proj, lab), p("prompt.b"));
  }

  Var encode_prompt(const Prompt& pr) const { return encode_prompts({pr}); }

  // Single-head cross attention: per-position queries from F attend over the
  // (pooled) memory entries and the prompt vectors; residual added to F.
  // attn_out, when given, receives the attention weight matrix.
  Var memory_attend(const Var& F, const MemoryBank& bank, const Var& prompt_embedding,
                    Tensor* attn_out = nullptr) const {
    int d = cfg_.feat, fh = cfg_.feat_h(), fw = cfg_.feat_w();
    require_shape(F->value, {d, fh, fw}, "memory_attend");
    std::vector<Var> key_src;
    for (const auto& e : bank.entries)
      key_src.push_back(ad::chw_to_rows(ad::add(ad::avgpool2(e), pe_pool_)));
    if (prompt_embedding) key_src.push_back(prompt_embedding);
    if (key_src.empty()) return F;  // nothing to attend over

    Var q = ad::add_rowvec(ad::matmul(ad::chw_to_rows(ad::add(F, pe_full_)), p("attn.q.w")),
                           p("attn.q.b"));
    Var kv_src = key_src.size() == 1 ? key_src[0] : ad::concat_rows(key_src);
    Var k = ad::add_rowvec(ad::matmul(kv_src, p("attn.k.w")), p("attn.k.b"));
    Var v = ad::add_rowvec(ad::matmul(kv_src, p("attn.v.w")), p("attn.v.b"));
    Var attn = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(double(d))));
    if (attn_out) *attn_out = attn->value;
    Var ctx = ad::add_rowvec(ad::matmul(ad::matmul(attn, v), p("attn.o.w")), p("attn.o.b"));
    Var fused_rows = ad::add(ad::chw_to_rows(F), ctx);
    return ad::rows_to_chw(fused_rows, d, fh, fw);
  }

  Var decode_mask(const Var& fused) const {
    require_shape(fused->value, {cfg_.feat, cfg_.feat_h(), cfg_.feat_w()}, "decode_mask");
    Var d1 = ad::silu(ad::deconv2d(fused, p("dec.up1.w"), p("dec.up1.b"), 2, 1));
    Var d2 = ad::silu(ad::deconv2d(d1, p("dec.up2.w"), p("dec.up2.b"), 2, 1));
    Var lg = ad::conv2d(d2, p("dec.out.w"), p("dec.out.b"), 1, 0);
    return ad::reshape(lg, {cfg_.height, cfg_.width});
  }

  // Frame-by-frame segmentation. Prompts condition every frame via the memory
  // bank's persistent prompt entry; fused features are pushed after each frame.
  VideoTrace segment_video(const std::vector<Var>& frames,
                           const std::vector<Prompt>& frame0_prompts) const {
    if (frames.empty()) throw std::invalid_argument("segment_video: empty clip");
    Var pe = encode_prompts(frame0_prompts);
    MemoryBank bank(cfg_.memory_capacity, pe);
    VideoTrace tr;
    for (const auto& frame : frames) {
      Var F = encode_image(frame);
      Var fused = memory_attend(F, bank, bank.prompt);
      Var logits = decode_mask(fused);
      bank.push(fused);
      tr.enc_feats.push_back(std::move(F));
      tr.fused.push_back(std::move(fused));
      tr.logits.push_back(std::move(logits));
    }
    return tr;
  }

  // Convenience: plain-value segmentation of a clip's frames.
  std::vector<Tensor> segment_video_values(const std::vector<Tensor>& frames,
                                           const std::vector<Prompt>& frame0_prompts) const {
    std::vector<Var> vars;
    vars.reserve(frames.size());
    for (const auto& f : frames) vars.push_back(ad::constant(f));
    VideoTrace tr = segment_video(vars, frame0_prompts);
    std::vector<Tensor> out;
    out.reserve(tr.logits.size());
    for (const auto& l : tr.logits) out.push_back(l->value);
    return out;
  }

  Var p(const std::string& name) const {
    auto it = p_.find(name);
    if (it == p_.end()) throw std::logic_error("Model: unknown param " + name);
    return it->second;
  }

 private:
  ModelConfig cfg_;
  std::map<std::string, Var> p_;
  Var pe_full_, pe_pool_, eye_feat_;
};

// Foreground = logit > 0.
inline Tensor threshold_mask(const Tensor& logits) {
  Tensor m = Tensor::zeros(logits.shape);
  for (int64_t i = 0; i < logits.numel(); ++i) m[i] = logits[i] > 0.0 ? 1.0 : 0.0;
  return m;
}

}  // namespace uvap::model
