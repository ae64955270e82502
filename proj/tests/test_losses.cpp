#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fd_check.hpp"
#include "uvap/attack.hpp"
#include "uvap/losses.hpp"
#include "uvap/model.hpp"
#include "uvap/train.hpp"

using namespace uvap;
using namespace uvap::losses;
namespace a = uvap::ad;
namespace fs = std::filesystem;

namespace {

model::ModelConfig micro_config(int hw = 8) {
  model::ModelConfig c;
  c.height = hw;
  c.width = hw;
  c.enc1 = 4;
  c.enc2 = 6;
  c.feat = 8;
  c.dec1 = 4;
  c.dec2 = 4;
  c.memory_capacity = 2;
  return c;
}

Tensor random_frame(int hw, uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({3, hw, hw});
  for (double& v : t.data) v = rng.range(0.2, 0.8);
  return t;
}

double softplus_ref(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

}  // namespace

TEST_CASE("build_region_masks: complement identity and target map") {
  Tensor gt = Tensor::zeros({4, 4});
  gt.at2(1, 1) = 1.0;
  gt.at2(2, 3) = 1.0;
  RegionMasks rm = build_region_masks(gt, -1.0);
  for (int64_t i = 0; i < gt.numel(); ++i) {
    CHECK(rm.m_plus[i] + rm.m_minus[i] == 1.0);
    CHECK(rm.y_minus[i] == -1.0 * gt[i]);
  }

  Tensor zero = Tensor::zeros({4, 4});
  RegionMasks rz = build_region_masks(zero, -1.0);
  for (int64_t i = 0; i < zero.numel(); ++i) {
    CHECK(rz.m_plus[i] == 0.0);
    CHECK(rz.m_minus[i] == 1.0);
    CHECK(rz.y_minus[i] == 0.0);
  }

  Tensor bad = Tensor::full({2, 2}, 0.5);
  CHECK_THROWS_AS(build_region_masks(bad, -1.0), std::invalid_argument);
}

TEST_CASE("semantic_confusion bce: hand-evaluated 2x2 oracle") {
  // logits: [[2,-1],[0.5,-3]], fg = {(0,0),(0,1)}, bg = the rest.
  // each term is a full-map mean of softplus over its own region
  Tensor logits({2, 2}, {2.0, -1.0, 0.5, -3.0});
  Tensor gt({2, 2}, {1.0, 1.0, 0.0, 0.0});
  RegionMasks rm = build_region_masks(gt, -1.0);
  double expect = 0.25 * (softplus_ref(2.0) + softplus_ref(-1.0)) +
                  0.25 * (softplus_ref(0.5) + softplus_ref(-3.0));
  a::Var v = semantic_confusion(a::constant(logits), rm, SaForm::Bce);
  CHECK(v->value[0] == doctest::Approx(expect).epsilon(1e-12));

  // analytic minimum: as logits -> -inf the loss -> 0, and it is nonnegative
  Tensor very_neg = Tensor::full({2, 2}, -40.0);
  a::Var vmin = semantic_confusion(a::constant(very_neg), rm, SaForm::Bce);
  CHECK(vmin->value[0] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(vmin->value[0] >= 0.0);
}

TEST_CASE("semantic_confusion mse: exact-match zero and literal form") {
  // logits = -1 on foreground, +1 on background makes both terms vanish
  Tensor gt({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor logits({2, 2}, {-1.0, 1.0, 1.0, -1.0});
  RegionMasks rm = build_region_masks(gt, -1.0);
  a::Var v = semantic_confusion(a::constant(logits), rm, SaForm::Mse);
  CHECK(v->value[0] == doctest::Approx(0.0).epsilon(1e-12));

  // hand-computed value on a different map:
  // term1 = mean((l*m+ - y-)^2), term2 = mean(((1-l)*m- - y-)^2)
  Tensor l2({2, 2}, {0.5, 2.0, -0.5, 0.0});
  double t1 = ((0.5 - -1.0) * (0.5 - -1.0) + 0.0 + 0.0 + (0.0 - -1.0) * (0.0 - -1.0)) / 4.0;
  double t2 = (0.0 + (1 - 2.0) * (1 - 2.0) + (1 - -0.5) * (1 - -0.5) + 0.0) / 4.0;
  a::Var v2 = semantic_confusion(a::constant(l2), rm, SaForm::Mse);
  CHECK(v2->value[0] == doctest::Approx(t1 + t2).epsilon(1e-12));
}

TEST_CASE("semantic_confusion: frame-mean invariance and error paths") {
  Tensor gt({2, 2}, {1.0, 0.0, 0.0, 0.0});
  RegionMasks rm = build_region_masks(gt, -1.0);
  Tensor logits({2, 2}, {1.0, -0.5, 0.25, 2.0});
  a::Var single = semantic_confusion(a::constant(logits), rm, SaForm::Bce);
  a::Var doubled = semantic_confusion_mean(
      {a::constant(logits), a::constant(logits)}, {rm, rm}, SaForm::Bce);
  CHECK(single->value[0] == doctest::Approx(doubled->value[0]).epsilon(1e-12));

  Tensor nan_logits = logits;
  nan_logits[0] = std::nan("");
  CHECK_THROWS_AS((void)semantic_confusion(a::constant(nan_logits), rm, SaForm::Bce),
                  std::invalid_argument);
}

TEST_CASE("prototype: degenerate aggregation and mean-norm bound") {
  model::ModelConfig cfg = micro_config();
  model::ModelParams params = model::init_params(cfg, 30);
  model::Model net(params);
  Tensor frame = random_frame(8, 3);

  Prototype p1 = prototype(frame, 1, 123, net);
  Tensor direct = net.encode_image(a::constant(frame))->value;
  REQUIRE(p1.e.numel() == direct.numel());
  for (int64_t i = 0; i < direct.numel(); ++i) CHECK(p1.e[i] == direct[i]);

  // rho > 1: mean norm bounded by max augmented-view feature norm
  Prototype p4 = prototype(frame, 4, 123, net);
  double proto_norm = 0;
  for (double v : p4.e.data) proto_norm += v * v;
  proto_norm = std::sqrt(proto_norm);
  double max_norm = 0;
  Rng base(123);
  for (int j = 0; j < 4; ++j) {
    Rng rng = base.fork("aug", static_cast<uint64_t>(j));
    Tensor view = augment_frame(frame, rng);
    Tensor feat = net.encode_image(a::constant(view))->value;
    double n = 0;
    for (double v : feat.data) n += v * v;
    max_norm = std::max(max_norm, std::sqrt(n));
  }
  CHECK(proto_norm <= max_norm + 1e-12);
  CHECK_THROWS_AS(prototype(frame, 0, 1, net), std::invalid_argument);
}

TEST_CASE("feature_shift contrastive: log-softmax oracle on fixed vectors") {
  // adv == proto (cos=1), one negative orthogonal to both (cos=0), tau=1:
  // value = 1 - log(exp(1) + exp(0)) = log(e / (e + 1))
  Tensor adv({3}, {1.0, 0.0, 0.0});
  Prototype proto;
  proto.e = Tensor({3}, {2.0, 0.0, 0.0});  // parallel to adv -> cos = 1
  proto.rho = 1;
  std::vector<Tensor> negs = {Tensor({3}, {0.0, 5.0, 0.0})};
  a::Var v = feature_shift(a::constant(adv), proto, negs, 1.0, FaForm::Contrastive);
  double expect = 1.0 - std::log(std::exp(1.0) + std::exp(0.0));
  CHECK(v->value[0] == doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(
      (void)feature_shift(a::constant(adv), proto, {}, 1.0, FaForm::Contrastive),
      std::invalid_argument);
}

TEST_CASE("feature_shift cosine: maximum at identical features, scale invariance") {
  Tensor adv({4}, {0.3, -0.2, 0.9, 0.1});
  Prototype proto;
  proto.e = adv;
  a::Var v = feature_shift(a::constant(adv), proto, {}, 0.1, FaForm::Cosine);
  CHECK(v->value[0] == doctest::Approx(1.0).epsilon(1e-12));

  Tensor other({4}, {-0.5, 0.4, 0.2, 0.8});
  a::Var v1 = feature_shift(a::constant(other), proto, {}, 0.1, FaForm::Cosine);
  CHECK(v1->value[0] < 1.0);

  Tensor scaled = other;
  for (double& x : scaled.data) x *= 12.0;
  a::Var v2 = feature_shift(a::constant(scaled), proto, {}, 0.1, FaForm::Cosine);
  CHECK(v1->value[0] == doctest::Approx(v2->value[0]).epsilon(1e-12));

  // contrastive form is scale invariant too
  std::vector<Tensor> negs = {Tensor({4}, {1.0, 1.0, -1.0, 0.0})};
  a::Var c1 = feature_shift(a::constant(other), proto, negs, 0.5, FaForm::Contrastive);
  a::Var c2 = feature_shift(a::constant(scaled), proto, negs, 0.5, FaForm::Contrastive);
  CHECK(c1->value[0] == doctest::Approx(c2->value[0]).epsilon(1e-12));

  Tensor zero = Tensor::zeros({4});
  CHECK_THROWS_AS((void)feature_shift(a::constant(zero), proto, negs, 0.5, FaForm::Cosine),
                  std::invalid_argument);
}

TEST_CASE("memory_misalign: trivial values and 3-frame oracle") {
  Tensor f1({2}, {1.0, 0.0});
  Tensor f2({2}, {0.0, 1.0});

  a::Var same = memory_misalign({a::constant(f1), a::constant(f1), a::constant(f1)});
  CHECK(same->value[0] == doctest::Approx(1.0).epsilon(1e-12));

  a::Var orth = memory_misalign({a::constant(f1), a::constant(f2)});
  CHECK(orth->value[0] == doctest::Approx(0.0).epsilon(1e-12));

  // pairwise cosines (1, 0) -> mean 0.5
  a::Var mixed = memory_misalign({a::constant(f1), a::constant(f1), a::constant(f2)});
  CHECK(mixed->value[0] == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS((void)memory_misalign({a::constant(f1)}), std::invalid_argument);
}

TEST_CASE("total_loss: weighted sum, image-task omission") {
  LossConfig cfg;
  a::Var sa = a::constant(Tensor::scalar(0.7));
  a::Var fa = a::constant(Tensor::scalar(-0.2));
  a::Var ma = a::constant(Tensor::scalar(0.4));
  a::Var t = total_loss(sa, fa, ma, cfg);
  CHECK(t->value[0] == doctest::Approx(0.7 - 0.2 + 0.4).epsilon(1e-12));

  a::Var t2 = total_loss(sa, fa, nullptr, cfg);
  CHECK(t2->value[0] == doctest::Approx(0.5).epsilon(1e-12));

  cfg.w_fa = 0.0;
  a::Var t3 = total_loss(sa, fa, ma, cfg);
  CHECK(t3->value[0] == doctest::Approx(1.1).epsilon(1e-12));
}

TEST_CASE("gradient correctness: every loss vs finite differences on 8x8 micro-inputs") {
  model::ModelConfig cfg = micro_config();
  model::ModelParams params = model::init_params(cfg, 91);
  model::Model net(params);
  Rng rng(2024);

  Tensor gt = Tensor::zeros({8, 8});
  for (int y = 3; y < 6; ++y)
    for (int x = 2; x < 5; ++x) gt.at2(y, x) = 1.0;
  RegionMasks rm = build_region_masks(gt, -1.0);
  prompts::Prompt pr = prompts::Prompt::point(3, 4);

  Tensor frame = random_frame(8, 555);
  Prototype proto = prototype(frame, 2, 99, net);
  std::vector<Tensor> negs;
  for (uint64_t s : {661u, 662u, 663u})
    negs.push_back(
        [&] {
          Tensor f = net.encode_image(a::constant(random_frame(8, s)))->value;
          return Tensor({static_cast<int>(f.numel())}, std::move(f.data));
        }());

  for (SaForm form : {SaForm::Bce, SaForm::Mse}) {
    auto build_sa = [&](const a::Var& x) {
      auto tr = net.segment_video({x}, {pr});
      return semantic_confusion(tr.logits[0], rm, form);
    };
    a::Var x = a::leaf(frame);
    a::Var y = build_sa(x);
    a::backward(y);
    auto f = [&](const std::vector<double>& flat) {
      return build_sa(a::constant(Tensor(frame.shape, flat)))->value[0];
    };
    CHECK(fd::check_grad(f, frame.data, x->grad.data, 6, rng, 1e-4) < 1e-4);
  }

  for (FaForm form : {FaForm::Contrastive, FaForm::Cosine}) {
    auto build_fa = [&](const a::Var& x) {
      return feature_shift(net.encode_image(x), proto, negs, 0.1, form);
    };
    a::Var x = a::leaf(frame);
    a::Var y = build_fa(x);
    a::backward(y);
    auto f = [&](const std::vector<double>& flat) {
      return build_fa(a::constant(Tensor(frame.shape, flat)))->value[0];
    };
    CHECK(fd::check_grad(f, frame.data, x->grad.data, 6, rng, 1e-4) < 1e-4);
  }

  Tensor frame2 = random_frame(8, 556);
  auto build_ma = [&](const a::Var& x) {
    return memory_misalign({net.encode_image(x), net.encode_image(a::constant(frame2))});
  };
  a::Var x = a::leaf(frame);
  a::Var y = build_ma(x);
  a::backward(y);
  auto f = [&](const std::vector<double>& flat) {
    return build_ma(a::constant(Tensor(frame.shape, flat)))->value[0];
  };
  CHECK(fd::check_grad(f, frame.data, x->grad.data, 6, rng, 1e-4) < 1e-4);
}

TEST_CASE("weight 0 removes a component's gradient contribution") {
  model::ModelConfig cfg = micro_config();
  model::ModelParams params = model::init_params(cfg, 92);
  model::Model net(params);
  Rng rng(5);
  Tensor frame = random_frame(8, 42);
  Tensor frame2 = random_frame(8, 43);
  Tensor gt = Tensor::zeros({8, 8});
  gt.at2(4, 4) = 1.0;
  RegionMasks rm = build_region_masks(gt, -1.0);
  prompts::Prompt pr = prompts::Prompt::point(4, 4);
  Prototype proto = prototype(frame, 1, 7, net);
  std::vector<Tensor> negs = {proto.e};

  LossConfig lc;
  lc.w_ma = 0.0;
  auto build = [&](const a::Var& x, const LossConfig& c) {
    auto tr = net.segment_video({x, a::constant(frame2)}, {pr});
    a::Var sa = semantic_confusion_mean(tr.logits, {rm, rm}, c.sa_form);
    a::Var fa = feature_shift(tr.enc_feats[0], proto, negs, c.tau, c.fa_form);
    a::Var ma = memory_misalign(tr.enc_feats);
    return total_loss(sa, fa, ma, c);
  };
  // gradient with w_ma = 0 equals gradient of sa+fa alone
  a::Var x1 = a::leaf(frame);
  a::backward(build(x1, lc));
  auto build_no_ma = [&](const a::Var& x) {
    auto tr = net.segment_video({x, a::constant(frame2)}, {pr});
    a::Var sa = semantic_confusion_mean(tr.logits, {rm, rm}, lc.sa_form);
    a::Var fa = feature_shift(tr.enc_feats[0], proto, negs, lc.tau, lc.fa_form);
    return a::add(sa, fa);
  };
  a::Var x2 = a::leaf(frame);
  a::backward(build_no_ma(x2));
  for (int64_t i = 0; i < frame.numel(); ++i)
    CHECK(x1->grad[i] == doctest::Approx(x2->grad[i]).epsilon(1e-10));

  // and matches finite differences end to end
  auto f = [&](const std::vector<double>& flat) {
    return build(a::constant(Tensor(frame.shape, flat)), lc)->value[0];
  };
  CHECK(fd::check_grad(f, frame.data, x1->grad.data, 6, rng, 1e-4) < 1e-4);
}

TEST_CASE("direction contract: one optimizer step moves each target quantity the right way") {
  // train a micro model briefly so logits/features are meaningful
  fs::path dir = fs::temp_directory_path() / "uvap_test_direction";
  fs::remove_all(dir);
  data::DatasetOptions opt;
  opt.frame_count = 4;
  opt.height = 16;
  opt.width = 16;
  auto [man, specs] = data::generate_dataset(4, 500, data::Task::Video, opt);
  auto mpath = data::materialize_dataset(man, specs, dir);

  model::TrainConfig tc;
  tc.seed = 30;
  tc.max_epochs = 8;
  tc.window = 2;
  tc.target_miou = 0.0;  // one epoch is enough signal for direction checks
  tc.model = micro_config(16);
  auto [params, trace] = model::train_model(man, mpath, tc);
  model::Model net(params);

  data::VideoClip clip = data::load_manifest_clip(mpath, man.clips[0]);
  std::vector<Tensor> frames(clip.frames.begin(), clip.frames.begin() + 3);
  std::vector<RegionMasks> rms;
  for (int f = 0; f < 3; ++f) rms.push_back(build_region_masks(clip.masks[static_cast<size_t>(f)], -1.0));
  prompts::Prompt pr = prompts::Prompt::point(8, 8);

  std::vector<Prototype> protos;
  for (int f = 0; f < 3; ++f) protos.push_back(prototype(frames[static_cast<size_t>(f)], 2, 7, net));
  data::VideoClip other = data::load_manifest_clip(mpath, man.clips[1]);
  std::vector<Tensor> negs;
  for (int f = 0; f < 3; ++f) {
    Tensor t = net.encode_image(a::constant(other.frames[static_cast<size_t>(f)]))->value;
    negs.push_back(Tensor({static_cast<int>(t.numel())}, std::move(t.data)));
  }

  const double alpha = 2.0 / 255.0, eps = 10.0 / 255.0;
  auto sign_step = [&](const Tensor& grad) {
    Tensor d = Tensor::zeros(grad.shape);
    for (int64_t i = 0; i < grad.numel(); ++i) {
      double g = grad[i];
      d[i] = -alpha * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0));
      d[i] = std::min(std::max(d[i], -eps), eps);
    }
    return d;
  };
  auto apply_delta = [&](const Tensor& delta) {
    std::vector<a::Var> adv;
    for (const auto& fr : frames) {
      Tensor x = fr;
      for (int64_t i = 0; i < x.numel(); ++i) x[i] = std::min(std::max(x[i] + delta[i], 0.0), 1.0);
      adv.push_back(a::constant(x));
    }
    return adv;
  };

  // J_sa: foreground logit mass inside m_plus decreases
  {
    a::Var d0 = a::leaf(Tensor::zeros(frames[0].shape));
    std::vector<a::Var> adv;
    for (const auto& fr : frames) adv.push_back(a::clamp01(a::add(a::constant(fr), d0)));
    auto tr = net.segment_video(adv, {pr});
    a::backward(semantic_confusion_mean(tr.logits, rms, SaForm::Bce));
    Tensor delta = sign_step(d0->grad_ref());

    auto mass = [&](const std::vector<a::Var>& in) {
      auto t = net.segment_video(in, {pr});
      double m = 0;
      for (size_t f = 0; f < t.logits.size(); ++f)
        for (int64_t i = 0; i < t.logits[f]->value.numel(); ++i)
          m += t.logits[f]->value[i] * rms[f].m_plus[i];
      return m;
    };
    std::vector<a::Var> benign;
    for (const auto& fr : frames) benign.push_back(a::constant(fr));
    CHECK(mass(apply_delta(delta)) < mass(benign));
  }

  // J_fa: cos(E(adv), prototype) decreases
  {
    a::Var d0 = a::leaf(Tensor::zeros(frames[0].shape));
    std::vector<a::Var> adv;
    for (const auto& fr : frames) adv.push_back(a::clamp01(a::add(a::constant(fr), d0)));
    std::vector<a::Var> terms;
    for (int f = 0; f < 3; ++f)
      terms.push_back(feature_shift(net.encode_image(adv[static_cast<size_t>(f)]),
                                    protos[static_cast<size_t>(f)], negs, 0.1,
                                    FaForm::Contrastive));
    a::Var j = a::scale(a::add(a::add(terms[0], terms[1]), terms[2]), 1.0 / 3.0);
    a::backward(j);
    Tensor delta = sign_step(d0->grad_ref());

    auto mean_cos = [&](const std::vector<a::Var>& in) {
      double s = 0;
      for (int f = 0; f < 3; ++f) {
        a::Var feat = net.encode_image(in[static_cast<size_t>(f)]);
        a::Var flat = a::reshape(feat, {static_cast<int>(feat->value.numel())});
        s += a::cosine(flat, a::constant(protos[static_cast<size_t>(f)].e))->value[0];
      }
      return s / 3.0;
    };
    std::vector<a::Var> benign;
    for (const auto& fr : frames) benign.push_back(a::constant(fr));
    CHECK(mean_cos(apply_delta(delta)) < mean_cos(benign));
  }

  // J_ma: mean consecutive-pair cosine similarity decreases
  {
    a::Var d0 = a::leaf(Tensor::zeros(frames[0].shape));
    std::vector<a::Var> adv;
    for (const auto& fr : frames) adv.push_back(a::clamp01(a::add(a::constant(fr), d0)));
    std::vector<a::Var> feats;
    for (auto& v : adv) feats.push_back(net.encode_image(v));
    a::backward(memory_misalign(feats));
    Tensor delta = sign_step(d0->grad_ref());

    auto mean_consec = [&](const std::vector<a::Var>& in) {
      std::vector<a::Var> fs2;
      for (const auto& v : in) fs2.push_back(net.encode_image(v));
      return memory_misalign(fs2)->value[0];
    };
    std::vector<a::Var> benign;
    for (const auto& fr : frames) benign.push_back(a::constant(fr));
    CHECK(mean_consec(apply_delta(delta)) < mean_consec(benign));
  }
  fs::remove_all(dir);
}
