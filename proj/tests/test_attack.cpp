#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "uvap/attack.hpp"
#include "uvap/train.hpp"

using namespace uvap;
using namespace uvap::attack;
namespace a = uvap::ad;
namespace fs = std::filesystem;

namespace {

struct MicroWorld {
  fs::path dir;
  fs::path manifest_path;
  data::DatasetManifest man;
  model::ModelParams params;

  ~MicroWorld() { fs::remove_all(dir); }
};

// 4 tiny clips (3 train / 1 test), briefly trained micro model.
MicroWorld make_world(uint64_t seed = 1000) {
  MicroWorld w;
  w.dir = fs::temp_directory_path() / ("uvap_test_attack_" + std::to_string(seed));
  fs::remove_all(w.dir);
  data::DatasetOptions opt;
  opt.frame_count = 4;
  opt.height = 16;
  opt.width = 16;
  auto [man, specs] = data::generate_dataset(4, seed, data::Task::Video, opt);
  w.man = man;
  w.manifest_path = data::materialize_dataset(man, specs, w.dir);

  model::TrainConfig tc;
  tc.seed = 30;
  tc.max_epochs = 6;
  tc.window = 2;
  tc.target_miou = 0.0;
  tc.model.height = 16;
  tc.model.width = 16;
  tc.model.enc1 = 4;
  tc.model.enc2 = 6;
  tc.model.feat = 8;
  tc.model.dec1 = 4;
  tc.model.dec2 = 4;
  tc.model.memory_capacity = 2;
  auto [params, trace] = model::train_model(w.man, w.manifest_path, tc);
  w.params = params;
  return w;
}

AttackConfig micro_attack_config() {
  AttackConfig cfg;
  cfg.epochs = 2;
  cfg.scan_m = 16;
  cfg.seed = 30;
  cfg.frames_per_clip = 4;
  cfg.loss.negatives = 3;
  cfg.loss.rho = 2;
  return cfg;
}

}  // namespace

TEST_CASE("project_linf: clamp, identity inside, idempotence") {
  Tensor d = Tensor::full({2, 2}, 0.5);
  Tensor p = project_linf(d, 10.0 / 255.0);
  for (double v : p.data) CHECK(v == 10.0 / 255.0);

  Tensor small({2, 2}, {0.01, -0.02, 0.0, 0.03});
  Tensor ps = project_linf(small, 10.0 / 255.0);
  CHECK(ps.data == small.data);

  Tensor mixed({4}, {0.5, -0.7, 0.02, -0.01});
  Tensor once = project_linf(mixed, 0.04);
  Tensor twice = project_linf(once, 0.04);
  CHECK(once.data == twice.data);
}

TEST_CASE("apply: zero delta identity, range clamp, budget, shape errors") {
  data::ClipSpec spec;
  spec.frame_count = 2;
  spec.height = 16;
  spec.width = 16;
  spec.shape_size = 0.32;
  spec.seed = 4;
  data::VideoClip clip = data::generate_clip(spec);

  Perturbation zero;
  zero.mode = PerturbationMode::Universal;
  zero.epsilon = 10.0 / 255.0;
  zero.deltas = {Tensor::zeros({3, 16, 16})};
  data::VideoClip out = apply(clip, zero);
  for (size_t f = 0; f < clip.frames.size(); ++f) CHECK(out.frames[f].data == clip.frames[f].data);
  CHECK(out.masks[0].data == clip.masks[0].data);

  // pixel at 1.0 with positive delta stays 1.0
  data::VideoClip bright = clip;
  bright.frames[0].at3(0, 0, 0) = 1.0;
  Perturbation pos = zero;
  pos.deltas[0] = Tensor::full({3, 16, 16}, 0.03);
  data::VideoClip outp = apply(bright, pos);
  CHECK(outp.frames[0].at3(0, 0, 0) == 1.0);
  for (size_t f = 0; f < outp.frames.size(); ++f) {
    CHECK(max_val(outp.frames[f]) <= 1.0);
    CHECK(min_val(outp.frames[f]) >= 0.0);
    for (int64_t i = 0; i < outp.frames[f].numel(); ++i)
      CHECK(std::fabs(outp.frames[f][i] - bright.frames[f][i]) <= 0.03 + 1e-15);
  }

  Perturbation bad;
  bad.mode = PerturbationMode::Samplewise;
  bad.epsilon = 0.03;
  bad.deltas = {Tensor::zeros({3, 16, 16})};  // clip has 2 frames
  CHECK_THROWS_AS(apply(clip, bad), std::invalid_argument);
}

TEST_CASE("optimize_uap: budget invariant, epsilon 0 stays zero, determinism") {
  MicroWorld w = make_world(1000);
  AttackConfig cfg = micro_attack_config();

  auto res = optimize_uap(w.params, w.man, w.manifest_path, cfg);
  CHECK(res.perturbation.mode == PerturbationMode::Universal);
  CHECK(res.perturbation.deltas.size() == 1);
  CHECK(max_abs(res.perturbation.deltas[0]) <= cfg.epsilon);
  CHECK(max_abs(res.perturbation.deltas[0]) > 0.0);
  CHECK(res.trace.size() == 2 * 3);  // epochs * train clips

  auto res2 = optimize_uap(w.params, w.man, w.manifest_path, cfg);
  CHECK(res.perturbation.deltas[0].data == res2.perturbation.deltas[0].data);

  AttackConfig cfg2 = cfg;
  cfg2.seed = 31;
  auto res3 = optimize_uap(w.params, w.man, w.manifest_path, cfg2);
  CHECK(res.perturbation.deltas[0].data != res3.perturbation.deltas[0].data);

  AttackConfig zero = cfg;
  zero.epsilon = 0.0;
  auto rz = optimize_uap(w.params, w.man, w.manifest_path, zero);
  for (double v : rz.perturbation.deltas[0].data) CHECK(v == 0.0);
}

TEST_CASE("optimize_uap: config validation") {
  MicroWorld w = make_world(1001);
  AttackConfig cfg = micro_attack_config();
  cfg.epochs = 0;
  CHECK_THROWS_AS(optimize_uap(w.params, w.man, w.manifest_path, cfg), std::invalid_argument);
  cfg = micro_attack_config();
  cfg.alpha = cfg.epsilon * 2;
  CHECK_THROWS_AS(optimize_uap(w.params, w.man, w.manifest_path, cfg), std::invalid_argument);
  cfg = micro_attack_config();
  cfg.scan_m = 5;  // not a perfect square
  CHECK_THROWS_AS(optimize_uap(w.params, w.man, w.manifest_path, cfg), std::invalid_argument);
}

TEST_CASE("optimize_uap: non-finite params abort with a loss-term diagnostic") {
  MicroWorld w = make_world(1002);
  model::ModelParams poisoned = w.params;
  poisoned.arrays.at("dec.out.w")[0] = std::nan("");
  AttackConfig cfg = micro_attack_config();
  CHECK_THROWS_WITH_AS(optimize_uap(poisoned, w.man, w.manifest_path, cfg),
                       doctest::Contains("J_sa"), std::runtime_error);
}

TEST_CASE("optimize_samplewise: per-frame budget, frame-distinct deltas, single-frame clip") {
  MicroWorld w = make_world(1003);
  data::VideoClip clip = data::load_manifest_clip(w.manifest_path, *w.man.split("test")[0]);
  std::vector<Tensor> negatives;
  for (const auto* mc : w.man.split("train")) {
    data::VideoClip c = data::load_manifest_clip(w.manifest_path, *mc);
    negatives.push_back(c.frames[0]);
  }

  AttackConfig cfg = micro_attack_config();
  cfg.mode = PerturbationMode::Samplewise;
  cfg.epsilon = 8.0 / 255.0;
  auto res = optimize_samplewise(w.params, clip, "test_clip", negatives, cfg);
  CHECK(res.perturbation.mode == PerturbationMode::Samplewise);
  CHECK(res.perturbation.deltas.size() == clip.frames.size());
  bool any_differ = false;
  for (size_t f = 0; f < res.perturbation.deltas.size(); ++f) {
    CHECK(max_abs(res.perturbation.deltas[f]) <= 8.0 / 255.0);
    if (f > 0 && res.perturbation.deltas[f].data != res.perturbation.deltas[0].data)
      any_differ = true;
  }
  CHECK(any_differ);  // moving shape -> per-frame deltas differ

  // single-frame clip reduces to an image attack (no J_ma)
  data::VideoClip one;
  one.spec = clip.spec;
  one.spec.frame_count = 1;
  one.frames = {clip.frames[0]};
  one.masks = {clip.masks[0]};
  auto res1 = optimize_samplewise(w.params, one, "single", negatives, cfg);
  CHECK(res1.perturbation.deltas.size() == 1);
  for (const auto& row : res1.trace) CHECK(row.j_ma == 0.0);
}

TEST_CASE("first_frame_probe: budget holds, trace has no J_ma") {
  MicroWorld w = make_world(1004);
  AttackConfig cfg = micro_attack_config();
  auto res = first_frame_probe(w.params, w.man, w.manifest_path, cfg);
  CHECK(res.perturbation.deltas.size() == 1);
  CHECK(max_abs(res.perturbation.deltas[0]) <= cfg.epsilon);
  for (const auto& row : res.trace) CHECK(row.j_ma == 0.0);
}

TEST_CASE("perturbation checkpoint round trip and trace csv") {
  Perturbation p;
  p.mode = PerturbationMode::Samplewise;
  p.epsilon = 8.0 / 255.0;
  p.clip_id = "clip007";
  p.seed = 30;
  Rng rng(5);
  for (int f = 0; f < 3; ++f) {
    Tensor d = Tensor::zeros({3, 8, 8});
    for (double& v : d.data) v = rng.pm(8.0 / 255.0);
    p.deltas.push_back(std::move(d));
  }
  fs::path dir = fs::temp_directory_path() / "uvap_test_pert";
  fs::create_directories(dir);
  fs::path path = dir / "p.upt";
  save_perturbation(p, path);
  Perturbation q = load_perturbation(path);
  CHECK(q.mode == PerturbationMode::Samplewise);
  CHECK(q.epsilon == p.epsilon);
  CHECK(q.clip_id == "clip007");
  REQUIRE(q.deltas.size() == 3);
  for (size_t f = 0; f < 3; ++f)
    for (int64_t i = 0; i < p.deltas[f].numel(); ++i)
      CHECK(q.deltas[f][i] == static_cast<double>(static_cast<float>(p.deltas[f][i])));

  std::vector<TraceRow> rows = {{1, "clip000", 0.5, -0.2, 0.9, 1.2}};
  std::string csv = trace_csv(rows);
  CHECK(csv.find("epoch,clip_id,j_sa,j_fa,j_ma,j_total") == 0);
  CHECK(csv.find("1,clip000,0.5,-0.2,0.9,1.2") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("attack loss decreases over epochs on the micro benchmark") {
  MicroWorld w = make_world(1005);
  AttackConfig cfg = micro_attack_config();
  cfg.epochs = 6;
  auto res = optimize_uap(w.params, w.man, w.manifest_path, cfg);
  double first_epoch = 0, last_epoch = 0;
  int nf = 0, nl = 0;
  for (const auto& r : res.trace) {
    if (r.epoch == 1) {
      first_epoch += r.j_total;
      ++nf;
    }
    if (r.epoch == cfg.epochs) {
      last_epoch += r.j_total;
      ++nl;
    }
  }
  CHECK(last_epoch / nl <= first_epoch / nf);
}
