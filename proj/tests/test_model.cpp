#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fd_check.hpp"
#include "uvap/model.hpp"
#include "uvap/train.hpp"

using namespace uvap;
using namespace uvap::model;
using prompts::Prompt;
namespace a = uvap::ad;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.height = 8;
  c.width = 8;
  c.enc1 = 4;
  c.enc2 = 6;
  c.feat = 8;
  c.dec1 = 4;
  c.dec2 = 4;
  c.memory_capacity = 2;
  return c;
}

Tensor random_frame(const ModelConfig& c, uint64_t seed, double lo = 0.2, double hi = 0.8) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({c.in_channels, c.height, c.width});
  for (double& v : t.data) v = rng.range(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("encode_image: shape, finiteness, determinism, wrong-shape error") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 30);
  Model net(params);

  Tensor zero = Tensor::zeros({3, 8, 8});
  a::Var f = net.encode_image(a::constant(zero));
  CHECK(f->value.shape == std::vector<int>{8, 2, 2});
  CHECK(all_finite(f->value));

  Tensor x = random_frame(cfg, 5);
  a::Var f1 = net.encode_image(a::constant(x));
  a::Var f2 = net.encode_image(a::constant(x));
  CHECK(f1->value.data == f2->value.data);

  Tensor bad = Tensor::zeros({3, 4, 4});
  CHECK_THROWS_AS((void)net.encode_image(a::constant(bad)), std::invalid_argument);
}

TEST_CASE("encode_prompt: injectivity probe, determinism, degenerate box") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 30);
  Model net(params);

  a::Var center = net.encode_prompt(Prompt::point(4, 4));
  a::Var corner = net.encode_prompt(Prompt::point(0, 0));
  CHECK(center->value.shape == std::vector<int>{1, 8});
  bool differ = false;
  for (int i = 0; i < 8; ++i)
    if (center->value[i] != corner->value[i]) differ = true;
  CHECK(differ);

  a::Var again = net.encode_prompt(Prompt::point(4, 4));
  CHECK(center->value.data == again->value.data);

  // degenerate box: both corner embeddings from the same location differ only
  // by the learned corner-label vectors; positional parts are equal.
  a::Var box = net.encode_prompt(Prompt::box(3, 3, 3, 3));
  CHECK(box->value.shape == std::vector<int>{2, 8});

  CHECK_THROWS_AS((void)net.encode_prompt(Prompt::point(-1, 2)), std::invalid_argument);
  CHECK_THROWS_AS((void)net.encode_prompt(Prompt::point(8, 2)), std::invalid_argument);
}

TEST_CASE("degenerate box corners encode equal up to label embedding") {
  // With identical label vectors the two corner rows must be identical.
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 30);
  Tensor& lab = params.arrays.at("prompt.label.w");
  for (int c = 0; c < cfg.feat; ++c) lab.at2(2, c) = lab.at2(1, c);
  Model net(params);
  a::Var box = net.encode_prompt(Prompt::box(3, 3, 3, 3));
  for (int c = 0; c < 8; ++c)
    CHECK(box->value.at2(0, c) == doctest::Approx(box->value.at2(1, c)).epsilon(1e-12));
}

TEST_CASE("memory_attend: shape preservation, softmax rows, uniform over identical keys") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 41);
  Model net(params);
  Tensor x = random_frame(cfg, 9);
  a::Var F = net.encode_image(a::constant(x));
  a::Var pe = net.encode_prompt(Prompt::point(4, 4));

  // empty memory, prompt only
  MemoryBank empty(cfg.memory_capacity, pe);
  Tensor attn;
  a::Var fused = net.memory_attend(F, empty, pe, &attn);
  CHECK(fused->value.shape == F->value.shape);
  CHECK(attn.shape == std::vector<int>{4, 1});
  for (int64_t i = 0; i < attn.numel(); ++i) CHECK(attn[i] == doctest::Approx(1.0));

  // memory holding k identical copies of F itself (pooled to 1x1): the
  // memory-derived keys are identical, so their attention weights match.
  MemoryBank bank(4, pe);
  bank.push(F);
  bank.push(F);
  bank.push(F);
  a::Var fused2 = net.memory_attend(F, bank, pe, &attn);
  CHECK(attn.shape == std::vector<int>{4, 4});  // 3 pooled entries + 1 prompt vector
  for (int q = 0; q < 4; ++q) {
    double row_sum = 0;
    for (int k = 0; k < 4; ++k) row_sum += attn.at2(q, k);
    CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(attn.at2(q, 0) == doctest::Approx(attn.at2(q, 1)).epsilon(1e-9));
    CHECK(attn.at2(q, 1) == doctest::Approx(attn.at2(q, 2)).epsilon(1e-9));
  }
}

TEST_CASE("memory_update: FIFO eviction, capacity bound, prompt retention") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 42);
  Model net(params);
  a::Var pe = net.encode_prompt(Prompt::point(2, 2));
  MemoryBank bank(2, pe);

  a::Var f1 = a::constant(Tensor::full({8, 2, 2}, 1.0));
  a::Var f2 = a::constant(Tensor::full({8, 2, 2}, 2.0));
  a::Var f3 = a::constant(Tensor::full({8, 2, 2}, 3.0));
  bank = memory_update(bank, f1);
  CHECK(bank.entries.size() == 1);
  bank = memory_update(bank, f2);
  CHECK(bank.entries.size() == 2);
  bank = memory_update(bank, f3);
  CHECK(bank.entries.size() == 2);
  CHECK(bank.entries.front()->value[0] == 2.0);  // f1 evicted
  CHECK(bank.entries.back()->value[0] == 3.0);
  CHECK(bank.prompt == pe);
}

TEST_CASE("decode_mask: shape and determinism") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 43);
  Model net(params);
  Tensor fused = Tensor::zeros({8, 2, 2});
  Rng rng(3);
  for (double& v : fused.data) v = rng.pm(1.0);
  a::Var l1 = net.decode_mask(a::constant(fused));
  a::Var l2 = net.decode_mask(a::constant(fused));
  CHECK(l1->value.shape == std::vector<int>{8, 8});
  CHECK(l1->value.data == l2->value.data);
}

TEST_CASE("segment_video: 1-frame clip equals single-image segmentation") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 44);
  Model net(params);
  Tensor x = random_frame(cfg, 10);
  Prompt p = Prompt::point(3, 3);

  VideoTrace tr = net.segment_video({a::constant(x)}, {p});
  // single-image path: encode, attend with empty memory, decode
  a::Var pe = net.encode_prompt(p);
  MemoryBank bank(cfg.memory_capacity, pe);
  a::Var F = net.encode_image(a::constant(x));
  a::Var logits = net.decode_mask(net.memory_attend(F, bank, pe));
  CHECK(tr.logits[0]->value.data == logits->value.data);
}

TEST_CASE("segment_video: permuting frames changes later outputs (memory dependence)") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 45);
  Model net(params);
  std::vector<a::Var> fr = {a::constant(random_frame(cfg, 1)), a::constant(random_frame(cfg, 2)),
                            a::constant(random_frame(cfg, 3))};
  Prompt p = Prompt::point(4, 4);
  VideoTrace t1 = net.segment_video(fr, {p});
  VideoTrace t2 = net.segment_video({fr[0], fr[2], fr[1]}, {p});
  // frame at index 2 is fr[1] in the permuted run; compare the same frame
  // content under different histories: t1 frame1 (history {fr0}) vs t2 frame2
  // (history {fr0, fr2}).
  bool differ = false;
  for (int64_t i = 0; i < t1.logits[1]->value.numel(); ++i)
    if (t1.logits[1]->value[i] != t2.logits[2]->value[i]) differ = true;
  CHECK(differ);
}

TEST_CASE("segment_video: memory causality - later frames cannot affect earlier logits") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 46);
  Model net(params);
  Tensor f0 = random_frame(cfg, 21), f1 = random_frame(cfg, 22), f2 = random_frame(cfg, 23);
  Prompt p = Prompt::point(4, 4);
  VideoTrace t1 = net.segment_video({a::constant(f0), a::constant(f1), a::constant(f2)}, {p});
  Tensor f2b = f2;
  for (double& v : f2b.data) v = std::min(1.0, v + 0.05);
  VideoTrace t2 = net.segment_video({a::constant(f0), a::constant(f1), a::constant(f2b)}, {p});
  CHECK(t1.logits[0]->value.data == t2.logits[0]->value.data);
  CHECK(t1.logits[1]->value.data == t2.logits[1]->value.data);
  bool differ = false;
  for (int64_t i = 0; i < t1.logits[2]->value.numel(); ++i)
    if (t1.logits[2]->value[i] != t2.logits[2]->value[i]) differ = true;
  CHECK(differ);
  CHECK_THROWS_AS(net.segment_video({}, {p}), std::invalid_argument);
}

TEST_CASE("end-to-end gradient w.r.t. an input frame matches finite differences") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 47);
  Model net(params);
  Rng rng(99);
  Prompt p = Prompt::point(5, 2);
  Tensor f0 = random_frame(cfg, 31), f1 = random_frame(cfg, 32);

  // scalar head: mean of frame-1 logits (depends on frame 0 through memory)
  auto run = [&](const Tensor& frame0) {
    VideoTrace tr = net.segment_video({a::constant(frame0), a::constant(f1)}, {p});
    return a::mean_all(tr.logits[1])->value[0];
  };
  a::Var x = a::leaf(f0);
  VideoTrace tr = net.segment_video({x, a::constant(f1)}, {p});
  a::Var y = a::mean_all(tr.logits[1]);
  a::backward(y);

  auto f = [&](const std::vector<double>& flat) {
    return run(Tensor(f0.shape, flat));
  };
  double worst = fd::check_grad(f, f0.data, x->grad.data, 10, rng, 1e-4);
  CHECK(worst < 1e-4);
}

TEST_CASE("params checkpoint round trip (f32 quantization aware)") {
  ModelConfig cfg = micro_config();
  ModelParams params = init_params(cfg, 48);
  fs::path dir = fs::temp_directory_path() / "uvap_test_params";
  fs::create_directories(dir);
  fs::path path = dir / "params.ckpt";
  save_params(params, path);
  ModelParams loaded = load_params(path);
  CHECK(loaded.config.height == cfg.height);
  CHECK(loaded.arrays.size() == params.arrays.size());
  for (const auto& [name, t] : params.arrays) {
    const Tensor& lt = loaded.arrays.at(name);
    REQUIRE(lt.shape == t.shape);
    for (int64_t i = 0; i < t.numel(); ++i)
      CHECK(lt[i] == static_cast<double>(static_cast<float>(t[i])));
    CHECK(loaded.prunable.at(name) == params.prunable.at(name));
  }
  // corrupt magic
  auto buf = io::read_file(path);
  buf[0] = 'X';
  io::write_file_atomic(path, buf);
  CHECK_THROWS_WITH_AS(load_params(path), doctest::Contains("magic"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("micro training: loss decreases, determinism, benign competence on easy task") {
  // 3 tiny clips, 2 train + 1 test
  fs::path dir = fs::temp_directory_path() / "uvap_test_train";
  fs::remove_all(dir);
  data::DatasetOptions opt;
  opt.frame_count = 3;
  opt.height = 16;
  opt.width = 16;
  auto [man, specs] = data::generate_dataset(3, 77, data::Task::Video, opt);
  auto mpath = data::materialize_dataset(man, specs, dir);

  TrainConfig tc;
  tc.seed = 30;
  tc.max_epochs = 3;
  tc.window = 2;
  tc.target_miou = 2.0;  // unreachable: run all epochs, check the trace
  tc.model = micro_config();
  tc.model.height = 16;
  tc.model.width = 16;

  CHECK_THROWS_WITH_AS(train_model(man, mpath, tc), doctest::Contains("mIoU"),
                       std::runtime_error);
  // rerun through a non-throwing path to inspect the trace
  tc.target_miou = 0.0;  // stops after first epoch
  auto [params1, trace1] = train_model(man, mpath, tc);
  CHECK(trace1.epochs_run == 1);
  auto [params2, trace2] = train_model(man, mpath, tc);
  for (const auto& [name, t] : params1.arrays) CHECK(t.data == params2.arrays.at(name).data);
  fs::remove_all(dir);
}
