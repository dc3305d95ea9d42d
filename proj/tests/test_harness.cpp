#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "test_util.hpp"
#include "vitc/config.hpp"
#include "vitc/data.hpp"
#include "vitc/optim.hpp"
#include "vitc/serialize.hpp"
#include "vitc/train.hpp"

using namespace vitc;
using namespace vitc::testing;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(NeckPolicy neck = NeckPolicy::controller_cls(), HeadKind head = HeadKind::mla) {
  RunConfig cfg = make_run_config();
  cfg.model.vit = ViTConfig{32, 32, 8, 16, 2, 2, 4, 0};
  cfg.model.neck = neck;
  cfg.model.head = head;
  cfg.model.head_channels = 16;
  cfg.train_size = 40;
  cfg.eval_size = 6;
  cfg.iterations = 20;
  cfg.batch_size = 2;
  cfg.crop_h = cfg.crop_w = 32;
  cfg.eval_scales = {0.75, 1.0, 1.25};
  cfg.log_every = 0;
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("vitc_test_" + name);
  fs::remove_all(dir);
  return dir;
}

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  double s = 0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

}  // namespace

TEST(Dataset, Deterministic) {
  const auto a = gen_shapes_dataset(3, 4, 5, 24, 32), b = gen_shapes_dataset(3, 4, 5, 24, 32);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.to_vector(), b[i].image.to_vector());
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_EQ(a[i].image.shape(), (Shape{24, 32, 3}));
  }
  EXPECT_NE(a[0].image.to_vector(), gen_shapes_dataset(4, 1, 5, 24, 32)[0].image.to_vector());
}

TEST(Dataset, IndexedStream) {
  const auto whole = gen_shapes_dataset(9, 6, 4, 16, 16);
  const auto tail = gen_shapes_dataset(9, 2, 4, 16, 16, 4);
  EXPECT_EQ(tail[0].mask, whole[4].mask);
  EXPECT_EQ(tail[1].image.to_vector(), whole[5].image.to_vector());
}

TEST(Dataset, ValuesAndLabels) {
  for (const auto& s : gen_shapes_dataset(1, 50, 5, 32, 32)) {
    for (double v : s.image.to_vector()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (auto l : s.mask.labels) EXPECT_LT(l, 5);
  }
}

TEST(Dataset, EveryClassAppears) {
  const std::size_t k = 5;
  std::vector<std::size_t> images_with(k, 0);
  const auto data = gen_shapes_dataset(0, 500, k, 64, 64);
  for (const auto& s : data) {
    std::set<std::uint8_t> present(s.mask.labels.begin(), s.mask.labels.end());
    for (auto c : present) ++images_with[c];
  }
  for (std::size_t c = 0; c < k; ++c) EXPECT_GE(images_with[c], 25u) << "class " << c;
}

TEST(Dataset, ClassCountLimits) {
  EXPECT_THROW(gen_shapes_dataset(0, 1, 1, 8, 8), std::invalid_argument);
  EXPECT_THROW(gen_shapes_dataset(0, 1, kMaxShapeClasses + 2, 8, 8), std::invalid_argument);
  EXPECT_NO_THROW(gen_shapes_dataset(0, 1, kMaxShapeClasses + 1, 8, 8));
}

TEST(Augment, DoubleFlipIsIdentity) {
  const SegSample s = gen_shapes_dataset(2, 1, 5, 16, 20)[0];
  const SegSample back = flip_horizontal(flip_horizontal(s));
  EXPECT_EQ(back.image.to_vector(), s.image.to_vector());
  EXPECT_EQ(back.mask, s.mask);
  const SegSample once = flip_horizontal(s);
  EXPECT_EQ(once.mask.labels[0], s.mask.labels[19]);
}

TEST(Augment, UnitRatioFullCropIsIdentity) {
  const SegSample s = gen_shapes_dataset(2, 1, 5, 16, 20)[0];
  const SegSample out = augment_with(s, AugmentParams{}, 16, 20);
  EXPECT_EQ(out.image.to_vector(), s.image.to_vector());
  EXPECT_EQ(out.mask, s.mask);
}

TEST(Augment, PaddingAndLabelSet) {
  const SegSample s = gen_shapes_dataset(5, 1, 5, 16, 16)[0];
  const std::set<std::uint8_t> original(s.mask.labels.begin(), s.mask.labels.end());
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const SegSample a = augment(s, rng, 16, 16);
    EXPECT_EQ(a.image.shape(), (Shape{16, 16, 3}));
    for (auto l : a.mask.labels) EXPECT_TRUE(l == kIgnoreIndex || original.count(l)) << int(l);
  }
  // Shrinking by half leaves the lower right three quarters as padding.
  const SegSample small = augment_with(s, AugmentParams{false, 0.5, 0, 0}, 16, 16);
  EXPECT_EQ(small.mask.at(15, 15), kIgnoreIndex);
  EXPECT_EQ(small.image.at((15 * 16 + 15) * 3), 0.0);
  EXPECT_NE(small.mask.at(0, 0), kIgnoreIndex);
}

TEST(Augment, NearestResize) {
  Mask m(2, 2);
  m.labels = {1, 2, 3, 4};
  const Mask up = resize_nearest(m, 4, 4);
  EXPECT_EQ(up.labels, (std::vector<std::uint8_t>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  EXPECT_EQ(resize_nearest(up, 2, 2), m);
}

TEST(RunConfig, ParseOverridesAndComments) {
  RunConfig cfg = make_run_config();
  std::istringstream is("# tiny\nembed_dim = 32\n\nneck = last_layer   # plain\neval_scales = 1.0\nlr=0.0005\n");
  parse_config(is, cfg);
  EXPECT_EQ(cfg.model.vit.embed_dim, 32u);
  EXPECT_EQ(cfg.model.neck, NeckPolicy::last_layer());
  EXPECT_EQ(cfg.eval_scales, std::vector<double>{1.0});
  EXPECT_EQ(cfg.optim.lr, 0.0005);
  EXPECT_EQ(cfg.model.head_channels, 64u);
}

TEST(RunConfig, RoundTrip) {
  RunConfig cfg = tiny_run(NeckPolicy::fixed_layers({0, 1}), HeadKind::fpn);
  cfg.optim.lr = 3.3e-4;
  cfg.model.pyramid = PyramidMode::learned;
  cfg.out_dir = "somewhere";
  RunConfig back = make_run_config();
  std::istringstream is(format_config(cfg));
  parse_config(is, back);
  EXPECT_EQ(format_config(back), format_config(cfg));
  EXPECT_EQ(back.model.neck, cfg.model.neck);
  EXPECT_EQ(back.optim.lr, cfg.optim.lr);
}

TEST(RunConfig, Errors) {
  RunConfig cfg = make_run_config();
  std::istringstream unknown("patch = 8\nwidth = 3\n");
  try {
    parse_config(unknown, cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
  std::istringstream malformed("patch 8\n");
  EXPECT_THROW(parse_config(malformed, cfg), ConfigError);
  EXPECT_THROW(set_config_value(cfg, "neck", "median"), std::invalid_argument);
  EXPECT_THROW(parse_scales("1.0,,2"), std::invalid_argument);
}

TEST(RunConfig, Validation) {
  RunConfig cfg = tiny_run();
  EXPECT_NO_THROW(cfg.validate());
  auto expect_invalid = [](auto mutate) {
    RunConfig c = tiny_run();
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_invalid([](RunConfig& c) { c.model.vit.image_h = 30; });
  expect_invalid([](RunConfig& c) { c.batch_size = 0; });
  expect_invalid([](RunConfig& c) { c.eval_scales.clear(); });
  expect_invalid([](RunConfig& c) { c.eval_scales = {0.0}; });
  expect_invalid([](RunConfig& c) { c.model.classes = 1; });
  expect_invalid([](RunConfig& c) { c.model.neck = NeckPolicy::fixed_layers({2}); });
  expect_invalid([](RunConfig& c) { c.optim.lr = -1.0; });
}

TEST(RunConfig, DefaultScales) {
  EXPECT_EQ(make_run_config().eval_scales, (std::vector<double>{0.5, 0.75, 1.0, 1.25, 1.5, 1.75}));
  EXPECT_EQ(parse_scales(format_scales(kDefaultEvalScales)), kDefaultEvalScales);
}

TEST(AdamW, MatchesHandSteps) {
  Tensor p = Tensor::from_vector({2}, std::vector<double>{1.0, -2.0});
  AdamWConfig cfg;
  cfg.lr = 0.1;
  AdamW opt({{"p", p}}, cfg);
  const Tensor g = Tensor::from_vector({2}, std::vector<double>{0.5, -0.1});
  double e0 = 1.0, e1 = -2.0;
  for (int step = 0; step < 2; ++step) {
    opt.step({g});
    // Constant gradient: both bias-corrected moments reduce to g and g^2.
    e0 = e0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
    e1 = e1 * (1 - 0.1 * 0.01) + 0.1 * 0.1 / (0.1 + 1e-8);
    EXPECT_NEAR(p.to_vector()[0], e0, 1e-12);
    EXPECT_NEAR(p.to_vector()[1], e1, 1e-12);
  }
  EXPECT_EQ(opt.steps(), 2u);
  EXPECT_THROW(opt.step({Tensor::zeros({3}, DType::f64)}), ShapeError);
}

TEST(Train, LossDecreases) {
  RunConfig cfg = tiny_run();
  cfg.iterations = 200;
  const TrainResult r = train(cfg);
  ASSERT_EQ(r.report.losses.size(), 200u);
  EXPECT_LT(mean_of(r.report.losses, 150, 200), mean_of(r.report.losses, 0, 50));
  for (double l : r.report.losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_GE(r.report.ss_miou, 0.0);
  EXPECT_LE(r.report.ss_miou, 1.0);
  EXPECT_GE(r.report.ms_miou, 0.0);
  EXPECT_LE(r.report.ms_miou, 1.0);
}

TEST(Train, ZeroIterationsKeepsInitialParameters) {
  RunConfig cfg = tiny_run();
  cfg.iterations = 0;
  cfg.out_dir = scratch_dir("zero").string();
  const TrainResult r = train(cfg);
  EXPECT_TRUE(r.report.losses.empty());
  const SegModel fresh(cfg.model);
  const NamedTensors stored = load_checkpoint(fs::path(cfg.out_dir) / "model.ckpt");
  ASSERT_EQ(stored.size(), fresh.params().size());
  for (std::size_t i = 0; i < stored.size(); ++i) {
    EXPECT_EQ(stored[i].first, fresh.params()[i].first);
    EXPECT_EQ(stored[i].second.to_vector(), fresh.params()[i].second.to_vector());
  }
}

TEST(Train, OutputsAndCheckpointReload) {
  RunConfig cfg = tiny_run();
  cfg.out_dir = scratch_dir("outputs").string();
  const TrainResult r = train(cfg);
  const fs::path dir = cfg.out_dir;
  for (const char* f : {"model.ckpt", "model.cfg", "metrics.csv", "iou_ss.csv", "iou_ms.csv", "m_hat.csv",
                        "sample0_image.ppm", "sample0_truth.pgm", "sample0_pred.pgm"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  RunConfig reloaded = make_run_config();
  load_config_file(dir / "model.cfg", reloaded);
  const EvalResult ss = evaluate_checkpoint(reloaded, dir / "model.ckpt", {1.0});
  EXPECT_EQ(ss.miou(), r.report.ss_miou);
  EXPECT_EQ(evaluate_checkpoint(reloaded, dir / "model.ckpt", cfg.eval_scales).miou(), r.report.ms_miou);

  std::ifstream metrics(dir / "metrics.csv");
  std::string header;
  std::getline(metrics, header);
  EXPECT_EQ(header, "iteration,loss");
}

TEST(Train, DeterministicReport) {
  const RunConfig cfg = tiny_run();
  const TrainResult a = train(cfg), b = train(cfg);
  EXPECT_EQ(a.report.losses, b.report.losses);
  EXPECT_EQ(a.report.ss_miou, b.report.ss_miou);
  EXPECT_EQ(a.report.ms_miou, b.report.ms_miou);
}

TEST(Train, ControllerWeightsAfterTraining) {
  const TrainResult r = train(tiny_run());
  ASSERT_TRUE(r.report.m_hat.has_value());
  const Tensor& m = *r.report.m_hat;
  ASSERT_EQ(m.shape(), (Shape{2, 16}));
  for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(m.at(c) + m.at(16 + c), 1.0, 1e-6);
  EXPECT_FALSE(train(tiny_run(NeckPolicy::last_layer())).report.m_hat.has_value());
}

TEST(Train, InvalidConfigRejected) {
  RunConfig cfg = tiny_run();
  cfg.crop_h = 30;
  EXPECT_THROW(train(cfg), ConfigError);
}

TEST(Evaluate, SingleUnitScaleIsPlainForward) {
  const RunConfig cfg = tiny_run();
  const SegModel model(cfg.model);
  const auto data = held_out_set(cfg);
  NoGradGuard guard;
  const Tensor image = data[0].image;
  const Tensor direct = softmax_axis(model.forward(image).logits, 2);
  EXPECT_EQ(predict_probs(model, image, {1.0}).to_vector(), direct.to_vector());
}

TEST(Evaluate, ScaledExtents) {
  EXPECT_EQ(scaled_extent(64, 0.5, 8), 32u);
  EXPECT_EQ(scaled_extent(64, 0.75, 8), 48u);
  EXPECT_EQ(scaled_extent(64, 1.75, 8), 112u);
  EXPECT_EQ(scaled_extent(20, 1.25, 8), 32u);
  EXPECT_EQ(scaled_extent(8, 0.1, 8), 8u);
}

TEST(Evaluate, MultiScaleAveragesProbabilities) {
  RunConfig cfg = tiny_run();
  cfg.model.dtype = DType::f64;
  const SegModel model(cfg.model);
  std::mt19937_64 rng(3);
  const Tensor image = rand_tensor({16, 24, 3}, rng, DType::f64, 0, 1);
  const std::vector<double> scales = {1.0, 1.5};
  NoGradGuard guard;

  std::vector<double> oracle(16 * 24 * 5, 0.0);
  for (double s : scales) {
    const std::size_t sh = scaled_extent(16, s, 8), sw = scaled_extent(24, s, 8);
    const Tensor logits = resample_bilinear(model.forward(resample_bilinear(image, sh, sw)).logits, 16, 24);
    const auto v = logits.to_vector();
    for (std::size_t p = 0; p < 16 * 24; ++p) {
      double mx = -INFINITY, z = 0;
      for (std::size_t k = 0; k < 5; ++k) mx = std::max(mx, v[p * 5 + k]);
      for (std::size_t k = 0; k < 5; ++k) z += std::exp(v[p * 5 + k] - mx);
      for (std::size_t k = 0; k < 5; ++k) oracle[p * 5 + k] += std::exp(v[p * 5 + k] - mx) / z / 2.0;
    }
  }
  const Tensor probs = predict_probs(model, image, scales);
  EXPECT_LT(max_abs_diff(probs, Tensor::from_vector({16, 24, 5}, oracle)), 1e-12);
  EXPECT_THROW(predict_probs(model, image, {}), std::invalid_argument);
}

TEST(Evaluate, HeldOutIsDisjointFromTraining) {
  const RunConfig cfg = tiny_run();
  const auto held = held_out_set(cfg);
  EXPECT_EQ(held.size(), cfg.eval_size);
  const auto train_set = gen_shapes_dataset(cfg.data_seed, cfg.train_size, cfg.model.classes, 32, 32);
  for (const auto& h : held)
    for (const auto& t : train_set) EXPECT_NE(h.image.to_vector(), t.image.to_vector());
}

TEST(Flops, EncoderParameterCountClosedForm) {
  const RunConfig cfg = make_run_config();
  const SegModel model(cfg.model);
  const std::size_t c = 64, n = 4, p = 8, r = 4, tokens = 65;
  const std::size_t block = 2 * 2 * c + (3 * c * c + 3 * c) + (c * c + c) + (c * r * c + r * c) + (r * c * c + c);
  const std::size_t expected = p * p * 3 * c + c + c + tokens * c + n * block;
  EXPECT_EQ(model.count_params().encoder, expected);
  EXPECT_EQ(model.count_params().neck, 0u);
}

TEST(Flops, AttentionTermScaling) {
  ModelConfig m = make_run_config().model;
  m.vit.patch = 4;
  const FlopCounts small = count_flops(m, 64, 64), big = count_flops(m, 64, 128);
  const double t_small = 257, t_big = 513;
  EXPECT_EQ(small.encoder_attention, 4u * 2u * 257u * 257u * 64u);
  EXPECT_DOUBLE_EQ(static_cast<double>(big.encoder_attention) / static_cast<double>(small.encoder_attention),
                   (t_big * t_big) / (t_small * t_small));
  EXPECT_GT(static_cast<double>(big.encoder_attention) / static_cast<double>(small.encoder_attention), 3.9);
  EXPECT_EQ(small.total, small.encoder + small.neck + small.pyramid + small.head);
}

TEST(Flops, NecksDifferOnlyInNeckTerm) {
  ModelConfig cls = make_run_config().model, last = cls;
  last.neck = NeckPolicy::last_layer();
  const FlopCounts a = count_flops(cls, 64, 64), b = count_flops(last, 64, 64);
  EXPECT_EQ(b.neck, 0u);
  EXPECT_EQ(a.encoder, b.encoder);
  EXPECT_EQ(a.head, b.head);
  EXPECT_EQ(a.total - b.total, a.neck);
  EXPECT_EQ(a.neck, 4u * 64u * 64u + 4u * 64u);
  EXPECT_LT(static_cast<double>(a.neck), 0.01 * static_cast<double>(a.encoder));
}

TEST(Ablate, SixCellsInOrder) {
  RunConfig cfg = tiny_run();
  cfg.iterations = 2;
  cfg.eval_size = 2;
  cfg.eval_scales = {1.0};
  cfg.out_dir = scratch_dir("ablate").string();
  const AblationTable t = ablate(cfg);
  ASSERT_EQ(t.rows.size(), 6u);
  std::set<std::pair<std::string, std::string>> cells;
  for (const auto& row : t.rows) {
    cells.insert({row.neck.name(), head_kind_name(row.head)});
    EXPECT_EQ(row.ss, row.ms);
    EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / (row.neck.name() + "_" + head_kind_name(row.head)) / "model.ckpt"));
  }
  EXPECT_EQ(cells.size(), 6u);
  const std::string text = format_ablation(t);
  EXPECT_NE(text.find("controller_cls"), std::string::npos);
  EXPECT_NE(text.find("fpn"), std::string::npos);
}
