#include "ckdsnn/saliency.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace ckdsnn;
using ckdsnn::testing::gradcheck;
using ckdsnn::testing::random_tensor;

namespace {

SpikeTrain<float> random_train(Rng& rng, Index t, Index n, Index c, Index h, Index w, double p = 0.3) {
  Vector<float> v(t * n * c * h * w);
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.coin(p) ? 1.0f : 0.0f;
  return {TensorF(Shape{t, n, c, h, w}, v), t};
}

ActivationMap<double> map_of(const TensorD& values) { return {values, MapSource::teacher_cam}; }

}  // namespace

TEST(Cam, UniformGradientSumsChannels) {
  const TensorF f(Shape{1, 2, 1, 2}, {1.0f, -3.0f, 2.0f, 0.5f});
  const auto m = cam_generate(f, TensorF::full(f.shape(), 1.0f));
  EXPECT_EQ(m.values.shape(), (Shape{1, 1, 2}));
  EXPECT_FLOAT_EQ(m.values[0], 3.0f);
  EXPECT_FLOAT_EQ(m.values[1], 0.0f);  // -2.5 clamped
}

TEST(Cam, HandExample) {
  // F1 = [[1,0],[0,1]], F2 = [[0,2],[0,0]]; gradients chosen so alpha = (0.5, -0.25)
  const TensorD f(Shape{1, 2, 2, 2}, {1, 0, 0, 1, 0, 2, 0, 0});
  const TensorD g(Shape{1, 2, 2, 2}, {2, 0, 0, 0, -1, 0, 0, 0});
  const auto m = cam_generate(f, g);
  const std::vector<double> want{0.5, 0.0, 0.0, 0.5};  // 0.5 F1 - 0.25 F2 = [[0.5,-0.5],[0,0.5]]
  for (Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(m.values[i], want[static_cast<std::size_t>(i)]);
  EXPECT_FALSE(m.values.requires_grad());
}

TEST(Cam, NegativeWeightingGivesZeroMap) {
  const TensorF f = TensorF::full({2, 3, 2, 2}, 1.0f);
  const auto m = cam_generate(f, TensorF::full(f.shape(), -1.0f));
  EXPECT_EQ(m.values.data().sum(), 0.0f);
  EXPECT_THROW(cam_generate(f, TensorF::zeros({2, 3, 2, 1})), ShapeError);
}

TEST(Sam, CountsSpikes) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Index t = rng.uniform_int(1, 5), n = rng.uniform_int(1, 3), c = rng.uniform_int(1, 4);
    const Index h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
    const auto train = random_train(rng, t, n, c, h, w);
    const auto sam = sam_generate(train);
    for (Index b = 0; b < n; ++b)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          int count = 0;
          for (Index tt = 0; tt < t; ++tt)
            for (Index ch = 0; ch < c; ++ch) count += train.spikes[(((tt * n + b) * c + ch) * h + y) * w + x] != 0;
          ASSERT_EQ(sam.values[(b * h + y) * w + x], static_cast<float>(count));
        }
  }
}

TEST(Sam, AllOnesAndZeros) {
  const SpikeTrain<float> ones{TensorF::full({4, 1, 3, 2, 2}, 1.0f), 4};
  EXPECT_TRUE((sam_generate(ones).values.data().array() == 12.0f).all());
  const SpikeTrain<float> zeros{TensorF::zeros({4, 1, 3, 2, 2}), 4};
  EXPECT_EQ(sam_generate(zeros).values.data().sum(), 0.0f);
  const SpikeTrain<float> bad{TensorF::full({1, 1, 1, 1, 1}, 0.5f), 1};
  EXPECT_THROW(sam_generate(bad), std::invalid_argument);
}

TEST(Scale, SoftmaxTwoPixelExample) {
  const double temp = 2.0;
  const auto s = saliency_scale(map_of(TensorD(Shape{1, 1, 2}, {0.0, temp * std::log(3.0)})), {ScaleKind::softmax, temp});
  EXPECT_NEAR(s.probs[0], 0.25, 1e-12);
  EXPECT_NEAR(s.probs[1], 0.75, 1e-12);
}

TEST(Scale, ConstantMapIsUniform) {
  for (double temp : {0.5, 1.0, 7.0}) {
    const auto s = saliency_scale(map_of(TensorD::full({1, 3, 3}, 4.2)), {ScaleKind::softmax, temp});
    for (Index i = 0; i < 9; ++i) EXPECT_NEAR(s.probs[i], 1.0 / 9, 1e-15);
  }
}

TEST(Scale, SoftmaxIsSimplexAndKeepsArgmax) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = rng.uniform_int(1, 3), h = rng.uniform_int(1, 5), w = rng.uniform_int(2, 5);
    const TensorF raw = random_tensor(rng, {n, h, w}, 0, 20).cast<float>();
    const auto s = saliency_scale(ActivationMap<float>{raw, MapSource::student_sam}, {ScaleKind::softmax, 2.0});
    for (Index b = 0; b < n; ++b) {
      const auto p = s.probs.data().segment(b * h * w, h * w);
      const auto r = raw.data().segment(b * h * w, h * w);
      EXPECT_NEAR(p.cast<double>().sum(), 1.0, 1e-6);
      Index ip = 0, ir = 0;
      p.maxCoeff(&ip);
      r.maxCoeff(&ir);
      EXPECT_EQ(ip, ir);
    }
  }
}

TEST(Scale, L2ZeroMapIsDegenerate) {
  const auto s = saliency_scale(map_of(TensorD::zeros({1, 2, 2})), {ScaleKind::l2_norm, 2.0});
  EXPECT_TRUE(s.degenerate);
  for (Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(s.probs[i], 0.5);
  const auto ok = saliency_scale(map_of(TensorD(Shape{1, 1, 2}, {3.0, 4.0})), {ScaleKind::l2_norm, 2.0});
  EXPECT_FALSE(ok.degenerate);
  EXPECT_DOUBLE_EQ(ok.probs[0], 0.6);
}

TEST(Scale, ZScoreStandardises) {
  const auto s = saliency_scale(map_of(TensorD(Shape{1, 2, 2}, {1, 2, 3, 4})), {ScaleKind::z_score, 2.0});
  EXPECT_NEAR(s.probs.data().mean(), 0.0, 1e-12);
  EXPECT_NEAR(s.probs.data().squaredNorm() / 4, 1.25 / (1.25 + 1e-5), 1e-9);
}

TEST(Samd, IdenticalMapsGiveZero) {
  Rng rng(1);
  const TensorD m = random_tensor(rng, {3, 4, 4}, 0, 10);
  for (auto kind : {ScaleKind::softmax, ScaleKind::l2_norm, ScaleKind::z_score, ScaleKind::none}) {
    EXPECT_LT(std::abs(samd_loss(map_of(m), map_of(m), {kind, 2.0}).item()), 1e-7) << to_string(kind);
  }
}

TEST(Samd, ShiftInvariantUnderSoftmax) {
  Rng rng(2);
  const TensorD te = random_tensor(rng, {2, 3, 3}, 0, 5), st = random_tensor(rng, {2, 3, 3}, 0, 5);
  const double base = samd_loss(map_of(te), map_of(st), 2.0).item();
  const double shifted = samd_loss(map_of(add_scalar(te, 7.5)), map_of(add_scalar(st, -3.0)), 2.0).item();
  EXPECT_NEAR(base, shifted, 1e-6);
}

TEST(Samd, TwoPixelHandValue) {
  // temperature 1: P_te = softmax([1,0]), P_st = [0.5,0.5]
  const double e = std::exp(1.0);
  const double p0 = e / (e + 1), p1 = 1 / (e + 1);
  const double want = p0 * std::log(p0 / 0.5) + p1 * std::log(p1 / 0.5);
  const double got = samd_loss(map_of(TensorD(Shape{1, 1, 2}, {1, 0})), map_of(TensorD::zeros({1, 1, 2})), 1.0).item();
  EXPECT_NEAR(got, want, 1e-6);
}

TEST(Samd, TemperatureSquaredPrefactor) {
  const TensorD te(Shape{1, 1, 2}, {4, 0}), st(Shape{1, 1, 2}, {0, 0});
  const double t = 2.0;
  const double e = std::exp(2.0);
  const double p0 = e / (e + 1), p1 = 1 / (e + 1);
  const double kl = p0 * std::log(p0 / 0.5) + p1 * std::log(p1 / 0.5);
  EXPECT_NEAR(samd_loss(map_of(te), map_of(st), t).item(), t * t * kl, 1e-12);
}

TEST(Samd, ErrorsOnShapeMismatch) {
  EXPECT_THROW(samd_loss(map_of(TensorD::zeros({1, 2, 2})), map_of(TensorD::zeros({1, 2, 3})), 2.0), ShapeError);
}

TEST(Samd, GradientReachesStudentOnly) {
  Rng rng(4);
  TensorD te = random_tensor(rng, {2, 2, 3}, 0, 3);
  te.set_requires_grad(true);
  const TensorD st = random_tensor(rng, {2, 2, 3}, 0, 3);
  for (auto kind : {ScaleKind::softmax, ScaleKind::l2_norm, ScaleKind::z_score, ScaleKind::none}) {
    const SaliencyScaleMode mode{kind, 2.0};
    const auto g = gradcheck([&](const auto& in) { return samd_loss(map_of(te), map_of(in[0]), mode); },
                             {kind == ScaleKind::none ? add_scalar(st, 0.5) : st});
    EXPECT_TRUE(g.ok()) << to_string(kind) << " " << g.rel_error;
  }
  EXPECT_FALSE(te.has_grad());
}

TEST(Samd, GeneralizedKlNonNegative) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const TensorD a = random_tensor(rng, {2, 2, 3}, -2, 4), b = random_tensor(rng, {2, 2, 3}, -2, 4);
    for (auto kind : {ScaleKind::softmax, ScaleKind::l2_norm, ScaleKind::z_score, ScaleKind::none}) {
      EXPECT_GE(samd_loss(map_of(relu(a)), map_of(relu(b)), {kind, 2.0}).item(), -1e-7);
    }
  }
}

TEST(Resize, IdentityAndConstant) {
  Rng rng(9);
  const TensorD m = random_tensor(rng, {1, 3, 3});
  EXPECT_EQ(resize_bilinear(m, 3, 3).data(), m.data());
  const TensorD c = resize_bilinear(TensorD::full({2, 2, 2}, 1.5), 5, 3);
  EXPECT_EQ(c.shape(), (Shape{2, 5, 3}));
  for (Index i = 0; i < c.numel(); ++i) EXPECT_DOUBLE_EQ(c[i], 1.5);
  // 1x2 -> 1x4 with half-pixel centres: [a, 0.75a+0.25b, 0.25a+0.75b, b]
  const TensorD up = resize_bilinear(TensorD(Shape{1, 1, 2}, {0, 4}), 1, 4);
  EXPECT_DOUBLE_EQ(up[0], 0.0);
  EXPECT_DOUBLE_EQ(up[1], 1.0);
  EXPECT_DOUBLE_EQ(up[2], 3.0);
  EXPECT_DOUBLE_EQ(up[3], 4.0);
}

TEST(StudentGradCam, DiffersFromSamInGeneral) {
  // Grad-CAM weights time-mean spikes by spatially averaged gradients; with a
  // negative channel weight its argmax can move away from the densest pixel.
  const SpikeTrain<float> train{TensorF(Shape{1, 1, 3, 1, 2}, {1, 0, 0, 1, 0, 1}), 1};
  const TensorF grad(Shape{1, 1, 3, 1, 2}, {1, 1, -0.5f, -0.5f, -0.5f, -0.5f});
  const auto sam = sam_generate(train);
  const auto gc = student_gradcam(train, grad);
  EXPECT_EQ(sam.values[0], 1.0f);
  EXPECT_EQ(sam.values[1], 2.0f);
  EXPECT_FLOAT_EQ(gc.values[0], 1.0f);
  EXPECT_FLOAT_EQ(gc.values[1], 0.0f);
}

TEST(Export, PgmAndCsv) {
  const auto dir = std::filesystem::temp_directory_path() / "ckdsnn_saliency_export";
  std::filesystem::create_directories(dir);
  const std::vector<float> m{0.0f, 1.0f, 2.0f, 4.0f};
  write_pgm(dir / "m.pgm", m.data(), 2, 2);
  std::ifstream in(dir / "m.pgm", std::ios::binary);
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  const std::string px = bytes.substr(header.size());
  ASSERT_EQ(px.size(), 4u);
  EXPECT_EQ(static_cast<unsigned char>(px[0]), 0);
  EXPECT_EQ(static_cast<unsigned char>(px[1]), 64);
  EXPECT_EQ(static_cast<unsigned char>(px[2]), 128);
  EXPECT_EQ(static_cast<unsigned char>(px[3]), 255);

  const std::vector<float> flat(4, 3.0f);
  write_pgm(dir / "flat.pgm", flat.data(), 2, 2);
  std::ifstream fin(dir / "flat.pgm", std::ios::binary);
  const std::string fb{std::istreambuf_iterator<char>(fin), std::istreambuf_iterator<char>()};
  EXPECT_EQ(fb.substr(header.size()), std::string(4, '\0'));

  write_map_csv(dir / "m.csv", m.data(), 2, 2);
  std::ifstream cin(dir / "m.csv");
  const std::string csv{std::istreambuf_iterator<char>(cin), std::istreambuf_iterator<char>()};
  EXPECT_EQ(csv, "0,1\n2,4\n");
  std::filesystem::remove_all(dir);
}

TEST(ScaleKindText, RoundTrip) {
  for (auto k : {ScaleKind::softmax, ScaleKind::l2_norm, ScaleKind::z_score, ScaleKind::none}) {
    EXPECT_EQ(parse_scale_kind(to_string(k)), k);
  }
  EXPECT_THROW(parse_scale_kind("minmax"), std::invalid_argument);
}
