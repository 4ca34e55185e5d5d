#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "diffspot/arch.hpp"
#include "diffspot/nn/backbone.hpp"
#include "diffspot/nn/checkpoint.hpp"
#include "diffspot/nn/layers.hpp"

namespace diffspot::nn {
namespace {

namespace fs = std::filesystem;

template <typename T>
Tensor<T> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                        double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Scalar probe loss: fixed random projection of the output.
struct Probe {
  Tensor<double> coeffs;
  explicit Probe(const Tensor<double>& like, Rng& rng)
      : coeffs(random_tensor<double>(like.shape, rng)) {}
  double loss(const Tensor<double>& y) const {
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += coeffs.data[i] * y.data[i];
    return s;
  }
  Tensor<double> grad() const { return coeffs; }
};

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

// Central finite difference on a handful of entries of `theta`, against the
// analytic gradient in `grad`.
template <typename Forward>
void check_gradient(Tensor<double>& theta, const Tensor<double>& grad,
                    Forward f, Rng& rng, int probes = 12, double eps = 1e-6,
                    double tol = 1e-6) {
  for (int p = 0; p < probes; ++p) {
    const std::size_t i =
        static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(theta.numel()) - 1));
    const double keep = theta.data[i];
    theta.data[i] = keep + eps;
    const double up = f();
    theta.data[i] = keep - eps;
    const double down = f();
    theta.data[i] = keep;
    const double numeric = (up - down) / (2 * eps);
    EXPECT_LT(relative_error(grad.data[i], numeric), tol)
        << "entry " << i << ": analytic " << grad.data[i] << " numeric "
        << numeric;
  }
}

TEST(Conv2dLayer, MatchesHandComputedConvolution) {
  Conv2d<double> conv("c", 2, 3, 3, 1, 1);
  Rng rng(1);
  for (auto& v : conv.weight->value.data) v = rng.uniform(-1, 1);
  for (auto& v : conv.bias->value.data) v = rng.uniform(-1, 1);
  const Tensor<double> x = random_tensor<double>({2, 5, 4}, rng);
  const Tensor<double> y = conv.forward(x);
  ASSERT_EQ(y.shape, (std::vector<int>{3, 5, 4}));

  for (int oc = 0; oc < 3; ++oc)
    for (int oy = 0; oy < 5; ++oy)
      for (int ox = 0; ox < 4; ++ox) {
        double acc = conv.bias->value.data[oc];
        for (int ic = 0; ic < 2; ++ic)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int sy = oy + ky - 1, sx = ox + kx - 1;
              if (sy < 0 || sy >= 5 || sx < 0 || sx >= 4) continue;
              const double w =
                  conv.weight->value.data[(static_cast<std::size_t>(oc) * 2 + ic) * 9 +
                                          ky * 3 + kx];
              acc += w * x.at3(ic, sy, sx);
            }
        EXPECT_NEAR(y.at3(oc, oy, ox), acc, 1e-12);
      }
}

TEST(Conv2dLayer, StridedOutputSizeUsesFloor) {
  Conv2d<double> conv("c", 1, 1, 3, 2, 0);
  Rng rng(2);
  const Tensor<double> x = random_tensor<double>({1, 8, 8}, rng);
  EXPECT_EQ(conv.forward(x).shape, (std::vector<int>{1, 3, 3}));
  EXPECT_THROW(conv.forward(random_tensor<double>({1, 2, 2}, rng)), InputTooSmall);
}

TEST(Conv2dLayer, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  Conv2d<double> conv("c", 2, 4, 3, 2, 1);
  conv.init_xavier(rng);
  Tensor<double> x = random_tensor<double>({2, 7, 6}, rng);
  Probe probe(conv.forward(x), rng);

  conv.weight->zero_grad();
  conv.bias->zero_grad();
  conv.forward(x);
  const Tensor<double> gx = conv.backward(probe.grad());

  auto run = [&]() { return probe.loss(conv.forward(x)); };
  check_gradient(conv.weight->value, conv.weight->grad, run, rng);
  check_gradient(conv.bias->value, conv.bias->grad, run, rng);
  check_gradient(x, gx, run, rng);
}

TEST(LinearLayer, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  Linear<double> fc("fc", 10, 7);
  fc.init_xavier(rng);
  Tensor<double> x = random_tensor<double>({3, 10}, rng);
  Probe probe(fc.forward(x), rng);

  fc.weight->zero_grad();
  fc.bias->zero_grad();
  fc.forward(x);
  const Tensor<double> gx = fc.backward(probe.grad());

  auto run = [&]() { return probe.loss(fc.forward(x)); };
  check_gradient(fc.weight->value, fc.weight->grad, run, rng);
  check_gradient(fc.bias->value, fc.bias->grad, run, rng);
  check_gradient(x, gx, run, rng);
}

TEST(ReluLayer, ForwardAndMaskedBackward) {
  ReLU<double> relu;
  Tensor<double> x({1, 1, 4});
  x.data = {-1.0, 0.0, 2.0, -0.5};
  const Tensor<double> y = relu.forward(x);
  EXPECT_EQ(y.data, (std::vector<double>{0, 0, 2.0, 0}));
  Tensor<double> g({1, 1, 4});
  g.data = {1, 1, 1, 1};
  EXPECT_EQ(relu.backward(g).data, (std::vector<double>{0, 0, 1.0, 0}));
}

TEST(LrnLayer, MatchesDirectFormula) {
  LRN<double> lrn;  // n=5, alpha=1e-4, beta=0.75, k=1
  Rng rng(5);
  const Tensor<double> x = random_tensor<double>({8, 3, 2}, rng, -2, 2);
  const Tensor<double> y = lrn.forward(x);
  for (int c = 0; c < 8; ++c)
    for (int yy = 0; yy < 3; ++yy)
      for (int xx = 0; xx < 2; ++xx) {
        double acc = 1.0;
        for (int j = std::max(0, c - 2); j <= std::min(7, c + 2); ++j)
          acc += 1e-4 / 5 * x.at3(j, yy, xx) * x.at3(j, yy, xx);
        EXPECT_NEAR(y.at3(c, yy, xx), x.at3(c, yy, xx) * std::pow(acc, -0.75),
                    1e-12);
      }
}

TEST(LrnLayer, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  LRN<double> lrn(5, 0.1, 0.75, 2.0);  // exaggerated alpha to exercise cross terms
  Tensor<double> x = random_tensor<double>({6, 3, 3}, rng, -2, 2);
  Probe probe(lrn.forward(x), rng);
  lrn.forward(x);
  const Tensor<double> gx = lrn.backward(probe.grad());
  auto run = [&]() { return probe.loss(lrn.forward(x)); };
  check_gradient(x, gx, run, rng, 16, 1e-6, 1e-5);
}

TEST(MaxPoolLayer, ForwardPicksWindowMaxima) {
  MaxPool2d<double> pool(2, 2);
  Tensor<double> x({1, 4, 4});
  for (int i = 0; i < 16; ++i) x.data[i] = i;
  const Tensor<double> y = pool.forward(x);
  ASSERT_EQ(y.shape, (std::vector<int>{1, 2, 2}));
  EXPECT_EQ(y.data, (std::vector<double>{5, 7, 13, 15}));
}

TEST(MaxPoolLayer, FloorModeAndRaggedEdge) {
  MaxPool2d<double> pool(3, 2);
  Rng rng(7);
  const Tensor<double> x = random_tensor<double>({2, 7, 9}, rng);
  const Tensor<double> y = pool.forward(x);
  EXPECT_EQ(y.shape, (std::vector<int>{2, 3, 4}));
}

TEST(MaxPoolLayer, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  MaxPool2d<double> pool(3, 2);
  Tensor<double> x = random_tensor<double>({2, 7, 7}, rng);
  Probe probe(pool.forward(x), rng);
  pool.forward(x);
  const Tensor<double> gx = pool.backward(probe.grad());
  auto run = [&]() { return probe.loss(pool.forward(x)); };
  check_gradient(x, gx, run, rng, 16, 1e-7, 1e-5);
}

TEST(ConcatChannels, RoundTripsWithSplit) {
  Rng rng(9);
  const Tensor<double> a = random_tensor<double>({3, 4, 5}, rng);
  const Tensor<double> b = random_tensor<double>({2, 4, 5}, rng);
  const Tensor<double> c = concat_channels(a, b);
  ASSERT_EQ(c.shape, (std::vector<int>{5, 4, 5}));
  const auto [a2, b2] = split_channels(c, 3);
  EXPECT_EQ(a2.data, a.data);
  EXPECT_EQ(b2.data, b.data);
}

TEST(BackboneNet, EarlyMergeShapes) {
  ArchConfig cfg;
  cfg.concat_index = 1;
  Backbone<float> net(cfg);
  Rng rng(10);
  net.init_xavier(rng);
  const Tensor<float> design = random_tensor<float>({3, 224, 224}, rng);
  const Tensor<float> photo = random_tensor<float>({3, 224, 224}, rng);
  const Tensor<float> y = net.forward(design, photo);
  // 224 -> 112 -> 55 -> 28 -> 13 under floor-mode sizing.
  EXPECT_EQ(y.shape, (std::vector<int>{256, 13, 13}));
  EXPECT_EQ(net.out_channels(), 256);
}

TEST(BackboneNet, ShapesAgreeWithAnalyticTrace) {
  for (int k : {1, 3, 5}) {
    ArchConfig cfg;
    cfg.concat_index = k;
    cfg.width_factor = 0.25;
    Backbone<float> net(cfg);
    Rng rng(11);
    net.init_xavier(rng);
    const Tensor<float> design = random_tensor<float>({3, 160, 128}, rng);
    const Tensor<float> photo = random_tensor<float>({3, 160, 128}, rng);
    const Tensor<float> y = net.forward(design, photo);

    const auto trace = feature_shape(cfg, 160, 128);
    const auto conv5 = std::find_if(trace.begin(), trace.end(),
                                    [](const TraceRow& r) { return r.name == "conv5"; });
    ASSERT_NE(conv5, trace.end());
    EXPECT_EQ(y.shape[0], conv5->out_channels);
    EXPECT_EQ(y.shape[1], conv5->out_h);
    EXPECT_EQ(y.shape[2], conv5->out_w);
  }
}

TEST(BackboneNet, StoredWeightsEqualAnalyticUniqueCount) {
  for (int k : {1, 2, 4}) {
    for (double w : {1.0, 0.125}) {
      ArchConfig cfg;
      cfg.concat_index = k;
      cfg.width_factor = w;
      Backbone<float> net(cfg);
      std::int64_t stored = 0;
      for (const auto& p : net.params())
        if (p->name.ends_with(".weight"))
          stored += static_cast<std::int64_t>(p->value.numel());
      EXPECT_EQ(stored, count_params(cfg).params_unique)
          << "K=" << k << " w=" << w;
    }
  }
}

TEST(BackboneNet, BranchesShareParameters) {
  ArchConfig cfg;
  cfg.concat_index = 3;
  cfg.width_factor = 0.0625;
  Backbone<double> net(cfg);
  Rng rng(12);
  net.init_xavier(rng);

  // Identical branch inputs produce identical branch features: the merged
  // map's two halves agree.
  const Tensor<double> x = random_tensor<double>({3, 64, 64}, rng);
  const Tensor<double> y = net.forward(x, x);
  const auto params = net.params();
  // conv1, conv2 shared once; conv3..conv5 in trunk; 5 convs * 2 tensors.
  EXPECT_EQ(params.size(), 10u);

  for (const auto& p : params) p->zero_grad();
  Tensor<double> g(y.shape);
  g.fill(1.0);
  net.backward(g);
  Tensor<double> conv1_grad_once = params[0]->grad;

  for (const auto& p : params) p->zero_grad();
  net.forward(x, x);
  net.backward(g);
  net.forward(x, x);  // second accumulation without zeroing
  net.backward(g);
  for (std::size_t i = 0; i < conv1_grad_once.numel(); ++i)
    EXPECT_NEAR(params[0]->grad.data[i], 2.0 * conv1_grad_once.data[i], 1e-9);
}

TEST(BackboneNet, GradientsMatchFiniteDifferences) {
  ArchConfig cfg;
  cfg.concat_index = 2;
  cfg.width_factor = 0.0625;
  Backbone<double> net(cfg);
  Rng rng(13);
  net.init_xavier(rng);
  Tensor<double> design = random_tensor<double>({3, 48, 40}, rng);
  Tensor<double> photo = random_tensor<double>({3, 48, 40}, rng);

  Probe probe(net.forward(design, photo), rng);
  auto params = net.params();
  for (auto& p : params) p->zero_grad();
  net.forward(design, photo);
  net.backward(probe.grad());

  auto run = [&]() { return probe.loss(net.forward(design, photo)); };
  for (auto& p : params) check_gradient(p->value, p->grad, run, rng, 4, 1e-6, 1e-4);
}

TEST(Checkpoint, RoundTripsAllParameters) {
  ArchConfig cfg;
  cfg.concat_index = 2;
  cfg.width_factor = 0.0625;
  Backbone<float> net(cfg);
  Rng rng(14);
  net.init_xavier(rng);
  const fs::path path = fs::temp_directory_path() / "diffspot_ckpt_test.bin";
  save_checkpoint(path.string(), cfg, net.params());

  Backbone<float> restored(cfg);
  const ArchConfig loaded = load_checkpoint(path.string(), restored.params());
  EXPECT_EQ(loaded.concat_index, 2);
  EXPECT_DOUBLE_EQ(loaded.width_factor, 0.0625);
  const auto a = net.params();
  const auto b = restored.params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_EQ(a[i]->value.data, b[i]->value.data);
  }
  fs::remove(path);
}

TEST(Checkpoint, WidthMismatchThrows) {
  ArchConfig full;
  full.concat_index = 1;
  full.width_factor = 0.125;
  Backbone<float> net(full);
  Rng rng(15);
  net.init_xavier(rng);
  const fs::path path = fs::temp_directory_path() / "diffspot_ckpt_mismatch.bin";
  save_checkpoint(path.string(), full, net.params());

  ArchConfig half = full;
  half.width_factor = 0.0625;
  Backbone<float> other(half);
  EXPECT_THROW(load_checkpoint(path.string(), other.params()), ShapeMismatch);
  EXPECT_THROW(load_checkpoint_subset(path.string(), other.params()), ShapeMismatch);
  fs::remove(path);
}

TEST(Checkpoint, SubsetLoadOverridesMatchingNames) {
  ArchConfig cfg;
  cfg.concat_index = 3;
  cfg.width_factor = 0.125;
  Backbone<float> donor(cfg);
  Rng rng(16);
  donor.init_xavier(rng);
  const fs::path path = fs::temp_directory_path() / "diffspot_ckpt_subset.bin";
  // A file holding only the pre-merge tensors.
  std::vector<ParamPtr<float>> pre;
  for (const auto& p : donor.params())
    if (p->name.starts_with("conv1") || p->name.starts_with("conv2"))
      pre.push_back(p);
  save_checkpoint(path.string(), cfg, pre);

  Backbone<float> target(cfg);
  Rng rng2(17);
  target.init_xavier(rng2);
  const int loaded = load_checkpoint_subset(path.string(), target.params());
  EXPECT_EQ(loaded, 4);  // conv1/conv2 weight+bias
  const auto donor_params = donor.params();
  for (const auto& p : target.params()) {
    const auto donor_it =
        std::find_if(donor_params.begin(), donor_params.end(),
                     [&](const auto& q) { return q->name == p->name; });
    ASSERT_NE(donor_it, donor_params.end());
    if (p->name.starts_with("conv1") || p->name.starts_with("conv2"))
      EXPECT_EQ(p->value.data, (*donor_it)->value.data);
    else if (p->name.ends_with(".weight"))  // biases are zero either way
      EXPECT_NE(p->value.data, (*donor_it)->value.data);
  }
  fs::remove(path);
}

TEST(XavierInit, BoundAndVarianceMatchTheScheme) {
  // fan_in = fan_out = 9: bound sqrt(6/18), variance 2/(fan_in+fan_out).
  Tensor<double> t({10000});
  Rng rng(18);
  xavier_fill(t, 9, 9, rng);
  const double bound = std::sqrt(6.0 / 18.0);
  double sum = 0, sq = 0;
  for (double v : t.data) {
    ASSERT_LE(std::abs(v), bound);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / t.numel();
  const double var = sq / t.numel() - mean * mean;
  const double expected = 2.0 / 18.0;
  EXPECT_NEAR(var, expected, 0.2 * expected);
}

TEST(XavierInit, SameSeedSameWeights) {
  ArchConfig cfg;
  cfg.concat_index = 1;
  cfg.width_factor = 0.0625;
  Backbone<float> a(cfg), b(cfg);
  Rng ra(19), rb(19);
  a.init_xavier(ra);
  b.init_xavier(rb);
  const auto pa = a.params(), pb = b.params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ(pa[i]->value.data, pb[i]->value.data);
}

}  // namespace
}  // namespace diffspot::nn
