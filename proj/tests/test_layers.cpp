#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "danlab/architecture.hpp"
#include "danlab/dan.hpp"
#include "danlab/layers.hpp"
#include "test_util.hpp"

using namespace danlab;
using namespace danlab::testing;
using T = Tensor<double>;

namespace {

// Scalar probe sum(f(x) * r) with a fixed random r.
std::function<T(const T&)> probe(std::function<T(const T&)> f, const Shape& out_shape, std::mt19937_64& rng) {
  T r = random_tensor(out_shape, rng);
  return [f = std::move(f), r](const T& x) { return sum(mul(f(x), r)); };
}

}  // namespace

TEST(Conv, OutputSpatialArithmetic) {
  const ConvSpec spec = ConvSpec::isotropic(2, 3, 2, 1, 1, 1);
  EXPECT_EQ(spec.output_spatial({7, 8}), (Shape{4, 4}));
  EXPECT_THROW(ConvSpec::isotropic(2, 5, 1, 0, 1, 1).output_spatial({3, 3}), ShapeError);
}

TEST(Conv, OneByOnePermutationKernelPermutesChannels) {
  std::mt19937_64 rng(1);
  const T x = random_tensor({2, 3, 4, 5}, rng);
  T w({3, 3, 1, 1});
  w.data().setZero();
  const int perm[3] = {2, 0, 1};
  for (int o = 0; o < 3; ++o) w.data()[o * 3 + perm[o]] = 1;
  const T y = conv_forward(x, ConvSpec::isotropic(2, 1, 1, 0, 3, 3), w, T::full({3}, 0.0));
  for (Index b = 0; b < 2; ++b)
    for (int o = 0; o < 3; ++o)
      for (Index s = 0; s < 20; ++s) EXPECT_EQ(y.data()[(b * 3 + o) * 20 + s], x.data()[(b * 3 + perm[o]) * 20 + s]);
}

TEST(Conv, AveragingKernelKeepsConstantInterior) {
  const double c = 0.37;
  const T x = T::full({1, 1, 6, 6}, c);
  const T y = conv_forward(x, ConvSpec::isotropic(2, 3, 1, 1, 1, 1), T::full({1, 1, 3, 3}, 1.0 / 9), T::full({1}, 0.0));
  for (Index i = 1; i < 5; ++i)
    for (Index j = 1; j < 5; ++j) EXPECT_NEAR(y.data()[i * 6 + j], c, 1e-15);
}

TEST(Conv, MatchesNestedLoopReferenceOnRandomCases) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> dim(3, 7), ch(1, 3), kern(0, 2), strd(1, 2), rank(2, 3);
  int checked = 0;
  while (checked < 50) {
    const int r = rank(rng);
    const Index k = 2 * kern(rng) + 1;
    const Index stride = strd(rng);
    const Index pad = std::uniform_int_distribution<Index>(0, k / 2)(rng);
    const Index cin = ch(rng);
    const Index cout = ch(rng);
    Shape xs{2, cin};
    for (int d = 0; d < r; ++d) xs.push_back(r == 3 ? std::min(dim(rng), 5) : dim(rng));
    bool fits = true;
    for (int d = 0; d < r; ++d) fits = fits && xs[static_cast<std::size_t>(d) + 2] + 2 * pad >= k;
    if (!fits) continue;
    Shape ws{cout, cin};
    for (int d = 0; d < r; ++d) ws.push_back(k);
    const T x = random_tensor(xs, rng);
    const T w = random_tensor(ws, rng);
    const T b = random_tensor({cout}, rng);
    const T got = conv_forward(x, ConvSpec::isotropic(r, k, stride, pad, cin, cout), w, b);
    const T want = brute_conv(x, w, b, stride, pad);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(max_abs_diff(got, want), 1e-10);
    ++checked;
  }
}

TEST(Conv, ChannelMismatchThrows) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(conv_forward(random_tensor({1, 2, 5, 5}, rng), ConvSpec::isotropic(2, 3, 1, 1, 3, 1),
                            random_tensor({1, 3, 3, 3}, rng), random_tensor({1}, rng)),
               ShapeError);
}

TEST(BatchNorm, TrainModeNormalises) {
  std::mt19937_64 rng(4);
  T x = random_tensor({4, 3, 5, 5}, rng, 3.0);
  x.data() += 2.0;
  BatchNormState<double> state(3);
  const T y = batchnorm(x, T::full({3}, 1.0), T::full({3}, 0.0), state, BatchNormMode::kTrain);
  for (Index c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (Index b = 0; b < 4; ++b)
      for (Index s = 0; s < 25; ++s) m += y.data()[(b * 3 + c) * 25 + s];
    m /= 100;
    for (Index b = 0; b < 4; ++b)
      for (Index s = 0; s < 25; ++s) v += std::pow(y.data()[(b * 3 + c) * 25 + s] - m, 2);
    EXPECT_LT(std::abs(m), 1e-6);
    EXPECT_NEAR(std::sqrt(v / 100), 1.0, 1e-3);
  }
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  BatchNormState<double> state(2);
  T beta({2});
  beta.data() << 0.25, -1.5;
  const T y = batchnorm(T::full({1, 2, 3, 3}, 4.0), T::full({2}, 2.0), beta, state, BatchNormMode::kTrain);
  for (Index s = 0; s < 9; ++s) {
    EXPECT_EQ(y.data()[s], 0.25);
    EXPECT_EQ(y.data()[9 + s], -1.5);
  }
}

TEST(BatchNorm, RunningStatsAndEvalMode) {
  std::mt19937_64 rng(5);
  const T x = random_tensor({3, 1, 4, 4}, rng);
  BatchNormState<double> state(1);
  batchnorm(x, T::full({1}, 1.0), T::full({1}, 0.0), state, BatchNormMode::kTrain);
  const double mu = x.data().mean();
  const double var = (x.data() - mu).square().mean();
  EXPECT_NEAR(state.running_mean.data()[0], 0.1 * mu, 1e-12);
  // Running variance tracks the unbiased estimate.
  const double n = static_cast<double>(x.size());
  EXPECT_NEAR(state.running_var.data()[0], 0.9 + 0.1 * var * n / (n - 1), 1e-12);
  const T y = batchnorm(x, T::full({1}, 1.0), T::full({1}, 0.0), state, BatchNormMode::kEval);
  const double denom = std::sqrt(state.running_var.data()[0] + kBatchNormEpsilon);
  for (Index i = 0; i < x.size(); ++i) EXPECT_NEAR(y.data()[i], (x.data()[i] - state.running_mean.data()[0]) / denom, 1e-12);
}

TEST(Pooling, MaxOfTwoByTwo) {
  T x({1, 1, 2, 2});
  x.data() << 1, 2, 3, 4;
  EXPECT_EQ(maxpool(x, 2, 2).item(), 4);
  EXPECT_EQ(avgpool(x, 2, 2).item(), 2.5);
}

TEST(Pooling, UpsampleThenAvgpoolIsIdentity) {
  std::mt19937_64 rng(6);
  const T x = random_tensor({2, 3, 4, 5}, rng);
  EXPECT_EQ(avgpool(upsample_nearest(x, 2), 2, 2).data().matrix(), x.data().matrix());
  const T x3 = random_tensor({1, 2, 3, 2, 3}, rng);
  EXPECT_EQ(avgpool(upsample_nearest(x3, 2), 2, 2).data().matrix(), x3.data().matrix());
  EXPECT_ANY_THROW(upsample_nearest(x, 0));
}

TEST(Pooling, MaxpoolTieRoutesToFirstIndex) {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  T x = T::full({1, 1, 2, 2}, 1.0);
  x.set_requires_grad(true);
  backward(tape, sum(maxpool(x, 2, 2)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 0.0);
  EXPECT_EQ(x.grad()[3], 0.0);
}

TEST(DenseBlock, ChannelArithmetic) {
  std::mt19937_64 rng(7);
  for (Index units = 1; units <= 6; ++units) {
    for (Index growth = 1; growth <= 8; ++growth) {
      EXPECT_EQ((DenseBlockSpec{units, growth}.output_channels(16)), 16 + units * growth);
    }
  }
  DenseBlock<double> block(2, 16, DenseBlockSpec{3, 4}, rng);
  EXPECT_EQ(block.forward(random_tensor({1, 16, 4, 4}, rng), BatchNormMode::kTrain).dim(1), 28);
}

TEST(DenseBlock, OneUnitIsConcatOfInputAndBnReluConv) {
  std::mt19937_64 rng(8);
  DenseBlock<double> block(2, 3, DenseBlockSpec{1, 2}, rng);
  std::vector<T> tensors;
  block.for_each_tensor("", [&](const std::string&, T& t, bool) { tensors.push_back(t); });
  // gamma, beta, running_mean, running_var, conv weight, conv bias
  ASSERT_EQ(tensors.size(), 6u);
  const T x = random_tensor({2, 3, 4, 4}, rng);
  BatchNormState<double> state(3);
  const T unit = conv_forward(relu(batchnorm(x, tensors[0], tensors[1], state, BatchNormMode::kTrain)),
                              ConvSpec::isotropic(2, 3, 1, 1, 3, 2), tensors[4], tensors[5]);
  const T want = concat_channels<double>({x, unit});
  EXPECT_EQ(block.forward(x, BatchNormMode::kTrain).data().matrix(), want.data().matrix());
}

TEST(Linear, MatchesMatrixProduct) {
  std::mt19937_64 rng(9);
  const T x = random_tensor({2, 3}, rng);
  const T w = random_tensor({4, 3}, rng);
  const T b = random_tensor({4}, rng);
  const T y = linear(x, w, b);
  for (Index i = 0; i < 2; ++i)
    for (Index o = 0; o < 4; ++o) {
      double acc = b.data()[o];
      for (Index k = 0; k < 3; ++k) acc += x.data()[i * 3 + k] * w.data()[o * 3 + k];
      EXPECT_NEAR(y.data()[i * 4 + o], acc, 1e-14);
    }
}

TEST(WeightedCE, UniformWeightsZeroLogitsGiveLog2) {
  const std::vector<LabelVolume> labels{LabelVolume({3, 3}, 2, 1)};
  const T loss = weighted_softmax_ce(T::full({1, 2, 3, 3}, 0.0), labels, T::full({1, 1, 3, 3}, 1.0));
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-15);
}

TEST(WeightedCE, ZeroWeightsAnnihilate) {
  std::mt19937_64 rng(10);
  const std::vector<LabelVolume> labels{random_labels({4, 4}, 3, rng)};
  Tape<double> tape;
  TapeScope<double> scope(tape);
  T logits = random_tensor({1, 3, 4, 4}, rng);
  logits.set_requires_grad(true);
  const T loss = weighted_softmax_ce(logits, labels, T::full({1, 1, 4, 4}, 0.0));
  EXPECT_EQ(loss.item(), 0.0);
  backward(tape, loss);
  EXPECT_TRUE((logits.grad() == 0.0).all());
}

TEST(WeightedCE, MatchesPerVoxelOracle) {
  std::mt19937_64 rng(11);
  const T logits = random_tensor({2, 3, 3, 4}, rng, 2.0);
  const std::vector<LabelVolume> labels{random_labels({3, 4}, 3, rng), random_labels({3, 4}, 3, rng)};
  T w({2, 1, 3, 4});
  std::uniform_real_distribution<double> u(0, 1);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  long double total = 0;
  for (Index b = 0; b < 2; ++b)
    for (Index s = 0; s < 12; ++s) {
      long double z = 0;
      for (Index c = 0; c < 3; ++c) z += std::exp(static_cast<long double>(logits.data()[(b * 3 + c) * 12 + s]));
      const int y = labels[static_cast<std::size_t>(b)][s];
      const long double ce = -(logits.data()[(b * 3 + y) * 12 + s] - std::log(z));
      total += w.data()[b * 12 + s] * ce;
    }
  const double want = static_cast<double>(total / 24);
  EXPECT_NEAR(weighted_softmax_ce(logits, labels, w).item(), want, 1e-12 * std::abs(want));
}

TEST(WeightedCE, OutOfRangeLabelThrows) {
  LabelVolume bad({2, 2}, 3, 0);
  bad.data()[1] = 2;
  const std::vector<LabelVolume> labels{bad};
  EXPECT_ANY_THROW(weighted_softmax_ce(T::full({1, 2, 2, 2}, 0.0), labels, T::full({1, 1, 2, 2}, 1.0)));
}

TEST(GradCheck, EveryLayer) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    {
      const ConvSpec spec = ConvSpec::isotropic(2, 3, 1 + trial % 2, 1, 2, 2);
      T w = random_tensor({2, 2, 3, 3}, rng);
      T b = random_tensor({2}, rng);
      const T x = random_tensor({2, 2, 5, 5}, rng);
      const Shape out{2, 2, spec.output_spatial({5, 5})[0], spec.output_spatial({5, 5})[1]};
      auto f = probe([&](const T& in) { return conv_forward(in, spec, w, b); }, out, rng);
      EXPECT_LT(grad_check(f, x), 1e-4);
      EXPECT_LT(grad_check_parameters([&] { return f(x); }, {w, b}), 1e-4);
    }
    {
      T gamma = random_tensor({3}, rng);
      T beta = random_tensor({3}, rng);
      BatchNormState<double> state(3);
      const T x = random_tensor({2, 3, 3, 3, 2}, rng);
      auto f = probe([&](const T& in) { return batchnorm(in, gamma, beta, state, BatchNormMode::kTrain); },
                     x.shape(), rng);
      EXPECT_LT(grad_check(f, x), 1e-4);
      EXPECT_LT(grad_check_parameters([&] { return f(x); }, {gamma, beta}), 1e-4);
    }
    EXPECT_LT(grad_check(probe([](const T& in) { return maxpool(in, 2, 2); }, {1, 2, 2, 3}, rng),
                         random_tensor({1, 2, 5, 6}, rng)),
              1e-4);
    EXPECT_LT(grad_check(probe([](const T& in) { return avgpool(in, 3, 2); }, {1, 2, 2, 2}, rng),
                         random_tensor({1, 2, 5, 6}, rng)),
              1e-4);
    EXPECT_LT(grad_check(probe([](const T& in) { return upsample_nearest(in, 3); }, {1, 1, 6, 3, 3}, rng),
                         random_tensor({1, 1, 2, 1, 1}, rng)),
              1e-4);
    {
      DenseBlock<double> block(2, 2, DenseBlockSpec{2, 2}, rng);
      std::vector<T> params;
      block.for_each_tensor("", [&](const std::string&, T& t, bool trainable) {
        if (trainable) params.push_back(t);
      });
      const T x = random_tensor({2, 2, 4, 4}, rng);
      auto f = probe([&](const T& in) { return block.forward(in, BatchNormMode::kTrain); }, {2, 6, 4, 4}, rng);
      EXPECT_LT(grad_check(f, x), 1e-4);
      EXPECT_LT(grad_check_parameters([&] { return f(x); }, params), 1e-4);
    }
    {
      T w = random_tensor({4, 3}, rng);
      T b = random_tensor({4}, rng);
      const T x = random_tensor({2, 3}, rng);
      auto f = probe([&](const T& in) { return linear(in, w, b); }, {2, 4}, rng);
      EXPECT_LT(grad_check(f, x), 1e-4);
      EXPECT_LT(grad_check_parameters([&] { return f(x); }, {w, b}), 1e-4);
    }
    EXPECT_LT(grad_check(probe([](const T& in) { return grid_max_pool(in, 2); }, {1, 2, 2, 2}, rng),
                         random_tensor({1, 2, 5, 4}, rng)),
              1e-4);
    EXPECT_LT(grad_check(probe([](const T& in) { return spatial_mean(in); }, {2, 3}, rng),
                         random_tensor({2, 3, 3, 2}, rng)),
              1e-4);
    {
      const std::vector<LabelVolume> labels{random_labels({3, 3}, 3, rng)};
      T w({1, 1, 3, 3});
      std::uniform_real_distribution<double> u(0, 1);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
      EXPECT_LT(grad_check([&](const T& in) { return weighted_softmax_ce(in, labels, w); },
                           random_tensor({1, 3, 3, 3}, rng)),
                1e-4);
    }
  }
}

// Extent along the last axis of the nonzero input gradient of single
// output units, maximised over the output units of one row.
Index impulse_extent(const ArchitectureSpec& arch, Index position, std::mt19937_64& rng) {
  ArchitectureSpec positive = arch;
  Stream<double> stream(positive, rng);
  stream.for_each_tensor("", [](const std::string& name, T& t, bool) {
    if (name.ends_with("weight")) t.data() = t.data().abs() + 0.1;
  });
  const Index n = 40;
  const T x0 = T::full({1, positive.channels_at(position), n, n}, 1.0);
  const Index end = static_cast<Index>(positive.layers.size());
  Index best = 0;
  const T probe_out = stream.forward(x0, position, end, BatchNormMode::kEval);
  const Index h = probe_out.dim(2);
  const Index w = probe_out.dim(3);
  for (Index j = 0; j < w; ++j) {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    T x = x0.clone();
    x.set_requires_grad(true);
    const T y = stream.forward(x, position, end, BatchNormMode::kEval);
    T mask = T::full(y.shape(), 0.0);
    mask.data()[(h / 2) * w + j] = 1.0;
    backward(tape, sum(mul(y, mask)));
    Index lo = n, hi = -1;
    for (Index c = 0; c < x.dim(1); ++c)
      for (Index r = 0; r < n; ++r)
        for (Index k = 0; k < n; ++k) {
          if (x.grad()[(c * n + r) * n + k] != 0) {
            lo = std::min(lo, k);
            hi = std::max(hi, k);
          }
        }
    // Skip units whose window is clipped by the border.
    if (lo > 0 && hi < n - 1) best = std::max(best, hi - lo + 1);
  }
  return best;
}

TEST(ReceptiveField, HandExamples) {
  ArchitectureSpec one;
  one.classes = 1;
  one.layers = {LayerSpec::conv(3, 1, 1, 1)};
  EXPECT_EQ(receptive_field(one, 0), 3);
  ArchitectureSpec two = one;
  two.layers = {LayerSpec::conv(3, 1, 1, 1), LayerSpec::conv(3, 1, 1, 1)};
  EXPECT_EQ(receptive_field(two, 0), 5);
  std::mt19937_64 rng(13);
  EXPECT_EQ(impulse_extent(two, 0, rng), 5);
}

TEST(ReceptiveField, ConvPoolConvMatchesImpulseResponse) {
  // The standard composition gives 3 + (3 - 1) * 2 + ... = 8 for
  // conv3, pool2/2, conv3; the impulse response is the ground truth here.
  ArchitectureSpec arch;
  arch.classes = 1;
  arch.layers = {LayerSpec::conv(3, 1, 1, 1), LayerSpec::avgpool(2, 2), LayerSpec::conv(3, 1, 1, 1)};
  std::mt19937_64 rng(14);
  EXPECT_EQ(receptive_field(arch, 0), impulse_extent(arch, 0, rng));
  EXPECT_EQ(receptive_field(arch, 0), 8);
}

TEST(ReceptiveField, RandomArchitecturesMatchImpulseResponse) {
  std::mt19937_64 rng(15);
  std::uniform_int_distribution<int> count(2, 5), kind(0, 4), k(0, 2);
  for (int trial = 0; trial < 30; ++trial) {
    ArchitectureSpec arch;
    arch.classes = 1;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      switch (kind(rng)) {
        case 0: case 1: {
          const Index kernel = 2 * k(rng) + 1;
          arch.layers.push_back(LayerSpec::conv(kernel, 1, kernel / 2, 1));
          break;
        }
        case 2: arch.layers.push_back(LayerSpec::conv(3, 2, 1, 1)); break;
        case 3: arch.layers.push_back(LayerSpec::avgpool(2, 2)); break;
        default: arch.layers.push_back(LayerSpec::upsample(2)); break;
      }
    }
    const Index position = std::uniform_int_distribution<Index>(0, n - 1)(rng);
    EXPECT_EQ(receptive_field(arch, position), impulse_extent(arch, position, rng)) << arch.to_text();
  }
}

TEST(Architecture, PresetsValidateAndRoundTripAsText) {
  for (const char* name : {"desk2d", "desk3d", "mini2d"}) {
    const ArchitectureSpec arch = ArchitectureSpec::preset(name);
    EXPECT_NO_THROW(arch.validate());
    EXPECT_EQ(ArchitectureSpec::parse(arch.to_text()), arch);
    ASSERT_EQ(arch.sites.size(), 4u);
    EXPECT_EQ(arch.sites[0].family, AttentionFamily::kChannel);
    EXPECT_EQ(arch.sites[1].family, AttentionFamily::kChannel);
    EXPECT_EQ(arch.sites[2].family, AttentionFamily::kSpatial);
    EXPECT_EQ(arch.sites[3].family, AttentionFamily::kLoss);
    EXPECT_EQ(arch.sites[3].position, static_cast<Index>(arch.layers.size()));
  }
  EXPECT_ANY_THROW(ArchitectureSpec::preset("nope"));
}

TEST(Architecture, InvalidSitesRejected) {
  ArchitectureSpec arch = ArchitectureSpec::preset("mini2d");
  arch.sites.push_back(arch.sites[0]);
  EXPECT_ANY_THROW(arch.validate());
  arch = ArchitectureSpec::preset("mini2d");
  arch.sites[0].position = 99;
  EXPECT_ANY_THROW(arch.validate());
}
