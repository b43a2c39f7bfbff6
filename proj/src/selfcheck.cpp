#include "danlab/selfcheck.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

#include "danlab/attention.hpp"
#include "danlab/dan.hpp"
#include "danlab/distillation.hpp"
#include "danlab/layers.hpp"
#include "danlab/metrics.hpp"

namespace danlab {

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  T t(std::move(shape));
  std::normal_distribution<double> normal(0.0, scale);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = normal(rng);
  return t;
}

LabelVolume random_labels(const Shape& shape, int classes, std::mt19937_64& rng) {
  LabelVolume l(shape, classes);
  std::uniform_int_distribution<int> pick(0, classes - 1);
  for (Index i = 0; i < l.size(); ++i) l[i] = static_cast<std::uint8_t>(pick(rng));
  return l;
}

// Scalar probe sum(f(x) * r) with a fixed random r, so every output matters.
std::function<T(const T&)> probe(std::function<T(const T&)> f, const Shape& out_shape, std::mt19937_64& rng) {
  T r = random_tensor(out_shape, rng);
  return [f = std::move(f), r](const T& x) { return sum(mul(f(x), r)); };
}

// x*x with the adjoint scaled by 3 instead of 2.
T corrupted_square(const T& x) {
  T out(x.shape(), Buffer<double>(x.data() * x.data()));
  if (auto* tape = detail::recording_tape({&x})) {
    out.set_requires_grad(true);
    auto in = x.storage();
    tape->record("corrupted_square", {in}, out.storage(), [in](const Buffer<double>& g) {
      detail::accumulate(*in, (3.0 * in->data * g).eval());
    });
  }
  return out;
}

struct Suite {
  std::vector<CheckResult> results;
  double tolerance;

  void grad(const std::string& name, const std::function<double()>& run) {
    try {
      const double err = run();
      std::ostringstream os;
      os << "max_rel_err=" << err;
      results.push_back({"grad:" + name, err < tolerance, os.str()});
    } catch (const std::exception& e) {
      results.push_back({"grad:" + name, false, e.what()});
    }
  }

  void check(const std::string& name, bool ok, const std::string& detail) { results.push_back({name, ok, detail}); }
};

void gradient_checks(Suite& s, bool corrupt) {
  std::mt19937_64 rng(20240101);
  s.grad("conv2d", [&] {
    const ConvSpec spec = ConvSpec::isotropic(2, 3, 2, 1, 2, 3);
    const T x = random_tensor({2, 2, 5, 6}, rng);
    T w = random_tensor({3, 2, 3, 3}, rng);
    T b = random_tensor({3}, rng);
    auto f = probe([&](const T& in) { return conv_forward(in, spec, w, b); }, {2, 3, 3, 3}, rng);
    const T xw = x.clone();
    return std::max(grad_check(f, x), grad_check_parameters([&] { return f(xw); }, {w, b}));
  });
  s.grad("conv3d", [&] {
    const ConvSpec spec = ConvSpec::isotropic(3, 3, 1, 1, 1, 2);
    const T x = random_tensor({1, 1, 3, 4, 3}, rng);
    T w = random_tensor({2, 1, 3, 3, 3}, rng);
    T b = random_tensor({2}, rng);
    auto f = probe([&](const T& in) { return conv_forward(in, spec, w, b); }, {1, 2, 3, 4, 3}, rng);
    const T xw = x.clone();
    return std::max(grad_check(f, x), grad_check_parameters([&] { return f(xw); }, {w, b}));
  });
  s.grad("batchnorm", [&] {
    const T x = random_tensor({3, 2, 4, 4}, rng);
    T gamma = random_tensor({2}, rng);
    T beta = random_tensor({2}, rng);
    BatchNormState<double> state(2);
    auto f = probe([&](const T& in) { return batchnorm(in, gamma, beta, state, BatchNormMode::kTrain); },
                   {3, 2, 4, 4}, rng);
    const T xw = x.clone();
    return std::max(grad_check(f, x), grad_check_parameters([&] { return f(xw); }, {gamma, beta}));
  });
  s.grad("maxpool", [&] {
    auto f = probe([](const T& in) { return maxpool(in, 2, 2); }, {1, 2, 3, 3}, rng);
    return grad_check(f, random_tensor({1, 2, 7, 6}, rng));
  });
  s.grad("avgpool", [&] {
    auto f = probe([](const T& in) { return avgpool(in, 2, 2); }, {1, 2, 3, 3}, rng);
    return grad_check(f, random_tensor({1, 2, 7, 6}, rng));
  });
  s.grad("upsample", [&] {
    auto f = probe([](const T& in) { return upsample_nearest(in, 2); }, {1, 2, 6, 4}, rng);
    return grad_check(f, random_tensor({1, 2, 3, 2}, rng));
  });
  s.grad("dense_block", [&] {
    DenseBlock<double> block(2, 2, DenseBlockSpec{2, 2}, rng);
    auto f = probe([&](const T& in) { return block.forward(in, BatchNormMode::kTrain); }, {2, 6, 4, 4}, rng);
    const T x = random_tensor({2, 2, 4, 4}, rng);
    std::vector<T> params;
    block.for_each_tensor("", [&](const std::string&, T& t, bool trainable) {
      if (trainable) params.push_back(t);
    });
    const T xw = x.clone();
    return std::max(grad_check(f, x), grad_check_parameters([&] { return f(xw); }, params));
  });
  s.grad("linear", [&] {
    T w = random_tensor({3, 4}, rng);
    T b = random_tensor({3}, rng);
    auto f = probe([&](const T& in) { return linear(in, w, b); }, {2, 3}, rng);
    const T x = random_tensor({2, 4}, rng);
    const T xw = x.clone();
    return std::max(grad_check(f, x), grad_check_parameters([&] { return f(xw); }, {w, b}));
  });
  s.grad("softmax", [&] {
    auto f = probe([](const T& in) { return softmax(in, 1); }, {2, 3, 4}, rng);
    return grad_check(f, random_tensor({2, 3, 4}, rng));
  });
  s.grad("weighted_ce", [&] {
    const std::vector<LabelVolume> labels = {random_labels({4, 5}, 3, rng), random_labels({4, 5}, 3, rng)};
    T weights(Shape{2, 1, 4, 5});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (Index i = 0; i < weights.size(); ++i) weights.data()[i] = unit(rng);
    return grad_check([&](const T& in) { return weighted_softmax_ce(in, std::span<const LabelVolume>(labels), weights); },
                      random_tensor({2, 3, 4, 5}, rng));
  });
  s.grad("spatial_attention", [&] {
    std::mt19937_64 init(7);
    SpatialAttention<double> sa(2, 4, init, 0.5);
    sa.score.weight.data() = random_tensor(sa.score.weight.shape(), rng, 0.3).data();
    auto f = probe([&](const T& in) { return sa.forward(in); }, {2, 1, 5, 5}, rng);
    const T x = random_tensor({2, 4, 5, 5}, rng);
    std::vector<T> params;
    sa.for_each_tensor("", [&](const std::string&, T& t, bool) { params.push_back(t); });
    const T xw = x.clone();
    return std::max(grad_check(f, x), grad_check_parameters([&] { return f(xw); }, params));
  });
  s.grad("channel_attention", [&] {
    std::mt19937_64 init(8);
    ChannelAttention<double> ca(5, init, 2, 2, 0.5);
    ca.fc2_weight.data() = random_tensor(ca.fc2_weight.shape(), rng, 0.3).data();
    auto f = probe([&](const T& in) { return ca.forward(in); }, {2, 5, 1, 1}, rng);
    const T x = random_tensor({2, 5, 5, 4}, rng);
    std::vector<T> params;
    ca.for_each_tensor("", [&](const std::string&, T& t, bool) { params.push_back(t); });
    const T xw = x.clone();
    return std::max(grad_check(f, x), grad_check_parameters([&] { return f(xw); }, params));
  });
  s.grad("mini_dan", [&] {
    DanOptions options;
    options.gate_bias = 0.5;
    TwoStreamDAN<double> dan(ArchitectureSpec::preset("mini2d"), 11, options);
    // Zero biases tie logits exactly where ReLUs are dead, and a tie flips the
    // loss-attention mask under any perturbation; check at a generic point.
    for (auto& p : dan.parameters()) p.data() += random_tensor(p.shape(), rng, 0.1).data();
    const T x = random_tensor({2, 1, 8, 8}, rng);
    const std::vector<LabelVolume> labels = {random_labels({8, 8}, 2, rng), random_labels({8, 8}, 2, rng)};
    auto loss = [&] {
      const auto out = dan.forward(x, BatchNormMode::kTrain);
      return dan.compute_loss(out.p, out.q, labels).loss;
    };
    return grad_check_parameters(loss, dan.parameters());
  });
  if (corrupt) {
    s.grad("corrupted_adjoint", [&] {
      return grad_check([](const T& in) { return sum(corrupted_square(in)); }, random_tensor({6}, rng));
    });
  }
}

void transform_checks(Suite& s) {
  std::mt19937_64 rng(5);
  for (const Shape& spatial : {Shape{6, 6}, Shape{3, 5, 5}}) {
    const auto rank = static_cast<Index>(spatial.size());
    Shape full{2, 3};
    full.insert(full.end(), spatial.begin(), spatial.end());
    const T x = random_tensor(full, rng);
    const LabelVolume labels = random_labels(spatial, 4, rng);
    int exact = 0;
    const auto transforms = default_transforms(rank);
    for (const auto& t : transforms) {
      const T back = t.inverse().apply(t.apply(x, rank), rank);
      const bool tensor_ok = (back.data() == x.data()).all();
      const bool labels_ok = t.inverse().apply(t.apply(labels)) == labels;
      exact += tensor_ok && labels_ok;
    }
    s.check("transforms:" + std::to_string(rank) + "d", exact == static_cast<int>(transforms.size()) && exact == 12,
            std::to_string(exact) + "/" + std::to_string(transforms.size()) + " exact round trips");
  }
}

double brute_nearest(const Coord& a, const std::vector<Coord>& set) {
  long long best = std::numeric_limits<long long>::max();
  for (const auto& b : set) {
    long long d2 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    best = std::min(best, d2);
  }
  return std::sqrt(static_cast<double>(best));
}

void metric_checks(Suite& s) {
  std::mt19937_64 rng(9);
  int agree = 0;
  constexpr int kMasks = 25;
  for (int m = 0; m < kMasks; ++m) {
    const Shape shape{static_cast<Index>(4 + m % 9), static_cast<Index>(5 + m % 7)};
    const LabelVolume a = random_labels(shape, 2, rng);
    const LabelVolume b = random_labels(shape, 2, rng);
    const auto ba = boundary_voxels(a, 1);
    const auto bb = boundary_voxels(b, 1);
    bool ok = true;
    if (!ba.empty() && !bb.empty()) {
      double sum_ab = 0, sum_ba = 0, max_ab = 0, max_ba = 0;
      for (const auto& c : ba) {
        const double d = brute_nearest(c, bb);
        sum_ab += d;
        max_ab = std::max(max_ab, d);
      }
      for (const auto& c : bb) {
        const double d = brute_nearest(c, ba);
        sum_ba += d;
        max_ba = std::max(max_ba, d);
      }
      const double adb = (sum_ab / static_cast<double>(ba.size()) + sum_ba / static_cast<double>(bb.size())) / 2;
      ok = avg_boundary_distance(a, b, 1) == adb && hausdorff(a, b, 1) == std::max(max_ab, max_ba);
    }
    Index p = 0, t = 0, both = 0;
    for (Index v = 0; v < a.size(); ++v) {
      p += a[v] == 1;
      t += b[v] == 1;
      both += a[v] == 1 && b[v] == 1;
    }
    const double d = p + t == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
    agree += ok && dice(a, b, 1) == d;
  }
  s.check("metrics:oracle", agree == kMasks, std::to_string(agree) + "/" + std::to_string(kMasks) + " masks exact");
}

void probability_checks(Suite& s) {
  const NoiseDiffusionParams params{0.1, 0.1};
  const double p4 = noise_probability(params, 4);
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "prob(mu=0.1, tau=0.1, rho=4) = " << p4;
  s.check("eq:rho4", std::abs(p4 - 0.1551) <= 1e-4, os.str());
  for (Index rho : {52, 64}) {
    const double p = noise_probability(params, rho);
    std::ostringstream row;
    row.precision(15);
    row << "prob(mu=0.1, tau=0.1, rho=" << rho << ") = " << p;
    s.check("eq:rho" + std::to_string(rho), std::abs(1.0 - p) <= 1e-12, row.str());
  }
}

}  // namespace

std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& options) {
  Suite s{{}, options.grad_tolerance};
  probability_checks(s);
  gradient_checks(s, options.corrupt_adjoint);
  transform_checks(s);
  metric_checks(s);
  return s.results;
}

std::string format_checks(const std::vector<CheckResult>& results) {
  std::ostringstream os;
  for (const auto& r : results) os << (r.passed ? "PASS " : "FAIL ") << r.name << ' ' << r.detail << '\n';
  return os.str();
}

}  // namespace danlab
