#include "danlab/attention.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace danlab {

std::vector<double> GaussianKernel::dense(Index rank) const {
  std::vector<double> out{1.0};
  for (Index r = 0; r < rank; ++r) {
    std::vector<double> next;
    next.reserve(out.size() * profile.size());
    for (double a : out) {
      for (double b : profile) next.push_back(a * b);
    }
    out = std::move(next);
  }
  return out;
}

GaussianKernel gaussian_kernel(Index size, double sigma) {
  if (size < 1 || size % 2 == 0) throw DomainError("gaussian kernel size must be odd and positive");
  if (!(sigma > 0)) throw DomainError("gaussian sigma must be positive");
  GaussianKernel k;
  k.size = size;
  k.sigma = sigma;
  const double center = static_cast<double>(size / 2);
  double total = 0;
  for (Index i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - center;
    k.profile.push_back(std::exp(-d * d / (2 * sigma * sigma)));
    total += k.profile.back();
  }
  for (double& w : k.profile) w /= total;
  return k;
}

GaussianKernel default_loss_attention_kernel() { return gaussian_kernel(3, std::sqrt(0.5)); }

template <typename Scalar>
Tensor<Scalar> gaussian_smooth(const Tensor<Scalar>& map, const GaussianKernel& kernel) {
  if (map.rank() < 3 || map.dim(1) != 1) throw ShapeError("gaussian_smooth expects [B,1,spatial...]");
  const Index rank = map.rank() - 2;
  const Shape& shape = map.shape();
  const Index radius = kernel.size / 2;
  Buffer<Scalar> current = map.data();
  Buffer<Scalar> next(current.size());
  for (Index axis = 0; axis < rank; ++axis) {
    const Index n = shape[static_cast<std::size_t>(2 + axis)];
    Index inner = 1;
    for (Index a = axis + 1; a < rank; ++a) inner *= shape[static_cast<std::size_t>(2 + a)];
    const Index outer = current.size() / (n * inner);
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < n; ++i) {
        for (Index in = 0; in < inner; ++in) {
          double acc = 0;
          for (Index k = -radius; k <= radius; ++k) {
            const Index j = std::clamp<Index>(i + k, 0, n - 1);
            acc += kernel.profile[static_cast<std::size_t>(k + radius)] *
                   static_cast<double>(current[(o * n + j) * inner + in]);
          }
          next[(o * n + i) * inner + in] = static_cast<Scalar>(acc);
        }
      }
    }
    std::swap(current, next);
  }
  return Tensor<Scalar>(shape, std::move(current));
}

template <typename Scalar>
Tensor<Scalar> loss_attention(const Tensor<Scalar>& p_logits, const Tensor<Scalar>& q_logits,
                              const std::optional<GaussianKernel>& kernel) {
  if (p_logits.shape() != q_logits.shape()) {
    throw ShapeError("loss attention needs equal shapes, got " + to_string(p_logits.shape()) +
                     " and " + to_string(q_logits.shape()));
  }
  const auto p = argmax_labels(p_logits);
  const auto q = argmax_labels(q_logits);
  Shape shape = p_logits.shape();
  shape[1] = 1;
  Tensor<Scalar> weights(shape);
  const Index V = p.front().size();
  for (std::size_t b = 0; b < p.size(); ++b) {
    for (Index v = 0; v < V; ++v) {
      weights.data()[static_cast<Index>(b) * V + v] = p[b][v] != q[b][v] ? Scalar(1) : Scalar(0);
    }
  }
  if (!kernel) return weights;
  return gaussian_smooth(weights, *kernel);
}

template <typename Scalar>
SpatialAttention<Scalar>::SpatialAttention(Index spatial_rank, Index channels, std::mt19937_64& rng,
                                           Scalar gate_bias) {
  if (channels < 2) throw ShapeError("spatial attention needs at least two channels");
  const Index hidden = channels / 2;
  transform = Conv<Scalar>(ConvSpec::isotropic(spatial_rank, 3, 1, 1, channels, hidden), rng);
  score = Conv<Scalar>(ConvSpec::isotropic(spatial_rank, 3, 1, 1, hidden, 1), rng);
  score.weight.data().setZero();
  score.bias.data().setConstant(gate_bias);
}

template <typename Scalar>
Tensor<Scalar> SpatialAttention<Scalar>::forward(const Tensor<Scalar>& fused) const {
  if (fused.rank() < 3 || fused.dim(1) < 2) throw ShapeError("spatial attention needs [B,C>=2,spatial...]");
  return sigmoid(score.forward(relu(transform.forward(fused))));
}

template <typename Scalar>
ChannelAttention<Scalar>::ChannelAttention(Index channels, std::mt19937_64& rng, Index grid,
                                           Index reduction, Scalar gate_bias)
    : grid_(grid) {
  if (channels < 1 || grid < 1 || reduction < 1) throw std::invalid_argument("invalid channel attention");
  const Index hidden = std::max<Index>(1, (channels + reduction - 1) / reduction);
  fc1_weight = Tensor<Scalar>(Shape{hidden, channels}, true);
  fc1_bias = Tensor<Scalar>(Shape{hidden}, true);
  fc2_weight = Tensor<Scalar>(Shape{channels, hidden}, true);
  fc2_bias = Tensor<Scalar>::full(Shape{channels}, gate_bias, true);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(channels)));
  for (Index i = 0; i < fc1_weight.size(); ++i) fc1_weight.data()[i] = static_cast<Scalar>(normal(rng));
}

template <typename Scalar>
Tensor<Scalar> ChannelAttention<Scalar>::forward(const Tensor<Scalar>& fused) const {
  if (fused.rank() < 3) throw ShapeError("channel attention needs [B,C,spatial...]");
  const Tensor<Scalar> descriptor = spatial_mean(grid_max_pool(fused, grid_));
  const Tensor<Scalar> gate =
      sigmoid(linear(relu(linear(descriptor, fc1_weight, fc1_bias)), fc2_weight, fc2_bias));
  Shape shape(fused.shape().size(), 1);
  shape[0] = fused.dim(0);
  shape[1] = fused.dim(1);
  return reshape(gate, shape);
}

void NoiseDiffusionParams::validate() const {
  if (!(mu >= 0 && mu < 0.5)) throw DomainError("mu must lie in [0, 0.5)");
  if (!(tau > 0)) throw DomainError("tau must be positive");
}

double noise_probability(const NoiseDiffusionParams& params, Index rho) {
  params.validate();
  if (rho < 1) throw DomainError("rho must be >= 1");
  const double r = static_cast<double>(rho);
  return 1.0 - std::pow(1.0 - params.mu, params.tau * r * r);
}

std::vector<PlacementRow> placement_report(const ArchitectureSpec& arch,
                                           const NoiseDiffusionParams& params, double threshold) {
  arch.validate();
  std::vector<PlacementRow> rows;
  for (const auto& site : arch.sites) {
    PlacementRow row;
    row.site_id = site.id;
    row.position = site.position;
    row.rho = receptive_field(arch, site.position);
    row.probability = noise_probability(params, row.rho);
    if (site.family == AttentionFamily::kLoss) {
      row.recommended = AttentionFamily::kLoss;
    } else {
      row.recommended = row.probability < threshold ? AttentionFamily::kSpatial : AttentionFamily::kChannel;
    }
    rows.push_back(row);
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.site_id < b.site_id; });
  return rows;
}

std::string format_placement_report(const std::vector<PlacementRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "site" << std::setw(8) << "rho" << std::setw(10) << "prob"
     << "family\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(6) << r.site_id << std::setw(8) << r.rho << std::setw(10)
       << std::fixed << std::setprecision(4) << r.probability << to_string(r.recommended) << '\n';
  }
  return os.str();
}

#define DANLAB_INSTANTIATE(S)                                                                   \
  template Tensor<S> gaussian_smooth(const Tensor<S>&, const GaussianKernel&);                  \
  template Tensor<S> loss_attention(const Tensor<S>&, const Tensor<S>&,                         \
                                    const std::optional<GaussianKernel>&);                      \
  template class SpatialAttention<S>;                                                           \
  template class ChannelAttention<S>;

DANLAB_INSTANTIATE(float)
DANLAB_INSTANTIATE(double)

#undef DANLAB_INSTANTIATE

}  // namespace danlab
