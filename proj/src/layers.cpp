#include "danlab/layers.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace danlab {

namespace {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

// [B, C, spatial...] with the spatial axes left-padded to three.
struct Geometry {
  Index batch = 1;
  Index channels = 1;
  Index spatial_rank = 0;
  std::array<Index, 3> extent{1, 1, 1};

  Index voxels() const { return extent[0] * extent[1] * extent[2]; }

  Shape spatial_shape() const {
    return Shape(extent.begin() + (3 - spatial_rank), extent.end());
  }
  Shape shape(Index c, const std::array<Index, 3>& e) const {
    Shape s{batch, c};
    for (Index i = 3 - spatial_rank; i < 3; ++i) s.push_back(e[static_cast<std::size_t>(i)]);
    return s;
  }
};

Geometry geometry(const Shape& shape, const char* op) {
  if (shape.size() < 3 || shape.size() > 5) {
    throw ShapeError(std::string(op) + " expects [B,C,spatial...] with 1-3 spatial axes, got " +
                     to_string(shape));
  }
  Geometry g;
  g.batch = shape[0];
  g.channels = shape[1];
  g.spatial_rank = static_cast<Index>(shape.size()) - 2;
  for (Index i = 0; i < g.spatial_rank; ++i) {
    g.extent[static_cast<std::size_t>(3 - g.spatial_rank + i)] = shape[static_cast<std::size_t>(2 + i)];
  }
  return g;
}

// Per-axis parameters padded to three axes with `fill`.
std::array<Index, 3> pad3(const std::vector<Index>& v, Index fill) {
  std::array<Index, 3> out{fill, fill, fill};
  const std::size_t off = 3 - v.size();
  for (std::size_t i = 0; i < v.size(); ++i) out[off + i] = v[i];
  return out;
}

std::array<Index, 3> pad3(Index spatial_rank, Index value, Index fill) {
  return pad3(std::vector<Index>(static_cast<std::size_t>(spatial_rank), value), fill);
}

struct ConvGeometry {
  std::array<Index, 3> in, out, kernel, stride, pad;
  Index channels_in = 0;

  Index rows() const { return channels_in * kernel[0] * kernel[1] * kernel[2]; }
  Index cols() const { return out[0] * out[1] * out[2]; }
  Index in_voxels() const { return in[0] * in[1] * in[2]; }
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* cols) {
  const Index P = g.cols();
  Index row = 0;
  for (Index c = 0; c < g.channels_in; ++c) {
    const Scalar* xc = x + c * g.in_voxels();
    for (Index kz = 0; kz < g.kernel[0]; ++kz) {
      for (Index ky = 0; ky < g.kernel[1]; ++ky) {
        for (Index kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          Scalar* dst = cols + row * P;
          for (Index oz = 0; oz < g.out[0]; ++oz) {
            const Index iz = oz * g.stride[0] - g.pad[0] + kz;
            const bool vz = iz >= 0 && iz < g.in[0];
            for (Index oy = 0; oy < g.out[1]; ++oy) {
              const Index iy = oy * g.stride[1] - g.pad[1] + ky;
              const bool vy = vz && iy >= 0 && iy < g.in[1];
              const Scalar* src = xc + (iz * g.in[1] + iy) * g.in[2];
              for (Index ox = 0; ox < g.out[2]; ++ox) {
                const Index ix = ox * g.stride[2] - g.pad[2] + kx;
                *dst++ = (vy && ix >= 0 && ix < g.in[2]) ? src[ix] : Scalar(0);
              }
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* cols, const ConvGeometry& g, Scalar* dx) {
  const Index P = g.cols();
  Index row = 0;
  for (Index c = 0; c < g.channels_in; ++c) {
    Scalar* dxc = dx + c * g.in_voxels();
    for (Index kz = 0; kz < g.kernel[0]; ++kz) {
      for (Index ky = 0; ky < g.kernel[1]; ++ky) {
        for (Index kx = 0; kx < g.kernel[2]; ++kx, ++row) {
          const Scalar* src = cols + row * P;
          for (Index oz = 0; oz < g.out[0]; ++oz) {
            const Index iz = oz * g.stride[0] - g.pad[0] + kz;
            const bool vz = iz >= 0 && iz < g.in[0];
            for (Index oy = 0; oy < g.out[1]; ++oy) {
              const Index iy = oy * g.stride[1] - g.pad[1] + ky;
              const bool vy = vz && iy >= 0 && iy < g.in[1];
              Scalar* dst = dxc + (iz * g.in[1] + iy) * g.in[2];
              for (Index ox = 0; ox < g.out[2]; ++ox, ++src) {
                const Index ix = ox * g.stride[2] - g.pad[2] + kx;
                if (vy && ix >= 0 && ix < g.in[2]) dst[ix] += *src;
              }
            }
          }
        }
      }
    }
  }
}

struct PoolGeometry {
  Geometry in;
  std::array<Index, 3> out{1, 1, 1};
  std::array<Index, 3> window{1, 1, 1};
  std::array<Index, 3> stride{1, 1, 1};

  Index out_voxels() const { return out[0] * out[1] * out[2]; }
};

PoolGeometry pool_geometry(const Shape& shape, Index window, Index stride, const char* op) {
  if (window < 1 || stride < 1) throw std::invalid_argument(std::string(op) + ": window and stride must be >= 1");
  PoolGeometry pg;
  pg.in = geometry(shape, op);
  pg.window = pad3(pg.in.spatial_rank, window, 1);
  pg.stride = pad3(pg.in.spatial_rank, stride, 1);
  for (std::size_t a = 0; a < 3; ++a) {
    if (pg.in.extent[a] < pg.window[a]) {
      throw ShapeError(std::string(op) + ": window larger than input " + to_string(shape));
    }
    pg.out[a] = (pg.in.extent[a] - pg.window[a]) / pg.stride[a] + 1;
  }
  return pg;
}

}  // namespace

ConvSpec ConvSpec::isotropic(Index spatial_rank, Index kernel, Index stride, Index padding,
                             Index in_channels, Index out_channels) {
  const auto n = static_cast<std::size_t>(spatial_rank);
  ConvSpec spec{std::vector<Index>(n, kernel), std::vector<Index>(n, stride),
                std::vector<Index>(n, padding), in_channels, out_channels};
  spec.validate();
  return spec;
}

void ConvSpec::validate() const {
  const std::size_t n = kernel.size();
  if (n < 1 || n > 3 || stride.size() != n || padding.size() != n) {
    throw ShapeError("conv spec needs 1-3 spatial axes with matching kernel/stride/padding");
  }
  if (in_channels < 1 || out_channels < 1) throw ShapeError("conv channels must be positive");
  for (std::size_t i = 0; i < n; ++i) {
    if (kernel[i] < 1 || stride[i] < 1 || padding[i] < 0) {
      throw ShapeError("conv kernel/stride must be positive and padding non-negative");
    }
  }
}

Shape ConvSpec::output_spatial(const Shape& input_spatial) const {
  if (input_spatial.size() != kernel.size()) {
    throw ShapeError("conv spec rank does not match input spatial rank");
  }
  Shape out(input_spatial.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Index span = input_spatial[i] + 2 * padding[i] - kernel[i];
    if (span < 0) throw ShapeError("conv output would be empty for input " + to_string(input_spatial));
    out[i] = span / stride[i] + 1;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> conv_forward(const Tensor<Scalar>& x, const ConvSpec& spec,
                            const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  spec.validate();
  const Geometry in = geometry(x.shape(), "conv");
  if (in.spatial_rank != spec.spatial_rank()) {
    throw ShapeError("conv spec has " + std::to_string(spec.spatial_rank()) +
                     " spatial axes, input " + to_string(x.shape()));
  }
  if (in.channels != spec.in_channels) {
    throw ShapeError("conv expects " + std::to_string(spec.in_channels) + " input channels, got " +
                     std::to_string(in.channels));
  }
  Shape wshape{spec.out_channels, spec.in_channels};
  wshape.insert(wshape.end(), spec.kernel.begin(), spec.kernel.end());
  if (weight.shape() != wshape) {
    throw ShapeError("conv weight shape " + to_string(weight.shape()) + ", expected " + to_string(wshape));
  }
  if (bias.shape() != Shape{spec.out_channels}) throw ShapeError("conv bias shape mismatch");

  ConvGeometry g;
  g.in = in.extent;
  g.out = pad3(spec.output_spatial(in.spatial_shape()), 1);
  g.kernel = pad3(spec.kernel, 1);
  g.stride = pad3(spec.stride, 1);
  g.pad = pad3(spec.padding, 0);
  g.channels_in = in.channels;

  const Index K = g.rows();
  const Index P = g.cols();
  const Index out_c = spec.out_channels;
  auto cols = std::make_shared<Buffer<Scalar>>(in.batch * K * P);
  Tensor<Scalar> result(in.shape(out_c, g.out));

  ConstMatrixMap<Scalar> w(weight.data().data(), out_c, K);
  const auto b = bias.data().matrix();
  for (Index n = 0; n < in.batch; ++n) {
    Scalar* col = cols->data() + n * K * P;
    im2col(x.data().data() + n * in.channels * in.voxels(), g, col);
    MatrixMap<Scalar> y(result.data().data() + n * out_c * P, out_c, P);
    y.noalias() = w * ConstMatrixMap<Scalar>(col, K, P);
    y.colwise() += b;
  }

  if (auto* tape = detail::recording_tape<Scalar>({&x, &weight, &bias})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    auto ws = weight.storage();
    auto bs = bias.storage();
    const Index batch = in.batch;
    const Index in_size = in.channels * in.voxels();
    tape->record("conv", {xs, ws, bs}, result.storage(),
                 [=](const Buffer<Scalar>& grad) {
                   ConstMatrixMap<Scalar> wm(ws->data.data(), out_c, K);
                   RowMatrix<Scalar> dw = RowMatrix<Scalar>::Zero(out_c, K);
                   Eigen::Matrix<Scalar, Eigen::Dynamic, 1> db =
                       Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(out_c);
                   Buffer<Scalar> dx;
                   RowMatrix<Scalar> dcol;
                   if (xs->requires_grad) dx = Buffer<Scalar>::Zero(xs->data.size());
                   for (Index n = 0; n < batch; ++n) {
                     ConstMatrixMap<Scalar> gy(grad.data() + n * out_c * P, out_c, P);
                     ConstMatrixMap<Scalar> col(cols->data() + n * K * P, K, P);
                     if (ws->requires_grad) dw.noalias() += gy * col.transpose();
                     if (bs->requires_grad) db += gy.rowwise().sum();
                     if (xs->requires_grad) {
                       dcol.noalias() = wm.transpose() * gy;
                       col2im(dcol.data(), g, dx.data() + n * in_size);
                     }
                   }
                   if (xs->requires_grad) detail::accumulate(*xs, dx);
                   if (ws->requires_grad) {
                     detail::accumulate(*ws, Eigen::Map<const Buffer<Scalar>>(dw.data(), dw.size()));
                   }
                   if (bs->requires_grad) detail::accumulate(*bs, db.array());
                 });
  }
  return result;
}

template <typename Scalar>
BatchNormState<Scalar>::BatchNormState(Index channels)
    : running_mean(Shape{channels}), running_var(Tensor<Scalar>::full(Shape{channels}, Scalar(1))) {}

template <typename Scalar>
Tensor<Scalar> batchnorm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                         const Tensor<Scalar>& beta, BatchNormState<Scalar>& state,
                         BatchNormMode mode, Scalar momentum, Scalar epsilon) {
  const Geometry g = geometry(x.shape(), "batchnorm");
  const Index C = g.channels;
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} ||
      state.running_mean.shape() != Shape{C} || state.running_var.shape() != Shape{C}) {
    throw ShapeError("batchnorm parameters must have one entry per channel");
  }
  const Index V = g.voxels();
  const Index count = g.batch * V;
  const auto& xd = x.data();

  auto mean = std::make_shared<Buffer<Scalar>>(C);
  auto inv_std = std::make_shared<Buffer<Scalar>>(C);
  if (mode == BatchNormMode::kTrain) {
    for (Index c = 0; c < C; ++c) {
      Scalar total = 0;
      Scalar lo = std::numeric_limits<Scalar>::infinity();
      Scalar hi = -lo;
      for (Index n = 0; n < g.batch; ++n) {
        const auto seg = xd.segment((n * C + c) * V, V);
        total += seg.sum();
        lo = std::min(lo, seg.minCoeff());
        hi = std::max(hi, seg.maxCoeff());
      }
      // A constant channel centres to exactly zero.
      const Scalar m = lo == hi ? lo : total / static_cast<Scalar>(count);
      Scalar sq = 0;
      for (Index n = 0; n < g.batch; ++n) {
        sq += (xd.segment((n * C + c) * V, V) - m).square().sum();
      }
      const Scalar var = sq / static_cast<Scalar>(count);
      (*mean)[c] = m;
      (*inv_std)[c] = Scalar(1) / std::sqrt(var + epsilon);
      const Scalar unbiased = count > 1 ? var * count / static_cast<Scalar>(count - 1) : var;
      auto& rm = state.running_mean.data()[c];
      auto& rv = state.running_var.data()[c];
      rm = momentum * rm + (Scalar(1) - momentum) * m;
      rv = momentum * rv + (Scalar(1) - momentum) * unbiased;
    }
  } else {
    *mean = state.running_mean.data();
    *inv_std = (state.running_var.data() + epsilon).sqrt().inverse();
  }

  auto xhat = std::make_shared<Buffer<Scalar>>(xd.size());
  Buffer<Scalar> y(xd.size());
  for (Index n = 0; n < g.batch; ++n) {
    for (Index c = 0; c < C; ++c) {
      const Index off = (n * C + c) * V;
      xhat->segment(off, V) = (xd.segment(off, V) - (*mean)[c]) * (*inv_std)[c];
      y.segment(off, V) = xhat->segment(off, V) * gamma.data()[c] + beta.data()[c];
    }
  }
  Tensor<Scalar> result(x.shape(), std::move(y));
  if (auto* tape = detail::recording_tape<Scalar>({&x, &gamma, &beta})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    auto gs = gamma.storage();
    auto bs = beta.storage();
    const bool train = mode == BatchNormMode::kTrain;
    const Index batch = g.batch;
    tape->record("batchnorm", {xs, gs, bs}, result.storage(), [=](const Buffer<Scalar>& dy) {
      Buffer<Scalar> dgamma = Buffer<Scalar>::Zero(C);
      Buffer<Scalar> dbeta = Buffer<Scalar>::Zero(C);
      for (Index n = 0; n < batch; ++n) {
        for (Index c = 0; c < C; ++c) {
          const Index off = (n * C + c) * V;
          dbeta[c] += dy.segment(off, V).sum();
          dgamma[c] += (dy.segment(off, V) * xhat->segment(off, V)).sum();
        }
      }
      if (xs->requires_grad) {
        Buffer<Scalar> dx(dy.size());
        const Scalar inv_count = Scalar(1) / static_cast<Scalar>(count);
        for (Index n = 0; n < batch; ++n) {
          for (Index c = 0; c < C; ++c) {
            const Index off = (n * C + c) * V;
            const Scalar k = gs->data[c] * (*inv_std)[c];
            if (train) {
              dx.segment(off, V) =
                  k * (dy.segment(off, V) - dbeta[c] * inv_count -
                       xhat->segment(off, V) * (dgamma[c] * inv_count));
            } else {
              dx.segment(off, V) = k * dy.segment(off, V);
            }
          }
        }
        detail::accumulate(*xs, dx);
      }
      detail::accumulate(*gs, dgamma);
      detail::accumulate(*bs, dbeta);
    });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> maxpool(const Tensor<Scalar>& x, Index window, Index stride) {
  const PoolGeometry pg = pool_geometry(x.shape(), window, stride, "maxpool");
  const Index planes = pg.in.batch * pg.in.channels;
  const Index in_v = pg.in.voxels();
  const Index out_v = pg.out_voxels();
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(planes * out_v));
  Tensor<Scalar> result(pg.in.shape(pg.in.channels, pg.out));
  const auto& xd = x.data();
  auto& yd = result.data();
  const auto& e = pg.in.extent;
  for (Index p = 0; p < planes; ++p) {
    for (Index oz = 0; oz < pg.out[0]; ++oz) {
      for (Index oy = 0; oy < pg.out[1]; ++oy) {
        for (Index ox = 0; ox < pg.out[2]; ++ox) {
          Index best = -1;
          Scalar best_value = 0;
          for (Index wz = 0; wz < pg.window[0]; ++wz) {
            for (Index wy = 0; wy < pg.window[1]; ++wy) {
              for (Index wx = 0; wx < pg.window[2]; ++wx) {
                const Index iz = oz * pg.stride[0] + wz;
                const Index iy = oy * pg.stride[1] + wy;
                const Index ix = ox * pg.stride[2] + wx;
                const Index idx = p * in_v + (iz * e[1] + iy) * e[2] + ix;
                if (best < 0 || xd[idx] > best_value) {
                  best = idx;
                  best_value = xd[idx];
                }
              }
            }
          }
          const Index o = p * out_v + (oz * pg.out[1] + oy) * pg.out[2] + ox;
          yd[o] = best_value;
          (*argmax)[static_cast<std::size_t>(o)] = best;
        }
      }
    }
  }
  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    tape->record("maxpool", {xs}, result.storage(), [xs, argmax](const Buffer<Scalar>& g) {
      Buffer<Scalar> dx = Buffer<Scalar>::Zero(xs->data.size());
      for (Index o = 0; o < g.size(); ++o) dx[(*argmax)[static_cast<std::size_t>(o)]] += g[o];
      detail::accumulate(*xs, dx);
    });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> avgpool(const Tensor<Scalar>& x, Index window, Index stride) {
  const PoolGeometry pg = pool_geometry(x.shape(), window, stride, "avgpool");
  const Index planes = pg.in.batch * pg.in.channels;
  const Index in_v = pg.in.voxels();
  const Index out_v = pg.out_voxels();
  const Scalar count = static_cast<Scalar>(pg.window[0] * pg.window[1] * pg.window[2]);
  Tensor<Scalar> result(pg.in.shape(pg.in.channels, pg.out));
  const auto& e = pg.in.extent;

  // Visits (output index, input index) pairs of every window.
  auto for_each_pair = [pg, planes, in_v, out_v, e](auto&& f) {
    for (Index p = 0; p < planes; ++p) {
      for (Index oz = 0; oz < pg.out[0]; ++oz) {
        for (Index oy = 0; oy < pg.out[1]; ++oy) {
          for (Index ox = 0; ox < pg.out[2]; ++ox) {
            const Index o = p * out_v + (oz * pg.out[1] + oy) * pg.out[2] + ox;
            for (Index wz = 0; wz < pg.window[0]; ++wz) {
              for (Index wy = 0; wy < pg.window[1]; ++wy) {
                for (Index wx = 0; wx < pg.window[2]; ++wx) {
                  const Index iz = oz * pg.stride[0] + wz;
                  const Index iy = oy * pg.stride[1] + wy;
                  const Index ix = ox * pg.stride[2] + wx;
                  f(o, p * in_v + (iz * e[1] + iy) * e[2] + ix);
                }
              }
            }
          }
        }
      }
    }
  };
  const auto& xd = x.data();
  auto& yd = result.data();
  // Pairwise sums, so a window of 2^k equal values averages back exactly.
  const Index per_window = pg.window[0] * pg.window[1] * pg.window[2];
  std::vector<Scalar> values;
  values.reserve(static_cast<std::size_t>(planes * out_v * per_window));
  for_each_pair([&](Index, Index i) { values.push_back(xd[i]); });
  for (Index o = 0; o < planes * out_v; ++o) {
    Scalar* v = values.data() + o * per_window;
    for (Index width = 1; width < per_window; width *= 2) {
      for (Index k = 0; k + width < per_window; k += 2 * width) v[k] += v[k + width];
    }
    yd[o] = v[0] / count;
  }

  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    tape->record("avgpool", {xs}, result.storage(), [xs, for_each_pair, count](const Buffer<Scalar>& g) {
      Buffer<Scalar> dx = Buffer<Scalar>::Zero(xs->data.size());
      for_each_pair([&](Index o, Index i) { dx[i] += g[o] / count; });
      detail::accumulate(*xs, dx);
    });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, Index factor) {
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1");
  const Geometry in = geometry(x.shape(), "upsample");
  const auto f = pad3(in.spatial_rank, factor, 1);
  std::array<Index, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) out[a] = in.extent[a] * f[a];
  const Index planes = in.batch * in.channels;
  const Index in_v = in.voxels();
  const Index out_v = out[0] * out[1] * out[2];
  // Source index for every output voxel of one plane.
  auto source = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out_v));
  for (Index z = 0; z < out[0]; ++z) {
    for (Index y = 0; y < out[1]; ++y) {
      for (Index xx = 0; xx < out[2]; ++xx) {
        (*source)[static_cast<std::size_t>((z * out[1] + y) * out[2] + xx)] =
            ((z / f[0]) * in.extent[1] + y / f[1]) * in.extent[2] + xx / f[2];
      }
    }
  }
  Tensor<Scalar> result(in.shape(in.channels, out));
  auto& yd = result.data();
  const auto& xd = x.data();
  for (Index p = 0; p < planes; ++p) {
    for (Index o = 0; o < out_v; ++o) yd[p * out_v + o] = xd[p * in_v + (*source)[static_cast<std::size_t>(o)]];
  }
  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    tape->record("upsample", {xs}, result.storage(),
                 [xs, source, planes, in_v, out_v](const Buffer<Scalar>& g) {
                   Buffer<Scalar> dx = Buffer<Scalar>::Zero(xs->data.size());
                   for (Index p = 0; p < planes; ++p) {
                     for (Index o = 0; o < out_v; ++o) {
                       dx[p * in_v + (*source)[static_cast<std::size_t>(o)]] += g[p * out_v + o];
                     }
                   }
                   detail::accumulate(*xs, dx);
                 });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  const Geometry first = geometry(parts.front().shape(), "concat");
  Index total = 0;
  for (const auto& p : parts) {
    const Geometry g = geometry(p.shape(), "concat");
    if (g.batch != first.batch || g.spatial_shape() != first.spatial_shape()) {
      throw ShapeError("concat inputs differ outside the channel axis");
    }
    total += g.channels;
  }
  const Index V = first.voxels();
  Tensor<Scalar> result(first.shape(total, first.extent));
  auto& yd = result.data();
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index c = p.dim(1);
    for (Index n = 0; n < first.batch; ++n) {
      yd.segment((n * total + offset) * V, c * V) = p.data().segment(n * c * V, c * V);
    }
    offsets.push_back(offset);
    offset += c;
  }
  Tape<Scalar>* tape = active_tape<Scalar>();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    result.set_requires_grad(true);
    std::vector<typename Tensor<Scalar>::StoragePtr> inputs;
    for (const auto& p : parts) inputs.push_back(p.storage());
    const Index batch = first.batch;
    tape->record("concat", inputs, result.storage(),
                 [inputs, offsets, total, V, batch](const Buffer<Scalar>& g) {
                   for (std::size_t k = 0; k < inputs.size(); ++k) {
                     auto& s = *inputs[k];
                     if (!s.requires_grad) continue;
                     const Index c = s.shape[1];
                     Buffer<Scalar> d(s.data.size());
                     for (Index n = 0; n < batch; ++n) {
                       d.segment(n * c * V, c * V) = g.segment((n * total + offsets[k]) * V, c * V);
                     }
                     detail::accumulate(s, d);
                   }
                 });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1) ||
      bias.shape() != Shape{weight.dim(0)}) {
    throw ShapeError("linear: incompatible shapes " + to_string(x.shape()) + " x " +
                     to_string(weight.shape()));
  }
  const Index B = x.dim(0);
  const Index in = x.dim(1);
  const Index out = weight.dim(0);
  Tensor<Scalar> result(Shape{B, out});
  MatrixMap<Scalar> y(result.data().data(), B, out);
  ConstMatrixMap<Scalar> xm(x.data().data(), B, in);
  ConstMatrixMap<Scalar> wm(weight.data().data(), out, in);
  y.noalias() = xm * wm.transpose();
  y.rowwise() += bias.data().matrix().transpose();
  if (auto* tape = detail::recording_tape<Scalar>({&x, &weight, &bias})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    auto ws = weight.storage();
    auto bs = bias.storage();
    tape->record("linear", {xs, ws, bs}, result.storage(), [=](const Buffer<Scalar>& g) {
      ConstMatrixMap<Scalar> gm(g.data(), B, out);
      if (xs->requires_grad) {
        RowMatrix<Scalar> dx = gm * ConstMatrixMap<Scalar>(ws->data.data(), out, in);
        detail::accumulate(*xs, Eigen::Map<const Buffer<Scalar>>(dx.data(), dx.size()));
      }
      if (ws->requires_grad) {
        RowMatrix<Scalar> dw = gm.transpose() * ConstMatrixMap<Scalar>(xs->data.data(), B, in);
        detail::accumulate(*ws, Eigen::Map<const Buffer<Scalar>>(dw.data(), dw.size()));
      }
      if (bs->requires_grad) {
        Buffer<Scalar> db = gm.colwise().sum().transpose().array();
        detail::accumulate(*bs, db);
      }
    });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> grid_max_pool(const Tensor<Scalar>& x, Index grid) {
  const Geometry in = geometry(x.shape(), "grid_max_pool");
  if (grid < 1) throw std::invalid_argument("grid must be >= 1");
  const auto cells = pad3(in.spatial_rank, grid, 1);
  std::array<std::vector<std::pair<Index, Index>>, 3> ranges;
  for (std::size_t a = 0; a < 3; ++a) {
    const Index n = in.extent[a];
    const Index gc = cells[a];
    if (n < gc) throw ShapeError("grid_max_pool: spatial extent smaller than grid");
    for (Index i = 0; i < gc; ++i) {
      ranges[a].emplace_back(i * n / gc, ((i + 1) * n + gc - 1) / gc);
    }
  }
  const Index planes = in.batch * in.channels;
  const Index in_v = in.voxels();
  const Index out_v = cells[0] * cells[1] * cells[2];
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(planes * out_v));
  Tensor<Scalar> result(in.shape(in.channels, cells));
  const auto& xd = x.data();
  const auto& e = in.extent;
  for (Index p = 0; p < planes; ++p) {
    Index o = p * out_v;
    for (const auto& [z0, z1] : ranges[0]) {
      for (const auto& [y0, y1] : ranges[1]) {
        for (const auto& [x0, x1] : ranges[2]) {
          Index best = -1;
          for (Index z = z0; z < z1; ++z) {
            for (Index y = y0; y < y1; ++y) {
              for (Index xx = x0; xx < x1; ++xx) {
                const Index idx = p * in_v + (z * e[1] + y) * e[2] + xx;
                if (best < 0 || xd[idx] > xd[best]) best = idx;
              }
            }
          }
          result.data()[o] = xd[best];
          (*argmax)[static_cast<std::size_t>(o)] = best;
          ++o;
        }
      }
    }
  }
  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    tape->record("grid_max_pool", {xs}, result.storage(), [xs, argmax](const Buffer<Scalar>& g) {
      Buffer<Scalar> dx = Buffer<Scalar>::Zero(xs->data.size());
      for (Index o = 0; o < g.size(); ++o) dx[(*argmax)[static_cast<std::size_t>(o)]] += g[o];
      detail::accumulate(*xs, dx);
    });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> spatial_mean(const Tensor<Scalar>& x) {
  const Geometry in = geometry(x.shape(), "spatial_mean");
  const Index planes = in.batch * in.channels;
  const Index V = in.voxels();
  Tensor<Scalar> result(Shape{in.batch, in.channels});
  for (Index p = 0; p < planes; ++p) {
    result.data()[p] = x.data().segment(p * V, V).sum() / static_cast<Scalar>(V);
  }
  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    tape->record("spatial_mean", {xs}, result.storage(), [xs, planes, V](const Buffer<Scalar>& g) {
      Buffer<Scalar> dx(xs->data.size());
      for (Index p = 0; p < planes; ++p) dx.segment(p * V, V).setConstant(g[p] / static_cast<Scalar>(V));
      detail::accumulate(*xs, dx);
    });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> weighted_softmax_ce(const Tensor<Scalar>& logits,
                                   std::span<const LabelVolume> labels,
                                   const Tensor<Scalar>& voxel_weights) {
  const Geometry g = geometry(logits.shape(), "weighted_softmax_ce");
  const Index B = g.batch;
  const Index C = g.channels;
  const Index V = g.voxels();
  if (static_cast<Index>(labels.size()) != B) throw ShapeError("one label volume per batch element required");
  if (voxel_weights.shape() != g.shape(1, g.extent)) {
    throw ShapeError("voxel weights must be [B,1,spatial], got " + to_string(voxel_weights.shape()));
  }
  const auto& w = voxel_weights.data();
  if ((w < Scalar(0)).any() || (w > Scalar(1)).any()) throw DomainError("voxel weights must lie in [0,1]");
  for (const auto& l : labels) {
    if (l.shape() != g.spatial_shape()) throw ShapeError("label volume shape does not match logits");
    for (Index v = 0; v < V; ++v) {
      if (l[v] >= C) throw DomainError("label " + std::to_string(l[v]) + " out of range for " +
                                       std::to_string(C) + " classes");
    }
  }

  const auto& z = logits.data();
  auto probs = std::make_shared<Buffer<Scalar>>(z.size());
  auto targets = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(B * V));
  const Scalar inv_count = Scalar(1) / static_cast<Scalar>(B * V);
  Scalar total = 0;
  for (Index n = 0; n < B; ++n) {
    const Index base = n * C * V;
    for (Index v = 0; v < V; ++v) {
      Scalar m = z[base + v];
      for (Index c = 1; c < C; ++c) m = std::max(m, z[base + c * V + v]);
      Scalar denom = 0;
      for (Index c = 0; c < C; ++c) {
        const Scalar e = std::exp(z[base + c * V + v] - m);
        (*probs)[base + c * V + v] = e;
        denom += e;
      }
      for (Index c = 0; c < C; ++c) (*probs)[base + c * V + v] /= denom;
      const std::uint8_t label = labels[static_cast<std::size_t>(n)][v];
      (*targets)[static_cast<std::size_t>(n * V + v)] = label;
      const Scalar weight = w[n * V + v];
      if (weight != Scalar(0)) {
        const Scalar nll = std::log(denom) + m - z[base + label * V + v];
        total += weight * nll;
      }
    }
  }
  Tensor<Scalar> result = Tensor<Scalar>::scalar(total * inv_count);
  if (auto* tape = detail::recording_tape<Scalar>({&logits})) {
    result.set_requires_grad(true);
    auto zs = logits.storage();
    auto ws = voxel_weights.storage();
    tape->record("weighted_softmax_ce", {zs}, result.storage(),
                 [=](const Buffer<Scalar>& g) {
                   const Scalar up = g[0] * inv_count;
                   Buffer<Scalar> dz(probs->size());
                   for (Index n = 0; n < B; ++n) {
                     const Index base = n * C * V;
                     for (Index v = 0; v < V; ++v) {
                       const Scalar k = up * ws->data[n * V + v];
                       const std::uint8_t label = (*targets)[static_cast<std::size_t>(n * V + v)];
                       for (Index c = 0; c < C; ++c) {
                         const Index i = base + c * V + v;
                         dz[i] = k * ((*probs)[i] - (c == label ? Scalar(1) : Scalar(0)));
                       }
                     }
                   }
                   detail::accumulate(*zs, dz);
                 });
  }
  return result;
}

template <typename Scalar>
Conv<Scalar>::Conv(ConvSpec spec, std::mt19937_64& rng) : spec_(std::move(spec)) {
  spec_.validate();
  Shape wshape{spec_.out_channels, spec_.in_channels};
  wshape.insert(wshape.end(), spec_.kernel.begin(), spec_.kernel.end());
  weight = Tensor<Scalar>(wshape, true);
  bias = Tensor<Scalar>(Shape{spec_.out_channels}, true);
  const Index fan_in = weight.size() / spec_.out_channels;
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (Index i = 0; i < weight.size(); ++i) weight.data()[i] = static_cast<Scalar>(normal(rng));
}

template <typename Scalar>
BatchNorm<Scalar>::BatchNorm(Index channels)
    : gamma(Tensor<Scalar>::full(Shape{channels}, Scalar(1), true)),
      beta(Shape{channels}, true),
      state(channels) {}

template <typename Scalar>
DenseBlock<Scalar>::DenseBlock(Index spatial_rank, Index input_channels, DenseBlockSpec spec,
                               std::mt19937_64& rng)
    : spec_(spec) {
  if (spec.units < 1 || spec.growth < 1) throw std::invalid_argument("dense block needs units, growth >= 1");
  for (Index u = 0; u < spec.units; ++u) {
    const Index in = input_channels + u * spec.growth;
    norms_.emplace_back(in);
    convs_.emplace_back(ConvSpec::isotropic(spatial_rank, 3, 1, 1, in, spec.growth), rng);
  }
}

template <typename Scalar>
Tensor<Scalar> DenseBlock<Scalar>::forward(const Tensor<Scalar>& x, BatchNormMode mode) {
  Tensor<Scalar> features = x;
  for (std::size_t u = 0; u < convs_.size(); ++u) {
    Tensor<Scalar> y = convs_[u].forward(relu(norms_[u].forward(features, mode)));
    features = concat_channels<Scalar>({features, y});
  }
  return features;
}

#define DANLAB_INSTANTIATE(S)                                                                     \
  template Tensor<S> conv_forward(const Tensor<S>&, const ConvSpec&, const Tensor<S>&,            \
                                  const Tensor<S>&);                                              \
  template struct BatchNormState<S>;                                                              \
  template Tensor<S> batchnorm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,              \
                               BatchNormState<S>&, BatchNormMode, S, S);                          \
  template Tensor<S> maxpool(const Tensor<S>&, Index, Index);                                     \
  template Tensor<S> avgpool(const Tensor<S>&, Index, Index);                                     \
  template Tensor<S> upsample_nearest(const Tensor<S>&, Index);                                   \
  template Tensor<S> concat_channels(const std::vector<Tensor<S>>&);                              \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                \
  template Tensor<S> grid_max_pool(const Tensor<S>&, Index);                                      \
  template Tensor<S> spatial_mean(const Tensor<S>&);                                              \
  template Tensor<S> weighted_softmax_ce(const Tensor<S>&, std::span<const LabelVolume>,          \
                                         const Tensor<S>&);                                       \
  template class Conv<S>;                                                                         \
  template class BatchNorm<S>;                                                                    \
  template class DenseBlock<S>;

DANLAB_INSTANTIATE(float)
DANLAB_INSTANTIATE(double)

#undef DANLAB_INSTANTIATE

}  // namespace danlab
