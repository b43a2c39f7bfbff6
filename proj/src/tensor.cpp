#include "danlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace danlab {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
}

template <typename Scalar>
void check_finite(const Buffer<Scalar>& data, const char* op) {
  if (!data.isFinite().all()) {
    throw DomainError(std::string(op) + " produced a non-finite value");
  }
}

// Flat index into `b` for every flat index of `a`, where b broadcasts into a
// along its singleton dimensions.
std::vector<Index> broadcast_map(const Shape& a, const Shape& b) {
  const std::size_t rank = a.size();
  std::vector<Index> b_stride(rank, 0);
  Index stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    b_stride[i] = b[i] == 1 ? 0 : stride;
    stride *= b[i];
  }
  std::vector<Index> map(static_cast<std::size_t>(numel(a)));
  std::vector<Index> counter(rank, 0);
  Index offset = 0;
  for (auto& m : map) {
    m = offset;
    for (std::size_t i = rank; i-- > 0;) {
      ++counter[i];
      offset += b_stride[i];
      if (counter[i] < a[i]) break;
      offset -= b_stride[i] * a[i];
      counter[i] = 0;
    }
  }
  return map;
}

bool broadcastable(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] != a[i] && b[i] != 1) return false;
  }
  return true;
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename Scalar>
Tensor<Scalar> binary(BinaryKind kind, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!broadcastable(a.shape(), b.shape())) {
    throw ShapeError("cannot broadcast " + to_string(b.shape()) + " into " + to_string(a.shape()));
  }
  const bool same = a.shape() == b.shape();
  Buffer<Scalar> out(a.size());
  std::shared_ptr<std::vector<Index>> map;
  if (same) {
    switch (kind) {
      case BinaryKind::kAdd: out = a.data() + b.data(); break;
      case BinaryKind::kSub: out = a.data() - b.data(); break;
      case BinaryKind::kMul: out = a.data() * b.data(); break;
    }
  } else {
    map = std::make_shared<std::vector<Index>>(broadcast_map(a.shape(), b.shape()));
    const auto& m = *map;
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (Index i = 0; i < out.size(); ++i) {
      const Scalar bv = bd[m[static_cast<std::size_t>(i)]];
      switch (kind) {
        case BinaryKind::kAdd: out[i] = ad[i] + bv; break;
        case BinaryKind::kSub: out[i] = ad[i] - bv; break;
        case BinaryKind::kMul: out[i] = ad[i] * bv; break;
      }
    }
  }
  Tensor<Scalar> result(a.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<Scalar>({&a, &b})) {
    result.set_requires_grad(true);
    static constexpr const char* names[] = {"add", "sub", "mul"};
    auto as = a.storage();
    auto bs = b.storage();
    tape->record(names[static_cast<int>(kind)], {as, bs}, result.storage(),
                 [kind, as, bs, map](const Buffer<Scalar>& g) {
                   // Products need the operand values; add/sub do not.
                   if (as->requires_grad) {
                     if (kind == BinaryKind::kMul) {
                       if (map) {
                         Buffer<Scalar> ga(g.size());
                         for (Index i = 0; i < g.size(); ++i) {
                           ga[i] = g[i] * bs->data[(*map)[static_cast<std::size_t>(i)]];
                         }
                         detail::accumulate(*as, ga);
                       } else {
                         detail::accumulate(*as, g * bs->data);
                       }
                     } else {
                       detail::accumulate(*as, g);
                     }
                   }
                   if (bs->requires_grad) {
                     const Scalar sign = kind == BinaryKind::kSub ? Scalar(-1) : Scalar(1);
                     if (map) {
                       Buffer<Scalar> gb = Buffer<Scalar>::Zero(bs->data.size());
                       for (Index i = 0; i < g.size(); ++i) {
                         const Index j = (*map)[static_cast<std::size_t>(i)];
                         gb[j] += kind == BinaryKind::kMul ? g[i] * as->data[i] : sign * g[i];
                       }
                       detail::accumulate(*bs, gb);
                     } else if (kind == BinaryKind::kMul) {
                       detail::accumulate(*bs, g * as->data);
                     } else if (kind == BinaryKind::kSub) {
                       detail::accumulate(*bs, -g);
                     } else {
                       detail::accumulate(*bs, g);
                     }
                   }
                 });
  }
  return result;
}

template <typename Scalar, typename Forward, typename LocalGrad>
Tensor<Scalar> unary(const char* name, const Tensor<Scalar>& x, Forward forward, LocalGrad local) {
  Buffer<Scalar> out = forward(x.data());
  Tensor<Scalar> result(x.shape(), std::move(out));
  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    auto ys = result.storage();
    // The output storage is held weakly: the tape already owns it.
    std::weak_ptr<detail::TensorStorage<Scalar>> yw = ys;
    tape->record(name, {xs}, ys, [xs, yw, local](const Buffer<Scalar>& g) {
      auto y = yw.lock();
      detail::accumulate(*xs, g * local(xs->data, y->data));
    });
  }
  return result;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, bool requires_grad) {
  check_shape(shape);
  storage_ = std::make_shared<Storage>();
  storage_->data = Buffer<Scalar>::Zero(numel(shape));
  storage_->shape = std::move(shape);
  storage_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Buffer<Scalar> data, bool requires_grad) {
  check_shape(shape);
  if (numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  }
  storage_ = std::make_shared<Storage>();
  storage_->shape = std::move(shape);
  storage_->data = std::move(data);
  storage_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  t.data().setConstant(value);
  return t;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return storage_->data[0];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool value) {
  storage_->requires_grad = value;
  return *this;
}

template <typename Scalar>
const Buffer<Scalar>& Tensor<Scalar>::grad() const {
  if (!storage_->grad) throw std::logic_error("tensor has no gradient");
  return *storage_->grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  return Tensor(shape(), data(), requires_grad());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(shape(), data(), false);
}

template <typename Scalar>
void Tape<Scalar>::record(std::string op, std::vector<StoragePtr> inputs, StoragePtr output,
                          BackwardFn fn) {
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(fn)});
}

template <typename Scalar>
void Tape<Scalar>::backward(const Tensor<Scalar>& loss) {
  if (nodes_.empty()) throw std::logic_error("backward on an empty tape");
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  auto& seed = loss.storage()->grad;
  if (seed) {
    (*seed)[0] += Scalar(1);
  } else {
    seed = Buffer<Scalar>::Ones(1);
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad) it->backward(*it->output->grad);
  }
}

template <typename Scalar>
bool Tape<Scalar>::is_topologically_ordered() const {
  std::unordered_set<const void*> produced;
  std::unordered_set<const void*> all_outputs;
  for (const auto& node : nodes_) all_outputs.insert(node.output.get());
  for (const auto& node : nodes_) {
    for (const auto& in : node.inputs) {
      if (all_outputs.count(in.get()) && !produced.count(in.get())) return false;
    }
    if (!produced.insert(node.output.get()).second) return false;
  }
  return true;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(BinaryKind::kAdd, a, b);
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(BinaryKind::kSub, a, b);
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(BinaryKind::kMul, a, b);
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return unary(
      "relu", x, [](const Buffer<Scalar>& v) -> Buffer<Scalar> { return v.max(Scalar(0)); },
      [](const Buffer<Scalar>& v, const Buffer<Scalar>&) -> Buffer<Scalar> {
        return (v > Scalar(0)).template cast<Scalar>();
      });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return unary(
      "sigmoid", x,
      [](const Buffer<Scalar>& v) -> Buffer<Scalar> {
        // Branches keep exp() from overflowing for large |v|.
        return v.unaryExpr([](Scalar z) {
          if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
          const Scalar e = std::exp(z);
          return e / (Scalar(1) + e);
        });
      },
      [](const Buffer<Scalar>&, const Buffer<Scalar>& y) -> Buffer<Scalar> {
        return y * (Scalar(1) - y);
      });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return unary(
      "exp", x,
      [](const Buffer<Scalar>& v) -> Buffer<Scalar> {
        Buffer<Scalar> y = v.exp();
        check_finite(y, "exp");
        return y;
      },
      [](const Buffer<Scalar>&, const Buffer<Scalar>& y) -> Buffer<Scalar> { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  return unary(
      "log", x,
      [](const Buffer<Scalar>& v) -> Buffer<Scalar> {
        if ((v <= Scalar(0)).any()) throw DomainError("log of a non-positive value");
        return v.log();
      },
      [](const Buffer<Scalar>& v, const Buffer<Scalar>&) -> Buffer<Scalar> { return v.inverse(); });
}

template <typename Scalar>
Tensor<Scalar> elementwise(ElementwiseOp op, const Tensor<Scalar>& a,
                           const std::optional<Tensor<Scalar>>& b) {
  const bool binary_op =
      op == ElementwiseOp::kAdd || op == ElementwiseOp::kSub || op == ElementwiseOp::kMul;
  if (binary_op != b.has_value()) {
    throw std::invalid_argument(binary_op ? "binary op requires a second operand"
                                          : "unary op takes a single operand");
  }
  switch (op) {
    case ElementwiseOp::kAdd: return add(a, *b);
    case ElementwiseOp::kSub: return sub(a, *b);
    case ElementwiseOp::kMul: return mul(a, *b);
    case ElementwiseOp::kRelu: return relu(a);
    case ElementwiseOp::kSigmoid: return sigmoid(a);
    case ElementwiseOp::kExp: return exp(a);
    case ElementwiseOp::kLog: return log(a);
  }
  throw std::invalid_argument("unknown elementwise op");
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  return unary(
      "scale", x, [factor](const Buffer<Scalar>& v) -> Buffer<Scalar> { return v * factor; },
      [factor](const Buffer<Scalar>& v, const Buffer<Scalar>&) -> Buffer<Scalar> {
        return Buffer<Scalar>::Constant(v.size(), factor);
      });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Tensor<Scalar> result = Tensor<Scalar>::scalar(x.data().sum());
  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    tape->record("sum", {xs}, result.storage(), [xs](const Buffer<Scalar>& g) {
      detail::accumulate(*xs, Buffer<Scalar>::Constant(xs->data.size(), g[0]));
    });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor<Scalar> result(std::move(shape), x.data());
  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    tape->record("reshape", {xs}, result.storage(),
                 [xs](const Buffer<Scalar>& g) { detail::accumulate(*xs, g); });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits, Index axis) {
  if (axis < 0 || axis >= logits.rank()) throw ShapeError("softmax axis out of range");
  const Index n = logits.dim(axis);
  if (n < 2) throw ShapeError("softmax needs at least two entries along its axis");
  Index outer = 1;
  Index inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= logits.dim(i);
  for (Index i = axis + 1; i < logits.rank(); ++i) inner *= logits.dim(i);

  const auto& x = logits.data();
  Buffer<Scalar> y(x.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      Scalar m = x[base];
      for (Index k = 1; k < n; ++k) m = std::max(m, x[base + k * inner]);
      Scalar total = 0;
      for (Index k = 0; k < n; ++k) {
        const Scalar e = std::exp(x[base + k * inner] - m);
        y[base + k * inner] = e;
        total += e;
      }
      for (Index k = 0; k < n; ++k) y[base + k * inner] /= total;
    }
  }
  Tensor<Scalar> result(logits.shape(), std::move(y));
  if (auto* tape = detail::recording_tape<Scalar>({&logits})) {
    result.set_requires_grad(true);
    auto xs = logits.storage();
    std::weak_ptr<detail::TensorStorage<Scalar>> yw = result.storage();
    tape->record("softmax", {xs}, result.storage(),
                 [xs, yw, outer, inner, n](const Buffer<Scalar>& g) {
                   const auto& yv = yw.lock()->data;
                   Buffer<Scalar> gx(g.size());
                   for (Index o = 0; o < outer; ++o) {
                     for (Index in = 0; in < inner; ++in) {
                       const Index base = o * n * inner + in;
                       Scalar dot = 0;
                       for (Index k = 0; k < n; ++k) dot += g[base + k * inner] * yv[base + k * inner];
                       for (Index k = 0; k < n; ++k) {
                         const Index i = base + k * inner;
                         gx[i] = yv[i] * (g[i] - dot);
                       }
                     }
                   }
                   detail::accumulate(*xs, gx);
                 });
  }
  return result;
}

template <typename Scalar>
Tensor<Scalar> apply_gate(const Tensor<Scalar>& x, const GateHandle<Scalar>& handle) {
  const auto& gate = handle.gate;
  if (!broadcastable(x.shape(), gate.shape())) {
    throw ShapeError("gate " + to_string(gate.shape()) + " at site '" + handle.site_id +
                     "' does not broadcast into " + to_string(x.shape()));
  }
  if ((gate.data() < Scalar(0)).any() || (gate.data() > Scalar(1)).any() ||
      !gate.data().isFinite().all()) {
    throw DomainError("gate values at site '" + handle.site_id + "' must lie in [0,1]");
  }
  if (handle.mode == GateMode::kMultiplyForward) return mul(x, gate);

  Tensor<Scalar> result(x.shape(), x.data());
  if (auto* tape = detail::recording_tape<Scalar>({&x})) {
    result.set_requires_grad(true);
    auto xs = x.storage();
    auto gs = gate.storage();
    const bool same = x.shape() == gate.shape();
    auto map = same ? nullptr
                    : std::make_shared<std::vector<Index>>(broadcast_map(x.shape(), gate.shape()));
    tape->record("gate_backward", {xs}, result.storage(), [xs, gs, map](const Buffer<Scalar>& g) {
      if (!map) {
        detail::accumulate(*xs, g * gs->data);
        return;
      }
      Buffer<Scalar> gx(g.size());
      for (Index i = 0; i < g.size(); ++i) gx[i] = g[i] * gs->data[(*map)[static_cast<std::size_t>(i)]];
      detail::accumulate(*xs, gx);
    });
  }
  return result;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double eps) {
  Tensor<double> probe = x.clone();
  probe.set_requires_grad(true);
  return grad_check_parameters([&] { return f(probe); }, {probe}, eps);
}

double grad_check_parameters(const std::function<Tensor<double>()>& loss,
                             const std::vector<Tensor<double>>& parameters, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("grad_check requires eps > 0");
  std::vector<Tensor<double>> params = parameters;
  for (auto& p : params) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> value = loss();
    if (value.size() != 1) throw ShapeError("grad_check requires a scalar-valued function");
    if (tape.empty()) {
      // Constant function of the parameters.
      for (auto& p : params) p.storage()->grad = Buffer<double>::Zero(p.size());
    } else {
      tape.backward(value);
    }
  }
  double worst = 0;
  NoGradScope<double> no_grad;
  for (auto& p : params) {
    const Buffer<double> analytic =
        p.has_grad() ? p.grad() : Buffer<double>(Buffer<double>::Zero(p.size()));
    for (Index i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      // Divide by the step actually taken, not the nominal 2 * eps.
      const double hi = saved + eps;
      const double lo = saved - eps;
      p.data()[i] = hi;
      const double plus = loss().item();
      p.data()[i] = lo;
      const double minus = loss().item();
      p.data()[i] = saved;
      const double numeric = (plus - minus) / (hi - lo);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

#define DANLAB_INSTANTIATE(S)                                                                    \
  template class Tensor<S>;                                                                      \
  template class Tape<S>;                                                                        \
  template Tensor<S> elementwise(ElementwiseOp, const Tensor<S>&, const std::optional<Tensor<S>>&); \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> relu(const Tensor<S>&);                                                     \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                  \
  template Tensor<S> exp(const Tensor<S>&);                                                      \
  template Tensor<S> log(const Tensor<S>&);                                                      \
  template Tensor<S> scale(const Tensor<S>&, S);                                                 \
  template Tensor<S> sum(const Tensor<S>&);                                                      \
  template Tensor<S> mean(const Tensor<S>&);                                                     \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                           \
  template Tensor<S> softmax(const Tensor<S>&, Index);                                           \
  template Tensor<S> apply_gate(const Tensor<S>&, const GateHandle<S>&);

DANLAB_INSTANTIATE(float)
DANLAB_INSTANTIATE(double)

#undef DANLAB_INSTANTIATE

}  // namespace danlab
