#pragma once

// Dense N-d tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle onto row-major storage. Operations record a
// backward rule on the thread's active Tape (see TapeScope) whenever one of
// their inputs requires a gradient; with no active tape they run in
// inference mode and record nothing.
//
// Broadcasting: binary operations accept a right-hand operand of the same
// rank whose every dimension either equals the left-hand dimension or is 1.
// The result always has the left-hand shape. Nothing else broadcasts.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "danlab/error.hpp"

namespace danlab {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename Scalar>
struct TensorStorage {
  Shape shape;
  Buffer<Scalar> data;
  bool requires_grad = false;
  std::optional<Buffer<Scalar>> grad;
};

}  // namespace detail

template <typename Scalar>
class Tensor {
 public:
  using Storage = detail::TensorStorage<Scalar>;
  using StoragePtr = std::shared_ptr<Storage>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, Buffer<Scalar> data, bool requires_grad = false);

  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const { return storage_->shape; }
  Index rank() const { return static_cast<Index>(storage_->shape.size()); }
  Index dim(Index axis) const { return storage_->shape[static_cast<std::size_t>(axis)]; }
  Index size() const { return storage_->data.size(); }

  Buffer<Scalar>& data() { return storage_->data; }
  const Buffer<Scalar>& data() const { return storage_->data; }
  Scalar item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool value);

  bool has_grad() const { return storage_->grad.has_value(); }
  const Buffer<Scalar>& grad() const;
  void zero_grad() { storage_->grad.reset(); }

  /// Deep copy of data and the requires_grad flag; gradient and tape links are dropped.
  Tensor clone() const;
  /// Deep copy that never requires a gradient.
  Tensor detach() const;

  const StoragePtr& storage() const { return storage_; }

 private:
  StoragePtr storage_;
};

/// Ordered record of operations for one forward pass. Insertion order is a
/// valid topological order; backward walks it in reverse.
template <typename Scalar>
class Tape {
 public:
  using StoragePtr = typename Tensor<Scalar>::StoragePtr;
  using BackwardFn = std::function<void(const Buffer<Scalar>& upstream)>;

  struct Node {
    std::string op;
    std::vector<StoragePtr> inputs;
    StoragePtr output;
    BackwardFn backward;
  };

  void record(std::string op, std::vector<StoragePtr> inputs, StoragePtr output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor that
  /// requires a gradient. Gradients accumulate into existing buffers.
  void backward(const Tensor<Scalar>& loss);

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

  /// True when every node's inputs are leaves or outputs of earlier nodes.
  bool is_topologically_ordered() const;

 private:
  std::vector<Node> nodes_;
};

template <typename Scalar>
Tape<Scalar>*& active_tape_slot() {
  thread_local Tape<Scalar>* tape = nullptr;
  return tape;
}

template <typename Scalar>
Tape<Scalar>* active_tape() {
  return active_tape_slot<Scalar>();
}

/// Makes a tape the active recording target of this thread for its lifetime.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : previous_(active_tape_slot<Scalar>()) {
    active_tape_slot<Scalar>() = &tape;
  }
  ~TapeScope() { active_tape_slot<Scalar>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Suspends recording on this thread (inference mode).
template <typename Scalar>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape_slot<Scalar>()) { active_tape_slot<Scalar>() = nullptr; }
  ~NoGradScope() { active_tape_slot<Scalar>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

namespace detail {

/// Active tape if any of the inputs requires a gradient, else nullptr.
template <typename Scalar>
Tape<Scalar>* recording_tape(std::initializer_list<const Tensor<Scalar>*> inputs) {
  Tape<Scalar>* tape = active_tape<Scalar>();
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

/// Adds a contribution to a storage's gradient if it requires one.
template <typename Scalar, typename Expr>
void accumulate(detail::TensorStorage<Scalar>& storage, const Expr& contribution) {
  if (!storage.requires_grad) return;
  if (storage.grad) {
    *storage.grad += contribution;
  } else {
    storage.grad = Buffer<Scalar>(contribution);
  }
}

}  // namespace detail

enum class ElementwiseOp { kAdd, kSub, kMul, kRelu, kSigmoid, kExp, kLog };

template <typename Scalar>
Tensor<Scalar> elementwise(ElementwiseOp op, const Tensor<Scalar>& a,
                           const std::optional<Tensor<Scalar>>& b = std::nullopt);

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor);
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

/// Numerically stabilised softmax along `axis` (max subtraction).
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits, Index axis = 1);

enum class GateMode {
  kMultiplyForward,       // output = x * gate; backward scales by gate via the chain rule
  kMultiplyBackwardOnly,  // output = x; backward gradient = upstream * gate
};

template <typename Scalar>
struct GateHandle {
  std::string site_id;
  Tensor<Scalar> gate;
  GateMode mode = GateMode::kMultiplyForward;
};

/// Multiplies activations and/or their gradients by a gate with values in
/// [0,1]. The gate broadcasts per voxel ([B,1,...]) or per channel ([B,C,1,...]).
template <typename Scalar>
Tensor<Scalar> apply_gate(const Tensor<Scalar>& x, const GateHandle<Scalar>& gate);

template <typename Scalar>
void backward(Tape<Scalar>& tape, const Tensor<Scalar>& loss) {
  tape.backward(loss);
}

/// Maximum over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued function of x.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double eps = 1e-5);

/// Same measure over a set of parameter tensors perturbed in place; `loss`
/// rebuilds the graph from the current parameter values on every call.
double grad_check_parameters(const std::function<Tensor<double>()>& loss,
                             const std::vector<Tensor<double>>& parameters, double eps = 1e-5);

}  // namespace danlab
