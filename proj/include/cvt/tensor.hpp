#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cvt/errors.hpp"
#include "cvt/precision.hpp"

CVT_BEGIN_NAMESPACE

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Backward closure: reads the output gradient and ADDS into each input's
// gradient buffer. A buffer is empty when that input does not need a grad.
using BackwardFn =
    std::function<void(std::span<const Real> grad_out, std::span<const std::span<Real>> grad_in)>;

struct Node {
  std::uint64_t id = 0;
  std::string op;  // "leaf" for user-created tensors
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // leaves only; empty until the first backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Intermediate results keep the inputs they need for backward
/// alive until the handle is dropped.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<Real> data, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  /// Extent of axis i; negative i counts from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  std::span<const Real> data() const;
  /// Writable view of the storage, for parameter updates and test fixtures.
  /// Never use this on a tensor whose graph is still needed for backward.
  std::span<Real> mutable_data();
  Real item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar; leaf grads accumulate.
  void backward() const;

  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;
  /// Same values, cut from the graph.
  Tensor detach() const { return clone(false); }

  std::uint64_t id() const;
  const std::string& op_name() const;

  /// Internal: used by ops to wire the graph.
  static Tensor make_result(Shape shape, std::vector<Real> data, const std::vector<Tensor>& inputs,
                            detail::BackwardFn backward, const char* op);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& checked() const;

  std::shared_ptr<detail::Node> node_;
};

/// Operations reachable from a root, in recording order. Backward replays
/// them from the back.
struct GradTape {
  struct Entry {
    std::uint64_t output;
    std::string op;
    std::vector<std::uint64_t> inputs;
  };
  std::vector<Entry> entries;
};

GradTape record_tape(const Tensor& root);

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Thread cap for intra-op parallelism. Defaults to CVT_THREADS or 1.
/// Every parallel kernel splits over independent outputs, so results do not
/// depend on the thread count.
void set_num_threads(int n);
int num_threads();

CVT_END_NAMESPACE
