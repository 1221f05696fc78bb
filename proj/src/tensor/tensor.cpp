#include "cvt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

CVT_BEGIN_NAMESPACE

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::uint64_t next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<Real> data, bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
    throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->id = next_id();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = cvt::numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<Real>(static_cast<std::size_t>(n), Real(0)),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  auto n = cvt::numel(shape);
  return Tensor(
      make_leaf(std::move(shape), std::vector<Real>(static_cast<std::size_t>(n), value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<Real> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor(make_leaf(Shape{1}, {value}, requires_grad));
}

detail::Node& Tensor::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::int64_t Tensor::dim(int i) const {
  const auto& s = shape();
  int r = static_cast<int>(s.size());
  int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) {
    throw IndexError("axis " + std::to_string(i) + " out of range for " + shape_str(s));
  }
  return s[static_cast<std::size_t>(k)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(checked().data.size()); }

std::span<const Real> Tensor::data() const { return checked().data; }
std::span<Real> Tensor::mutable_data() { return checked().data; }

Real Tensor::item() const {
  const auto& n = checked();
  if (n.data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(n.shape));
  return n.data[0];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool value) {
  auto& n = checked();
  if (n.backward) throw ContractError("requires_grad can only be set on leaf tensors");
  n.requires_grad = value;
}

bool Tensor::is_leaf() const { return !checked().backward; }
bool Tensor::has_grad() const { return !checked().grad.empty(); }
std::span<const Real> Tensor::grad() const { return checked().grad; }

std::span<Real> Tensor::mutable_grad() {
  auto& n = checked();
  if (n.grad.empty()) n.grad.assign(n.data.size(), Real(0));
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = checked();
  std::fill(n.grad.begin(), n.grad.end(), Real(0));
}

Tensor Tensor::clone(bool requires_grad) const {
  const auto& n = checked();
  return Tensor(make_leaf(n.shape, n.data, requires_grad));
}

std::uint64_t Tensor::id() const { return checked().id; }
const std::string& Tensor::op_name() const { return checked().op; }

Tensor Tensor::make_result(Shape shape, std::vector<Real> data, const std::vector<Tensor>& inputs,
                           detail::BackwardFn backward, const char* op) {
  auto node = std::make_shared<detail::Node>();
  node->id = next_id();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
#ifndef NDEBUG
  for (Real v : node->data) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
#endif
  bool track = false;
  if (t_grad_enabled) {
    for (const auto& t : inputs) track = track || t.checked().requires_grad;
  }
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

namespace {

std::vector<detail::Node*> reachable_ops(const detail::Node* root) {
  std::vector<detail::Node*> ops;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{const_cast<detail::Node*>(root)};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (!n->backward) continue;
    ops.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  // Ids are handed out at creation, so ascending id is recording order and
  // every input precedes its consumers.
  std::sort(ops.begin(), ops.end(), [](auto* a, auto* b) { return a->id < b->id; });
  return ops;
}

}  // namespace

GradTape record_tape(const Tensor& root) {
  GradTape tape;
  for (auto* n : reachable_ops(root.node().get())) {
    GradTape::Entry e{n->id, n->op, {}};
    for (const auto& in : n->inputs) e.inputs.push_back(in->id);
    tape.entries.push_back(std::move(e));
  }
  return tape;
}

void Tensor::backward() const {
  auto& root = checked();
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) {
    throw ContractError("backward() on a tensor that is not connected to any tracked leaf");
  }
  if (!root.backward) {
    if (root.grad.empty()) root.grad.assign(1, Real(0));
    root.grad[0] += Real(1);
    return;
  }

  auto ops = reachable_ops(&root);
  std::unordered_map<const detail::Node*, std::vector<Real>> grads;
  grads[&root].assign(1, Real(1));

  std::vector<std::span<Real>> grad_in;
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    detail::Node* n = *it;
    auto g = grads.find(n);
    if (g == grads.end()) continue;
    std::vector<Real> grad_out = std::move(g->second);
    grads.erase(g);
    grad_in.clear();
    for (const auto& in : n->inputs) {
      if (!in->requires_grad) {
        grad_in.emplace_back();
      } else if (!in->backward) {
        if (in->grad.empty()) in->grad.assign(in->data.size(), Real(0));
        grad_in.emplace_back(in->grad);
      } else {
        auto& buf = grads[in.get()];
        if (buf.empty()) buf.assign(in->data.size(), Real(0));
        grad_in.emplace_back(buf);
      }
    }
    n->backward(grad_out, grad_in);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

namespace {

int threads_from_env() {
  if (const char* env = std::getenv("CVT_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

std::atomic<int> g_threads{threads_from_env()};

}  // namespace

void set_num_threads(int n) { g_threads.store(std::max(1, n)); }
int num_threads() { return g_threads.load(); }

CVT_END_NAMESPACE
