#pragma once

// Dense float64 tensors with a dynamic reverse-mode autodiff graph.
//
// A Tensor is a shared handle. Ops return new tensors and never modify their
// inputs; only leaves (parameters, inputs) may be written in place. When any
// input of an op requires a gradient, the op records a Node on its output
// holding the inputs and a closure that scatters the output gradient back.
// backward() walks those nodes in reverse topological order once; afterwards
// the graph is released and a second call is rejected.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nlic/errors.hpp"

namespace nlic {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// When enabled, every op output is checked for NaN/Inf and log/exp domain
// violations raise NumericError. On by default in debug builds.
inline bool& nan_guard_enabled() {
#ifdef NDEBUG
  thread_local bool enabled = false;
#else
  thread_local bool enabled = true;
#endif
  return enabled;
}

namespace detail {

struct TensorImpl;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
  bool released = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::shared_ptr<Node> creator;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    NLIC_REQUIRE(shape_numel(shape) == values.size(), ContractViolation,
                 "tensor of shape ", shape_str(shape), " needs ",
                 shape_numel(shape), " values, got ", values.size());
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }

  // Writable view; only for leaves, whose values no recorded op depends on
  // through a saved closure.
  std::span<double> mutable_data() {
    NLIC_REQUIRE(is_leaf(), ContractViolation,
                 "in-place write to a non-leaf tensor");
    return impl_->data;
  }

  double item() const {
    NLIC_REQUIRE(numel() == 1, ContractViolation,
                 "item() on tensor of shape ", shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    NLIC_REQUIRE(is_leaf(), ContractViolation,
                 "requires_grad can only be toggled on leaves");
    impl_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return impl_->creator == nullptr; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  // Same values, no history.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline void check_finite(const TensorImpl& t, const std::string& op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(concat("non-finite value produced by ", op));
    }
  }
}

// Wraps freshly computed values as an op output, recording a graph node when
// any input participates in differentiation.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::string op, std::vector<const Tensor*> inputs,
                          std::function<void(const TensorImpl&)> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (nan_guard_enabled()) check_finite(*out.impl(), op);
  bool needs_grad = false;
  for (const Tensor* in : inputs) needs_grad = needs_grad || in->requires_grad();
  if (!needs_grad) return out;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  for (const Tensor* in : inputs) node->inputs.push_back(in->impl());
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->creator = std::move(node);
  return out;
}

// Post-order over the impls reachable from root through creator links.
inline std::vector<TensorImpl*> topo_order(TensorImpl* root) {
  std::vector<TensorImpl*> order;
  std::unordered_map<TensorImpl*, bool> state;  // false: open, true: done
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root, 0}};
  state[root] = false;
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->creator.get();
    if (node && next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      auto it = state.find(child);
      if (it == state.end()) {
        state[child] = false;
        stack.emplace_back(child, 0);
      } else if (!it->second) {
        throw ContractViolation("cycle in autodiff graph");
      }
      continue;
    }
    state[impl] = true;
    order.push_back(impl);
    stack.pop_back();
  }
  return order;
}

}  // namespace detail

// One op record of a traced graph, in topological order (inputs first).
struct GraphRecord {
  std::string op;  // "leaf" for tensors without a creator
  std::vector<std::size_t> inputs;
};

inline std::vector<GraphRecord> trace_graph(const Tensor& root) {
  auto order = detail::topo_order(root.impl().get());
  std::unordered_map<detail::TensorImpl*, std::size_t> index;
  std::vector<GraphRecord> records;
  for (auto* impl : order) {
    GraphRecord rec{impl->creator ? impl->creator->op : "leaf", {}};
    if (impl->creator) {
      for (auto& in : impl->creator->inputs) rec.inputs.push_back(index.at(in.get()));
    }
    index[impl] = records.size();
    records.push_back(std::move(rec));
  }
  return records;
}

// Populates grad buffers of every requires_grad leaf reachable from `loss`.
// Leaf gradients accumulate across calls; the graph itself is single-use.
inline void backward(const Tensor& loss) {
  NLIC_REQUIRE(loss.defined() && loss.numel() == 1, ContractViolation,
               "backward() needs a scalar loss, got shape ",
               loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>"));
  NLIC_REQUIRE(loss.requires_grad(), ContractViolation,
               "backward() on a tensor that does not require grad");
  auto* root = loss.impl().get();
  NLIC_REQUIRE(!(root->creator && root->creator->released), ContractViolation,
               "graph already consumed by a previous backward(); run the "
               "forward pass again");
  auto order = detail::topo_order(root);
  for (auto* impl : order) {
    if (impl->creator && impl->creator->released) {
      throw ContractViolation("graph already consumed by a previous backward()");
    }
  }
  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* impl = *it;
    if (!impl->creator || impl->grad.empty()) continue;
    impl->creator->backward(*impl);
  }
  for (auto* impl : order) {
    if (!impl->creator) continue;
    impl->creator->released = true;
    impl->creator->backward = nullptr;
    impl->creator->inputs.clear();
    impl->grad.clear();
    impl->grad.shrink_to_fit();
  }
}

}  // namespace nlic
