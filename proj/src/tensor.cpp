#include "vitc/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace vitc {

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
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

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
  }
}

std::shared_ptr<TensorImpl> new_impl(Shape shape, Buffer data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = std::holds_alternative<std::vector<float>>(data) ? DType::f32 : DType::f64;
  impl->shape = std::move(shape);
  impl->data = std::make_shared<Buffer>(std::move(data));
  return impl;
}

std::size_t buffer_size(const Buffer& b) {
  return std::visit([](const auto& v) { return v.size(); }, b);
}

thread_local bool g_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  check_extents(shape);
  const auto n = shape_numel(shape);
  if (dtype == DType::f32) {
    return Tensor(new_impl(std::move(shape), std::vector<float>(n, static_cast<float>(value))));
  }
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values) {
  check_extents(shape);
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count does not match shape " + shape_str(shape));
  }
  return Tensor(new_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  check_extents(shape);
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count does not match shape " + shape_str(shape));
  }
  return Tensor(new_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  if (dtype == DType::f64) return from_vector(std::move(shape), std::vector<double>(values.begin(), values.end()));
  std::vector<float> f(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) f[i] = static_cast<float>(values[i]);
  return from_vector(std::move(shape), std::move(f));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("access to undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis out of range");
  return shape()[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  if (!impl_) throw std::logic_error("access to undefined tensor");
  return impl_->dtype;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw std::logic_error("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = flag;
  return *this;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

double Tensor::at(std::size_t flat_index) const {
  if (flat_index >= numel()) throw std::out_of_range("tensor index out of range");
  return std::visit([&](const auto& v) { return static_cast<double>(v[flat_index]); }, *impl_->data);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    *impl_->data);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return Tensor(new_impl(shape(), *impl_->data)); }

Tensor Tensor::to(DType dtype) const {
  if (dtype == this->dtype()) return clone();
  auto vals = to_vector();
  return from_values(shape(), vals, dtype);
}

// ---------------------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs, const char* name,
                   BackwardFn backward_fn) {
  if (buffer_size(data) != shape_numel(shape)) {
    throw std::logic_error(std::string("op ") + name + " produced wrong element count");
  }
  auto impl = new_impl(std::move(shape), std::move(data));
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    auto node = std::make_shared<Node>();
    node->name = name;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    impl->grad_fn = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

namespace {

Tensor add_buffers(const Tensor& a, const Tensor& b) {
  return dispatch(a.dtype(), [&]<class T>() {
    auto x = a.values<T>();
    auto y = b.values<T>();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return Tensor::from_vector(a.shape(), std::move(out));
  });
}

}  // namespace

Tensor GradRecord::grad(const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) return Tensor::zeros(leaf.shape(), leaf.dtype());
  return it->second;
}

bool GradRecord::contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }

GradRecord backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss");
  }
  GradRecord record;
  if (!loss.requires_grad()) return record;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<const TensorImpl*> order;
  std::unordered_map<const TensorImpl*, std::shared_ptr<TensorImpl>> owners;
  std::unordered_set<const TensorImpl*> seen;
  struct Frame {
    std::shared_ptr<TensorImpl> t;
    std::size_t next;
  };
  std::vector<Frame> stack{{loss.impl(), 0}};
  seen.insert(loss.id());
  while (!stack.empty()) {
    auto& top = stack.back();
    const auto& node = top.t->grad_fn;
    if (node && top.next < node->inputs.size()) {
      const auto& in = node->inputs[top.next++];
      if (in.requires_grad() && !seen.count(in.id())) {
        seen.insert(in.id());
        stack.push_back({in.impl(), 0});
      }
      continue;
    }
    order.push_back(top.t.get());
    owners.emplace(top.t.get(), top.t);
    stack.pop_back();
  }

  std::unordered_map<const TensorImpl*, Tensor> pending;
  pending.emplace(loss.id(), Tensor::full(loss.shape(), 1.0, loss.dtype()));

  NoGradGuard no_grad;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const TensorImpl* cur = *it;
    auto g = pending.find(cur);
    if (g == pending.end()) continue;
    const auto& impl = owners.at(cur);
    if (!impl->grad_fn) {
      record.grads_.emplace(cur, g->second);
      continue;
    }
    Tensor grad_out = std::move(g->second);
    pending.erase(g);
    ++record.nodes_visited_;
    const Node& node = *impl->grad_fn;
    auto grads = node.backward(Tensor(impl).detach(), grad_out);
    if (grads.size() != node.inputs.size()) {
      throw std::logic_error(std::string("backward of ") + node.name + " returned wrong arity");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const auto& in = node.inputs[i];
      if (!in.requires_grad() || !grads[i].defined()) continue;
      if (grads[i].shape() != in.shape()) {
        throw std::logic_error(std::string("backward of ") + node.name + " gradient shape " +
                               shape_str(grads[i].shape()) + " vs input " + shape_str(in.shape()));
      }
      auto [slot, inserted] = pending.emplace(in.id(), grads[i]);
      if (!inserted) slot->second = add_buffers(slot->second, grads[i]);
    }
  }
  return record;
}

void ensure_finite(const Tensor& t, const std::string& where) {
  bool ok = dispatch(t.dtype(), [&]<class T>() {
    for (T v : t.values<T>()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  });
  if (!ok) throw NonFiniteError("non-finite values in " + where);
}

}  // namespace vitc
