#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

namespace vitc {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dt);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DTypeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct Node;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Buffer> data;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

// Handle to an immutable dense row-major tensor. Copies share storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_vector(Shape shape, std::vector<float> values);
  static Tensor from_vector(Shape shape, std::vector<double> values);
  static Tensor from_values(Shape shape, std::span<const double> values, DType dtype);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const;

  bool requires_grad() const;
  // Marks a leaf as trainable. Throws for non-leaf tensors.
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  template <class T>
  std::span<const T> values() const {
    check_type<T>();
    return std::get<std::vector<T>>(*impl_->data);
  }

  // Raw write access. Only for leaves owned by the caller (initialization,
  // optimizer steps); never called while a graph referencing the tensor is alive.
  template <class T>
  std::span<T> mutable_values() {
    check_type<T>();
    return std::get<std::vector<T>>(*impl_->data);
  }

  double item() const;
  double at(std::size_t flat_index) const;
  std::vector<double> to_vector() const;

  // Same storage, no history.
  Tensor detach() const;
  // Deep copy with no history.
  Tensor clone() const;
  Tensor to(DType dtype) const;

  const TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  template <class T>
  void check_type() const {
    constexpr DType want = std::is_same_v<T, float> ? DType::f32 : DType::f64;
    if (!impl_) throw std::logic_error("access to undefined tensor");
    if (impl_->dtype != want) {
      throw DTypeError(std::string("tensor holds ") + dtype_name(impl_->dtype));
    }
  }

  std::shared_ptr<TensorImpl> impl_;
};

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

// Calls f.template operator()<T>() with T matching dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

// ---------------------------------------------------------------------------
// Reverse-mode machinery

// Receives a history-free view of the op output and the incoming gradient;
// returns one gradient per input (undefined entries mean "no contribution").
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& output, const Tensor& grad_output)>;

struct Node {
  const char* name = "";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Wraps freshly computed values into a tensor and, when any input is tracked
// and grad mode is on, records the node that produced it.
Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs, const char* name,
                   BackwardFn backward);

class GradRecord {
 public:
  // Gradient for a tracked leaf; zeros of the leaf's shape when it did not
  // contribute to the loss.
  Tensor grad(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }
  // Number of recorded op nodes visited during the reverse sweep.
  std::size_t nodes_visited() const { return nodes_visited_; }

 private:
  friend GradRecord backward(const Tensor& loss);
  std::unordered_map<const TensorImpl*, Tensor> grads_;
  std::size_t nodes_visited_ = 0;
};

GradRecord backward(const Tensor& loss);

void ensure_finite(const Tensor& t, const std::string& where);

}  // namespace vitc
