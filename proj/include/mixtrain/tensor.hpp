#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mixtrain {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
class GradientTape;

namespace detail {

// Shared storage behind a Tensor handle. `grad` is empty until a backward
// pass writes into it.
template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t tape_serial = 0;  // 0: not produced by any tape
  std::size_t tape_index = 0;

  std::span<T> ensure_grad();
  void accumulate_grad(std::span<const T> delta);
};

}  // namespace detail

/// Dense row-major tensor. Copies of a Tensor share storage (handle
/// semantics); use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = detail::TensorData<T>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value);
  static Tensor vector(std::initializer_list<T> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<T> data();
  std::span<const T> data() const;
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();
  void clear_grad();

  bool on_tape() const { return data_ && data_->tape_serial != 0; }

  // New leaf holding a copy of the values; never on a tape.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<Storage>& storage() const { return data_; }
  static Tensor wrap(std::shared_ptr<Storage> storage);

 private:
  std::shared_ptr<Storage> data_;
};

enum class OpKind {
  matmul,
  add,
  sub,
  mul,
  scale,
  relu,
  gelu,
  exp,
  log,
  sum,
  mean,
  reshape,
  linear,
  layer_norm,
  add_position,
  attention,
  mean_tokens,
  replace_tokens,
  softmax_cross_entropy,
  mse,
};

std::string_view op_name(OpKind kind);

/// Append-only record of differentiable operations. Backward walks the
/// entries in strict reverse append order; each rule accumulates into its
/// inputs in a fixed order, so gradients are reproducible bit for bit.
template <typename T>
class GradientTape {
 public:
  using StoragePtr = std::shared_ptr<detail::TensorData<T>>;

  struct Entry {
    OpKind kind;
    std::vector<StoragePtr> inputs;
    StoragePtr output;
    std::function<void(const Entry&)> backward;
  };

  GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Tape that ops on this thread record into, or nullptr.
  static GradientTape* active();

  void record(OpKind kind, std::vector<StoragePtr> inputs, const StoragePtr& output,
              std::function<void(const Entry&)> rule);

  // Seeds d(loss) = seed and propagates to every requires_grad input.
  void backward(const Tensor<T>& loss, T seed = T(1));
  // Seeds an arbitrary recorded tensor with an upstream gradient.
  void backward(const Tensor<T>& output, std::span<const T> upstream);

  // Clears every gradient touched by this tape so backward may run again.
  void reset_grads();

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool consumed() const { return consumed_; }
  std::uint64_t serial() const { return serial_; }

 private:
  template <typename>
  friend class TapeScope;

  void check_ready(const Tensor<T>& output) const;
  void propagate(std::size_t last_index);

  std::vector<Entry> entries_;
  std::uint64_t serial_;
  bool consumed_ = false;
};

/// Makes a tape the active recorder for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradientTape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape<T>* previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class GradientTape<float>;
extern template class GradientTape<double>;
extern template class TapeScope<float>;
extern template class TapeScope<double>;

}  // namespace mixtrain
