#include "mixtrain/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>

#include "mixtrain/errors.hpp"

namespace mixtrain {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::linear: return "linear";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::add_position: return "add_position";
    case OpKind::attention: return "attention";
    case OpKind::mean_tokens: return "mean_tokens";
    case OpKind::replace_tokens: return "replace_tokens";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::mse: return "mse";
  }
  return "unknown";
}

namespace detail {

template <typename T>
std::span<T> TensorData<T>::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

template <typename T>
void TensorData<T>::accumulate_grad(std::span<const T> delta) {
  auto g = ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

template struct TensorData<float>;
template struct TensorData<double>;

}  // namespace detail

namespace {

void check_extents(const Shape& shape) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : data_(std::make_shared<Storage>()) {
  check_extents(shape);
  data_->data.assign(shape_numel(shape), fill);
  data_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : data_(std::make_shared<Storage>()) {
  check_extents(shape);
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  data_->shape = std::move(shape);
  data_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
  return Tensor(Shape{values.size()}, std::vector<T>(values));
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<T> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(values));
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  static const Shape empty;
  return data_ ? data_->shape : empty;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return shape()[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return data_ ? data_->data.size() : 0;
}

template <typename T>
std::span<T> Tensor<T>::data() {
  return data_ ? std::span<T>(data_->data) : std::span<T>();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return data_ ? std::span<const T>(data_->data) : std::span<const T>();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return data_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return data_ && data_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!data_) throw ValidationError("set_requires_grad on undefined tensor");
  if (data_->tape_serial != 0 && !flag)
    throw ValidationError("cannot clear requires_grad on a recorded tensor; use detach()");
  data_->requires_grad = flag;
  return *this;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return data_ && !data_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ValidationError("tensor has no gradient");
  return data_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (!data_) throw ValidationError("mutable_grad on undefined tensor");
  return data_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (data_ && !data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::clear_grad() {
  if (data_) {
    data_->grad.clear();
    data_->grad.shrink_to_fit();
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  if (!data_) return {};
  return Tensor(data_->shape, data_->data);
}

template <typename T>
Tensor<T> Tensor<T>::wrap(std::shared_ptr<Storage> storage) {
  Tensor t;
  t.data_ = std::move(storage);
  return t;
}

// ---------------------------------------------------------------------------

namespace {

std::atomic<std::uint64_t> next_tape_serial{1};

template <typename T>
thread_local GradientTape<T>* active_tape = nullptr;

}  // namespace

template <typename T>
GradientTape<T>::GradientTape() : serial_(next_tape_serial.fetch_add(1)) {}

template <typename T>
GradientTape<T>* GradientTape<T>::active() {
  return active_tape<T>;
}

template <typename T>
void GradientTape<T>::record(OpKind kind, std::vector<StoragePtr> inputs, const StoragePtr& output,
                             std::function<void(const Entry&)> rule) {
  if (consumed_) throw ValidationError("recording onto a tape that already ran backward");
  output->requires_grad = true;
  output->tape_serial = serial_;
  output->tape_index = entries_.size();
  entries_.push_back(Entry{kind, std::move(inputs), output, std::move(rule)});
}

template <typename T>
void GradientTape<T>::check_ready(const Tensor<T>& output) const {
  if (consumed_) throw ValidationError("backward already ran on this tape; call reset_grads() first");
  if (!output.defined() || output.storage()->tape_serial != serial_)
    throw ValidationError("backward target is detached from this tape");
}

template <typename T>
void GradientTape<T>::propagate(std::size_t last_index) {
  for (std::size_t i = last_index + 1; i-- > 0;) {
    const Entry& e = entries_[i];
    if (e.output->grad.empty()) continue;
    e.backward(e);
  }
  consumed_ = true;
}

template <typename T>
void GradientTape<T>::backward(const Tensor<T>& loss, T seed) {
  if (loss.defined() && loss.numel() != 1)
    throw ValidationError("backward needs a scalar loss, got " + shape_string(loss.shape()));
  check_ready(loss);
  loss.storage()->ensure_grad()[0] += seed;
  propagate(loss.storage()->tape_index);
}

template <typename T>
void GradientTape<T>::backward(const Tensor<T>& output, std::span<const T> upstream) {
  check_ready(output);
  if (upstream.size() != output.numel())
    throw DimensionError("upstream gradient has " + std::to_string(upstream.size()) +
                         " values for output " + shape_string(output.shape()));
  output.storage()->accumulate_grad(upstream);
  propagate(output.storage()->tape_index);
}

template <typename T>
void GradientTape<T>::reset_grads() {
  for (auto& e : entries_) {
    e.output->grad.clear();
    for (auto& in : e.inputs) in->grad.clear();
  }
  consumed_ = false;
}

template <typename T>
TapeScope<T>::TapeScope(GradientTape<T>& tape) : previous_(active_tape<T>) {
  active_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_tape<T> = previous_;
}

template class Tensor<float>;
template class Tensor<double>;
template class GradientTape<float>;
template class GradientTape<double>;
template class TapeScope<float>;
template class TapeScope<double>;

}  // namespace mixtrain
