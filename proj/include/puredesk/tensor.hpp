#pragma once

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace puredesk::ad {

class Tape;

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major f64 array. Copies share the underlying buffer; tensors are
/// treated as immutable once handed to an operation, so sharing is safe.
/// data() may be written only on a freshly created tensor (factories, RNG
/// fills, file readers) before it is shared.
///
/// A tensor either lives off-graph (node() < 0) or is attached to a Tape node,
/// in which case requires_grad() reports whether gradients flow to it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(n, v));
  }
  static Tensor from(Shape shape, std::vector<double> values) {
    if (numel(shape) != static_cast<std::int64_t>(values.size()))
      throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(std::move(values)));
  }
  static Tensor scalar(double v) { return from({1}, {v}); }
  static Tensor wrap(Shape shape, std::shared_ptr<std::vector<double>> buf) {
    if (!buf || numel(shape) != static_cast<std::int64_t>(buf->size()))
      throw std::invalid_argument("tensor buffer length does not match shape");
    return Tensor(std::move(shape), std::move(buf));
  }

  bool defined() const { return static_cast<bool>(buf_); }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t size() const { return buf_ ? static_cast<std::int64_t>(buf_->size()) : 0; }

  const double* data() const { return buf_->data(); }
  double* data() { return buf_->data(); }
  const std::vector<double>& values() const { return *buf_; }
  double at(std::int64_t i) const { return (*buf_)[static_cast<std::size_t>(i)]; }

  /// Value of a single-element tensor.
  double value() const {
    if (size() != 1) throw std::invalid_argument("value(): tensor is not scalar, shape " + shape_str(shape_));
    return (*buf_)[0];
  }

  bool requires_grad() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }

  /// Same values, detached from any graph.
  Tensor detached() const { return Tensor(shape_, buf_); }

  /// Deep copy with its own buffer.
  Tensor clone() const { return Tensor(shape_, std::make_shared<std::vector<double>>(*buf_)); }

 private:
  friend class Tape;
  Tensor(Shape shape, std::shared_ptr<std::vector<double>> buf)
      : shape_(std::move(shape)), buf_(std::move(buf)) {}

  Shape shape_;
  std::shared_ptr<std::vector<double>> buf_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Item i of a batch tensor [N, ...] as a detached [ ...] tensor copy.
inline Tensor batch_item(const Tensor& batch, int i) {
  if (batch.ndim() < 2) throw std::invalid_argument("batch_item: tensor has no batch dimension");
  const int n = batch.dim(0);
  if (i < 0 || i >= n) throw std::invalid_argument("batch_item: index out of range");
  Shape item_shape(batch.shape().begin() + 1, batch.shape().end());
  const std::int64_t stride = numel(item_shape);
  std::vector<double> out(static_cast<std::size_t>(stride));
  const double* src = batch.data() + static_cast<std::int64_t>(i) * stride;
  std::copy(src, src + stride, out.begin());
  return Tensor::from(std::move(item_shape), std::move(out));
}

/// Stacks `count` copies of item [ ...] into [count, ...].
inline Tensor tile_batch(const Tensor& item, int count) {
  if (count <= 0) throw std::invalid_argument("tile_batch: count must be positive");
  Shape out_shape;
  out_shape.reserve(item.shape().size() + 1);
  out_shape.push_back(count);
  out_shape.insert(out_shape.end(), item.shape().begin(), item.shape().end());
  std::vector<double> out(static_cast<std::size_t>(item.size()) * count);
  for (int i = 0; i < count; ++i)
    std::copy(item.data(), item.data() + item.size(), out.begin() + static_cast<std::int64_t>(i) * item.size());
  return Tensor::from(std::move(out_shape), std::move(out));
}

}  // namespace puredesk::ad
