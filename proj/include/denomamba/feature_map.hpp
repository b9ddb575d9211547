#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "denomamba/errors.hpp"

namespace denomamba {

class Tape;
using NodeId = std::size_t;

/// Extents of a rank-4 (batch, channels, height, width) grid.
struct Shape {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  constexpr std::size_t numel() const { return batch * channels * height * width; }
  constexpr std::size_t plane() const { return height * width; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(batch) + ", " + std::to_string(channels) + ", " +
           std::to_string(height) + ", " + std::to_string(width) + ")";
  }
};

/// Dense NCHW map of doubles.
///
/// Storage is shared between copies and treated as immutable once an
/// operation has produced it; `mutable_data()` detaches a private copy when
/// needed. A map produced while recording on a Tape remembers its node so
/// that later operations can chain gradients through it.
class FeatureMap {
 public:
  FeatureMap() = default;

  explicit FeatureMap(Shape shape, double fill = 0.0)
      : shape_(shape), storage_(std::make_shared<std::vector<double>>(shape.numel(), fill)) {}

  FeatureMap(Shape shape, std::vector<double> values) : shape_(shape) {
    if (values.size() != shape.numel()) {
      throw ShapeError("FeatureMap: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape.str());
    }
    storage_ = std::make_shared<std::vector<double>>(std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return shape_.numel(); }
  bool empty() const { return numel() == 0; }

  std::span<const double> data() const {
    if (!storage_) return {};
    return {storage_->data(), storage_->size()};
  }

  /// Writable view. Copies the storage first if anyone else shares it, and
  /// drops any tape link (the written values are no longer the recorded ones).
  std::span<double> mutable_data() {
    if (!storage_) return {};
    if (storage_.use_count() > 1) storage_ = std::make_shared<std::vector<double>>(*storage_);
    tape_ = nullptr;
    return {storage_->data(), storage_->size()};
  }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.channels + c) * shape_.height + h) * shape_.width + w;
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return (*storage_)[index(n, c, h, w)];
  }

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  NodeId node() const { return node_; }

  /// Same values, no gradient link.
  FeatureMap detached() const {
    FeatureMap out = *this;
    out.tape_ = nullptr;
    return out;
  }

  /// Same storage under different extents with equal element count.
  FeatureMap with_shape(Shape shape) const {
    if (shape.numel() != numel()) {
      throw ShapeError("reshape from " + shape_.str() + " to " + shape.str() +
                       " changes the element count");
    }
    FeatureMap out = detached();
    out.shape_ = shape;
    return out;
  }

 private:
  friend class Tape;

  Shape shape_{};
  std::shared_ptr<std::vector<double>> storage_;
  Tape* tape_ = nullptr;
  NodeId node_ = 0;
};

inline void require_same_shape(const FeatureMap& a, const FeatureMap& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + a.shape().str() + " does not match " +
                     b.shape().str());
  }
}

}  // namespace denomamba
