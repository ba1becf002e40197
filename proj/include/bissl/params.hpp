#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bissl/errors.hpp"
#include "bissl/tensor.hpp"

namespace bissl {

/// One named block of a flat parameter vector, typically one weight or bias tensor.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  Shape shape;

  std::size_t size() const { return shape_numel(shape); }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Ordered, disjoint segments covering [0, total). Construction validates the cover.
class ParamLayout {
 public:
  ParamLayout() = default;

  explicit ParamLayout(std::vector<Segment> segments) : segments_(std::move(segments)) {
    std::size_t cursor = 0;
    for (const auto& s : segments_) {
      if (s.offset != cursor) {
        throw LayoutError("segment '" + s.name + "' starts at " + std::to_string(s.offset) + ", expected " +
                          std::to_string(cursor) + " (segments must be ordered and contiguous)");
      }
      if (s.shape.empty() || s.size() == 0) throw LayoutError("segment '" + s.name + "' has an empty shape");
      cursor += s.size();
    }
    total_ = cursor;
  }

  /// Builds a layout by packing (name, shape) pairs back to back.
  static ParamLayout packed(const std::vector<std::pair<std::string, Shape>>& blocks) {
    std::vector<Segment> segs;
    std::size_t off = 0;
    for (const auto& [name, shape] : blocks) {
      segs.push_back({name, off, shape});
      off += shape_numel(shape);
    }
    return ParamLayout(std::move(segs));
  }

  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t num_segments() const { return segments_.size(); }
  const Segment& segment(std::size_t i) const { return segments_.at(i); }
  std::size_t total() const { return total_; }

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;

 private:
  std::vector<Segment> segments_;
  std::size_t total_ = 0;
};

/// Flat parameter vector plus the layout that names its segments.
/// Arithmetic requires equal layouts.
class ParamVector {
 public:
  ParamVector() : layout_(std::make_shared<const ParamLayout>()) {}

  explicit ParamVector(std::shared_ptr<const ParamLayout> layout, double fill = 0.0)
      : layout_(std::move(layout)), values_(layout_->total(), fill) {}

  ParamVector(std::shared_ptr<const ParamLayout> layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->total()) {
      throw LayoutError("parameter vector length " + std::to_string(values_.size()) + " does not match layout total " +
                        std::to_string(layout_->total()));
    }
  }

  static ParamVector zeros_like(const ParamVector& other) { return ParamVector(other.layout_ptr()); }

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> segment(std::size_t i) {
    const auto& s = layout_->segment(i);
    return std::span<double>(values_).subspan(s.offset, s.size());
  }
  std::span<const double> segment(std::size_t i) const {
    const auto& s = layout_->segment(i);
    return std::span<const double>(values_).subspan(s.offset, s.size());
  }

  Tensor segment_tensor(std::size_t i) const {
    const auto& s = layout_->segment(i);
    auto seg = segment(i);
    return Tensor(s.shape, std::vector<double>(seg.begin(), seg.end()));
  }

  bool same_layout(const ParamVector& other) const {
    return layout_ == other.layout_ || *layout_ == *other.layout_;
  }

  void require_same_layout(const ParamVector& other, const char* what) const {
    if (!same_layout(other)) throw LayoutError(std::string(what) + ": parameter layouts differ");
  }

  /// Bitwise equality of values and layout.
  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.same_layout(b) && a.values_ == b.values_;
  }

  ParamVector& operator+=(const ParamVector& o) {
    require_same_layout(o, "operator+=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    require_same_layout(o, "operator-=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ParamVector& operator*=(double s) {
    for (auto& v : values_) v *= s;
    return *this;
  }
  /// this += alpha * x
  ParamVector& axpy(double alpha, const ParamVector& x) {
    require_same_layout(x, "axpy");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += alpha * x.values_[i];
    return *this;
  }

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }
  friend ParamVector operator*(ParamVector a, double s) { return a *= s; }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> values_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double dot(const ParamVector& a, const ParamVector& b) {
  a.require_same_layout(b, "dot");
  return dot(std::span<const double>(a.values()), std::span<const double>(b.values()));
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }
inline double norm(const ParamVector& a) { return norm(std::span<const double>(a.values())); }

inline std::shared_ptr<const ParamLayout> make_layout(ParamLayout layout) {
  return std::make_shared<const ParamLayout>(std::move(layout));
}

/// Convenience for tests and oracles: a single-segment vector named `name`.
inline ParamVector flat_vector(const std::string& name, std::vector<double> values) {
  const std::size_t n = values.size();
  if (n == 0) return ParamVector();
  return ParamVector(make_layout(ParamLayout::packed({{name, Shape{n}}})), std::move(values));
}

}  // namespace bissl
