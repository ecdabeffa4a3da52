#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "stg/tensor.hpp"

namespace stg {

/// Graph signal over time: a rank-3 tensor indexed (time, node, feature).
class TrafficTensor {
 public:
  TrafficTensor() = default;

  explicit TrafficTensor(Tensor values) : values_(std::move(values)) {
    if (values_.rank() != 3) {
      throw DimensionError("traffic tensor must be time x nodes x features, got " + shape_str(values_.shape()));
    }
  }

  TrafficTensor(std::size_t steps, std::size_t nodes, std::size_t features)
      : values_(Tensor::zeros({steps, nodes, features})) {}

  std::size_t steps() const { return values_.dim(0); }
  std::size_t nodes() const { return values_.dim(1); }
  std::size_t features() const { return values_.dim(2); }

  double at(std::size_t t, std::size_t n, std::size_t d) const { return values_[index(t, n, d)]; }
  double& at(std::size_t t, std::size_t n, std::size_t d) { return values_[index(t, n, d)]; }

  /// One node's series for one channel.
  std::vector<double> series(std::size_t node, std::size_t channel) const {
    check(node, channel);
    std::vector<double> out(steps());
    for (std::size_t t = 0; t < out.size(); ++t) out[t] = at(t, node, channel);
    return out;
  }

  const Tensor& tensor() const noexcept { return values_; }
  Tensor& tensor() noexcept { return values_; }

 private:
  std::size_t index(std::size_t t, std::size_t n, std::size_t d) const {
    return (t * values_.dim(1) + n) * values_.dim(2) + d;
  }

  void check(std::size_t node, std::size_t channel) const {
    if (node >= nodes() || channel >= features()) {
      throw DimensionError("node/channel index out of range for " + shape_str(values_.shape()));
    }
  }

  Tensor values_;
};

}  // namespace stg
