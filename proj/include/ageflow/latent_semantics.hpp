#pragma once

// Prototype latents per (age group, attribute) cell, linear latent
// manipulation, and the prototype-difference distillation target.

#include <vector>

#include "ageflow/tensor.hpp"

namespace ageflow {

template <typename T>
class PrototypeTable {
 public:
  PrototypeTable() = default;
  /// latent_shape is the per-sample packed shape [C,H,W].
  PrototypeTable(int groups, int attributes, Shape latent_shape);

  int groups() const { return groups_; }
  int attributes() const { return attributes_; }
  const Shape& latent_shape() const { return shape_; }

  bool has(int g, int a) const { return count(g, a) > 0; }
  int count(int g, int a) const;
  /// Throws Fault naming the cell when it is empty.
  const Tensor<T>& at(int g, int a) const;

  void set(int g, int a, Tensor<T> mean, int count);
  /// Throws Fault listing every empty cell.
  void require_complete() const;

 private:
  std::size_t index(int g, int a) const;

  int groups_ = 0, attributes_ = 0;
  Shape shape_;
  std::vector<Tensor<T>> means_;
  std::vector<int> counts_;
};

/// Per-cell arithmetic means of latents [N,C,H,W]. Sums run in sample order
/// in double precision. Empty cells stay flagged (count 0).
template <typename T>
PrototypeTable<T> compute_prototypes(const Tensor<T>& latents, const std::vector<int>& groups,
                                     const std::vector<int>& attributes, int num_groups,
                                     int num_attributes);

/// z' = z_s + s (z_pos - z_neg); all three share one shape.
template <typename T>
Tensor<T> manipulate(const Tensor<T>& z_s, const Tensor<T>& z_pos, const Tensor<T>& z_neg, double s);

/// z_s + s (proto[g_tgt, attr] - proto[g_src, attr]) for one sample [C,H,W]
/// or [1,C,H,W].
template <typename T>
Tensor<T> akd_target(const Tensor<T>& z_s, const PrototypeTable<T>& table, int g_src, int g_tgt,
                     int attr, double s);

/// Batched form over z_s [N,C,H,W] with per-sample labels.
template <typename T>
Tensor<T> akd_target(const Tensor<T>& z_s, const PrototypeTable<T>& table,
                     const std::vector<int>& g_src, const std::vector<int>& g_tgt,
                     const std::vector<int>& attr, double s);

/// Mean absolute difference.
template <typename T>
double akd_loss(const Tensor<T>& pred, const Tensor<T>& target);
/// d(akd_loss)/d(pred) = sign(pred - target) / numel.
template <typename T>
Tensor<T> akd_loss_backward(const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace ageflow
