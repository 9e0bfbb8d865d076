#include "ageflow/latent_semantics.hpp"

#include <cmath>
#include <string>

namespace ageflow {

template <typename T>
PrototypeTable<T>::PrototypeTable(int groups, int attributes, Shape latent_shape)
    : groups_(groups), attributes_(attributes), shape_(std::move(latent_shape)) {
  if (groups < 1 || attributes < 1) throw ShapeError("prototype table: empty label range");
  means_.assign(static_cast<std::size_t>(groups) * attributes, Tensor<T>(shape_));
  counts_.assign(means_.size(), 0);
}

template <typename T>
std::size_t PrototypeTable<T>::index(int g, int a) const {
  if (g < 0 || g >= groups_ || a < 0 || a >= attributes_) {
    throw Fault("prototype cell (" + std::to_string(g) + ", " + std::to_string(a) + ") out of range");
  }
  return static_cast<std::size_t>(g) * attributes_ + a;
}

template <typename T>
int PrototypeTable<T>::count(int g, int a) const {
  return counts_[index(g, a)];
}

template <typename T>
const Tensor<T>& PrototypeTable<T>::at(int g, int a) const {
  const std::size_t i = index(g, a);
  if (counts_[i] == 0) {
    throw Fault("prototype cell (" + std::to_string(g) + ", " + std::to_string(a) + ") is empty");
  }
  return means_[i];
}

template <typename T>
void PrototypeTable<T>::set(int g, int a, Tensor<T> mean, int count) {
  if (mean.shape() != shape_) throw ShapeError("prototype: shape " + shape_string(mean.shape()) + " != " + shape_string(shape_));
  const std::size_t i = index(g, a);
  means_[i] = std::move(mean);
  counts_[i] = count;
}

template <typename T>
void PrototypeTable<T>::require_complete() const {
  std::string missing;
  for (int g = 0; g < groups_; ++g)
    for (int a = 0; a < attributes_; ++a)
      if (counts_[index(g, a)] == 0) missing += " (" + std::to_string(g) + ", " + std::to_string(a) + ")";
  if (!missing.empty()) throw Fault("empty prototype cells:" + missing);
}

template <typename T>
PrototypeTable<T> compute_prototypes(const Tensor<T>& latents, const std::vector<int>& groups,
                                     const std::vector<int>& attributes, int num_groups,
                                     int num_attributes) {
  require_rank(latents, 4, "compute_prototypes");
  const int N = latents.dim(0);
  if (static_cast<int>(groups.size()) != N || static_cast<int>(attributes.size()) != N) {
    throw ShapeError("compute_prototypes: label count does not match latent batch");
  }
  const Shape cell_shape{latents.dim(1), latents.dim(2), latents.dim(3)};
  const std::size_t per = latents.size() / (N ? N : 1);
  const std::size_t cells = static_cast<std::size_t>(num_groups) * num_attributes;
  std::vector<std::vector<double>> sums(cells, std::vector<double>(per, 0.0));
  std::vector<int> counts(cells, 0);
  for (int n = 0; n < N; ++n) {
    const int g = groups[n], a = attributes[n];
    if (g < 0 || g >= num_groups || a < 0 || a >= num_attributes) {
      throw Fault("compute_prototypes: label (" + std::to_string(g) + ", " + std::to_string(a) +
                  ") out of range");
    }
    auto& acc = sums[static_cast<std::size_t>(g) * num_attributes + a];
    const T* src = latents.data() + static_cast<std::size_t>(n) * per;
    for (std::size_t i = 0; i < per; ++i) acc[i] += src[i];
    ++counts[static_cast<std::size_t>(g) * num_attributes + a];
  }
  PrototypeTable<T> table(num_groups, num_attributes, cell_shape);
  for (int g = 0; g < num_groups; ++g) {
    for (int a = 0; a < num_attributes; ++a) {
      const std::size_t c = static_cast<std::size_t>(g) * num_attributes + a;
      if (counts[c] == 0) continue;
      Tensor<T> mean(cell_shape);
      for (std::size_t i = 0; i < per; ++i) mean[i] = static_cast<T>(sums[c][i] / counts[c]);
      table.set(g, a, std::move(mean), counts[c]);
    }
  }
  return table;
}

template <typename T>
Tensor<T> manipulate(const Tensor<T>& z_s, const Tensor<T>& z_pos, const Tensor<T>& z_neg, double s) {
  require_same_shape(z_s, z_pos, "manipulate");
  require_same_shape(z_s, z_neg, "manipulate");
  Tensor<T> out(z_s.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(z_s[i] + s * (static_cast<double>(z_pos[i]) - z_neg[i]));
  }
  return out;
}

template <typename T>
Tensor<T> akd_target(const Tensor<T>& z_s, const PrototypeTable<T>& table, int g_src, int g_tgt,
                     int attr, double s) {
  const Tensor<T>& pos = table.at(g_tgt, attr);
  const Tensor<T>& neg = table.at(g_src, attr);
  if (z_s.size() != pos.size()) throw ShapeError("akd_target: latent does not match prototype shape");
  return manipulate(z_s, pos.reshaped(z_s.shape()), neg.reshaped(z_s.shape()), s);
}

template <typename T>
Tensor<T> akd_target(const Tensor<T>& z_s, const PrototypeTable<T>& table,
                     const std::vector<int>& g_src, const std::vector<int>& g_tgt,
                     const std::vector<int>& attr, double s) {
  require_rank(z_s, 4, "akd_target");
  const int N = z_s.dim(0);
  if (static_cast<int>(g_src.size()) != N || static_cast<int>(g_tgt.size()) != N ||
      static_cast<int>(attr.size()) != N) {
    throw ShapeError("akd_target: label count does not match batch");
  }
  const std::size_t per = z_s.size() / N;
  if (per != shape_numel(table.latent_shape())) throw ShapeError("akd_target: latent does not match prototype shape");
  Tensor<T> out(z_s.shape());
  for (int n = 0; n < N; ++n) {
    const Tensor<T>& pos = table.at(g_tgt[n], attr[n]);
    const Tensor<T>& neg = table.at(g_src[n], attr[n]);
    const std::size_t off = static_cast<std::size_t>(n) * per;
    for (std::size_t i = 0; i < per; ++i) {
      out[off + i] = static_cast<T>(z_s[off + i] + s * (static_cast<double>(pos[i]) - neg[i]));
    }
  }
  return out;
}

template <typename T>
double akd_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred, target, "akd_loss");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(static_cast<double>(pred[i]) - target[i]);
  return acc / static_cast<double>(pred.size());
}

template <typename T>
Tensor<T> akd_loss_backward(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred, target, "akd_loss_backward");
  const T inv = T(1) / static_cast<T>(pred.size());
  Tensor<T> g(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    g[i] = d > 0 ? inv : (d < 0 ? -inv : T(0));
  }
  return g;
}

#define AGEFLOW_INSTANTIATE_SEMANTICS(T)                                                              \
  template class PrototypeTable<T>;                                                                   \
  template PrototypeTable<T> compute_prototypes<T>(const Tensor<T>&, const std::vector<int>&,         \
                                                   const std::vector<int>&, int, int);                \
  template Tensor<T> manipulate<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);     \
  template Tensor<T> akd_target<T>(const Tensor<T>&, const PrototypeTable<T>&, int, int, int, double); \
  template Tensor<T> akd_target<T>(const Tensor<T>&, const PrototypeTable<T>&, const std::vector<int>&, \
                                   const std::vector<int>&, const std::vector<int>&, double);         \
  template double akd_loss<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> akd_loss_backward<T>(const Tensor<T>&, const Tensor<T>&);

AGEFLOW_INSTANTIATE_SEMANTICS(float)
AGEFLOW_INSTANTIATE_SEMANTICS(double)

}  // namespace ageflow
