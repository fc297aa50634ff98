#ifndef DCAPS_CAPSULES_HPP_
#define DCAPS_CAPSULES_HPP_

#include <cstddef>
#include <string>

#include "dcaps/ops.hpp"
#include "dcaps/tensor.hpp"

namespace dcaps {

// A spatial grid of capsule types. Each of the num_types grids holds an
// atom_dim-dimensional activation vector per (h, w) cell; activations are
// stored as [batch, h, w, types, atoms].
template <class T>
struct CapsuleGrid {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_types = 0;
  std::size_t atom_dim = 0;
  Tensor<T> activations;

  CapsuleGrid() = default;
  CapsuleGrid(std::size_t b, std::size_t h, std::size_t w, std::size_t n,
              std::size_t a, Tensor<T> act)
      : batch(b), height(h), width(w), num_types(n), atom_dim(a),
        activations(std::move(act)) {
    if (h < 1 || w < 1 || n < 1 || a < 1) {
      throw ConfigError("capsule grid extents must all be >= 1");
    }
    const Shape expect{b, h, w, n, a};
    if (activations.shape() != expect) {
      throw DimensionError("capsule grid activations " +
                           shape_str(activations.shape()) + " do not match " +
                           shape_str(expect));
    }
  }
};

// One convolutional capsule layer: a kernel x kernel window of child capsules
// feeds every parent location, transforms are shared across space but not
// across capsule types.
struct ConvCapsuleSpec {
  std::size_t kernel = 3;  // odd window extent over the child grid
  std::size_t stride = 1;
  std::size_t in_types = 1;
  std::size_t out_types = 1;
  std::size_t in_atoms = 8;
  std::size_t out_atoms = 8;
  std::size_t routing_iterations = 3;

  void validate() const {
    if (kernel < 1 || kernel % 2 == 0) {
      throw ConfigError("capsule kernel must be an odd integer >= 1, got " +
                        std::to_string(kernel));
    }
    if (stride < 1) throw ConfigError("capsule stride must be >= 1");
    if (in_types < 1 || out_types < 1 || in_atoms < 1 || out_atoms < 1) {
      throw ConfigError("capsule type and atom counts must be >= 1");
    }
    if (routing_iterations < 1) {
      throw ConfigError("routing iterations must be >= 1, got " +
                        std::to_string(routing_iterations));
    }
  }

  // [in_types, kernel, kernel, in_atoms, out_types*out_atoms]
  Shape transform_shape() const {
    return {in_types, kernel, kernel, in_atoms, out_types * out_atoms};
  }
};

template <class T>
CapsuleGrid<T> squash(const CapsuleGrid<T>& grid) {
  return CapsuleGrid<T>(grid.batch, grid.height, grid.width, grid.num_types,
                        grid.atom_dim, squash_last(grid.activations));
}

// Prediction vectors for every parent location: each child capsule inside the
// zero-padded kernel window is multiplied by the transform of its child type.
// Output: [B, H', W', kernel*kernel*in_types, out_types, out_atoms], where
// absent (padded) children contribute zero prediction vectors.
template <class T>
Tensor<T> form_predictions(const CapsuleGrid<T>& children,
                           const ConvCapsuleSpec& spec,
                           const Tensor<T>& transforms) {
  spec.validate();
  if (children.num_types != spec.in_types || children.atom_dim != spec.in_atoms) {
    throw DimensionError(
        "child grid has " + std::to_string(children.num_types) + " types x " +
        std::to_string(children.atom_dim) + " atoms, spec expects " +
        std::to_string(spec.in_types) + " x " + std::to_string(spec.in_atoms));
  }
  if (transforms.shape() != spec.transform_shape()) {
    throw DimensionError("transform tensor " + shape_str(transforms.shape()) +
                         " does not match spec " +
                         shape_str(spec.transform_shape()));
  }
  const std::size_t k = spec.kernel;
  const std::size_t bsz = children.batch;
  const std::size_t nc = k * k * spec.in_types;  // children per window

  Tensor<T> flat = reshape(children.activations,
                           {bsz, children.height, children.width,
                            spec.in_types * spec.in_atoms});
  Tensor<T> patches = window_gather(flat, k, k, spec.stride, Padding::kSame);
  const std::size_t oh = patches.shape()[1], ow = patches.shape()[2];
  // patch channel order is [kh, kw, type, atom]; align the transforms to it
  Tensor<T> w = permute(transforms, {1, 2, 0, 3, 4});
  w = reshape(w, {nc, spec.in_atoms, spec.out_types * spec.out_atoms});
  Tensor<T> rows = reshape(patches, {bsz, oh, ow, nc, 1, spec.in_atoms});
  Tensor<T> pred = matmul(rows, w);  // [B,H',W',nc,1,out_types*out_atoms]
  return reshape(pred, {bsz, oh, ow, nc, spec.out_types, spec.out_atoms});
}

// Routing-by-agreement restricted to one spatial location: all children in
// the window compete over the parent types at that location only.
//
//   b <- 0
//   repeat r times:
//     c   <- softmax over parent types of b      (per child)
//     s_j <- sum_i c_ij * u_hat_j|i  (+ per-parent-type bias)
//     v_j <- squash(s_j)
//     b_ij += u_hat_j|i . v_j        (skipped on the final iteration)
//
// The couplings are recomputed activations, not parameters; gradients flow
// through every iteration. predictions: [B,H,W,nc,out_types,out_atoms],
// bias (optional): [out_types, out_atoms].
template <class T>
Tensor<T> dynamic_route(const Tensor<T>& predictions, std::size_t r,
                        const Tensor<T>& bias = Tensor<T>(),
                        std::vector<Tensor<T>>* coupling_trace = nullptr) {
  if (r < 1) throw ConfigError("dynamic_route requires r >= 1");
  const Shape& ps = predictions.shape();
  if (ps.size() != 6) {
    throw DimensionError(
        "dynamic_route expects [B,H,W,children,out_types,out_atoms], got " +
        shape_str(ps));
  }
  const std::size_t bsz = ps[0], h = ps[1], w = ps[2], nc = ps[3];
  const std::size_t n_out = ps[4], a_out = ps[5];
  if (bias.defined() && bias.shape() != Shape{n_out, a_out}) {
    throw DimensionError("routing bias " + shape_str(bias.shape()) +
                         " must be [out_types, out_atoms]");
  }

  Tensor<T> logits = Tensor<T>::zeros({bsz, h, w, nc, n_out, 1});
  Tensor<T> parents;
  for (std::size_t it = 0; it < r; ++it) {
    Tensor<T> couplings = softmax(logits, 4);
    if (coupling_trace) coupling_trace->push_back(couplings);
    Tensor<T> s = sum(mul(couplings, predictions), {3});  // [B,H,W,n_out,a_out]
    if (bias.defined()) s = add(s, bias);
    parents = squash_last(s);
    if (it + 1 < r) {
      Tensor<T> vq = reshape(parents, {bsz, h, w, 1, n_out, a_out});
      Tensor<T> agreement = sum(mul(predictions, vq), {5}, /*keepdims=*/true);
      logits = add(logits, agreement);
    }
  }
  return parents;
}

// Full convolutional capsule layer: predictions -> routing -> squashed
// parents. The output grid extents follow same-padding stride arithmetic.
template <class T>
CapsuleGrid<T> conv_capsule_forward(const CapsuleGrid<T>& children,
                                    const ConvCapsuleSpec& spec,
                                    const Tensor<T>& transforms,
                                    const Tensor<T>& bias = Tensor<T>()) {
  Tensor<T> pred = form_predictions(children, spec, transforms);
  const std::size_t oh = pred.shape()[1], ow = pred.shape()[2];
  Tensor<T> parents = dynamic_route(pred, spec.routing_iterations, bias);
  return CapsuleGrid<T>(children.batch, oh, ow, spec.out_types, spec.out_atoms,
                        parents);
}

// Capsule-average pooling: the element-wise spatial mean per capsule type,
// preserving the atom dimension. [B,H,W,n,a] -> [B,n,a].
template <class T>
Tensor<T> capsule_average_pool(const CapsuleGrid<T>& grid) {
  return mean(grid.activations, {1, 2}, /*keepdims=*/false);
}

// Euclidean norms over the last axis: the class scores of capsule vectors.
template <class T>
Tensor<T> magnitudes(const Tensor<T>& vectors) {
  return l2norm_last(vectors, /*keepdim=*/false);
}

// Post-squash sanity: every capsule vector magnitude must lie in [0, 1).
template <class T>
bool is_squashed(const CapsuleGrid<T>& grid) {
  const std::size_t a = grid.atom_dim;
  const auto& v = grid.activations.data();
  for (std::size_t r = 0; r < v.size() / a; ++r) {
    T n2 = T(0);
    for (std::size_t i = 0; i < a; ++i) n2 += v[r * a + i] * v[r * a + i];
    if (!(n2 < T(1))) return false;
  }
  return true;
}

}  // namespace dcaps

#endif  // DCAPS_CAPSULES_HPP_
