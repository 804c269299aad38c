#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dyadgen/tensor.hpp"

namespace dyadgen::ad {

// Reverse-mode autodiff over Tensor. Each op builds a Node whose backward
// closure scatters this->grad into its parents' grads. Graphs are built per
// forward pass and freed when the root goes out of scope; leaves (weights)
// outlive a single graph only if the caller keeps them.
struct Node {
  Tensor value;
  Tensor grad;          // lazily sized to value's shape
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

NodePtr constant(Tensor value);
NodePtr leaf(Tensor value);  // requires_grad = true

// Runs backprop from a scalar root (numel == 1), seeding d(root)/d(root) = 1.
void backward(const NodePtr& root);

// ---- elementwise ----
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, double c);
NodePtr add_scalar(const NodePtr& a, double c);
NodePtr tanh_(const NodePtr& a);
NodePtr sigmoid_(const NodePtr& a);
NodePtr abs_(const NodePtr& a);

// ---- shape ----
NodePtr reshape(const NodePtr& a, std::vector<int> shape);
NodePtr concat_rows(const NodePtr& a, const NodePtr& b);   // [n1,d]+[n2,d]
NodePtr concat_cols(const NodePtr& a, const NodePtr& b);   // [n,d1]+[n,d2]
NodePtr concat_vec(const NodePtr& a, const NodePtr& b);    // [a]+[b]
NodePtr slice_rows(const NodePtr& a, int r0, int r1);      // rows [r0,r1)
NodePtr slice_cols(const NodePtr& a, int c0, int c1);      // cols [c0,c1)
NodePtr transpose(const NodePtr& a);                       // [m,n] -> [n,m]

// ---- linear algebra ----
NodePtr matmul(const NodePtr& a, const NodePtr& b);        // [m,k]x[k,n]
// y = x * W^T + b; x:[n,in], W:[out,in], b:[out] (b may be null)
NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b);

// ---- reductions / row ops ----
NodePtr sum_all(const NodePtr& a);                         // -> [1]
NodePtr mean_all(const NodePtr& a);                        // -> [1]
NodePtr mean_rows(const NodePtr& a);                       // [n,d] -> [d]
NodePtr mean_chw_spatial(const NodePtr& a);                // [c,h,w] -> [c]
NodePtr softmax_rows(const NodePtr& a);                    // [n,d]
NodePtr layer_norm_rows(const NodePtr& x, const NodePtr& gamma,
                        const NodePtr& beta, double eps = 1e-5);
NodePtr row_rms_norm(const NodePtr& x, double eps);        // [n,d], per-row
NodePtr add_rowvec(const NodePtr& x, const NodePtr& v);    // [n,d]+[d]
NodePtr mul_rowvec(const NodePtr& x, const NodePtr& v);    // [n,d]*[d]

// ---- convolution (single image, CHW) ----
// x:[cin,h,w], w:[cout,cin,kh,kw], b:[cout] (may be null)
NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& b,
               int stride, int pad);
// x:[cin,h,w], w:[cin,cout,kh,kw], b:[cout]; out size (h-1)*s - 2p + kh
NodePtr conv_transpose2d(const NodePtr& x, const NodePtr& w, const NodePtr& b,
                         int stride, int pad);

// ---- volume warp ----
// vol:[c,d,h,w], flow:[d,h,w,3] voxel offsets (order: dd,dh,dw); backward
// trilinear sampling with border clamp.
NodePtr warp_trilinear(const NodePtr& vol, const NodePtr& flow);

// ---- image gradients ([c,h,w], forward differences) ----
NodePtr diff_x(const NodePtr& a);                          // [c,h,w-1]
NodePtr diff_y(const NodePtr& a);                          // [c,h-1,w]

// ---- losses ----
NodePtr l1_loss(const NodePtr& pred, const NodePtr& target);   // mean |d|
NodePtr mse_loss(const NodePtr& pred, const NodePtr& target);  // mean d^2

}  // namespace dyadgen::ad
