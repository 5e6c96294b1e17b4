#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmrc::ag {

using Mat = Eigen::MatrixXd;

class Node;
using Var = std::shared_ptr<Node>;

/// A node in the dynamic computation tape. Holds the value, the gradient
/// accumulator and a closure that pushes this node's gradient into its inputs.
class Node {
 public:
  Mat val;
  Mat grad;
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void(Node&)> backprop;

  explicit Node(Mat v, bool rg = false) : val(std::move(v)), requires_grad(rg) {
    grad = Mat::Zero(val.rows(), val.cols());
  }

  void zero_grad() { grad.setZero(); }
};

inline Var constant(Mat v) { return std::make_shared<Node>(std::move(v)); }
inline Var make_param(Mat v) { return std::make_shared<Node>(std::move(v), true); }

/// Stops gradient flow: same values, no tape edge to the input.
inline Var detach(const Var& x) { return constant(x->val); }

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var cmul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_row_broadcast(const Var& a, const Var& row);     // a + replicate(row)
Var broadcast_row(const Var& row, Eigen::Index n);       // 1xd -> nxd
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, const std::vector<int>& idx);
Var transpose(const Var& a);
Var softmax_rows(const Var& logits);
Var tanh_(const Var& a);
Var sigmoid_(const Var& a);
Var gelu(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps);
Var pick(const Var& a, Eigen::Index r, Eigen::Index c);
Var sum_all(const Var& a);
Var neg_log(const Var& a, double eps);  // elementwise -log(a + eps)
/// Mean binary cross entropy of predictions (n x 1, probabilities) against
/// fixed 0/1 targets; probabilities clamped to [clamp, 1-clamp] before logs.
Var bce_loss(const Var& pred, const std::vector<double>& targets, double clamp = 1e-7);

/// Reverse pass from a 1x1 root. Gradients accumulate into every reachable
/// node with requires_grad set (directly or transitively).
void backward(const Var& root);

}  // namespace dmrc::ag
