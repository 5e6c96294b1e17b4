#include "dmrc/autograd.hpp"

#include <cmath>
#include <unordered_set>

namespace dmrc::ag {

namespace {

Var make_op(Mat val, std::vector<Var> inputs, std::function<void(Node&)> backprop) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in->requires_grad;
  auto n = std::make_shared<Node>(std::move(val), rg);
  if (rg) {
    n->inputs = std::move(inputs);
    n->backprop = std::move(backprop);
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->val.rows() != b->val.rows() || a->val.cols() != b->val.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a->val.cols() != b->val.rows()) throw std::invalid_argument("matmul: inner dims differ");
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(a->val * b->val, {a, b}, [pa, pb](Node& self) {
    pa->grad.noalias() += self.grad * pb->val.transpose();
    pb->grad.noalias() += pa->val.transpose() * self.grad;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a->val.cols() != b->val.cols()) throw std::invalid_argument("matmul_nt: inner dims differ");
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(a->val * b->val.transpose(), {a, b}, [pa, pb](Node& self) {
    pa->grad.noalias() += self.grad * pb->val;
    pb->grad.noalias() += self.grad.transpose() * pa->val;
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(a->val + b->val, {a, b}, [pa, pb](Node& self) {
    pa->grad += self.grad;
    pb->grad += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(a->val - b->val, {a, b}, [pa, pb](Node& self) {
    pa->grad += self.grad;
    pb->grad -= self.grad;
  });
}

Var cmul(const Var& a, const Var& b) {
  check_same_shape(a, b, "cmul");
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(a->val.cwiseProduct(b->val), {a, b}, [pa, pb](Node& self) {
    pa->grad += self.grad.cwiseProduct(pb->val);
    pb->grad += self.grad.cwiseProduct(pa->val);
  });
}

Var scale(const Var& a, double s) {
  Node* pa = a.get();
  return make_op(a->val * s, {a}, [pa, s](Node& self) { pa->grad += self.grad * s; });
}

Var add_row_broadcast(const Var& a, const Var& row) {
  if (row->val.rows() != 1 || row->val.cols() != a->val.cols())
    throw std::invalid_argument("add_row_broadcast: row shape mismatch");
  Node* pa = a.get();
  Node* pr = row.get();
  return make_op(a->val.rowwise() + row->val.row(0), {a, row}, [pa, pr](Node& self) {
    pa->grad += self.grad;
    pr->grad.row(0) += self.grad.colwise().sum();
  });
}

Var broadcast_row(const Var& row, Eigen::Index n) {
  if (row->val.rows() != 1) throw std::invalid_argument("broadcast_row: expects 1 x d");
  Node* pr = row.get();
  return make_op(row->val.replicate(n, 1), {row}, [pr](Node& self) {
    pr->grad.row(0) += self.grad.colwise().sum();
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0]->val.cols();
  for (const auto& p : parts) {
    if (p->val.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += p->val.rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p->val.rows()) = p->val;
    at += p->val.rows();
  }
  std::vector<Node*> raw;
  for (const auto& p : parts) raw.push_back(p.get());
  return make_op(std::move(out), parts, [raw](Node& self) {
    Eigen::Index at = 0;
    for (Node* p : raw) {
      p->grad += self.grad.middleRows(at, p->val.rows());
      at += p->val.rows();
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0]->val.rows();
  for (const auto& p : parts) {
    if (p->val.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p->val.cols();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p->val.cols()) = p->val;
    at += p->val.cols();
  }
  std::vector<Node*> raw;
  for (const auto& p : parts) raw.push_back(p.get());
  return make_op(std::move(out), parts, [raw](Node& self) {
    Eigen::Index at = 0;
    for (Node* p : raw) {
      p->grad += self.grad.middleCols(at, p->val.cols());
      at += p->val.cols();
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a->val.rows())
    throw std::out_of_range("slice_rows: range");
  Node* pa = a.get();
  return make_op(a->val.middleRows(start, count), {a}, [pa, start, count](Node& self) {
    pa->grad.middleRows(start, count) += self.grad;
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a->val.cols())
    throw std::out_of_range("slice_cols: range");
  Node* pa = a.get();
  return make_op(a->val.middleCols(start, count), {a}, [pa, start, count](Node& self) {
    pa->grad.middleCols(start, count) += self.grad;
  });
}

Var gather_rows(const Var& a, const std::vector<int>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), a->val.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a->val.rows()) throw std::out_of_range("gather_rows: index");
    out.row(static_cast<Eigen::Index>(i)) = a->val.row(idx[i]);
  }
  Node* pa = a.get();
  return make_op(std::move(out), {a}, [pa, idx](Node& self) {
    for (size_t i = 0; i < idx.size(); ++i)
      pa->grad.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

Var transpose(const Var& a) {
  Node* pa = a.get();
  return make_op(a->val.transpose(), {a},
                 [pa](Node& self) { pa->grad += self.grad.transpose(); });
}

Var softmax_rows(const Var& logits) {
  Mat out(logits->val.rows(), logits->val.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = logits->val.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits->val.row(i).array() - mx).exp();
    out.row(i) = e / e.sum();
  }
  Node* pl = logits.get();
  return make_op(std::move(out), {logits}, [pl](Node& self) {
    for (Eigen::Index i = 0; i < self.val.rows(); ++i) {
      const double dot = self.grad.row(i).dot(self.val.row(i));
      pl->grad.row(i) += self.val.row(i).cwiseProduct((self.grad.row(i).array() - dot).matrix());
    }
  });
}

Var tanh_(const Var& a) {
  Node* pa = a.get();
  return make_op(a->val.array().tanh().matrix(), {a}, [pa](Node& self) {
    pa->grad += self.grad.cwiseProduct((1.0 - self.val.array().square()).matrix());
  });
}

Var sigmoid_(const Var& a) {
  Mat out = (1.0 / (1.0 + (-a->val.array()).exp())).matrix();
  Node* pa = a.get();
  return make_op(std::move(out), {a}, [pa](Node& self) {
    pa->grad += self.grad.cwiseProduct((self.val.array() * (1.0 - self.val.array())).matrix());
  });
}

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Mat out = a->val.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
  Node* pa = a.get();
  return make_op(std::move(out), {a}, [pa](Node& self) {
    Mat d = pa->val.unaryExpr([](double x) {
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
    });
    pa->grad += self.grad.cwiseProduct(d);
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Eigen::Index d = x->val.cols();
  if (gain->val.cols() != d || bias->val.cols() != d || gain->val.rows() != 1 || bias->val.rows() != 1)
    throw std::invalid_argument("layer_norm: gain/bias must be 1 x d");
  Mat xhat(x->val.rows(), d);
  Eigen::VectorXd inv_sigma(x->val.rows());
  for (Eigen::Index i = 0; i < x->val.rows(); ++i) {
    const double mu = x->val.row(i).mean();
    Eigen::RowVectorXd c = x->val.row(i).array() - mu;
    const double var = c.squaredNorm() / static_cast<double>(d);
    inv_sigma(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = c * inv_sigma(i);
  }
  Mat out = (xhat.array().rowwise() * gain->val.row(0).array()).rowwise() + bias->val.row(0).array();
  Node* px = x.get();
  Node* pg = gain.get();
  Node* pb = bias.get();
  auto xhat_s = std::make_shared<Mat>(std::move(xhat));
  auto inv_s = std::make_shared<Eigen::VectorXd>(std::move(inv_sigma));
  return make_op(std::move(out), {x, gain, bias}, [px, pg, pb, xhat_s, inv_s, d](Node& self) {
    for (Eigen::Index i = 0; i < self.val.rows(); ++i) {
      Eigen::RowVectorXd dxhat = self.grad.row(i).cwiseProduct(pg->val.row(0));
      const double m1 = dxhat.mean();
      const double m2 = dxhat.cwiseProduct(xhat_s->row(i)).mean();
      px->grad.row(i) +=
          (*inv_s)(i) * (dxhat.array() - m1 - xhat_s->row(i).array() * m2).matrix();
      pg->grad.row(0) += self.grad.row(i).cwiseProduct(xhat_s->row(i));
      pb->grad.row(0) += self.grad.row(i);
    }
  });
}

Var pick(const Var& a, Eigen::Index r, Eigen::Index c) {
  if (r < 0 || c < 0 || r >= a->val.rows() || c >= a->val.cols())
    throw std::out_of_range("pick: index");
  Mat out(1, 1);
  out(0, 0) = a->val(r, c);
  Node* pa = a.get();
  return make_op(std::move(out), {a}, [pa, r, c](Node& self) { pa->grad(r, c) += self.grad(0, 0); });
}

Var sum_all(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a->val.sum();
  Node* pa = a.get();
  return make_op(std::move(out), {a}, [pa](Node& self) { pa->grad.array() += self.grad(0, 0); });
}

Var neg_log(const Var& a, double eps) {
  Mat out = (-(a->val.array() + eps).log()).matrix();
  Node* pa = a.get();
  return make_op(std::move(out), {a}, [pa, eps](Node& self) {
    pa->grad.array() -= self.grad.array() / (pa->val.array() + eps);
  });
}

Var bce_loss(const Var& pred, const std::vector<double>& targets, double clamp) {
  if (pred->val.cols() != 1 || pred->val.rows() != static_cast<Eigen::Index>(targets.size()))
    throw std::invalid_argument("bce_loss: pred must be n x 1 matching targets");
  const Eigen::Index n = pred->val.rows();
  if (n == 0) return constant(Mat::Zero(1, 1));
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = std::min(1.0 - clamp, std::max(clamp, pred->val(i, 0)));
    const double t = targets[static_cast<size_t>(i)];
    acc += t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  Mat out(1, 1);
  out(0, 0) = -acc / static_cast<double>(n);
  Node* pp = pred.get();
  return make_op(std::move(out), {pred}, [pp, targets, clamp, n](Node& self) {
    const double g = self.grad(0, 0) / static_cast<double>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double p = std::min(1.0 - clamp, std::max(clamp, pp->val(i, 0)));
      const double t = targets[static_cast<size_t>(i)];
      pp->grad(i, 0) += g * (-t / p + (1.0 - t) / (1.0 - p));
    }
  });
}

void backward(const Var& root) {
  if (root->val.rows() != 1 || root->val.cols() != 1)
    throw std::invalid_argument("backward: root must be scalar (1 x 1)");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; graphs can be deep for long training sequences.
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace dmrc::ag
