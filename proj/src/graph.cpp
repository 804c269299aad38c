#include "dyadgen/graph.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dyadgen::ad {

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> parents,
                  std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return n;
}

}  // namespace

NodePtr constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

NodePtr leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

void backward(const NodePtr& root) {
  if (root->value.numel() != 1) throw ShapeError("backward: root must be scalar");
  // iterative post-order topo sort
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->requires_grad) {
      n->ensure_grad();
      for (const auto& p : n->parents)
        if (p->requires_grad) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------- elementwise ----------------

NodePtr add(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (long long i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    auto& a = n.parents[0];
    auto& b = n.parents[1];
    for (long long i = 0; i < n.grad.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += n.grad[i];
      if (b->requires_grad) b->grad[i] += n.grad[i];
    }
  });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor out = a->value;
  for (long long i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    auto& a = n.parents[0];
    auto& b = n.parents[1];
    for (long long i = 0; i < n.grad.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += n.grad[i];
      if (b->requires_grad) b->grad[i] -= n.grad[i];
    }
  });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (long long i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    auto& a = n.parents[0];
    auto& b = n.parents[1];
    for (long long i = 0; i < n.grad.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += n.grad[i] * b->value[i];
      if (b->requires_grad) b->grad[i] += n.grad[i] * a->value[i];
    }
  });
}

NodePtr scale(const NodePtr& a, double c) {
  Tensor out = a->value;
  for (long long i = 0; i < out.numel(); ++i) out[i] *= c;
  return make_node(std::move(out), {a}, [c](Node& n) {
    auto& a = n.parents[0];
    for (long long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * c;
  });
}

NodePtr add_scalar(const NodePtr& a, double c) {
  Tensor out = a->value;
  for (long long i = 0; i < out.numel(); ++i) out[i] += c;
  return make_node(std::move(out), {a}, [](Node& n) {
    auto& a = n.parents[0];
    for (long long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
  });
}

NodePtr tanh_(const NodePtr& a) {
  Tensor out = a->value;
  for (long long i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  return make_node(std::move(out), {a}, [](Node& n) {
    auto& a = n.parents[0];
    for (long long i = 0; i < n.grad.numel(); ++i) {
      double y = n.value[i];
      a->grad[i] += n.grad[i] * (1.0 - y * y);
    }
  });
}

NodePtr sigmoid_(const NodePtr& a) {
  Tensor out = a->value;
  for (long long i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return make_node(std::move(out), {a}, [](Node& n) {
    auto& a = n.parents[0];
    for (long long i = 0; i < n.grad.numel(); ++i) {
      double y = n.value[i];
      a->grad[i] += n.grad[i] * y * (1.0 - y);
    }
  });
}

NodePtr abs_(const NodePtr& a) {
  Tensor out = a->value;
  for (long long i = 0; i < out.numel(); ++i) out[i] = std::fabs(out[i]);
  return make_node(std::move(out), {a}, [](Node& n) {
    auto& a = n.parents[0];
    for (long long i = 0; i < n.grad.numel(); ++i) {
      double s = a->value[i] > 0.0 ? 1.0 : (a->value[i] < 0.0 ? -1.0 : 0.0);
      a->grad[i] += n.grad[i] * s;
    }
  });
}

// ---------------- shape ----------------

NodePtr reshape(const NodePtr& a, std::vector<int> shape) {
  Tensor out = a->value.reshaped(shape);
  return make_node(std::move(out), {a}, [](Node& n) {
    auto& a = n.parents[0];
    for (long long i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
  });
}

NodePtr concat_rows(const NodePtr& a, const NodePtr& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(1))
    throw ShapeError("concat_rows: need [n1,d],[n2,d]");
  int n1 = a->value.dim(0), n2 = b->value.dim(0), d = a->value.dim(1);
  Tensor out({n1 + n2, d});
  std::copy(a->value.data(), a->value.data() + (size_t)n1 * d, out.data());
  std::copy(b->value.data(), b->value.data() + (size_t)n2 * d, out.data() + (size_t)n1 * d);
  return make_node(std::move(out), {a, b}, [n1, n2, d](Node& n) {
    auto& a = n.parents[0];
    auto& b = n.parents[1];
    if (a->requires_grad)
      for (long long i = 0; i < (long long)n1 * d; ++i) a->grad[i] += n.grad[i];
    if (b->requires_grad)
      for (long long i = 0; i < (long long)n2 * d; ++i) b->grad[i] += n.grad[(long long)n1 * d + i];
  });
}

NodePtr concat_cols(const NodePtr& a, const NodePtr& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(0) != b->value.dim(0))
    throw ShapeError("concat_cols: need [n,d1],[n,d2]");
  int n = a->value.dim(0), d1 = a->value.dim(1), d2 = b->value.dim(1);
  Tensor out({n, d1 + d2});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d1; ++j) out.at2(i, j) = a->value.at2(i, j);
    for (int j = 0; j < d2; ++j) out.at2(i, d1 + j) = b->value.at2(i, j);
  }
  return make_node(std::move(out), {a, b}, [n, d1, d2](Node& n_) {
    auto& a = n_.parents[0];
    auto& b = n_.parents[1];
    for (int i = 0; i < n; ++i) {
      if (a->requires_grad)
        for (int j = 0; j < d1; ++j) a->grad.at2(i, j) += n_.grad.at2(i, j);
      if (b->requires_grad)
        for (int j = 0; j < d2; ++j) b->grad.at2(i, j) += n_.grad.at2(i, d1 + j);
    }
  });
}

NodePtr concat_vec(const NodePtr& a, const NodePtr& b) {
  if (a->value.ndim() != 1 || b->value.ndim() != 1)
    throw ShapeError("concat_vec: need 1-D inputs");
  int n1 = a->value.dim(0), n2 = b->value.dim(0);
  Tensor out({n1 + n2});
  std::copy(a->value.data(), a->value.data() + n1, out.data());
  std::copy(b->value.data(), b->value.data() + n2, out.data() + n1);
  return make_node(std::move(out), {a, b}, [n1, n2](Node& n) {
    auto& a = n.parents[0];
    auto& b = n.parents[1];
    if (a->requires_grad)
      for (int i = 0; i < n1; ++i) a->grad[i] += n.grad[i];
    if (b->requires_grad)
      for (int i = 0; i < n2; ++i) b->grad[i] += n.grad[n1 + i];
  });
}

NodePtr slice_rows(const NodePtr& a, int r0, int r1) {
  if (a->value.ndim() != 2) throw ShapeError("slice_rows: need 2-D input");
  int n = a->value.dim(0), d = a->value.dim(1);
  if (r0 < 0 || r1 > n || r0 >= r1) throw ShapeError("slice_rows: bad range");
  Tensor out({r1 - r0, d});
  std::copy(a->value.data() + (size_t)r0 * d, a->value.data() + (size_t)r1 * d, out.data());
  return make_node(std::move(out), {a}, [r0, r1, d](Node& n) {
    auto& a = n.parents[0];
    for (long long i = 0; i < (long long)(r1 - r0) * d; ++i)
      a->grad[(long long)r0 * d + i] += n.grad[i];
  });
}

NodePtr slice_cols(const NodePtr& a, int c0, int c1) {
  if (a->value.ndim() != 2) throw ShapeError("slice_cols: need 2-D input");
  int n = a->value.dim(0), d = a->value.dim(1);
  if (c0 < 0 || c1 > d || c0 >= c1) throw ShapeError("slice_cols: bad range");
  Tensor out({n, c1 - c0});
  for (int i = 0; i < n; ++i)
    for (int j = c0; j < c1; ++j) out.at2(i, j - c0) = a->value.at2(i, j);
  return make_node(std::move(out), {a}, [n, c0, c1](Node& n_) {
    auto& a = n_.parents[0];
    for (int i = 0; i < n; ++i)
      for (int j = c0; j < c1; ++j) a->grad.at2(i, j) += n_.grad.at2(i, j - c0);
  });
}

NodePtr transpose(const NodePtr& a) {
  if (a->value.ndim() != 2) throw ShapeError("transpose: need 2-D input");
  int m = a->value.dim(0), n = a->value.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at2(j, i) = a->value.at2(i, j);
  return make_node(std::move(out), {a}, [m, n](Node& nd) {
    auto& a = nd.parents[0];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) a->grad.at2(i, j) += nd.grad.at2(j, i);
  });
}

// ---------------- linear algebra ----------------

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
    throw ShapeError("matmul: shape mismatch " + Tensor::shape_str(a->value.shape()) +
                     " x " + Tensor::shape_str(b->value.shape()));
  int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = a->value.data() + (size_t)i * k;
    double* orow = out.data() + (size_t)i * n;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = b->value.data() + (size_t)kk * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make_node(std::move(out), {a, b}, [m, k, n](Node& nd) {
    auto& a = nd.parents[0];
    auto& b = nd.parents[1];
    if (a->requires_grad) {
      // dA = dC * B^T
      for (int i = 0; i < m; ++i) {
        const double* grow = nd.grad.data() + (size_t)i * n;
        double* arow = a->grad.data() + (size_t)i * k;
        for (int kk = 0; kk < k; ++kk) {
          const double* brow = b->value.data() + (size_t)kk * n;
          double s = 0;
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          arow[kk] += s;
        }
      }
    }
    if (b->requires_grad) {
      // dB = A^T * dC
      for (int i = 0; i < m; ++i) {
        const double* arow = a->value.data() + (size_t)i * k;
        const double* grow = nd.grad.data() + (size_t)i * n;
        for (int kk = 0; kk < k; ++kk) {
          double av = arow[kk];
          double* brow = b->grad.data() + (size_t)kk * n;
          for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
}

NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
  if (x->value.ndim() != 2 || w->value.ndim() != 2 || x->value.dim(1) != w->value.dim(1))
    throw ShapeError("linear: shape mismatch x" + Tensor::shape_str(x->value.shape()) +
                     " W" + Tensor::shape_str(w->value.shape()));
  int n = x->value.dim(0), in = x->value.dim(1), out_dim = w->value.dim(0);
  if (b && (b->value.ndim() != 1 || b->value.dim(0) != out_dim))
    throw ShapeError("linear: bias shape mismatch");
  Tensor out({n, out_dim});
  for (int i = 0; i < n; ++i) {
    const double* xrow = x->value.data() + (size_t)i * in;
    double* orow = out.data() + (size_t)i * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const double* wrow = w->value.data() + (size_t)o * in;
      double s = b ? b->value[o] : 0.0;
      for (int j = 0; j < in; ++j) s += xrow[j] * wrow[j];
      orow[o] = s;
    }
  }
  std::vector<NodePtr> parents = {x, w};
  if (b) parents.push_back(b);
  return make_node(std::move(out), std::move(parents), [n, in, out_dim](Node& nd) {
    auto& x = nd.parents[0];
    auto& w = nd.parents[1];
    NodePtr b = nd.parents.size() > 2 ? nd.parents[2] : nullptr;
    for (int i = 0; i < n; ++i) {
      const double* grow = nd.grad.data() + (size_t)i * out_dim;
      const double* xrow = x->value.data() + (size_t)i * in;
      for (int o = 0; o < out_dim; ++o) {
        double g = grow[o];
        if (g == 0.0) continue;
        if (x->requires_grad) {
          const double* wrow = w->value.data() + (size_t)o * in;
          double* xg = x->grad.data() + (size_t)i * in;
          for (int j = 0; j < in; ++j) xg[j] += g * wrow[j];
        }
        if (w->requires_grad) {
          double* wg = w->grad.data() + (size_t)o * in;
          for (int j = 0; j < in; ++j) wg[j] += g * xrow[j];
        }
        if (b && b->requires_grad) b->grad[o] += g;
      }
    }
  });
}

// ---------------- reductions / row ops ----------------

NodePtr sum_all(const NodePtr& a) {
  double s = 0;
  for (long long i = 0; i < a->value.numel(); ++i) s += a->value[i];
  return make_node(Tensor::scalar(s), {a}, [](Node& n) {
    auto& a = n.parents[0];
    double g = n.grad[0];
    for (long long i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
  });
}

NodePtr mean_all(const NodePtr& a) {
  double s = 0;
  long long n = a->value.numel();
  for (long long i = 0; i < n; ++i) s += a->value[i];
  return make_node(Tensor::scalar(s / n), {a}, [n](Node& nd) {
    auto& a = nd.parents[0];
    double g = nd.grad[0] / n;
    for (long long i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
  });
}

NodePtr mean_rows(const NodePtr& a) {
  if (a->value.ndim() != 2) throw ShapeError("mean_rows: need 2-D input");
  int n = a->value.dim(0), d = a->value.dim(1);
  Tensor out({d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += a->value.at2(i, j);
  for (int j = 0; j < d; ++j) out[j] /= n;
  return make_node(std::move(out), {a}, [n, d](Node& nd) {
    auto& a = nd.parents[0];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) a->grad.at2(i, j) += nd.grad[j] / n;
  });
}

NodePtr mean_chw_spatial(const NodePtr& a) {
  if (a->value.ndim() != 3) throw ShapeError("mean_chw_spatial: need [c,h,w]");
  int c = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
  long long hw = (long long)h * w;
  Tensor out({c});
  for (int ci = 0; ci < c; ++ci) {
    double s = 0;
    const double* p = a->value.data() + (size_t)ci * hw;
    for (long long i = 0; i < hw; ++i) s += p[i];
    out[ci] = s / hw;
  }
  return make_node(std::move(out), {a}, [c, hw](Node& nd) {
    auto& a = nd.parents[0];
    for (int ci = 0; ci < c; ++ci) {
      double g = nd.grad[ci] / hw;
      double* p = a->grad.data() + (size_t)ci * hw;
      for (long long i = 0; i < hw; ++i) p[i] += g;
    }
  });
}

NodePtr softmax_rows(const NodePtr& a) {
  if (a->value.ndim() != 2) throw ShapeError("softmax_rows: need 2-D input");
  int n = a->value.dim(0), d = a->value.dim(1);
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) {
    double mx = a->value.at2(i, 0);
    for (int j = 1; j < d; ++j) mx = std::max(mx, a->value.at2(i, j));
    double z = 0;
    for (int j = 0; j < d; ++j) {
      double e = std::exp(a->value.at2(i, j) - mx);
      out.at2(i, j) = e;
      z += e;
    }
    for (int j = 0; j < d; ++j) out.at2(i, j) /= z;
  }
  return make_node(std::move(out), {a}, [n, d](Node& nd) {
    auto& a = nd.parents[0];
    for (int i = 0; i < n; ++i) {
      double dot = 0;
      for (int j = 0; j < d; ++j) dot += nd.grad.at2(i, j) * nd.value.at2(i, j);
      for (int j = 0; j < d; ++j)
        a->grad.at2(i, j) += nd.value.at2(i, j) * (nd.grad.at2(i, j) - dot);
    }
  });
}

NodePtr layer_norm_rows(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta,
                        double eps) {
  if (x->value.ndim() != 2) throw ShapeError("layer_norm_rows: need 2-D input");
  int n = x->value.dim(0), d = x->value.dim(1);
  if (gamma->value.numel() != d || beta->value.numel() != d)
    throw ShapeError("layer_norm_rows: gamma/beta size mismatch");
  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<double> inv_std(n);
  for (int i = 0; i < n; ++i) {
    double mu = 0;
    for (int j = 0; j < d; ++j) mu += x->value.at2(i, j);
    mu /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) {
      double dv = x->value.at2(i, j) - mu;
      var += dv * dv;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int j = 0; j < d; ++j) {
      double xh = (x->value.at2(i, j) - mu) * is;
      xhat.at2(i, j) = xh;
      out.at2(i, j) = gamma->value[j] * xh + beta->value[j];
    }
  }
  auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
  auto is_p = std::make_shared<std::vector<double>>(std::move(inv_std));
  return make_node(std::move(out), {x, gamma, beta}, [n, d, xhat_p, is_p](Node& nd) {
    auto& x = nd.parents[0];
    auto& gamma = nd.parents[1];
    auto& beta = nd.parents[2];
    for (int i = 0; i < n; ++i) {
      double sum_g = 0, sum_gx = 0;
      for (int j = 0; j < d; ++j) {
        double gy = nd.grad.at2(i, j);
        double gxh = gy * gamma->value[j];
        sum_g += gxh;
        sum_gx += gxh * xhat_p->at2(i, j);
        if (gamma->requires_grad) gamma->grad[j] += gy * xhat_p->at2(i, j);
        if (beta->requires_grad) beta->grad[j] += gy;
      }
      if (x->requires_grad) {
        double is = (*is_p)[i];
        for (int j = 0; j < d; ++j) {
          double gxh = nd.grad.at2(i, j) * gamma->value[j];
          x->grad.at2(i, j) +=
              is * (gxh - sum_g / d - xhat_p->at2(i, j) * sum_gx / d);
        }
      }
    }
  });
}

NodePtr row_rms_norm(const NodePtr& x, double eps) {
  if (x->value.ndim() != 2) throw ShapeError("row_rms_norm: need 2-D input");
  int n = x->value.dim(0), d = x->value.dim(1);
  Tensor out({n, d});
  std::vector<double> inv_r(n);
  for (int i = 0; i < n; ++i) {
    double ms = 0;
    for (int j = 0; j < d; ++j) {
      double v = x->value.at2(i, j);
      ms += v * v;
    }
    double r = std::sqrt(ms / d + eps);
    inv_r[i] = 1.0 / r;
    for (int j = 0; j < d; ++j) out.at2(i, j) = x->value.at2(i, j) / r;
  }
  auto ir_p = std::make_shared<std::vector<double>>(std::move(inv_r));
  return make_node(std::move(out), {x}, [n, d, ir_p](Node& nd) {
    auto& x = nd.parents[0];
    for (int i = 0; i < n; ++i) {
      double gy = 0;
      for (int j = 0; j < d; ++j) gy += nd.grad.at2(i, j) * nd.value.at2(i, j);
      double ir = (*ir_p)[i];
      for (int j = 0; j < d; ++j)
        x->grad.at2(i, j) += ir * (nd.grad.at2(i, j) - nd.value.at2(i, j) * gy / d);
    }
  });
}

NodePtr add_rowvec(const NodePtr& x, const NodePtr& v) {
  if (x->value.ndim() != 2 || v->value.ndim() != 1 || v->value.dim(0) != x->value.dim(1))
    throw ShapeError("add_rowvec: need [n,d] + [d]");
  int n = x->value.dim(0), d = x->value.dim(1);
  Tensor out = x->value;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.at2(i, j) += v->value[j];
  return make_node(std::move(out), {x, v}, [n, d](Node& nd) {
    auto& x = nd.parents[0];
    auto& v = nd.parents[1];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        if (x->requires_grad) x->grad.at2(i, j) += nd.grad.at2(i, j);
        if (v->requires_grad) v->grad[j] += nd.grad.at2(i, j);
      }
  });
}

NodePtr mul_rowvec(const NodePtr& x, const NodePtr& v) {
  if (x->value.ndim() != 2 || v->value.ndim() != 1 || v->value.dim(0) != x->value.dim(1))
    throw ShapeError("mul_rowvec: need [n,d] * [d]");
  int n = x->value.dim(0), d = x->value.dim(1);
  Tensor out = x->value;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.at2(i, j) *= v->value[j];
  return make_node(std::move(out), {x, v}, [n, d](Node& nd) {
    auto& x = nd.parents[0];
    auto& v = nd.parents[1];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        if (x->requires_grad) x->grad.at2(i, j) += nd.grad.at2(i, j) * v->value[j];
        if (v->requires_grad) v->grad[j] += nd.grad.at2(i, j) * x->value.at2(i, j);
      }
  });
}

// ---------------- convolution ----------------

NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride, int pad) {
  if (x->value.ndim() != 3 || w->value.ndim() != 4 || x->value.dim(0) != w->value.dim(1))
    throw ShapeError("conv2d: shape mismatch x" + Tensor::shape_str(x->value.shape()) +
                     " w" + Tensor::shape_str(w->value.shape()));
  int cin = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  int cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output");
  if (b && b->value.numel() != cout) throw ShapeError("conv2d: bias size mismatch");
  Tensor out({cout, ho, wo});
  for (int co = 0; co < cout; ++co) {
    double bias = b ? b->value[co] : 0.0;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double s = bias;
        int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
        for (int ci = 0; ci < cin; ++ci) {
          const double* xp = x->value.data() + (size_t)ci * h * wd;
          const double* wp = w->value.data() + (((size_t)co * cin + ci) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            int iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              s += xp[(size_t)iy * wd + ix] * wp[(size_t)ky * kw + kx];
            }
          }
        }
        out.at3(co, oy, ox) = s;
      }
    }
  }
  std::vector<NodePtr> parents = {x, w};
  if (b) parents.push_back(b);
  return make_node(std::move(out), std::move(parents),
                   [cin, h, wd, cout, kh, kw, ho, wo, stride, pad](Node& nd) {
    auto& x = nd.parents[0];
    auto& w = nd.parents[1];
    NodePtr b = nd.parents.size() > 2 ? nd.parents[2] : nullptr;
    for (int co = 0; co < cout; ++co) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double g = nd.grad.at3(co, oy, ox);
          if (g == 0.0) continue;
          if (b && b->requires_grad) b->grad[co] += g;
          int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
          for (int ci = 0; ci < cin; ++ci) {
            const double* xp = x->value.data() + (size_t)ci * h * wd;
            double* xg = x->requires_grad ? x->grad.data() + (size_t)ci * h * wd : nullptr;
            const double* wp = w->value.data() + (((size_t)co * cin + ci) * kh) * kw;
            double* wg = w->requires_grad ? w->grad.data() + (((size_t)co * cin + ci) * kh) * kw : nullptr;
            for (int ky = 0; ky < kh; ++ky) {
              int iy = iy0 + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                int ix = ix0 + kx;
                if (ix < 0 || ix >= wd) continue;
                if (xg) xg[(size_t)iy * wd + ix] += g * wp[(size_t)ky * kw + kx];
                if (wg) wg[(size_t)ky * kw + kx] += g * xp[(size_t)iy * wd + ix];
              }
            }
          }
        }
      }
    }
  });
}

NodePtr conv_transpose2d(const NodePtr& x, const NodePtr& w, const NodePtr& b,
                         int stride, int pad) {
  if (x->value.ndim() != 3 || w->value.ndim() != 4 || x->value.dim(0) != w->value.dim(0))
    throw ShapeError("conv_transpose2d: shape mismatch x" +
                     Tensor::shape_str(x->value.shape()) + " w" +
                     Tensor::shape_str(w->value.shape()));
  int cin = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  int cout = w->value.dim(1), kh = w->value.dim(2), kw = w->value.dim(3);
  int ho = (h - 1) * stride - 2 * pad + kh;
  int wo = (wd - 1) * stride - 2 * pad + kw;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv_transpose2d: empty output");
  if (b && b->value.numel() != cout) throw ShapeError("conv_transpose2d: bias size mismatch");
  Tensor out({cout, ho, wo});
  if (b)
    for (int co = 0; co < cout; ++co)
      for (long long i = 0; i < (long long)ho * wo; ++i)
        out.data()[(size_t)co * ho * wo + i] = b->value[co];
  for (int ci = 0; ci < cin; ++ci) {
    const double* xp = x->value.data() + (size_t)ci * h * wd;
    for (int iy = 0; iy < h; ++iy) {
      for (int ix = 0; ix < wd; ++ix) {
        double xv = xp[(size_t)iy * wd + ix];
        if (xv == 0.0) continue;
        for (int co = 0; co < cout; ++co) {
          const double* wp = w->value.data() + (((size_t)ci * cout + co) * kh) * kw;
          double* op = out.data() + (size_t)co * ho * wo;
          for (int ky = 0; ky < kh; ++ky) {
            int oy = iy * stride - pad + ky;
            if (oy < 0 || oy >= ho) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ox = ix * stride - pad + kx;
              if (ox < 0 || ox >= wo) continue;
              op[(size_t)oy * wo + ox] += xv * wp[(size_t)ky * kw + kx];
            }
          }
        }
      }
    }
  }
  std::vector<NodePtr> parents = {x, w};
  if (b) parents.push_back(b);
  return make_node(std::move(out), std::move(parents),
                   [cin, h, wd, cout, kh, kw, ho, wo, stride, pad](Node& nd) {
    auto& x = nd.parents[0];
    auto& w = nd.parents[1];
    NodePtr b = nd.parents.size() > 2 ? nd.parents[2] : nullptr;
    if (b && b->requires_grad)
      for (int co = 0; co < cout; ++co)
        for (long long i = 0; i < (long long)ho * wo; ++i)
          b->grad[co] += nd.grad.data()[(size_t)co * ho * wo + i];
    for (int ci = 0; ci < cin; ++ci) {
      const double* xp = x->value.data() + (size_t)ci * h * wd;
      double* xg = x->requires_grad ? x->grad.data() + (size_t)ci * h * wd : nullptr;
      for (int iy = 0; iy < h; ++iy) {
        for (int ix = 0; ix < wd; ++ix) {
          double xv = xp[(size_t)iy * wd + ix];
          for (int co = 0; co < cout; ++co) {
            const double* wp = w->value.data() + (((size_t)ci * cout + co) * kh) * kw;
            double* wg = w->requires_grad
                             ? w->grad.data() + (((size_t)ci * cout + co) * kh) * kw
                             : nullptr;
            const double* gp = nd.grad.data() + (size_t)co * ho * wo;
            for (int ky = 0; ky < kh; ++ky) {
              int oy = iy * stride - pad + ky;
              if (oy < 0 || oy >= ho) continue;
              for (int kx = 0; kx < kw; ++kx) {
                int ox = ix * stride - pad + kx;
                if (ox < 0 || ox >= wo) continue;
                double g = gp[(size_t)oy * wo + ox];
                if (xg) xg[(size_t)iy * wd + ix] += g * wp[(size_t)ky * kw + kx];
                if (wg) wg[(size_t)ky * kw + kx] += g * xv;
              }
            }
          }
        }
      }
    }
  });
}

// ---------------- warp ----------------

NodePtr warp_trilinear(const NodePtr& vol, const NodePtr& flow) {
  if (vol->value.ndim() != 4 || flow->value.ndim() != 4 || flow->value.dim(3) != 3)
    throw ShapeError("warp_trilinear: need vol [c,d,h,w] and flow [d,h,w,3]");
  int c = vol->value.dim(0), d = vol->value.dim(1), h = vol->value.dim(2),
      w = vol->value.dim(3);
  if (flow->value.dim(0) != d || flow->value.dim(1) != h || flow->value.dim(2) != w)
    throw ShapeError("warp_trilinear: flow grid mismatch");
  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  Tensor out({c, d, h, w});
  for (int zd = 0; zd < d; ++zd) {
    for (int zy = 0; zy < h; ++zy) {
      for (int zx = 0; zx < w; ++zx) {
        size_t fi = (((size_t)zd * h + zy) * w + zx) * 3;
        double sd = zd + flow->value[fi + 0];
        double sy = zy + flow->value[fi + 1];
        double sx = zx + flow->value[fi + 2];
        int d0 = (int)std::floor(sd), y0 = (int)std::floor(sy), x0 = (int)std::floor(sx);
        double fd = sd - d0, fy = sy - y0, fx = sx - x0;
        int d0c = clampi(d0, 0, d - 1), d1c = clampi(d0 + 1, 0, d - 1);
        int y0c = clampi(y0, 0, h - 1), y1c = clampi(y0 + 1, 0, h - 1);
        int x0c = clampi(x0, 0, w - 1), x1c = clampi(x0 + 1, 0, w - 1);
        for (int ci = 0; ci < c; ++ci) {
          const double* vp = vol->value.data() + (size_t)ci * d * h * w;
          auto V = [&](int dz, int yz, int xz) {
            return vp[((size_t)dz * h + yz) * w + xz];
          };
          double v =
              (1 - fd) * ((1 - fy) * ((1 - fx) * V(d0c, y0c, x0c) + fx * V(d0c, y0c, x1c)) +
                          fy * ((1 - fx) * V(d0c, y1c, x0c) + fx * V(d0c, y1c, x1c))) +
              fd * ((1 - fy) * ((1 - fx) * V(d1c, y0c, x0c) + fx * V(d1c, y0c, x1c)) +
                    fy * ((1 - fx) * V(d1c, y1c, x0c) + fx * V(d1c, y1c, x1c)));
          out.data()[(((size_t)ci * d + zd) * h + zy) * w + zx] = v;
        }
      }
    }
  }
  return make_node(std::move(out), {vol, flow}, [c, d, h, w, clampi](Node& nd) {
    auto& vol = nd.parents[0];
    auto& flow = nd.parents[1];
    for (int zd = 0; zd < d; ++zd) {
      for (int zy = 0; zy < h; ++zy) {
        for (int zx = 0; zx < w; ++zx) {
          size_t fi = (((size_t)zd * h + zy) * w + zx) * 3;
          double sd = zd + flow->value[fi + 0];
          double sy = zy + flow->value[fi + 1];
          double sx = zx + flow->value[fi + 2];
          int d0 = (int)std::floor(sd), y0 = (int)std::floor(sy), x0 = (int)std::floor(sx);
          double fd = sd - d0, fy = sy - y0, fx = sx - x0;
          int d0c = clampi(d0, 0, d - 1), d1c = clampi(d0 + 1, 0, d - 1);
          int y0c = clampi(y0, 0, h - 1), y1c = clampi(y0 + 1, 0, h - 1);
          int x0c = clampi(x0, 0, w - 1), x1c = clampi(x0 + 1, 0, w - 1);
          // corner weights and their derivatives w.r.t. (fd,fy,fx)
          const int dz[2] = {d0c, d1c};
          const int yz[2] = {y0c, y1c};
          const int xz[2] = {x0c, x1c};
          const double wd_[2] = {1 - fd, fd};
          const double wy_[2] = {1 - fy, fy};
          const double wx_[2] = {1 - fx, fx};
          const double sd_[2] = {-1, 1};
          // clamp saturation kills the positional derivative on that axis
          bool live_d = d0 >= 0 && d0 + 1 <= d - 1;
          bool live_y = y0 >= 0 && y0 + 1 <= h - 1;
          bool live_x = x0 >= 0 && x0 + 1 <= w - 1;
          double gd = 0, gy = 0, gx = 0;
          for (int ci = 0; ci < c; ++ci) {
            double g = nd.grad.data()[(((size_t)ci * d + zd) * h + zy) * w + zx];
            if (g == 0.0) continue;
            const double* vp = vol->value.data() + (size_t)ci * d * h * w;
            double* vg = vol->requires_grad ? vol->grad.data() + (size_t)ci * d * h * w
                                            : nullptr;
            for (int a = 0; a < 2; ++a)
              for (int bq = 0; bq < 2; ++bq)
                for (int cq = 0; cq < 2; ++cq) {
                  size_t idx = ((size_t)dz[a] * h + yz[bq]) * w + xz[cq];
                  double wgt = wd_[a] * wy_[bq] * wx_[cq];
                  if (vg) vg[idx] += g * wgt;
                  if (flow->requires_grad) {
                    double v = vp[idx];
                    if (live_d) gd += g * v * sd_[a] * wy_[bq] * wx_[cq];
                    if (live_y) gy += g * v * wd_[a] * sd_[bq] * wx_[cq];
                    if (live_x) gx += g * v * wd_[a] * wy_[bq] * sd_[cq];
                  }
                }
          }
          if (flow->requires_grad) {
            flow->grad[fi + 0] += gd;
            flow->grad[fi + 1] += gy;
            flow->grad[fi + 2] += gx;
          }
        }
      }
    }
  });
}

// ---------------- image gradients ----------------

NodePtr diff_x(const NodePtr& a) {
  if (a->value.ndim() != 3) throw ShapeError("diff_x: need [c,h,w]");
  int c = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
  if (w < 2) throw ShapeError("diff_x: width < 2");
  Tensor out({c, h, w - 1});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w - 1; ++x)
        out.at3(ci, y, x) = a->value.at3(ci, y, x + 1) - a->value.at3(ci, y, x);
  return make_node(std::move(out), {a}, [c, h, w](Node& nd) {
    auto& a = nd.parents[0];
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w - 1; ++x) {
          double g = nd.grad.at3(ci, y, x);
          a->grad.at3(ci, y, x + 1) += g;
          a->grad.at3(ci, y, x) -= g;
        }
  });
}

NodePtr diff_y(const NodePtr& a) {
  if (a->value.ndim() != 3) throw ShapeError("diff_y: need [c,h,w]");
  int c = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
  if (h < 2) throw ShapeError("diff_y: height < 2");
  Tensor out({c, h - 1, w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h - 1; ++y)
      for (int x = 0; x < w; ++x)
        out.at3(ci, y, x) = a->value.at3(ci, y + 1, x) - a->value.at3(ci, y, x);
  return make_node(std::move(out), {a}, [c, h, w](Node& nd) {
    auto& a = nd.parents[0];
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h - 1; ++y)
        for (int x = 0; x < w; ++x) {
          double g = nd.grad.at3(ci, y, x);
          a->grad.at3(ci, y + 1, x) += g;
          a->grad.at3(ci, y, x) -= g;
        }
  });
}

// ---------------- losses ----------------

NodePtr l1_loss(const NodePtr& pred, const NodePtr& target) {
  check_same_shape(pred->value, target->value, "l1_loss");
  long long n = pred->value.numel();
  double s = 0;
  for (long long i = 0; i < n; ++i) s += std::fabs(pred->value[i] - target->value[i]);
  return make_node(Tensor::scalar(s / n), {pred, target}, [n](Node& nd) {
    auto& p = nd.parents[0];
    auto& t = nd.parents[1];
    double g = nd.grad[0] / n;
    for (long long i = 0; i < n; ++i) {
      double dv = p->value[i] - t->value[i];
      double sg = dv > 0 ? 1.0 : (dv < 0 ? -1.0 : 0.0);
      if (p->requires_grad) p->grad[i] += g * sg;
      if (t->requires_grad) t->grad[i] -= g * sg;
    }
  });
}

NodePtr mse_loss(const NodePtr& pred, const NodePtr& target) {
  check_same_shape(pred->value, target->value, "mse_loss");
  long long n = pred->value.numel();
  double s = 0;
  for (long long i = 0; i < n; ++i) {
    double dv = pred->value[i] - target->value[i];
    s += dv * dv;
  }
  return make_node(Tensor::scalar(s / n), {pred, target}, [n](Node& nd) {
    auto& p = nd.parents[0];
    auto& t = nd.parents[1];
    double g = 2.0 * nd.grad[0] / n;
    for (long long i = 0; i < n; ++i) {
      double dv = p->value[i] - t->value[i];
      if (p->requires_grad) p->grad[i] += g * dv;
      if (t->requires_grad) t->grad[i] -= g * dv;
    }
  });
}

}  // namespace dyadgen::ad
