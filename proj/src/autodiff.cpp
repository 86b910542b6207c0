#include "ambient/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "ambient/errors.hpp"

namespace ambient {

const Tensor& Var::value() const { return graph->value(id); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(std::string name, Tensor value) {
  Var v = constant(std::move(value));
  parameters_.emplace_back(std::move(name), v.id);
  return v;
}

Var Graph::record(Tensor value, BackwardFn backward, const char* op_name) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from op '") + op_name + "'");
  }
  Node node{std::move(value), {}, false, {}};
  if (tracing_) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

GradientMap Graph::backward(Var loss) {
  if (!tracing_) throw Error("backward() on a graph built without tracing");
  if (consumed_) throw Error("backward() already called on this graph; re-trace the forward pass");
  if (loss.graph != this) throw Error("backward() loss belongs to a different graph");
  if (value(loss.id).size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(value(loss.id).shape()));
  }
  consumed_ = true;
  grad(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    // The callback may touch other nodes' buffers but never this node's.
    const Tensor out_grad = n.grad;
    n.backward(*this, out_grad);
  }
  GradientMap result;
  for (const auto& [name, id] : parameters_) {
    const Node& n = nodes_[id];
    result[name] = n.has_grad ? n.grad : Tensor::zeros(n.value.shape());
  }
  return result;
}

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(t.shape()));
  }
}

void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw Error("operands live on different graphs");
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// C[n x m] += A[n x k] * B[k x m]. Every element accumulates in ascending p,
// four terms per pass over the output row.
void gemm_acc(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* __restrict crow = c + i * m;
    const double* arow = a + i * k;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const double a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
      const double* __restrict b0 = b + p * m;
      const double* __restrict b1 = b0 + m;
      const double* __restrict b2 = b1 + m;
      const double* __restrict b3 = b2 + m;
      for (std::size_t j = 0; j < m; ++j) crow[j] = (((crow[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[n x k] += A[n x m] * B[k x m]^T, via a transposed copy of B.
void gemm_nt_acc(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t n, std::size_t m, std::size_t k) {
  std::vector<double> bt(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b[p * m + j];
  std::vector<double> row(k);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    gemm_acc(a + i * m, bt.data(), row.data(), 1, m, k);
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) crow[p] += row[p];
  }
}

// C[k x m] += A[n x k]^T * B[n x m]. Every element accumulates in ascending i.
void gemm_tn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t n, std::size_t k, std::size_t m) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    const double* __restrict b0 = b + i * m;
    const double* __restrict b1 = b0 + m;
    const double* __restrict b2 = b1 + m;
    const double* __restrict b3 = b2 + m;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      double* __restrict crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] = (((crow[j] + x0 * b0[j]) + x1 * b1[j]) + x2 * b2[j]) + x3 * b3[j];
    }
  }
  for (; i < n; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor c = Tensor::zeros({a.rows(), b.cols()});
  gemm_acc(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
  return c;
}

std::vector<double> per_row_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows(), k = logits.cols();
  if (labels.size() != n) throw ShapeError("cross_entropy: label count does not match batch");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw Error("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0, " +
                  std::to_string(k) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(logits.at(i, j) - mx);
    out[i] = mx + std::log(s) - logits.at(i, static_cast<std::size_t>(labels[i]));
  }
  return out;
}

namespace ops {

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  Graph& g = *a.graph;
  Tensor out = matmul_values(a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return g.record(std::move(out), [ia, ib](Graph& g, const Tensor& dc) {
    const Tensor& av = g.value(ia);
    const Tensor& bv = g.value(ib);
    const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
    gemm_nt_acc(dc.data().data(), bv.data().data(), g.grad(ia).data().data(), n, m, k);
    gemm_tn_acc(av.data().data(), dc.data().data(), g.grad(ib).data().data(), n, k, m);
  }, "matmul");
}

Var add(Var a, Var b) {
  require_same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw ShapeError("add: shape mismatch " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->record(std::move(out), [ia, ib](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i];
    Tensor& gb = g.grad(ib);
    for (std::size_t i = 0; i < dy.size(); ++i) gb[i] += dy[i];
  }, "add");
}

Var add_bias(Var x, Var bias) {
  require_same_graph(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_rank2(xv, "add_bias");
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(bv.shape()) + " does not fit " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.rows(), m = xv.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) += bv[j];
  const std::size_t ix = x.id, ib = bias.id;
  return x.graph->record(std::move(out), [ix, ib, n, m](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i];
    Tensor& gb = g.grad(ib);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) gb[j] += dy.at(i, j);
  }, "add_bias");
}

Var add_positional(Var x, Var table, std::size_t frames) {
  require_same_graph(x, table);
  const Tensor& xv = x.value();
  const Tensor& tv = table.value();
  require_rank2(xv, "add_positional");
  require_rank2(tv, "add_positional");
  if (frames == 0 || xv.rows() % frames != 0 || tv.rows() != frames || tv.cols() != xv.cols()) {
    throw ShapeError("add_positional: table " + shape_string(tv.shape()) + " does not fit " +
                     shape_string(xv.shape()) + " with " + std::to_string(frames) + " frames");
  }
  Tensor out = xv;
  const std::size_t rows = xv.rows(), c = xv.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out.at(r, j) += tv.at(r % frames, j);
  const std::size_t ix = x.id, it = table.id;
  return x.graph->record(std::move(out), [ix, it, rows, c, frames](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i];
    Tensor& gt = g.grad(it);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gt.at(r % frames, j) += dy.at(r, j);
  }, "add_positional");
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t ix = x.id;
  return x.graph->record(std::move(out), [ix, factor](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += factor * dy[i];
  }, "scale");
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = sigmoid_scalar(v);
  const std::size_t ix = x.id;
  auto saved = std::make_shared<Tensor>(out);
  return x.graph->record(std::move(out), [ix, saved](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const double s = (*saved)[i];
      gx[i] += dy[i] * s * (1.0 - s);
    }
  }, "sigmoid");
}

Var swish(Var x) {
  const Tensor& xv = x.value();
  Tensor out = xv;
  auto sig = std::make_shared<std::vector<double>>(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*sig)[i] = sigmoid_scalar(xv[i]);
    out[i] = xv[i] * (*sig)[i];
  }
  const std::size_t ix = x.id;
  return x.graph->record(std::move(out), [ix, sig](Graph& g, const Tensor& dy) {
    const Tensor& xv = g.value(ix);
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const double s = (*sig)[i];
      gx[i] += dy[i] * (s + xv[i] * s * (1.0 - s));
    }
  }, "swish");
}

Var glu(Var x) {
  const Tensor& xv = x.value();
  require_rank2(xv, "glu");
  if (xv.cols() % 2 != 0) throw ShapeError("glu: odd channel count " + shape_string(xv.shape()));
  const std::size_t n = xv.rows(), c = xv.cols() / 2;
  Tensor out = Tensor::zeros({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = xv.at(i, j) * sigmoid_scalar(xv.at(i, c + j));
  const std::size_t ix = x.id;
  return x.graph->record(std::move(out), [ix, n, c](Graph& g, const Tensor& dy) {
    const Tensor& xv = g.value(ix);
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double a = xv.at(i, j);
        const double s = sigmoid_scalar(xv.at(i, c + j));
        gx.at(i, j) += dy.at(i, j) * s;
        gx.at(i, c + j) += dy.at(i, j) * a * s * (1.0 - s);
      }
    }
  }, "glu");
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id;
  return x.graph->record(Tensor::scalar(s), [ix](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    const double d = dy[0];
    for (double& v : gx.data()) v += d;
  }, "sum");
}

Var weighted_sum(Var x, const Tensor& weights) {
  const Tensor& xv = x.value();
  if (weights.shape() != xv.shape()) {
    throw ShapeError("weighted_sum: weights " + shape_string(weights.shape()) + " do not match " +
                     shape_string(xv.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  const std::size_t ix = x.id;
  return x.graph->record(Tensor::scalar(s), [ix, weights](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dy[0] * weights[i];
  }, "weighted_sum");
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  require_rank2(xv, "softmax");
  if (axis > 1) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for a 2-D tensor");
  const std::size_t n = xv.rows(), m = xv.cols();
  // Lines are rows for axis 1 and columns for axis 0.
  const std::size_t lines = axis == 1 ? n : m;
  const std::size_t len = axis == 1 ? m : n;
  const std::size_t line_stride = axis == 1 ? m : 1;
  const std::size_t elem_stride = axis == 1 ? 1 : m;
  Tensor out = Tensor::zeros(xv.shape());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < len; ++e) mx = std::max(mx, xv[base + e * elem_stride]);
    double s = 0.0;
    for (std::size_t e = 0; e < len; ++e) {
      const double v = std::exp(xv[base + e * elem_stride] - mx);
      out[base + e * elem_stride] = v;
      s += v;
    }
    for (std::size_t e = 0; e < len; ++e) out[base + e * elem_stride] /= s;
  }
  auto saved = std::make_shared<Tensor>(out);
  const std::size_t ix = x.id;
  return x.graph->record(std::move(out),
                         [ix, saved, lines, len, line_stride, elem_stride](Graph& g, const Tensor& dy) {
    const Tensor& y = *saved;
    Tensor& gx = g.grad(ix);
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = l * line_stride;
      double dot = 0.0;
      for (std::size_t e = 0; e < len; ++e) {
        const std::size_t k = base + e * elem_stride;
        dot += dy[k] * y[k];
      }
      for (std::size_t e = 0; e < len; ++e) {
        const std::size_t k = base + e * elem_stride;
        gx[k] += y[k] * (dy[k] - dot);
      }
    }
  }, "softmax");
}

Var group_norm(Var x, std::size_t groups, Var gamma, Var beta, double eps) {
  require_same_graph(x, gamma);
  require_same_graph(x, beta);
  const Tensor& xv = x.value();
  require_rank2(xv, "group_norm");
  const std::size_t n = xv.rows(), c = xv.cols();
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
    throw ShapeError("group_norm: affine parameters must have shape [" + std::to_string(c) + "]");
  }
  const std::size_t gs = c / groups;
  auto xhat = std::make_shared<Tensor>(Tensor::zeros({n, c}));
  auto inv_std = std::make_shared<std::vector<double>>(n * groups);
  Tensor out = Tensor::zeros({n, c});
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t grp = 0; grp < groups; ++grp) {
      const std::size_t c0 = grp * gs;
      double mean = 0.0;
      for (std::size_t j = 0; j < gs; ++j) mean += xv.at(i, c0 + j);
      mean /= static_cast<double>(gs);
      double var = 0.0;
      for (std::size_t j = 0; j < gs; ++j) {
        const double d = xv.at(i, c0 + j) - mean;
        var += d * d;
      }
      var /= static_cast<double>(gs);
      const double inv = 1.0 / std::sqrt(var + eps);
      (*inv_std)[i * groups + grp] = inv;
      for (std::size_t j = 0; j < gs; ++j) {
        const std::size_t ch = c0 + j;
        const double h = (xv.at(i, ch) - mean) * inv;
        xhat->at(i, ch) = h;
        out.at(i, ch) = h * gv[ch] + bv[ch];
      }
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.graph->record(std::move(out), [=](Graph& g, const Tensor& dy) {
    const Tensor& gv = g.value(ig);
    Tensor& gx = g.grad(ix);
    Tensor& gg = g.grad(ig);
    Tensor& gb = g.grad(ib);
    std::vector<double> dh(gs);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t grp = 0; grp < groups; ++grp) {
        const std::size_t c0 = grp * gs;
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t j = 0; j < gs; ++j) {
          const std::size_t ch = c0 + j;
          const double d = dy.at(i, ch);
          const double h = xhat->at(i, ch);
          gg[ch] += d * h;
          gb[ch] += d;
          dh[j] = d * gv[ch];
          mean_dh += dh[j];
          mean_dh_h += dh[j] * h;
        }
        mean_dh /= static_cast<double>(gs);
        mean_dh_h /= static_cast<double>(gs);
        const double inv = (*inv_std)[i * groups + grp];
        for (std::size_t j = 0; j < gs; ++j) {
          const std::size_t ch = c0 + j;
          gx.at(i, ch) += inv * (dh[j] - mean_dh - xhat->at(i, ch) * mean_dh_h);
        }
      }
    }
  }, "group_norm");
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) { return group_norm(x, 1, gamma, beta, eps); }

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, NormMode mode, double momentum, double eps) {
  require_same_graph(x, gamma);
  require_same_graph(x, beta);
  const Tensor& xv = x.value();
  require_rank2(xv, "batch_norm");
  const std::size_t n = xv.rows(), c = xv.cols();
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c} ||
      stats.mean.shape() != Shape{c} || stats.var.shape() != Shape{c}) {
    throw ShapeError("batch_norm: parameters and statistics must have shape [" + std::to_string(c) + "]");
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out = Tensor::zeros({n, c});
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;

  if (mode == NormMode::eval) {
    std::vector<double> inv(c);
    for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(stats.var[j] + eps);
    auto saved_mean = std::make_shared<Tensor>(stats.mean);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) = (xv.at(i, j) - stats.mean[j]) * inv[j] * gv[j] + bv[j];
    return x.graph->record(std::move(out), [=](Graph& g, const Tensor& dy) {
      const Tensor& xv = g.value(ix);
      const Tensor& gv = g.value(ig);
      Tensor& gx = g.grad(ix);
      Tensor& gg = g.grad(ig);
      Tensor& gb = g.grad(ib);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double d = dy.at(i, j);
          gx.at(i, j) += d * gv[j] * inv[j];
          gg[j] += d * (xv.at(i, j) - (*saved_mean)[j]) * inv[j];
          gb[j] += d;
        }
      }
    }, "batch_norm");
  }

  if (n < 2) throw ShapeError("batch_norm: train mode needs a batch of at least 2 rows");
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += xv.at(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv.at(i, j) - mean[j];
      var[j] += d * d;
    }
  for (double& v : var) v /= static_cast<double>(n);
  std::vector<double> inv(c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + eps);
  auto xhat = std::make_shared<Tensor>(Tensor::zeros({n, c}));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xv.at(i, j) - mean[j]) * inv[j];
      xhat->at(i, j) = h;
      out.at(i, j) = h * gv[j] + bv[j];
    }
  for (std::size_t j = 0; j < c; ++j) {
    stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mean[j];
    stats.var[j] = (1.0 - momentum) * stats.var[j] + momentum * var[j];
  }
  return x.graph->record(std::move(out), [=](Graph& g, const Tensor& dy) {
    const Tensor& gv = g.value(ig);
    Tensor& gx = g.grad(ix);
    Tensor& gg = g.grad(ig);
    Tensor& gb = g.grad(ib);
    std::vector<double> mean_dh(c, 0.0), mean_dh_h(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = dy.at(i, j);
        const double h = xhat->at(i, j);
        gg[j] += d * h;
        gb[j] += d;
        const double dh = d * gv[j];
        mean_dh[j] += dh;
        mean_dh_h[j] += dh * h;
      }
    for (std::size_t j = 0; j < c; ++j) {
      mean_dh[j] /= static_cast<double>(n);
      mean_dh_h[j] /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double dh = dy.at(i, j) * gv[j];
        gx.at(i, j) += inv[j] * (dh - mean_dh[j] - xhat->at(i, j) * mean_dh_h[j]);
      }
  }, "batch_norm");
}

Var conv1d_depthwise(Var x, Var kernel, std::size_t frames) {
  require_same_graph(x, kernel);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  require_rank2(xv, "conv1d_depthwise");
  require_rank2(kv, "conv1d_depthwise");
  const std::size_t rows = xv.rows(), c = xv.cols(), k = kv.rows();
  if (k % 2 == 0) throw ShapeError("conv1d_depthwise: kernel size " + std::to_string(k) + " must be odd");
  if (kv.cols() != c) {
    throw ShapeError("conv1d_depthwise: kernel " + shape_string(kv.shape()) + " does not match input " +
                     shape_string(xv.shape()));
  }
  if (frames == 0 || rows % frames != 0) {
    throw ShapeError("conv1d_depthwise: " + std::to_string(rows) + " rows are not a multiple of " +
                     std::to_string(frames) + " frames");
  }
  const std::size_t batch = rows / frames;
  const long pad = static_cast<long>(k / 2);
  const long t_len = static_cast<long>(frames);
  Tensor out = Tensor::zeros({rows, c});
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * frames;
    for (long t = 0; t < t_len; ++t) {
      double* orow = out.ptr(base + static_cast<std::size_t>(t), 0);
      for (std::size_t tap = 0; tap < k; ++tap) {
        const long src = t + static_cast<long>(tap) - pad;
        if (src < 0 || src >= t_len) continue;
        const double* xrow = xv.ptr(base + static_cast<std::size_t>(src), 0);
        const double* krow = kv.ptr(tap, 0);
        for (std::size_t ch = 0; ch < c; ++ch) orow[ch] += krow[ch] * xrow[ch];
      }
    }
  }
  const std::size_t ix = x.id, ik = kernel.id;
  return x.graph->record(std::move(out), [=](Graph& g, const Tensor& dy) {
    const Tensor& xv = g.value(ix);
    const Tensor& kv = g.value(ik);
    Tensor& gx = g.grad(ix);
    Tensor& gk = g.grad(ik);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = b * frames;
      for (long t = 0; t < t_len; ++t) {
        const double* drow = dy.ptr(base + static_cast<std::size_t>(t), 0);
        for (std::size_t tap = 0; tap < k; ++tap) {
          const long src = t + static_cast<long>(tap) - pad;
          if (src < 0 || src >= t_len) continue;
          const std::size_t srow = base + static_cast<std::size_t>(src);
          const double* xrow = xv.ptr(srow, 0);
          const double* krow = kv.ptr(tap, 0);
          double* gxrow = gx.ptr(srow, 0);
          double* gkrow = gk.ptr(tap, 0);
          for (std::size_t ch = 0; ch < c; ++ch) {
            gxrow[ch] += drow[ch] * krow[ch];
            gkrow[ch] += drow[ch] * xrow[ch];
          }
        }
      }
    }
  }, "conv1d_depthwise");
}

Var conv1d_depthwise(Var x, Var kernel) { return conv1d_depthwise(x, kernel, x.value().rank() == 2 ? x.value().rows() : 0); }

Var attention(Var q, Var k, Var v, std::size_t frames, std::size_t heads) {
  require_same_graph(q, k);
  require_same_graph(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_rank2(qv, "attention");
  if (kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
    throw ShapeError("attention: q/k/v shapes differ: " + shape_string(qv.shape()) + ", " +
                     shape_string(kv.shape()) + ", " + shape_string(vv.shape()));
  }
  const std::size_t rows = qv.rows(), width = qv.cols();
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (frames == 0 || rows % frames != 0) {
    throw ShapeError("attention: " + std::to_string(rows) + " rows are not a multiple of " +
                     std::to_string(frames) + " frames");
  }
  const std::size_t batch = rows / frames, dh = width / heads, t_len = frames;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[b][h] is a T x T block.
  auto probs = std::make_shared<std::vector<double>>(batch * heads * t_len * t_len);
  Tensor out = Tensor::zeros({rows, width});
  std::vector<double> srow(t_len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + (b * heads + h) * t_len * t_len;
      const std::size_t c0 = h * dh;
      for (std::size_t t = 0; t < t_len; ++t) {
        const double* qrow = qv.ptr(b * t_len + t, c0);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < t_len; ++s) {
          const double* krow = kv.ptr(b * t_len + s, c0);
          double dot = 0.0;
          for (std::size_t d = 0; d < dh; ++d) dot += qrow[d] * krow[d];
          srow[s] = dot * sc;
          mx = std::max(mx, srow[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < t_len; ++s) {
          srow[s] = std::exp(srow[s] - mx);
          z += srow[s];
        }
        double* orow = out.ptr(b * t_len + t, c0);
        for (std::size_t s = 0; s < t_len; ++s) {
          const double pw = srow[s] / z;
          p[t * t_len + s] = pw;
          const double* vrow = vv.ptr(b * t_len + s, c0);
          for (std::size_t d = 0; d < dh; ++d) orow[d] += pw * vrow[d];
        }
      }
    }
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.graph->record(std::move(out), [=](Graph& g, const Tensor& dout) {
    const Tensor& qv = g.value(iq);
    const Tensor& kv = g.value(ik);
    const Tensor& vv = g.value(iv);
    Tensor& gq = g.grad(iq);
    Tensor& gk = g.grad(ik);
    Tensor& gv = g.grad(iv);
    std::vector<double> dp(t_len);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs->data() + (b * heads + h) * t_len * t_len;
        const std::size_t c0 = h * dh;
        for (std::size_t t = 0; t < t_len; ++t) {
          const double* dorow = dout.ptr(b * t_len + t, c0);
          double dot = 0.0;
          for (std::size_t s = 0; s < t_len; ++s) {
            const double* vrow = vv.ptr(b * t_len + s, c0);
            double* gvrow = gv.ptr(b * t_len + s, c0);
            const double pw = p[t * t_len + s];
            double acc = 0.0;
            for (std::size_t d = 0; d < dh; ++d) {
              acc += dorow[d] * vrow[d];
              gvrow[d] += pw * dorow[d];
            }
            dp[s] = acc;
            dot += acc * pw;
          }
          const double* qrow = qv.ptr(b * t_len + t, c0);
          double* gqrow = gq.ptr(b * t_len + t, c0);
          for (std::size_t s = 0; s < t_len; ++s) {
            const double ds = p[t * t_len + s] * (dp[s] - dot) * sc;
            const double* krow = kv.ptr(b * t_len + s, c0);
            double* gkrow = gk.ptr(b * t_len + s, c0);
            for (std::size_t d = 0; d < dh; ++d) {
              gqrow[d] += ds * krow[d];
              gkrow[d] += ds * qrow[d];
            }
          }
        }
      }
    }
  }, "attention");
}

Var mean_pool(Var x, std::size_t frames) {
  const Tensor& xv = x.value();
  require_rank2(xv, "mean_pool");
  const std::size_t rows = xv.rows(), c = xv.cols();
  if (frames == 0 || rows % frames != 0) {
    throw ShapeError("mean_pool: " + std::to_string(rows) + " rows are not a multiple of " +
                     std::to_string(frames) + " frames");
  }
  const std::size_t batch = rows / frames;
  const double inv = 1.0 / static_cast<double>(frames);
  Tensor out = Tensor::zeros({batch, c});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out.at(r / frames, j) += xv.at(r, j);
  for (double& v : out.data()) v *= inv;
  const std::size_t ix = x.id;
  return x.graph->record(std::move(out), [ix, rows, c, frames, inv](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gx.at(r, j) += dy.at(r / frames, j) * inv;
  }, "mean_pool");
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  const std::vector<double> per_row = per_row_cross_entropy(lv, labels);
  const std::size_t n = lv.rows(), k = lv.cols();
  double total = 0.0;
  for (double v : per_row) total += v;
  std::vector<int> saved_labels(labels.begin(), labels.end());
  const std::size_t il = logits.id;
  return logits.graph->record(Tensor::scalar(total / static_cast<double>(n)),
                              [il, n, k, saved_labels](Graph& g, const Tensor& dy) {
    const Tensor& lv = g.value(il);
    Tensor& gl = g.grad(il);
    const double d = dy[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, lv.at(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < k; ++j) z += std::exp(lv.at(i, j) - mx);
      for (std::size_t j = 0; j < k; ++j) {
        const double pj = std::exp(lv.at(i, j) - mx) / z;
        const double target = static_cast<int>(j) == saved_labels[i] ? 1.0 : 0.0;
        gl.at(i, j) += d * (pj - target);
      }
    }
  }, "cross_entropy");
}

}  // namespace ops
}  // namespace ambient
