// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "quadapter/error.hpp"

namespace quadapter {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return MapC(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
Map as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return Map(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Graph& graph_of(Var a) {
  require(a.graph != nullptr, ErrorKind::kContract, "unbound Var");
  return *a.graph;
}

void same_graph(Var a, Var b) {
  require(a.graph == b.graph && a.graph != nullptr, ErrorKind::kContract, "operands live in different graphs");
}

void require_matrix(const Tensor& t, const char* op) {
  require(t.rank() == 2, ErrorKind::kDimension, std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::kDimension,
          std::string(op) + " shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

template <typename F>
Var unary(const char* op, Var x, F&& f, BackwardFn backward) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return graph_of(x).record(op, std::move(out), {x.id}, std::move(backward));
}

}  // namespace

Var matmul(Var a, Var b) {
  same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  require(bv.shape()[0] == k, ErrorKind::kDimension,
          "matmul inner dimensions disagree: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor out({m, n});
  as_mat(out, m, n).noalias() = as_mat(av, m, k) * as_mat(bv, k, n);
  return graph_of(a).record("matmul", std::move(out), {a.id, b.id}, [m, k, n](const BackwardArgs& g) {
    auto go = as_mat(g.grad_out, m, n);
    if (g.grad_in[0]) as_mat(*g.grad_in[0], m, k).noalias() += go * as_mat(g.input(1), k, n).transpose();
    if (g.grad_in[1]) as_mat(*g.grad_in[1], k, n).noalias() += as_mat(g.input(0), m, k).transpose() * go;
  });
}

namespace {

Var linear_impl(Var x, Var weight, const Var* bias) {
  same_graph(x, weight);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_matrix(wv, "linear");
  const std::size_t out_f = wv.shape()[0], in_f = wv.shape()[1];
  require(xv.cols() == in_f, ErrorKind::kDimension,
          "linear input width " + std::to_string(xv.cols()) + " does not match weight " + shape_string(wv.shape()));
  const std::size_t n = xv.rows();
  Shape out_shape = xv.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  auto om = as_mat(out, n, out_f);
  om.noalias() = as_mat(xv, n, in_f) * as_mat(wv, out_f, in_f).transpose();
  std::vector<std::size_t> inputs{x.id, weight.id};
  if (bias) {
    same_graph(x, *bias);
    const Tensor& bv = bias->value();
    require(bv.size() == out_f, ErrorKind::kDimension, "linear bias length mismatch");
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.ptr(), static_cast<Eigen::Index>(out_f));
    inputs.push_back(bias->id);
  }
  return graph_of(x).record("linear", std::move(out), std::move(inputs), [n, in_f, out_f](const BackwardArgs& g) {
    auto go = as_mat(g.grad_out, n, out_f);
    if (g.grad_in[0]) as_mat(*g.grad_in[0], n, in_f).noalias() += go * as_mat(g.input(1), out_f, in_f);
    if (g.grad_in[1]) as_mat(*g.grad_in[1], out_f, in_f).noalias() += go.transpose() * as_mat(g.input(0), n, in_f);
    if (g.grad_in.size() > 2 && g.grad_in[2]) {
      Eigen::Map<Eigen::RowVectorXd>(g.grad_in[2]->ptr(), static_cast<Eigen::Index>(out_f)) += go.colwise().sum();
    }
  });
}

}  // namespace

Var linear(Var x, Var weight) { return linear_impl(x, weight, nullptr); }
Var linear(Var x, Var weight, Var bias) { return linear_impl(x, weight, &bias); }

Var add(Var a, Var b) {
  same_graph(a, b);
  same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return graph_of(a).record("add", std::move(out), {a.id, b.id}, [](const BackwardArgs& g) {
    accumulate(g.grad_in[0], g.grad_out);
    accumulate(g.grad_in[1], g.grad_out);
  });
}

Var sub(Var a, Var b) {
  same_graph(a, b);
  same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return graph_of(a).record("sub", std::move(out), {a.id, b.id}, [](const BackwardArgs& g) {
    accumulate(g.grad_in[0], g.grad_out);
    if (Tensor* d = g.grad_in[1]) {
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] -= g.grad_out[i];
    }
  });
}

Var mul(Var a, Var b) {
  same_graph(a, b);
  same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return graph_of(a).record("mul", std::move(out), {a.id, b.id}, [](const BackwardArgs& g) {
    const Tensor& av = g.input(0);
    const Tensor& bv = g.input(1);
    if (Tensor* d = g.grad_in[0]) {
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += g.grad_out[i] * bv[i];
    }
    if (Tensor* d = g.grad_in[1]) {
      for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += g.grad_out[i] * av[i];
    }
  });
}

Var scale(Var x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; }, [factor](const BackwardArgs& g) {
    Tensor* d = g.grad_in[0];
    for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += g.grad_out[i] * factor;
  });
}

Var reciprocal(Var x) {
  for (double v : x.value().data()) {
    require(v != 0.0, ErrorKind::kContract, "reciprocal of zero");
  }
  return unary("reciprocal", x, [](double v) { return 1.0 / v; }, [](const BackwardArgs& g) {
    Tensor* d = g.grad_in[0];
    for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] -= g.grad_out[i] * g.out[i] * g.out[i];
  });
}

Var add_rowvec(Var x, Var v) {
  same_graph(x, v);
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols(), rows = xv.rows();
  require(v.value().size() == cols, ErrorKind::kDimension, "add_rowvec length mismatch");
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += v.value()[c];
  }
  return graph_of(x).record("add_rowvec", std::move(out), {x.id, v.id}, [rows, cols](const BackwardArgs& g) {
    accumulate(g.grad_in[0], g.grad_out);
    if (Tensor* d = g.grad_in[1]) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) (*d)[c] += g.grad_out[r * cols + c];
      }
    }
  });
}

Var mul_rowvec(Var x, Var v) {
  same_graph(x, v);
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols(), rows = xv.rows();
  require(v.value().size() == cols, ErrorKind::kDimension, "mul_rowvec length mismatch");
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= v.value()[c];
  }
  return graph_of(x).record("mul_rowvec", std::move(out), {x.id, v.id}, [rows, cols](const BackwardArgs& g) {
    const Tensor& xv = g.input(0);
    const Tensor& vv = g.input(1);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double go = g.grad_out[r * cols + c];
        if (g.grad_in[0]) (*g.grad_in[0])[r * cols + c] += go * vv[c];
        if (g.grad_in[1]) (*g.grad_in[1])[c] += go * xv[r * cols + c];
      }
    }
  });
}

Var mul_colvec(Var x, Var v) {
  same_graph(x, v);
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols(), rows = xv.rows();
  require(v.value().size() == rows, ErrorKind::kDimension, "mul_colvec length mismatch");
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= v.value()[r];
  }
  return graph_of(x).record("mul_colvec", std::move(out), {x.id, v.id}, [rows, cols](const BackwardArgs& g) {
    const Tensor& xv = g.input(0);
    const Tensor& vv = g.input(1);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double go = g.grad_out[r * cols + c];
        if (g.grad_in[0]) (*g.grad_in[0])[r * cols + c] += go * vv[r];
        if (g.grad_in[1]) (*g.grad_in[1])[r] += go * xv[r * cols + c];
      }
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return graph_of(x).record("sum", Tensor::scalar(s), {x.id}, [](const BackwardArgs& g) {
    Tensor* d = g.grad_in[0];
    const double go = g.grad_out[0];
    for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += go;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mse(Var a, Var b) {
  same_graph(a, b);
  same_shape(a.value(), b.value(), "mse");
  const std::size_t n = a.value().size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return graph_of(a).record("mse", Tensor::scalar(s / static_cast<double>(n)), {a.id, b.id},
                            [n](const BackwardArgs& g) {
                              const double k = 2.0 * g.grad_out[0] / static_cast<double>(n);
                              const Tensor& av = g.input(0);
                              const Tensor& bv = g.input(1);
                              for (std::size_t i = 0; i < n; ++i) {
                                const double d = k * (av[i] - bv[i]);
                                if (g.grad_in[0]) (*g.grad_in[0])[i] += d;
                                if (g.grad_in[1]) (*g.grad_in[1])[i] -= d;
                              }
                            });
}

Var normalize(Var x, double eps) {
  require(eps >= 0.0, ErrorKind::kContract, "layer norm epsilon must be non-negative");
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  require(d > 0, ErrorKind::kDimension, "layer norm over an empty axis");
  Tensor out(xv.shape());
  // Per-row reciprocal standard deviation, recomputed in backward from out.
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.ptr() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (row[c] - mu) * inv;
  }
  return graph_of(x).record("normalize", std::move(out), {x.id}, [d, rows, inv_std](const BackwardArgs& g) {
    Tensor* dx = g.grad_in[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = g.grad_out.ptr() + r * d;
      const double* n = g.out.ptr() + r * d;
      double mg = 0.0, mgn = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        mg += go[c];
        mgn += go[c] * n[c];
      }
      mg /= static_cast<double>(d);
      mgn /= static_cast<double>(d);
      const double inv = (*inv_std)[r];
      for (std::size_t c = 0; c < d; ++c) (*dx)[r * d + c] += inv * (go[c] - mg - n[c] * mgn);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  return add_rowvec(mul_rowvec(normalize(x, eps), gamma), beta);
}

double PiecewiseLinear::operator()(double x) const {
  if (x > 0.0) return x;
  return kind == PiecewiseKind::kRelu ? 0.0 : slope * x;
}

Var piecewise_linear(Var x, PiecewiseLinear f) {
  return unary("piecewise_linear", x, f, [f](const BackwardArgs& g) {
    const Tensor& xv = g.input(0);
    Tensor* d = g.grad_in[0];
    const double neg = f.kind == PiecewiseKind::kRelu ? 0.0 : f.slope;
    for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += g.grad_out[i] * (xv[i] > 0.0 ? 1.0 : neg);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Var gelu(Var x) {
  return unary("gelu", x, gelu_value, [](const BackwardArgs& g) {
    const Tensor& xv = g.input(0);
    Tensor* d = g.grad_in[0];
    for (std::size_t i = 0; i < d->size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      (*d)[i] += g.grad_out[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "softmax_cross_entropy");
  const std::size_t n = lv.shape()[0], vocab = lv.shape()[1];
  require(targets.size() == n, ErrorKind::kDimension, "one target per logit row required");
  auto probs = std::make_shared<Tensor>(lv.shape());
  std::vector<int> tgt(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    require(tgt[r] >= 0 && static_cast<std::size_t>(tgt[r]) < vocab, ErrorKind::kIndex,
            "target " + std::to_string(tgt[r]) + " outside vocabulary of " + std::to_string(vocab));
    const double* row = lv.ptr() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const double e = std::exp(row[c] - mx);
      (*probs)[r * vocab + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < vocab; ++c) (*probs)[r * vocab + c] /= z;
    total += (std::log(z) + mx) - row[tgt[r]];
  }
  return graph_of(logits).record(
      "softmax_cross_entropy", Tensor::scalar(total / static_cast<double>(n)), {logits.id},
      [probs, tgt = std::move(tgt), n, vocab](const BackwardArgs& g) {
        Tensor* d = g.grad_in[0];
        const double k = g.grad_out[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < vocab; ++c) {
            const double onehot = static_cast<std::size_t>(tgt[r]) == c ? 1.0 : 0.0;
            (*d)[r * vocab + c] += k * ((*probs)[r * vocab + c] - onehot);
          }
        }
      });
}

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "embedding");
  const std::size_t rows = tv.shape()[0], d = tv.shape()[1];
  std::vector<int> idx(ids.begin(), ids.end());
  require(!idx.empty(), ErrorKind::kDimension, "embedding of an empty id list");
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < rows, ErrorKind::kIndex,
            "embedding id " + std::to_string(idx[i]) + " outside table of " + std::to_string(rows));
    std::copy_n(tv.ptr() + idx[i] * d, d, out.ptr() + i * d);
  }
  return graph_of(table).record("embedding", std::move(out), {table.id}, [idx = std::move(idx), d](const BackwardArgs& g) {
    Tensor* dt = g.grad_in[0];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < d; ++c) (*dt)[idx[i] * d + c] += g.grad_out[i * d + c];
    }
  });
}

namespace {

struct AttnDims {
  std::size_t b, t, h, d, dh;
};

AttnDims attn_dims(const Tensor& qkv, AttentionShape s) {
  require_matrix(qkv, "attention");
  require(s.batch > 0 && s.seq > 0 && s.heads > 0, ErrorKind::kDimension, "attention extents must be positive");
  require(qkv.shape()[0] == s.batch * s.seq, ErrorKind::kDimension, "qkv rows must equal batch*seq");
  require(qkv.shape()[1] % (3 * s.heads) == 0, ErrorKind::kDimension, "qkv width must be 3*heads*head_dim");
  const std::size_t d = qkv.shape()[1] / 3;
  return {s.batch, s.seq, s.heads, d, d / s.heads};
}

}  // namespace

Var attention_scores(Var qkv, AttentionShape s) {
  const Tensor& x = qkv.value();
  const AttnDims a = attn_dims(x, s);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(a.dh));
  const std::size_t w = 3 * a.d;
  Tensor out({a.b * a.h * a.t, a.t});
  for (std::size_t b = 0; b < a.b; ++b) {
    for (std::size_t h = 0; h < a.h; ++h) {
      for (std::size_t t = 0; t < a.t; ++t) {
        const double* q = x.ptr() + (b * a.t + t) * w + h * a.dh;
        double* row = out.ptr() + ((b * a.h + h) * a.t + t) * a.t;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* k = x.ptr() + (b * a.t + j) * w + a.d + h * a.dh;
          double dot = 0.0;
          for (std::size_t e = 0; e < a.dh; ++e) dot += q[e] * k[e];
          row[j] = dot * inv_sqrt;
        }
      }
    }
  }
  return graph_of(qkv).record("attention_scores", std::move(out), {qkv.id}, [a, inv_sqrt, w](const BackwardArgs& g) {
    const Tensor& x = g.input(0);
    Tensor* dx = g.grad_in[0];
    for (std::size_t b = 0; b < a.b; ++b) {
      for (std::size_t h = 0; h < a.h; ++h) {
        for (std::size_t t = 0; t < a.t; ++t) {
          const double* go = g.grad_out.ptr() + ((b * a.h + h) * a.t + t) * a.t;
          const double* q = x.ptr() + (b * a.t + t) * w + h * a.dh;
          double* dq = dx->ptr() + (b * a.t + t) * w + h * a.dh;
          for (std::size_t j = 0; j <= t; ++j) {
            const double gs = go[j] * inv_sqrt;
            if (gs == 0.0) continue;
            const double* k = x.ptr() + (b * a.t + j) * w + a.d + h * a.dh;
            double* dk = dx->ptr() + (b * a.t + j) * w + a.d + h * a.dh;
            for (std::size_t e = 0; e < a.dh; ++e) {
              dq[e] += gs * k[e];
              dk[e] += gs * q[e];
            }
          }
        }
      }
    }
  });
}

Var causal_softmax(Var scores, std::size_t seq) {
  const Tensor& sv = scores.value();
  require_matrix(sv, "causal_softmax");
  require(sv.shape()[1] == seq && sv.shape()[0] % seq == 0, ErrorKind::kDimension,
          "causal_softmax expects [k*seq x seq] scores");
  const std::size_t rows = sv.shape()[0];
  Tensor out(sv.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = r % seq;
    const double* row = sv.ptr() + r * seq;
    double* p = out.ptr() + r * seq;
    const double mx = *std::max_element(row, row + t + 1);
    double z = 0.0;
    for (std::size_t j = 0; j <= t; ++j) {
      p[j] = std::exp(row[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j <= t; ++j) p[j] /= z;
  }
  return graph_of(scores).record("causal_softmax", std::move(out), {scores.id}, [rows, seq](const BackwardArgs& g) {
    Tensor* d = g.grad_in[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t t = r % seq;
      const double* p = g.out.ptr() + r * seq;
      const double* go = g.grad_out.ptr() + r * seq;
      double dot = 0.0;
      for (std::size_t j = 0; j <= t; ++j) dot += go[j] * p[j];
      for (std::size_t j = 0; j <= t; ++j) (*d)[r * seq + j] += p[j] * (go[j] - dot);
    }
  });
}

Var attention_context(Var probs, Var qkv, AttentionShape s) {
  same_graph(probs, qkv);
  const Tensor& pv = probs.value();
  const Tensor& x = qkv.value();
  const AttnDims a = attn_dims(x, s);
  require(pv.rank() == 2 && pv.shape()[0] == a.b * a.h * a.t && pv.shape()[1] == a.t, ErrorKind::kDimension,
          "attention probabilities have the wrong shape");
  const std::size_t w = 3 * a.d;
  Tensor out({a.b * a.t, a.d}, 0.0);
  for (std::size_t b = 0; b < a.b; ++b) {
    for (std::size_t h = 0; h < a.h; ++h) {
      for (std::size_t t = 0; t < a.t; ++t) {
        const double* p = pv.ptr() + ((b * a.h + h) * a.t + t) * a.t;
        double* c = out.ptr() + (b * a.t + t) * a.d + h * a.dh;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* v = x.ptr() + (b * a.t + j) * w + 2 * a.d + h * a.dh;
          for (std::size_t e = 0; e < a.dh; ++e) c[e] += p[j] * v[e];
        }
      }
    }
  }
  return graph_of(qkv).record("attention_context", std::move(out), {probs.id, qkv.id}, [a, w](const BackwardArgs& g) {
    const Tensor& pv = g.input(0);
    const Tensor& x = g.input(1);
    Tensor* dp = g.grad_in[0];
    Tensor* dx = g.grad_in[1];
    for (std::size_t b = 0; b < a.b; ++b) {
      for (std::size_t h = 0; h < a.h; ++h) {
        for (std::size_t t = 0; t < a.t; ++t) {
          const std::size_t prow = ((b * a.h + h) * a.t + t) * a.t;
          const double* go = g.grad_out.ptr() + (b * a.t + t) * a.d + h * a.dh;
          for (std::size_t j = 0; j <= t; ++j) {
            const std::size_t vrow = (b * a.t + j) * w + 2 * a.d + h * a.dh;
            if (dp) {
              double dot = 0.0;
              for (std::size_t e = 0; e < a.dh; ++e) dot += go[e] * x[vrow + e];
              (*dp)[prow + j] += dot;
            }
            if (dx) {
              const double pj = pv[prow + j];
              for (std::size_t e = 0; e < a.dh; ++e) (*dx)[vrow + e] += pj * go[e];
            }
          }
        }
      }
    }
  });
}

}  // namespace quadapter
