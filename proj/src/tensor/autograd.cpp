#include "saga/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace saga {

const Tensor& Var::value() const { return graph->value(*this); }
bool Var::requires_grad() const { return graph->requires_grad(*this); }

Var Graph::leaf(const Tensor& t) {
  if (auto it = leaf_index_.find(&t); it != leaf_index_.end()) return Var{this, it->second};
  Node n;
  n.external = &t;
  n.requires_grad = recording_ && t.requires_grad();
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  leaf_index_.emplace(&t, id);
  return Var{this, id};
}

Var Graph::input(Tensor t, bool requires_grad) {
  Node n;
  n.owned = std::move(t);
  n.requires_grad = recording_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  bool needs = false;
  if (recording_) {
    for (const auto& v : inputs) {
      if (v.graph != this) throw GraphError("graph: operand belongs to another graph");
      needs = needs || nodes_[v.id].requires_grad;
    }
  }
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.owned;
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.grad) n.grad.emplace(value(v).shape(), 0.0);
  return *n.grad;
}

void Graph::accumulate(Var v, const Tensor& g) {
  if (!requires_grad(v)) return;
  Tensor& buf = grad_buffer(v);
  if (buf.size() != g.size()) {
    throw DimensionError("graph: gradient shape " + shape_to_string(g.shape()) +
                         " does not match value " + shape_to_string(buf.shape()));
  }
  auto b = buf.data();
  auto s = g.data();
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += s[i];
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw GraphError("backward: loss must be a scalar, got shape " +
                     shape_to_string(value(loss).shape()));
  }
  backward(loss, Tensor(value(loss).shape(), 1.0));
}

void Graph::backward(Var output, const Tensor& seed) {
  if (backward_done_) throw GraphError("backward: called twice without reset_gradients()");
  if (!requires_grad(output)) {
    throw GraphError("backward: output is detached (no path to a parameter requiring grad)");
  }
  if (seed.size() != value(output).size()) {
    throw DimensionError("backward: seed shape " + shape_to_string(seed.shape()) +
                         " does not match output " + shape_to_string(value(output).shape()));
  }
  grad_buffer(output);
  accumulate(output, seed);
  run_backward(output.id);
  backward_done_ = true;
}

void Graph::run_backward(std::uint32_t start) {
  for (std::int64_t i = start; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.grad || !n.backward) continue;
    // The closure only touches nodes with smaller ids, so `g` stays valid.
    const Tensor& g = *n.grad;
    n.backward(*this, Var{this, static_cast<std::uint32_t>(i)}, g);
  }
}

const Tensor& Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.grad) throw GraphError("graph: node has no gradient");
  return *n.grad;
}

const Tensor* Graph::grad_of(const Tensor& leaf_tensor) const {
  auto it = leaf_index_.find(&leaf_tensor);
  if (it == leaf_index_.end()) return nullptr;
  const Node& n = nodes_[it->second];
  return n.grad ? &*n.grad : nullptr;
}

void Graph::reset_gradients() {
  for (auto& n : nodes_) n.grad.reset();
  backward_done_ = false;
}

namespace ops {

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

std::string shapes(const char* op, const Tensor& a, const Tensor& b) {
  return std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
         shape_to_string(b.shape());
}

// (outer, len, inner) decomposition of a shape around `axis`.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  require(axis < s.size(), "axis " + std::to_string(axis) + " out of range for " +
                               shape_to_string(s));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), shapes("matmul", av, bv));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out = saga::matmul(av, bv);
  return a.graph->record(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Var, const Tensor& dc) {
    if (g.requires_grad(a)) {
      kernels::gemm_nt_acc(dc.data(), g.value(b).data(), g.grad_buffer(a).data(), m, n, k);
    }
    if (g.requires_grad(b)) {
      kernels::gemm_tn_acc(g.value(a).data(), dc.data(), g.grad_buffer(b).data(), m, k, n);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1),
          shapes("matmul_nt", av, bv));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor out({m, n});
  kernels::gemm_nt_acc(av.data(), bv.data(), out.data(), m, k, n);
  return a.graph->record(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Var, const Tensor& dc) {
    if (g.requires_grad(a)) {
      kernels::gemm_nn_acc(dc.data(), g.value(b).data(), g.grad_buffer(a).data(), m, n, k);
    }
    if (g.requires_grad(b)) {
      kernels::gemm_tn_acc(dc.data(), g.value(a).data(), g.grad_buffer(b).data(), m, n, k);
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require(av.rank() == 2, "transpose: expects rank 2, got " + shape_to_string(av.shape()));
  return a.graph->record(saga::transpose(av), {a}, [a](Graph& g, Var, const Tensor& d) {
    g.accumulate(a, saga::transpose(d));
  });
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), shapes("add", av, bv));
  Tensor out = av;
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, Var, const Tensor& d) {
    g.accumulate(a, d);
    g.accumulate(b, d);
  });
}

Var sub(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), shapes("sub", av, bv));
  Tensor out = av;
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, Var, const Tensor& d) {
    g.accumulate(a, d);
    if (g.requires_grad(b)) {
      auto gb = g.grad_buffer(b).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= d[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.shape() == bv.shape(), shapes("mul", av, bv));
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, Var, const Tensor& d) {
    if (g.requires_grad(a)) {
      const Tensor& bv = g.value(b);
      auto ga = g.grad_buffer(a).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += d[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      const Tensor& av = g.value(a);
      auto gb = g.grad_buffer(b).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += d[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out(a.value().shape());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.graph->record(std::move(out), {a}, [a, s](Graph& g, Var, const Tensor& d) {
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += d[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  Tensor out(a.value().shape());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  return a.graph->record(std::move(out), {a},
                         [a](Graph& g, Var, const Tensor& d) { g.accumulate(a, d); });
}

Var add_row(Var a, Var bias) {
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  require(av.rank() == 2 && bv.size() == av.dim(1), shapes("add_row", av, bv));
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
  return a.graph->record(std::move(out), {a, bias}, [a, bias, m, n](Graph& g, Var, const Tensor& d) {
    g.accumulate(a, d);
    if (g.requires_grad(bias)) {
      auto gb = g.grad_buffer(bias).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += d[i * n + j];
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->record(Tensor::scalar(s), {a}, [a](Graph& g, Var, const Tensor& d) {
    auto ga = g.grad_buffer(a).data();
    const double v = d[0];
    for (auto& x : ga) x += v;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  require(n > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  require(av.rank() == 2 && av.dim(0) > 0, "mean_rows: expects non-empty rank 2, got " +
                                               shape_to_string(av.shape()));
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  return a.graph->record(std::move(out), {a}, [a, m, n, inv](Graph& g, Var, const Tensor& d) {
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += d[j] * inv;
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  out.set_requires_grad(false);
  return a.graph->record(std::move(out), {a}, [a](Graph& g, Var, const Tensor& d) {
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += d[i];
  });
}

Var concat_rows(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1),
          shapes("concat_rows", av, bv));
  const std::size_t na = av.size();
  std::vector<double> data(av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1)}, std::move(data));
  return a.graph->record(std::move(out), {a, b}, [a, b, na](Graph& g, Var, const Tensor& d) {
    if (g.requires_grad(a)) {
      auto ga = g.grad_buffer(a).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += d[i];
    }
    if (g.requires_grad(b)) {
      auto gb = g.grad_buffer(b).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += d[na + i];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = parts.front().value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    require(v.rank() == 2 && v.dim(1) == n, shapes("concat_rows", parts.front().value(), v));
    rows += v.dim(0);
  }
  std::vector<double> data;
  data.reserve(rows * n);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(data.size());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  return parts.front().graph->record(
      Tensor({rows, n}, std::move(data)), parts,
      [parts, offsets = std::move(offsets)](Graph& g, Var, const Tensor& d) {
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (!g.requires_grad(parts[i])) continue;
          auto gp = g.grad_buffer(parts[i]).data();
          for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += d[offsets[i] + j];
        }
      });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  require(av.rank() == 2 && begin <= end && end <= av.dim(1),
          "slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
              shape_to_string(av.shape()));
  const std::size_t m = av.dim(0), n = av.dim(1), w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * n + begin + j];
  return a.graph->record(std::move(out), {a}, [a, m, n, w, begin](Graph& g, Var, const Tensor& d) {
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += d[i * w + j];
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  require(av.rank() == 2 && begin <= end && end <= av.dim(0),
          "slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
              shape_to_string(av.shape()));
  const std::size_t n = av.dim(1);
  std::vector<double> data(av.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                           av.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  Tensor out({end - begin, n}, std::move(data));
  return a.graph->record(std::move(out), {a}, [a, begin, n](Graph& g, Var, const Tensor& d) {
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < d.size(); ++i) ga[begin * n + i] += d[i];
  });
}

Var gather(Var a, std::vector<std::size_t> flat_indices) {
  const Tensor& av = a.value();
  Tensor out({flat_indices.size()});
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    require(flat_indices[i] < av.size(), "gather: index " + std::to_string(flat_indices[i]) +
                                             " out of range for " + shape_to_string(av.shape()));
    out[i] = av[flat_indices[i]];
  }
  return a.graph->record(std::move(out), {a},
                         [a, idx = std::move(flat_indices)](Graph& g, Var, const Tensor& d) {
                           auto ga = g.grad_buffer(a).data();
                           for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += d[i];
                         });
}

Var relu(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return a.graph->record(std::move(out), {a}, [a](Graph& g, Var, const Tensor& d) {
    const Tensor& av = g.value(a);
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (av[i] > 0.0) ga[i] += d[i];
  });
}

Var quick_gelu(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-1.702 * av[i]));
    out[i] = av[i] * s;
  }
  return a.graph->record(std::move(out), {a}, [a](Graph& g, Var, const Tensor& d) {
    const Tensor& av = g.value(a);
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-1.702 * av[i]));
      ga[i] += d[i] * (s + 1.702 * av[i] * s * (1.0 - s));
    }
  });
}

Var square(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
  return a.graph->record(std::move(out), {a}, [a](Graph& g, Var, const Tensor& d) {
    const Tensor& av = g.value(a);
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * av[i] * d[i];
  });
}

Var softmax(Var a, std::size_t axis) {
  const Tensor& av = a.value();
  const AxisView v = axis_view(av.shape(), axis);
  Tensor out(av.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < v.len; ++l) mx = std::max(mx, av[base + l * v.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const double e = std::exp(av[base + l * v.inner] - mx);
        out[base + l * v.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] /= z;
    }
  }
  return a.graph->record(std::move(out), {a}, [a, v](Graph& g, Var self, const Tensor& d) {
    const Tensor& y = g.value(self);
    auto ga = g.grad_buffer(a).data();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double s = 0.0;
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t idx = base + l * v.inner;
          s += d[idx] * y[idx];
        }
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t idx = base + l * v.inner;
          ga[idx] += y[idx] * (d[idx] - s);
        }
      }
    }
  });
}

Var attention_heads(Var q, Var k, Var v, std::size_t heads, const Tensor* mask,
                    bool keep_attention) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const double* qv_p = qv.data().data();
  const double* kv_p = kv.data().data();
  const double* vv_p = vv.data().data();
  require(qv.rank() == 2 && kv.rank() == 2 && vv.shape() == kv.shape() && qv.dim(1) == kv.dim(1) &&
              heads > 0 && qv.dim(1) % heads == 0,
          "attention_heads: q " + shape_to_string(qv.shape()) + ", k " + shape_to_string(kv.shape()) +
              ", v " + shape_to_string(vv.shape()) + ", heads " + std::to_string(heads));
  const std::size_t n = qv.dim(0), m = kv.dim(0), d = qv.dim(1), dh = d / heads;
  require(!mask || mask->shape() == Shape{n, m},
          "attention_heads: mask " + (mask ? shape_to_string(mask->shape()) : std::string()) +
              " for " + std::to_string(n) + "x" + std::to_string(m) + " logits");
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t width = keep_attention ? d + m : d;
  auto probs = std::make_shared<std::vector<double>>(heads * n * m);
  Tensor out({n, width});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t lo = h * dh;
    double* ah = probs->data() + h * n * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double* qi = qv_p + i * d + lo;
      double* row = ah + i * m;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j) {
        const double* kj = kv_p + j * d + lo;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        row[j] = acc * s + (mask ? (*mask)[i * m + j] : 0.0);
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < m; ++j) row[j] /= z;
      double* oi = out.data().data() + i * width + lo;
      for (std::size_t j = 0; j < m; ++j) {
        const double a = row[j];
        const double* vj = vv_p + j * d + lo;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += a * vj[c];
      }
      if (keep_attention) {
        double* mi = out.data().data() + i * width + d;
        for (std::size_t j = 0; j < m; ++j) mi[j] += row[j] / static_cast<double>(heads);
      }
    }
  }
  return q.graph->record(
      std::move(out), {q, k, v},
      [q, k, v, probs, n, m, d, dh, heads, width, s, keep_attention](Graph& g, Var, const Tensor& dout) {
        const Tensor& qv = g.value(q);
        const Tensor& kv = g.value(k);
        const Tensor& vv = g.value(v);
        const double* qv_p = qv.data().data();
        const double* kv_p = kv.data().data();
        const double* vv_p = vv.data().data();
        const double* dout_p = dout.data().data();
        const bool gq = g.requires_grad(q), gk = g.requires_grad(k), gv = g.requires_grad(v);
        double* dq = gq ? g.grad_buffer(q).data().data() : nullptr;
        double* dk = gk ? g.grad_buffer(k).data().data() : nullptr;
        double* dv = gv ? g.grad_buffer(v).data().data() : nullptr;
        std::vector<double> da(m);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t lo = h * dh;
          const double* ah = probs->data() + h * n * m;
          for (std::size_t i = 0; i < n; ++i) {
            const double* row = ah + i * m;
            const double* doi = dout_p + i * width + lo;
            double dot_ad = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double* vj = vv_p + j * d + lo;
              double acc = keep_attention ? dout[i * width + d + j] / static_cast<double>(heads) : 0.0;
              for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
              da[j] = acc;
              dot_ad += acc * row[j];
              if (dv) {
                double* dvj = dv + j * d + lo;
                for (std::size_t c = 0; c < dh; ++c) dvj[c] += row[j] * doi[c];
              }
            }
            const double* qi = qv_p + i * d + lo;
            for (std::size_t j = 0; j < m; ++j) {
              const double ds = row[j] * (da[j] - dot_ad) * s;
              if (ds == 0.0) continue;
              const double* kj = kv_p + j * d + lo;
              if (dq) {
                double* dqi = dq + i * d + lo;
                for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
              }
              if (dk) {
                double* dkj = dk + j * d + lo;
                for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

Var log_softmax(Var a) {
  const Tensor& av = a.value();
  require(av.rank() == 1 || av.rank() == 2,
          "log_softmax: expects rank 1 or 2, got " + shape_to_string(av.shape()));
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(av[i * n + j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] - lz;
  }
  return a.graph->record(std::move(out), {a}, [a, m, n](Graph& g, Var self, const Tensor& d) {
    const Tensor& y = g.value(self);
    auto ga = g.grad_buffer(a).data();
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += d[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += d[i * n + j] - std::exp(y[i * n + j]) * s;
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 1 && xv.shape().back() >= 1, "layer_norm: empty feature axis");
  const std::size_t d = xv.shape().back();
  const std::size_t m = xv.size() / d;
  require(gamma.value().size() == d && beta.value().size() == d,
          "layer_norm: gamma/beta must have " + std::to_string(d) + " entries, got " +
              shape_to_string(gamma.value().shape()) + "/" + shape_to_string(beta.value().shape()));
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  Tensor rstd({m});
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[i * d + j] - mu) * r;
      xhat[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.graph->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, m, d, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, Var,
                                                                             const Tensor& dy) {
        const Tensor& gv = g.value(gamma);
        if (g.requires_grad(gamma)) {
          auto gg = g.grad_buffer(gamma).data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[i * d + j] * xhat[i * d + j];
        }
        if (g.requires_grad(beta)) {
          auto gb = g.grad_buffer(beta).data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[i * d + j];
        }
        if (g.requires_grad(x)) {
          auto gx = g.grad_buffer(x).data();
          const double invd = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[i * d + j] * gv[j];
              s1 += dh;
              s2 += dh * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[i * d + j] * gv[j];
              gx[i * d + j] += rstd[i] * (dh - s1 * invd - xhat[i * d + j] * s2 * invd);
            }
          }
        }
      });
}

Var l2_normalize(Var x, double eps) {
  const Tensor& xv = x.value();
  require(xv.rank() == 1 || xv.rank() == 2,
          "l2_normalize: expects rank 1 or 2, got " + shape_to_string(xv.shape()));
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape());
  Tensor norms({m});
  for (std::size_t i = 0; i < m; ++i) {
    const double nr = l2_norm(xv.row(i));
    if (!(nr > eps)) {
      throw DegenerateNormError("l2_normalize: row " + std::to_string(i) + " has norm " +
                                std::to_string(nr) + " <= eps");
    }
    norms[i] = nr;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] / nr;
  }
  return x.graph->record(std::move(out), {x},
                         [x, m, n, norms = std::move(norms)](Graph& g, Var self, const Tensor& d) {
                           const Tensor& y = g.value(self);
                           auto gx = g.grad_buffer(x).data();
                           for (std::size_t i = 0; i < m; ++i) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < n; ++j) s += y[i * n + j] * d[i * n + j];
                             for (std::size_t j = 0; j < n; ++j)
                               gx[i * n + j] += (d[i * n + j] - y[i * n + j] * s) / norms[i];
                           }
                         });
}

Var normalize_sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v;
  if (!(s > 0.0)) {
    throw DegenerateNormError("normalize_sum: weights sum to " + std::to_string(s));
  }
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / s;
  return x.graph->record(std::move(out), {x}, [x, s](Graph& g, Var self, const Tensor& d) {
    const Tensor& y = g.value(self);
    double t = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) t += d[i] * y[i];
    auto gx = g.grad_buffer(x).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (d[i] - t) / s;
  });
}

MaxResult reduce_max_with_index(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  const AxisView v = axis_view(xv.shape(), axis);
  require(v.len >= 1, "reduce_max_with_index: empty axis");
  Shape out_shape;
  for (std::size_t i = 0; i < xv.rank(); ++i)
    if (i != axis) out_shape.push_back(xv.shape()[i]);
  Tensor out(out_shape);
  std::vector<std::size_t> indices(v.outer * v.inner);
  std::vector<std::size_t> flat(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      std::size_t best = 0;
      double bv = xv[base];
      for (std::size_t l = 1; l < v.len; ++l) {
        if (xv[base + l * v.inner] > bv) {
          bv = xv[base + l * v.inner];
          best = l;
        }
      }
      const std::size_t k = o * v.inner + in;
      out[k] = bv;
      indices[k] = best;
      flat[k] = base + best * v.inner;
    }
  }
  Var values = x.graph->record(std::move(out), {x},
                               [x, flat = std::move(flat)](Graph& g, Var, const Tensor& d) {
                                 auto gx = g.grad_buffer(x).data();
                                 for (std::size_t k = 0; k < flat.size(); ++k) gx[flat[k]] += d[k];
                               });
  return MaxResult{values, std::move(indices)};
}

BatchNormResult batch_norm_train(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2 && xv.dim(0) >= 1, "batch_norm: expects [B×D], got " +
                                                shape_to_string(xv.shape()));
  const std::size_t b = xv.dim(0), d = xv.dim(1);
  require(gamma.value().size() == d && beta.value().size() == d,
          "batch_norm: gamma/beta must have " + std::to_string(d) + " entries");
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor mean({d}), var_unbiased({d}), rstd({d});
  Tensor xhat(xv.shape()), out(xv.shape());
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < b; ++i) mu += xv[i * d + j];
    mu /= static_cast<double>(b);
    double var = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double c = xv[i * d + j] - mu;
      var += c * c;
    }
    mean[j] = mu;
    var_unbiased[j] = b > 1 ? var / static_cast<double>(b - 1) : 0.0;
    var /= static_cast<double>(b);
    rstd[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < b; ++i) {
      const double h = (xv[i * d + j] - mu) * rstd[j];
      xhat[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  Var y = x.graph->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, b, d, xhat = std::move(xhat), rstd](Graph& g, Var, const Tensor& dy) {
        const Tensor& gv = g.value(gamma);
        if (g.requires_grad(gamma)) {
          auto gg = g.grad_buffer(gamma).data();
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[i * d + j] * xhat[i * d + j];
        }
        if (g.requires_grad(beta)) {
          auto gb = g.grad_buffer(beta).data();
          for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[i * d + j];
        }
        if (g.requires_grad(x)) {
          auto gx = g.grad_buffer(x).data();
          const double invb = 1.0 / static_cast<double>(b);
          for (std::size_t j = 0; j < d; ++j) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < b; ++i) {
              const double dh = dy[i * d + j] * gv[j];
              s1 += dh;
              s2 += dh * xhat[i * d + j];
            }
            for (std::size_t i = 0; i < b; ++i) {
              const double dh = dy[i * d + j] * gv[j];
              gx[i * d + j] += rstd[j] * (dh - s1 * invb - xhat[i * d + j] * s2 * invb);
            }
          }
        }
      });
  return BatchNormResult{y, std::move(mean), std::move(var_unbiased)};
}

Var pairwise_distances(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, "pairwise_distances: expects rank 2, got " + shape_to_string(xv.shape()));
  const std::size_t b = xv.dim(0), d = xv.dim(1);
  Tensor out({b, b});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double c = xv[i * d + k] - xv[j * d + k];
        s += c * c;
      }
      out[i * b + j] = std::sqrt(s);
    }
  }
  return x.graph->record(std::move(out), {x}, [x, b, d](Graph& g, Var self, const Tensor& dd) {
    const Tensor& xv = g.value(x);
    const Tensor& dist = g.value(self);
    auto gx = g.grad_buffer(x).data();
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        const double w = dd[i * b + j];
        if (w == 0.0 || i == j) continue;
        const double dij = dist[i * b + j];
        if (dij == 0.0) continue;
        const double f = w / dij;
        for (std::size_t k = 0; k < d; ++k) {
          const double c = (xv[i * d + k] - xv[j * d + k]) * f;
          gx[i * d + k] += c;
          gx[j * d + k] -= c;
        }
      }
    }
  });
}

}  // namespace ops

}  // namespace saga
