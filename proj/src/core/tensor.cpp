#include "tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace d2k {

void Tape::reset() {
  nodes_.clear();
  param_nodes_.clear();
  param_ids_.clear();
}

Tape::Id Tape::push(Tensor2 v, bool needs_g, std::function<void()> back) {
  Node n;
  n.val = std::move(v);
  n.needs_grad = needs_g && grad_enabled_;
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

const Tensor2& Tape::val(Id id) const {
  const Node& n = nodes_[id];
  return n.bound ? n.bound->value : n.val;
}

Tensor2& Tape::gbuf(Id id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    const Tensor2& v = val(id);
    n.grad = Tensor2(v.rows, v.cols);
  }
  return n.grad;
}

Tape::Id Tape::param(Param& p) {
  auto it = param_ids_.find(&p);
  if (it != param_ids_.end()) return it->second;
  Node n;
  n.bound = &p;
  n.needs_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  Id id = static_cast<Id>(nodes_.size() - 1);
  param_nodes_.push_back(id);
  param_ids_.emplace(&p, id);
  return id;
}

Tape::Id Tape::input(Tensor2 v) { return push(std::move(v), false, {}); }

Tape::Id Tape::matmul(Id a, Id b) {
  const Tensor2& va = val(a);
  const Tensor2& vb = val(b);
  if (va.cols != vb.rows)
    throw ConfigError("matmul: shape mismatch " + std::to_string(va.rows) + "x" +
                      std::to_string(va.cols) + " * " + std::to_string(vb.rows) + "x" +
                      std::to_string(vb.cols));
  const size_t m = va.rows, k = va.cols, n = vb.cols;
  Tensor2 out(m, n);
  for (size_t i = 0; i < m; ++i) {
    const double* arow = &va.data[i * k];
    double* orow = &out.data[i * n];
    for (size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = &vb.data[p * n];
      for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a) || needs(b);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, b, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      const Tensor2& va2 = val(a);
      const Tensor2& vb2 = val(b);
      const size_t m2 = va2.rows, k2 = va2.cols, n2 = vb2.cols;
      if (needs(a)) {
        Tensor2& ga = gbuf(a);  // dA += g * B^T
        for (size_t i = 0; i < m2; ++i)
          for (size_t p = 0; p < k2; ++p) {
            double s = 0.0;
            for (size_t j = 0; j < n2; ++j) s += g.data[i * n2 + j] * vb2.data[p * n2 + j];
            ga.data[i * k2 + p] += s;
          }
      }
      if (needs(b)) {
        Tensor2& gb = gbuf(b);  // dB += A^T * g
        for (size_t i = 0; i < m2; ++i) {
          const double* arow = &va2.data[i * k2];
          const double* grow = &g.data[i * n2];
          for (size_t p = 0; p < k2; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* brow = &gb.data[p * n2];
            for (size_t j = 0; j < n2; ++j) brow[j] += av * grow[j];
          }
        }
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::transpose(Id a) {
  const Tensor2& va = val(a);
  Tensor2 out(va.cols, va.rows);
  for (size_t i = 0; i < va.rows; ++i)
    for (size_t j = 0; j < va.cols; ++j) out.at(j, i) = va.at(i, j);
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < g.rows; ++i)
        for (size_t j = 0; j < g.cols; ++j) ga.at(j, i) += g.at(i, j);
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::add(Id a, Id b) {
  const Tensor2& va = val(a);
  const Tensor2& vb = val(b);
  if (!va.same_shape(vb)) throw ConfigError("add: shape mismatch");
  Tensor2 out = va;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a) || needs(b);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, b, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      if (needs(a)) {
        Tensor2& ga = gbuf(a);
        for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
      }
      if (needs(b)) {
        Tensor2& gb = gbuf(b);
        for (size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::sub(Id a, Id b) {
  const Tensor2& va = val(a);
  const Tensor2& vb = val(b);
  if (!va.same_shape(vb)) throw ConfigError("sub: shape mismatch");
  Tensor2 out = va;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] -= vb.data[i];
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a) || needs(b);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, b, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      if (needs(a)) {
        Tensor2& ga = gbuf(a);
        for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
      }
      if (needs(b)) {
        Tensor2& gb = gbuf(b);
        for (size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::mul(Id a, Id b) {
  const Tensor2& va = val(a);
  const Tensor2& vb = val(b);
  if (!va.same_shape(vb)) throw ConfigError("mul: shape mismatch");
  Tensor2 out = va;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] *= vb.data[i];
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a) || needs(b);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, b, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      const Tensor2& va2 = val(a);
      const Tensor2& vb2 = val(b);
      if (needs(a)) {
        Tensor2& ga = gbuf(a);
        for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
      }
      if (needs(b)) {
        Tensor2& gb = gbuf(b);
        for (size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * va2.data[i];
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::scale(Id a, double s) {
  Tensor2 out = val(a);
  for (double& v : out.data) v *= s;
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, s, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += s * g.data[i];
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::add_row_broadcast(Id a, Id row) {
  const Tensor2& va = val(a);
  const Tensor2& vr = val(row);
  if (vr.rows != 1 || vr.cols != va.cols)
    throw ConfigError("add_row_broadcast: row must be 1x" + std::to_string(va.cols));
  Tensor2 out = va;
  for (size_t i = 0; i < va.rows; ++i)
    for (size_t j = 0; j < va.cols; ++j) out.at(i, j) += vr.data[j];
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a) || needs(row);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, row, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      if (needs(a)) {
        Tensor2& ga = gbuf(a);
        for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
      }
      if (needs(row)) {
        Tensor2& gr = gbuf(row);
        for (size_t i = 0; i < g.rows; ++i)
          for (size_t j = 0; j < g.cols; ++j) gr.data[j] += g.at(i, j);
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::tanh_op(Id a) {
  Tensor2 out = val(a);
  for (double& v : out.data) v = std::tanh(v);
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      const Tensor2& y = nodes_[oid].val;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < g.size(); ++i)
        ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::sigmoid_op(Id a) {
  Tensor2 out = val(a);
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      const Tensor2& y = nodes_[oid].val;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < g.size(); ++i)
        ga.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::softmax_rows(Id a) {
  Tensor2 out = val(a);
  for (size_t i = 0; i < out.rows; ++i) {
    double* r = &out.data[i * out.cols];
    double mx = r[0];
    for (size_t j = 1; j < out.cols; ++j) mx = std::max(mx, r[j]);
    double sum = 0.0;
    for (size_t j = 0; j < out.cols; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (size_t j = 0; j < out.cols; ++j) r[j] /= sum;
  }
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      const Tensor2& y = nodes_[oid].val;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < g.rows; ++i) {
        const double* gr = &g.data[i * g.cols];
        const double* yr = &y.data[i * g.cols];
        double dot = 0.0;
        for (size_t j = 0; j < g.cols; ++j) dot += gr[j] * yr[j];
        double* gar = &ga.data[i * g.cols];
        for (size_t j = 0; j < g.cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::layer_norm_rows(Id x, Id gamma, Id beta, double eps) {
  const Tensor2& vx = val(x);
  const Tensor2& vg = val(gamma);
  const Tensor2& vb = val(beta);
  if (vg.rows != 1 || vg.cols != vx.cols || vb.rows != 1 || vb.cols != vx.cols)
    throw ConfigError("layer_norm_rows: gamma/beta must be 1x" + std::to_string(vx.cols));
  size_t cols = vx.cols;
  Tensor2 out(vx.rows, cols);
  Tensor2 xhat(vx.rows, cols);
  std::vector<double> inv_std(vx.rows);
  for (size_t i = 0; i < vx.rows; ++i) {
    const double* r = &vx.data[i * cols];
    double mean = 0.0;
    for (size_t j = 0; j < cols; ++j) mean += r[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (size_t j = 0; j < cols; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<double>(cols);
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (size_t j = 0; j < cols; ++j) {
      double xh = (r[j] - mean) * inv;
      xhat.at(i, j) = xh;
      out.at(i, j) = xh * vg.data[j] + vb.data[j];
    }
  }
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(x) || needs(gamma) || needs(beta);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, x, gamma, beta, oid, xh = std::move(xhat), inv = std::move(inv_std)]() {
      const Tensor2& g = nodes_[oid].grad;
      const Tensor2& vg2 = val(gamma);
      size_t cols2 = g.cols;
      if (needs(gamma)) {
        Tensor2& gg = gbuf(gamma);
        for (size_t i = 0; i < g.rows; ++i)
          for (size_t j = 0; j < cols2; ++j) gg.data[j] += g.at(i, j) * xh.at(i, j);
      }
      if (needs(beta)) {
        Tensor2& gb = gbuf(beta);
        for (size_t i = 0; i < g.rows; ++i)
          for (size_t j = 0; j < cols2; ++j) gb.data[j] += g.at(i, j);
      }
      if (needs(x)) {
        Tensor2& gx = gbuf(x);
        double n = static_cast<double>(cols2);
        for (size_t i = 0; i < g.rows; ++i) {
          double sum_gh = 0.0, sum_ghx = 0.0;
          for (size_t j = 0; j < cols2; ++j) {
            double gh = g.at(i, j) * vg2.data[j];
            sum_gh += gh;
            sum_ghx += gh * xh.at(i, j);
          }
          for (size_t j = 0; j < cols2; ++j) {
            double gh = g.at(i, j) * vg2.data[j];
            gx.at(i, j) += inv[i] * (gh - sum_gh / n - xh.at(i, j) * sum_ghx / n);
          }
        }
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::concat_cols(const std::vector<Id>& xs) {
  if (xs.empty()) throw ConfigError("concat_cols: empty input list");
  size_t rows = val(xs[0]).rows;
  size_t cols = 0;
  bool ng = false;
  for (Id x : xs) {
    if (val(x).rows != rows) throw ConfigError("concat_cols: row count mismatch");
    cols += val(x).cols;
    ng = ng || needs(x);
  }
  Tensor2 out(rows, cols);
  size_t off = 0;
  for (Id x : xs) {
    const Tensor2& vx = val(x);
    for (size_t i = 0; i < rows; ++i)
      std::copy(&vx.data[i * vx.cols], &vx.data[i * vx.cols] + vx.cols,
                &out.data[i * cols + off]);
    off += vx.cols;
  }
  Id oid = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, xs, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      size_t off2 = 0;
      for (Id x : xs) {
        const Tensor2& vx = val(x);
        if (needs(x)) {
          Tensor2& gx = gbuf(x);
          for (size_t i = 0; i < g.rows; ++i)
            for (size_t j = 0; j < vx.cols; ++j) gx.at(i, j) += g.at(i, off2 + j);
        }
        off2 += vx.cols;
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::concat_rows(const std::vector<Id>& xs) {
  if (xs.empty()) throw ConfigError("concat_rows: empty input list");
  size_t cols = val(xs[0]).cols;
  size_t rows = 0;
  bool ng = false;
  for (Id x : xs) {
    if (val(x).cols != cols) throw ConfigError("concat_rows: column count mismatch");
    rows += val(x).rows;
    ng = ng || needs(x);
  }
  Tensor2 out(rows, cols);
  size_t off = 0;
  for (Id x : xs) {
    const Tensor2& vx = val(x);
    std::copy(vx.data.begin(), vx.data.end(), &out.data[off * cols]);
    off += vx.rows;
  }
  Id oid = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, xs, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      size_t off2 = 0;
      for (Id x : xs) {
        const Tensor2& vx = val(x);
        if (needs(x)) {
          Tensor2& gx = gbuf(x);
          for (size_t i = 0; i < vx.size(); ++i) gx.data[i] += g.data[off2 * g.cols + i];
        }
        off2 += vx.rows;
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::slice_cols(Id a, size_t c0, size_t n) {
  const Tensor2& va = val(a);
  if (c0 + n > va.cols) throw ConfigError("slice_cols: range out of bounds");
  Tensor2 out(va.rows, n);
  for (size_t i = 0; i < va.rows; ++i)
    std::copy(&va.data[i * va.cols + c0], &va.data[i * va.cols + c0] + n, &out.data[i * n]);
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, c0, n, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < g.rows; ++i)
        for (size_t j = 0; j < n; ++j) ga.at(i, c0 + j) += g.at(i, j);
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::slice_rows(Id a, size_t r0, size_t n) {
  const Tensor2& va = val(a);
  if (r0 + n > va.rows) throw ConfigError("slice_rows: range out of bounds");
  Tensor2 out(n, va.cols);
  std::copy(&va.data[r0 * va.cols], &va.data[(r0 + n) * va.cols], out.data.begin());
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, r0, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < g.size(); ++i) ga.data[r0 * g.cols + i] += g.data[i];
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::reshape(Id a, size_t r, size_t c) {
  const Tensor2& va = val(a);
  if (r * c != va.size()) throw ConfigError("reshape: element count mismatch");
  Tensor2 out(r, c, va.data);
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::sum_rows(Id a) {
  const Tensor2& va = val(a);
  Tensor2 out(1, va.cols);
  for (size_t i = 0; i < va.rows; ++i)
    for (size_t j = 0; j < va.cols; ++j) out.data[j] += va.at(i, j);
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < ga.rows; ++i)
        for (size_t j = 0; j < ga.cols; ++j) ga.at(i, j) += g.data[j];
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::sum_cols(Id a) {
  const Tensor2& va = val(a);
  Tensor2 out(va.rows, 1);
  for (size_t i = 0; i < va.rows; ++i) {
    double s = 0.0;
    for (size_t j = 0; j < va.cols; ++j) s += va.at(i, j);
    out.data[i] = s;
  }
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ga = gbuf(a);
      for (size_t i = 0; i < ga.rows; ++i)
        for (size_t j = 0; j < ga.cols; ++j) ga.at(i, j) += g.data[i];
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::mean_rows(Id a) {
  const Tensor2& va = val(a);
  if (va.rows == 0) throw ConfigError("mean_rows: empty input");
  Tensor2 out(1, va.cols);
  for (size_t i = 0; i < va.rows; ++i)
    for (size_t j = 0; j < va.cols; ++j) out.data[j] += va.at(i, j);
  for (double& v : out.data) v /= static_cast<double>(va.rows);
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ga = gbuf(a);
      double inv = 1.0 / static_cast<double>(ga.rows);
      for (size_t i = 0; i < ga.rows; ++i)
        for (size_t j = 0; j < ga.cols; ++j) ga.at(i, j) += g.data[j] * inv;
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::sum_all(Id a) {
  const Tensor2& va = val(a);
  Tensor2 out(1, 1);
  for (double v : va.data) out.data[0] += v;
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(a);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, a, oid]() {
      double g = nodes_[oid].grad.data[0];
      Tensor2& ga = gbuf(a);
      for (double& v : ga.data) v += g;
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::gather_rows(Param& table, std::vector<uint32_t> ids) {
  const Tensor2& tb = table.value;
  Tensor2 out(ids.size(), tb.cols);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tb.rows)
      throw DataError("gather_rows: id " + std::to_string(ids[i]) + " out of range for " +
                      table.name);
    std::copy(&tb.data[ids[i] * tb.cols], &tb.data[ids[i] * tb.cols] + tb.cols,
              &out.data[i * tb.cols]);
  }
  Id oid = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (grad_enabled_)
    back = [this, &table, ids = std::move(ids), oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& gt = table.grad;
      for (size_t i = 0; i < ids.size(); ++i)
        for (size_t j = 0; j < g.cols; ++j) gt.at(ids[i], j) += g.at(i, j);
    };
  return push(std::move(out), grad_enabled_, std::move(back));
}

Tape::Id Tape::gather_mean_segments(Param& table, std::vector<uint32_t> values,
                                    std::vector<uint32_t> offsets) {
  const Tensor2& tb = table.value;
  if (offsets.size() < 2) throw ConfigError("gather_mean_segments: need >= 1 segment");
  size_t nseg = offsets.size() - 1;
  Tensor2 out(nseg, tb.cols);
  for (size_t s = 0; s < nseg; ++s) {
    uint32_t lo = offsets[s], hi = offsets[s + 1];
    if (lo >= hi) throw DataError("gather_mean_segments: empty segment");
    for (uint32_t p = lo; p < hi; ++p) {
      if (values[p] >= tb.rows)
        throw DataError("gather_mean_segments: id out of range for " + table.name);
      for (size_t j = 0; j < tb.cols; ++j) out.at(s, j) += tb.at(values[p], j);
    }
    double inv = 1.0 / static_cast<double>(hi - lo);
    for (size_t j = 0; j < tb.cols; ++j) out.at(s, j) *= inv;
  }
  Id oid = static_cast<Id>(nodes_.size());
  std::function<void()> back;
  if (grad_enabled_)
    back = [this, &table, values = std::move(values), offsets = std::move(offsets), oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& gt = table.grad;
      for (size_t s = 0; s + 1 < offsets.size(); ++s) {
        uint32_t lo = offsets[s], hi = offsets[s + 1];
        double inv = 1.0 / static_cast<double>(hi - lo);
        for (uint32_t p = lo; p < hi; ++p)
          for (size_t j = 0; j < g.cols; ++j) gt.at(values[p], j) += g.at(s, j) * inv;
      }
    };
  return push(std::move(out), grad_enabled_, std::move(back));
}

Tape::Id Tape::rows_as_matrix_vec(Id w_rows, Id h, size_t dk) {
  const Tensor2& vw = val(w_rows);
  const Tensor2& vh = val(h);
  if (vw.cols != dk * dk || vh.cols != dk || vw.rows != vh.rows)
    throw ConfigError("rows_as_matrix_vec: expected w Bx" + std::to_string(dk * dk) +
                      " and h Bx" + std::to_string(dk) + " with equal B");
  Tensor2 out(vw.rows, dk);
  for (size_t b = 0; b < vw.rows; ++b) {
    const double* wb = &vw.data[b * dk * dk];
    const double* hb = &vh.data[b * dk];
    double* ob = &out.data[b * dk];
    for (size_t i = 0; i < dk; ++i) {
      double s = 0.0;
      for (size_t j = 0; j < dk; ++j) s += wb[i * dk + j] * hb[j];
      ob[i] = s;
    }
  }
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(w_rows) || needs(h);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, w_rows, h, dk, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      const Tensor2& vw2 = val(w_rows);
      const Tensor2& vh2 = val(h);
      bool nw = needs(w_rows), nh = needs(h);
      for (size_t b = 0; b < g.rows; ++b) {
        const double* gb = &g.data[b * dk];
        if (nw) {
          Tensor2& gw = gbuf(w_rows);
          const double* hb = &vh2.data[b * dk];
          double* gwb = &gw.data[b * dk * dk];
          for (size_t i = 0; i < dk; ++i)
            for (size_t j = 0; j < dk; ++j) gwb[i * dk + j] += gb[i] * hb[j];
        }
        if (nh) {
          Tensor2& gh = gbuf(h);
          const double* wb = &vw2.data[b * dk * dk];
          double* ghb = &gh.data[b * dk];
          for (size_t i = 0; i < dk; ++i)
            for (size_t j = 0; j < dk; ++j) ghb[j] += gb[i] * wb[i * dk + j];
        }
      }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::cross_concat_rows(Id e, const std::vector<std::array<uint32_t, 3>>& triples) {
  const Tensor2& ve = val(e);
  size_t d = ve.cols;
  Tensor2 out(triples.size(), 3 * d);
  for (size_t t = 0; t < triples.size(); ++t)
    for (size_t s = 0; s < 3; ++s) {
      uint32_t r = triples[t][s];
      if (r >= ve.rows) throw ConfigError("cross_concat_rows: row index out of range");
      std::copy(&ve.data[r * d], &ve.data[r * d] + d, &out.data[t * 3 * d + s * d]);
    }
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(e);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, e, triples, oid]() {
      const Tensor2& g = nodes_[oid].grad;
      Tensor2& ge = gbuf(e);
      size_t d2 = ge.cols;
      for (size_t t = 0; t < triples.size(); ++t)
        for (size_t s = 0; s < 3; ++s) {
          uint32_t r = triples[t][s];
          for (size_t j = 0; j < d2; ++j) ge.at(r, j) += g.data[t * 3 * d2 + s * d2 + j];
        }
    };
  return push(std::move(out), ng, std::move(back));
}

Tape::Id Tape::attention(Id q, Id k, Id v, size_t heads) {
  const Tensor2& vq = val(q);
  const Tensor2& vk = val(k);
  const Tensor2& vv = val(v);
  if (!vq.same_shape(vk) || !vq.same_shape(vv))
    throw ConfigError("attention: Q, K, V must share one FxD shape");
  if (heads == 0 || vq.cols % heads != 0)
    throw ConfigError("attention: width " + std::to_string(vq.cols) +
                      " not divisible by heads=" + std::to_string(heads));
  size_t dh = vq.cols / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Id> head_outs;
  head_outs.reserve(heads);
  for (size_t h = 0; h < heads; ++h) {
    Id qh = slice_cols(q, h * dh, dh);
    Id kh = slice_cols(k, h * dh, dh);
    Id vh = slice_cols(v, h * dh, dh);
    Id scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    head_outs.push_back(matmul(softmax_rows(scores), vh));
  }
  return heads == 1 ? head_outs[0] : concat_cols(head_outs);
}

Tape::Id Tape::bce_mean(Id pred, std::vector<double> labels) {
  const Tensor2& vp = val(pred);
  if (vp.cols != 1) throw ConfigError("bce_mean: predictions must be a column vector");
  if (vp.rows == 0 || labels.empty()) throw DataError("bce_mean: empty batch");
  if (vp.rows != labels.size()) throw ConfigError("bce_mean: prediction/label length mismatch");
  double n = static_cast<double>(vp.rows);
  double loss = 0.0;
  for (size_t i = 0; i < vp.rows; ++i) {
    double p = std::clamp(vp.data[i], kProbEps, 1.0 - kProbEps);
    loss += -(labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p));
  }
  Tensor2 out(1, 1);
  out.data[0] = loss / n;
  Id oid = static_cast<Id>(nodes_.size());
  bool ng = needs(pred);
  std::function<void()> back;
  if (ng && grad_enabled_)
    back = [this, pred, labels = std::move(labels), oid]() {
      double g = nodes_[oid].grad.data[0];
      const Tensor2& vp2 = val(pred);
      Tensor2& gp = gbuf(pred);
      double inv_n = 1.0 / static_cast<double>(vp2.rows);
      for (size_t i = 0; i < vp2.rows; ++i) {
        double p = vp2.data[i];
        if (p < kProbEps || p > 1.0 - kProbEps) continue;  // clamped: flat region
        gp.data[i] += g * inv_n * (p - labels[i]) / (p * (1.0 - p));
      }
    };
  return push(std::move(out), ng, std::move(back));
}

void Tape::backward(Id root) {
  if (!grad_enabled_) throw ConfigError("backward on a no-grad tape");
  if (val(root).rows != 1 || val(root).cols != 1)
    throw ConfigError("backward: root must be a 1x1 scalar");
  gbuf(root).data[0] = 1.0;
  for (size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.back && !n.grad.empty()) n.back();
  }
  for (Id id : param_nodes_) {
    Node& n = nodes_[id];
    if (id <= root && !n.grad.empty()) {
      Tensor2& g = n.bound->grad;
      for (size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
    }
  }
}

Tape::Id linear(Tape& t, Tape::Id x, Param& w, Param& b) {
  return t.add_row_broadcast(t.matmul(x, t.param(w)), t.param(b));
}

Tape::Id apply_act(Tape& t, Tape::Id x, Act act) {
  switch (act) {
    case Act::Linear: return x;
    case Act::Tanh: return t.tanh_op(x);
    case Act::Sigmoid: return t.sigmoid_op(x);
  }
  throw ConfigError("unknown activation");
}

Tape::Id mlp_forward(Tape& t, Tape::Id x, const std::vector<MlpLayer>& layers) {
  Tape::Id h = x;
  for (const MlpLayer& l : layers) {
    if (t.val(h).cols != l.weight->value.rows)
      throw ConfigError("mlp_forward: layer input width " + std::to_string(t.val(h).cols) +
                        " does not match weight rows " +
                        std::to_string(l.weight->value.rows));
    h = apply_act(t, linear(t, h, *l.weight, *l.bias), l.act);
  }
  return h;
}

double bce_mean_value(std::span<const double> pred, std::span<const double> labels) {
  if (pred.empty()) throw DataError("bce: empty batch");
  if (pred.size() != labels.size()) throw ConfigError("bce: length mismatch");
  double loss = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    double p = std::clamp(pred[i], Tape::kProbEps, 1.0 - Tape::kProbEps);
    loss += -(labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p));
  }
  return loss / static_cast<double>(pred.size());
}

AdamState::AdamState(std::vector<Param*> params, AdamOptions opt)
    : params_(std::move(params)), opt_(opt) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Param* p : params_) {
    m_.emplace_back(p->value.rows, p->value.cols);
    v_.emplace_back(p->value.rows, p->value.cols);
  }
}

void AdamState::step() {
  ++step_count_;
  double t = static_cast<double>(step_count_);
  double bc1 = 1.0 - std::pow(opt_.beta1, t);
  double bc2 = 1.0 - std::pow(opt_.beta2, t);
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Param& p = *params_[pi];
    Tensor2& m = m_[pi];
    Tensor2& v = v_[pi];
    for (size_t i = 0; i < p.value.size(); ++i) {
      double g = p.grad.data[i];
      if (!std::isfinite(g))
        throw TrainError("non-finite gradient in parameter '" + p.name + "' at step " +
                         std::to_string(step_count_));
      m.data[i] = opt_.beta1 * m.data[i] + (1.0 - opt_.beta1) * g;
      v.data[i] = opt_.beta2 * v.data[i] + (1.0 - opt_.beta2) * g * g;
      p.value.data[i] -= opt_.lr * (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + opt_.eps);
    }
  }
}

double grad_check(const std::function<double()>& loss, std::span<Param* const> params,
                  double eps, size_t max_coords, uint64_t seed) {
  for (Param* p : params) p->zero_grad();
  double f0 = loss();
  if (!std::isfinite(f0)) throw TrainError("grad_check: non-finite loss");
  std::vector<Tensor2> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  // Round-robin over parameters so small tensors are probed even when one big
  // embedding table dominates the coordinate count.
  Rng rng(seed);
  std::vector<std::vector<size_t>> order(params.size());
  size_t total = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    order[pi].resize(params[pi]->value.size());
    for (size_t i = 0; i < order[pi].size(); ++i) order[pi][i] = i;
    rng.shuffle(order[pi]);
    total += order[pi].size();
  }
  size_t budget = std::min(total, max_coords);
  std::vector<std::pair<size_t, size_t>> picks;
  picks.reserve(budget);
  for (size_t depth = 0; picks.size() < budget; ++depth) {
    bool any = false;
    for (size_t pi = 0; pi < params.size() && picks.size() < budget; ++pi)
      if (depth < order[pi].size()) {
        picks.emplace_back(pi, order[pi][depth]);
        any = true;
      }
    if (!any) break;
  }

  double max_err = 0.0;
  for (auto [pi, ci] : picks) {
    double& slot = params[pi]->value.data[ci];
    double orig = slot;
    slot = orig + eps;
    double f_plus = loss();
    slot = orig - eps;
    double f_minus = loss();
    slot = orig;
    if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
      throw TrainError("grad_check: non-finite loss during finite differences");
    double fd = (f_plus - f_minus) / (2.0 * eps);
    double ad = analytic[pi].data[ci];
    double err = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace d2k
