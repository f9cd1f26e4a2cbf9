#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace d2k {

// Dense row-major matrix of 64-bit floats. Vectors are 1xN or Nx1.
struct Tensor2 {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  Tensor2() = default;
  Tensor2(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  Tensor2(size_t r, size_t c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols) throw ConfigError("Tensor2: data length != rows*cols");
  }

  double& at(size_t r, size_t c) { return data[r * cols + c]; }
  double at(size_t r, size_t c) const { return data[r * cols + c]; }
  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }
  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// A named trainable parameter. Gradients accumulate into `grad` during
// Tape::backward; the optimizer consumes and the caller zeroes them.
struct Param {
  std::string name;
  Tensor2 value;
  Tensor2 grad;

  Param() = default;
  Param(std::string n, size_t r, size_t c) : name(std::move(n)), value(r, c), grad(r, c) {}

  void zero_grad() { grad.fill(0.0); }
};

enum class Act { Linear, Tanh, Sigmoid };

// Reverse-mode tape. Records primitive operations during the forward pass
// and replays them in exact reverse order on backward(). Leaves bound to a
// Param flush their accumulated gradient into Param::grad.
//
// Single-threaded by contract; one tape per model replica.
class Tape {
 public:
  using Id = uint32_t;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  void reset();
  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

  Id param(Param& p);
  Id input(Tensor2 v);

  Id matmul(Id a, Id b);
  Id transpose(Id a);
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id scale(Id a, double s);
  Id add_row_broadcast(Id a, Id row);  // a: m x n, row: 1 x n
  Id tanh_op(Id a);
  Id sigmoid_op(Id a);
  Id softmax_rows(Id a);
  Id layer_norm_rows(Id x, Id gamma, Id beta, double eps = 1e-5);
  Id concat_cols(const std::vector<Id>& xs);
  Id concat_rows(const std::vector<Id>& xs);
  Id slice_cols(Id a, size_t c0, size_t n);
  Id slice_rows(Id a, size_t r0, size_t n);
  Id reshape(Id a, size_t r, size_t c);
  Id sum_rows(Id a);   // -> 1 x cols
  Id sum_cols(Id a);   // -> rows x 1
  Id mean_rows(Id a);  // -> 1 x cols
  Id sum_all(Id a);    // -> 1 x 1

  // Embedding gathers read the table in place and scatter-add gradients
  // back into it, so the table is never copied onto the tape.
  Id gather_rows(Param& table, std::vector<uint32_t> ids);
  // Row b of the output is the mean of table rows values[offsets[b]..offsets[b+1]).
  Id gather_mean_segments(Param& table, std::vector<uint32_t> values,
                          std::vector<uint32_t> offsets);

  // out[b] = reshape(w_rows[b], dk x dk) * h[b]; the batched form of applying
  // a per-sample generated weight matrix to a vector.
  Id rows_as_matrix_vec(Id w_rows, Id h, size_t dk);

  // Row-stack selected rows of `e` three at a time: output row t is
  // concat(e[u_t], e[v_t], e[c_t]). Used for ternary cross features.
  Id cross_concat_rows(Id e, const std::vector<std::array<uint32_t, 3>>& triples);

  // Multi-head scaled dot-product attention, softmax(Q Kh^T / sqrt(dh)) Vh
  // per head, heads concatenated. Q, K, V all F x d with d % heads == 0.
  Id attention(Id q, Id k, Id v, size_t heads);

  // Mean binary cross-entropy over an n x 1 probability column, labels in
  // {0,1}. Probabilities clamped to [kProbEps, 1-kProbEps] before the log.
  static constexpr double kProbEps = 1e-7;
  Id bce_mean(Id pred, std::vector<double> labels);

  const Tensor2& val(Id id) const;
  // Accumulated gradient of a node after backward(); empty if untouched.
  const Tensor2& grad_view(Id id) const { return nodes_[id].grad; }

  void backward(Id root);

 private:
  struct Node {
    Tensor2 val;            // owned value; empty when bound to a param
    Tensor2 grad;           // lazily allocated during backward
    Param* bound = nullptr; // leaf bound to an external parameter
    bool needs_grad = false;
    std::function<void()> back;  // empty for leaves / no-grad nodes
  };

  Id push(Tensor2 v, bool needs, std::function<void()> back);
  Tensor2& gbuf(Id id);
  bool needs(Id id) const { return nodes_[id].needs_grad; }

  std::vector<Node> nodes_;
  std::vector<Id> param_nodes_;
  std::unordered_map<const Param*, Id> param_ids_;  // binding is memoized
  bool grad_enabled_;
};

struct MlpLayer {
  Param* weight = nullptr;  // in x out
  Param* bias = nullptr;    // 1 x out
  Act act = Act::Linear;
};

// x: batch x in -> batch x out of the last layer. Shape chain validated.
Tape::Id mlp_forward(Tape& t, Tape::Id x, const std::vector<MlpLayer>& layers);

// y = x * W + b as one call; W: in x out, b: 1 x out.
Tape::Id linear(Tape& t, Tape::Id x, Param& w, Param& b);

Tape::Id apply_act(Tape& t, Tape::Id x, Act act);

// Plain (non-tape) BCE used by both the training loss tests and logloss.
double bce_mean_value(std::span<const double> pred, std::span<const double> labels);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment accumulators per parameter, step counter, hyperparams.
class AdamState {
 public:
  AdamState(std::vector<Param*> params, AdamOptions opt);

  // One bias-corrected Adam update from Param::grad; increments the step
  // counter first. Throws TrainError naming the parameter on a non-finite
  // gradient.
  void step();
  uint64_t steps() const { return step_count_; }
  const AdamOptions& options() const { return opt_; }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor2> m_, v_;
  uint64_t step_count_ = 0;
  AdamOptions opt_;
};

// Max over sampled coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
// `loss` must rebuild its graph, run backward, and return the loss value;
// parameter gradients are read from Param::grad after one analytic pass.
// Central differences with step `eps` on at most `max_coords` coordinates,
// spread round-robin over the parameter list so small params are never
// skipped.
double grad_check(const std::function<double()>& loss, std::span<Param* const> params,
                  double eps = 1e-4, size_t max_coords = 256, uint64_t seed = 1);

}  // namespace d2k
