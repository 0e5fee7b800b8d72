#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "scbf/errors.hpp"

namespace scbf {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Named tensor plus a same-shape gradient accumulator.
struct ParamBlock {
  std::string name;
  Mat value, grad;

  ParamBlock() = default;
  ParamBlock(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {
    grad = Mat::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
};

// Eager reverse-mode tape over dense matrices. Nodes are appended in
// evaluation order, so descending index order is a valid topological order
// for the backward sweep; gradients accumulate additively at fan-out.
//
// The tape also tracks the distance to the nearest nonsmooth point
// (ReLU/clamp/hinge kinks, max-pool ties) crossed by the forward values;
// finite-difference tests use it to reject samples too close to a kink.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;
    bool grad_live = false;
    bool needs_grad = false;
    virtual ~Node() = default;
    virtual void backward(Tape&) {}
    Mat& ensure_grad() {
      if (!grad_live) {
        grad = Mat::Zero(value.rows(), value.cols());
        grad_live = true;
      }
      return grad;
    }
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int leaf(Mat v, bool needs_grad = false);
  int param(ParamBlock& block);

  int matmul(int a, int b);
  int add(int a, int b);
  int sub(int a, int b);
  int scale(int x, double s);
  int add_colvec(int x, int b);           // broadcast column vector over columns
  int affine(int w, int b, int x) { return add_colvec(matmul(w, x), b); }
  int relu(int x);
  int tanh_op(int x);
  int clamp_op(int x, double lo, double hi);
  int cwise_affine(int x, const Vec& scale, const Vec& shift);  // shift + scale.*col
  int vstack(int a, int b);
  int rows(int x, int first, int count);

  // Row-wise max over all columns; empty input pools to the zero vector.
  int row_max_pool(int x);
  // Row-wise max per column segment [offsets[s], offsets[s+1]); empty
  // segments pool to zero. Gradient routes to the first maximizing column.
  int seg_row_max(int x, std::vector<int> offsets);
  // out.col(j) = cols.col(j) - x.col(segment_of(j)); cols is a constant.
  int seg_broadcast_sub(Mat cols, int x, std::vector<int> offsets);

  // sum_j mask[j] * max(0, margin - coeff * x(0, j)); x must be a row vector.
  int hinge_sum(int x, double coeff, double margin, std::vector<std::uint8_t> mask);
  // Sum of column Euclidean norms; an optional mask selects columns.
  int col_norm_sum(int x, std::vector<std::uint8_t> mask = {});
  int sum_all(int x);
  int sum_sq(int x);

  const Mat& value(int id) const;
  double scalar(int id) const;
  Mat grad_of(int id) const;  // zero matrix if untouched by backward
  // Seeds d(out)=1 at a scalar node and sweeps in reverse; parameter node
  // gradients are added into their ParamBlock accumulators.
  void backward(int id);

  double kink_margin() const { return kink_margin_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  Node& node(int id) { return *nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return *nodes_[static_cast<size_t>(id)]; }
  bool needs(int id) const { return nodes_[static_cast<size_t>(id)]->needs_grad; }
  void accum(int id, const Mat& g);
  void note_kink(double d) {
    if (d < kink_margin_) kink_margin_ = d;
  }

 private:
  int push(std::unique_ptr<Node> n);
  std::vector<std::unique_ptr<Node>> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

// One SGD update: v <- v - lr * (grad + weight_decay * v), then grads are
// zeroed. If any gradient is non-finite the whole update is skipped (grads
// still zeroed) and false is returned so the caller can log the incident.
bool sgd_step(const std::vector<ParamBlock*>& params, double lr, double weight_decay);

inline constexpr int kCheckpointFormatVersion = 1;

// Checkpoint files are JSON: {format_version, dynamics_kind,
// blocks: [{name, shape, values (row-major)}]}. Values round-trip bitwise.
void save_checkpoint(const std::vector<const ParamBlock*>& blocks,
                     const std::string& dynamics_kind, const std::string& path);
std::string checkpoint_kind(const std::string& path);
void load_checkpoint(const std::vector<ParamBlock*>& blocks,
                     const std::string& expected_kind, const std::string& path);

}  // namespace scbf
