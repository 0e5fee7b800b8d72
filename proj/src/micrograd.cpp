#include "scbf/micrograd.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <utility>

namespace scbf {

namespace {

// ReLU that never produces -0.0, so pooled maxima are bit-stable under
// column permutation.
inline Mat relu_fwd(const Mat& x) {
  return (x.array() > 0.0).select(x, Mat::Zero(x.rows(), x.cols()));
}

}  // namespace

Tape::Tape() = default;
Tape::~Tape() = default;

int Tape::push(std::unique_ptr<Node> n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Mat& Tape::value(int id) const { return node(id).value; }

double Tape::scalar(int id) const {
  const Mat& v = node(id).value;
  if (v.size() != 1) throw NumericError("scalar() on non-scalar node");
  return v(0, 0);
}

Mat Tape::grad_of(int id) const {
  const Node& n = node(id);
  if (!n.grad_live) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accum(int id, const Mat& g) {
  Node& n = node(id);
  if (!n.needs_grad) return;
  n.ensure_grad() += g;
}

void Tape::backward(int id) {
  Node& out = node(id);
  if (out.value.size() != 1) throw NumericError("backward target must be scalar");
  out.ensure_grad()(0, 0) += 1.0;
  for (int i = id; i >= 0; --i) {
    Node& n = node(i);
    if (n.grad_live && n.needs_grad) n.backward(*this);
  }
}

// ---- node types ------------------------------------------------------

namespace {
struct LeafNode final : Tape::Node {};
}  // namespace

int Tape::leaf(Mat v, bool needs_grad) {
  auto n = std::make_unique<LeafNode>();
  n->value = std::move(v);
  n->needs_grad = needs_grad;
  return push(std::move(n));
}

namespace {
struct ParamNode final : Tape::Node {
  ParamBlock* block = nullptr;
  void backward(Tape&) override { block->grad += grad; }
};
}  // namespace

int Tape::param(ParamBlock& block) {
  auto n = std::make_unique<ParamNode>();
  n->block = &block;
  n->value = block.value;
  n->needs_grad = true;
  return push(std::move(n));
}

namespace {
struct MatMulNode final : Tape::Node {
  int a = -1, b = -1;
  void backward(Tape& t) override {
    if (t.needs(a)) t.node(a).ensure_grad().noalias() += grad * t.node(b).value.transpose();
    if (t.needs(b)) t.node(b).ensure_grad().noalias() += t.node(a).value.transpose() * grad;
  }
};
}  // namespace

int Tape::matmul(int a, int b) {
  const Mat& A = node(a).value;
  const Mat& B = node(b).value;
  if (A.cols() != B.rows()) throw ConfigError("matmul shape mismatch");
  auto n = std::make_unique<MatMulNode>();
  n->a = a;
  n->b = b;
  n->value.noalias() = A * B;
  n->needs_grad = needs(a) || needs(b);
  return push(std::move(n));
}

namespace {
struct AddNode final : Tape::Node {
  int a = -1, b = -1;
  void backward(Tape& t) override {
    t.accum(a, grad);
    t.accum(b, grad);
  }
};
struct SubNode final : Tape::Node {
  int a = -1, b = -1;
  void backward(Tape& t) override {
    t.accum(a, grad);
    if (t.needs(b)) t.node(b).ensure_grad() -= grad;
  }
};
}  // namespace

int Tape::add(int a, int b) {
  if (node(a).value.rows() != node(b).value.rows() ||
      node(a).value.cols() != node(b).value.cols())
    throw ConfigError("add shape mismatch");
  auto n = std::make_unique<AddNode>();
  n->a = a;
  n->b = b;
  n->value = node(a).value + node(b).value;
  n->needs_grad = needs(a) || needs(b);
  return push(std::move(n));
}

int Tape::sub(int a, int b) {
  if (node(a).value.rows() != node(b).value.rows() ||
      node(a).value.cols() != node(b).value.cols())
    throw ConfigError("sub shape mismatch");
  auto n = std::make_unique<SubNode>();
  n->a = a;
  n->b = b;
  n->value = node(a).value - node(b).value;
  n->needs_grad = needs(a) || needs(b);
  return push(std::move(n));
}

namespace {
struct ScaleNode final : Tape::Node {
  int x = -1;
  double s = 1.0;
  void backward(Tape& t) override {
    if (t.needs(x)) t.node(x).ensure_grad() += s * grad;
  }
};
}  // namespace

int Tape::scale(int x, double s) {
  auto n = std::make_unique<ScaleNode>();
  n->x = x;
  n->s = s;
  n->value = s * node(x).value;
  n->needs_grad = needs(x);
  return push(std::move(n));
}

namespace {
struct AddColvecNode final : Tape::Node {
  int x = -1, b = -1;
  void backward(Tape& t) override {
    t.accum(x, grad);
    if (t.needs(b)) t.node(b).ensure_grad() += grad.rowwise().sum();
  }
};
}  // namespace

int Tape::add_colvec(int x, int b) {
  const Mat& X = node(x).value;
  const Mat& B = node(b).value;
  if (B.cols() != 1 || B.rows() != X.rows()) throw ConfigError("add_colvec shape mismatch");
  auto n = std::make_unique<AddColvecNode>();
  n->x = x;
  n->b = b;
  n->value = X.colwise() + B.col(0);
  n->needs_grad = needs(x) || needs(b);
  return push(std::move(n));
}

namespace {
struct ReluNode final : Tape::Node {
  int x = -1;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    const Mat& X = t.node(x).value;
    t.node(x).ensure_grad() +=
        (X.array() > 0.0).select(grad, Mat::Zero(X.rows(), X.cols()));
  }
};
}  // namespace

int Tape::relu(int x) {
  auto n = std::make_unique<ReluNode>();
  n->x = x;
  const Mat& X = node(x).value;
  n->value = relu_fwd(X);
  n->needs_grad = needs(x);
  if (X.size() > 0) note_kink(X.array().abs().minCoeff());
  return push(std::move(n));
}

namespace {
struct TanhNode final : Tape::Node {
  int x = -1;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    t.node(x).ensure_grad().array() += (1.0 - value.array().square()) * grad.array();
  }
};
}  // namespace

int Tape::tanh_op(int x) {
  auto n = std::make_unique<TanhNode>();
  n->x = x;
  n->value = node(x).value.array().tanh();
  n->needs_grad = needs(x);
  return push(std::move(n));
}

namespace {
struct ClampNode final : Tape::Node {
  int x = -1;
  double lo = 0.0, hi = 0.0;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    const Mat& X = t.node(x).value;
    Mat& gx = t.node(x).ensure_grad();
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      for (Eigen::Index i = 0; i < X.rows(); ++i)
        if (X(i, j) > lo && X(i, j) < hi) gx(i, j) += grad(i, j);
  }
};
}  // namespace

int Tape::clamp_op(int x, double lo, double hi) {
  auto n = std::make_unique<ClampNode>();
  n->x = x;
  n->lo = lo;
  n->hi = hi;
  const Mat& X = node(x).value;
  n->value = X.cwiseMax(lo).cwiseMin(hi);
  n->needs_grad = needs(x);
  if (X.size() > 0)
    note_kink(std::min((X.array() - lo).abs().minCoeff(), (hi - X.array()).abs().minCoeff()));
  return push(std::move(n));
}

namespace {
struct CwiseAffineNode final : Tape::Node {
  int x = -1;
  Vec s;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    t.node(x).ensure_grad() += (grad.array().colwise() * s.array()).matrix();
  }
};
}  // namespace

int Tape::cwise_affine(int x, const Vec& scale_v, const Vec& shift) {
  const Mat& X = node(x).value;
  if (scale_v.size() != X.rows() || shift.size() != X.rows())
    throw ConfigError("cwise_affine shape mismatch");
  auto n = std::make_unique<CwiseAffineNode>();
  n->x = x;
  n->s = scale_v;
  n->value = (X.array().colwise() * scale_v.array()).colwise() + shift.array();
  n->needs_grad = needs(x);
  return push(std::move(n));
}

namespace {
struct VStackNode final : Tape::Node {
  int a = -1, b = -1;
  Eigen::Index top = 0;
  void backward(Tape& t) override {
    if (t.needs(a)) t.node(a).ensure_grad() += grad.topRows(top);
    if (t.needs(b)) t.node(b).ensure_grad() += grad.bottomRows(grad.rows() - top);
  }
};
}  // namespace

int Tape::vstack(int a, int b) {
  const Mat& A = node(a).value;
  const Mat& B = node(b).value;
  if (A.cols() != B.cols()) throw ConfigError("vstack column mismatch");
  auto n = std::make_unique<VStackNode>();
  n->a = a;
  n->b = b;
  n->top = A.rows();
  n->value.resize(A.rows() + B.rows(), A.cols());
  n->value << A, B;
  n->needs_grad = needs(a) || needs(b);
  return push(std::move(n));
}

namespace {
struct RowsNode final : Tape::Node {
  int x = -1;
  int first = 0, count = 0;
  void backward(Tape& t) override {
    if (t.needs(x)) t.node(x).ensure_grad().middleRows(first, count) += grad;
  }
};
}  // namespace

int Tape::rows(int x, int first, int count) {
  const Mat& X = node(x).value;
  if (first < 0 || count < 0 || first + count > X.rows())
    throw ConfigError("rows slice out of range");
  auto n = std::make_unique<RowsNode>();
  n->x = x;
  n->first = first;
  n->count = count;
  n->value = X.middleRows(first, count);
  n->needs_grad = needs(x);
  return push(std::move(n));
}

namespace {
struct SegRowMaxNode final : Tape::Node {
  int x = -1;
  std::vector<int> offsets;
  Eigen::MatrixXi argmax;  // absolute column index, -1 for empty segment
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    Mat& gx = t.node(x).ensure_grad();
    for (Eigen::Index s = 0; s < value.cols(); ++s)
      for (Eigen::Index r = 0; r < value.rows(); ++r) {
        const int j = argmax(r, s);
        if (j >= 0) gx(r, j) += grad(r, s);
      }
  }
};
}  // namespace

int Tape::seg_row_max(int x, std::vector<int> offsets) {
  const Mat& X = node(x).value;
  const int S = static_cast<int>(offsets.size()) - 1;
  if (S < 0 || offsets.front() != 0 || offsets.back() != X.cols())
    throw ConfigError("seg_row_max bad offsets");
  auto n = std::make_unique<SegRowMaxNode>();
  n->x = x;
  n->value = Mat::Zero(X.rows(), S);
  n->argmax = Eigen::MatrixXi::Constant(X.rows(), S, -1);
  for (int s = 0; s < S; ++s) {
    const int lo = offsets[static_cast<size_t>(s)];
    const int hi = offsets[static_cast<size_t>(s) + 1];
    if (hi < lo) throw ConfigError("seg_row_max decreasing offsets");
    if (hi == lo) continue;  // empty neighbourhood pools to the zero floor
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      int best = lo;
      double best_v = X(r, lo);
      double second = -std::numeric_limits<double>::infinity();
      for (int j = lo + 1; j < hi; ++j) {
        const double v = X(r, j);
        if (v > best_v) {
          second = best_v;
          best_v = v;
          best = j;
        } else if (v > second) {
          second = v;
        }
      }
      n->value(r, s) = best_v;
      n->argmax(static_cast<int>(r), s) = best;
      // Exact ties (typically rows dead at the ReLU floor) route identical
      // gradients either way; only near-ties are a finite-difference hazard.
      if (std::isfinite(second) && second < best_v) note_kink(best_v - second);
    }
  }
  n->offsets = std::move(offsets);
  n->needs_grad = needs(x);
  return push(std::move(n));
}

int Tape::row_max_pool(int x) {
  const Mat& X = node(x).value;
  return seg_row_max(x, {0, static_cast<int>(X.cols())});
}

namespace {
struct SegBroadcastSubNode final : Tape::Node {
  int x = -1;
  std::vector<int> offsets;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    Mat& gx = t.node(x).ensure_grad();
    const int S = static_cast<int>(offsets.size()) - 1;
    for (int s = 0; s < S; ++s)
      for (int j = offsets[static_cast<size_t>(s)]; j < offsets[static_cast<size_t>(s) + 1]; ++j)
        gx.col(s) -= grad.col(j);
  }
};
}  // namespace

int Tape::seg_broadcast_sub(Mat cols, int x, std::vector<int> offsets) {
  const Mat& X = node(x).value;
  const int S = static_cast<int>(offsets.size()) - 1;
  if (S != X.cols() || offsets.front() != 0 || offsets.back() != cols.cols())
    throw ConfigError("seg_broadcast_sub bad offsets");
  if (cols.rows() != X.rows()) throw ConfigError("seg_broadcast_sub row mismatch");
  auto n = std::make_unique<SegBroadcastSubNode>();
  n->x = x;
  n->value = std::move(cols);
  for (int s = 0; s < S; ++s)
    for (int j = offsets[static_cast<size_t>(s)]; j < offsets[static_cast<size_t>(s) + 1]; ++j)
      n->value.col(j) -= X.col(s);
  n->offsets = std::move(offsets);
  n->needs_grad = needs(x);
  return push(std::move(n));
}

namespace {
struct HingeSumNode final : Tape::Node {
  int x = -1;
  double coeff = 1.0, margin = 0.0;
  std::vector<std::uint8_t> mask;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    const Mat& X = t.node(x).value;
    Mat& gx = t.node(x).ensure_grad();
    const double g = grad(0, 0);
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      if (!mask[static_cast<size_t>(j)]) continue;
      if (margin - coeff * X(0, j) > 0.0) gx(0, j) -= g * coeff;
    }
  }
};
}  // namespace

int Tape::hinge_sum(int x, double coeff, double margin, std::vector<std::uint8_t> mask) {
  const Mat& X = node(x).value;
  if (X.rows() != 1) throw ConfigError("hinge_sum expects a row vector");
  if (static_cast<Eigen::Index>(mask.size()) != X.cols())
    throw ConfigError("hinge_sum mask size mismatch");
  auto n = std::make_unique<HingeSumNode>();
  n->x = x;
  n->coeff = coeff;
  n->margin = margin;
  double total = 0.0;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    if (!mask[static_cast<size_t>(j)]) continue;
    const double arg = margin - coeff * X(0, j);
    note_kink(std::abs(arg));
    if (arg > 0.0) total += arg;
  }
  n->value = Mat::Constant(1, 1, total);
  n->mask = std::move(mask);
  n->needs_grad = needs(x);
  return push(std::move(n));
}

namespace {
struct ColNormSumNode final : Tape::Node {
  int x = -1;
  Vec norms;
  std::vector<std::uint8_t> mask;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    const Mat& X = t.node(x).value;
    Mat& gx = t.node(x).ensure_grad();
    const double g = grad(0, 0);
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      if (mask[static_cast<size_t>(j)] && norms(j) > 1e-12)
        gx.col(j) += (g / norms(j)) * X.col(j);
  }
};
}  // namespace

int Tape::col_norm_sum(int x, std::vector<std::uint8_t> mask) {
  const Mat& X = node(x).value;
  if (mask.empty()) mask.assign(static_cast<size_t>(X.cols()), 1);
  if (static_cast<Eigen::Index>(mask.size()) != X.cols())
    throw ConfigError("col_norm_sum mask size mismatch");
  auto n = std::make_unique<ColNormSumNode>();
  n->x = x;
  n->norms = X.colwise().norm();
  double total = 0.0;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    if (!mask[static_cast<size_t>(j)]) continue;
    total += n->norms(j);
    note_kink(n->norms(j));
  }
  n->value = Mat::Constant(1, 1, total);
  n->mask = std::move(mask);
  n->needs_grad = needs(x);
  return push(std::move(n));
}

namespace {
struct SumAllNode final : Tape::Node {
  int x = -1;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    const Mat& X = t.node(x).value;
    t.node(x).ensure_grad().array() += grad(0, 0) * Eigen::ArrayXXd::Ones(X.rows(), X.cols());
  }
};
struct SumSqNode final : Tape::Node {
  int x = -1;
  void backward(Tape& t) override {
    if (!t.needs(x)) return;
    t.node(x).ensure_grad() += 2.0 * grad(0, 0) * t.node(x).value;
  }
};
}  // namespace

int Tape::sum_all(int x) {
  auto n = std::make_unique<SumAllNode>();
  n->x = x;
  n->value = Mat::Constant(1, 1, node(x).value.sum());
  n->needs_grad = needs(x);
  return push(std::move(n));
}

int Tape::sum_sq(int x) {
  auto n = std::make_unique<SumSqNode>();
  n->x = x;
  n->value = Mat::Constant(1, 1, node(x).value.squaredNorm());
  n->needs_grad = needs(x);
  return push(std::move(n));
}

// ---- optimizer and checkpoints ----------------------------------------

bool sgd_step(const std::vector<ParamBlock*>& params, double lr, double weight_decay) {
  for (const ParamBlock* p : params) {
    if (!p->grad.allFinite()) {
      for (ParamBlock* q : params) q->zero_grad();
      return false;
    }
  }
  for (ParamBlock* p : params) {
    p->value.noalias() -= lr * (p->grad + weight_decay * p->value);
    p->zero_grad();
  }
  return true;
}

void save_checkpoint(const std::vector<const ParamBlock*>& blocks,
                     const std::string& dynamics_kind, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["dynamics_kind"] = dynamics_kind;
  nlohmann::json arr = nlohmann::json::array();
  for (const ParamBlock* b : blocks) {
    nlohmann::json bj;
    bj["name"] = b->name;
    bj["shape"] = {b->value.rows(), b->value.cols()};
    std::vector<double> vals;
    vals.reserve(static_cast<size_t>(b->value.size()));
    for (Eigen::Index r = 0; r < b->value.rows(); ++r)
      for (Eigen::Index c = 0; c < b->value.cols(); ++c) vals.push_back(b->value(r, c));
    bj["values"] = std::move(vals);
    arr.push_back(std::move(bj));
  }
  j["blocks"] = std::move(arr);
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out << j.dump();
  if (!out) throw CheckpointError("failed writing checkpoint: " + path);
}

namespace {

nlohmann::json parse_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("unreadable checkpoint " + path + ": " + e.what());
  }
  if (!j.contains("format_version") || !j["format_version"].is_number_integer())
    throw CheckpointError("checkpoint missing format_version: " + path);
  if (j["format_version"].get<int>() != kCheckpointFormatVersion)
    throw CheckpointError("unsupported checkpoint format_version in " + path);
  if (!j.contains("dynamics_kind") || !j.contains("blocks"))
    throw CheckpointError("checkpoint missing required fields: " + path);
  return j;
}

}  // namespace

std::string checkpoint_kind(const std::string& path) {
  return parse_checkpoint(path)["dynamics_kind"].get<std::string>();
}

void load_checkpoint(const std::vector<ParamBlock*>& blocks,
                     const std::string& expected_kind, const std::string& path) {
  nlohmann::json j = parse_checkpoint(path);
  const std::string kind = j["dynamics_kind"].get<std::string>();
  if (kind != expected_kind)
    throw CheckpointError("checkpoint dynamics_kind " + kind + " does not match " + expected_kind);
  const auto& arr = j["blocks"];
  if (!arr.is_array() || arr.size() != blocks.size())
    throw CheckpointError("checkpoint block count mismatch in " + path);
  for (ParamBlock* b : blocks) {
    bool found = false;
    for (const auto& bj : arr) {
      if (bj.at("name").get<std::string>() != b->name) continue;
      found = true;
      const auto shape = bj.at("shape");
      const Eigen::Index r = shape.at(0).get<Eigen::Index>();
      const Eigen::Index c = shape.at(1).get<Eigen::Index>();
      if (r != b->value.rows() || c != b->value.cols())
        throw CheckpointError("shape mismatch for block " + b->name);
      const auto& vals = bj.at("values");
      if (static_cast<Eigen::Index>(vals.size()) != r * c)
        throw CheckpointError("value count mismatch for block " + b->name);
      size_t k = 0;
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index jj = 0; jj < c; ++jj) b->value(i, jj) = vals.at(k++).get<double>();
      if (!b->value.allFinite())
        throw CheckpointError("non-finite values in block " + b->name);
      b->zero_grad();
    }
    if (!found) throw CheckpointError("checkpoint missing block " + b->name);
  }
}

}  // namespace scbf
