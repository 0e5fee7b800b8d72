#include "scbf/certificates.hpp"

#include <cmath>

#include "scbf/rng.hpp"

namespace scbf {

std::vector<ParamBlock*> MlpParams::blocks() {
  return {&enc1_w, &enc1_b, &enc2_w, &enc2_b, &own_w, &own_b,
          &head1_w, &head1_b, &head2_w, &head2_b};
}

std::vector<const ParamBlock*> MlpParams::blocks() const {
  return {&enc1_w, &enc1_b, &enc2_w, &enc2_b, &own_w, &own_b,
          &head1_w, &head1_b, &head2_w, &head2_b};
}

namespace {

ParamBlock gaussian_block(const std::string& name, int rows, int cols, Rng& rng, double gain) {
  Mat w(rows, cols);
  const double std_dev = gain * std::sqrt(2.0 / static_cast<double>(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) w(r, c) = std_dev * rng.normal();
  return ParamBlock(name, std::move(w));
}

MlpParams make_mlp(const std::string& prefix, int enc_in_dim, int own_in_dim, int out_dim,
                   Rng& rng, double head_gain) {
  MlpParams p;
  p.enc1_w = gaussian_block(prefix + ".enc1.w", kEncoderWidth, enc_in_dim, rng, 1.0);
  p.enc1_b = ParamBlock(prefix + ".enc1.b", Mat::Zero(kEncoderWidth, 1));
  p.enc2_w = gaussian_block(prefix + ".enc2.w", kEncoderWidth, kEncoderWidth, rng, 1.0);
  p.enc2_b = ParamBlock(prefix + ".enc2.b", Mat::Zero(kEncoderWidth, 1));
  p.own_w = gaussian_block(prefix + ".own.w", kOwnWidth, own_in_dim, rng, 1.0);
  p.own_b = ParamBlock(prefix + ".own.b", Mat::Zero(kOwnWidth, 1));
  p.head1_w = gaussian_block(prefix + ".head1.w", kHeadWidth, kOwnWidth + kEncoderWidth, rng, 1.0);
  p.head1_b = ParamBlock(prefix + ".head1.b", Mat::Zero(kHeadWidth, 1));
  p.head2_w = gaussian_block(prefix + ".head2.w", out_dim, kHeadWidth, rng, head_gain);
  p.head2_b = ParamBlock(prefix + ".head2.b", Mat::Zero(out_dim, 1));
  return p;
}

}  // namespace

CertificatePair CertificatePair::init(const DynamicsKind& kind, std::uint64_t seed) {
  CertificatePair pair;
  pair.kind = kind;
  pair.dt = kind.dt;
  Rng rng(mix_seed(seed, 0x9a17a9));
  // Full-scale head for the certificate so its gradients carry real weight
  // from the start; near-zero policy head so initial actions sit at the box
  // center while the goal term pulls toward the reference controller.
  pair.cbf = make_mlp("cbf", encoder_input_dim(kind), kind.state_dim(), 1, rng, 1.0);
  pair.policy = make_mlp("policy", encoder_input_dim(kind), kind.state_dim(),
                         kind.control_dim(), rng, 0.01);
  return pair;
}

Eigen::MatrixXd augment_columns(const DynamicsKind& kind, const Eigen::MatrixXd& cols) {
  const int pd = kind.pos_dim();
  Eigen::MatrixXd out(cols.rows() + 1, cols.cols());
  out.topRows(cols.rows()) = cols;
  for (Eigen::Index j = 0; j < cols.cols(); ++j)
    out(cols.rows(), j) = cols.col(j).head(pd).norm();
  return out;
}

std::vector<ParamBlock*> CertificatePair::blocks() {
  std::vector<ParamBlock*> out = cbf.blocks();
  const auto pb = policy.blocks();
  out.insert(out.end(), pb.begin(), pb.end());
  return out;
}

std::vector<const ParamBlock*> CertificatePair::blocks() const {
  std::vector<const ParamBlock*> out = cbf.blocks();
  const auto pb = policy.blocks();
  out.insert(out.end(), pb.begin(), pb.end());
  return out;
}

void CertificatePair::save(const std::string& path) const {
  save_checkpoint(blocks(), dynamics_model_name(kind.model), path);
}

CertificatePair CertificatePair::load(const DynamicsKind& kind, const std::string& path) {
  CertificatePair pair = init(kind, 0);
  load_checkpoint(pair.blocks(), dynamics_model_name(kind.model), path);
  return pair;
}

Eigen::VectorXd own_features(const DynamicsKind& kind, const Eigen::VectorXd& state,
                             const Eigen::VectorXd& goal) {
  const int pd = kind.pos_dim();
  Eigen::VectorXd rel = state.head(pd) - goal;
  const double dist = rel.norm();
  if (dist > kGoalWaypointCap) rel *= kGoalWaypointCap / dist;
  Eigen::VectorXd f(kind.state_dim());
  if (kind.model == DynamicsModel::DoubleIntegrator2D)
    f << rel, state.segment(2, 2);
  else
    f << rel, state.segment(3, 3), state.segment(6, 2);
  return f;
}

// ---- inference forward ----------------------------------------------------
//
// Columns are processed one GEMV at a time so each column's arithmetic is
// independent of its position; with the max pool this makes the outputs
// bitwise invariant to column permutation and duplication.

namespace {

inline Vec relu_vec(const Vec& x) {
  return (x.array() > 0.0).select(x, Vec::Zero(x.size()));
}

Vec mlp_forward(const DynamicsKind& kind, const MlpParams& p, const Vec& own_feat,
                const Eigen::MatrixXd& cols) {
  Vec pooled = Vec::Zero(kEncoderWidth);
  if (cols.cols() > 0) {
    const Mat inputs = augment_columns(kind, cols);
    Mat z(kEncoderWidth, inputs.cols());
    for (Eigen::Index j = 0; j < inputs.cols(); ++j) {
      const Vec z1 = relu_vec(p.enc1_w.value * inputs.col(j) + p.enc1_b.value.col(0));
      z.col(j) = relu_vec(p.enc2_w.value * z1 + p.enc2_b.value.col(0));
    }
    pooled = z.rowwise().maxCoeff();
  }
  const Vec own = relu_vec(p.own_w.value * own_feat + p.own_b.value.col(0));
  Vec cat(kOwnWidth + kEncoderWidth);
  cat << own, pooled;
  const Vec g1 = relu_vec(p.head1_w.value * cat + p.head1_b.value.col(0));
  return p.head2_w.value * g1 + p.head2_b.value.col(0);
}

}  // namespace

double cbf_value(const CertificatePair& pair, const Eigen::VectorXd& own_feat,
                 const Observation& obs) {
  if (own_feat.size() != pair.kind.state_dim())
    throw ConfigError("own feature dimensionality mismatch");
  const double h = mlp_forward(pair.kind, pair.cbf, own_feat, obs.columns)(0);
  if (!std::isfinite(h)) throw NumericError("non-finite CBF value");
  return h;
}

Eigen::VectorXd policy_action(const CertificatePair& pair, const Eigen::VectorXd& own_feat,
                              const Observation& obs) {
  if (own_feat.size() != pair.kind.state_dim())
    throw ConfigError("own feature dimensionality mismatch");
  const Vec raw = mlp_forward(pair.kind, pair.policy, own_feat, obs.columns);
  const Vec center = 0.5 * (pair.kind.control_high + pair.kind.control_low);
  const Vec half = 0.5 * (pair.kind.control_high - pair.kind.control_low);
  const Vec u = center.array() + half.array() * raw.array().tanh();
  if (!u.allFinite()) throw NumericError("non-finite policy action");
  return clamp_control(pair.kind, u);
}

double h_dot_numeric(const CertificatePair& pair, const CbfSample& sample) {
  if (!(pair.dt > 0.0)) throw ConfigError("dt must be positive");
  const double h_now =
      cbf_value(pair, own_features(pair.kind, sample.state, sample.goal), sample.obs);
  Observation next_obs;
  next_obs.columns = sample.next_entities.colwise() - sample.next_state;
  next_obs.kinds = sample.obs.kinds;
  const double h_next =
      cbf_value(pair, own_features(pair.kind, sample.next_state, sample.goal), next_obs);
  return (h_next - h_now) / pair.dt;
}

// ---- batched training graph ------------------------------------------------

namespace {

struct MlpRefs {
  int enc1_w, enc1_b, enc2_w, enc2_b, own_w, own_b, head1_w, head1_b, head2_w, head2_b;
};

MlpRefs register_mlp(Tape& t, MlpParams& p) {
  return {t.param(p.enc1_w), t.param(p.enc1_b), t.param(p.enc2_w), t.param(p.enc2_b),
          t.param(p.own_w),  t.param(p.own_b),  t.param(p.head1_w), t.param(p.head1_b),
          t.param(p.head2_w), t.param(p.head2_b)};
}

int mlp_forward_tape(Tape& t, const MlpRefs& p, int own, int cols,
                     const std::vector<int>& offsets) {
  const int z1 = t.relu(t.affine(p.enc1_w, p.enc1_b, cols));
  const int z2 = t.relu(t.affine(p.enc2_w, p.enc2_b, z1));
  const int pooled = t.seg_row_max(z2, offsets);
  const int ow = t.relu(t.affine(p.own_w, p.own_b, own));
  const int cat = t.vstack(ow, pooled);
  const int g1 = t.relu(t.affine(p.head1_w, p.head1_b, cat));
  return t.affine(p.head2_w, p.head2_b, g1);
}

struct LossNodes {
  int lc_init = -1, lc_dang = -1, lc_deriv = -1, lg = -1, total = -1;
};

// Builds the full Eq-style joint loss graph for one batch. The next own
// state is reconstructed in-graph from the policy output with the same Euler
// arithmetic as dynamics::step, so gradients flow through the action's
// effect on h(t+dt); observed entities keep their recorded next states.
LossNodes build_loss_graph(Tape& tape, CertificatePair& pair, SampleBatch batch,
                           bool strict_x0) {
  const DynamicsKind& kind = pair.kind;
  const int n = kind.state_dim();
  const int pd = kind.pos_dim();
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw ConfigError("loss batch must be non-empty");

  std::vector<int> offsets(static_cast<size_t>(B) + 1, 0);
  for (int s = 0; s < B; ++s)
    offsets[static_cast<size_t>(s) + 1] =
        offsets[static_cast<size_t>(s)] + batch[static_cast<size_t>(s)]->obs.count();
  const int total_cols = offsets.back();

  Mat own_t(n, B), cols_t(n, total_cols);
  // Next-step columns split into constant rows (relative position and its
  // norm; the Euler position update does not depend on the action) and the
  // velocity/tilt rows that do.
  Mat next_rel_pos_aug(pd + 1, total_cols), next_entities_veltheta(n - pd, total_cols);
  Mat pos_next_abs(pd, B), own_next_rel(pd, B), vel_t(pd, B), uref(kind.control_dim(), B);
  Mat theta_t(2, B), vel_xy_next(2, B), vz_t(1, B);
  std::vector<std::uint8_t> mask_init(static_cast<size_t>(B)), mask_dang(static_cast<size_t>(B)),
      mask_goal(static_cast<size_t>(B));

  for (int s = 0; s < B; ++s) {
    const CbfSample& smp = *batch[static_cast<size_t>(s)];
    if (smp.state.size() != n) throw ConfigError("sample state dimensionality mismatch");
    own_t.col(s) = own_features(kind, smp.state, smp.goal);
    cols_t.middleCols(offsets[static_cast<size_t>(s)], smp.obs.count()) = smp.obs.columns;
    const Eigen::VectorXd pos_next = smp.state.head(pd) + pair.dt * smp.state.segment(pd, pd);
    pos_next_abs.col(s) = pos_next;
    for (int c = 0; c < smp.obs.count(); ++c) {
      const int col = offsets[static_cast<size_t>(s)] + c;
      const Eigen::VectorXd rel_pos = smp.next_entities.col(c).head(pd) - pos_next;
      next_rel_pos_aug.col(col).head(pd) = rel_pos;
      next_rel_pos_aug(pd, col) = rel_pos.norm();
      next_entities_veltheta.col(col) = smp.next_entities.col(c).tail(n - pd);
    }
    Eigen::VectorXd rel = pos_next - smp.goal;
    const double dist = rel.norm();
    if (dist > kGoalWaypointCap) rel *= kGoalWaypointCap / dist;
    own_next_rel.col(s) = rel;
    vel_t.col(s) = smp.state.segment(pd, pd);
    uref.col(s) = smp.u_ref;
    if (kind.model == DynamicsModel::Drone3D) {
      theta_t.col(s) = smp.state.segment(6, 2);
      vel_xy_next(0, s) = smp.state(3) + pair.dt * kind.gravity * std::tan(smp.state(6));
      vel_xy_next(1, s) = smp.state(4) + pair.dt * kind.gravity * std::tan(smp.state(7));
      vz_t(0, s) = smp.state(5);
    }
    mask_dang[static_cast<size_t>(s)] = smp.label == RegionLabel::Dangerous;
    // Relaxed mode floors h at +gamma on safe samples, but not inside the
    // conflict band: hdot >= -lambda*h keeps any compliant h positive
    // forever, so a certificate floored right up to the boundary could never
    // admit the descent it needs ahead of a close pass.
    mask_init[static_cast<size_t>(s)] =
        strict_x0 ? smp.label == RegionLabel::Initial
                  : smp.label != RegionLabel::Dangerous && smp.conflict_free;
    mask_goal[static_cast<size_t>(s)] = smp.conflict_free;
  }

  const MlpRefs cbf_refs = register_mlp(tape, pair.cbf);
  const MlpRefs pol_refs = register_mlp(tape, pair.policy);
  const int own_node = tape.leaf(own_t);
  const int cols_node = tape.leaf(augment_columns(kind, cols_t));

  const int h_t = mlp_forward_tape(tape, cbf_refs, own_node, cols_node, offsets);

  const int raw_u = mlp_forward_tape(tape, pol_refs, own_node, cols_node, offsets);
  const Vec center = 0.5 * (kind.control_high + kind.control_low);
  const Vec half = 0.5 * (kind.control_high - kind.control_low);
  const int u = tape.cwise_affine(tape.tanh_op(raw_u), half, center);

  // Next own velocity/tilt (action-dependent) and network features.
  int own_next_veltheta, own_next_feat;
  if (kind.model == DynamicsModel::DoubleIntegrator2D) {
    own_next_veltheta = tape.add(tape.leaf(vel_t), tape.scale(u, pair.dt));
    own_next_feat = tape.vstack(tape.leaf(own_next_rel), own_next_veltheta);
  } else {
    const int omega = tape.rows(u, 0, 2);
    const int az = tape.rows(u, 2, 1);
    const int vz_next = tape.add(tape.leaf(vz_t), tape.scale(az, pair.dt));
    const int v_next = tape.vstack(tape.leaf(vel_xy_next), vz_next);
    const double lim = 1.5707963267948966 - kThetaMargin;
    const int theta_next =
        tape.clamp_op(tape.add(tape.leaf(theta_t), tape.scale(omega, pair.dt)), -lim, lim);
    own_next_veltheta = tape.vstack(v_next, theta_next);
    own_next_feat = tape.vstack(tape.leaf(own_next_rel), own_next_veltheta);
  }

  const int cols_next_veltheta =
      tape.seg_broadcast_sub(next_entities_veltheta, own_next_veltheta, offsets);
  const int cols_next =
      tape.vstack(tape.rows(tape.leaf(next_rel_pos_aug), 0, pd),
                  tape.vstack(cols_next_veltheta,
                              tape.rows(tape.leaf(next_rel_pos_aug), pd, 1)));
  const int h_next = mlp_forward_tape(tape, cbf_refs, own_next_feat, cols_next, offsets);

  // The derivative hinge enforces hdot + lambda*h >= gamma through its
  // dt-scaled equivalent dh + dt*(lambda*h - gamma) >= 0. Hinging the raw
  // difference quotient would weight its gradient on h(t+dt) by 1/dt,
  // drowning the dangerous-set hinge and freezing the certificate flat.
  const int dh_plus =
      tape.add(tape.sub(h_next, h_t), tape.scale(h_t, pair.dt * pair.lambda));

  std::vector<std::uint8_t> mask_deriv(static_cast<size_t>(B));
  for (int s = 0; s < B; ++s)
    mask_deriv[static_cast<size_t>(s)] = tape.value(h_t)(0, s) >= 0.0;

  LossNodes nodes;
  nodes.lc_init = tape.hinge_sum(h_t, 1.0, pair.gamma, mask_init);
  nodes.lc_dang = tape.hinge_sum(h_t, -1.0, pair.gamma, mask_dang);
  nodes.lc_deriv = tape.hinge_sum(dh_plus, 1.0, pair.gamma * pair.dt, std::move(mask_deriv));
  nodes.lg = tape.col_norm_sum(tape.sub(u, tape.leaf(uref)), std::move(mask_goal));
  nodes.total = tape.add(tape.add(nodes.lc_init, nodes.lc_dang),
                         tape.add(nodes.lc_deriv, tape.scale(nodes.lg, pair.eta)));
  return nodes;
}

LossBreakdown read_breakdown(const Tape& tape, const LossNodes& nodes) {
  LossBreakdown out;
  out.lc_init = tape.scalar(nodes.lc_init);
  out.lc_dang = tape.scalar(nodes.lc_dang);
  out.lc_deriv = tape.scalar(nodes.lc_deriv);
  out.lg = tape.scalar(nodes.lg);
  out.lc = out.lc_init + out.lc_dang + out.lc_deriv;
  out.total = tape.scalar(nodes.total);
  return out;
}

}  // namespace

LossBreakdown total_loss(const CertificatePair& pair, SampleBatch batch, bool strict_x0) {
  Tape tape;
  auto& mut = const_cast<CertificatePair&>(pair);  // graph only reads values
  const LossNodes nodes = build_loss_graph(tape, mut, batch, strict_x0);
  return read_breakdown(tape, nodes);
}

LossBreakdown total_loss_probe(const CertificatePair& pair, SampleBatch batch, bool strict_x0,
                               double* kink_margin) {
  Tape tape;
  auto& mut = const_cast<CertificatePair&>(pair);
  const LossNodes nodes = build_loss_graph(tape, mut, batch, strict_x0);
  if (kink_margin) *kink_margin = tape.kink_margin();
  return read_breakdown(tape, nodes);
}

double cbf_loss(const CertificatePair& pair, SampleBatch batch, bool strict_x0) {
  return total_loss(pair, batch, strict_x0).lc;
}

double goal_loss(const CertificatePair& pair, SampleBatch batch) {
  return total_loss(pair, batch).lg;
}

LossBreakdown total_loss_backward(CertificatePair& pair, SampleBatch batch, bool strict_x0) {
  Tape tape;
  const LossNodes nodes = build_loss_graph(tape, pair, batch, strict_x0);
  tape.backward(nodes.total);
  return read_breakdown(tape, nodes);
}

double cbf_regression_backward(CertificatePair& pair, SampleBatch batch,
                               const std::vector<double>& targets) {
  const int B = static_cast<int>(batch.size());
  if (B == 0 || targets.size() != batch.size())
    throw ConfigError("regression batch/target mismatch");
  const DynamicsKind& kind = pair.kind;
  const int n = kind.state_dim();
  std::vector<int> offsets(static_cast<size_t>(B) + 1, 0);
  for (int s = 0; s < B; ++s)
    offsets[static_cast<size_t>(s) + 1] =
        offsets[static_cast<size_t>(s)] + batch[static_cast<size_t>(s)]->obs.count();
  Mat own(n, B), cols(n, offsets.back()), target_row(1, B);
  for (int s = 0; s < B; ++s) {
    const CbfSample& smp = *batch[static_cast<size_t>(s)];
    own.col(s) = own_features(kind, smp.state, smp.goal);
    cols.middleCols(offsets[static_cast<size_t>(s)], smp.obs.count()) = smp.obs.columns;
    target_row(0, s) = targets[static_cast<size_t>(s)];
  }
  Tape tape;
  const MlpRefs refs = register_mlp(tape, pair.cbf);
  const int h = mlp_forward_tape(tape, refs, tape.leaf(own),
                                 tape.leaf(augment_columns(kind, cols)), offsets);
  const int loss = tape.scale(tape.sum_sq(tape.sub(h, tape.leaf(target_row))),
                              1.0 / static_cast<double>(B));
  tape.backward(loss);
  return tape.scalar(loss);
}

double policy_regression_backward(CertificatePair& pair, SampleBatch batch,
                                  const Eigen::MatrixXd& targets) {
  const int B = static_cast<int>(batch.size());
  if (B == 0 || targets.cols() != B || targets.rows() != pair.kind.control_dim())
    throw ConfigError("policy regression batch/target mismatch");
  const DynamicsKind& kind = pair.kind;
  const int n = kind.state_dim();
  std::vector<int> offsets(static_cast<size_t>(B) + 1, 0);
  for (int s = 0; s < B; ++s)
    offsets[static_cast<size_t>(s) + 1] =
        offsets[static_cast<size_t>(s)] + batch[static_cast<size_t>(s)]->obs.count();
  Mat own(n, B), cols(n, offsets.back());
  for (int s = 0; s < B; ++s) {
    const CbfSample& smp = *batch[static_cast<size_t>(s)];
    own.col(s) = own_features(kind, smp.state, smp.goal);
    cols.middleCols(offsets[static_cast<size_t>(s)], smp.obs.count()) = smp.obs.columns;
  }
  Tape tape;
  const MlpRefs refs = register_mlp(tape, pair.policy);
  const int raw = mlp_forward_tape(tape, refs, tape.leaf(own),
                                   tape.leaf(augment_columns(kind, cols)), offsets);
  const Vec center = 0.5 * (kind.control_high + kind.control_low);
  const Vec half = 0.5 * (kind.control_high - kind.control_low);
  const int u = tape.cwise_affine(tape.tanh_op(raw), half, center);
  const int loss = tape.scale(tape.sum_sq(tape.sub(u, tape.leaf(targets))),
                              1.0 / static_cast<double>(B));
  tape.backward(loss);
  return tape.scalar(loss);
}

}  // namespace scbf
