#include "scbf/refiner.hpp"

#include <atomic>
#include <cmath>
#include <iostream>

namespace scbf {

namespace {

struct PhiEval {
  double violation = 0.0;  // hinge term
  double phi = 0.0;        // hinge + mu*||e||^2
  Eigen::VectorXd grad;    // d phi / d e
};

// Single-sample graph: e -> u+e -> Euler next state -> h(t+dt) -> violation.
PhiEval eval_phi(const CertificatePair& pair, const RefineContext& ctx,
                 const Eigen::VectorXd& control, const Eigen::VectorXd& e, double mu,
                 bool want_grad) {
  const DynamicsKind& kind = pair.kind;
  const int pd = kind.pos_dim();
  const double h_now = cbf_value(pair, own_features(kind, ctx.state, ctx.goal), ctx.obs);

  Tape tape;
  auto& cbf = const_cast<MlpParams&>(pair.cbf);
  struct Refs {
    int e1w, e1b, e2w, e2b, ow, ob, h1w, h1b, h2w, h2b;
  } p{tape.param(cbf.enc1_w), tape.param(cbf.enc1_b), tape.param(cbf.enc2_w),
      tape.param(cbf.enc2_b), tape.param(cbf.own_w),  tape.param(cbf.own_b),
      tape.param(cbf.head1_w), tape.param(cbf.head1_b), tape.param(cbf.head2_w),
      tape.param(cbf.head2_b)};

  const int e_node = tape.leaf(e, /*needs_grad=*/true);
  const int u_node = tape.add(tape.leaf(control), e_node);

  const int n = kind.state_dim();
  const Eigen::VectorXd pos_next = ctx.state.head(pd) + pair.dt * ctx.state.segment(pd, pd);
  Eigen::VectorXd rel = pos_next - ctx.goal;
  const double dist = rel.norm();
  if (dist > kGoalWaypointCap) rel *= kGoalWaypointCap / dist;

  int own_next_veltheta, own_next_feat;
  if (kind.model == DynamicsModel::DoubleIntegrator2D) {
    own_next_veltheta =
        tape.add(tape.leaf(ctx.state.segment(2, 2)), tape.scale(u_node, pair.dt));
    own_next_feat = tape.vstack(tape.leaf(rel), own_next_veltheta);
  } else {
    const int omega = tape.rows(u_node, 0, 2);
    const int az = tape.rows(u_node, 2, 1);
    Mat vxy(2, 1);
    vxy(0, 0) = ctx.state(3) + pair.dt * kind.gravity * std::tan(ctx.state(6));
    vxy(1, 0) = ctx.state(4) + pair.dt * kind.gravity * std::tan(ctx.state(7));
    const int vz_next =
        tape.add(tape.leaf(ctx.state.segment(5, 1)), tape.scale(az, pair.dt));
    const int v_next = tape.vstack(tape.leaf(vxy), vz_next);
    const double lim = 1.5707963267948966 - kThetaMargin;
    const int theta_next = tape.clamp_op(
        tape.add(tape.leaf(ctx.state.segment(6, 2)), tape.scale(omega, pair.dt)), -lim, lim);
    own_next_veltheta = tape.vstack(v_next, theta_next);
    own_next_feat = tape.vstack(tape.leaf(rel), own_next_veltheta);
  }

  const int k = ctx.obs.count();
  const std::vector<int> offsets{0, k};
  Mat rel_pos_aug(pd + 1, k), entities_veltheta(n - pd, k);
  for (int c = 0; c < k; ++c) {
    const Eigen::VectorXd rp = ctx.next_entities.col(c).head(pd) - pos_next;
    rel_pos_aug.col(c).head(pd) = rp;
    rel_pos_aug(pd, c) = rp.norm();
    entities_veltheta.col(c) = ctx.next_entities.col(c).tail(n - pd);
  }
  const int cols_next = tape.vstack(
      tape.rows(tape.leaf(rel_pos_aug), 0, pd),
      tape.vstack(tape.seg_broadcast_sub(entities_veltheta, own_next_veltheta, offsets),
                  tape.rows(tape.leaf(rel_pos_aug), pd, 1)));
  const int z1 = tape.relu(tape.affine(p.e1w, p.e1b, cols_next));
  const int z2 = tape.relu(tape.affine(p.e2w, p.e2b, z1));
  const int pooled = tape.seg_row_max(z2, offsets);
  const int ow = tape.relu(tape.affine(p.ow, p.ob, own_next_feat));
  const int g1 = tape.relu(tape.affine(p.h1w, p.h1b, tape.vstack(ow, pooled)));
  const int h_next = tape.affine(p.h2w, p.h2b, g1);

  const int h_dot = tape.add(tape.scale(tape.add(h_next, tape.leaf(Mat::Constant(1, 1, -h_now))),
                                        1.0 / pair.dt),
                             tape.leaf(Mat::Constant(1, 1, pair.lambda * h_now)));
  const int viol = tape.hinge_sum(h_dot, 1.0, 0.0, {1});
  const int phi_node = tape.add(viol, tape.scale(tape.sum_sq(e_node), mu));

  PhiEval out;
  out.violation = tape.scalar(viol);
  out.phi = tape.scalar(phi_node);
  if (want_grad) {
    tape.backward(phi_node);
    out.grad = tape.grad_of(e_node).col(0);
  }
  return out;
}

std::atomic<long> g_fallback_count{0};

}  // namespace

double phi(const CertificatePair& pair, const RefineContext& ctx,
           const Eigen::VectorXd& control, const Eigen::VectorXd& e, double mu) {
  return eval_phi(pair, ctx, control, e, mu, false).phi;
}

RefineResult refine(const CertificatePair& pair, const RefineContext& ctx,
                    const Eigen::VectorXd& control, const RefineConfig& cfg) {
  RefineResult res;
  res.control = clamp_control(pair.kind, control);
  if (!cfg.enabled) return res;

  const int m = pair.kind.control_dim();
  Eigen::VectorXd e = Eigen::VectorXd::Zero(m);
  double mu = cfg.mu;

  PhiEval cur = eval_phi(pair, ctx, control, e, mu, false);
  res.violation_history.push_back(cur.violation);
  res.final_violation = cur.violation;
  if (!(cur.violation > 0.0)) return res;  // condition already holds
  res.triggered = true;

  double step = cfg.step_size;
  for (int it = 0; it < cfg.max_iters && cur.violation > cfg.tolerance; ++it) {
    ++res.iterations;
    const PhiEval with_grad = eval_phi(pair, ctx, control, e, mu, true);
    if (!with_grad.grad.allFinite()) {
      ++g_fallback_count;
      std::cerr << "refine: non-finite gradient, keeping unrefined control\n";
      res.fell_back = true;
      return res;
    }
    const Eigen::VectorXd e_try = e - step * with_grad.grad;
    if (!e_try.allFinite()) {
      ++g_fallback_count;
      std::cerr << "refine: non-finite increment, keeping unrefined control\n";
      res.fell_back = true;
      return res;
    }
    const PhiEval next = eval_phi(pair, ctx, control, e_try, mu, false);
    if (next.violation > cur.violation) {
      step *= 0.5;  // keep the hinge non-increasing across accepted iterates
      continue;
    }
    e = e_try;
    cur = next;
    res.violation_history.push_back(cur.violation);
    if (cfg.adaptive_mu) {
      const Eigen::VectorXd u_raw = control + e;
      const Eigen::VectorXd u_clamped = clamp_control(pair.kind, u_raw);
      if ((u_raw - u_clamped).norm() > 1e-12) mu *= 2.0;
    }
  }
  res.final_violation = cur.violation;
  res.control = clamp_control(pair.kind, control + e);
  return res;
}

}  // namespace scbf
