#include <doctest.h>

#include <algorithm>

#include "scbf/certificates.hpp"
#include "test_util.hpp"

using namespace scbf;
using namespace scbf::testutil;

namespace {

Observation permute_columns(const Observation& obs, const std::vector<int>& order) {
  Observation out;
  out.columns.resize(obs.columns.rows(), obs.columns.cols());
  for (size_t c = 0; c < order.size(); ++c) {
    out.columns.col(static_cast<Eigen::Index>(c)) = obs.columns.col(order[c]);
    out.kinds.push_back(obs.kinds[static_cast<size_t>(order[c])]);
  }
  return out;
}

}  // namespace

TEST_CASE("cbf and policy are bitwise invariant to permutation and duplication") {
  for (const auto kind : {DynamicsKind::double_integrator_2d(), DynamicsKind::drone_3d()}) {
    const CertificatePair pair = CertificatePair::init(kind, 42);
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
      const int k = static_cast<int>(rng.next_u64() % 9);
      const Observation obs = random_observation(kind, rng, k);
      const Eigen::VectorXd own = random_state(kind, rng);

      const double h = cbf_value(pair, own, obs);
      const Eigen::VectorXd u = policy_action(pair, own, obs);

      std::vector<int> order(static_cast<size_t>(k));
      for (int c = 0; c < k; ++c) order[static_cast<size_t>(c)] = c;
      for (int c = k - 1; c > 0; --c)
        std::swap(order[static_cast<size_t>(c)],
                  order[static_cast<size_t>(rng.next_u64() % (c + 1))]);
      const Observation perm = permute_columns(obs, order);
      CHECK(cbf_value(pair, own, perm) == h);
      CHECK(policy_action(pair, own, perm) == u);

      if (k > 0) {
        Observation dup = obs;
        dup.columns.conservativeResize(Eigen::NoChange, k + 1);
        dup.columns.col(k) = obs.columns.col(0);
        dup.kinds.push_back(obs.kinds[0]);
        CHECK(cbf_value(pair, own, dup) == h);
        CHECK(policy_action(pair, own, dup) == u);
      }
    }
  }
}

TEST_CASE("policy output is always inside the control box") {
  const auto kind = DynamicsKind::drone_3d();
  const CertificatePair pair = CertificatePair::init(kind, 7);
  Rng rng(14);
  for (int trial = 0; trial < 200; ++trial) {
    const Observation obs = random_observation(kind, rng, static_cast<int>(rng.next_u64() % 6));
    const Eigen::VectorXd u = policy_action(pair, random_state(kind, rng, 5.0), obs);
    CHECK((u.array() >= kind.control_low.array()).all());
    CHECK((u.array() <= kind.control_high.array()).all());
  }
}

TEST_CASE("zero-neighbor evaluation reduces to the pure state-feedback path") {
  const auto kind = DynamicsKind::double_integrator_2d();
  const CertificatePair pair = CertificatePair::init(kind, 5);
  Rng rng(15);
  const Eigen::VectorXd own = random_state(kind, rng);
  Observation empty;
  empty.columns.resize(kind.state_dim(), 0);

  // Manual forward with the pooled vector pinned to the zero floor.
  auto relu = [](const Eigen::VectorXd& x) {
    return (x.array() > 0.0).select(x, Eigen::VectorXd::Zero(x.size())).eval();
  };
  const MlpParams& p = pair.cbf;
  const Eigen::VectorXd ow = relu(p.own_w.value * own + p.own_b.value.col(0));
  Eigen::VectorXd cat(kOwnWidth + kEncoderWidth);
  cat << ow, Eigen::VectorXd::Zero(kEncoderWidth);
  const Eigen::VectorXd g1 = relu(p.head1_w.value * cat + p.head1_b.value.col(0));
  const double manual = (p.head2_w.value * g1 + p.head2_b.value.col(0))(0);
  CHECK(cbf_value(pair, own, empty) == manual);
}

TEST_CASE("own_features caps the goal-relative position") {
  const auto kind = DynamicsKind::double_integrator_2d();
  Eigen::VectorXd s = Eigen::VectorXd::Zero(4);
  s << 10.0, 0.0, 0.7, -0.1;
  const Eigen::VectorXd f = own_features(kind, s, Eigen::VectorXd::Zero(2));
  CHECK(f.head(2).norm() == doctest::Approx(kGoalWaypointCap));
  CHECK(f(2) == 0.7);
  CHECK(f(3) == -0.1);
}

namespace {

// h_dot tests want h to be an exact linear readout of one input feature.
// Zeroing the parameter blocks and wiring two antisymmetric head paths
// (ReLU(x) - ReLU(-x) = x) makes h == own_feat(feature) exactly.
CertificatePair linear_h_pair(const DynamicsKind& kind, int feature) {
  CertificatePair pair = CertificatePair::init(kind, 0);
  for (ParamBlock* b : pair.cbf.blocks()) b->value.setZero();
  pair.cbf.own_w.value(0, feature) = 1.0;
  pair.cbf.own_w.value(1, feature) = -1.0;
  pair.cbf.head1_w.value(0, 0) = 1.0;
  pair.cbf.head1_w.value(1, 1) = 1.0;
  pair.cbf.head2_w.value(0, 0) = 1.0;
  pair.cbf.head2_w.value(0, 1) = -1.0;
  return pair;
}

CbfSample drift_sample(const DynamicsKind& kind, const Eigen::VectorXd& state) {
  CbfSample s;
  s.state = state;
  s.goal = Eigen::VectorXd::Zero(kind.pos_dim());
  s.obs.columns.resize(kind.state_dim(), 0);
  s.next_entities.resize(kind.state_dim(), 0);
  s.next_state = step(kind, state, Eigen::VectorXd::Zero(kind.control_dim()), kind.dt);
  s.u_ref = Eigen::VectorXd::Zero(kind.control_dim());
  return s;
}

}  // namespace

TEST_CASE("h_dot_numeric: zero for an identical pair, exact for linear h") {
  const auto kind = DynamicsKind::double_integrator_2d();
  const CertificatePair random_pair = CertificatePair::init(kind, 3);
  Rng rng(16);
  CbfSample frozen = random_sample(kind, rng, 3);
  frozen.next_state = frozen.state;
  frozen.next_entities = frozen.obs.columns.colwise() + frozen.state;
  CHECK(h_dot_numeric(random_pair, frozen) == doctest::Approx(0.0));

  // h = vx exactly: coasting at vx accelerates h by 0; h = x gives hdot = vx.
  const CertificatePair hx = linear_h_pair(kind, 0);
  Eigen::VectorXd state = Eigen::VectorXd::Zero(4);
  state << 0.4, 0.0, 0.9, 0.0;  // inside the waypoint cap so h == x - goal_x
  const double hdot = h_dot_numeric(hx, drift_sample(kind, state));
  CHECK(hdot == doctest::Approx(0.9).epsilon(1e-9));

  // Reversing the motion flips the sign.
  state(2) = -0.9;
  CHECK(h_dot_numeric(hx, drift_sample(kind, state)) == doctest::Approx(-0.9).epsilon(1e-9));
}

TEST_CASE("cbf_loss hinge arithmetic on handcrafted pairs") {
  const auto kind = DynamicsKind::double_integrator_2d();

  // All-zero parameters give h == 0 everywhere.
  CertificatePair zero_pair = CertificatePair::init(kind, 0);
  for (ParamBlock* b : zero_pair.blocks()) b->value.setZero();

  Rng rng(17);
  CbfSample dangerous = random_sample(kind, rng, 2);
  dangerous.label = RegionLabel::Dangerous;
  std::vector<const CbfSample*> batch{&dangerous};
  // h = 0 on a dangerous sample contributes exactly gamma; the derivative
  // hinge is active too (h = 0 enters X_h with hdot = 0) at its dt scale.
  const LossBreakdown l = total_loss(zero_pair, batch);
  CHECK(l.lc_dang == doctest::Approx(zero_pair.gamma));
  CHECK(l.lc_init == 0.0);
  CHECK(l.lc_deriv == doctest::Approx(zero_pair.gamma * zero_pair.dt));

  // A strongly positive constant h: every hinge inactive on safe samples.
  CertificatePair pos_pair = zero_pair;
  pos_pair.cbf.head2_b.value(0, 0) = 1.0;  // h == 1, hdot == 0, margin 1 > gamma
  CbfSample safe = random_sample(kind, rng, 2);
  safe.label = RegionLabel::Initial;
  std::vector<const CbfSample*> safe_batch{&safe};
  const LossBreakdown ls = total_loss(pos_pair, safe_batch);
  CHECK(ls.lc_init == 0.0);
  CHECK(ls.lc_dang == 0.0);
  CHECK(ls.lc_deriv == 0.0);
}

TEST_CASE("cbf_loss cross-checked against a scalar recomputation") {
  const auto kind = DynamicsKind::double_integrator_2d();
  const CertificatePair pair = CertificatePair::init(kind, 21);
  Rng rng(18);
  std::vector<CbfSample> samples;
  samples.push_back(random_sample(kind, rng, 3));
  samples.push_back(random_sample(kind, rng, 0));
  samples[0].label = RegionLabel::Dangerous;
  samples[1].label = RegionLabel::Other;
  const auto batch = batch_view(samples);

  // Independent arithmetic from the inference path: h, pi, Euler next state.
  double expect_init = 0.0, expect_dang = 0.0, expect_deriv = 0.0, expect_goal = 0.0;
  for (const CbfSample* s : batch) {
    const Eigen::VectorXd own = own_features(kind, s->state, s->goal);
    const double h = cbf_value(pair, own, s->obs);
    const Eigen::VectorXd u = policy_action(pair, own, s->obs);
    CbfSample moved = *s;
    moved.next_state = step(kind, s->state, u, pair.dt);
    const double hdot = h_dot_numeric(pair, moved);
    if (s->label == RegionLabel::Dangerous)
      expect_dang += std::max(0.0, pair.gamma + h);
    else if (s->conflict_free)
      expect_init += std::max(0.0, pair.gamma - h);
    if (h >= 0.0)
      expect_deriv += pair.dt * std::max(0.0, pair.gamma - (hdot + pair.lambda * h));
    if (s->conflict_free) expect_goal += (u - s->u_ref).norm();
  }
  const LossBreakdown l = total_loss(pair, batch);
  CHECK(l.lc_init == doctest::Approx(expect_init).epsilon(1e-9));
  CHECK(l.lc_dang == doctest::Approx(expect_dang).epsilon(1e-9));
  CHECK(l.lc_deriv == doctest::Approx(expect_deriv).epsilon(1e-9));
  CHECK(l.lg == doctest::Approx(expect_goal).epsilon(1e-9));
  CHECK(l.total == doctest::Approx(l.lc + pair.eta * l.lg).epsilon(1e-12));
  CHECK(l.total >= 0.0);
}

TEST_CASE("goal_loss: zero at the reference, 3-4-5 norm, eta weighting") {
  const auto kind = DynamicsKind::double_integrator_2d();
  CertificatePair pair = CertificatePair::init(kind, 1);
  Rng rng(19);
  CbfSample s = random_sample(kind, rng, 1);
  s.conflict_free = true;  // imitation applies only away from conflicts
  const Eigen::VectorXd own = own_features(kind, s.state, s.goal);
  const Eigen::VectorXd u = policy_action(pair, own, s.obs);

  s.u_ref = u;  // policy output equals the reference
  std::vector<const CbfSample*> batch{&s};
  CHECK(goal_loss(pair, batch) == doctest::Approx(0.0).epsilon(1e-12));

  s.u_ref = u - (Eigen::VectorXd(2) << 3.0, 4.0).finished();
  CHECK(goal_loss(pair, batch) == doctest::Approx(5.0).epsilon(1e-9));

  // eta = 0 drops the goal term from the total.
  pair.eta = 0.0;
  const LossBreakdown l0 = total_loss(pair, batch);
  CHECK(l0.total == doctest::Approx(l0.lc).epsilon(1e-12));
  pair.eta = 0.1;
  const LossBreakdown l1 = total_loss(pair, batch);
  CHECK(l1.total == doctest::Approx(l1.lc + 0.1 * l1.lg).epsilon(1e-12));
}

TEST_CASE("losses are additive over disjoint batch splits") {
  const auto kind = DynamicsKind::drone_3d();
  const CertificatePair pair = CertificatePair::init(kind, 2);
  Rng rng(20);
  std::vector<CbfSample> samples;
  for (int i = 0; i < 8; ++i) samples.push_back(random_sample(kind, rng, i % 4));
  const auto all = batch_view(samples);
  const std::vector<const CbfSample*> lo(all.begin(), all.begin() + 4);
  const std::vector<const CbfSample*> hi(all.begin() + 4, all.end());
  const LossBreakdown full = total_loss(pair, all);
  const LossBreakdown a = total_loss(pair, lo);
  const LossBreakdown b = total_loss(pair, hi);
  CHECK(full.total == doctest::Approx(a.total + b.total).epsilon(1e-9));
  CHECK(full.lg == doctest::Approx(a.lg + b.lg).epsilon(1e-9));
}

TEST_CASE("total_loss gradients match central finite differences") {
  for (const auto kind : {DynamicsKind::double_integrator_2d(), DynamicsKind::drone_3d()}) {
    CertificatePair pair = CertificatePair::init(kind, 31);
    Rng rng(22);
    std::vector<CbfSample> samples;
    for (int i = 0; i < 6; ++i) samples.push_back(random_sample(kind, rng, i % 3));
    samples[0].label = RegionLabel::Dangerous;
    const auto batch = batch_view(samples);

    CertificatePair work = pair;
    const LossBreakdown base = total_loss_backward(work, batch);
    CHECK(base.total >= 0.0);
    std::vector<ParamBlock*> blocks = work.blocks();
    std::vector<Mat> grads;
    for (ParamBlock* b : blocks) grads.push_back(b->grad);

    double kink = 0.0;
    total_loss_probe(pair, batch, false, &kink);
    REQUIRE(kink > 1e-5);  // batch is clear of hinge/pool/ReLU kinks

    Rng pick(23);
    int checked = 0;
    for (int trial = 0; trial < 40 && checked < 25; ++trial) {
      const size_t bi = pick.next_u64() % blocks.size();
      ParamBlock* blk = pair.blocks()[bi];
      if (blk->value.size() == 0) continue;
      const Eigen::Index r = static_cast<Eigen::Index>(pick.next_u64() %
                                                       static_cast<std::uint64_t>(blk->value.rows()));
      const Eigen::Index c = static_cast<Eigen::Index>(pick.next_u64() %
                                                       static_cast<std::uint64_t>(blk->value.cols()));
      const double h = 1e-6;
      const double orig = blk->value(r, c);
      blk->value(r, c) = orig + h;
      const double fp = total_loss(pair, batch).total;
      blk->value(r, c) = orig - h;
      const double fm = total_loss(pair, batch).total;
      blk->value(r, c) = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double analytic = grads[bi](r, c);
      const double scale = std::max({1e-4, std::abs(fd), std::abs(analytic)});
      CHECK(std::abs(fd - analytic) / scale < 1e-4);
      ++checked;
    }
    CHECK(checked >= 20);
  }
}

TEST_CASE("checkpoint shape audit across 2D and 3D heads") {
  struct Expect {
    const char* name;
    int rows2, cols2, rows3, cols3;
  };
  const Expect table[] = {
      {"enc1.w", 64, 5, 64, 9},   {"enc1.b", 64, 1, 64, 1}, {"enc2.w", 64, 64, 64, 64},
      {"enc2.b", 64, 1, 64, 1},   {"own.w", 64, 4, 64, 8},  {"own.b", 64, 1, 64, 1},
      {"head1.w", 64, 128, 64, 128}, {"head1.b", 64, 1, 64, 1}, {"head2.w", 1, 64, 1, 64},
      {"head2.b", 1, 1, 1, 1},
  };
  const CertificatePair p2 = CertificatePair::init(DynamicsKind::double_integrator_2d(), 0);
  const CertificatePair p3 = CertificatePair::init(DynamicsKind::drone_3d(), 0);
  auto find = [](const CertificatePair& p, const std::string& suffix, bool policy) {
    const auto blocks = policy ? p.policy.blocks() : p.cbf.blocks();
    for (const ParamBlock* b : blocks)
      if (b->name.ends_with(suffix)) return b;
    return static_cast<const ParamBlock*>(nullptr);
  };
  for (const Expect& e : table) {
    const ParamBlock* b2 = find(p2, e.name, false);
    const ParamBlock* b3 = find(p3, e.name, false);
    REQUIRE(b2 != nullptr);
    REQUIRE(b3 != nullptr);
    CHECK(b2->value.rows() == e.rows2);
    CHECK(b2->value.cols() == e.cols2);
    CHECK(b3->value.rows() == e.rows3);
    CHECK(b3->value.cols() == e.cols3);
  }
  // Policy heads carry the control dimensionality.
  CHECK(find(p2, "head2.w", true)->value.rows() == 2);
  CHECK(find(p3, "head2.w", true)->value.rows() == 3);
  // Save/load preserves forward outputs exactly.
  const std::string path = testutil::temp_dir("pair") + "/pair.json";
  p2.save(path);
  const CertificatePair loaded =
      CertificatePair::load(DynamicsKind::double_integrator_2d(), path);
  Rng rng(24);
  const Observation obs = random_observation(p2.kind, rng, 3);
  const Eigen::VectorXd own = random_state(p2.kind, rng);
  CHECK(cbf_value(loaded, own, obs) == cbf_value(p2, own, obs));
  CHECK(policy_action(loaded, own, obs) == policy_action(p2, own, obs));
}
