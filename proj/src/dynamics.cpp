#include "scbf/dynamics.hpp"

#include <cmath>
#include <string>

namespace scbf {

DynamicsKind DynamicsKind::double_integrator_2d() {
  DynamicsKind k;
  k.model = DynamicsModel::DoubleIntegrator2D;
  k.control_low = Eigen::VectorXd::Constant(2, -1.5);
  k.control_high = Eigen::VectorXd::Constant(2, 1.5);
  k.dt = 0.03;
  return k;
}

DynamicsKind DynamicsKind::drone_3d() {
  DynamicsKind k;
  k.model = DynamicsModel::Drone3D;
  k.gravity = 9.8;
  k.control_low = (Eigen::VectorXd(3) << -1.0, -1.0, -4.0).finished();
  k.control_high = (Eigen::VectorXd(3) << 1.0, 1.0, 4.0).finished();
  k.dt = 0.02;
  return k;
}

const char* dynamics_model_name(DynamicsModel model) {
  return model == DynamicsModel::DoubleIntegrator2D ? "DoubleIntegrator2D" : "Drone3D";
}

DynamicsModel dynamics_model_from_name(const std::string& name) {
  if (name == "DoubleIntegrator2D") return DynamicsModel::DoubleIntegrator2D;
  if (name == "Drone3D") return DynamicsModel::Drone3D;
  throw ConfigError("unknown dynamics kind: " + name);
}

namespace {

void check_dims(const DynamicsKind& kind, const Eigen::VectorXd& state,
                const Eigen::VectorXd& control) {
  if (state.size() != kind.state_dim())
    throw ConfigError("state dimension mismatch: expected " + std::to_string(kind.state_dim()) +
                      ", got " + std::to_string(state.size()));
  if (control.size() != kind.control_dim())
    throw ConfigError("control dimension mismatch: expected " +
                      std::to_string(kind.control_dim()) + ", got " +
                      std::to_string(control.size()));
}

}  // namespace

Eigen::VectorXd deriv(const DynamicsKind& kind, const Eigen::VectorXd& state,
                      const Eigen::VectorXd& control) {
  check_dims(kind, state, control);
  if (kind.model == DynamicsModel::DoubleIntegrator2D) {
    Eigen::VectorXd d(4);
    d << state(2), state(3), control(0), control(1);
    return d;
  }
  const double half_pi = 1.5707963267948966;
  const double tx = state(6), ty = state(7);
  if (std::abs(tx) >= half_pi || std::abs(ty) >= half_pi)
    throw NumericError("tilt angle at tan singularity");
  Eigen::VectorXd d(8);
  d << state(3), state(4), state(5),
      kind.gravity * std::tan(tx), kind.gravity * std::tan(ty), control(2),
      control(0), control(1);
  return d;
}

Eigen::VectorXd clamp_control(const DynamicsKind& kind, const Eigen::VectorXd& control) {
  if (control.size() != kind.control_dim())
    throw ConfigError("control dimension mismatch in clamp_control");
  return control.cwiseMax(kind.control_low).cwiseMin(kind.control_high);
}

Eigen::VectorXd step(const DynamicsKind& kind, const Eigen::VectorXd& state,
                     const Eigen::VectorXd& control, double dt) {
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  const Eigen::VectorXd u = clamp_control(kind, control);
  Eigen::VectorXd next = state + dt * deriv(kind, state, u);
  if (kind.model == DynamicsModel::Drone3D) {
    const double lim = 1.5707963267948966 - kThetaMargin;
    next(6) = std::min(std::max(next(6), -lim), lim);
    next(7) = std::min(std::max(next(7), -lim), lim);
  }
  if (!next.allFinite()) throw NumericError("non-finite state after integration step");
  return next;
}

}  // namespace scbf
