#pragma once

#include <Eigen/Dense>

#include "scbf/errors.hpp"

namespace scbf {

enum class DynamicsModel { DoubleIntegrator2D, Drone3D };

// Keep tan(theta) well away from the pi/2 singularity after integration.
inline constexpr double kThetaMargin = 0.05;

// Agent model: state layout, control bounds, integration timestep.
//
// DoubleIntegrator2D: state [x, y, vx, vy], control [ax, ay].
// Drone3D:            state [x, y, z, vx, vy, vz, tx, ty],
//                     control [wx, wy, az]; lateral acceleration is
//                     g*tan(tx), g*tan(ty); az acts on vz directly.
struct DynamicsKind {
  DynamicsModel model = DynamicsModel::DoubleIntegrator2D;
  double gravity = 9.8;  // Drone3D tilt gain
  Eigen::VectorXd control_low, control_high;
  double dt = 0.03;

  int state_dim() const { return model == DynamicsModel::DoubleIntegrator2D ? 4 : 8; }
  int control_dim() const { return model == DynamicsModel::DoubleIntegrator2D ? 2 : 3; }
  int pos_dim() const { return model == DynamicsModel::DoubleIntegrator2D ? 2 : 3; }

  static DynamicsKind double_integrator_2d();
  static DynamicsKind drone_3d();
};

const char* dynamics_model_name(DynamicsModel model);
DynamicsModel dynamics_model_from_name(const std::string& name);

// ds/dt for the given model. Pure; throws ConfigError on dimension mismatch
// and NumericError when a tilt angle reaches the tan singularity.
Eigen::VectorXd deriv(const DynamicsKind& kind, const Eigen::VectorXd& state,
                      const Eigen::VectorXd& control);

// Componentwise clamp to [control_low, control_high]. Idempotent.
Eigen::VectorXd clamp_control(const DynamicsKind& kind, const Eigen::VectorXd& control);

// Explicit Euler step; control is clamped to bounds first, tilt angles are
// clamped to (-pi/2 + margin, pi/2 - margin) afterwards. Throws NumericError
// if the result is non-finite.
Eigen::VectorXd step(const DynamicsKind& kind, const Eigen::VectorXd& state,
                     const Eigen::VectorXd& control, double dt);

}  // namespace scbf
