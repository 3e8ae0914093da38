#include "streamlod/core_math.hpp"

#include <cmath>
#include <stdexcept>

namespace streamlod {

Quat Quat::normalized() const {
  const double n = norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument("degenerate quaternion");
  return {w / n, x / n, y / n, z / n};
}

Quat Quat::from_axis_angle(const Vec3& axis, double angle) {
  const Vec3 a = axis.normalized();
  const double s = std::sin(0.5 * angle);
  return {std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s};
}

Mat3 quat_to_rotation(const Quat& q) {
  const Quat u = q.normalized();
  const double w = u.w, x = u.x, y = u.y, z = u.z;
  Mat3 r;
  r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
      2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
      2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
  return r;
}

Vec4 quat_to_rotation_backward(const Quat& q, const Mat3& g) {
  const double n = q.norm();
  const Quat u = q.normalized();
  const double w = u.w, x = u.x, y = u.y, z = u.z;

  // Partial derivatives of each rotation entry w.r.t. the unit components.
  Mat3 dw, dx, dy, dz;
  dw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  dy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  dz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  const Vec4 du{(g.array() * dw.array()).sum(), (g.array() * dx.array()).sum(),
                (g.array() * dy.array()).sum(), (g.array() * dz.array()).sum()};

  const Vec4 uv = u.as_vec();
  return (du - uv * uv.dot(du)) / n;
}

Covariance3D build_covariance(const Vec3& scale, const Quat& q) {
  if (!(scale.array() > 0.0).all()) throw std::invalid_argument("non-positive scale");
  const Mat3 m = quat_to_rotation(q) * scale.asDiagonal();
  Covariance3D out;
  out.m = m * m.transpose();
  // Exact symmetry regardless of summation order.
  out.m = 0.5 * (out.m + out.m.transpose()).eval();
  return out;
}

CovarianceGrad build_covariance_backward(const Vec3& scale, const Quat& q,
                                         const Mat3& dL_dsigma) {
  const Mat3 r = quat_to_rotation(q);
  const Mat3 m = r * scale.asDiagonal();
  // sigma = M M^T with symmetric G: dL/dM = (G + G^T) M.
  const Mat3 dm = (dL_dsigma + dL_dsigma.transpose()) * m;
  CovarianceGrad out;
  Mat3 dr;
  for (int j = 0; j < 3; ++j) {
    dr.col(j) = dm.col(j) * scale[j];
    out.scale[j] = dm.col(j).dot(r.col(j));
  }
  out.rotation = quat_to_rotation_backward(q, dr);
  return out;
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("camera focal length must be positive");
  if (width < 1 || height < 1) throw std::invalid_argument("camera image size must be positive");
  if (!(near > 0.0)) throw std::invalid_argument("camera near plane must be positive");
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal,
                       int width, int height, double near) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * eye;
  cam.fx = focal;
  cam.fy = focal;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.width = width;
  cam.height = height;
  cam.near = near;
  cam.validate();
  return cam;
}

namespace {

Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& t, const Camera& cam) {
  const double iz = 1.0 / t.z();
  Eigen::Matrix<double, 2, 3> j;
  j << cam.fx * iz, 0.0, -cam.fx * t.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * t.y() * iz * iz;
  return j;
}

}  // namespace

std::optional<Projection> project_gaussian(const Vec3& mu, const Covariance3D& sigma,
                                           const Camera& cam) {
  const Vec3 t = cam.to_camera(mu);
  if (!(t.z() > cam.near)) return std::nullopt;
  const Eigen::Matrix<double, 2, 3> jw = projection_jacobian(t, cam) * cam.rotation;
  Projection p;
  p.mean = {cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy};
  p.cov = jw * sigma.m * jw.transpose();
  p.cov(0, 1) = p.cov(1, 0) = 0.5 * (p.cov(0, 1) + p.cov(1, 0));
  p.cov(0, 0) += kCovarianceDilation;
  p.cov(1, 1) += kCovarianceDilation;
  p.depth = t.z();
  p.cam_point = t;
  return p;
}

ProjectionGrad project_gaussian_backward(const Vec3& mu, const Covariance3D& sigma,
                                         const Camera& cam, const Vec2& dL_dmean,
                                         const Mat2& dL_dcov) {
  const Vec3 t = cam.to_camera(mu);
  const Eigen::Matrix<double, 2, 3> j = projection_jacobian(t, cam);
  const Eigen::Matrix<double, 2, 3> jw = j * cam.rotation;
  const Mat2 g = 0.5 * (dL_dcov + dL_dcov.transpose());

  ProjectionGrad out;
  out.sigma = jw.transpose() * g * jw;

  // cov2d = T Sigma T^T, T = J W.
  const Eigen::Matrix<double, 2, 3> dT = 2.0 * g * jw * sigma.m;
  const Eigen::Matrix<double, 2, 3> dJ = dT * cam.rotation.transpose();

  const double x = t.x(), y = t.y(), z = t.z();
  const double iz2 = 1.0 / (z * z), iz3 = iz2 / z;
  Vec3 dt = Vec3::Zero();
  // Mean.
  dt.x() += dL_dmean.x() * cam.fx / z;
  dt.z() -= dL_dmean.x() * cam.fx * x * iz2;
  dt.y() += dL_dmean.y() * cam.fy / z;
  dt.z() -= dL_dmean.y() * cam.fy * y * iz2;
  // Jacobian entries.
  dt.z() -= dJ(0, 0) * cam.fx * iz2;
  dt.x() -= dJ(0, 2) * cam.fx * iz2;
  dt.z() += dJ(0, 2) * 2.0 * cam.fx * x * iz3;
  dt.z() -= dJ(1, 1) * cam.fy * iz2;
  dt.y() -= dJ(1, 2) * cam.fy * iz2;
  dt.z() += dJ(1, 2) * 2.0 * cam.fy * y * iz3;

  out.mu = cam.rotation.transpose() * dt;
  return out;
}

double round_half_even(double v) {
  // std::nearbyint honours the current rounding mode; FE_TONEAREST is ties-to-even.
  return std::nearbyint(v);
}

}  // namespace streamlod
