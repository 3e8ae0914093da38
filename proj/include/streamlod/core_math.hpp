#pragma once

#include <Eigen/Dense>

#include <array>
#include <optional>

namespace streamlod {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Quaternion stored as (w, x, y, z). Not necessarily unit length.
struct Quat {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quat from_vec(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }
  Vec4 as_vec() const { return {w, x, y, z}; }
  double norm() const { return as_vec().norm(); }
  Quat normalized() const;
  static Quat from_axis_angle(const Vec3& axis, double angle);
};

/// Rotation matrix of normalize(q). Throws std::invalid_argument on a zero quaternion.
Mat3 quat_to_rotation(const Quat& q);

/// dL/dq for R = quat_to_rotation(q), including the normalization Jacobian.
Vec4 quat_to_rotation_backward(const Quat& q, const Mat3& dL_dR);

/// Symmetric 3x3 covariance R diag(s)^2 R^T.
struct Covariance3D {
  Mat3 m = Mat3::Identity();
};

Covariance3D build_covariance(const Vec3& scale, const Quat& q);

struct CovarianceGrad {
  Vec3 scale = Vec3::Zero();
  Vec4 rotation = Vec4::Zero();
};

/// Backward of build_covariance for a symmetric upstream gradient dL/dSigma.
CovarianceGrad build_covariance_backward(const Vec3& scale, const Quat& q,
                                         const Mat3& dL_dsigma);

/// Pinhole camera with a world-to-camera transform (x right, y down, z forward).
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  int width = 1;
  int height = 1;
  double near = 0.01;

  Vec3 center() const { return -rotation.transpose() * translation; }
  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }

  /// Throws std::invalid_argument if intrinsics or image size are invalid.
  void validate() const;

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal,
                        int width, int height, double near = 0.01);
};

/// Anti-aliasing dilation added to the projected covariance diagonal (px^2).
inline constexpr double kCovarianceDilation = 0.3;

struct Projection {
  Vec2 mean;     // pixels
  Mat2 cov;      // pixels^2, dilated
  double depth;  // camera-space z
  Vec3 cam_point;
};

/// EWA projection of a 3D Gaussian. Returns nullopt when the mean is at or
/// behind the near plane.
std::optional<Projection> project_gaussian(const Vec3& mu, const Covariance3D& sigma,
                                           const Camera& cam);

struct ProjectionGrad {
  Vec3 mu = Vec3::Zero();
  Mat3 sigma = Mat3::Zero();
};

/// Backward of project_gaussian given dL/dmean2d and a symmetric dL/dcov2d.
ProjectionGrad project_gaussian_backward(const Vec3& mu, const Covariance3D& sigma,
                                         const Camera& cam, const Vec2& dL_dmean,
                                         const Mat2& dL_dcov);

/// Round half to even; used for every level computation.
double round_half_even(double v);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace streamlod
