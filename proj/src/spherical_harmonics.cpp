// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/spherical_harmonics.hpp>

namespace endosplat {

namespace {
constexpr double C0 = 0.28209479177387814;
constexpr double C1 = 0.4886025119029199;
constexpr double C2[] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
                         0.5462742152960396};
constexpr double C3[] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
                         -0.4570457994644658, 1.445305721320277, -0.5900435899266435};
}  // namespace

void sh_basis(int degree, const Vec3& dir, std::array<double, 16>& y, std::array<Vec3, 16>* jac) {
  const double x = dir.x(), yy_ = dir.y(), z = dir.z();
  const double xx = x * x, yy = yy_ * yy_, zz = z * z;
  y[0] = C0;
  if (jac) (*jac)[0].setZero();
  if (degree < 1) return;
  y[1] = -C1 * yy_;
  y[2] = C1 * z;
  y[3] = -C1 * x;
  if (jac) {
    (*jac)[1] = Vec3(0, -C1, 0);
    (*jac)[2] = Vec3(0, 0, C1);
    (*jac)[3] = Vec3(-C1, 0, 0);
  }
  if (degree < 2) return;
  const double Y = yy_;
  y[4] = C2[0] * x * Y;
  y[5] = C2[1] * Y * z;
  y[6] = C2[2] * (2.0 * zz - xx - yy);
  y[7] = C2[3] * x * z;
  y[8] = C2[4] * (xx - yy);
  if (jac) {
    (*jac)[4] = C2[0] * Vec3(Y, x, 0);
    (*jac)[5] = C2[1] * Vec3(0, z, Y);
    (*jac)[6] = C2[2] * Vec3(-2.0 * x, -2.0 * Y, 4.0 * z);
    (*jac)[7] = C2[3] * Vec3(z, 0, x);
    (*jac)[8] = C2[4] * Vec3(2.0 * x, -2.0 * Y, 0);
  }
  if (degree < 3) return;
  y[9] = C3[0] * Y * (3.0 * xx - yy);
  y[10] = C3[1] * x * Y * z;
  y[11] = C3[2] * Y * (4.0 * zz - xx - yy);
  y[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
  y[13] = C3[4] * x * (4.0 * zz - xx - yy);
  y[14] = C3[5] * z * (xx - yy);
  y[15] = C3[6] * x * (xx - 3.0 * yy);
  if (jac) {
    (*jac)[9] = C3[0] * Vec3(6.0 * x * Y, 3.0 * xx - 3.0 * yy, 0);
    (*jac)[10] = C3[1] * Vec3(Y * z, x * z, x * Y);
    (*jac)[11] = C3[2] * Vec3(-2.0 * x * Y, 4.0 * zz - xx - 3.0 * yy, 8.0 * Y * z);
    (*jac)[12] = C3[3] * Vec3(-6.0 * x * z, -6.0 * Y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
    (*jac)[13] = C3[4] * Vec3(4.0 * zz - 3.0 * xx - yy, -2.0 * x * Y, 8.0 * x * z);
    (*jac)[14] = C3[5] * Vec3(2.0 * x * z, -2.0 * Y * z, xx - yy);
    (*jac)[15] = C3[6] * Vec3(3.0 * xx - 3.0 * yy, -6.0 * x * Y, 0);
  }
}

}  // namespace endosplat
