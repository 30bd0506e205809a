// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/math.hpp>

#include <array>

namespace endosplat {

/// Real SH basis values Y_k(dir) for k < (degree+1)^2, dir unit length.
/// `jacobian`, when non-null, receives dY_k/d(dir) treating x,y,z as independent.
void sh_basis(int degree, const Vec3& dir, std::array<double, 16>& values,
              std::array<Vec3, 16>* jacobian = nullptr);

}  // namespace endosplat
