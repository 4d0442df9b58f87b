#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pointnorm/gradcheck.hpp"

// Registered finite-difference checks, shared by the CLI and the tests. Each
// case builds random double-precision inputs from `seed`.
namespace pointnorm {

struct CheckCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

// One case per differentiable primitive.
std::vector<CheckCase> op_check_cases();
// point_normalize, reverse_point_normalize and dualnorm_apply under all four
// statistics modes, per-channel and scalar affine.
std::vector<CheckCase> dualnorm_check_cases();
// 8-point, 2-class model end to end, with sampling indices frozen. Gradients
// are checked wrt the input coordinates and every parameter.
CheckCase micro_model_check();

}  // namespace pointnorm
