#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "saga/tensor.hpp"

namespace saga {

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<param>[<index>]: analytic=..., numeric=..."
};

// |a - n| / max(|a|, |n|, 1e-5)
double gradient_relative_error(double analytic, double numeric);

// Central finite differences of `loss` w.r.t. every tensor in `params`
// (perturbed in place and restored), compared with `analytic` gradients.
// When max_coords_per_param > 0 a seeded sample of coordinates is checked.
GradCheckReport finite_difference_check(std::string name, const std::function<double()>& loss,
                                        const std::vector<std::pair<std::string, Tensor*>>& params,
                                        const std::vector<Tensor>& analytic, double h = 1e-5,
                                        std::size_t max_coords_per_param = 0,
                                        std::uint64_t seed = 0);

}  // namespace saga
