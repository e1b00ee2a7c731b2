#include "saga/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace saga {

double gradient_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport finite_difference_check(std::string name, const std::function<double()>& loss,
                                        const std::vector<std::pair<std::string, Tensor*>>& params,
                                        const std::vector<Tensor>& analytic, double h,
                                        std::size_t max_coords_per_param, std::uint64_t seed) {
  if (params.size() != analytic.size()) {
    throw DimensionError("gradcheck: " + std::to_string(params.size()) + " params but " +
                         std::to_string(analytic.size()) + " gradients");
  }
  GradCheckReport report;
  report.name = std::move(name);
  std::mt19937_64 rng(seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p].second;
    const Tensor& g = analytic[p];
    if (g.size() != t.size()) {
      throw DimensionError("gradcheck: gradient of " + params[p].first + " has shape " +
                           shape_to_string(g.shape()) + ", parameter " +
                           shape_to_string(t.shape()));
    }
    std::vector<std::size_t> coords(t.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_param > 0 && coords.size() > max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = loss();
      t[i] = orig - h;
      const double down = loss();
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = gradient_relative_error(g[i], numeric);
      ++report.coordinates;
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : INFINITY;
        std::ostringstream os;
        os.precision(10);
        os << params[p].first << "[" << i << "]: analytic=" << g[i] << ", numeric=" << numeric;
        report.worst = os.str();
      }
    }
  }
  return report;
}

}  // namespace saga
