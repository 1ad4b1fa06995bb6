#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>

#include "cps3d/network.hpp"

namespace testing_util {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t floored = 0;  // entries where the floor set the denominator
  std::size_t refined = 0;  // entries re-estimated with the five-point stencil
  std::string worst;
};

/// Central differences of eval(p1, p2, changed) against the analytic gradients
/// g1, g2, one scalar at a time. `changed` names the network (1 or 2) whose
/// parameters were perturbed so eval may reuse the other one's outputs.
/// Relative error is |a - n| / max(|a|, |n|, floor).
/// Entries whose three-point error reaches `refine_above` are re-estimated with
/// the five-point stencil at the same h, whose truncation error is O(h^4)
/// instead of O(h^2). Pass refine_above = 0 to use five points everywhere.
template <class Eval>
GradCheckReport central_difference_check(cps3d::NetParams<double> p1, cps3d::NetParams<double> p2,
                                         const cps3d::NetParams<double>& g1, const cps3d::NetParams<double>& g2,
                                         Eval&& eval, double h, double floor,
                                         double refine_above = std::numeric_limits<double>::infinity()) {
  GradCheckReport r;
  auto sweep = [&](cps3d::NetParams<double>& p, const cps3d::NetParams<double>& g, int which, const char* tag) {
    for (std::size_t t = 0; t < p.tensors.size(); ++t) {
      auto& vals = p.tensors[t].values;
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double keep = vals[i];
        vals[i] = keep + h;
        const double up = eval(p1, p2, which);
        vals[i] = keep - h;
        const double down = eval(p1, p2, which);
        vals[i] = keep;
        const double analytic = g.tensors[t].values[i];
        double numeric = (up - down) / (2.0 * h);
        auto rel_of = [&](double n) { return std::abs(analytic - n) / std::max({std::abs(analytic), std::abs(n), floor}); };
        if (rel_of(numeric) >= refine_above) {
          vals[i] = keep + 2.0 * h;
          const double up2 = eval(p1, p2, which);
          vals[i] = keep - 2.0 * h;
          const double down2 = eval(p1, p2, which);
          vals[i] = keep;
          numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * h);
          ++r.refined;
        }
        const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
        if (scale == floor) ++r.floored;
        const double rel = rel_of(numeric);
        ++r.checked;
        if (rel > r.max_rel_error) {
          r.max_rel_error = rel;
          r.worst = std::string(tag) + " " + p.tensors[t].name + "[" + std::to_string(i) +
                    "] analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
        }
      }
    }
  };
  sweep(p1, g1, 1, "theta1");
  sweep(p2, g2, 2, "theta2");
  return r;
}

}  // namespace testing_util
