#pragma once

#include <cmath>
#include <vector>

namespace wmhseg {

/// Diagonal Gaussian over the latent space of one batch item.
struct DiagGaussian {
  std::vector<double> mean;
  std::vector<double> log_var;

  std::size_t dim() const { return mean.size(); }
  bool finite() const {
    for (double v : mean)
      if (!std::isfinite(v)) return false;
    for (double v : log_var)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

}  // namespace wmhseg
