#include <cmath>
#include <limits>
#include <vector>

#include "deftan/errors.hpp"
#include "deftan/loss.hpp"

namespace deftan {

double si_sdr_db(const std::vector<float>& estimate, const std::vector<float>& reference) {
  if (estimate.size() != reference.size())
    throw ParamError("si_sdr: length mismatch " + std::to_string(estimate.size()) +
                     " vs " + std::to_string(reference.size()));
  const size_t n = reference.size();
  if (n == 0) throw ParamError("si_sdr: empty signals");

  double me = 0.0, mr = 0.0;
  for (size_t i = 0; i < n; ++i) {
    me += estimate[i];
    mr += reference[i];
  }
  me /= static_cast<double>(n);
  mr /= static_cast<double>(n);

  double dot = 0.0, ref_energy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double e = estimate[i] - me;
    const double r = reference[i] - mr;
    dot += e * r;
    ref_energy += r * r;
  }
  if (ref_energy <= 0.0) throw ParamError("si_sdr: zero reference signal");

  const double alpha = dot / ref_energy;
  double target_energy = 0.0, err_energy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double e = estimate[i] - me;
    const double r = reference[i] - mr;
    const double t = alpha * r;
    target_energy += t * t;
    err_energy += (e - t) * (e - t);
  }
  if (err_energy < 1e-12 * target_energy)
    return std::numeric_limits<double>::infinity();
  if (target_energy == 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(target_energy / err_energy);
}

}  // namespace deftan
