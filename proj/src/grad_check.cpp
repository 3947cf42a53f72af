#include "ribtoy/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

namespace ribtoy {

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f,
                           std::span<Tensor> inputs, double step, double tol,
                           std::size_t max_coords_per_input,
                           std::uint64_t seed) {
  if (!(step > 0.0)) throw ValueError("grad_check: step must be positive");
  if (!(tol > 0.0)) throw ValueError("grad_check: tol must be positive");
  for (auto& in : inputs)
    if (!in.requires_grad())
      throw UsageError("grad_check: every input must require grad");

  // One analytic pass; snapshots survive the tape.
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    for (auto& in : inputs) in.zero_grad();
    Tensor loss = f(tape);
    tape.backward(loss);
    for (auto& in : inputs) {
      if (!in.has_grad())
        throw UsageError("grad_check: an input received no gradient");
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    }
  }

  auto evaluate = [&]() {
    Tape tape;
    return f(tape).item();
  };

  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    Tensor& in = inputs[ii];
    std::vector<std::size_t> coords(in.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      double& x = in.data()[c];
      const double saved = x;
      x = saved + step;
      const double fp = evaluate();
      x = saved - step;
      const double fm = evaluate();
      x = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        std::ostringstream os;
        os << "grad_check: non-finite evaluation at input " << ii
           << " coordinate " << c;
        throw NumericError(os.str());
      }
      const double fd = (fp - fm) / (2.0 * step);
      const double a = analytic[ii][c];
      const double scale = std::max(std::abs(a), std::abs(fd));
      const double rel = scale < 1e-6 ? 0.0 : std::abs(a - fd) / scale;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = ii;
        report.worst_coord = c;
        report.worst_analytic = a;
        report.worst_numeric = fd;
      }
      ++report.checked;
    }
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace ribtoy
