#pragma once

// Central finite-difference self-check (64-bit) for every differentiable op.
// Each trial projects the op output onto fixed random weights to get a scalar,
// compares the tape gradient of every input element against (f(x+h)-f(x-h))/2h,
// and reports the worst relative error per op.

#include <functional>
#include <string>
#include <vector>

#include "sdpl/sdpl_ops.hpp"

namespace sdpl {

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  int trials = 0;
};

namespace gradcheck_detail {

using DTensor = TensorT<double>;
using ForwardFn = std::function<DTensor(const std::vector<DTensor>&)>;

inline double rel_err(double a, double b) {
  const double scale = std::max({1.0, std::abs(a), std::abs(b)});
  return std::abs(a - b) / scale;
}

/// Max relative error between tape gradients and central differences over all
/// elements of all inputs. Elements that disagree at the base step retry at
/// smaller steps so a kink (relu/clamp) straddled by the bracket is not
/// misreported as a gradient defect; a real defect disagrees at every step.
inline double fd_check(const std::vector<Shape>& shapes,
                       std::vector<std::vector<double>> values, const ForwardFn& fn,
                       double h = 1e-5) {
  // analytic pass
  TapeT<double> tape;
  std::vector<DTensor> leaves;
  leaves.reserve(shapes.size());
  for (size_t i = 0; i < shapes.size(); ++i)
    leaves.push_back(DTensor::leaf(tape, shapes[i], values[i]));
  auto loss = fn(leaves);
  tape.backward(loss);
  std::vector<std::vector<double>> grads;
  for (auto& l : leaves) grads.push_back(l.grad().vec());

  auto eval = [&](const std::vector<std::vector<double>>& vals) {
    std::vector<DTensor> consts;
    consts.reserve(shapes.size());
    for (size_t i = 0; i < shapes.size(); ++i)
      consts.push_back(DTensor::constant(shapes[i], vals[i]));
    return fn(consts).item();
  };

  double worst = 0.0;
  for (size_t i = 0; i < shapes.size(); ++i) {
    for (size_t j = 0; j < values[i].size(); ++j) {
      const double keep = values[i][j];
      double err = 0.0;
      for (const double step : {h, h / 16.0, h / 256.0}) {
        values[i][j] = keep + step;
        const double up = eval(values);
        values[i][j] = keep - step;
        const double dn = eval(values);
        values[i][j] = keep;
        err = rel_err(grads[i][j], (up - dn) / (2.0 * step));
        if (err <= 1e-5) break;
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline std::vector<double> rand_vec(std::mt19937_64& rng, i64 n, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng_uniform(rng, lo, hi);
  return v;
}

}  // namespace gradcheck_detail

/// Runs `trials` random finite-difference checks per op; deterministic per seed.
std::vector<GradCheckReport> run_gradient_suite(int trials, uint64_t seed);

}  // namespace sdpl
