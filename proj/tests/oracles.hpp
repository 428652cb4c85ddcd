// Test-only oracles, independent of the implementation paths they check.
#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rcm/params.hpp"
#include "rcm/tensor.hpp"

namespace rcm::test {

// Central finite differences over every entry of every parameter array.
// `loss` must re-run the forward pass against the current parameter values.
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;
};

inline GradCheckResult finite_diff_check(
    ParamSet& params, const std::function<double()>& loss,
    const std::unordered_map<std::string, Tensor>& analytic, double h = 1e-4) {
  GradCheckResult res;
  for (auto& e : params.entries()) {
    const Tensor& g = analytic.at(e.name);
    for (size_t i = 0; i < e.value.size(); ++i) {
      const double keep = e.value.data[i];
      auto fd_at = [&](double step) {
        e.value.data[i] = keep + step;
        const double up = loss();
        e.value.data[i] = keep - step;
        const double dn = loss();
        e.value.data[i] = keep;
        return (up - dn) / (2.0 * step);
      };
      const double an = g.data[i];
      double fd = fd_at(h);
      double rel =
          std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-6});
      if (rel > 1e-4) {
        // the interval [x-h, x+h] may straddle a ReLU kink where the
        // central difference is not a derivative estimate; a genuine
        // gradient bug keeps the mismatch as the step shrinks
        fd = fd_at(h * 1e-2);
        rel = std::fabs(fd - an) /
              std::max({std::fabs(fd), std::fabs(an), 1e-6});
      }
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = e.name + "[" + std::to_string(i) + "] fd=" +
                    std::to_string(fd) + " an=" + std::to_string(an);
      }
    }
  }
  return res;
}

// Direct convolution oracle: kernel 2x2, valid padding, channels-last.
inline Tensor conv2x2_direct(const Tensor& x, const Tensor& w,
                             const Tensor& b) {
  const size_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
  const size_t OC = w.shape[0];
  Tensor out = Tensor::zeros({B, H - 1, W - 1, OC});
  for (size_t bi = 0; bi < B; ++bi)
    for (size_t r = 0; r + 1 < H; ++r)
      for (size_t c = 0; c + 1 < W; ++c)
        for (size_t oc = 0; oc < OC; ++oc) {
          double acc = b.data[oc];
          for (int kr = 0; kr < 2; ++kr)
            for (int kc = 0; kc < 2; ++kc)
              for (size_t ch = 0; ch < C; ++ch)
                acc += x.data[((bi * H + r + kr) * W + c + kc) * C + ch] *
                       w.data[oc * 4 * C + (kr * 2 + kc) * C + ch];
          out.data[((bi * (H - 1) + r) * (W - 1) + c) * OC + oc] = acc;
        }
  return out;
}

// Exact Shapley values by full subset enumeration (n <= ~20).
inline std::vector<double> shapley_exact(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x, const std::vector<double>& baseline) {
  const size_t n = x.size();
  const size_t total = size_t{1} << n;
  std::vector<double> fvals(total);
  std::vector<double> point(n);
  for (size_t mask = 0; mask < total; ++mask) {
    for (size_t i = 0; i < n; ++i)
      point[i] = (mask >> i) & 1 ? x[i] : baseline[i];
    fvals[mask] = f(point);
  }
  std::vector<double> fact(n + 1, 1.0);
  for (size_t i = 1; i <= n; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
  std::vector<double> phi(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t mask = 0; mask < total; ++mask) {
      if ((mask >> i) & 1) continue;
      const size_t s = static_cast<size_t>(__builtin_popcountll(mask));
      const double wgt = fact[s] * fact[n - s - 1] / fact[n];
      phi[i] += wgt * (fvals[mask | (size_t{1} << i)] - fvals[mask]);
    }
  }
  return phi;
}

inline Tensor random_tensor(std::vector<size_t> shape, std::mt19937_64& rng,
                            double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::uniform_real_distribution<double> d(-scale, scale);
  for (double& v : t.data) v = d(rng);
  return t;
}

}  // namespace rcm::test
