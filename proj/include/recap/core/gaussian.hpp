// Gaussian sampling and log-density helpers shared by the flow sampler and
// the per-step likelihood ratios.
#pragma once

#include <cmath>
#include <vector>

#include "recap/core/errors.hpp"
#include "recap/core/rng.hpp"
#include "recap/core/tensor.hpp"

namespace recap {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Sum over dimensions of log N(x_j; mean_j, variance), isotropic variance.
template <typename S>
double gaussian_log_density(const std::vector<S>& x, const std::vector<S>& mean, double variance) {
    if (x.size() != mean.size()) throw DimensionError("gaussian_log_density: size mismatch");
    if (!(variance > 0.0)) throw DomainError("gaussian_log_density: variance must be positive");
    double acc = 0.0;
    for (size_t j = 0; j < x.size(); ++j) {
        const double d = static_cast<double>(x[j]) - static_cast<double>(mean[j]);
        acc -= d * d / (2.0 * variance);
    }
    acc -= 0.5 * static_cast<double>(x.size()) * (kLog2Pi + std::log(variance));
    return acc;
}

// i.i.d. standard normal tensor from a deterministic rng stream.
template <typename S>
TensorPtr<S> sample_gaussian(SeededRng& rng, std::vector<int> shape) {
    auto t = ag::zeros<S>(std::move(shape));
    for (auto& v : t->data) v = static_cast<S>(rng.normal());
    return t;
}

// Autodiff form: log-density of constant observation x under mean given as a
// graph node. Gradients flow into `mean` only; variance is a constant.
template <typename S>
TensorPtr<S> gaussian_log_density_node(const std::vector<S>& x, const TensorPtr<S>& mean, double variance) {
    if (static_cast<int64_t>(x.size()) != mean->numel())
        throw DimensionError("gaussian_log_density_node: size mismatch");
    if (!(variance > 0.0)) throw DomainError("gaussian_log_density_node: variance must be positive");
    auto xs = ag::leaf<S>(mean->shape, std::vector<S>(x.begin(), x.end()));
    auto diff = ag::sub(xs, mean);
    auto quad = ag::scale(ag::sum_all(ag::square(diff)), static_cast<S>(-0.5 / variance));
    const double constant = -0.5 * static_cast<double>(x.size()) * (kLog2Pi + std::log(variance));
    return ag::add_const(quad, static_cast<S>(constant));
}

}  // namespace recap
