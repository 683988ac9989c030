#pragma once

#include <functional>
#include <vector>

#include "pocr/rng.hpp"
#include "pocr/tensor.hpp"

namespace pocr_test {

inline pocr::Tensor random_leaf(pocr::Shape shape, pocr::Rng& rng, double lo = -1.0, double hi = 1.0) {
    pocr::Tensor t = pocr::Tensor::zeros(std::move(shape), /*requires_grad=*/true);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

// Worst relative error between analytic gradients and central differences,
// over every entry of every leaf. loss_fn must rebuild the graph on each call.
inline double grad_check(const std::function<pocr::Tensor()>& loss_fn,
                         std::vector<pocr::Tensor> leaves, double eps = 1e-6) {
    for (auto& leaf : leaves) leaf.zero_grad();
    pocr::Tensor loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& leaf : leaves) analytic.push_back(leaf.grad());

    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        pocr::Tensor& leaf = leaves[li];
        for (int64_t i = 0; i < leaf.numel(); ++i) {
            double orig = leaf.data()[i];
            leaf.data()[i] = orig + eps;
            double lp = loss_fn().value();
            leaf.data()[i] = orig - eps;
            double lm = loss_fn().value();
            leaf.data()[i] = orig;
            double fd = (lp - lm) / (2.0 * eps);
            double a = analytic[li][static_cast<size_t>(i)];
            double denom = std::max({std::fabs(fd), std::fabs(a), 1e-8});
            worst = std::max(worst, std::fabs(fd - a) / denom);
        }
    }
    return worst;
}

}  // namespace pocr_test
