#pragma once

#include <functional>
#include <string>
#include <vector>

#include "acdc/ops.hpp"

namespace acdc {

/// One finite-difference check: a set of input tensors and a builder that
/// assembles the operation under test on leaves made from those inputs.
template <typename T>
struct CheckCase {
    std::string name;
    double tolerance = 1e-4;
    std::vector<Tensor<T>> inputs;
    std::function<Var<T>(Graph<T>&, const std::vector<Var<T>>&)> build;
};

struct CheckResult {
    std::string op;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

namespace detail {

/// Relative error of analytic vs numeric gradients. Entries are measured
/// against their own magnitude or against a fraction of the tensor's
/// dominant gradient, whichever is larger, so near-zero entries of an
/// otherwise healthy tensor do not dominate the report.
inline double grad_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double gmax = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i)
        gmax = std::max({gmax, std::abs(analytic[i]), std::abs(numeric[i])});
    double worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        if (diff < 1e-9) continue;
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-3 * gmax, 1e-8});
        worst = std::max(worst, diff / denom);
    }
    return worst;
}

} // namespace detail

/// Central finite-difference check of every input entry of `c` against the
/// reverse-mode gradients, at step `h`. The (possibly non-scalar) output is
/// reduced through a fixed random projection.
template <typename T>
double finite_diff_max_rel_error(const CheckCase<T>& c, double h = 1e-4, uint64_t seed = 17) {
    auto evaluate = [&](const std::vector<Tensor<T>>& inputs,
                        std::vector<std::vector<T>>* grads) -> std::vector<T> {
        Graph<T> g;
        std::vector<Var<T>> leaves;
        leaves.reserve(inputs.size());
        for (const auto& t : inputs) leaves.push_back(g.leaf(t));
        Var<T> out = c.build(g, leaves);
        Rng proj_rng(seed);
        std::vector<T> weights(static_cast<size_t>(out.size()));
        for (auto& w : weights) w = static_cast<T>(proj_rng.uniform(-1.0, 1.0));
        Var<T> scalar = inner(out, weights);
        if (grads) {
            g.backward(scalar);
            grads->clear();
            for (const auto& l : leaves) grads->push_back(l.grad());
        }
        return scalar.values();
    };

    std::vector<Tensor<T>> inputs = c.inputs;
    std::vector<std::vector<T>> analytic;
    evaluate(inputs, &analytic);

    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<double> a, n;
        for (int64_t j = 0; j < inputs[i].size(); ++j) {
            const T saved = inputs[i][j];
            inputs[i][j] = saved + static_cast<T>(h);
            const double fp = static_cast<double>(evaluate(inputs, nullptr)[0]);
            inputs[i][j] = saved - static_cast<T>(h);
            const double fm = static_cast<double>(evaluate(inputs, nullptr)[0]);
            inputs[i][j] = saved;
            a.push_back(static_cast<double>(analytic[i][static_cast<size_t>(j)]));
            n.push_back((fp - fm) / (2.0 * h));
        }
        worst = std::max(worst, detail::grad_rel_error(a, n));
    }
    return worst;
}

template <typename T>
CheckResult run_check(const CheckCase<T>& c, double h = 1e-4) {
    CheckResult r;
    r.op = c.name;
    r.tolerance = c.tolerance;
    r.max_rel_err = finite_diff_max_rel_error(c, h);
    r.pass = r.max_rel_err < c.tolerance;
    return r;
}

/// The registered per-operation check cases, one per differentiable
/// operation. Smooth operations are held to 1e-4, piecewise/moment-based
/// ones to 1e-3.
template <typename T>
std::vector<CheckCase<T>> standard_op_checks(uint64_t seed = 33) {
    Rng rng(seed);
    auto uni = [&](Shape s, double lo = -1.0, double hi = 1.0) {
        return Tensor<T>::random_uniform(std::move(s), rng, lo, hi);
    };
    // values bounded away from zero, random sign; for kink-free checks of
    // relu and l1
    auto offzero = [&](Shape s) {
        Tensor<T> t(std::move(s));
        for (auto& v : t.values) {
            const double m = rng.uniform(0.2, 1.0);
            v = static_cast<T>(rng.uniform() < 0.5 ? -m : m);
        }
        return t;
    };

    std::vector<CheckCase<T>> cases;

    cases.push_back({"add", 1e-4, {uni({3, 4}), uni({3, 4})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return add(v[0], v[1]); }});
    cases.push_back({"scale", 1e-4, {uni({2, 5})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return scale(v[0], -1.7); }});
    cases.push_back({"relu", 1e-3, {offzero({3, 4, 2})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return relu(v[0]); }});
    cases.push_back({"sigmoid", 1e-4, {uni({3, 5}, -3.0, 3.0)},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return sigmoid(v[0]); }});
    cases.push_back({"reshape", 1e-4, {uni({2, 6})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return reshape(v[0], {3, 4}); }});
    cases.push_back({"inner", 1e-4, {uni({7})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) {
                         std::vector<T> w(7);
                         for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(0.3 * (i + 1));
                         return inner(v[0], w);
                     }});
    cases.push_back({"concat_channels", 1e-4,
                     {uni({2, 3, 4, 5}), uni({2, 2, 4, 5}), uni({2, 1, 4, 5})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) {
                         return concat_channels<T>({v[0], v[1], v[2]});
                     }});
    cases.push_back({"slice_channels", 1e-4, {uni({2, 5, 3, 4})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return slice_channels(v[0], 1, 4); }});
    cases.push_back({"hadamard", 1e-4,
                     {uni({2, 3, 4, 5}), uni({2, 3, 4, 5}), uni({2, 1, 4, 5}), uni({2, 3})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) {
                         auto a = hadamard(v[0], v[1]);       // same shape
                         auto b = hadamard(a, v[2]);          // 1-channel map
                         return hadamard(b, v[3]);            // per-channel vector
                     }});
    cases.push_back({"conv2d", 1e-4, {uni({2, 8, 8}), uni({4, 2, 3, 3}), uni({4})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) {
                         return conv2d(v[0], v[1], v[2], 2, 0);
                     }});
    cases.push_back({"conv2d_padded", 1e-4, {uni({2, 3, 6, 6}), uni({2, 3, 3, 3}), uni({2})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) {
                         return conv2d(v[0], v[1], v[2], 1, 1);
                     }});
    cases.push_back({"conv1x1", 1e-4, {uni({2, 3, 4, 5}), uni({4, 3, 1, 1}), uni({4})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) {
                         return conv1x1(v[0], v[1], v[2]);
                     }});
    cases.push_back({"depthwise_separable_conv", 1e-4,
                     {uni({2, 3, 6, 6}), uni({3, 3, 3}), uni({4, 3}), uni({4})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) {
                         return depthwise_separable_conv(v[0], v[1], v[2], v[3]);
                     }});
    {
        auto mean = std::make_shared<Tensor<T>>(Shape{3});
        auto var = std::make_shared<Tensor<T>>(Tensor<T>::full({3}, T(1)));
        auto batches = std::make_shared<Tensor<T>>(Shape{1});
        cases.push_back({"batch_norm", 1e-3,
                         {uni({4, 3, 5, 5}), uni({3}, 0.5, 1.5), uni({3})},
                         [mean, var, batches](Graph<T>&, const std::vector<Var<T>>& v) {
                             BnRunning<T> state{mean.get(), var.get(), batches.get()};
                             return batch_norm(v[0], v[1], v[2], state, BnMode::Train);
                         }});
    }
    cases.push_back({"bilinear_upsample2x", 1e-4, {uni({2, 2, 4, 5})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return bilinear_upsample2x(v[0]); }});
    cases.push_back({"dense", 1e-4, {uni({3, 7}), uni({4, 7}), uni({4})},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return dense(v[0], v[1], v[2]); }});
    cases.push_back({"spatial_softmax", 1e-4, {uni({2, 3, 5, 6}, -2.0, 2.0)},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return spatial_softmax(v[0]); }});
    cases.push_back({"soft_argmax", 1e-4, {uni({2, 3, 5, 6}, -2.0, 2.0)},
                     [](Graph<T>&, const std::vector<Var<T>>& v) {
                         // checked through spatial_softmax so the attention
                         // precondition (channels sum to 1) holds under
                         // perturbation
                         return soft_argmax(spatial_softmax(v[0]));
                     }});
    cases.push_back({"l1_loss", 1e-3, {offzero({3, 4}), uni({3, 4}, -0.05, 0.05)},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return l1_loss(v[0], v[1]); }});
    cases.push_back({"fused_mask", 1e-3, {uni({2, 3, 5, 6}, 0.0, 1.0)},
                     [](Graph<T>&, const std::vector<Var<T>>& v) { return fused_mask(v[0]); }});
    return cases;
}

} // namespace acdc
