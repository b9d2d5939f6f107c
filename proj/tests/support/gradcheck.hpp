#pragma once

// Finite-difference gradient checking shared by the unit tests and the
// acceptance suite. The oracle is independent of the tape: it re-runs the
// forward computation with perturbed inputs and no recording.

#include <cmath>
#include <functional>
#include <vector>

#include "sortednet/rng.hpp"
#include "sortednet/tensor.hpp"

namespace sortednet::testing {

struct GradCheckReport {
    double max_rel_err = 0.0;
    int checked = 0;
};

// rel err with a unit floor so near-zero gradients compare absolutely
inline double rel_err(double ad, double fd) {
    const double denom = std::max({1.0, std::fabs(ad), std::fabs(fd)});
    return std::fabs(ad - fd) / denom;
}

// forward() must rebuild the computation from the current input values and
// return a tensor; a fixed random weighting turns it into a scalar.
inline GradCheckReport check_gradients(const std::function<Tensor()>& forward, std::vector<Tensor> inputs, Rng& rng,
                                       double h = 1e-5) {
    Tensor probe = forward();
    std::vector<double> weights(static_cast<std::size_t>(probe.numel()));
    for (double& w : weights) w = rng.uniform(-1.0, 1.0);

    auto scalarize = [&](const Tensor& out) {
        double s = 0.0;
        for (std::int64_t i = 0; i < out.numel(); ++i) s += weights[static_cast<std::size_t>(i)] * out.data()[i];
        return s;
    };

    Tape tape;
    GradMap grads;
    {
        TapeScope scope(tape);
        Tensor out = forward();
        Tensor w(out.shape(), weights);
        Tensor loss = sum_all(mul(out, w));
        grads = tape.backward(loss);
    }

    GradCheckReport report;
    for (Tensor& in : inputs) {
        if (!in.requires_grad()) continue;
        const std::vector<double>& g = grads.of(in);
        for (std::int64_t i = 0; i < in.numel(); ++i) {
            double& v = in.data()[i];
            const double saved = v;
            v = saved + h;
            const double fp = scalarize(forward());
            v = saved - h;
            const double fm = scalarize(forward());
            v = saved;
            const double fd = (fp - fm) / (2.0 * h);
            report.max_rel_err = std::max(report.max_rel_err, rel_err(g[static_cast<std::size_t>(i)], fd));
            report.checked += 1;
        }
    }
    return report;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
    Tensor t(std::move(shape), requires_grad);
    for (double& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

// keeps values away from the ReLU kink so central differences stay valid
inline Tensor random_tensor_away_from_zero(Shape shape, Rng& rng, double margin = 0.1) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (double& v : t.vec()) {
        if (std::fabs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
    }
    return t;
}

} // namespace sortednet::testing
