#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "sae/matrix.hpp"

namespace sae {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("Adam: lr must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw std::invalid_argument("Adam: betas must lie in [0, 1)");
        if (!(eps > 0.0)) throw std::invalid_argument("Adam: eps must be > 0");
    }

    friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

// Moments for a single parameter tensor.
struct AdamState {
    Matrix m1;
    Matrix m2;
    std::uint64_t step = 0;
    AdamConfig cfg;

    static AdamState for_param(const Matrix& param, AdamConfig cfg = {}) {
        cfg.validate();
        return {Matrix(param.rows(), param.cols()), Matrix(param.rows(), param.cols()), 0, cfg};
    }

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

// One bias-corrected Adam update, in place.
inline void adam_step(AdamState& st, Matrix& param, const Matrix& grad) {
    if (!param.same_shape(grad) || !param.same_shape(st.m1) || !param.same_shape(st.m2))
        throw ShapeError("adam_step: shape mismatch param " + param.shape() + ", grad " +
                         grad.shape() + ", state " + st.m1.shape());
    if (!grad.all_finite()) throw std::domain_error("adam_step: non-finite gradient");
    st.step += 1;
    const auto& c = st.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
    auto p = param.data();
    auto g = grad.data();
    auto m1 = st.m1.data();
    auto m2 = st.m2.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m1[i] = c.beta1 * m1[i] + (1.0 - c.beta1) * g[i];
        m2[i] = c.beta2 * m2[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = m1[i] / bc1;
        const double vhat = m2[i] / bc2;
        p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
}

} // namespace sae
