#pragma once

// Loss terms. Every term is a per-sample mean over the batch, summed over
// feature dimensions.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "sae/activations.hpp"
#include "sae/matrix.hpp"
#include "sae/model.hpp"

namespace sae {

inline double recon_loss(const Matrix& x, const Matrix& recon) {
    detail::require_same_shape(x, recon, "recon_loss");
    if (x.rows() == 0) return 0.0;
    double s = 0.0;
    auto xd = x.data();
    auto rd = recon.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const double e = xd[i] - rd[i];
        s += e * e;
    }
    return s / static_cast<double>(x.rows());
}

inline double l1_sparsity(const Matrix& latents) {
    if (latents.rows() == 0) return 0.0;
    double s = 0.0;
    for (double v : latents.data()) s += std::abs(v);
    return s / static_cast<double>(latents.rows());
}

struct L0Penalty {
    double value = 0.0;
    Matrix d_theta;  // 1 x m
};

inline L0Penalty l0_ste_penalty(const Matrix& pre_acts, const Matrix& theta, double epsilon) {
    const auto g = jumprelu_pseudograds(pre_acts, theta, epsilon);
    const double inv_b = pre_acts.rows() ? 1.0 / static_cast<double>(pre_acts.rows()) : 0.0;
    L0Penalty out{0.0, scale(col_sums(g.d_l0_d_theta), inv_b)};
    for (double v : g.d_out_d_z.data()) out.value += v;
    out.value *= inv_b;
    return out;
}

// Per-latent count of tokens since the latent last fired.
class DeadLatentTracker {
public:
    DeadLatentTracker() = default;
    DeadLatentTracker(std::size_t m, std::uint64_t dead_threshold_tokens)
        : since_fire_(m, 0), threshold_(dead_threshold_tokens) {}

    void update(const Matrix& latents) {
        std::vector<bool> fired(since_fire_.size(), false);
        for (std::size_t i = 0; i < latents.rows(); ++i) {
            const auto r = latents.row(i);
            for (std::size_t j = 0; j < r.size(); ++j)
                if (r[j] > 0.0) fired[j] = true;
        }
        for (std::size_t j = 0; j < since_fire_.size(); ++j)
            since_fire_[j] = fired[j] ? 0 : since_fire_[j] + latents.rows();
    }

    bool is_dead(std::size_t j) const { return since_fire_[j] >= threshold_; }

    std::size_t dead_count() const {
        std::size_t n = 0;
        for (std::size_t j = 0; j < since_fire_.size(); ++j) n += is_dead(j);
        return n;
    }

    std::vector<std::size_t> dead_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < since_fire_.size(); ++j)
            if (is_dead(j)) out.push_back(j);
        return out;
    }

    std::size_t size() const noexcept { return since_fire_.size(); }
    std::uint64_t threshold() const noexcept { return threshold_; }
    const std::vector<std::uint64_t>& counters() const noexcept { return since_fire_; }
    std::vector<std::uint64_t>& counters() noexcept { return since_fire_; }

    friend bool operator==(const DeadLatentTracker&, const DeadLatentTracker&) = default;

private:
    std::vector<std::uint64_t> since_fire_;
    std::uint64_t threshold_ = 1'000'000;
};

struct AuxLoss {
    double value = 0.0;
    Gradients grads;  // unscaled by alpha
};

// ||e - e_hat||^2 / B with e = x - recon held constant and e_hat rebuilt from
// each sample's top-k_aux dead-latent pre-activations (relu-ed, no b_dec).
inline AuxLoss aux_dead_latent_loss(const Matrix& x, const ForwardTrace& t,
                                    const DeadLatentTracker& tracker, const SaeParams& p,
                                    std::size_t k_aux) {
    if (k_aux < 1) throw std::invalid_argument("aux_dead_latent_loss: k_aux must be >= 1");
    AuxLoss out{0.0, Gradients::zeros_like(p)};
    const auto dead = tracker.dead_indices();
    if (dead.empty()) return out;

    const std::size_t batch = x.rows(), keep = std::min(k_aux, dead.size());
    Matrix codes(batch, p.m()), mask(batch, p.m());
    std::vector<std::size_t> order(dead.size());
    std::vector<double> vals(dead.size());
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t t_ = 0; t_ < dead.size(); ++t_) vals[t_] = t.pre_acts(i, dead[t_]);
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (keep < dead.size())
            std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1),
                             order.end(), detail::ValueIndexOrder{vals});
        for (std::size_t t_ = 0; t_ < keep; ++t_) {
            const std::size_t j = dead[order[t_]];
            mask(i, j) = 1.0;
            const double v = t.pre_acts(i, j);
            codes(i, j) = v > 0.0 ? v : 0.0;
        }
    }
    const Matrix residual = sub(x, t.recon);
    out.value = recon_loss(residual, matmul(codes, p.w_dec));
    out.grads = residual_fit_backward(p, x, codes, mask, residual);
    return out;
}

struct LossBreakdown {
    double recon = 0.0;
    double sparsity = 0.0;  // raw, before lambda
    double aux = 0.0;       // raw, before alpha
    double total = 0.0;
    LossWeights weights;
};

struct LossHyper {
    double lambda = 0.0;
    double alpha = 1.0 / 32.0;
    std::size_t k_aux = 512;
};

// Per-variant term selection:
//   Relu             recon + lambda * L1
//   TopK, BatchTopK  recon + alpha * aux
//   JumpRelu         recon + lambda * L0
// Optionally returns the auxiliary gradients for the backward pass.
inline LossBreakdown total_loss(const Matrix& x, const ForwardTrace& t,
                                const DeadLatentTracker& tracker, const SaeParams& p,
                                const LossHyper& h, Gradients* aux_grads = nullptr) {
    LossBreakdown b;
    b.recon = recon_loss(x, t.recon);
    switch (p.variant) {
    case Variant::Relu:
        b.weights = {h.lambda, 0.0};
        b.sparsity = l1_sparsity(t.latents);
        break;
    case Variant::JumpRelu:
        b.weights = {h.lambda, 0.0};
        b.sparsity = l0_ste_penalty(t.pre_acts, p.theta, p.bandwidth).value;
        break;
    case Variant::TopK:
    case Variant::BatchTopK: {
        b.weights = {0.0, h.alpha};
        if (h.alpha != 0.0) {
            auto aux = aux_dead_latent_loss(x, t, tracker, p, h.k_aux);
            b.aux = aux.value;
            if (aux_grads) *aux_grads = std::move(aux.grads);
        }
        break;
    }
    }
    b.total = b.recon + b.weights.lambda * b.sparsity + b.weights.alpha * b.aux;
    return b;
}

} // namespace sae
