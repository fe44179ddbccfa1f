#pragma once

// Sparse autoencoder parameters, forward pass and analytic backward pass.
//
//   z     = X W_enc + b_enc                  (B x m pre-activations)
//   f     = act(z)                           (B x m latents, >= 0)
//   X_hat = f W_dec + b_dec                  (B x d reconstruction)
//
// Losses are per-sample means (summed over feature dims), so gradients carry
// a 1/B factor. TopK and BatchTopK selections are held fixed in the backward
// pass; JumpReLU thresholds receive rectangle-kernel pseudo-gradients.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

#include "sae/activations.hpp"
#include "sae/matrix.hpp"

namespace sae {

struct SaeParams {
    Matrix w_enc;  // d x m
    Matrix b_enc;  // 1 x m
    Matrix w_dec;  // m x d
    Matrix b_dec;  // 1 x d
    Matrix theta;  // 1 x m, JumpReLU only (zeros otherwise)
    Variant variant = Variant::BatchTopK;
    std::size_t k = 0;
    double bandwidth = 0.001;
    // Feed (x - b_dec) to the encoder instead of x. Off by default.
    bool subtract_decoder_bias = false;

    std::size_t d() const noexcept { return w_enc.rows(); }
    std::size_t m() const noexcept { return w_enc.cols(); }

    void validate() const {
        const std::size_t dd = d(), mm = m();
        if (dd == 0 || mm == 0) throw ShapeError("SaeParams: empty dimensions");
        if (b_enc.rows() != 1 || b_enc.cols() != mm || w_dec.rows() != mm || w_dec.cols() != dd ||
            b_dec.rows() != 1 || b_dec.cols() != dd || theta.rows() != 1 || theta.cols() != mm)
            throw ShapeError("SaeParams: inconsistent shapes for d=" + std::to_string(dd) +
                             ", m=" + std::to_string(mm));
        if ((variant == Variant::TopK || variant == Variant::BatchTopK) && (k < 1 || k > mm))
            throw std::invalid_argument("SaeParams: k=" + std::to_string(k) + " outside [1, " +
                                        std::to_string(mm) + "]");
        if (variant == Variant::JumpRelu && !(bandwidth > 0.0))
            throw std::invalid_argument("SaeParams: JumpReLU bandwidth must be > 0");
    }

    friend bool operator==(const SaeParams&, const SaeParams&) = default;
};

struct ForwardTrace {
    Matrix pre_acts;   // B x m
    Matrix latents;    // B x m
    Matrix kept_mask;  // B x m
    Matrix recon;      // B x d
};

struct Gradients {
    Matrix g_w_enc, g_b_enc, g_w_dec, g_b_dec, g_theta;

    static Gradients zeros_like(const SaeParams& p) {
        return {Matrix(p.d(), p.m()), Matrix(1, p.m()), Matrix(p.m(), p.d()), Matrix(1, p.d()),
                Matrix(1, p.m())};
    }

    // this += s * other
    void axpy(double s, const Gradients& o) {
        auto acc = [s](Matrix& a, const Matrix& b) {
            detail::require_same_shape(a, b, "Gradients::axpy");
            auto ad = a.data();
            auto bd = b.data();
            for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += s * bd[i];
        };
        acc(g_w_enc, o.g_w_enc);
        acc(g_b_enc, o.g_b_enc);
        acc(g_w_dec, o.g_w_dec);
        acc(g_b_dec, o.g_b_dec);
        acc(g_theta, o.g_theta);
    }
};

struct LossWeights {
    double lambda = 0.0;
    double alpha = 0.0;
};

enum class Mode { Train, Inference };

inline SaeParams normalize_decoder(SaeParams p) {
    for (std::size_t i = 0; i < p.w_dec.rows(); ++i) {
        auto r = p.w_dec.row(i);
        double s = 0.0;
        for (double v : r) s += v * v;
        const double n = std::sqrt(s);
        if (!(n > 0.0))
            throw std::domain_error("normalize_decoder: decoder row " + std::to_string(i) +
                                    " has zero norm (degenerate latent)");
        for (double& v : r) v /= n;
    }
    return p;
}

// Unit-norm gaussian decoder rows, encoder tied to the decoder transpose,
// zero biases, JumpReLU thresholds at 0.001.
inline SaeParams init_params(Rng& rng, std::size_t d, std::size_t m, Variant variant,
                             std::size_t k = 0, double bandwidth = 0.001) {
    if (d < 1 || m < 1) throw std::invalid_argument("init_params: d and m must be >= 1");
    SaeParams p;
    p.variant = variant;
    p.k = k;
    p.bandwidth = bandwidth;
    Matrix dec = gauss_matrix(rng, m, d, 1.0);
    // Redraw the (vanishingly unlikely) all-zero row rather than fail.
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (double v : dec.row(i)) s += v * v;
        while (s == 0.0) {
            s = 0.0;
            for (double& v : dec.row(i)) {
                v = rng.normal();
                s += v * v;
            }
        }
    }
    p.w_dec = std::move(dec);
    p = normalize_decoder(std::move(p));
    p.w_enc = transpose(p.w_dec);
    p.b_enc = Matrix(1, m);
    p.b_dec = Matrix(1, d);
    p.theta = Matrix(1, m, variant == Variant::JumpRelu ? 0.001 : 0.0);
    p.validate();
    return p;
}

inline Matrix encoder_input(const SaeParams& p, const Matrix& x) {
    if (!p.subtract_decoder_bias) return x;
    return add_row_broadcast(x, scale(p.b_dec, -1.0));
}

inline Matrix decode(const SaeParams& p, const Matrix& latents) {
    return add_row_broadcast(matmul(latents, p.w_dec), p.b_dec);
}

inline ForwardTrace forward(const SaeParams& p, const Matrix& x, Mode mode = Mode::Train,
                            std::optional<double> theta_global = std::nullopt) {
    if (x.cols() != p.d())
        throw ShapeError("forward: input " + x.shape() + " does not match d=" +
                         std::to_string(p.d()));
    ForwardTrace t;
    t.pre_acts = add_row_broadcast(matmul(encoder_input(p, x), p.w_enc), p.b_enc);
    const Matrix& z = t.pre_acts;
    auto mask_where = [&](auto pred) {
        Matrix mask(z.rows(), z.cols());
        for (std::size_t i = 0; i < z.rows(); ++i)
            for (std::size_t j = 0; j < z.cols(); ++j)
                if (pred(i, j)) mask(i, j) = 1.0;
        return mask;
    };
    switch (p.variant) {
    case Variant::Relu:
        t.latents = relu(z);
        t.kept_mask = mask_where([&](auto i, auto j) { return z(i, j) > 0.0; });
        break;
    case Variant::TopK: {
        auto s = topk_per_sample(z, p.k);
        t.latents = std::move(s.values);
        t.kept_mask = std::move(s.mask);
        break;
    }
    case Variant::BatchTopK:
        if (mode == Mode::Train) {
            auto s = batch_topk(z, p.k);
            t.latents = std::move(s.values);
            t.kept_mask = std::move(s.mask);
        } else {
            if (!theta_global)
                throw std::invalid_argument(
                    "forward: BatchTopK inference requires an estimated global threshold");
            const double th = *theta_global;
            t.latents = jumprelu(z, th);
            t.kept_mask = mask_where([&](auto i, auto j) { return z(i, j) > th && z(i, j) > 0.0; });
        }
        break;
    case Variant::JumpRelu:
        t.latents = jumprelu(z, p.theta);
        t.kept_mask = mask_where([&](auto i, auto j) { return z(i, j) > p.theta(0, j); });
        break;
    }
    t.recon = decode(p, t.latents);
    return t;
}

namespace detail {

inline double row_dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Encoder-side gradients from dL/dz (usually very sparse).
inline void accumulate_encoder_grads(const SaeParams& p, const Matrix& enc_in, const Matrix& g_z,
                                     Gradients& g) {
    g.g_w_enc = add(g.g_w_enc, transpose(matmul(transpose(g_z), enc_in)));
    const Matrix gb = col_sums(g_z);
    g.g_b_enc = add(g.g_b_enc, gb);
    if (p.subtract_decoder_bias)
        g.g_b_dec = sub(g.g_b_dec, matmul(gb, transpose(p.w_enc)));
}

} // namespace detail

// Gradients of an auxiliary reconstruction ||e - codes W_dec||^2 / B, where
// `codes` are relu-ed pre-activations kept by `mask` and e is constant.
inline Gradients residual_fit_backward(const SaeParams& p, const Matrix& x, const Matrix& codes,
                                       const Matrix& mask, const Matrix& residual) {
    const std::size_t batch = x.rows();
    Gradients g = Gradients::zeros_like(p);
    const Matrix fit = matmul(codes, p.w_dec);
    const Matrix g_fit = scale(sub(fit, residual), 2.0 / static_cast<double>(batch));
    g.g_w_dec = matmul(transpose(codes), g_fit);
    Matrix g_z(batch, p.m());
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < p.m(); ++j)
            if (mask(i, j) != 0.0 && codes(i, j) > 0.0)
                g_z(i, j) = detail::row_dot(g_fit.row(i), p.w_dec.row(j));
    detail::accumulate_encoder_grads(p, encoder_input(p, x), g_z, g);
    return g;
}

// Analytic gradients of the variant's training loss. `aux` holds the
// (unscaled) auxiliary-loss gradients, added with weight alpha.
inline Gradients backward(const SaeParams& p, const Matrix& x, const ForwardTrace& t,
                          const LossWeights& w, const Gradients* aux = nullptr) {
    const std::size_t batch = x.rows(), m = p.m();
    if (x.cols() != p.d() || !t.pre_acts.same_shape(t.latents) ||
        !t.pre_acts.same_shape(t.kept_mask) || t.pre_acts.rows() != batch ||
        t.pre_acts.cols() != m || !t.recon.same_shape(x))
        throw ShapeError("backward: trace shapes inconsistent with input " + x.shape());
    const double inv_b = 1.0 / static_cast<double>(batch);

    Gradients g = Gradients::zeros_like(p);
    const Matrix g_recon = scale(sub(t.recon, x), 2.0 * inv_b);
    g.g_w_dec = matmul(transpose(t.latents), g_recon);
    g.g_b_dec = col_sums(g_recon);

    // dL/dz only where the activation has a nonzero (pseudo-)derivative.
    Matrix g_z(batch, m);
    const Matrix& z = t.pre_acts;
    std::optional<JumpReluGrads> jr;
    if (p.variant == Variant::JumpRelu) jr = jumprelu_pseudograds(z, p.theta, p.bandwidth);

    for (std::size_t i = 0; i < batch; ++i) {
        const auto gr = g_recon.row(i);
        for (std::size_t j = 0; j < m; ++j) {
            const double zij = z(i, j);
            switch (p.variant) {
            case Variant::Relu:
                if (zij > 0.0) g_z(i, j) = detail::row_dot(gr, p.w_dec.row(j)) + w.lambda * inv_b;
                break;
            case Variant::TopK:
            case Variant::BatchTopK:
                if (t.kept_mask(i, j) != 0.0 && zij > 0.0)
                    g_z(i, j) = detail::row_dot(gr, p.w_dec.row(j));
                break;
            case Variant::JumpRelu: {
                const bool active = jr->d_out_d_z(i, j) != 0.0;
                const bool in_kernel = jr->d_out_d_theta(i, j) != 0.0 || jr->d_l0_d_theta(i, j) != 0.0;
                if (!active && !in_kernel) break;
                const double g_f = detail::row_dot(gr, p.w_dec.row(j));
                if (active) g_z(i, j) = g_f;
                g.g_theta(0, j) += g_f * jr->d_out_d_theta(i, j) +
                                   w.lambda * inv_b * jr->d_l0_d_theta(i, j);
                break;
            }
            }
        }
    }
    detail::accumulate_encoder_grads(p, encoder_input(p, x), g_z, g);
    if (aux && w.alpha != 0.0) g.axpy(w.alpha, *aux);
    return g;
}

} // namespace sae
