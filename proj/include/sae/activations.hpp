#pragma once

// Sparsity-inducing activations: ReLU, per-sample TopK, batch-level TopK and
// JumpReLU, together with the straight-through pseudo-derivatives used to
// train JumpReLU thresholds and the running estimate of the global inference
// threshold for BatchTopK models.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sae/matrix.hpp"

namespace sae {

enum class Variant : std::uint8_t { Relu = 0, TopK = 1, BatchTopK = 2, JumpRelu = 3 };

inline std::string to_string(Variant v) {
    switch (v) {
    case Variant::Relu: return "relu";
    case Variant::TopK: return "topk";
    case Variant::BatchTopK: return "batchtopk";
    case Variant::JumpRelu: return "jumprelu";
    }
    return "unknown";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "relu") return Variant::Relu;
    if (s == "topk") return Variant::TopK;
    if (s == "batchtopk") return Variant::BatchTopK;
    if (s == "jumprelu") return Variant::JumpRelu;
    throw std::invalid_argument("unknown variant '" + s + "' (expected relu|topk|batchtopk|jumprelu)");
}

// Activation output plus the 0/1 selection mask (selection happens on raw
// pre-activations, before the final relu).
struct Selection {
    Matrix values;
    Matrix mask;
};

inline Matrix relu(const Matrix& z) {
    Matrix out = z;
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
}

namespace detail {

inline void require_k(std::size_t k, std::size_t m, const char* op) {
    if (k < 1 || k > m)
        throw std::invalid_argument(std::string(op) + ": k=" + std::to_string(k) +
                                    " outside [1, " + std::to_string(m) + "]");
}

// Larger value first; lower index wins ties.
struct ValueIndexOrder {
    std::span<const double> values;
    bool operator()(std::size_t a, std::size_t b) const noexcept {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    }
};

} // namespace detail

inline Selection topk_per_sample(const Matrix& z, std::size_t k) {
    detail::require_k(k, z.cols(), "topk_per_sample");
    Selection s{Matrix(z.rows(), z.cols()), Matrix(z.rows(), z.cols())};
    std::vector<std::size_t> idx(z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const auto row = z.row(i);
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(),
                         detail::ValueIndexOrder{row});
        for (std::size_t t = 0; t < k; ++t) {
            const std::size_t j = idx[t];
            s.mask(i, j) = 1.0;
            s.values(i, j) = row[j] > 0.0 ? row[j] : 0.0;
        }
    }
    return s;
}

// Keeps the B*k largest entries of the whole batch (flat row-major index
// breaks ties), then applies relu to them.
inline Selection batch_topk(const Matrix& z, std::size_t k) {
    detail::require_k(k, z.cols(), "batch_topk");
    if (z.rows() == 0) throw std::invalid_argument("batch_topk: empty batch");
    const std::size_t keep = z.rows() * k;
    Selection s{Matrix(z.rows(), z.cols()), Matrix(z.rows(), z.cols())};
    const auto flat = z.data();
    std::vector<std::size_t> idx(flat.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep - 1), idx.end(),
                     detail::ValueIndexOrder{flat});
    auto mask = s.mask.data();
    auto vals = s.values.data();
    for (std::size_t t = 0; t < keep; ++t) {
        const std::size_t f = idx[t];
        mask[f] = 1.0;
        vals[f] = flat[f] > 0.0 ? flat[f] : 0.0;
    }
    return s;
}

inline void require_theta(const Matrix& z, const Matrix& theta, const char* op) {
    if (theta.rows() != 1 || theta.cols() != z.cols())
        throw ShapeError(std::string(op) + ": theta " + theta.shape() + " incompatible with " +
                         z.shape());
}

// z * H(z - theta), strictly greater than the threshold.
inline Matrix jumprelu(const Matrix& z, const Matrix& theta) {
    require_theta(z, theta, "jumprelu");
    Matrix out(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < z.cols(); ++j)
            if (z(i, j) > theta(0, j)) out(i, j) = z(i, j);
    return out;
}

// Global-threshold JumpReLU used for BatchTopK inference.
inline Matrix jumprelu(const Matrix& z, double theta) {
    Matrix out(z.rows(), z.cols());
    auto o = out.data();
    auto zd = z.data();
    for (std::size_t i = 0; i < zd.size(); ++i)
        if (zd[i] > theta && zd[i] > 0.0) o[i] = zd[i];
    return out;
}

// Rectangle kernel of unit width: the whole STE shape lives here.
inline double ste_kernel(double u) noexcept { return (u >= -0.5 && u <= 0.5) ? 1.0 : 0.0; }

struct JumpReluGrads {
    Matrix d_out_d_z;
    Matrix d_out_d_theta;
    Matrix d_l0_d_theta;
};

inline JumpReluGrads jumprelu_pseudograds(const Matrix& z, const Matrix& theta, double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("jumprelu_pseudograds: bandwidth must be > 0");
    require_theta(z, theta, "jumprelu_pseudograds");
    JumpReluGrads g{Matrix(z.rows(), z.cols()), Matrix(z.rows(), z.cols()),
                    Matrix(z.rows(), z.cols())};
    for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t j = 0; j < z.cols(); ++j) {
            const double t = theta(0, j);
            const double zij = z(i, j);
            g.d_out_d_z(i, j) = zij > t ? 1.0 : 0.0;
            const double kern = ste_kernel((zij - t) / epsilon);
            if (kern != 0.0) {
                g.d_out_d_theta(i, j) = -(t / epsilon) * kern;
                g.d_l0_d_theta(i, j) = -(1.0 / epsilon) * kern;
            }
        }
    }
    return g;
}

// Running mean of per-batch minimum positive activations.
struct ThresholdEstimate {
    double theta_global = 0.0;
    std::size_t batches_seen = 0;
    double sum_of_minima = 0.0;

    friend bool operator==(const ThresholdEstimate&, const ThresholdEstimate&) = default;
};

// Smallest strictly positive entry, if any.
inline std::optional<double> min_positive(const Matrix& z) {
    std::optional<double> best;
    for (double v : z.data())
        if (v > 0.0 && (!best || v < *best)) best = v;
    return best;
}

inline ThresholdEstimate add_batch_minimum(ThresholdEstimate est, double minimum) {
    est.sum_of_minima += minimum;
    est.batches_seen += 1;
    est.theta_global = est.sum_of_minima / static_cast<double>(est.batches_seen);
    return est;
}

inline ThresholdEstimate update_threshold_estimate(ThresholdEstimate est, const Matrix& z_active) {
    if (auto mn = min_positive(z_active)) return add_batch_minimum(est, *mn);
    return est;
}

} // namespace sae
