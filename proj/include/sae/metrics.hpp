#pragma once

#include <cmath>
#include <cstddef>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>

#include "sae/matrix.hpp"

namespace sae {

enum class NmseNorm {
    MeanCentered,  // sum ||x - x_hat||^2 / sum ||x - mean||^2; predicting the mean scores 1
    Energy,        // sum ||x - x_hat||^2 / sum ||x||^2
};

inline double nmse(const Matrix& x, const Matrix& recon, const Matrix& dataset_mean,
                   NmseNorm norm = NmseNorm::MeanCentered) {
    detail::require_same_shape(x, recon, "nmse");
    if (dataset_mean.rows() != 1 || dataset_mean.cols() != x.cols())
        throw ShapeError("nmse: mean " + dataset_mean.shape() + " incompatible with " + x.shape());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double e = x(i, j) - recon(i, j);
            const double c = norm == NmseNorm::MeanCentered ? x(i, j) - dataset_mean(0, j) : x(i, j);
            num += e * e;
            den += c * c;
        }
    }
    if (!(den > 0.0)) throw std::domain_error("nmse: zero denominator (constant dataset)");
    return num / den;
}

struct L0Stats {
    double mean = 0.0;
    double variance = 0.0;
    std::map<std::size_t, std::size_t> hist;
};

// Per-sample count of strictly positive latents.
inline L0Stats l0_stats(const Matrix& latents) {
    L0Stats s;
    if (latents.rows() == 0) return s;
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < latents.rows(); ++i) {
        std::size_t c = 0;
        for (double v : latents.row(i)) c += v > 0.0;
        s.hist[c] += 1;
        sum += static_cast<double>(c);
        sum_sq += static_cast<double>(c) * static_cast<double>(c);
    }
    const double n = static_cast<double>(latents.rows());
    s.mean = sum / n;
    s.variance = std::max(0.0, sum_sq / n - s.mean * s.mean);
    return s;
}

// Mean over true dictionary rows of the best cosine similarity with any
// learned decoder row. Zero-norm rows on either side are skipped.
inline double mmcs(const Matrix& learned_dec, const Matrix& true_dict,
                   std::ostream* warn = &std::cerr) {
    if (learned_dec.cols() != true_dict.cols())
        throw ShapeError("mmcs: learned " + learned_dec.shape() + " and true " +
                         true_dict.shape() + " differ in width");
    auto unit_rows = [&](const Matrix& a, const char* which) {
        Matrix u = a;
        std::vector<bool> ok(a.rows(), true);
        for (std::size_t i = 0; i < a.rows(); ++i) {
            double s = 0.0;
            for (double v : a.row(i)) s += v * v;
            if (!(s > 0.0)) {
                ok[i] = false;
                if (warn) *warn << "warning: mmcs skipping zero-norm " << which << " row " << i << "\n";
                continue;
            }
            const double n = std::sqrt(s);
            for (double& v : u.row(i)) v /= n;
        }
        return std::pair{std::move(u), std::move(ok)};
    };
    const auto [lu, lok] = unit_rows(learned_dec, "learned");
    const auto [tu, tok] = unit_rows(true_dict, "true");
    const Matrix cos = matmul(tu, transpose(lu));
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < cos.rows(); ++i) {
        if (!tok[i]) continue;
        double best = 0.0;
        bool any = false;
        for (std::size_t j = 0; j < cos.cols(); ++j) {
            if (!lok[j]) continue;
            if (!any || cos(i, j) > best) best = cos(i, j);
            any = true;
        }
        total += any ? std::max(0.0, best) : 0.0;
        ++counted;
    }
    return counted ? total / static_cast<double>(counted) : 0.0;
}

struct MetricsReport {
    double nmse = 0.0;
    double l0_mean = 0.0;
    double l0_variance = 0.0;
    std::map<std::size_t, std::size_t> l0_hist;
    double dead_fraction = 0.0;
    double theta_global = 0.0;
    std::optional<double> mmcs;
    std::size_t samples = 0;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

} // namespace sae
