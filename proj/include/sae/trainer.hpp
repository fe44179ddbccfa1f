#pragma once

// Training loop and evaluation.
//
// One step: forward (train mode) -> loss terms -> backward -> Adam on every
// parameter tensor -> variant constraints (unit-norm decoder rows for Relu,
// nonnegative thresholds for JumpReLU) -> dead-latent bookkeeping. For
// BatchTopK every step also records the batch's minimum positive latent; the
// inference threshold is the exact mean over the final window of those.

#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sae/activations.hpp"
#include "sae/adam.hpp"
#include "sae/checkpoint.hpp"
#include "sae/data.hpp"
#include "sae/losses.hpp"
#include "sae/metrics.hpp"
#include "sae/model.hpp"

namespace sae {

struct TrainConfig {
    Variant variant = Variant::BatchTopK;
    std::size_t d = 0;  // 0: take it from the dataset
    std::size_t m = 256;
    std::size_t k = 32;
    double lambda = 0.0;
    double alpha = 1.0 / 32.0;
    std::size_t k_aux = 512;
    double bandwidth = 0.001;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    std::size_t batch_size = 4096;
    std::uint64_t token_budget = 2'000'000;
    std::uint64_t dead_threshold_tokens = 1'000'000;
    std::size_t threshold_window_batches = 100;
    double threshold_ema_decay = 0.999;
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_every = 0;  // steps; 0 disables periodic checkpoints
    std::uint64_t log_every = 1;
    double grad_clip_norm = 0.0;  // 0 disables clipping
    bool subtract_decoder_bias = false;
    bool normalize_input = false;  // scale inputs so the first batch has mean norm sqrt(d)

    bool uses_k() const noexcept { return variant == Variant::TopK || variant == Variant::BatchTopK; }

    void validate() const {
        if (m == 0) throw std::invalid_argument("config: m must be > 0");
        if (uses_k() && (k < 1 || k > m))
            throw std::invalid_argument("config: k must lie in [1, m] for " + to_string(variant));
        if (!uses_k() && !(lambda >= 0.0))
            throw std::invalid_argument("config: lambda must be >= 0");
        if (uses_k() && lambda != 0.0)
            throw std::invalid_argument("config: lambda has no effect for " + to_string(variant) +
                                        "; sparsity is set by k");
        if (!(alpha >= 0.0)) throw std::invalid_argument("config: alpha must be >= 0");
        if (k_aux == 0) throw std::invalid_argument("config: k_aux must be > 0");
        if (!(bandwidth > 0.0)) throw std::invalid_argument("config: bandwidth must be > 0");
        if (batch_size == 0) throw std::invalid_argument("config: batch_size must be > 0");
        if (dead_threshold_tokens == 0)
            throw std::invalid_argument("config: dead_threshold_tokens must be > 0");
        if (threshold_window_batches == 0)
            throw std::invalid_argument("config: threshold_window_batches must be > 0");
        if (log_every == 0) throw std::invalid_argument("config: log_every must be > 0");
        if (!(grad_clip_norm >= 0.0)) throw std::invalid_argument("config: grad_clip_norm must be >= 0");
        AdamConfig{lr, beta1, beta2, adam_eps}.validate();
    }
};

struct StepRecord {
    std::uint64_t step = 0;
    std::uint64_t tokens_seen = 0;
    LossBreakdown loss;
    double l0_mask_mean = 0.0;  // selected entries per sample (pre-relu)
    double l0_mean = 0.0;       // strictly positive latents per sample
    std::size_t dead = 0;
    double theta_ema = 0.0;

    friend bool operator==(const StepRecord& a, const StepRecord& b) {
        return a.step == b.step && a.tokens_seen == b.tokens_seen && a.loss.recon == b.loss.recon &&
               a.loss.sparsity == b.loss.sparsity && a.loss.aux == b.loss.aux &&
               a.loss.total == b.loss.total && a.l0_mask_mean == b.l0_mask_mean &&
               a.l0_mean == b.l0_mean && a.dead == b.dead && a.theta_ema == b.theta_ema;
    }
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<std::string> warnings;

    friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    Checkpoint checkpoint;  // params, Adam moments, threshold and loop state
    TrainLog log;

    const SaeParams& params() const noexcept { return checkpoint.params; }
    std::optional<double> theta_global() const {
        if (!checkpoint.threshold) return std::nullopt;
        return checkpoint.threshold->theta_global;
    }
};

struct TrainHooks {
    std::function<void(const StepRecord&)> on_log;
    std::filesystem::path checkpoint_path;  // used when checkpoint_every > 0
    // Stop after this many steps in total (the loop state stays resumable).
    std::optional<std::uint64_t> stop_after_step;
};

namespace detail {

inline double input_scale_for(const Matrix& x) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (double v : x.row(i)) s += v * v;
        total += std::sqrt(s);
    }
    const double mean_norm = total / static_cast<double>(x.rows());
    return mean_norm > 0.0 ? std::sqrt(static_cast<double>(x.cols())) / mean_norm : 1.0;
}

inline void clip_gradients(Gradients& g, double max_norm) {
    const double n = std::sqrt(frobenius_sq(g.g_w_enc) + frobenius_sq(g.g_b_enc) +
                               frobenius_sq(g.g_w_dec) + frobenius_sq(g.g_b_dec) +
                               frobenius_sq(g.g_theta));
    if (n <= max_norm) return;
    const double s = max_norm / n;
    for (Matrix* m : {&g.g_w_enc, &g.g_b_enc, &g.g_w_dec, &g.g_b_dec, &g.g_theta})
        for (double& v : m->data()) v *= s;
}

inline ThresholdEstimate estimate_from_minima(const std::deque<double>& minima) {
    ThresholdEstimate est;
    for (double v : minima) est = add_batch_minimum(est, v);
    return est;
}

} // namespace detail

// Runs (or continues, when `resume` carries loop state) a training run.
inline TrainResult train(const TrainConfig& cfg, const ActivationDataset& data,
                         const std::optional<Checkpoint>& resume = std::nullopt,
                         const TrainHooks& hooks = {}) {
    cfg.validate();
    if (cfg.d != 0 && cfg.d != data.d())
        throw ShapeError("train: config d=" + std::to_string(cfg.d) + " but data has d=" +
                         std::to_string(data.d()));
    const std::size_t d = data.d();
    const ActivationDataset batches_src = data.with_batch_size(cfg.batch_size);
    const AdamConfig adam_cfg{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};

    TrainResult out;
    Checkpoint& ck = out.checkpoint;
    TrainerState st;
    if (resume) {
        ck = *resume;
        if (ck.params.d() != d) throw ShapeError("train: resumed checkpoint has a different d");
        if (ck.adam.size() != 5 || !ck.trainer)
            throw std::invalid_argument("train: checkpoint carries no resumable loop state");
        st = *ck.trainer;
    } else {
        Rng rng(cfg.seed);
        ck.params = init_params(rng, d, cfg.m, cfg.variant, cfg.uses_k() ? cfg.k : 0, cfg.bandwidth);
        ck.params.subtract_decoder_bias = cfg.subtract_decoder_bias;
        ck.lambda = cfg.lambda;
        for (const Matrix* t : {&ck.params.w_enc, &ck.params.b_enc, &ck.params.w_dec,
                                &ck.params.b_dec, &ck.params.theta})
            ck.adam.push_back(AdamState::for_param(*t, adam_cfg));
        st.dead_threshold = cfg.dead_threshold_tokens;
        st.since_fire.assign(cfg.m, 0);
    }
    SaeParams& p = ck.params;

    DeadLatentTracker tracker(p.m(), st.dead_threshold);
    tracker.counters() = st.since_fire;
    std::deque<double> minima(st.window_minima.begin(), st.window_minima.end());
    const LossHyper hyper{cfg.lambda, cfg.alpha, cfg.k_aux};

    auto snapshot = [&]() {
        st.since_fire = tracker.counters();
        st.window_minima.assign(minima.begin(), minima.end());
        ck.trainer = st;
        if (p.variant == Variant::BatchTopK && !minima.empty())
            ck.threshold = detail::estimate_from_minima(minima);
    };

    BatchStream stream = batches_src.batches();
    stream.skip(st.step);

    while (st.tokens_seen < cfg.token_budget) {
        if (hooks.stop_after_step && st.step >= *hooks.stop_after_step) break;
        auto batch = stream.next();
        if (!batch) {
            out.log.warnings.push_back("data exhausted after " + std::to_string(st.tokens_seen) +
                                       " tokens, before the budget of " +
                                       std::to_string(cfg.token_budget));
            break;
        }
        Matrix x = std::move(batch->rows);
        const std::uint64_t remaining = cfg.token_budget - st.tokens_seen;
        if (x.rows() > remaining) x = slice_rows(x, 0, static_cast<std::size_t>(remaining));
        if (st.step == 0 && !resume && cfg.normalize_input) ck.input_scale = detail::input_scale_for(x);
        if (ck.input_scale != 1.0) x = scale(x, ck.input_scale);

        const ForwardTrace trace = forward(p, x, Mode::Train);
        Gradients aux = Gradients::zeros_like(p);
        const LossBreakdown loss = total_loss(x, trace, tracker, p, hyper, &aux);
        for (auto [name, v] : {std::pair{"recon", loss.recon}, {"sparsity", loss.sparsity},
                               {"aux", loss.aux}, {"total", loss.total}})
            if (!std::isfinite(v))
                throw TrainingError("non-finite " + std::string(name) + " loss at step " +
                                    std::to_string(st.step + 1));

        Gradients g = backward(p, x, trace, loss.weights, &aux);
        if (cfg.grad_clip_norm > 0.0) detail::clip_gradients(g, cfg.grad_clip_norm);
        adam_step(ck.adam[0], p.w_enc, g.g_w_enc);
        adam_step(ck.adam[1], p.b_enc, g.g_b_enc);
        adam_step(ck.adam[2], p.w_dec, g.g_w_dec);
        adam_step(ck.adam[3], p.b_dec, g.g_b_dec);
        if (p.variant == Variant::JumpRelu) {
            adam_step(ck.adam[4], p.theta, g.g_theta);
            for (double& t : p.theta.data()) t = std::max(t, 0.0);
        }
        if (p.variant == Variant::Relu) p = normalize_decoder(std::move(p));

        tracker.update(trace.latents);
        st.step += 1;
        st.tokens_seen += x.rows();

        if (p.variant == Variant::BatchTopK) {
            if (auto mn = min_positive(trace.latents)) {
                minima.push_back(*mn);
                while (minima.size() > cfg.threshold_window_batches) minima.pop_front();
                st.theta_ema = st.ema_valid ? cfg.threshold_ema_decay * st.theta_ema +
                                                  (1.0 - cfg.threshold_ema_decay) * *mn
                                            : *mn;
                st.ema_valid = true;
            }
        }

        if (st.step % cfg.log_every == 0) {
            StepRecord r;
            r.step = st.step;
            r.tokens_seen = st.tokens_seen;
            r.loss = loss;
            double kept = 0.0;
            for (double v : trace.kept_mask.data()) kept += v;
            r.l0_mask_mean = kept / static_cast<double>(x.rows());
            r.l0_mean = l0_stats(trace.latents).mean;
            r.dead = tracker.dead_count();
            r.theta_ema = st.theta_ema;
            out.log.steps.push_back(r);
            if (hooks.on_log) hooks.on_log(r);
        }
        if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 &&
            !hooks.checkpoint_path.empty()) {
            snapshot();
            save_checkpoint(hooks.checkpoint_path, ck);
        }
    }
    snapshot();
    return out;
}

// Mean of per-batch minimum positive BatchTopK activations over `n_batches`.
inline ThresholdEstimate estimate_threshold(const SaeParams& p, const ActivationDataset& data,
                                            std::uint64_t n_batches, double input_scale = 1.0) {
    if (p.variant != Variant::BatchTopK)
        throw std::invalid_argument("estimate_threshold: only BatchTopK models use a global threshold");
    ThresholdEstimate est;
    BatchStream s = data.batches();
    for (std::uint64_t b = 0; b < n_batches; ++b) {
        auto batch = s.next();
        if (!batch) break;
        Matrix x = input_scale != 1.0 ? scale(batch->rows, input_scale) : std::move(batch->rows);
        est = update_threshold_estimate(est, forward(p, x, Mode::Train).latents);
    }
    if (est.batches_seen == 0)
        throw std::domain_error("estimate_threshold: no positive activations in any batch");
    return est;
}

struct EvalOptions {
    std::uint64_t n_batches = 0;  // 0: the whole dataset
    NmseNorm norm = NmseNorm::MeanCentered;
    const Matrix* ground_truth = nullptr;
    double input_scale = 1.0;
    // Train mode applies the batch-dependent selection (no threshold needed).
    Mode mode = Mode::Inference;
};

// Metrics over the first n_batches of `data` (inference mode by default).
inline MetricsReport evaluate(const SaeParams& p, std::optional<double> theta_global,
                              const ActivationDataset& data, const EvalOptions& opt = {}) {
    if (data.d() != p.d())
        throw ShapeError("evaluate: data d=" + std::to_string(data.d()) + " but model d=" +
                         std::to_string(p.d()));
    const std::uint64_t limit = opt.n_batches ? opt.n_batches : data.n_batches();
    auto load = [&](Batch& b) {
        return opt.input_scale != 1.0 ? scale(b.rows, opt.input_scale) : std::move(b.rows);
    };

    Matrix mean(1, p.d());
    std::uint64_t n = 0;
    {
        BatchStream s = data.batches();
        for (std::uint64_t b = 0; b < limit; ++b) {
            auto batch = s.next();
            if (!batch) break;
            const Matrix x = load(*batch);
            mean = add(mean, col_sums(x));
            n += x.rows();
        }
    }
    if (n == 0) throw std::invalid_argument("evaluate: dataset yielded no samples");
    mean = scale(mean, 1.0 / static_cast<double>(n));

    MetricsReport r;
    std::vector<bool> fired(p.m(), false);
    double num = 0.0, den = 0.0, l0_sum = 0.0, l0_sq = 0.0;
    BatchStream s = data.batches();
    for (std::uint64_t b = 0; b < limit; ++b) {
        auto batch = s.next();
        if (!batch) break;
        const Matrix x = load(*batch);
        const ForwardTrace t = forward(p, x, opt.mode, theta_global);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            for (std::size_t j = 0; j < x.cols(); ++j) {
                const double e = x(i, j) - t.recon(i, j);
                const double c = opt.norm == NmseNorm::MeanCentered ? x(i, j) - mean(0, j) : x(i, j);
                num += e * e;
                den += c * c;
            }
            std::size_t count = 0;
            const auto lat = t.latents.row(i);
            for (std::size_t j = 0; j < lat.size(); ++j) {
                if (lat[j] > 0.0) {
                    ++count;
                    fired[j] = true;
                }
            }
            r.l0_hist[count] += 1;
            l0_sum += static_cast<double>(count);
            l0_sq += static_cast<double>(count) * static_cast<double>(count);
        }
    }
    if (!(den > 0.0)) throw std::domain_error("evaluate: zero NMSE denominator (constant dataset)");
    const double nd = static_cast<double>(n);
    r.samples = n;
    r.nmse = num / den;
    r.l0_mean = l0_sum / nd;
    r.l0_variance = std::max(0.0, l0_sq / nd - r.l0_mean * r.l0_mean);
    std::size_t dead = 0;
    for (bool f : fired) dead += !f;
    r.dead_fraction = static_cast<double>(dead) / static_cast<double>(p.m());
    r.theta_global = theta_global.value_or(0.0);
    if (opt.ground_truth) r.mmcs = mmcs(p.w_dec, *opt.ground_truth);
    return r;
}

} // namespace sae
