#pragma once

// SAEPARM1 checkpoint container. All integers and floats little-endian.
//
//   char[8]   magic "SAEPARM1"
//   u32       version (= 1)
//   u32       d
//   u32       m
//   u8        variant (0 relu, 1 topk, 2 batchtopk, 3 jumprelu)
//   u8        flags (bit 0: encoder input is x - b_dec, bit 1: theta_global valid)
//   u16       reserved (0)
//   u32       k            (TopK / BatchTopK; 0 otherwise)
//   f32       lambda       (Relu / JumpReLU sparsity coefficient used in training)
//   f32       bandwidth    (JumpReLU STE bandwidth)
//   f32       input_scale  (multiplier applied to raw activations)
//   f32[m]    theta        (JumpReLU thresholds; zeros for other variants)
//   f32       theta_global (BatchTopK inference threshold)
//   u64       threshold batches_seen
//   f32[d*m]  w_enc, f32[m] b_enc, f32[m*d] w_dec, f32[d] b_dec   (row-major)
//
// Then zero or more sections, each `char[4] tag, u64 payload_bytes, payload`,
// terminated by the tag "END\0" with a zero length. Readers skip unknown tags.
//
//   "ADAM"  u64 n_tensors, then per tensor: u64 step, f64 lr, beta1, beta2, eps,
//           u32 rows, u32 cols, f32 m1[rows*cols], f32 m2[rows*cols]
//   "EXAC"  f64 copies of theta, w_enc, b_enc, w_dec, b_dec, theta_global, the
//           minima sum, every Adam moment, then lambda, bandwidth and
//           input_scale (bit-exact resume)
//   "TRNR"  u64 step, u64 tokens_seen, u64 dead_threshold, u64 counters[m],
//           f64 theta_ema, u8 ema_valid, u64 n_minima, f64 minima[n_minima]

#include <array>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sae/activations.hpp"
#include "sae/adam.hpp"
#include "sae/data.hpp"
#include "sae/model.hpp"

namespace sae {

inline constexpr std::array<char, 8> kParamMagic{'S', 'A', 'E', 'P', 'A', 'R', 'M', '1'};
inline constexpr std::uint32_t kParamVersion = 1;

// Loop state needed to continue a run exactly where it stopped.
struct TrainerState {
    std::uint64_t step = 0;
    std::uint64_t tokens_seen = 0;
    std::uint64_t dead_threshold = 0;
    std::vector<std::uint64_t> since_fire;
    double theta_ema = 0.0;
    bool ema_valid = false;
    std::vector<double> window_minima;

    friend bool operator==(const TrainerState&, const TrainerState&) = default;
};

struct Checkpoint {
    SaeParams params;
    double lambda = 0.0;
    double input_scale = 1.0;
    std::optional<ThresholdEstimate> threshold;
    std::vector<AdamState> adam;
    std::optional<TrainerState> trainer;
};

namespace detail {

inline void write_section(std::ostream& os, const char (&tag)[5], const std::string& payload) {
    os.write(tag, 4);
    io::put<std::uint64_t>(os, payload.size());
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

inline void put_f64_span(std::ostream& os, std::span<const double> v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
}

inline void get_f64_span(std::istream& is, std::span<double> v, const std::string& what) {
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size_bytes())))
        throw FormatError("checkpoint: truncated " + what);
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck,
                            bool exact = true) {
    const SaeParams& p = ck.params;
    p.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    os.write(kParamMagic.data(), kParamMagic.size());
    io::put<std::uint32_t>(os, kParamVersion);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.d()));
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.m()));
    io::put<std::uint8_t>(os, static_cast<std::uint8_t>(p.variant));
    std::uint8_t flags = 0;
    if (p.subtract_decoder_bias) flags |= 1u;
    if (ck.threshold) flags |= 2u;
    io::put<std::uint8_t>(os, flags);
    io::put<std::uint16_t>(os, 0);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.k));
    io::put<float>(os, static_cast<float>(ck.lambda));
    io::put<float>(os, static_cast<float>(p.bandwidth));
    io::put<float>(os, static_cast<float>(ck.input_scale));
    io::put_f32_span(os, p.theta.data());
    const ThresholdEstimate th = ck.threshold.value_or(ThresholdEstimate{});
    io::put<float>(os, static_cast<float>(th.theta_global));
    io::put<std::uint64_t>(os, th.batches_seen);
    for (const Matrix* t : {&p.w_enc, &p.b_enc, &p.w_dec, &p.b_dec}) io::put_f32_span(os, t->data());

    if (!ck.adam.empty()) {
        std::ostringstream s;
        io::put<std::uint64_t>(s, ck.adam.size());
        for (const auto& a : ck.adam) {
            io::put<std::uint64_t>(s, a.step);
            for (double v : {a.cfg.lr, a.cfg.beta1, a.cfg.beta2, a.cfg.eps}) io::put<double>(s, v);
            io::put<std::uint32_t>(s, static_cast<std::uint32_t>(a.m1.rows()));
            io::put<std::uint32_t>(s, static_cast<std::uint32_t>(a.m1.cols()));
            io::put_f32_span(s, a.m1.data());
            io::put_f32_span(s, a.m2.data());
        }
        detail::write_section(os, "ADAM", s.str());
    }
    if (exact) {
        std::ostringstream s;
        for (const Matrix* t : {&p.theta, &p.w_enc, &p.b_enc, &p.w_dec, &p.b_dec})
            detail::put_f64_span(s, t->data());
        io::put<double>(s, th.theta_global);
        io::put<double>(s, th.sum_of_minima);
        for (const auto& a : ck.adam) {
            detail::put_f64_span(s, a.m1.data());
            detail::put_f64_span(s, a.m2.data());
        }
        for (double v : {ck.lambda, p.bandwidth, ck.input_scale}) io::put<double>(s, v);
        detail::write_section(os, "EXAC", s.str());
    }
    if (ck.trainer) {
        const auto& t = *ck.trainer;
        std::ostringstream s;
        io::put<std::uint64_t>(s, t.step);
        io::put<std::uint64_t>(s, t.tokens_seen);
        io::put<std::uint64_t>(s, t.dead_threshold);
        if (t.since_fire.size() != p.m())
            throw ShapeError("save_checkpoint: dead-latent counters do not match m");
        for (auto c : t.since_fire) io::put<std::uint64_t>(s, c);
        io::put<double>(s, t.theta_ema);
        io::put<std::uint8_t>(s, t.ema_valid ? 1 : 0);
        io::put<std::uint64_t>(s, t.window_minima.size());
        detail::put_f64_span(s, t.window_minima);
        detail::write_section(os, "TRNR", s.str());
    }
    os.write("END\0", 4);
    io::put<std::uint64_t>(os, 0);
    os.close();
    if (os.fail()) throw std::runtime_error("write to '" + path.string() + "' failed");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kParamMagic)
        throw FormatError("'" + path.string() + "': bad magic, not an SAEPARM1 checkpoint");
    const auto version = io::get<std::uint32_t>(is, "version");
    if (version != kParamVersion)
        throw FormatError("'" + path.string() + "': unsupported checkpoint version " +
                          std::to_string(version));
    Checkpoint ck;
    SaeParams& p = ck.params;
    const std::size_t d = io::get<std::uint32_t>(is, "d");
    const std::size_t m = io::get<std::uint32_t>(is, "m");
    const auto tag = io::get<std::uint8_t>(is, "variant");
    if (tag > 3) throw FormatError("checkpoint: unknown variant tag " + std::to_string(tag));
    p.variant = static_cast<Variant>(tag);
    const auto flags = io::get<std::uint8_t>(is, "flags");
    p.subtract_decoder_bias = flags & 1u;
    (void)io::get<std::uint16_t>(is, "reserved");
    p.k = io::get<std::uint32_t>(is, "k");
    ck.lambda = io::get<float>(is, "lambda");
    p.bandwidth = io::get<float>(is, "bandwidth");
    ck.input_scale = io::get<float>(is, "input_scale");
    p.theta = Matrix(1, m);
    io::get_f32_span(is, p.theta.data(), "theta");
    ThresholdEstimate th;
    th.theta_global = io::get<float>(is, "theta_global");
    th.batches_seen = io::get<std::uint64_t>(is, "batches_seen");
    th.sum_of_minima = th.theta_global * static_cast<double>(th.batches_seen);
    p.w_enc = Matrix(d, m);
    p.b_enc = Matrix(1, m);
    p.w_dec = Matrix(m, d);
    p.b_dec = Matrix(1, d);
    io::get_f32_span(is, p.w_enc.data(), "w_enc");
    io::get_f32_span(is, p.b_enc.data(), "b_enc");
    io::get_f32_span(is, p.w_dec.data(), "w_dec");
    io::get_f32_span(is, p.b_dec.data(), "b_dec");

    std::optional<std::string> exact;
    for (;;) {
        std::array<char, 4> stag{};
        if (!is.read(stag.data(), 4)) throw FormatError("checkpoint: truncated, missing END section");
        const auto len = io::get<std::uint64_t>(is, "section length");
        const std::string name(stag.data(), strnlen(stag.data(), 4));
        if (name == "END") break;
        std::string payload(len, '\0');
        if (!is.read(payload.data(), static_cast<std::streamsize>(len)))
            throw FormatError("checkpoint: truncated section " + name);
        std::istringstream s(payload);
        if (name == "ADAM") {
            const auto n = io::get<std::uint64_t>(s, "adam count");
            for (std::uint64_t i = 0; i < n; ++i) {
                AdamState a;
                a.step = io::get<std::uint64_t>(s, "adam step");
                a.cfg.lr = io::get<double>(s, "lr");
                a.cfg.beta1 = io::get<double>(s, "beta1");
                a.cfg.beta2 = io::get<double>(s, "beta2");
                a.cfg.eps = io::get<double>(s, "eps");
                const std::size_t r = io::get<std::uint32_t>(s, "rows");
                const std::size_t c = io::get<std::uint32_t>(s, "cols");
                a.m1 = Matrix(r, c);
                a.m2 = Matrix(r, c);
                io::get_f32_span(s, a.m1.data(), "adam m1");
                io::get_f32_span(s, a.m2.data(), "adam m2");
                ck.adam.push_back(std::move(a));
            }
        } else if (name == "EXAC") {
            exact = std::move(payload);
        } else if (name == "TRNR") {
            TrainerState t;
            t.step = io::get<std::uint64_t>(s, "step");
            t.tokens_seen = io::get<std::uint64_t>(s, "tokens_seen");
            t.dead_threshold = io::get<std::uint64_t>(s, "dead_threshold");
            t.since_fire.resize(m);
            for (auto& c : t.since_fire) c = io::get<std::uint64_t>(s, "counter");
            t.theta_ema = io::get<double>(s, "theta_ema");
            t.ema_valid = io::get<std::uint8_t>(s, "ema_valid") != 0;
            t.window_minima.resize(io::get<std::uint64_t>(s, "n_minima"));
            detail::get_f64_span(s, t.window_minima, "window minima");
            ck.trainer = std::move(t);
        }
    }
    if (exact) {
        std::istringstream s(*exact);
        for (Matrix* t : {&p.theta, &p.w_enc, &p.b_enc, &p.w_dec, &p.b_dec})
            detail::get_f64_span(s, t->data(), "exact parameters");
        th.theta_global = io::get<double>(s, "exact theta_global");
        th.sum_of_minima = io::get<double>(s, "exact minima sum");
        for (auto& a : ck.adam) {
            detail::get_f64_span(s, a.m1.data(), "exact adam m1");
            detail::get_f64_span(s, a.m2.data(), "exact adam m2");
        }
        ck.lambda = io::get<double>(s, "exact lambda");
        p.bandwidth = io::get<double>(s, "exact bandwidth");
        ck.input_scale = io::get<double>(s, "exact input_scale");
    }
    if (flags & 2u) ck.threshold = th;
    p.validate();
    return ck;
}

} // namespace sae
