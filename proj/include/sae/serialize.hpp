#pragma once

// JSON views of configs, reports and logs (nlohmann::json).
//
// from_json starts from the type's defaults and overrides only the keys that
// are present; unknown keys are rejected so typos in config files surface.

#include <fstream>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "sae/data.hpp"
#include "sae/losses.hpp"
#include "sae/metrics.hpp"
#include "sae/trainer.hpp"
#include "sae/version.hpp"

namespace sae {

using nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                                const char* what) {
    if (!j.is_object()) throw std::invalid_argument(std::string(what) + ": expected a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key))
            throw std::invalid_argument(std::string(what) + ": unknown key '" + key + "'");
}

template <class T>
void read_if(const json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

} // namespace detail

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"variant", to_string(c.variant)},
             {"d", c.d},
             {"m", c.m},
             {"k", c.k},
             {"lambda", c.lambda},
             {"alpha", c.alpha},
             {"k_aux", c.k_aux},
             {"bandwidth", c.bandwidth},
             {"lr", c.lr},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"adam_eps", c.adam_eps},
             {"batch_size", c.batch_size},
             {"token_budget", c.token_budget},
             {"dead_threshold_tokens", c.dead_threshold_tokens},
             {"threshold_window_batches", c.threshold_window_batches},
             {"threshold_ema_decay", c.threshold_ema_decay},
             {"seed", c.seed},
             {"checkpoint_every", c.checkpoint_every},
             {"log_every", c.log_every},
             {"grad_clip_norm", c.grad_clip_norm},
             {"subtract_decoder_bias", c.subtract_decoder_bias},
             {"normalize_input", c.normalize_input}};
}

inline void from_json(const json& j, TrainConfig& c) {
    detail::reject_unknown_keys(
        j,
        {"variant", "d", "m", "k", "lambda", "alpha", "k_aux", "bandwidth", "lr", "beta1", "beta2",
         "adam_eps", "batch_size", "token_budget", "dead_threshold_tokens",
         "threshold_window_batches", "threshold_ema_decay", "seed", "checkpoint_every",
         "log_every", "grad_clip_norm", "subtract_decoder_bias", "normalize_input"},
        "train config");
    if (auto it = j.find("variant"); it != j.end()) c.variant = variant_from_string(it->get<std::string>());
    detail::read_if(j, "d", c.d);
    detail::read_if(j, "m", c.m);
    detail::read_if(j, "k", c.k);
    detail::read_if(j, "lambda", c.lambda);
    detail::read_if(j, "alpha", c.alpha);
    detail::read_if(j, "k_aux", c.k_aux);
    detail::read_if(j, "bandwidth", c.bandwidth);
    detail::read_if(j, "lr", c.lr);
    detail::read_if(j, "beta1", c.beta1);
    detail::read_if(j, "beta2", c.beta2);
    detail::read_if(j, "adam_eps", c.adam_eps);
    detail::read_if(j, "batch_size", c.batch_size);
    detail::read_if(j, "token_budget", c.token_budget);
    detail::read_if(j, "dead_threshold_tokens", c.dead_threshold_tokens);
    detail::read_if(j, "threshold_window_batches", c.threshold_window_batches);
    detail::read_if(j, "threshold_ema_decay", c.threshold_ema_decay);
    detail::read_if(j, "seed", c.seed);
    detail::read_if(j, "checkpoint_every", c.checkpoint_every);
    detail::read_if(j, "log_every", c.log_every);
    detail::read_if(j, "grad_clip_norm", c.grad_clip_norm);
    detail::read_if(j, "subtract_decoder_bias", c.subtract_decoder_bias);
    detail::read_if(j, "normalize_input", c.normalize_input);
}

inline void to_json(json& j, const PlantedDictConfig& c) {
    j = json{{"d", c.d},
             {"m_true", c.m_true},
             {"k_min", c.k_min},
             {"k_max", c.k_max},
             {"coeff_min", c.coeff_min},
             {"coeff_max", c.coeff_max},
             {"noise_std", c.noise_std},
             {"seed", c.seed}};
}

inline void from_json(const json& j, PlantedDictConfig& c) {
    detail::reject_unknown_keys(
        j, {"d", "m_true", "k_min", "k_max", "coeff_min", "coeff_max", "noise_std", "seed"},
        "planted config");
    detail::read_if(j, "d", c.d);
    detail::read_if(j, "m_true", c.m_true);
    detail::read_if(j, "k_min", c.k_min);
    detail::read_if(j, "k_max", c.k_max);
    detail::read_if(j, "coeff_min", c.coeff_min);
    detail::read_if(j, "coeff_max", c.coeff_max);
    detail::read_if(j, "noise_std", c.noise_std);
    detail::read_if(j, "seed", c.seed);
}

inline void to_json(json& j, const LossBreakdown& b) {
    j = json{{"recon", b.recon},
             {"sparsity", b.sparsity},
             {"aux", b.aux},
             {"total", b.total},
             {"lambda", b.weights.lambda},
             {"alpha", b.weights.alpha}};
}

inline void to_json(json& j, const StepRecord& r) {
    j = json{{"step", r.step},
             {"tokens_seen", r.tokens_seen},
             {"loss", r.loss},
             {"l0_mask_mean", r.l0_mask_mean},
             {"l0_mean", r.l0_mean},
             {"dead", r.dead},
             {"theta_ema", r.theta_ema}};
}

inline void to_json(json& j, const MetricsReport& r) {
    json hist = json::object();
    for (auto [bucket, n] : r.l0_hist) hist[std::to_string(bucket)] = n;
    j = json{{"nmse", r.nmse},
             {"l0_mean", r.l0_mean},
             {"l0_variance", r.l0_variance},
             {"l0_hist", hist},
             {"dead_fraction", r.dead_fraction},
             {"theta_global", r.theta_global},
             {"mmcs", r.mmcs ? json(*r.mmcs) : json(nullptr)},
             {"samples", r.samples}};
}

inline void from_json(const json& j, MetricsReport& r) {
    r = {};
    j.at("nmse").get_to(r.nmse);
    j.at("l0_mean").get_to(r.l0_mean);
    j.at("l0_variance").get_to(r.l0_variance);
    for (const auto& [bucket, n] : j.at("l0_hist").items())
        r.l0_hist[std::stoul(bucket)] = n.get<std::size_t>();
    j.at("dead_fraction").get_to(r.dead_fraction);
    j.at("theta_global").get_to(r.theta_global);
    if (!j.at("mmcs").is_null()) r.mmcs = j.at("mmcs").get<double>();
    j.at("samples").get_to(r.samples);
}

// Ground-truth sidecar for planted data: generator config, dictionary and
// per-sample codes.
struct PlantedTruth {
    PlantedDictConfig config;
    std::uint64_t stream = 0;
    Matrix dictionary;
    std::vector<SparseCode> codes;
};

inline json truth_to_json(const PlantedTruth& t) {
    json dict = json::array();
    for (std::size_t i = 0; i < t.dictionary.rows(); ++i)
        dict.push_back(std::vector<double>(t.dictionary.row(i).begin(), t.dictionary.row(i).end()));
    json codes = json::array();
    for (const auto& c : t.codes) codes.push_back(json{{"indices", c.indices}, {"coeffs", c.coeffs}});
    return json{{"config", t.config}, {"stream", t.stream}, {"dictionary", dict}, {"codes", codes}};
}

inline PlantedTruth truth_from_json(const json& j) {
    PlantedTruth t;
    j.at("config").get_to(t.config);
    t.config.validate();
    if (auto it = j.find("stream"); it != j.end()) it->get_to(t.stream);
    const auto& dict = j.at("dictionary");
    t.dictionary = Matrix(dict.size(), t.config.d);
    for (std::size_t i = 0; i < dict.size(); ++i) {
        const auto row = dict[i].get<std::vector<double>>();
        if (row.size() != t.config.d)
            throw FormatError("truth sidecar: dictionary row " + std::to_string(i) + " has " +
                              std::to_string(row.size()) + " entries, expected " +
                              std::to_string(t.config.d));
        std::copy(row.begin(), row.end(), t.dictionary.row(i).begin());
    }
    if (auto it = j.find("codes"); it != j.end())
        for (const auto& c : *it)
            t.codes.push_back({c.at("indices").get<std::vector<std::uint32_t>>(),
                               c.at("coeffs").get<std::vector<double>>()});
    return t;
}

// CSV views for plotting.

inline const char* kStepCsvHeader =
    "step,tokens_seen,recon,sparsity,aux,total,l0_mask_mean,l0_mean,dead,theta_ema";

inline void write_step_csv(std::ostream& os, const StepRecord& r) {
    os << r.step << ',' << r.tokens_seen << ',' << r.loss.recon << ',' << r.loss.sparsity << ','
       << r.loss.aux << ',' << r.loss.total << ',' << r.l0_mask_mean << ',' << r.l0_mean << ','
       << r.dead << ',' << r.theta_ema << '\n';
}

inline void write_hist_csv(std::ostream& os, const std::map<std::size_t, std::size_t>& hist) {
    os << "l0,count\n";
    for (auto [bucket, n] : hist) os << bucket << ',' << n << '\n';
}

// Manifest written next to every command's outputs.
inline constexpr int kManifestSchema = 1;

inline json make_manifest(const std::string& command, const json& config,
                          const json& outputs = json::object()) {
    return json{{"schema_version", kManifestSchema},
                {"command", command},
                {"config", config},
                {"outputs", outputs},
                {"versions",
                 {{"toolkit", kVersion},
                  {"activation_format", kActVersion},
                  {"checkpoint_format", kParamVersion}}}};
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("'" + path.string() + "': " + e.what());
    }
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    os << j.dump(2) << '\n';
    if (!os) throw std::runtime_error("write to '" + path.string() + "' failed");
}

} // namespace sae
