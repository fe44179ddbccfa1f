// sae: command-line front end for generating planted data, training sparse
// autoencoders and evaluating checkpoints.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sae/checkpoint.hpp"
#include "sae/data.hpp"
#include "sae/serialize.hpp"
#include "sae/trainer.hpp"

namespace fs = std::filesystem;
using namespace sae;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

fs::path sibling(const fs::path& p, const std::string& suffix) {
    return p.parent_path() / (p.filename().string() + suffix);
}

bool is_manifest(const json& j) {
    return j.is_object() && j.contains("schema_version") && j.contains("config");
}

// A --config file may be a bare config object or a manifest written by an
// earlier run; in the latter case its "config" member is used.
json load_config_object(const fs::path& path) {
    json j = read_json_file(path);
    return is_manifest(j) ? j.at("config") : j;
}

// Binds `--flag value` options that patch a JSON object, so flags can be
// layered over a config file.
template <class T>
CLI::Option* patch_option(CLI::App* app, const std::string& flag, json& patch, const char* key,
                          const std::string& help) {
    return app->add_option_function<T>(
        flag, [&patch, key](const T& v) { patch[key] = v; }, help);
}

CLI::Option* patch_flag(CLI::App* app, const std::string& flag, json& patch, const char* key,
                        const std::string& help) {
    return app->add_flag_function(
        flag, [&patch, key](std::int64_t n) { patch[key] = n > 0; }, help);
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
    json patch = json::object();
    std::optional<fs::path> config;
    fs::path out;
    std::optional<fs::path> truth;
    std::optional<std::uint64_t> n;
    std::optional<std::uint64_t> stream;
};

void add_generate(CLI::App& root, GenerateArgs& a, std::function<void()>& run) {
    auto* c = root.add_subcommand("generate", "Write planted sparse-dictionary data as an SAEACT1 file");
    c->add_option("--out", a.out, "Activation file to write")->required();
    c->add_option("--n", a.n, "Number of samples");
    c->add_option("--config", a.config, "Planted config or generate manifest JSON (flags override it)")
        ->check(CLI::ExistingFile);
    c->add_option("--truth", a.truth, "Ground-truth sidecar path (default <out>.truth.json)");
    c->add_option("--stream", a.stream, "Sample stream; streams share the dictionary");
    patch_option<std::size_t>(c, "--d", a.patch, "d", "Activation dimension");
    patch_option<std::size_t>(c, "--m-true", a.patch, "m_true", "Ground-truth dictionary size");
    patch_option<std::size_t>(c, "--k-min", a.patch, "k_min", "Smallest support size");
    patch_option<std::size_t>(c, "--k-max", a.patch, "k_max", "Largest support size");
    patch_option<double>(c, "--coeff-min", a.patch, "coeff_min", "Smallest coefficient (log-uniform)");
    patch_option<double>(c, "--coeff-max", a.patch, "coeff_max", "Largest coefficient");
    patch_option<double>(c, "--noise-std", a.patch, "noise_std", "Gaussian noise stddev");
    patch_option<std::uint64_t>(c, "--seed", a.patch, "seed", "Seed");
    c->callback([&] {
        run = [&] {
            json cfg_json = json::object();
            std::uint64_t n = 0, stream = 0;
            if (a.config) {
                const json j = read_json_file(*a.config);
                if (is_manifest(j)) {
                    cfg_json = j.at("config");
                    n = j.value("n", std::uint64_t{0});
                    stream = j.value("stream", std::uint64_t{0});
                } else {
                    cfg_json = j;
                }
            }
            cfg_json.merge_patch(a.patch);
            PlantedDictConfig cfg = cfg_json.get<PlantedDictConfig>();
            cfg.validate();
            n = a.n.value_or(n);
            stream = a.stream.value_or(stream);
            if (n == 0 && !a.n) throw UsageError("--n is required");

            PlantedTruth truth;
            truth.config = cfg;
            truth.stream = stream;
            auto dict = std::make_shared<const Matrix>(planted_dictionary(cfg));
            truth.dictionary = *dict;
            PlantedSampler sampler(cfg, dict, stream);
            {
                ActivationWriter w(a.out, cfg.d);
                for (std::uint64_t done = 0; done < n;) {
                    const std::size_t rows =
                        static_cast<std::size_t>(std::min<std::uint64_t>(4096, n - done));
                    w.append(sampler.next_batch(rows, &truth.codes));
                    done += rows;
                }
                w.close();
            }
            const fs::path truth_path = a.truth.value_or(sibling(a.out, ".truth.json"));
            {
                std::ofstream os(truth_path, std::ios::trunc);
                if (!os) throw std::runtime_error("cannot open '" + truth_path.string() + "' for writing");
                os << truth_to_json(truth).dump() << '\n';
            }
            json manifest = make_manifest("generate", cfg,
                                          {{"data", a.out.string()}, {"truth", truth_path.string()}});
            manifest["n"] = n;
            manifest["stream"] = stream;
            write_json_file(sibling(a.out, ".manifest.json"), manifest);
            std::cout << "wrote " << n << " x " << cfg.d << " to " << a.out.string() << "\n";
        };
    });
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    json patch = json::object();
    std::optional<fs::path> config;
    std::optional<fs::path> data;
    fs::path out;
    std::optional<fs::path> resume;
    std::optional<std::uint64_t> shuffle_seed;
    std::optional<fs::path> log;
    std::optional<fs::path> log_csv;
    bool quiet = false;
};

void add_train_flags(CLI::App* c, json& p) {
    patch_option<std::string>(c, "--variant", p, "variant", "relu | topk | batchtopk | jumprelu");
    patch_option<std::size_t>(c, "--d", p, "d", "Input dimension (checked against the data)");
    patch_option<std::size_t>(c, "--m", p, "m", "Dictionary size");
    patch_option<std::size_t>(c, "--k", p, "k", "Active latents per sample (topk, batchtopk)");
    patch_option<double>(c, "--lambda", p, "lambda", "Sparsity coefficient (relu, jumprelu)");
    patch_option<double>(c, "--alpha", p, "alpha", "Auxiliary loss weight");
    patch_option<std::size_t>(c, "--k-aux", p, "k_aux", "Dead latents used by the auxiliary loss");
    patch_option<double>(c, "--bandwidth", p, "bandwidth", "JumpReLU straight-through bandwidth");
    patch_option<double>(c, "--lr", p, "lr", "Adam learning rate");
    patch_option<double>(c, "--beta1", p, "beta1", "Adam beta1");
    patch_option<double>(c, "--beta2", p, "beta2", "Adam beta2");
    patch_option<double>(c, "--adam-eps", p, "adam_eps", "Adam epsilon");
    patch_option<std::size_t>(c, "--batch-size", p, "batch_size", "Rows per step");
    patch_option<std::uint64_t>(c, "--token-budget", p, "token_budget", "Rows to train on");
    patch_option<std::uint64_t>(c, "--dead-threshold-tokens", p, "dead_threshold_tokens",
                                "Tokens without firing before a latent counts as dead");
    patch_option<std::size_t>(c, "--threshold-window-batches", p, "threshold_window_batches",
                              "Final batches averaged into the BatchTopK threshold");
    patch_option<double>(c, "--threshold-ema-decay", p, "threshold_ema_decay",
                         "Decay of the logged threshold EMA");
    patch_option<std::uint64_t>(c, "--seed", p, "seed", "Initialization seed");
    patch_option<std::uint64_t>(c, "--checkpoint-every", p, "checkpoint_every",
                                "Save a resumable checkpoint every N steps (0: off)");
    patch_option<std::uint64_t>(c, "--log-every", p, "log_every", "Log every N steps");
    patch_option<double>(c, "--grad-clip-norm", p, "grad_clip_norm", "Global gradient norm cap (0: off)");
    patch_flag(c, "--subtract-decoder-bias,!--no-subtract-decoder-bias", p, "subtract_decoder_bias",
               "Encode x - b_dec instead of x");
    patch_flag(c, "--normalize-input,!--no-normalize-input", p, "normalize_input",
               "Rescale inputs so the first batch has mean norm sqrt(d)");
}

// Fills in the data path and shuffle seed from a train manifest when the
// flags leave them out, so `train --config run.manifest.json` repeats a run.
TrainConfig resolve_train_config(TrainArgs& a) {
    json cfg_json = json::object();
    if (a.config) {
        const json j = read_json_file(*a.config);
        if (is_manifest(j)) {
            cfg_json = j.at("config");
            const json inputs = j.value("inputs", json::object());
            if (!a.data && inputs.contains("data")) a.data = inputs.at("data").get<std::string>();
            if (!a.shuffle_seed && inputs.contains("shuffle_seed") && !inputs.at("shuffle_seed").is_null())
                a.shuffle_seed = inputs.at("shuffle_seed").get<std::uint64_t>();
        } else {
            cfg_json = j;
        }
    }
    if (!a.data) throw UsageError("--data is required");
    cfg_json.merge_patch(a.patch);
    TrainConfig cfg = cfg_json.get<TrainConfig>();
    if (cfg.uses_k() && a.patch.contains("lambda"))
        throw UsageError("--lambda cannot be combined with --variant " + to_string(cfg.variant) +
                         ": its sparsity is set by --k");
    if (!cfg.uses_k() && a.patch.contains("k"))
        throw UsageError("--k cannot be combined with --variant " + to_string(cfg.variant) +
                         ": its sparsity is set by --lambda");
    cfg.validate();
    return cfg;
}

void print_step(std::ostream& os, const StepRecord& r) {
    os << "step " << r.step << " tokens " << r.tokens_seen << " recon " << r.loss.recon
       << " total " << r.loss.total << " l0 " << r.l0_mean << " dead " << r.dead << "\n";
}

void add_train(CLI::App& root, TrainArgs& a, std::function<void()>& run) {
    auto* c = root.add_subcommand("train", "Train a sparse autoencoder on an SAEACT1 file");
    c->add_option("--data", a.data, "Activation file")->check(CLI::ExistingFile);
    c->add_option("--out", a.out, "Checkpoint to write")->required();
    c->add_option("--config", a.config, "Train config or manifest JSON (flags override it)")
        ->check(CLI::ExistingFile);
    c->add_option("--resume", a.resume, "Continue from a checkpoint written by train")
        ->check(CLI::ExistingFile);
    c->add_option("--shuffle-seed", a.shuffle_seed, "Shuffle batch order and rows with this seed");
    c->add_option("--log", a.log, "JSON-lines training log (default <out>.log.jsonl)");
    c->add_option("--log-csv", a.log_csv, "CSV training log (default <out>.log.csv)");
    c->add_flag("--quiet", a.quiet, "Only print the final summary");
    add_train_flags(c, a.patch);
    c->callback([&] {
        run = [&] {
            const TrainConfig cfg = resolve_train_config(a);
            const auto data = ActivationDataset::file(*a.data, cfg.batch_size, a.shuffle_seed,
                                                      cfg.d ? std::optional(cfg.d) : std::nullopt);
            std::optional<Checkpoint> resume;
            if (a.resume) {
                resume = load_checkpoint(*a.resume);
                const auto& p = resume->params;
                if (p.variant != cfg.variant || p.m() != cfg.m || p.d() != data.d())
                    throw UsageError("--resume checkpoint (" + to_string(p.variant) + ", d=" +
                                     std::to_string(p.d()) + ", m=" + std::to_string(p.m()) +
                                     ") does not match the config");
                if (!resume->trainer)
                    throw UsageError("--resume checkpoint carries no training state");
            }
            if (cfg.token_budget == 0)
                std::cerr << "warning: token budget is 0, writing the initial checkpoint\n";

            const fs::path log_path = a.log.value_or(sibling(a.out, ".log.jsonl"));
            const fs::path csv_path = a.log_csv.value_or(sibling(a.out, ".log.csv"));
            const auto mode = a.resume ? std::ios::app : std::ios::trunc;
            std::ofstream jl(log_path, mode), csv(csv_path, mode);
            if (!jl || !csv) throw std::runtime_error("cannot open the training log for writing");
            if (!a.resume) csv << kStepCsvHeader << '\n';
            csv << std::setprecision(17);

            TrainHooks hooks;
            hooks.checkpoint_path = a.out;
            const std::uint64_t print_every =
                std::max<std::uint64_t>(1, cfg.token_budget / cfg.batch_size / 20);
            hooks.on_log = [&](const StepRecord& r) {
                jl << json(r).dump() << '\n';
                write_step_csv(csv, r);
                if (!a.quiet && r.step % print_every == 0) print_step(std::cerr, r);
            };
            const TrainResult result = train(cfg, data, resume, hooks);
            save_checkpoint(a.out, result.checkpoint);
            for (const auto& w : result.log.warnings) std::cerr << "warning: " << w << "\n";

            json outputs{{"checkpoint", a.out.string()},
                         {"log", log_path.string()},
                         {"log_csv", csv_path.string()}};
            json manifest = make_manifest("train", cfg, outputs);
            manifest["inputs"] = {{"data", a.data->string()},
                                  {"shuffle_seed", a.shuffle_seed ? json(*a.shuffle_seed) : json(nullptr)},
                                  {"resume", a.resume ? json(a.resume->string()) : json(nullptr)}};
            manifest["warnings"] = result.log.warnings;
            write_json_file(sibling(a.out, ".manifest.json"), manifest);

            if (!result.log.steps.empty()) {
                const StepRecord& last = result.log.steps.back();
                std::cout << "final loss: recon " << last.loss.recon << " sparsity "
                          << last.loss.sparsity << " aux " << last.loss.aux << " total "
                          << last.loss.total << "\n";
                std::cout << "mean L0: " << last.l0_mean << "\n";
            }
            if (auto th = result.theta_global()) std::cout << "theta_global: " << *th << "\n";
            std::cout << "checkpoint: " << a.out.string() << "\n";
        };
    });
}

// ---------------------------------------------------------------------------
// eval / compare

struct EvalArgs {
    std::vector<fs::path> checkpoints;
    fs::path data;
    std::optional<fs::path> truth;
    std::size_t batch_size = 4096;
    std::uint64_t n_batches = 0;
    std::string norm = "mean";
    std::string mode = "inference";
    std::optional<double> theta;
    std::optional<fs::path> out;
    std::optional<fs::path> out_csv;
};

void add_eval_flags(CLI::App* c, EvalArgs& a) {
    c->add_option("--data", a.data, "Activation file")->required()->check(CLI::ExistingFile);
    c->add_option("--truth", a.truth, "Ground-truth sidecar from generate (adds MMCS)")
        ->check(CLI::ExistingFile);
    c->add_option("--batch-size", a.batch_size, "Rows per evaluation batch");
    c->add_option("--n-batches", a.n_batches, "Batches to evaluate (0: all)");
    c->add_option("--norm", a.norm, "NMSE normalization: mean (variance) or energy")
        ->check(CLI::IsMember({"mean", "energy"}));
    c->add_option("--mode", a.mode, "inference (global threshold for batchtopk) or train")
        ->check(CLI::IsMember({"inference", "train"}));
}

struct Evaluated {
    std::string name;
    Checkpoint ck;
    MetricsReport report;
};

Evaluated evaluate_checkpoint(const fs::path& path, const EvalArgs& a,
                              const std::optional<PlantedTruth>& truth) {
    Evaluated e{path.stem().string(), load_checkpoint(path), {}};
    const auto data = ActivationDataset::file(a.data, a.batch_size, std::nullopt, e.ck.params.d());
    EvalOptions opt;
    opt.n_batches = a.n_batches;
    opt.norm = a.norm == "energy" ? NmseNorm::Energy : NmseNorm::MeanCentered;
    opt.mode = a.mode == "train" ? Mode::Train : Mode::Inference;
    opt.input_scale = e.ck.input_scale;
    if (truth) {
        if (truth->dictionary.cols() != e.ck.params.d())
            throw UsageError("truth dictionary has d=" + std::to_string(truth->dictionary.cols()) +
                             " but checkpoint has d=" + std::to_string(e.ck.params.d()));
        opt.ground_truth = &truth->dictionary;
    }
    std::optional<double> theta = a.theta;
    if (!theta && e.ck.threshold) theta = e.ck.threshold->theta_global;
    if (e.ck.params.variant == Variant::BatchTopK && opt.mode == Mode::Inference && !theta)
        throw UsageError("'" + path.string() +
                         "' has no inference threshold; run `sae threshold` or pass --theta");
    e.report = evaluate(e.ck.params, theta, data, opt);
    return e;
}

std::optional<PlantedTruth> load_truth(const EvalArgs& a) {
    if (!a.truth) return std::nullopt;
    return truth_from_json(read_json_file(*a.truth));
}

json eval_inputs(const EvalArgs& a) {
    return json{{"checkpoints", [&] {
                     json arr = json::array();
                     for (const auto& c : a.checkpoints) arr.push_back(c.string());
                     return arr;
                 }()},
                {"data", a.data.string()},
                {"truth", a.truth ? json(a.truth->string()) : json(nullptr)},
                {"batch_size", a.batch_size},
                {"n_batches", a.n_batches},
                {"norm", a.norm},
                {"mode", a.mode},
                {"theta", a.theta ? json(*a.theta) : json(nullptr)}};
}

void print_report(std::ostream& os, const MetricsReport& r) {
    os << "nmse: " << r.nmse << "\nl0_mean: " << r.l0_mean << "\nl0_variance: " << r.l0_variance
       << "\ndead_fraction: " << r.dead_fraction << "\ntheta_global: " << r.theta_global << "\n";
    if (r.mmcs) os << "mmcs: " << *r.mmcs << "\n";
    os << "samples: " << r.samples << "\n";
}

void add_eval(CLI::App& root, EvalArgs& a, std::function<void()>& run) {
    auto* c = root.add_subcommand("eval", "Evaluate a checkpoint on an activation file");
    a.checkpoints.resize(1);
    c->add_option("--checkpoint", a.checkpoints[0], "Checkpoint")->required()->check(CLI::ExistingFile);
    c->add_option("--out", a.out, "Report JSON (the L0 histogram also goes to <out>.hist.csv)");
    c->add_option("--theta", a.theta, "Override the checkpoint's inference threshold");
    add_eval_flags(c, a);
    c->callback([&] {
        run = [&] {
            const auto truth = load_truth(a);
            const auto e = evaluate_checkpoint(a.checkpoints[0], a, truth);
            print_report(std::cout, e.report);
            if (a.out) {
                write_json_file(*a.out, json(e.report));
                std::ofstream hist(sibling(*a.out, ".hist.csv"), std::ios::trunc);
                write_hist_csv(hist, e.report.l0_hist);
                write_json_file(sibling(*a.out, ".manifest.json"),
                                make_manifest("eval", eval_inputs(a),
                                              {{"report", a.out->string()},
                                               {"hist_csv", sibling(*a.out, ".hist.csv").string()}}));
            }
        };
    });
}

void add_compare(CLI::App& root, EvalArgs& a, std::function<void()>& run) {
    auto* c = root.add_subcommand("compare", "Evaluate several checkpoints on shared data");
    c->add_option("--checkpoint", a.checkpoints, "Checkpoints (at least two)")
        ->required()
        ->check(CLI::ExistingFile);
    c->add_option("--out", a.out, "Table as JSON");
    c->add_option("--out-csv", a.out_csv, "Table as CSV (default <out>.csv)");
    add_eval_flags(c, a);
    c->callback([&] {
        run = [&] {
            if (a.checkpoints.size() < 2) throw UsageError("compare needs at least two --checkpoint");
            const auto truth = load_truth(a);
            json rows = json::array();
            std::ostringstream csv;
            csv << std::setprecision(10)
                << "name,variant,d,m,k,lambda,nmse,l0_mean,l0_variance,dead_fraction,mmcs,theta_global\n";
            std::size_t d = 0;
            for (const auto& path : a.checkpoints) {
                const auto e = evaluate_checkpoint(path, a, truth);
                const auto& p = e.ck.params;
                if (d && p.d() != d) throw UsageError("checkpoints disagree on d");
                d = p.d();
                const auto& r = e.report;
                json row{{"name", e.name},
                         {"checkpoint", path.string()},
                         {"variant", to_string(p.variant)},
                         {"d", p.d()},
                         {"m", p.m()},
                         {"k", p.k},
                         {"lambda", e.ck.lambda},
                         {"report", r}};
                rows.push_back(row);
                csv << e.name << ',' << to_string(p.variant) << ',' << p.d() << ',' << p.m() << ','
                    << p.k << ',' << e.ck.lambda << ',' << r.nmse << ',' << r.l0_mean << ','
                    << r.l0_variance << ',' << r.dead_fraction << ','
                    << (r.mmcs ? std::to_string(*r.mmcs) : std::string()) << ',' << r.theta_global
                    << '\n';
            }
            std::cout << csv.str();
            if (a.out || a.out_csv) {
                const fs::path csv_path =
                    a.out_csv.value_or(a.out ? fs::path(*a.out).replace_extension(".csv") : fs::path("compare.csv"));
                std::ofstream os(csv_path, std::ios::trunc);
                if (!os) throw std::runtime_error("cannot open '" + csv_path.string() + "' for writing");
                os << csv.str();
                json outputs{{"csv", csv_path.string()}};
                if (a.out) {
                    write_json_file(*a.out, rows);
                    outputs["json"] = a.out->string();
                }
                write_json_file(sibling(a.out.value_or(csv_path), ".manifest.json"),
                                make_manifest("compare", eval_inputs(a), outputs));
            }
        };
    });
}

// ---------------------------------------------------------------------------
// threshold

struct ThresholdArgs {
    fs::path checkpoint;
    fs::path data;
    std::size_t batch_size = 4096;
    std::uint64_t n_batches = 100;
    std::optional<fs::path> out;
};

void add_threshold(CLI::App& root, ThresholdArgs& a, std::function<void()>& run) {
    auto* c = root.add_subcommand(
        "threshold", "Estimate a BatchTopK model's global inference threshold from data");
    c->add_option("--checkpoint", a.checkpoint, "BatchTopK checkpoint")->required()->check(CLI::ExistingFile);
    c->add_option("--data", a.data, "Activation file")->required()->check(CLI::ExistingFile);
    c->add_option("--batch-size", a.batch_size, "Rows per batch");
    c->add_option("--n-batches", a.n_batches, "Batches to average over");
    c->add_option("--out", a.out, "Write a copy of the checkpoint carrying the new threshold");
    c->callback([&] {
        run = [&] {
            Checkpoint ck = load_checkpoint(a.checkpoint);
            const auto data =
                ActivationDataset::file(a.data, a.batch_size, std::nullopt, ck.params.d());
            const auto est = estimate_threshold(ck.params, data, a.n_batches, ck.input_scale);
            std::cout << "theta_global: " << est.theta_global << " (" << est.batches_seen
                      << " batches)\n";
            if (a.out) {
                ck.threshold = est;
                save_checkpoint(*a.out, ck);
                write_json_file(sibling(*a.out, ".manifest.json"),
                                make_manifest("threshold",
                                              {{"checkpoint", a.checkpoint.string()},
                                               {"data", a.data.string()},
                                               {"batch_size", a.batch_size},
                                               {"n_batches", a.n_batches}},
                                              {{"checkpoint", a.out->string()},
                                               {"theta_global", est.theta_global}}));
            }
        };
    });
}

// ---------------------------------------------------------------------------
// inspect

json summarize(const Checkpoint& ck) {
    const auto& p = ck.params;
    const Matrix norms = row_norms(p.w_dec);
    double lo = norms.size() ? norms.data()[0] : 0.0, hi = lo, sum = 0.0;
    for (double n : norms.data()) {
        lo = std::min(lo, n);
        hi = std::max(hi, n);
        sum += n;
    }
    json j{{"variant", to_string(p.variant)},
           {"d", p.d()},
           {"m", p.m()},
           {"k", p.k},
           {"lambda", ck.lambda},
           {"bandwidth", p.bandwidth},
           {"subtract_decoder_bias", p.subtract_decoder_bias},
           {"input_scale", ck.input_scale},
           {"decoder_norm", {{"min", lo}, {"max", hi}, {"mean", norms.size() ? sum / norms.size() : 0.0}}}};
    if (ck.threshold)
        j["threshold"] = {{"theta_global", ck.threshold->theta_global},
                          {"batches_seen", ck.threshold->batches_seen}};
    else
        j["threshold"] = nullptr;
    if (p.variant == Variant::JumpRelu) {
        double tmin = p.theta.data()[0], tmax = tmin;
        for (double t : p.theta.data()) {
            tmin = std::min(tmin, t);
            tmax = std::max(tmax, t);
        }
        j["theta"] = {{"min", tmin}, {"max", tmax}};
    }
    if (ck.trainer) {
        j["training"] = {{"step", ck.trainer->step},
                         {"tokens_seen", ck.trainer->tokens_seen},
                         {"dead_threshold_tokens", ck.trainer->dead_threshold}};
        std::size_t dead = 0;
        for (auto c : ck.trainer->since_fire) dead += c >= ck.trainer->dead_threshold;
        j["training"]["dead_latents"] = dead;
    }
    j["optimizer_tensors"] = ck.adam.size();
    return j;
}

void add_inspect(CLI::App& root, fs::path& path, std::function<void()>& run) {
    auto* c = root.add_subcommand("inspect", "Print a checkpoint summary as JSON");
    c->add_option("--checkpoint", path, "Checkpoint")->required()->check(CLI::ExistingFile);
    c->callback([&] {
        run = [&] { std::cout << summarize(load_checkpoint(path)).dump(2) << "\n"; };
    });
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse autoencoder toolkit (ReLU, TopK, BatchTopK, JumpReLU)"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    std::function<void()> run;
    GenerateArgs gen;
    TrainArgs tr;
    EvalArgs ev, cmp;
    ThresholdArgs th;
    fs::path inspect_path;
    add_generate(app, gen, run);
    add_train(app, tr, run);
    add_eval(app, ev, run);
    add_compare(app, cmp, run);
    add_threshold(app, th, run);
    add_inspect(app, inspect_path, run);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    try {
        run();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
