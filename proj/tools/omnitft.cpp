// omnitft command-line driver: synth, train, eval, label.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "omnitft/checkpoint.hpp"
#include "omnitft/evalkit.hpp"
#include "omnitft/ingest.hpp"
#include "omnitft/labeler.hpp"
#include "omnitft/pipeline.hpp"
#include "omnitft/trainer.hpp"

namespace fs = std::filesystem;
using namespace omnitft;
using json = nlohmann::json;

namespace {

enum Exit : int { ok = 0, unexpected = 1, config_error = 2, diverged = 3, schema_mismatch = 4 };

const char* kFooter =
    "Exit codes: 0 success, 1 unexpected failure, 2 configuration / input error\n"
    "(missing or invalid schema, config, data), 3 training diverged (best checkpoint\n"
    "still written), 4 checkpoint and data schema disagree.\n"
    "Every command writes manifest.json into its output directory. OMNITFT_THREADS\n"
    "caps worker threads; SOURCE_DATE_EPOCH pins the manifest timestamp.";

std::string sha256_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(static_cast<bool>(in), Errc::IoError, "cannot read " + p.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    char h[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(h, sizeof h, "%02x", md[i]);
        hex += h;
    }
    return hex;
}

std::string sha256_text(const std::string& s) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(s.data(), s.size(), md, &len, EVP_sha256(), nullptr);
    std::string hex;
    char h[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(h, sizeof h, "%02x", md[i]);
        hex += h;
    }
    return hex;
}

std::string utc_now() {
    std::time_t t = std::time(nullptr);
    if (const char* e = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::atoll(e));
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct Manifest {
    std::string command;
    json seeds = json::object();
    json config;
    std::vector<fs::path> inputs;
    std::vector<std::string> artifacts;  // relative to the output directory
    std::string started = utc_now();

    void write(const fs::path& out) const {
        json j;
        j["command"] = command;
        j["started_utc"] = started;
        j["finished_utc"] = utc_now();
        j["seeds"] = seeds;
        if (!config.is_null()) {
            j["config"] = config;
            j["config_sha256"] = sha256_text(config.dump());
        }
        j["inputs"] = json::array();
        for (const auto& p : inputs) j["inputs"].push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
        j["artifacts"] = json::array();
        for (const auto& a : artifacts)
            j["artifacts"].push_back(
                {{"path", a}, {"sha256", sha256_file(out / a)}, {"bytes", fs::file_size(out / a)}});
        std::ofstream os(out / "manifest.json");
        os << j.dump(2) << '\n';
        require(os.good(), Errc::IoError, "cannot write manifest");
    }
};

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p, std::ios::binary);
    require(static_cast<bool>(os), Errc::IoError, "cannot write " + p.string());
    return os;
}

void write_text(const fs::path& p, const std::string& s) {
    auto os = open_out(p);
    os << s;
    require(os.good(), Errc::IoError, "cannot write " + p.string());
}

DatasetSchema read_schema(const std::string& path) {
    require(!path.empty() && fs::exists(path), Errc::InvalidSchema, "schema file not found: " + path);
    return load_schema(path);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::size_t patients = 50;
    double shock_rate = 0.3;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t steps = 240;
    std::size_t encoder_len = 72;
    std::size_t horizon_len = 12;
};

int cmd_synth(const SynthArgs& a) {
    fs::create_directories(a.out);
    const auto schema = default_synthetic_schema(a.encoder_len, a.horizon_len);
    SyntheticOptions opt;
    opt.steps_per_patient = a.steps;
    const auto data = generate_synthetic(a.patients, schema, a.shock_rate, a.seed, opt);
    const fs::path out(a.out);
    {
        auto os = open_out(out / "events.csv");
        std::vector<RawEvent> all;
        for (const auto& s : data.series) {
            auto ev = to_events(s, schema);
            all.insert(all.end(), ev.begin(), ev.end());
        }
        write_events_csv(os, all, schema);
    }
    write_text(out / "schema.json", json(schema).dump(2) + "\n");
    {
        auto os = open_out(out / "regimes.csv");
        write_regimes_csv(os, data, schema);
    }
    Manifest m;
    m.command = "synth";
    m.seeds = {{"seed", a.seed}};
    m.config = {{"patients", a.patients}, {"shock_rate", a.shock_rate}, {"steps", a.steps}};
    m.artifacts = {"events.csv", "schema.json", "regimes.csv"};
    m.write(out);
    std::cout << "wrote " << data.series.size() << " patients to " << a.out << "\n";
    return ok;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data, schema, config, out;
    bool dry_run = false;
};

int cmd_train(const TrainArgs& a) {
    const auto schema = read_schema(a.schema);
    RunConfig cfg;
    if (!a.config.empty()) cfg = load_run_config(a.config);
    auto grids = load_grid_series(a.data, schema);
    auto prepared = prepare(std::move(grids), schema, cfg.data);
    const auto& tr = prepared.split(Split::train);
    const auto& va = prepared.split(Split::val);
    require(!tr.empty() && !va.empty(), Errc::InvalidConfig, "train or validation split has no windows");
    Model model(prepared.schema, cfg.model, cfg.data.init_seed);
    model.set_normalizer(prepared.normalizer);
    std::cout << "windows: train " << tr.size() << ", val " << va.size() << ", test "
              << prepared.split(Split::test).size() << "; parameters " << model.params().scalar_count() << "\n";
    for (const auto& d : prepared.dropped) std::cout << "dropped " << d << "\n";
    if (a.dry_run) {
        std::cout << "dry run: configuration valid\n";
        return ok;
    }

    fs::create_directories(a.out);
    const fs::path out(a.out);
    auto result = train(model, tr, va, cfg.train, [](const EpochRecord& r) {
        std::printf("epoch %zu  L_quantile %.6f  L_total %.6f  val %.6f\n", r.epoch, r.objective.l_quantile,
                    r.objective.l_total, r.val_loss);
        std::fflush(stdout);
    });

    json meta = {{"split_seed", cfg.data.split_seed},
                 {"split_ratios", cfg.data.split_ratios},
                 {"stride", cfg.data.stride},
                 {"max_gap_h", cfg.data.max_gap_h},
                 {"missing_threshold", cfg.data.missing_threshold},
                 {"delta", prepared.delta},
                 {"best_epoch", result.best_epoch},
                 {"diverged", result.diverged}};
    save_checkpoint((out / "checkpoint.bin").string(), Checkpoint::from_model(model, prepared.fill, meta));
    {
        auto os = open_out(out / "history.csv");
        write_history_csv(os, result.history);
    }
    write_text(out / "config.json", run_config_json(cfg).dump(2) + "\n");

    Manifest m;
    m.command = "train";
    m.seeds = {{"split_seed", cfg.data.split_seed}, {"init_seed", cfg.data.init_seed}, {"train_seed", cfg.train.seed}};
    m.config = run_config_json(cfg);
    m.inputs = {fs::path(a.data) / "events.csv", fs::path(a.schema)};
    if (!a.config.empty()) m.inputs.emplace_back(a.config);
    m.artifacts = {"checkpoint.bin", "history.csv", "config.json"};
    m.write(out);
    if (result.diverged) {
        std::cerr << "error: training diverged (non-finite objective); best checkpoint from epoch " << result.best_epoch
                  << " written\n";
        return diverged;
    }
    std::cout << "best epoch " << result.best_epoch << ", val loss " << result.best_val_loss << "\n";
    return ok;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, data, out, schema;
};

int cmd_eval(const EvalArgs& a) {
    const auto ckpt = load_checkpoint(a.checkpoint);
    std::string schema_path = a.schema;
    if (schema_path.empty() && fs::exists(fs::path(a.data) / "schema.json"))
        schema_path = (fs::path(a.data) / "schema.json").string();
    if (!schema_path.empty())
        require(read_schema(schema_path) == ckpt.schema, Errc::SchemaMismatch,
                "data schema differs from the checkpoint schema");
    const auto model = ckpt.model();

    DataConfig dc;
    dc.split_seed = ckpt.meta.value("split_seed", std::uint64_t{0});
    dc.split_ratios = ckpt.meta.value("split_ratios", dc.split_ratios);
    dc.stride = ckpt.meta.value("stride", std::size_t{1});
    dc.max_gap_h = ckpt.meta.value("max_gap_h", dc.max_gap_h);
    dc.missing_threshold = ckpt.meta.value("missing_threshold", dc.missing_threshold);
    const auto delta = ckpt.meta.value("delta", std::map<std::string, double>{});
    auto prepared = prepare(load_grid_series(a.data, ckpt.schema), ckpt.schema, dc, ckpt.fill, ckpt.normalizer, delta);
    const auto& test = prepared.split(Split::test);
    require(!test.empty(), Errc::InvalidConfig, "test split has no windows");

    const auto bundles = predict_all(model, test);
    const auto report = evaluate(model, test, bundles);
    fs::create_directories(fs::path(a.out) / "trajectories");
    const fs::path out(a.out);
    write_text(out / "metrics.json", to_json(report).dump(2) + "\n");
    write_text(out / "metrics.txt", render_table(report));

    std::vector<WindowScores> scores;
    for (std::size_t i = 0; i < test.size(); ++i)
        scores.push_back({test[i].target, window_importance(bundles[i], ckpt.schema.encoder_len)});
    {
        auto os = open_out(out / "importance.csv");
        write_importance_csv(os, aggregate_importance({scores}, ckpt.schema));
    }

    std::vector<std::string> artifacts = {"metrics.json", "metrics.txt", "importance.csv"};
    const auto targets = ckpt.schema.targets();
    for (std::size_t k = 0; k < targets.size(); ++k) {
        std::vector<std::size_t> idx;
        std::vector<double> maes;
        for (std::size_t i = 0; i < test.size(); ++i) {
            if (test[i].target != k) continue;
            std::vector<double> p50(test[i].future_target.size());
            const auto med = quantile_columns(model.config().quantiles).median;
            for (std::size_t h = 0; h < p50.size(); ++h) p50[h] = bundles[i].quantiles(h, med);
            idx.push_back(i);
            maes.push_back(mae(p50, test[i].future_target));
        }
        if (idx.empty()) continue;
        const auto pick = idx[nearest_to_mean(maes)];
        const auto name = "trajectories/" + ckpt.schema.features[targets[k]].name + ".csv";
        auto os = open_out(out / name);
        write_trajectory_csv(os, export_trajectory(model, test[pick], bundles[pick]));
        artifacts.push_back(name);
    }

    Manifest m;
    m.command = "eval";
    m.seeds = {{"split_seed", dc.split_seed}};
    m.inputs = {fs::path(a.checkpoint), fs::path(a.data) / "events.csv"};
    m.artifacts = artifacts;
    m.write(out);
    std::cout << render_table(report);
    return ok;
}

// ---------------------------------------------------------------------------

struct LabelArgs {
    std::string data, method = "threshold", delta_config, schema, out;
    std::uint64_t split_seed = 0;
};

int cmd_label(const LabelArgs& a) {
    const auto schema_path = a.schema.empty() ? (fs::path(a.data) / "schema.json").string() : a.schema;
    const auto schema = read_schema(schema_path);
    DataConfig dc;
    dc.split_seed = a.split_seed;
    if (!a.delta_config.empty()) {
        std::ifstream in(a.delta_config);
        require(static_cast<bool>(in), Errc::IoError, "cannot read " + a.delta_config);
        try {
            dc.delta = parse_delta_table(json::parse(in));
        } catch (const json::exception& e) {
            fail(Errc::InvalidConfig, a.delta_config + ": " + e.what());
        }
    }
    auto grids = load_grid_series(a.data, schema);
    DataConfig hmm_cfg = dc;
    hmm_cfg.labeler = LabelMethod::hmm;
    const auto by_threshold = prepare(grids, schema, dc);
    const auto by_hmm = prepare(std::move(grids), schema, hmm_cfg);
    const auto& chosen = a.method == "hmm" ? by_hmm : by_threshold;

    std::optional<RegimeTruth> truth;
    if (fs::exists(fs::path(a.data) / "regimes.csv")) {
        std::ifstream in(fs::path(a.data) / "regimes.csv");
        truth = read_regimes_csv(in);
    }
    std::map<std::string, std::size_t> trimmed;
    for (const auto& split : chosen.series)
        for (const auto& s : split) trimmed[s.patient_id] = s.trimmed_rows;

    const fs::path out(a.out.empty() ? a.data : a.out);
    fs::create_directories(out);
    auto os = open_out(out / "labels.csv");
    os << "patient_id,split,target,start,score,label" << (truth ? ",truth" : "") << "\n";
    std::size_t n = 0, n_vol = 0, agree = 0, thr_ok = 0, hmm_ok = 0, n_truth = 0;
    char buf[64];
    for (std::size_t si = 0; si < 3; ++si) {
        const auto& ws = chosen.windows[si];
        const auto& other = (a.method == "hmm" ? by_threshold : by_hmm).windows[si];
        for (std::size_t i = 0; i < ws.size(); ++i) {
            const auto& w = ws[i];
            const auto& tname = schema.features[schema.targets()[w.target]].name;
            std::snprintf(buf, sizeof buf, "%.10g", w.score);
            os << w.patient_id << ',' << split_name(kSplits[si]) << ',' << tname << ',' << w.start << ',' << buf << ','
               << label_name(w.label);
            ++n;
            n_vol += w.label == RegimeLabel::Volatile;
            agree += w.label == other[i].label;
            if (truth) {
                const auto& steps = truth->at(w.patient_id).at(tname);
                const std::size_t base = trimmed[w.patient_id] + w.start + schema.encoder_len;
                bool vol = false;
                for (std::size_t h = 0; h < schema.horizon_len; ++h) vol = vol || steps.at(base + h);
                const auto t = vol ? RegimeLabel::Volatile : RegimeLabel::Stable;
                os << ',' << label_name(t);
                ++n_truth;
                const auto thr = a.method == "hmm" ? other[i].label : w.label;
                const auto hmm = a.method == "hmm" ? w.label : other[i].label;
                thr_ok += thr == t;
                hmm_ok += hmm == t;
            }
            os << '\n';
        }
    }
    os.close();
    json summary = {{"method", a.method},
                    {"windows", n},
                    {"stable", n - n_vol},
                    {"volatile", n_vol},
                    {"delta", chosen.delta},
                    {"threshold_hmm_agreement", n ? static_cast<double>(agree) / static_cast<double>(n) : 0.0}};
    if (truth && n_truth) {
        summary["threshold_accuracy"] = static_cast<double>(thr_ok) / static_cast<double>(n_truth);
        summary["hmm_accuracy"] = static_cast<double>(hmm_ok) / static_cast<double>(n_truth);
    }
    write_text(out / "label_summary.json", summary.dump(2) + "\n");
    Manifest m;
    m.command = "label";
    m.seeds = {{"split_seed", a.split_seed}};
    m.inputs = {fs::path(a.data) / "events.csv", fs::path(schema_path)};
    if (!a.delta_config.empty()) m.inputs.emplace_back(a.delta_config);
    m.artifacts = {"labels.csv", "label_summary.json"};
    m.write(out);
    std::cout << summary.dump(2) << "\n";
    return ok;
}

int exit_for(const Error& e) {
    switch (e.code()) {
    case Errc::Diverged: return diverged;
    case Errc::SchemaMismatch: return schema_mismatch;
    default: return config_error;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"omnitft: quantile forecaster with regime-balanced sampling and calibration penalties"};
    app.footer(kFooter);
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "write a synthetic dataset, schema and ground-truth regimes");
    synth->add_option("--patients", sa.patients, "number of patients")->capture_default_str();
    synth->add_option("--shock-rate", sa.shock_rate, "stationary fraction of volatile steps")->capture_default_str();
    synth->add_option("--seed", sa.seed, "random seed")->capture_default_str();
    synth->add_option("--out", sa.out, "output directory")->required();
    synth->add_option("--steps", sa.steps, "grid steps per patient")->capture_default_str();
    synth->add_option("--encoder-len", sa.encoder_len, "encoder steps in the written schema")->capture_default_str();
    synth->add_option("--horizon-len", sa.horizon_len, "horizon steps in the written schema")->capture_default_str();

    TrainArgs ta;
    auto* trn = app.add_subcommand("train", "train a model and write checkpoint, history and manifest");
    trn->add_option("--data", ta.data, "directory holding events.csv")->required();
    trn->add_option("--schema", ta.schema, "schema JSON")->required();
    trn->add_option("--config", ta.config, "run config JSON (defaults when omitted)");
    trn->add_option("--out", ta.out, "output directory");
    trn->add_flag("--dry-run", ta.dry_run, "validate inputs and exit without training");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    ev->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
    ev->add_option("--data", ea.data, "directory holding events.csv")->required();
    ev->add_option("--out", ea.out, "output directory")->required();
    ev->add_option("--schema", ea.schema, "schema JSON to check against the checkpoint");

    LabelArgs la;
    auto* lab = app.add_subcommand("label", "label windows stable/volatile and summarise class balance");
    lab->add_option("--data", la.data, "directory holding events.csv")->required();
    lab->add_option("--method", la.method, "threshold or hmm")
        ->check(CLI::IsMember({"threshold", "hmm"}))
        ->capture_default_str();
    lab->add_option("--delta-config", la.delta_config, "JSON with per-target thresholds: {\"delta\": {...}}");
    lab->add_option("--schema", la.schema, "schema JSON (default <data>/schema.json)");
    lab->add_option("--out", la.out, "output directory (default <data>)");
    lab->add_option("--split-seed", la.split_seed, "patient split seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        if (*synth) return cmd_synth(sa);
        if (*trn) {
            if (!ta.dry_run && ta.out.empty()) fail(Errc::InvalidConfig, "--out is required unless --dry-run");
            return cmd_train(ta);
        }
        if (*ev) return cmd_eval(ea);
        if (*lab) return cmd_label(la);
    } catch (const Error& e) {
        std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << "\n";
        return exit_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return unexpected;
    }
    return unexpected;
}
