#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "config.hpp"
#include "data.hpp"
#include "encoders.hpp"
#include "errors.hpp"
#include "inference.hpp"
#include "metrics.hpp"
#include "training.hpp"

namespace hammer::cli {

namespace fs = std::filesystem;

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
    const char* env = std::getenv("HAMMER_LOG");
    if (env == nullptr) return LogLevel::info;
    const std::string v = env;
    if (v == "error") return LogLevel::error;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::info;
}

struct Io {
    std::ostream& out;
    std::ostream& err;
    LogLevel level = log_level();

    void info(const std::string& m) const {
        if (level >= LogLevel::info) err << m << "\n";
    }
    void debug(const std::string& m) const {
        if (level >= LogLevel::debug) err << m << "\n";
    }
};

inline void prepare_out_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw InputError(dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir) && !force) {
            throw InputError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
        }
    }
    fs::create_directories(dir);
}

inline void write_text(const fs::path& path, const std::string& text) { detail::write_file(path, text); }

inline std::string checkpoint_config_path(const fs::path& checkpoint) { return checkpoint.string() + ".config"; }

// Resolved configuration stored next to a checkpoint; falls back to the
// config.resolved of the checkpoint's directory.
inline void apply_checkpoint_config(RunConfig& c, const fs::path& checkpoint) {
    const fs::path sidecar = checkpoint_config_path(checkpoint);
    const fs::path resolved = checkpoint.parent_path() / "config.resolved";
    if (fs::exists(sidecar)) {
        apply_config_file(c, sidecar);
    } else if (fs::exists(resolved)) {
        apply_config_file(c, resolved);
    } else {
        throw LoadError(checkpoint.string() + ": no " + sidecar.string() + " or config.resolved next to it");
    }
}

inline Corpus load_corpus(const fs::path& dir, const RunConfig& c) {
    return fit_to_length(read_dataset(dir), c.model.max_video_length);
}

inline HammerModel build_model(const RunConfig& c) {
    EncoderConfig m = c.model;
    m.seed = c.seed;
    return HammerModel(m);
}

inline void cmd_gen_data(const RunConfig& c, const fs::path& out_dir, bool force, const Io& io) {
    CorpusConfig cc = c.corpus;
    cc.seed = c.seed;
    cc.validate();
    prepare_out_dir(out_dir, force);
    const Corpus corpus = gen_corpus(cc);
    write_dataset(corpus, out_dir);
    write_text(out_dir / "config.resolved", config_text(c));
    io.out << "videos " << corpus.videos.size() << ", examples " << corpus.examples.size() << " (train "
           << corpus.split_indices(Split::train).size() << ", heldout " << corpus.split_indices(Split::heldout).size()
           << "), sigma " << format_number(cc.noise_sigma) << ", seed " << cc.seed << "\n";
}

inline TrainResult cmd_train(RunConfig c, const fs::path& data_dir, const fs::path& out_dir, bool force, const Io& io) {
    const Corpus raw = read_dataset(data_dir);
    adapt_model_to_corpus(c.model, raw);
    c.train.seed = c.seed;
    c.model.validate();
    c.train.validate();
    const Corpus corpus = fit_to_length(raw, c.model.max_video_length);
    prepare_out_dir(out_dir, force);
    write_text(out_dir / "config.resolved", config_text(c));
    HammerModel model = build_model(c);
    io.info("model " + to_string(c.model.architecture) + ", " + std::to_string(model.parameters().scalar_count()) +
            " parameters, " + std::to_string(corpus.split_indices(Split::train).size()) + " training queries");

    std::string log;
    const auto t0 = std::chrono::steady_clock::now();
    TrainHooks hooks;
    hooks.checkpoint_dir = out_dir;
    hooks.inference.threads = c.threads;
    hooks.inference.decode = c.decode;
    hooks.on_step = [&](const HistoryRecord& h) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream line;
        line << "step " << h.step << " epoch " << h.epoch << " lr " << h.lr << " loss " << h.loss_total << " (vr "
             << h.loss_vr << ", tl " << h.loss_tl << ", mlm " << h.loss_mlm << ")";
        log += line.str() + "\n";
        io.debug(line.str() + " t=" + format_number(secs, 1) + "s");
        if (!h.eval.empty()) {
            std::ostringstream ev;
            ev << "eval at step " << h.step << ":";
            for (const auto& m : h.eval) {
                if (m.slice == "all") ev << " " << m.metric_name << "=" << format_number(m.value);
            }
            io.info(ev.str());
            log += ev.str() + "\n";
        }
    };
    TrainResult result = train(model, corpus, c.train, hooks);
    write_text(out_dir / "history.jsonl", render_history(result.history));
    write_text(out_dir / "run.log", log);
    if (result.diverged) {
        throw NumericError("training diverged at " + result.divergence + "; last good parameters kept in " +
                           (out_dir / "last_good.bin").string());
    }
    write_text(checkpoint_config_path(out_dir / "model.bin"), config_text(c));
    io.out << "trained " << result.steps << " steps; checkpoint " << (out_dir / "model.bin").string() << "\n";
    return result;
}

struct EvalSummary {
    MetricReport report;
    EvaluationResult evaluation;
};

inline Split parse_split_flag(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "heldout" || s == "val" || s == "test") return Split::heldout;
    throw InputError("unknown split '" + s + "' (expected train or heldout)");
}

inline EvalSummary cmd_eval(const RunConfig& c, const fs::path& checkpoint, const fs::path& data_dir,
                            const std::string& split, const fs::path& out_dir, bool force, const Io& io) {
    HammerModel model = build_model(c);
    model.parameters().load(checkpoint);
    const Corpus corpus = load_corpus(data_dir, c);
    const auto queries = corpus.split_indices(parse_split_flag(split));
    if (queries.empty()) throw InputError("split '" + split + "' has no queries in " + data_dir.string());
    std::size_t k = 1;
    for (std::size_t x : c.eval_ks) k = std::max(k, x);
    prepare_out_dir(out_dir, force);
    write_text(out_dir / "config.resolved", config_text(c));

    InferenceOptions opt{c.decode, c.threads};
    model.reset_encoder_invocations();
    EvalSummary s;
    s.evaluation = evaluate(model, corpus, queries, k, opt);
    ReportOptions ro;
    ro.ks = c.eval_ks;
    ro.mlvc_taus = c.eval_taus;
    ro.duration_bucket_count = c.duration_buckets;
    s.report = compute_report(s.evaluation.records, ro);

    const std::size_t expected = corpus.videos.size() + std::min(k, corpus.videos.size());
    std::string passes;
    bool all_match = true;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        nlohmann::ordered_json j;
        j["query_id"] = corpus.examples[queries[i]].query_id;
        j["encoder_passes"] = s.evaluation.encoder_passes[i];
        j["corpus_size"] = corpus.videos.size();
        j["k"] = std::min(k, corpus.videos.size());
        passes += j.dump() + "\n";
        all_match = all_match && s.evaluation.encoder_passes[i] == expected;
    }
    write_text(out_dir / "predictions.jsonl", render_predictions(s.evaluation.records));
    write_text(out_dir / "report.txt", render_report(s.report));
    write_text(out_dir / "metrics.jsonl", render_metric_lines(s.report));
    write_text(out_dir / "encoder_passes.jsonl", passes);
    io.out << render_report(s.report);
    io.out << "\nencoder passes per query: " << (all_match ? std::to_string(expected) : std::string("varied")) << " (|V|="
           << corpus.videos.size() << " + k=" << std::min(k, corpus.videos.size()) << ")\n";
    return s;
}

inline std::vector<ScoredCandidate> cmd_localize(const RunConfig& c, const fs::path& checkpoint, const fs::path& data_dir,
                                                 const std::string& query_id, const std::string& tokens, std::size_t k,
                                                 const Io& io) {
    HammerModel model = build_model(c);
    model.parameters().load(checkpoint);
    const Corpus corpus = load_corpus(data_dir, c);
    QueryRecord query;
    if (!query_id.empty()) {
        const AnnotatedExample* ex = corpus.find_query(query_id);
        if (ex == nullptr) throw InputError("unknown query id '" + query_id + "'");
        query = ex->query;
    } else {
        std::istringstream in(tokens);
        std::string t;
        while (in >> t) query.tokens.push_back(corpus.vocab.lookup(t));
        if (query.tokens.empty()) throw InputError("no query given; pass --query-id or --tokens");
    }
    if (k == 0) throw InputError("k must be at least 1");
    const RetrievalResult r = mlvc_retrieve(model, query, corpus.videos, k, {c.decode, c.threads});
    io.out << "rank\tvideo_id\tstart\tend\tvideo_score\tpair_score\n";
    for (std::size_t i = 0; i < r.candidates.size(); ++i) {
        const auto& cand = r.candidates[i];
        io.out << (i + 1) << "\t" << cand.video_id << "\t" << cand.segment.start << "\t" << cand.segment.end << "\t"
               << format_number(cand.video_score) << "\t" << format_number(cand.pair_score) << "\n";
    }
    return r.candidates;
}

struct AblationAxis {
    std::string key;
    std::vector<std::string> values;
};

inline AblationAxis parse_axis(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("ablation axis must look like key=v1,v2: '" + spec + "'");
    AblationAxis a{detail::trim(spec.substr(0, eq)), {}};
    if (find_config_key(a.key) == nullptr) throw ConfigError("unknown flag '" + a.key + "' in ablation grid");
    a.values = detail::parse_list<std::string>(spec.substr(eq + 1), [](const std::string& s) { return s; });
    if (a.values.empty()) throw ConfigError("ablation axis '" + a.key + "' has no values");
    return a;
}

struct AblationRow {
    std::vector<std::string> settings;
    MetricReport report;
    std::size_t steps = 0;
};

inline std::string ablation_cell(const MetricReport& rep, const std::string& name) {
    auto v = rep.get(name);
    return v ? format_number(100.0 * *v, 2) : std::string("--");
}

inline std::string render_ablation(const std::vector<AblationAxis>& axes, const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    for (const auto& a : axes) os << a.key << "\t";
    os << "| VR R1\tR10\tR100\t| TL IoU=0.5\tIoU=0.7\tmIoU\t| MLVC@0.5 R1\tR10\tR100\t| MLVC@0.7 R1\tR10\tR100\n";
    for (const auto& r : rows) {
        for (const auto& s : r.settings) os << s << "\t";
        const auto& m = r.report;
        os << "| " << ablation_cell(m, "vr_recall@1") << "\t" << ablation_cell(m, "vr_recall@10") << "\t"
           << ablation_cell(m, "vr_recall@100") << "\t| " << ablation_cell(m, "tl_precision@0.5") << "\t"
           << ablation_cell(m, "tl_precision@0.7") << "\t" << ablation_cell(m, "tl_mean_iou") << "\t| "
           << ablation_cell(m, "mlvc_recall@1@0.5") << "\t" << ablation_cell(m, "mlvc_recall@10@0.5") << "\t"
           << ablation_cell(m, "mlvc_recall@100@0.5") << "\t| " << ablation_cell(m, "mlvc_recall@1@0.7") << "\t"
           << ablation_cell(m, "mlvc_recall@10@0.7") << "\t" << ablation_cell(m, "mlvc_recall@100@0.7") << "\n";
    }
    return os.str();
}

// Trains and evaluates every cell of the cartesian grid with the base seed.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::vector<std::string>& axis_specs,
                                           const fs::path& data_dir, const fs::path& out_dir, bool force, bool parallel,
                                           const Io& io) {
    if (axis_specs.empty()) throw ConfigError("ablation needs at least one --axis key=v1,v2");
    std::vector<AblationAxis> axes;
    for (const auto& s : axis_specs) axes.push_back(parse_axis(s));
    std::vector<std::vector<std::string>> cells{{}};
    for (const auto& a : axes) {
        std::vector<std::vector<std::string>> next;
        for (const auto& cell : cells) {
            for (const auto& v : a.values) {
                auto c = cell;
                c.push_back(v);
                next.push_back(std::move(c));
            }
        }
        cells = std::move(next);
    }
    // Validate every cell's configuration before any training starts.
    std::vector<RunConfig> configs;
    for (const auto& cell : cells) {
        RunConfig c = base;
        for (std::size_t i = 0; i < axes.size(); ++i) set_config(c, axes[i].key, cell[i]);
        c.model.validate();
        c.train.validate();
        configs.push_back(c);
    }
    const Corpus raw = read_dataset(data_dir);
    prepare_out_dir(out_dir, force);
    write_text(out_dir / "config.resolved", config_text(base));

    std::vector<AblationRow> rows(cells.size());
    parallel_for(cells.size(), parallel ? std::max(1u, base.threads) : 1u, [&](std::size_t i) {
        RunConfig c = configs[i];
        adapt_model_to_corpus(c.model, raw);
        c.train.seed = c.seed;
        const Corpus corpus = fit_to_length(raw, c.model.max_video_length);
        HammerModel model = build_model(c);
        std::string name = "arm";
        for (std::size_t a = 0; a < axes.size(); ++a) name += "_" + axes[a].key + "-" + cells[i][a];
        TrainHooks hooks;
        hooks.inference = {c.decode, 1};
        TrainConfig tc = c.train;
        TrainResult tr = train(model, corpus, tc, hooks);
        if (tr.diverged) throw NumericError("ablation arm " + name + " diverged at " + tr.divergence);
        std::size_t k = 1;
        for (std::size_t x : c.eval_ks) k = std::max(k, x);
        const auto ev = evaluate(model, corpus, corpus.split_indices(Split::heldout), k, {c.decode, 1});
        ReportOptions ro;
        ro.ks = c.eval_ks;
        ro.mlvc_taus = c.eval_taus;
        ro.duration_bucket_count = c.duration_buckets;
        rows[i] = {cells[i], compute_report(ev.records, ro), tr.steps};
        const fs::path arm_dir = out_dir / name;
        fs::create_directories(arm_dir);
        write_text(arm_dir / "config.resolved", config_text(c));
        write_text(arm_dir / "history.jsonl", render_history(tr.history));
        write_text(arm_dir / "metrics.jsonl", render_metric_lines(rows[i].report));
        io.info("finished " + name);
    });

    const std::string table = render_ablation(axes, rows);
    std::string jsonl;
    for (const auto& r : rows) {
        nlohmann::ordered_json j;
        for (std::size_t a = 0; a < axes.size(); ++a) j[axes[a].key] = r.settings[a];
        j["steps"] = r.steps;
        for (const auto& l : r.report.lines) {
            if (l.slice == "all") j[l.metric_name] = l.value;
        }
        jsonl += j.dump() + "\n";
    }
    write_text(out_dir / "ablation.txt", table);
    write_text(out_dir / "ablation.jsonl", jsonl);
    io.out << table;
    return rows;
}

// Parses and runs one command line. Errors become a single
// "error: <kind>: <message>" line and a non-zero exit code.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Hierarchical video-text encoder: data generation, training, evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    app.footer("Configuration precedence: built-in defaults < --preset < --config file < --set < command flags.\n"
               "HAMMER_LOG=error|info|debug controls stderr verbosity.");

    std::optional<std::uint64_t> seed;
    std::string config_file, out_dir, preset;
    std::vector<std::string> sets;
    bool force = false;
    unsigned threads = 0;
    app.add_option("--seed", seed, "master seed");
    app.add_option("--config", config_file, "key=value config file");
    app.add_option("--set", sets, "override one config key (key=value), repeatable");
    app.add_option("--out", out_dir, "output directory");
    app.add_flag("--force", force, "write into a non-empty output directory");
    app.add_option("--threads", threads, "worker threads for evaluation");
    app.add_option("--preset", preset, "corpus preset: tiny, stress, micro");

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");

    auto* tr = app.add_subcommand("train", "train a model on a dataset");
    std::string data_dir, model_kind;
    std::optional<std::size_t> clip_length, epochs, batch_size;
    std::optional<double> lambda_vr, lambda_tl, lambda_mlm, max_lr;
    bool no_cross = false;
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--model", model_kind, "hammer or flat");
    tr->add_option("--clip-length", clip_length, "frames per clip");
    tr->add_option("--lambda-vr", lambda_vr, "retrieval loss weight");
    tr->add_option("--lambda-tl", lambda_tl, "localization loss weight");
    tr->add_option("--lambda-mlm", lambda_mlm, "masked-token loss weight");
    tr->add_flag("--no-cross-modal", no_cross, "drop the cross-modal layers");
    tr->add_option("--epochs", epochs, "training epochs");
    tr->add_option("--batch-size", batch_size, "mini-batch size");
    tr->add_option("--max-lr", max_lr, "peak learning rate");

    auto* ev = app.add_subcommand("eval", "two-stage evaluation of a checkpoint");
    std::string checkpoint, split = "heldout", ks, taus;
    ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--split", split, "train or heldout");
    ev->add_option("--k", ks, "recall cutoffs, e.g. 1,10,100");
    ev->add_option("--tau", taus, "IoU thresholds, e.g. 0.5,0.7");

    auto* loc = app.add_subcommand("localize", "rank and localize one query");
    std::string query_id, tokens;
    std::size_t top_k = 3;
    loc->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    loc->add_option("--data", data_dir, "dataset directory")->required();
    loc->add_option("--query-id", query_id, "query id from the dataset");
    loc->add_option("--tokens", tokens, "space-separated tokens, e.g. \"f1 c12 c40\"");
    loc->add_option("-k,--top", top_k, "candidates to print");

    auto* ab = app.add_subcommand("ablate", "train and evaluate a grid of settings");
    std::vector<std::string> axes;
    bool parallel = false;
    ab->add_option("--data", data_dir, "dataset directory")->required();
    ab->add_option("--axis", axes, "grid axis key=v1,v2, repeatable")->required();
    ab->add_flag("--parallel", parallel, "run grid cells on --threads workers");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 64;
    }

    const Io io{out, err};
    try {
        RunConfig c;
        if (!preset.empty()) {
            c.corpus = preset_corpus(preset);
            c.model.max_query_length = c.corpus.max_query_tokens() + 1;
        }
        if (ev->parsed() || loc->parsed()) apply_checkpoint_config(c, checkpoint);
        if (!config_file.empty()) apply_config_file(c, config_file);
        for (const auto& s : sets) apply_assignment(c, s);
        if (seed) c.seed = *seed;
        if (threads > 0) c.threads = threads;

        if (gen->parsed()) {
            if (out_dir.empty()) throw InputError("gen-data needs --out");
            cmd_gen_data(c, out_dir, force, io);
        } else if (tr->parsed()) {
            if (out_dir.empty()) throw InputError("train needs --out");
            if (!model_kind.empty()) set_config(c, "model", model_kind);
            if (clip_length) c.model.clip_length = *clip_length;
            if (lambda_vr) c.train.weights.vr = *lambda_vr;
            if (lambda_tl) c.train.weights.tl = *lambda_tl;
            if (lambda_mlm) c.train.weights.mask = *lambda_mlm;
            if (no_cross) c.model.cross_modal_layers = 0;
            if (epochs) c.train.epochs = *epochs;
            if (batch_size) c.train.batch_size = *batch_size;
            if (max_lr) c.train.max_lr = *max_lr;
            cmd_train(c, data_dir, out_dir, force, io);
        } else if (ev->parsed()) {
            if (!ks.empty()) set_config(c, "eval_ks", ks);
            if (!taus.empty()) set_config(c, "eval_taus", taus);
            const fs::path dir = out_dir.empty() ? fs::path(checkpoint).parent_path() / ("eval-" + split) : fs::path(out_dir);
            cmd_eval(c, checkpoint, data_dir, split, dir, force, io);
        } else if (loc->parsed()) {
            if (query_id.empty() == tokens.empty()) throw InputError("pass exactly one of --query-id and --tokens");
            cmd_localize(c, checkpoint, data_dir, query_id, tokens, top_k, io);
        } else if (ab->parsed()) {
            if (out_dir.empty()) throw InputError("ablate needs --out");
            cmd_ablate(c, axes, data_dir, out_dir, force, parallel, io);
        }
    } catch (const Error& e) {
        err << "error: " << e.kind() << ": " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace hammer::cli
