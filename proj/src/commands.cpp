#include "egopat/commands.hpp"

#include "egopat/annotation.hpp"
#include "egopat/dataset_io.hpp"
#include "egopat/parallel.hpp"
#include "egopat/rng.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <map>

namespace egopat {

using nlohmann::json;

void write_run_metadata(const fs::path& dir, const RunConfig& config) {
    write_file_atomic(dir / "config.json", dump_run_config(config));
    write_file_atomic(dir / "VERSION", std::string(kToolVersion) + "\n");
}

namespace {

void require_parent(const fs::path& out_dir) {
    const fs::path parent = fs::absolute(out_dir).parent_path();
    if (!fs::is_directory(parent)) {
        throw std::runtime_error("output parent directory does not exist: " + parent.string());
    }
    fs::create_directories(out_dir);
}

std::string dataset_digest(const fs::path& data) {
    const fs::path p = data / "summary.json";
    if (!fs::exists(p)) return "";
    return hex_digest(read_summary(p).digest);
}

ReportRow to_row(const std::string& method, const StageReport& r) { return {method, r.overall_cm, r.stage_cm}; }

}  // namespace

DatasetSummary cmd_simulate(const RunConfig& config, const fs::path& out_dir, std::ostream& log) {
    require_parent(out_dir);
    const DatasetSummary summary = make_dataset(config.simulator, out_dir);
    write_run_metadata(out_dir, config);
    log << "wrote " << summary.clips.size() << " clips to " << out_dir.string() << "\n";
    log << "digest " << hex_digest(summary.digest) << "\n";
    return summary;
}

AnnotateOutcome cmd_annotate(const RunConfig& config, const fs::path& recording_dir, const fs::path& hands_file,
                             const fs::path& manifest, const fs::path& out_dir, std::ostream& log) {
    json hands;
    try {
        hands = json::parse(read_file(hands_file));
    } catch (const json::exception& e) {
        throw std::runtime_error(hands_file.string() + ": not valid JSON: " + e.what());
    }
    if (!hands.is_object()) throw std::runtime_error(hands_file.string() + ": expected an object keyed by clip id");

    std::map<std::string, std::vector<PointCloud>> recordings;
    std::map<std::string, std::size_t> lengths;
    if (!fs::is_directory(recording_dir)) throw std::runtime_error("not a directory: " + recording_dir.string());
    for (const auto& entry : fs::directory_iterator(recording_dir)) {
        const fs::path pcb = entry.path() / "frames.pcb";
        if (!entry.is_directory() || !fs::exists(pcb)) continue;
        auto frames = decode_pcb(read_file(pcb), pcb.string());
        lengths[entry.path().filename().string()] = frames.size();
        recordings.emplace(entry.path().filename().string(), std::move(frames));
    }
    const std::vector<ClipManifest> clips = divide_clips(manifest, lengths);

    require_parent(out_dir);
    AnnotateOutcome outcome;
    for (const auto& m : clips) {
        try {
            const auto it = hands.find(m.clip_id);
            if (it == hands.end()) throw InvalidLabelError("no hand label in " + hands_file.string());
            const HandLabel label = parse_hand_label(*it);
            const AnnotatedClip a =
                annotate_clip(m, recordings.at(m.recording_id), label, config.registration, config.fitness_floor);
            const fs::path dir = out_dir / m.clip_id;
            fs::create_directories(dir);
            write_file_atomic(dir / "odom.csv", encode_odom_csv(a.odometry));
            write_file_atomic(dir / "target.csv", encode_target_csv(a.track));
            outcome.written.push_back(m.clip_id);
            if (a.first_reliable > 0) {
                log << m.clip_id << ": low-fitness registration, kept frames from " << a.first_reliable << "\n";
            }
        } catch (const std::exception& e) {
            outcome.failed.push_back(m.clip_id + ": " + e.what());
            log << "skipped " << m.clip_id << ": " << e.what() << "\n";
        }
    }
    write_run_metadata(out_dir, config);
    log << "annotated " << outcome.written.size() << " of " << clips.size() << " clips\n";
    return outcome;
}

TrainResult cmd_train(const RunConfig& config, const fs::path& data, const fs::path& out_dir, std::ostream& log) {
    const std::vector<Clip> train_clips = load_split(data, Split::train);
    const std::vector<Clip> val_clips = load_split(data, Split::val);
    require_parent(out_dir);
    log << "training on " << train_clips.size() << " clips, validating on " << val_clips.size() << "\n";
    TrainResult r = train(train_clips, val_clips, config.model, config.train, 0, [&](const EpochRecord& e) {
        log << "epoch " << e.epoch << " loss " << e.train_loss << " val " << e.val_overall_cm << " cm\n";
    });
    save_checkpoint(out_dir / "best.ckpt", r.best);
    save_checkpoint(out_dir / "final.ckpt", r.final);
    const json sidecar = {{"config", to_json(config)},
                          {"dataset_digest", dataset_digest(data)},
                          {"epoch", r.history.best_epoch},
                          {"val_overall_cm", r.history.best_val_cm},
                          {"tool_version", kToolVersion}};
    write_file_atomic(out_dir / "best.ckpt.json", sidecar.dump(2) + "\n");
    write_file_atomic(out_dir / "history.csv", history_csv(r.history));
    write_run_metadata(out_dir, config);
    log << "best epoch " << r.history.best_epoch << " val " << r.history.best_val_cm << " cm\n";
    return r;
}

EvalReport cmd_eval(const EvalOptions& options, const std::optional<fs::path>& out_dir, std::ostream& log) {
    const std::vector<Clip> clips = load_split(options.data, options.split);
    EvalReport report;
    RunConfig echo;
    if (options.oracle) {
        report = evaluate_oracle(clips);
    } else {
        if (!options.checkpoint) throw std::invalid_argument("eval: --ckpt is required unless --oracle is given");
        PredictorModel model = load_checkpoint(*options.checkpoint);
        if (options.decode) model.set_decode(*options.decode);
        echo.model = model.config();
        report = evaluate(model, clips, options.split);
    }
    const std::vector<ReportRow> rows = {to_row(options.method, report)};
    log << report_table(rows);
    if (out_dir) {
        require_parent(*out_dir);
        write_file_atomic(*out_dir / "report.csv", report_csv(rows));
        std::vector<ReportRow> scenes;
        for (const auto& [scene, r] : report.per_scene) scenes.push_back(to_row(scene, r));
        write_file_atomic(*out_dir / "per_scene.csv", report_csv(scenes));
        write_run_metadata(*out_dir, echo);
    }
    return report;
}

GradCheckResult cmd_gradcheck(const GradCheckOptions& options, std::ostream& log) {
    Clip clip;
    if (options.data) {
        std::vector<Clip> clips = load_split(*options.data, Split::train);
        if (clips.empty()) throw std::runtime_error("gradcheck: no training clips under " + options.data->string());
        clip = std::move(clips.front());
    } else {
        DatasetConfig dc;
        dc.seed = options.seed;
        clip = generate_clip(dc, Split::train, 0).clip;
    }
    if (options.frames < 1) throw std::invalid_argument("gradcheck: frames must be >= 1");
    const std::size_t T = std::min(options.frames, clip.length());
    clip.frames.resize(T);
    clip.track.targets.resize(T);
    clip.odometry.resize(T - 1);

    const PredictorModel model(ModelConfig::tiny(), derive_seed(options.seed, "gradcheck"));
    const ClipInputs inputs = prepare_inputs(clip, model.config());
    const GradCheckResult r = grad_check(model, inputs, options.loss, options.eps, options.corrupt_index);
    log << "parameters " << model.parameters().size() << ", frames " << T << "\n";
    log << "max relative error " << r.max_relative_error << " at " << r.worst_block << " (analytic " << r.analytic
        << ", numeric " << r.numeric << ")\n";
    return r;
}

std::vector<ReportRow> cmd_report(const std::vector<fs::path>& csvs, const std::optional<fs::path>& out_csv,
                                  std::ostream& log) {
    std::vector<ReportRow> rows;
    for (const auto& p : csvs) {
        auto part = parse_report_csv(read_file(p), p.string());
        rows.insert(rows.end(), part.begin(), part.end());
    }
    if (rows.empty()) throw std::invalid_argument("report: no rows in the given files");
    log << report_table(rows);
    if (out_csv) write_file_atomic(*out_csv, report_csv(rows));
    return rows;
}

std::vector<std::string> cmd_validate(const fs::path& path) {
    if (fs::is_regular_file(path)) {
        std::string head;
        try {
            head = read_file(path).substr(0, 4);
        } catch (const std::exception& e) {
            return {e.what()};
        }
        if (head == std::string(kCheckpointMagic, 4) || path.extension() == ".ckpt") {
            try {
                load_checkpoint(path);
                return {};
            } catch (const std::exception& e) {
                return {e.what()};
            }
        }
    }
    return validate_path(path);
}

namespace {

template <class T, class Parse>
CLI::Validator choice(Parse parse, const std::string& name) {
    return CLI::Validator(
        [parse](std::string& s) {
            try {
                parse(s);
                return std::string();
            } catch (const std::exception& e) {
                return std::string(e.what());
            }
        },
        name);
}

RunConfig base_config(const std::string& path) {
    RunConfig c;
    if (!path.empty()) c = load_run_config(path);
    return c;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Egocentric 3D action-target prediction toolkit"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    std::string config_path, out, data, ckpt, split = "test", loss, features, decode, method = "model";
    std::optional<std::uint64_t> seed;
    std::string recordings, hands, manifest;
    bool oracle = false;
    double eps = 1e-5;
    std::size_t frames = 5;
    std::optional<std::size_t> corrupt;
    std::optional<int> epochs;
    std::vector<std::string> inputs;
    std::string target;

    auto* sim = app.add_subcommand("simulate", "Generate a synthetic dataset");
    sim->add_option("--config", config_path, "JSON run config");
    sim->add_option("--out", out, "Dataset directory")->required();
    sim->add_option("--seed", seed, "Global seed override");

    auto* ann = app.add_subcommand("annotate", "Ground-truth tracks from recordings, hand labels and a manifest");
    ann->add_option("--config", config_path, "JSON run config");
    ann->add_option("--data", recordings, "Directory of <recording_id>/frames.pcb")->required();
    ann->add_option("--hands", hands, "JSON hand labels keyed by clip id")->required();
    ann->add_option("--manifest", manifest, "CSV recording_id,clip_id,first_frame,last_frame")->required();
    ann->add_option("--out", out, "Output directory")->required();

    auto* tr = app.add_subcommand("train", "Train a predictor");
    tr->add_option("--config", config_path, "JSON run config");
    tr->add_option("--data", data, "Dataset directory")->required();
    tr->add_option("--out", out, "Run directory")->required();
    tr->add_option("--seed", seed, "Global seed override");
    tr->add_option("--loss", loss, "twr or nll")->check(choice<LossKind>(parse_loss_kind, "LOSS"));
    tr->add_option("--features", features, "vf,tf,imu subset")->check(choice<FeatureFlags>(FeatureFlags::parse, "FEATURES"));
    tr->add_option("--decode", decode, "renorm, raw or argmax")->check(choice<DecodeMode>(parse_decode_mode, "DECODE"));
    tr->add_option("--epochs", epochs, "Epoch count override");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    ev->add_option("--ckpt", ckpt, "Checkpoint file");
    ev->add_option("--data", data, "Dataset directory")->required();
    ev->add_option("--split", split, "train, val, test or unseen")->check(choice<Split>(parse_split, "SPLIT"));
    ev->add_option("--decode", decode, "renorm, raw or argmax")->check(choice<DecodeMode>(parse_decode_mode, "DECODE"));
    ev->add_option("--out", out, "Report directory");
    ev->add_option("--method", method, "Row label in the report");
    ev->add_flag("--oracle", oracle, "Debug: predict the ground truth");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check on the tiny model");
    gc->add_option("--data", data, "Dataset directory (first train clip)");
    gc->add_option("--loss", loss, "twr or nll")->check(choice<LossKind>(parse_loss_kind, "LOSS"));
    gc->add_option("--seed", seed, "Seed");
    gc->add_option("--eps", eps, "Central-difference step");
    gc->add_option("--frames", frames, "Clip length");
    gc->add_option("--corrupt", corrupt, "Double this analytic gradient entry");

    auto* rep = app.add_subcommand("report", "Merge report CSVs into one table");
    rep->add_option("inputs", inputs, "report.csv files")->required();
    rep->add_option("--out", out, "Merged CSV");

    auto* val = app.add_subcommand("validate", "Check files against the documented formats");
    val->add_option("path", target, "Dataset root, clip directory, checkpoint or file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*sim) {
            RunConfig c = base_config(config_path);
            if (seed) c.seed = *seed;
            c.resolve();
            cmd_simulate(c, out, std::cout);
        } else if (*ann) {
            RunConfig c = base_config(config_path);
            c.resolve();
            const auto r = cmd_annotate(c, recordings, hands, manifest, out, std::cout);
            return r.failed.empty() ? 0 : 2;
        } else if (*tr) {
            RunConfig c = base_config(config_path);
            if (seed) c.seed = *seed;
            if (!loss.empty()) c.train.loss = parse_loss_kind(loss);
            if (!features.empty()) c.model.features = FeatureFlags::parse(features);
            if (!decode.empty()) c.model.decode = parse_decode_mode(decode);
            if (epochs) c.train.epochs = *epochs;
            c.resolve();
            cmd_train(c, data, out, std::cout);
        } else if (*ev) {
            EvalOptions o;
            o.data = data;
            if (!ckpt.empty()) o.checkpoint = ckpt;
            o.split = parse_split(split);
            if (!decode.empty()) o.decode = parse_decode_mode(decode);
            o.oracle = oracle;
            o.method = method;
            cmd_eval(o, out.empty() ? std::nullopt : std::optional<fs::path>(out), std::cout);
        } else if (*gc) {
            GradCheckOptions o;
            if (!data.empty()) o.data = data;
            if (!loss.empty()) o.loss.kind = parse_loss_kind(loss);
            if (seed) o.seed = *seed;
            o.eps = eps;
            o.frames = frames;
            o.corrupt_index = corrupt;
            const auto r = cmd_gradcheck(o, std::cout);
            return r.max_relative_error < 1e-4 ? 0 : 1;
        } else if (*rep) {
            std::vector<fs::path> paths(inputs.begin(), inputs.end());
            cmd_report(paths, out.empty() ? std::nullopt : std::optional<fs::path>(out), std::cout);
        } else if (*val) {
            const auto findings = cmd_validate(target);
            for (const auto& f : findings) std::cout << f << "\n";
            std::cout << findings.size() << " finding" << (findings.size() == 1 ? "" : "s") << "\n";
            return findings.empty() ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace egopat
