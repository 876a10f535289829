#pragma once

// Subcommand bodies behind the egopat executable. Each writes its artifacts
// plus config.json and VERSION into the output directory and throws on
// failure; the executable turns exceptions into a message and exit code 1.

#include "egopat/config.hpp"
#include "egopat/metrics.hpp"
#include "egopat/simulator.hpp"
#include "egopat/training.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace egopat {

/// config.json (resolved) and VERSION, written atomically.
void write_run_metadata(const std::filesystem::path& dir, const RunConfig& config);

DatasetSummary cmd_simulate(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

struct AnnotateOutcome {
    std::vector<std::string> written;  // clip ids
    std::vector<std::string> failed;   // "clip_id: reason"
};

/// recording_dir holds one <recording_id>/frames.pcb per recording; the
/// hands file maps clip_id to a label object ({"keypoints": ...} or
/// {"center": ...}). Writes <out>/<clip_id>/{odom.csv,target.csv}. A bad
/// label or registration failure skips that clip only; unreadable inputs
/// throw.
AnnotateOutcome cmd_annotate(const RunConfig& config, const std::filesystem::path& recording_dir,
                             const std::filesystem::path& hands_file, const std::filesystem::path& manifest,
                             const std::filesystem::path& out_dir, std::ostream& log);

/// Trains on <data>/train with validation on <data>/val. Writes best.ckpt,
/// final.ckpt, best.ckpt.json (sidecar), history.csv.
TrainResult cmd_train(const RunConfig& config, const std::filesystem::path& data, const std::filesystem::path& out_dir,
                      std::ostream& log);

struct EvalOptions {
    std::filesystem::path data;
    std::optional<std::filesystem::path> checkpoint;  // required unless oracle
    Split split = Split::test;
    std::optional<DecodeMode> decode;
    bool oracle = false;  // debug: predict the ground truth
    std::string method = "model";
};

/// Writes report.csv (one row) and per_scene.csv to out_dir when given.
EvalReport cmd_eval(const EvalOptions& options, const std::optional<std::filesystem::path>& out_dir,
                    std::ostream& log);

struct GradCheckOptions {
    std::optional<std::filesystem::path> data;  // first train clip; a simulated clip otherwise
    LossSpec loss;
    std::size_t frames = 5;
    double eps = 1e-5;
    std::uint64_t seed = 0;
    std::optional<std::size_t> corrupt_index;
};

GradCheckResult cmd_gradcheck(const GradCheckOptions& options, std::ostream& log);

/// Concatenates rows of several report CSVs; the table goes to `log`, the
/// merged CSV to out_csv when given.
std::vector<ReportRow> cmd_report(const std::vector<std::filesystem::path>& csvs,
                                  const std::optional<std::filesystem::path>& out_csv, std::ostream& log);

/// Findings for a dataset root, clip directory, checkpoint or single file.
std::vector<std::string> cmd_validate(const std::filesystem::path& path);

/// Entry point of the executable.
int run_cli(int argc, char** argv);

}  // namespace egopat
