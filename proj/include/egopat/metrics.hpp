#pragma once

#include "egopat/clip.hpp"
#include "egopat/geometry.hpp"

#include <array>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace egopat {

class PredictorModel;

inline constexpr int kStages = 10;
using StageVector = std::array<double, kStages>;

/// Center location error in centimeters.
double cle(const Vec3& pred, const Vec3& gt);

/// Mean CLE per tenth of the clip. Frame t (1-based) of T falls in stage
/// ceil(10 t / T); a stage with no frames (T < 10) takes the CLE of frame
/// max(1, ceil(k T / 10)).
StageVector stage_errors(std::span<const Vec3> preds, std::span<const Vec3> targets);

/// Weighted mean of the stage errors with w_k = 2 - k/10, normalized by the
/// weight sum so a constant error maps to itself.
double overall_score(const StageVector& stages);

/// Stages 1-5: accuracy after observing 10%..50% of the clip.
std::array<double, 5> early_prediction_table(const StageVector& stages);

struct StageReport {
    double overall_cm = 0.0;
    StageVector stage_cm{};
    std::size_t n_clips = 0;
};

struct EvalReport : StageReport {
    std::map<std::string, StageReport> per_scene;
};

class EmptyReportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ClipPrediction {
    std::string scene_id;
    std::vector<Vec3> predictions;
    std::vector<Vec3> targets;
};

/// Averages per-clip stage vectors over clips (unweighted), then applies
/// overall_score. Throws EmptyReportError for an empty set.
EvalReport aggregate(const std::vector<ClipPrediction>& clips);

/// Runs predict_clip over every clip. `expected` guards the split tag.
EvalReport evaluate(const PredictorModel& model, const std::vector<Clip>& clips, Split expected,
                    unsigned max_threads = 0);

/// Constant predictor at `point`, the same point in every frame.
EvalReport evaluate_constant(const Vec3& point, const std::vector<Clip>& clips);

/// Predicts the ground truth; a sanity check for the harness.
EvalReport evaluate_oracle(const std::vector<Clip>& clips);

// Report output ---------------------------------------------------------------------

struct ReportRow {
    std::string method;
    double overall_cm = 0.0;
    StageVector stage_cm{};
};

std::string report_csv_header();
std::string report_csv_row(const ReportRow& row);
std::string report_csv(const std::vector<ReportRow>& rows);
/// Parses a CSV produced by report_csv (header required).
std::vector<ReportRow> parse_report_csv(const std::string& text, const std::string& origin = "report.csv");
/// Aligned text table: Method | Overall | Early prediction 10..50% | Late prediction 60..100%.
std::string report_table(const std::vector<ReportRow>& rows);

}  // namespace egopat
