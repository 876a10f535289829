#include "egopat/metrics.hpp"

#include "egopat/dataset_io.hpp"
#include "egopat/model.hpp"
#include "egopat/parallel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace egopat {

double cle(const Vec3& pred, const Vec3& gt) { return (pred - gt).norm() * 100.0; }

StageVector stage_errors(std::span<const Vec3> preds, std::span<const Vec3> targets) {
    if (preds.size() != targets.size()) throw std::invalid_argument("stage_errors: length mismatch");
    const std::size_t T = preds.size();
    if (T == 0) throw std::invalid_argument("stage_errors: empty clip");
    StageVector sum{};
    std::array<std::size_t, kStages> count{};
    for (std::size_t t = 1; t <= T; ++t) {
        const std::size_t k = (10 * t + T - 1) / T;  // ceil(10t / T)
        sum[k - 1] += cle(preds[t - 1], targets[t - 1]);
        ++count[k - 1];
    }
    StageVector out{};
    for (std::size_t k = 1; k <= kStages; ++k) {
        if (count[k - 1] > 0) {
            out[k - 1] = sum[k - 1] / static_cast<double>(count[k - 1]);
        } else {
            const std::size_t t = std::max<std::size_t>(1, (k * T + 9) / 10);
            out[k - 1] = cle(preds[t - 1], targets[t - 1]);
        }
    }
    return out;
}

double overall_score(const StageVector& stages) {
    double num = 0.0, den = 0.0;
    for (int k = 1; k <= kStages; ++k) {
        const double w = 2.0 - k / 10.0;
        num += w * stages[k - 1];
        den += w;
    }
    return num / den;
}

std::array<double, 5> early_prediction_table(const StageVector& stages) {
    return {stages[0], stages[1], stages[2], stages[3], stages[4]};
}

namespace {

StageReport finish(const std::vector<StageVector>& per_clip) {
    StageReport r;
    r.n_clips = per_clip.size();
    for (const auto& s : per_clip) {
        for (int k = 0; k < kStages; ++k) r.stage_cm[k] += s[k];
    }
    for (auto& v : r.stage_cm) v /= static_cast<double>(per_clip.size());
    r.overall_cm = overall_score(r.stage_cm);
    return r;
}

}  // namespace

EvalReport aggregate(const std::vector<ClipPrediction>& clips) {
    if (clips.empty()) throw EmptyReportError("evaluation split is empty");
    std::vector<StageVector> all;
    std::map<std::string, std::vector<StageVector>> by_scene;
    all.reserve(clips.size());
    for (const auto& c : clips) {
        all.push_back(stage_errors(c.predictions, c.targets));
        by_scene[c.scene_id].push_back(all.back());
    }
    EvalReport report;
    static_cast<StageReport&>(report) = finish(all);
    for (const auto& [scene, v] : by_scene) report.per_scene[scene] = finish(v);
    return report;
}

EvalReport evaluate(const PredictorModel& model, const std::vector<Clip>& clips, Split expected, unsigned max_threads) {
    for (const auto& c : clips) {
        if (c.split != expected) {
            throw std::invalid_argument("evaluate: clip " + c.clip_id + " is tagged '" + std::string(to_string(c.split)) +
                                        "', expected '" + std::string(to_string(expected)) + "'");
        }
    }
    std::vector<ClipPrediction> preds(clips.size());
    parallel_for(clips.size(), worker_count(max_threads), [&](std::size_t i) {
        preds[i] = {clips[i].scene_id, predict_clip(model, clips[i]), clips[i].track.targets};
    });
    return aggregate(preds);
}

EvalReport evaluate_constant(const Vec3& point, const std::vector<Clip>& clips) {
    std::vector<ClipPrediction> preds;
    preds.reserve(clips.size());
    for (const auto& c : clips) {
        preds.push_back({c.scene_id, std::vector<Vec3>(c.length(), point), c.track.targets});
    }
    return aggregate(preds);
}

EvalReport evaluate_oracle(const std::vector<Clip>& clips) {
    std::vector<ClipPrediction> preds;
    preds.reserve(clips.size());
    for (const auto& c : clips) preds.push_back({c.scene_id, c.track.targets, c.track.targets});
    return aggregate(preds);
}

std::string report_csv_header() {
    std::string h = "method,Overall";
    for (int k = 1; k <= kStages; ++k) h += "," + std::to_string(10 * k) + "%";
    return h;
}

std::string report_csv_row(const ReportRow& row) {
    if (row.method.find(',') != std::string::npos || row.method.find('\n') != std::string::npos) {
        throw std::invalid_argument("report: method name may not contain ',' or newlines");
    }
    std::string s = row.method + "," + format_double(row.overall_cm);
    for (double v : row.stage_cm) s += "," + format_double(v);
    return s;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
    std::string out = report_csv_header() + "\n";
    for (const auto& r : rows) out += report_csv_row(r) + "\n";
    return out;
}

std::vector<ReportRow> parse_report_csv(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != report_csv_header()) {
        throw FormatError(origin + ": expected header '" + report_csv_header() + "'");
    }
    std::vector<ReportRow> rows;
    std::size_t row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string field;
        while (std::getline(ls, field, ',')) f.push_back(field);
        if (f.size() != 2 + kStages) throw FormatError(origin + ": row " + std::to_string(row_no) + " has the wrong column count");
        ReportRow r;
        r.method = f[0];
        auto num = [&](const std::string& s) {
            double v = 0.0;
            const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
            if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
                throw FormatError(origin + ": row " + std::to_string(row_no) + " has a malformed value '" + s + "'");
            }
            return v;
        };
        r.overall_cm = num(f[1]);
        for (int k = 0; k < kStages; ++k) r.stage_cm[k] = num(f[2 + k]);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string report_table(const std::vector<ReportRow>& rows) {
    std::size_t name_w = 6;
    for (const auto& r : rows) name_w = std::max(name_w, r.method.size());
    std::string out;
    char buf[64];
    auto cell = [&](const char* fmt, auto v) {
        std::snprintf(buf, sizeof(buf), fmt, v);
        out += buf;
    };
    const std::string pad(name_w, ' ');
    out += pad + " |         | Early prediction                        | Late prediction\n";
    out += "Method" + std::string(name_w - 6, ' ') + " | Overall |";
    for (int k = 1; k <= kStages; ++k) {
        cell(" %6s", (std::to_string(10 * k) + "%").c_str());
        if (k == 5) out += " |";
    }
    out += "\n";
    out += std::string(name_w, '-') + "-+---------+" + std::string(5 * 7 + 1, '-') + "+" + std::string(5 * 7, '-') + "\n";
    for (const auto& r : rows) {
        out += r.method + std::string(name_w - r.method.size(), ' ') + " |";
        cell(" %7.2f |", r.overall_cm);
        for (int k = 0; k < kStages; ++k) {
            cell(" %6.2f", r.stage_cm[k]);
            if (k == 4) out += " |";
        }
        out += "\n";
    }
    return out;
}

}  // namespace egopat
