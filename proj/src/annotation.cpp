#include "egopat/annotation.hpp"

#include "egopat/dataset_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

namespace egopat {

using json = nlohmann::json;

namespace {

constexpr std::string_view kManifestHeader = "recording_id,clip_id,first_frame,last_frame";

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::size_t parse_index(const std::string& field, std::size_t row, const char* what) {
    std::size_t v = 0;
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (field.empty() || res.ec != std::errc() || res.ptr != field.data() + field.size()) {
        throw ManifestError("manifest row " + std::to_string(row) + ": invalid " + what + " '" + field + "'", row);
    }
    return v;
}

}  // namespace

std::vector<ClipManifest> parse_manifest(const std::string& text,
                                         const std::map<std::string, std::size_t>& recording_lengths) {
    std::vector<ClipManifest> clips;
    std::map<std::string, std::size_t> last_end;  // per recording: last_frame of previous row
    std::set<std::string> ids;
    std::istringstream in(text);
    std::string line;
    std::size_t row = 0;
    bool first_line = true;
    while (std::getline(in, line)) {
        line = trim(line);
        if (first_line) {
            first_line = false;
            if (line == kManifestHeader) continue;
        }
        if (line.empty()) continue;
        ++row;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string field;
        while (std::getline(ls, field, ',')) f.push_back(trim(field));
        if (f.size() != 4) {
            throw ManifestError("manifest row " + std::to_string(row) + ": expected 4 fields, got " +
                                    std::to_string(f.size()),
                                row);
        }
        ClipManifest m;
        m.recording_id = f[0];
        m.clip_id = f[1];
        if (m.recording_id.empty() || m.clip_id.empty()) {
            throw ManifestError("manifest row " + std::to_string(row) + ": empty recording or clip id", row);
        }
        m.first_frame = parse_index(f[2], row, "first_frame");
        m.last_frame = parse_index(f[3], row, "last_frame");
        if (m.first_frame > m.last_frame) {
            throw ManifestError("manifest row " + std::to_string(row) + ": first_frame after last_frame", row);
        }
        if (auto it = recording_lengths.find(m.recording_id); it != recording_lengths.end()) {
            if (m.last_frame >= it->second) {
                throw ManifestError("manifest row " + std::to_string(row) + ": frame index out of range for recording '" +
                                        m.recording_id + "' (" + std::to_string(it->second) + " frames)",
                                    row);
            }
        } else if (!recording_lengths.empty()) {
            throw ManifestError("manifest row " + std::to_string(row) + ": unknown recording '" + m.recording_id + "'", row);
        }
        if (auto it = last_end.find(m.recording_id); it != last_end.end() && m.first_frame <= it->second) {
            throw ManifestError("manifest row " + std::to_string(row) + ": clip overlaps or precedes the previous clip of '" +
                                    m.recording_id + "'",
                                row);
        }
        if (!ids.insert(m.clip_id).second) {
            throw ManifestError("manifest row " + std::to_string(row) + ": duplicate clip id '" + m.clip_id + "'", row);
        }
        last_end[m.recording_id] = m.last_frame;
        clips.push_back(std::move(m));
    }
    return clips;
}

std::vector<ClipManifest> divide_clips(const std::filesystem::path& manifest_file,
                                       const std::map<std::string, std::size_t>& recording_lengths) {
    std::string text;
    try {
        text = read_file(manifest_file);
    } catch (const std::exception& e) {
        throw ManifestError(e.what(), 0);
    }
    try {
        return parse_manifest(text, recording_lengths);
    } catch (const ManifestError& e) {
        throw ManifestError(manifest_file.string() + ": " + e.what(), e.row());
    }
}

namespace {

Vec3 read_vec3(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 3) throw InvalidLabelError(std::string(what) + " must be a 3-element array");
    Vec3 v;
    for (int k = 0; k < 3; ++k) {
        if (!j[k].is_number()) throw InvalidLabelError(std::string(what) + " has a non-numeric entry");
        v[k] = j[k].get<double>();
    }
    if (!is_finite(v)) throw InvalidLabelError(std::string(what) + " is not finite");
    return v;
}

}  // namespace

HandLabel parse_hand_label(const json& j) {
    if (!j.is_object()) throw InvalidLabelError("hand label must be an object");
    HandLabel label;
    if (j.contains("keypoints")) {
        const json& kp = j.at("keypoints");
        if (!kp.is_array() || kp.size() != kHandKeypoints) {
            throw InvalidLabelError("keypoints must hold exactly 21 entries");
        }
        std::array<Vec3, kHandKeypoints> pts;
        Vec3 sum = Vec3::Zero();
        for (std::size_t i = 0; i < kHandKeypoints; ++i) {
            pts[i] = read_vec3(kp[i], "keypoint");
            sum += pts[i];
        }
        label.keypoints = pts;
        label.center = sum / static_cast<double>(kHandKeypoints);
    } else if (j.contains("center")) {
        label.center = read_vec3(j.at("center"), "center");
    } else {
        throw InvalidLabelError("hand label needs 'keypoints' or 'center'");
    }
    if (!(label.center.z() > 0.0)) throw InvalidLabelError("hand center must have positive depth");
    return label;
}

HandLabel ingest_hand_center(const std::filesystem::path& label_file) {
    json j;
    try {
        j = json::parse(read_file(label_file));
    } catch (const std::exception& e) {
        throw InvalidLabelError(label_file.string() + ": " + e.what());
    }
    try {
        return parse_hand_label(j);
    } catch (const InvalidLabelError& e) {
        throw InvalidLabelError(label_file.string() + ": " + e.what());
    }
}

TargetTrack propagate_target(const Vec3& center, const std::vector<RigidTransform>& adjacent) {
    TargetTrack track;
    track.targets.resize(adjacent.size() + 1);
    track.targets.back() = center;
    for (std::size_t t = adjacent.size(); t-- > 0;) {
        track.targets[t] = apply(inverse(adjacent[t]), track.targets[t + 1]);
    }
    return track;
}

AnnotatedClip annotate_clip(const ClipManifest& manifest, const std::vector<PointCloud>& recording,
                            const HandLabel& label, const IcpParams& params, double fitness_floor,
                            unsigned max_threads) {
    if (manifest.last_frame >= recording.size()) {
        throw std::invalid_argument("annotate_clip: clip '" + manifest.clip_id + "' exceeds the recording");
    }
    AnnotatedClip out;
    out.manifest = manifest;
    std::vector<RigidTransform> transforms;
    if (manifest.length() >= 2) {
        const std::vector<PointCloud> frames(recording.begin() + static_cast<std::ptrdiff_t>(manifest.first_frame),
                                             recording.begin() + static_cast<std::ptrdiff_t>(manifest.last_frame) + 1);
        const OdometryResult odo = chain_odometry(frames, params, fitness_floor, max_threads);
        const int cut = odo.last_flagged();
        out.first_reliable = static_cast<std::size_t>(cut + 1);
        for (std::size_t i = out.first_reliable; i < odo.pairs.size(); ++i) {
            out.odometry.push_back({odo.pairs[i].transform, odo.pairs[i].fitness, odo.pairs[i].inlier_rmse});
            transforms.push_back(odo.pairs[i].transform);
        }
    }
    out.manifest.first_frame += out.first_reliable;
    out.track = propagate_target(label.center, transforms);
    return out;
}

}  // namespace egopat
