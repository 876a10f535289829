#pragma once

#include "egopat/clip.hpp"
#include "egopat/geometry.hpp"
#include "egopat/registration.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace egopat {

struct ClipManifest {
    std::string recording_id;
    std::string clip_id;
    std::size_t first_frame = 0;
    std::size_t last_frame = 0;

    std::size_t length() const { return last_frame - first_frame + 1; }
};

class ManifestError : public std::runtime_error {
public:
    ManifestError(const std::string& msg, std::size_t row) : std::runtime_error(msg), row_(row) {}
    /// 1-based data row (header excluded); 0 when the error is not row-specific.
    std::size_t row() const { return row_; }

private:
    std::size_t row_;
};

class InvalidLabelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kHandKeypoints = 21;

/// Hand center in the last frame's camera coordinates. When keypoints are
/// present the center is their arithmetic mean.
struct HandLabel {
    std::optional<std::array<Vec3, kHandKeypoints>> keypoints;
    Vec3 center = Vec3::Zero();
};

/// CSV text with header recording_id,clip_id,first_frame,last_frame.
/// `recording_lengths`, when given, bounds the frame indices per recording.
std::vector<ClipManifest> parse_manifest(const std::string& text,
                                         const std::map<std::string, std::size_t>& recording_lengths = {});
std::vector<ClipManifest> divide_clips(const std::filesystem::path& manifest_file,
                                       const std::map<std::string, std::size_t>& recording_lengths = {});

HandLabel parse_hand_label(const nlohmann::json& j);
HandLabel ingest_hand_center(const std::filesystem::path& label_file);

/// Backward propagation of the last-frame target through T_{t->t+1}^{-1}.
TargetTrack propagate_target(const Vec3& center, const std::vector<RigidTransform>& adjacent);

struct AnnotatedClip {
    ClipManifest manifest;
    std::vector<OdometryRow> odometry;
    TargetTrack track;
    /// First frame kept after truncating at the last low-fitness pair (0 if none).
    std::size_t first_reliable = 0;
};

/// Registers the clip's frames, ingests the label and propagates it. When a
/// pair falls below `fitness_floor` the clip is cut so it starts after that
/// pair; `manifest.first_frame` and the track reflect the cut.
AnnotatedClip annotate_clip(const ClipManifest& manifest, const std::vector<PointCloud>& recording,
                            const HandLabel& label, const IcpParams& params,
                            double fitness_floor = kDefaultFitnessFloor, unsigned max_threads = 0);

}  // namespace egopat
