#pragma once

// On-disk dataset layout, one directory per clip:
//
//   frames.pcb  "EGOC", u32 version = 1, u32 frame_count, then per frame
//               u32 n_points and n_points x 6 float32 (x,y,z,r,g,b); all
//               little-endian
//   imu.csv     t,wx,wy,wz,ax,ay,az
//   odom.csv    qw,qx,qy,qz,tx,ty,tz,fitness,rmse   (one row per adjacent pair)
//   target.csv  t,x,y,z
//   meta.json   clip_id, scene_id, split, fps, seed
//
// Splits live in <root>/<split>/<clip_id>/ next to <root>/summary.json.

#include "egopat/clip.hpp"
#include "egopat/simulator.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace egopat {

namespace fs = std::filesystem;

inline constexpr char kPcbMagic[4] = {'E', 'G', 'O', 'C'};
inline constexpr std::uint32_t kPcbVersion = 1;

/// Raised for malformed files; the message names the file and the problem.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string encode_pcb(const std::vector<PointCloud>& frames);
std::vector<PointCloud> decode_pcb(const std::string& bytes, const std::string& origin = "frames.pcb");

std::string encode_imu_csv(const std::vector<ImuSample>& imu);
std::vector<ImuSample> decode_imu_csv(const std::string& text, const std::string& origin = "imu.csv");

std::string encode_odom_csv(const std::vector<OdometryRow>& rows);
std::vector<OdometryRow> decode_odom_csv(const std::string& text, const std::string& origin = "odom.csv");

std::string encode_target_csv(const TargetTrack& track);
TargetTrack decode_target_csv(const std::string& text, const std::string& origin = "target.csv");

std::string read_file(const fs::path& path);
/// Writes via a temporary sibling and rename.
void write_file_atomic(const fs::path& path, const std::string& bytes);

/// Writes the clip directory atomically (temp dir, then rename) and returns
/// an FNV-1a digest of the written bytes.
std::uint64_t write_clip(const fs::path& dir, const Clip& clip);
Clip read_clip(const fs::path& dir);

/// All clips of one split under a dataset root, ordered by clip id.
std::vector<Clip> load_split(const fs::path& root, Split split);

void write_summary(const fs::path& path, const DatasetSummary& summary);
DatasetSummary read_summary(const fs::path& path);

/// Findings for one clip directory; empty means the layout is valid.
std::vector<std::string> validate_clip_dir(const fs::path& dir);
/// Validates a dataset root, a clip directory, or a single file by name.
std::vector<std::string> validate_path(const fs::path& path);

std::string format_double(double v);
std::string hex_digest(std::uint64_t v);

}  // namespace egopat
