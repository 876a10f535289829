#include "egopat/dataset_io.hpp"

#include "egopat/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace egopat {

using json = nlohmann::json;

std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unseen: return "unseen";
    }
    return "train";
}

Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unseen") return Split::unseen;
    throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string hex_digest(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
public:
    ByteReader(const std::string& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    void expect(const char* magic, std::size_t n) {
        need(n, "magic");
        if (std::memcmp(bytes_.data() + pos_, magic, n) != 0) fail("bad magic");
        pos_ += n;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(origin_ + ": " + msg + " (offset " + std::to_string(pos_) + ")");
    }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) fail(std::string("truncated while reading ") + what);
    }
    const std::string& bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

std::vector<std::string> split_fields(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

/// Strict CSV reader: exact header, exact column count, every field a finite number.
std::vector<std::vector<double>> parse_csv(const std::string& text, std::string_view header, const std::string& origin) {
    std::vector<std::vector<double>> rows;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != header) {
        throw FormatError(origin + ": expected header '" + std::string(header) + "'");
    }
    const std::size_t columns = split_fields(header).size();
    std::size_t row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.empty()) {
            if (in.peek() == std::char_traits<char>::eof()) break;
            throw FormatError(origin + ": empty line at row " + std::to_string(row_no));
        }
        const auto fields = split_fields(line);
        if (fields.size() != columns) {
            throw FormatError(origin + ": row " + std::to_string(row_no) + " has " + std::to_string(fields.size()) +
                              " fields, expected " + std::to_string(columns));
        }
        std::vector<double> row;
        row.reserve(columns);
        for (const auto& f : fields) {
            double v = 0.0;
            const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            if (f.empty() || res.ec != std::errc() || res.ptr != f.data() + f.size() || !std::isfinite(v)) {
                throw FormatError(origin + ": row " + std::to_string(row_no) + " has a malformed value '" + f + "'");
            }
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    if (!text.empty() && text.back() != '\n') throw FormatError(origin + ": missing trailing newline");
    return rows;
}

void check_frame_index(double t, std::size_t expected, const std::string& origin) {
    if (t != static_cast<double>(expected)) {
        throw FormatError(origin + ": frame index column out of sequence at row " + std::to_string(expected + 2));
    }
}

constexpr std::string_view kImuHeader = "t,wx,wy,wz,ax,ay,az";
constexpr std::string_view kOdomHeader = "qw,qx,qy,qz,tx,ty,tz,fitness,rmse";
constexpr std::string_view kTargetHeader = "t,x,y,z";

}  // namespace

std::string encode_pcb(const std::vector<PointCloud>& frames) {
    std::string out;
    out.append(kPcbMagic, 4);
    put_u32(out, kPcbVersion);
    put_u32(out, static_cast<std::uint32_t>(frames.size()));
    for (const auto& cloud : frames) {
        put_u32(out, static_cast<std::uint32_t>(cloud.size()));
        for (const auto& p : cloud) {
            for (int i = 0; i < 3; ++i) put_f32(out, static_cast<float>(p.position[i]));
            for (int i = 0; i < 3; ++i) put_f32(out, static_cast<float>(p.color[i]));
        }
    }
    return out;
}

std::vector<PointCloud> decode_pcb(const std::string& bytes, const std::string& origin) {
    ByteReader r(bytes, origin);
    r.expect(kPcbMagic, 4);
    const std::uint32_t version = r.u32("version");
    if (version != kPcbVersion) r.fail("unsupported version " + std::to_string(version));
    const std::uint32_t frame_count = r.u32("frame_count");
    // every frame needs at least its point-count word
    if (static_cast<std::uint64_t>(frame_count) * 4 > r.remaining()) r.fail("frame_count exceeds file size");
    std::vector<PointCloud> frames(frame_count);
    for (auto& cloud : frames) {
        const std::uint32_t n = r.u32("n_points");
        if (static_cast<std::uint64_t>(n) * 24 > r.remaining()) r.fail("n_points exceeds file size");
        cloud.reserve(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            ColoredPoint p;
            for (int k = 0; k < 3; ++k) p.position[k] = r.f32("position");
            for (int k = 0; k < 3; ++k) p.color[k] = r.f32("color");
            if (!is_finite(p.position) || !is_finite(p.color)) r.fail("non-finite point value");
            if ((p.color.array() < 0.0).any() || (p.color.array() > 1.0).any()) r.fail("color outside [0,1]");
            cloud.push_back(p);
        }
    }
    if (r.remaining() != 0) r.fail("trailing bytes after last frame");
    return frames;
}

std::string encode_imu_csv(const std::vector<ImuSample>& imu) {
    std::string out(kImuHeader);
    out += '\n';
    for (std::size_t t = 0; t < imu.size(); ++t) {
        out += std::to_string(t);
        for (double v : imu[t]) {
            out += ',';
            out += format_double(v);
        }
        out += '\n';
    }
    return out;
}

std::vector<ImuSample> decode_imu_csv(const std::string& text, const std::string& origin) {
    const auto rows = parse_csv(text, kImuHeader, origin);
    std::vector<ImuSample> out;
    for (std::size_t t = 0; t < rows.size(); ++t) {
        check_frame_index(rows[t][0], t, origin);
        ImuSample s{};
        for (int k = 0; k < 6; ++k) s[k] = rows[t][k + 1];
        out.push_back(s);
    }
    return out;
}

std::string encode_odom_csv(const std::vector<OdometryRow>& rows) {
    std::string out(kOdomHeader);
    out += '\n';
    for (const auto& r : rows) {
        const auto& q = r.transform.rotation();
        const auto& t = r.transform.translation();
        const double vals[] = {q.w(), q.x(), q.y(), q.z(), t.x(), t.y(), t.z(), r.fitness, r.rmse};
        for (std::size_t i = 0; i < std::size(vals); ++i) {
            if (i) out += ',';
            out += format_double(vals[i]);
        }
        out += '\n';
    }
    return out;
}

std::vector<OdometryRow> decode_odom_csv(const std::string& text, const std::string& origin) {
    const auto rows = parse_csv(text, kOdomHeader, origin);
    std::vector<OdometryRow> out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& v = rows[i];
        const Eigen::Quaterniond q(v[0], v[1], v[2], v[3]);
        if (std::abs(q.norm() - 1.0) > 1e-6) {
            throw FormatError(origin + ": row " + std::to_string(i + 2) + " quaternion is not unit length");
        }
        if (v[7] < 0.0 || v[7] > 1.0 || v[8] < 0.0) {
            throw FormatError(origin + ": row " + std::to_string(i + 2) + " fitness/rmse out of range");
        }
        out.push_back({RigidTransform(q, Vec3(v[4], v[5], v[6])), v[7], v[8]});
    }
    return out;
}

std::string encode_target_csv(const TargetTrack& track) {
    std::string out(kTargetHeader);
    out += '\n';
    for (std::size_t t = 0; t < track.size(); ++t) {
        out += std::to_string(t);
        for (int k = 0; k < 3; ++k) {
            out += ',';
            out += format_double(track.targets[t][k]);
        }
        out += '\n';
    }
    return out;
}

TargetTrack decode_target_csv(const std::string& text, const std::string& origin) {
    const auto rows = parse_csv(text, kTargetHeader, origin);
    TargetTrack track;
    for (std::size_t t = 0; t < rows.size(); ++t) {
        check_frame_index(rows[t][0], t, origin);
        track.targets.emplace_back(rows[t][1], rows[t][2], rows[t][3]);
    }
    return track;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {
void write_plain(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string meta_json(const Clip& clip) {
    json j;
    j["clip_id"] = clip.clip_id;
    j["scene_id"] = clip.scene_id;
    j["split"] = std::string(to_string(clip.split));
    j["fps"] = clip.fps;
    j["seed"] = clip.seed;
    return j.dump(2) + "\n";
}
}  // namespace

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    fs::path tmp = path;
    tmp += ".tmp";
    write_plain(tmp, bytes);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw std::runtime_error("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

std::uint64_t write_clip(const fs::path& dir, const Clip& clip) {
    std::vector<PointCloud> clouds;
    std::vector<ImuSample> imu;
    clouds.reserve(clip.length());
    for (const auto& f : clip.frames) {
        clouds.push_back(f.cloud);
        imu.push_back(f.imu);
    }
    const std::pair<const char*, std::string> files[] = {
        {"frames.pcb", encode_pcb(clouds)},
        {"imu.csv", encode_imu_csv(imu)},
        {"odom.csv", encode_odom_csv(clip.odometry)},
        {"target.csv", encode_target_csv(clip.track)},
        {"meta.json", meta_json(clip)},
    };

    fs::path tmp = dir;
    tmp += ".tmp";
    std::error_code ec;
    fs::remove_all(tmp, ec);
    fs::create_directories(tmp, ec);
    if (ec) throw std::runtime_error("cannot create " + tmp.string() + ": " + ec.message());
    Fnv1a h;
    for (const auto& [name, bytes] : files) {
        write_plain(tmp / name, bytes);
        h.update(name);
        h.update(bytes);
    }
    fs::remove_all(dir, ec);
    fs::rename(tmp, dir, ec);
    if (ec) throw std::runtime_error("cannot rename " + tmp.string() + " -> " + dir.string() + ": " + ec.message());
    return h.value();
}

Clip read_clip(const fs::path& dir) {
    Clip clip;
    const json meta = [&] {
        try {
            return json::parse(read_file(dir / "meta.json"));
        } catch (const json::exception& e) {
            throw FormatError((dir / "meta.json").string() + ": " + e.what());
        }
    }();
    try {
        clip.clip_id = meta.at("clip_id").get<std::string>();
        clip.scene_id = meta.at("scene_id").get<std::string>();
        clip.split = parse_split(meta.at("split").get<std::string>());
        clip.fps = meta.at("fps").get<double>();
        clip.seed = meta.at("seed").get<std::uint64_t>();
    } catch (const std::exception& e) {
        throw FormatError((dir / "meta.json").string() + ": " + e.what());
    }

    auto clouds = decode_pcb(read_file(dir / "frames.pcb"), (dir / "frames.pcb").string());
    const auto imu = decode_imu_csv(read_file(dir / "imu.csv"), (dir / "imu.csv").string());
    clip.odometry = decode_odom_csv(read_file(dir / "odom.csv"), (dir / "odom.csv").string());
    clip.track = decode_target_csv(read_file(dir / "target.csv"), (dir / "target.csv").string());

    const std::size_t n = clouds.size();
    if (n == 0) throw FormatError(dir.string() + ": clip has no frames");
    if (imu.size() != n) throw FormatError((dir / "imu.csv").string() + ": row count does not match frame count");
    if (clip.track.size() != n) throw FormatError((dir / "target.csv").string() + ": row count does not match frame count");
    if (clip.odometry.size() != n - 1) {
        throw FormatError((dir / "odom.csv").string() + ": expected one row per adjacent frame pair");
    }
    clip.frames.resize(n);
    for (std::size_t t = 0; t < n; ++t) {
        clip.frames[t].cloud = std::move(clouds[t]);
        clip.frames[t].imu = imu[t];
        if (t > 0) clip.frames[t].rel_transform = clip.odometry[t - 1].transform;
    }
    return clip;
}

std::vector<Clip> load_split(const fs::path& root, Split split) {
    const fs::path dir = root / std::string(to_string(split));
    if (!fs::is_directory(dir)) throw std::runtime_error("missing split directory " + dir.string());
    std::vector<fs::path> clip_dirs;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && e.path().extension() != ".tmp") clip_dirs.push_back(e.path());
    }
    std::sort(clip_dirs.begin(), clip_dirs.end());
    std::vector<Clip> clips;
    clips.reserve(clip_dirs.size());
    for (const auto& d : clip_dirs) {
        Clip c = read_clip(d);
        if (c.split != split) {
            throw FormatError(d.string() + ": meta split '" + std::string(to_string(c.split)) +
                              "' does not match directory '" + std::string(to_string(split)) + "'");
        }
        clips.push_back(std::move(c));
    }
    return clips;
}

void write_summary(const fs::path& path, const DatasetSummary& summary) {
    json j;
    j["digest"] = hex_digest(summary.digest);
    json clips = json::array();
    for (const auto& e : summary.clips) {
        clips.push_back({{"clip_id", e.clip_id},
                         {"scene_id", e.scene_id},
                         {"split", std::string(to_string(e.split))},
                         {"length", e.length}});
    }
    j["clips"] = std::move(clips);
    write_file_atomic(path, j.dump(2) + "\n");
}

DatasetSummary read_summary(const fs::path& path) {
    DatasetSummary s;
    try {
        const json j = json::parse(read_file(path));
        s.digest = std::stoull(j.at("digest").get<std::string>(), nullptr, 16);
        for (const auto& c : j.at("clips")) {
            s.clips.push_back({c.at("clip_id").get<std::string>(), c.at("scene_id").get<std::string>(),
                               parse_split(c.at("split").get<std::string>()), c.at("length").get<std::size_t>()});
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return s;
}

std::vector<std::string> validate_clip_dir(const fs::path& dir) {
    std::vector<std::string> findings;
    try {
        const json meta = json::parse(read_file(dir / "meta.json"));
        static const std::vector<std::string> keys = {"clip_id", "fps", "scene_id", "seed", "split"};
        std::vector<std::string> got;
        for (const auto& [k, v] : meta.items()) got.push_back(k);
        if (got != keys) findings.push_back((dir / "meta.json").string() + ": unexpected key set");
        if (meta.value("fps", 0.0) != 30.0) findings.push_back((dir / "meta.json").string() + ": fps must be 30");
    } catch (const std::exception& e) {
        findings.push_back((dir / "meta.json").string() + ": " + e.what());
    }
    if (findings.empty()) {
        try {
            read_clip(dir);
        } catch (const std::exception& e) {
            findings.push_back(e.what());
        }
    }
    return findings;
}

std::vector<std::string> validate_path(const fs::path& path) {
    std::vector<std::string> findings;
    try {
        if (fs::is_directory(path)) {
            if (fs::exists(path / "meta.json")) return validate_clip_dir(path);
            if (!fs::exists(path / "summary.json")) {
                return {path.string() + ": neither a clip directory nor a dataset root"};
            }
            const DatasetSummary summary = read_summary(path / "summary.json");
            for (const auto& e : summary.clips) {
                const fs::path dir = path / std::string(to_string(e.split)) / e.clip_id;
                auto f = validate_clip_dir(dir);
                findings.insert(findings.end(), f.begin(), f.end());
            }
            return findings;
        }
        const std::string name = path.filename().string();
        const std::string bytes = read_file(path);
        if (name.ends_with(".pcb")) decode_pcb(bytes, path.string());
        else if (name == "imu.csv") decode_imu_csv(bytes, path.string());
        else if (name == "odom.csv") decode_odom_csv(bytes, path.string());
        else if (name == "target.csv") decode_target_csv(bytes, path.string());
        else if (name == "summary.json") read_summary(path);
        else findings.push_back(path.string() + ": unrecognized file type");
    } catch (const std::exception& e) {
        findings.push_back(e.what());
    }
    return findings;
}

}  // namespace egopat
