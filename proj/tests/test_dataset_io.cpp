#include <doctest.h>

#include "egopat/dataset_io.hpp"
#include "egopat/rng.hpp"
#include "egopat/simulator.hpp"
#include "support.hpp"

#include <cmath>
#include <fstream>

using namespace egopat;

namespace {

std::vector<PointCloud> random_frames(Rng& rng, int count) {
    std::vector<PointCloud> frames;
    for (int f = 0; f < count; ++f) {
        PointCloud c;
        const auto n = rng.index(50);
        for (std::size_t i = 0; i < n; ++i) {
            c.push_back({Vec3(rng.normal(), rng.normal(), rng.uniform(0.2, 3.0)),
                         Vec3(rng.uniform(), rng.uniform(), rng.uniform()), std::nullopt});
        }
        frames.push_back(c);
    }
    return frames;
}

Clip sample_clip(std::uint64_t seed) {
    DatasetConfig config;
    config.lengths.min_length = config.lengths.max_length = 8;
    config.seed = seed;
    return generate_clip(config, Split::val, 3).clip;
}

}  // namespace

TEST_CASE("frames.pcb round trip quantizes to float32 and is stable") {
    Rng rng(1);
    const auto frames = random_frames(rng, 6);
    const std::string bytes = encode_pcb(frames);
    CHECK(bytes.substr(0, 4) == "EGOC");
    const auto back = decode_pcb(bytes);
    REQUIRE(back.size() == frames.size());
    for (std::size_t f = 0; f < frames.size(); ++f) {
        REQUIRE(back[f].size() == frames[f].size());
        for (std::size_t i = 0; i < frames[f].size(); ++i) {
            for (int k = 0; k < 3; ++k) {
                CHECK(back[f][i].position[k] == static_cast<double>(static_cast<float>(frames[f][i].position[k])));
                CHECK(back[f][i].color[k] == static_cast<double>(static_cast<float>(frames[f][i].color[k])));
            }
        }
    }
    CHECK(encode_pcb(back) == bytes);
    CHECK(decode_pcb(encode_pcb({})).empty());
}

TEST_CASE("frames.pcb rejects malformed bytes") {
    Rng rng(2);
    const std::string bytes = encode_pcb(random_frames(rng, 3));
    std::string bad = bytes;
    bad[1] = 'X';
    CHECK_THROWS_AS(decode_pcb(bad), FormatError);
    bad = bytes;
    bad[4] = 2;
    CHECK_THROWS_AS(decode_pcb(bad), FormatError);
    CHECK_THROWS_AS(decode_pcb(bytes.substr(0, bytes.size() - 1)), FormatError);
    CHECK_THROWS_AS(decode_pcb(bytes + std::string(4, '\0')), FormatError);
    CHECK_THROWS_AS(decode_pcb(std::string("EG")), FormatError);

    PointCloud nan_cloud;
    nan_cloud.push_back({Vec3(std::nan(""), 0, 1), Vec3(0.5, 0.5, 0.5), std::nullopt});
    CHECK_THROWS_AS(decode_pcb(encode_pcb({nan_cloud})), FormatError);
    PointCloud bright;
    bright.push_back({Vec3(0, 0, 1), Vec3(1.5, 0.5, 0.5), std::nullopt});
    CHECK_THROWS_AS(decode_pcb(encode_pcb({bright})), FormatError);
}

TEST_CASE("CSV codecs round trip exactly") {
    Rng rng(3);
    std::vector<ImuSample> imu(7);
    for (auto& s : imu)
        for (double& v : s) v = rng.normal(0.0, 5.0);
    CHECK(decode_imu_csv(encode_imu_csv(imu)) == imu);

    TargetTrack track;
    for (int t = 0; t < 9; ++t) track.targets.emplace_back(rng.normal(), rng.normal(), rng.normal());
    const TargetTrack tb = decode_target_csv(encode_target_csv(track));
    REQUIRE(tb.size() == track.size());
    for (std::size_t t = 0; t < track.size(); ++t) CHECK(tb.targets[t] == track.targets[t]);

    std::vector<OdometryRow> odom;
    for (int t = 0; t < 5; ++t) {
        const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
        odom.push_back({RigidTransform::from_axis_angle(axis, rng.uniform(0, 0.3), Vec3(rng.normal(), 0.1, 0.2)),
                        rng.uniform(), rng.uniform(0, 0.01)});
    }
    const auto ob = decode_odom_csv(encode_odom_csv(odom));
    REQUIRE(ob.size() == odom.size());
    for (std::size_t i = 0; i < odom.size(); ++i) {
        CHECK((ob[i].transform.matrix() - odom[i].transform.matrix()).norm() < 1e-15);
        CHECK(ob[i].fitness == odom[i].fitness);
        CHECK(ob[i].rmse == odom[i].rmse);
    }
    CHECK(encode_odom_csv(ob) == encode_odom_csv(odom));
}

TEST_CASE("CSV codecs reject malformed text") {
    const std::string imu = encode_imu_csv(std::vector<ImuSample>(3));
    CHECK_THROWS_AS(decode_imu_csv("t,wx\n0,1\n"), FormatError);
    CHECK_THROWS_AS(decode_imu_csv(imu.substr(0, imu.size() - 1)), FormatError);  // no trailing newline
    std::string reordered = imu;
    reordered.replace(reordered.find("\n1,"), 3, "\n5,");
    CHECK_THROWS_AS(decode_imu_csv(reordered), FormatError);
    CHECK_THROWS_AS(decode_target_csv("t,x,y,z\n0,1,2\n"), FormatError);
    CHECK_THROWS_AS(decode_target_csv("t,x,y,z\n0,1,2,abc\n"), FormatError);
    CHECK_THROWS_AS(decode_target_csv("t,x,y,z\n0,1,2,3\n\n1,1,2,3\n"), FormatError);
    CHECK_THROWS_AS(decode_odom_csv("qw,qx,qy,qz,tx,ty,tz,fitness,rmse\n2,0,0,0,0,0,0,1,0\n"), FormatError);
    CHECK_THROWS_AS(decode_odom_csv("qw,qx,qy,qz,tx,ty,tz,fitness,rmse\n1,0,0,0,0,0,0,1.5,0\n"), FormatError);
    try {
        decode_target_csv("t,x,y,z\n0,1,2,oops\n", "clipA/target.csv");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("clipA/target.csv") != std::string::npos);
    }
}

TEST_CASE("clip directories round trip") {
    const Clip clip = sample_clip(4);
    const auto dir = egopat::testing::scratch_dir("clip_io") / "val_00003";
    const std::uint64_t digest = write_clip(dir, clip);
    CHECK(validate_clip_dir(dir).empty());
    CHECK(validate_path(dir).empty());
    const Clip back = read_clip(dir);
    CHECK(back.clip_id == clip.clip_id);
    CHECK(back.scene_id == clip.scene_id);
    CHECK(back.split == Split::val);
    CHECK(back.seed == clip.seed);
    REQUIRE(back.length() == clip.length());
    for (std::size_t t = 0; t < clip.length(); ++t) {
        CHECK(back.frames[t].imu == clip.frames[t].imu);
        CHECK(back.track.targets[t] == clip.track.targets[t]);
        REQUIRE(back.frames[t].cloud.size() == clip.frames[t].cloud.size());
        for (std::size_t i = 0; i < clip.frames[t].cloud.size(); ++i) {
            CHECK((back.frames[t].cloud[i].position - clip.frames[t].cloud[i].position).cwiseAbs().maxCoeff() <=
                  1e-6 * (1.0 + clip.frames[t].cloud[i].position.norm()));
        }
        CHECK(back.frames[t].rel_transform.has_value() == (t > 0));
    }
    for (std::size_t t = 0; t + 1 < clip.length(); ++t) {
        CHECK((back.odometry[t].transform.matrix() - clip.odometry[t].transform.matrix()).norm() < 1e-15);
    }
    // Rewriting the read-back clip reproduces the files byte for byte.
    const auto again = egopat::testing::scratch_dir("clip_io_again") / "val_00003";
    CHECK(write_clip(again, back) == digest);
}

TEST_CASE("splits and summaries") {
    DatasetConfig config;
    config.train_clips = 3;
    config.val_clips = 2;
    config.test_clips = 1;
    config.unseen_clips = 1;
    config.seed = 5;
    const auto root = egopat::testing::scratch_dir("splits") / "data";
    const DatasetSummary s = make_dataset(config, root, 2);
    CHECK(validate_path(root).empty());
    CHECK(validate_path(root / "summary.json").empty());

    const auto val = load_split(root, Split::val);
    REQUIRE(val.size() == 2);
    CHECK(val[0].clip_id < val[1].clip_id);
    for (const auto& c : val) CHECK(c.split == Split::val);

    const DatasetSummary back = read_summary(root / "summary.json");
    CHECK(back.digest == s.digest);
    REQUIRE(back.clips.size() == s.clips.size());
    for (std::size_t i = 0; i < s.clips.size(); ++i) {
        CHECK(back.clips[i].clip_id == s.clips[i].clip_id);
        CHECK(back.clips[i].length == s.clips[i].length);
        CHECK(back.clips[i].split == s.clips[i].split);
    }

    // A clip moved into the wrong split directory is caught on load.
    std::filesystem::rename(root / "val" / val[1].clip_id, root / "test" / val[1].clip_id);
    CHECK_THROWS_AS(load_split(root, Split::test), FormatError);
}

TEST_CASE("validator reports damaged clip files") {
    const Clip clip = sample_clip(6);
    const auto base = egopat::testing::scratch_dir("validator");
    write_clip(base / "good", clip);

    auto mutate = [&](const std::string& name, const std::string& file, auto edit) {
        const auto dir = base / name;
        std::filesystem::copy(base / "good", dir, std::filesystem::copy_options::recursive);
        std::string bytes = read_file(dir / file);
        edit(bytes);
        std::ofstream(dir / file, std::ios::binary | std::ios::trunc) << bytes;
        return validate_path(dir);
    };
    CHECK_FALSE(mutate("meta_key", "meta.json", [](std::string& b) { b.replace(b.find("scene_id"), 8, "scene_ix"); }).empty());
    CHECK_FALSE(mutate("imu_rows", "imu.csv", [](std::string& b) { b.erase(b.rfind('\n', b.size() - 2) + 1); }).empty());
    CHECK_FALSE(mutate("pcb_trunc", "frames.pcb", [](std::string& b) { b.resize(b.size() - 5); }).empty());
    CHECK_FALSE(mutate("odom_quat", "odom.csv", [](std::string& b) { b[b.find('\n') + 1] = '7'; }).empty());
    CHECK(validate_path(base / "good" / "target.csv").empty());
    CHECK_FALSE(validate_path(base / "good" / "notes.txt").empty());
    CHECK_FALSE(validate_path(base / "nowhere").empty());
}
