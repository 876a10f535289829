#include <doctest.h>

#include "egopat/commands.hpp"
#include "egopat/dataset_io.hpp"
#include "egopat/metrics.hpp"
#include "support.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;  // stdout and stderr together
};

std::string cli_path() {
    const char* p = std::getenv("EGOPAT_CLI");
    REQUIRE_MESSAGE(p != nullptr, "EGOPAT_CLI must point at the egopat executable");
    return p;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

Run run(const std::string& args) {
    const std::string command = quote(cli_path()) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(command.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary | std::ios::trunc) << text; }

const char* kSmallConfig = R"({
  "seed": 7,
  "simulator": {"splits": {"train": 4, "val": 2, "test": 2, "unseen": 1},
                "lengths": {"min_length": 6, "max_length": 14}},
  "model": {"visual_widths": [16], "motion_widths": [8], "fusion_widths": [16], "hidden": 8, "layers": 1},
  "train": {"epochs": 2, "batch_size": 2}
})";

// One small dataset shared by the read-only cases.
const fs::path& shared_dataset() {
    static const fs::path root = [] {
        const fs::path dir = egopat::testing::scratch_dir("cli_shared");
        write_text(dir / "config.json", kSmallConfig);
        const Run r = run("simulate --config " + quote((dir / "config.json").string()) + " --out " +
                          quote((dir / "data").string()));
        REQUIRE_MESSAGE(r.code == 0, r.output);
        return dir / "data";
    }();
    return root;
}

}  // namespace

TEST_CASE("version flag") {
    const Run r = run("--version");
    CHECK(r.code == 0);
    CHECK(r.output.find(egopat::kToolVersion) != std::string::npos);
}

TEST_CASE("simulate is reproducible and writes run metadata") {
    const fs::path dir = egopat::testing::scratch_dir("cli_simulate");
    write_text(dir / "config.json", kSmallConfig);
    const std::string cfg = quote((dir / "config.json").string());
    const Run a = run("simulate --config " + cfg + " --out " + quote((dir / "a").string()));
    const Run b = run("simulate --config " + cfg + " --out " + quote((dir / "b").string()));
    REQUIRE_MESSAGE(a.code == 0, a.output);
    REQUIRE_MESSAGE(b.code == 0, b.output);
    CHECK(a.output.find("wrote 9 clips") != std::string::npos);
    CHECK(egopat::read_file(dir / "a" / "summary.json") == egopat::read_file(dir / "b" / "summary.json"));
    CHECK(egopat::read_file(dir / "a" / "VERSION") == std::string(egopat::kToolVersion) + "\n");
    CHECK(fs::exists(dir / "a" / "config.json"));

    const Run other = run("simulate --config " + cfg + " --seed 8 --out " + quote((dir / "c").string()));
    REQUIRE(other.code == 0);
    CHECK(egopat::read_file(dir / "a" / "summary.json") != egopat::read_file(dir / "c" / "summary.json"));

    const Run v = run("validate " + quote((dir / "a").string()));
    CHECK_MESSAGE(v.code == 0, v.output);
    CHECK(v.output.find("0 findings") != std::string::npos);
}

TEST_CASE("configuration and path errors exit nonzero with a message") {
    const fs::path dir = egopat::testing::scratch_dir("cli_errors");
    write_text(dir / "bad.json", R"({"simulator": {"scene": {"n_objectz": 3}}})");
    const Run unknown = run("simulate --config " + quote((dir / "bad.json").string()) + " --out " +
                            quote((dir / "out").string()));
    CHECK(unknown.code == 1);
    CHECK(unknown.output.find("n_objectz") != std::string::npos);

    const fs::path orphan = dir / "missing" / "deeper" / "out";
    const Run missing = run("simulate --out " + quote(orphan.string()));
    CHECK(missing.code == 1);
    CHECK(missing.output.find((dir / "missing" / "deeper").string()) != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "missing"));

    CHECK(run("train --data " + quote(shared_dataset().string()) + " --out x --loss l2").code != 0);
    CHECK(run("eval --data " + quote(shared_dataset().string())).code == 1);
    CHECK(run("frobnicate").code != 0);
}

TEST_CASE("validate flags a damaged file") {
    const fs::path dir = egopat::testing::scratch_dir("cli_validate");
    fs::copy(shared_dataset() / "val", dir / "val", fs::copy_options::recursive);
    const fs::path clip = *fs::directory_iterator(dir / "val");
    std::string imu = egopat::read_file(clip / "imu.csv");
    imu.insert(imu.find('\n') + 1, "x,");
    write_text(clip / "imu.csv", imu);
    const Run r = run("validate " + quote(clip.string()));
    CHECK(r.code == 1);
    CHECK(r.output.find("imu.csv") != std::string::npos);
}

TEST_CASE("gradcheck passes and catches a corrupted entry") {
    const Run ok = run("gradcheck --frames 5");
    CHECK_MESSAGE(ok.code == 0, ok.output);
    CHECK(ok.output.find("max relative error") != std::string::npos);
    CHECK(run("gradcheck --loss nll --data " + quote(shared_dataset().string())).code == 0);
    // Index 3000 sits in a recurrent bias with a sizeable gradient.
    CHECK(run("gradcheck --corrupt 3000").code == 1);
}

TEST_CASE("oracle evaluation and report merging") {
    const fs::path dir = egopat::testing::scratch_dir("cli_eval");
    const std::string data = quote(shared_dataset().string());
    const Run a = run("eval --oracle --data " + data + " --method oracle --out " + quote((dir / "a").string()));
    REQUIRE_MESSAGE(a.code == 0, a.output);
    const auto rows = egopat::parse_report_csv(egopat::read_file(dir / "a" / "report.csv"));
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].method == "oracle");
    CHECK(rows[0].overall_cm == 0.0);
    for (double v : rows[0].stage_cm) CHECK(v == 0.0);
    CHECK(fs::exists(dir / "a" / "per_scene.csv"));

    const Run b = run("eval --oracle --split unseen --data " + data + " --method unseen --out " +
                      quote((dir / "b").string()));
    REQUIRE(b.code == 0);
    const Run merged = run("report " + quote((dir / "a" / "report.csv").string()) + " " +
                           quote((dir / "b" / "report.csv").string()) + " --out " +
                           quote((dir / "merged.csv").string()));
    REQUIRE_MESSAGE(merged.code == 0, merged.output);
    const auto both = egopat::parse_report_csv(egopat::read_file(dir / "merged.csv"));
    REQUIRE(both.size() == 2);
    CHECK(both[0].method == "oracle");
    CHECK(both[1].method == "unseen");
    CHECK(merged.output.find("Overall") != std::string::npos);
}

TEST_CASE("train then evaluate a checkpoint") {
    const fs::path dir = egopat::testing::scratch_dir("cli_train");
    write_text(dir / "config.json", kSmallConfig);
    const std::string data = quote(shared_dataset().string());
    const Run t = run("train --config " + quote((dir / "config.json").string()) + " --data " + data + " --out " +
                      quote((dir / "run").string()));
    REQUIRE_MESSAGE(t.code == 0, t.output);
    for (const char* f : {"best.ckpt", "final.ckpt", "best.ckpt.json", "history.csv", "config.json", "VERSION"}) {
        CHECK_MESSAGE(fs::exists(dir / "run" / f), f);
    }
    const std::string history = egopat::read_file(dir / "run" / "history.csv");
    CHECK(std::count(history.begin(), history.end(), '\n') == 3);
    CHECK(run("validate " + quote((dir / "run" / "best.ckpt").string())).code == 0);

    const Run e = run("eval --ckpt " + quote((dir / "run" / "best.ckpt").string()) + " --data " + data +
                      " --decode argmax --out " + quote((dir / "eval").string()));
    REQUIRE_MESSAGE(e.code == 0, e.output);
    const auto rows = egopat::parse_report_csv(egopat::read_file(dir / "eval" / "report.csv"));
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].overall_cm > 0.0);
}

TEST_CASE("annotate writes tracks and reports bad inputs") {
    const fs::path dir = egopat::testing::scratch_dir("cli_annotate");
    const fs::path clip = shared_dataset() / "train" / "train_00000";
    fs::create_directories(dir / "rec" / "r1");
    fs::copy_file(clip / "frames.pcb", dir / "rec" / "r1" / "frames.pcb");
    write_text(dir / "manifest.csv", "recording_id,clip_id,first_frame,last_frame\nr1,c1,0,4\nr1,c2,5,9\n");
    write_text(dir / "hands.json", R"({"c1": {"center": [0.05, -0.1, 0.6]}, "c2": {"center": [0.0, 0.0, 0.7]}})");
    const std::string common = "annotate --data " + quote((dir / "rec").string()) + " --manifest " +
                               quote((dir / "manifest.csv").string());

    const Run ok = run(common + " --hands " + quote((dir / "hands.json").string()) + " --out " +
                       quote((dir / "out").string()));
    REQUIRE_MESSAGE(ok.code == 0, ok.output);
    const auto track = egopat::decode_target_csv(egopat::read_file(dir / "out" / "c1" / "target.csv"));
    REQUIRE(track.size() == 5);
    CHECK((track.targets.back() - egopat::Vec3(0.05, -0.1, 0.6)).norm() < 1e-12);
    CHECK(egopat::decode_odom_csv(egopat::read_file(dir / "out" / "c2" / "odom.csv")).size() == 4);

    // One bad label skips only its clip.
    write_text(dir / "partial.json", R"({"c1": {"center": [0.05, -0.1, 0.6]}, "c2": {"center": [0.0, 0.0, -1.0]}})");
    const Run partial = run(common + " --hands " + quote((dir / "partial.json").string()) + " --out " +
                            quote((dir / "partial").string()));
    CHECK(partial.code == 2);
    CHECK(partial.output.find("c2") != std::string::npos);
    CHECK(fs::exists(dir / "partial" / "c1" / "target.csv"));
    CHECK_FALSE(fs::exists(dir / "partial" / "c2"));

    write_text(dir / "broken.json", "{\"c1\": ");
    const Run broken = run(common + " --hands " + quote((dir / "broken.json").string()) + " --out " +
                           quote((dir / "broken").string()));
    CHECK(broken.code == 1);
    CHECK(broken.output.find("broken.json") != std::string::npos);
}
