// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line tool: staging guards, exit codes,
// snapshot round trips, determinism of rerun outputs. Everything runs at a
// deliberately tiny scale.
#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "d2vr/config.hpp"
#include "d2vr/serialize.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string binary() {
    if (const char* env = std::getenv("D2VR_BIN")) return env;
    return "./tools/d2vr";  // running from the build directory
}

int run(const std::string& args) {
    const std::string cmd = binary() + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path fresh(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("d2vr_cli_") + tag);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// tiny pipeline fixture shared by the later sections
struct Pipeline {
    fs::path data = fresh("data");
    fs::path flow = fresh("flow");
    fs::path teacher = fresh("teacher");
    fs::path student = fresh("student");

    void build() {
        REQUIRE(run("gen-data --out " + data.string() +
                    " --seed 1 --num-train 2 --num-eval 1 --frames 3 --height 16 --width 16 "
                    "--motion translate --noise 0.05 --blur 0 --occlusion 0.1 --downsample 1") ==
                0);
        REQUIRE(run("train-flow --out " + flow.string() + " --data " + data.string() +
                    " --steps 4 --batch 2") == 0);
        REQUIRE(run("train-teacher --out " + teacher.string() + " --data " + data.string() +
                    " --drfa " + (flow / "ckpt/drfa").string() + " --steps 4 --batch 2 --base 8") ==
                0);
        REQUIRE(run("distill --out " + student.string() + " --data " + data.string() +
                    " --teacher " + (teacher / "ckpt/teacher").string() + " --drfa " +
                    (flow / "ckpt/drfa").string() + " --steps 3 --batch 2 --clip 2") == 0);
    }
};

}  // namespace

TEST_CASE("usage errors exit with 1") {
    CHECK(run("no-such-command") == 1);
    CHECK(run("gen-data --bogus-flag x") == 1);
    CHECK(run("train-flow") == 1);  // missing required options
}

TEST_CASE("gen-data determinism and overwrite guard") {
    auto a = fresh("gen_a"), b = fresh("gen_b");
    const std::string flags =
        " --seed 7 --num-train 2 --num-eval 1 --frames 3 --height 16 --width 16 --motion mix";
    REQUIRE(run("gen-data --out " + a.string() + flags) == 0);
    REQUIRE(run("gen-data --out " + b.string() + flags) == 0);

    CHECK(slurp(a / "manifest.txt") == slurp(b / "manifest.txt"));
    CHECK(slurp(a / "train/seq_00007/lq.d2tn") == slurp(b / "train/seq_00007/lq.d2tn"));
    CHECK(slurp(a / "config_snapshot.txt") == slurp(b / "config_snapshot.txt"));

    // refuses to overwrite without --force
    CHECK(run("gen-data --out " + a.string() + flags) == 1);
    CHECK(run("gen-data --out " + a.string() + flags + " --force") == 0);

    // flag values are recorded verbatim in the snapshot
    auto c = fresh("gen_c");
    REQUIRE(run("gen-data --out " + c.string() + flags + " --occlusion 0.3 --noise 0.1") == 0);
    const std::string snap = slurp(c / "config_snapshot.txt");
    CHECK(snap.find("occlusion = 0.3") != std::string::npos);
    CHECK(snap.find("noise = 0.1") != std::string::npos);
    // lambda defaults come from the preset
    CHECK(snap.find("lambda1 = 0.05") != std::string::npos);
    CHECK(snap.find("lambda2 = 0.1") != std::string::npos);
}

TEST_CASE("staging guards exit with 2") {
    auto data = fresh("stage_data");
    REQUIRE(run("gen-data --out " + data.string() +
                " --seed 1 --num-train 2 --num-eval 1 --frames 3 --height 16 --width 16") == 0);
    auto out = fresh("stage_out");
    CHECK(run("distill --out " + out.string() + " --data " + data.string() +
              " --teacher /nonexistent --drfa /nonexistent") == 2);
    CHECK(run("train-teacher --out " + out.string() + " --data " + data.string() +
              " --drfa /nonexistent") == 2);
    CHECK(run("eval --restored /nonexistent --data " + data.string() +
              " --flow /nonexistent --out " + out.string()) == 2);
}

TEST_CASE("full tiny pipeline with restore determinism and eval round trip") {
    Pipeline p;
    p.build();

    // corrupt-input guard: a broken tensor yields exit 3
    {
        auto broken = fresh("broken_seq");
        fs::create_directories(broken);
        for (const char* f : {"clean.d2tn", "lq.d2tn"}) {
            std::ofstream os(broken / f, std::ios::binary);
            os << "NOTD2TN";
        }
        std::ofstream(broken / "manifest.txt") << "seed = 0\nmotion = none\n";
        auto out = fresh("restore_broken");
        CHECK(run("restore --out " + out.string() + " --input " + broken.string() + " --ckpt " +
                  (p.student / "ckpt/student").string() + " --drfa " +
                  (p.flow / "ckpt/drfa").string() + " --mode student") == 3);
    }

    auto r1 = fresh("restore1"), r2 = fresh("restore2");
    const std::string restore_flags = " --input " + (p.data / "eval").string() + " --ckpt " +
                                      (p.student / "ckpt/student").string() + " --drfa " +
                                      (p.flow / "ckpt/drfa").string() + " --mode student --seed 9";
    REQUIRE(run("restore --out " + r1.string() + restore_flags) == 0);

    // rerun from the written snapshot only
    REQUIRE(run("restore --out " + r2.string() + " --config " +
                (r1 / "config_snapshot.txt").string() + " --input " + (p.data / "eval").string() +
                " --ckpt " + (p.student / "ckpt/student").string() + " --drfa " +
                (p.flow / "ckpt/drfa").string()) == 0);
    const auto seq = "seq_00003";
    REQUIRE(fs::exists(r1 / "frames" / seq / "restored.d2tn"));
    CHECK(slurp(r1 / "frames" / seq / "restored.d2tn") ==
          slurp(r2 / "frames" / seq / "restored.d2tn"));
    CHECK(fs::exists(r1 / "frames" / seq / "t000.pgm"));
    CHECK(fs::exists(r1 / "logs" / "restore_timing.csv"));

    // evaluation emits a table and JSON lines that parse back
    auto e1 = fresh("eval1"), e2 = fresh("eval2");
    const std::string eval_flags = " --restored " + (r1 / "frames").string() + " --data " +
                                   p.data.string() + " --flow " + (p.flow / "ckpt/drfa").string();
    REQUIRE(run("eval --out " + e1.string() + eval_flags) == 0);
    REQUIRE(run("eval --out " + e2.string() + eval_flags) == 0);
    CHECK(slurp(e1 / "reports" / "eval.jsonl") == slurp(e2 / "reports" / "eval.jsonl"));

    std::ifstream is(e1 / "reports" / "eval.jsonl");
    std::string line;
    int rows = 0;
    double sum_psnr = 0.0, mean_psnr = -1.0;
    while (std::getline(is, line)) {
        json j = json::parse(line);
        REQUIRE(j.contains("psnr"));
        if (j["id"] == "mean") {
            mean_psnr = j["psnr"].get<double>();
            CHECK(j.contains("config_hash"));
        } else {
            sum_psnr += j["psnr"].get<double>();
            ++rows;
        }
    }
    REQUIRE(rows == 1);  // one eval sequence at this scale
    CHECK(mean_psnr == Catch::Approx(sum_psnr / rows));
}

TEST_CASE("config round trip through files") {
    d2vr::config::Config c;
    c.set("alpha", "1.5");
    c.set("name", "x");
    d2vr::config::apply_preset(c, "desk");
    auto p = fresh("cfg");
    fs::create_directories(p);
    c.save_snapshot(p / "snap.txt");
    d2vr::config::Config back;
    back.load_file(p / "snap.txt");
    CHECK(back.canonical_text() == c.canonical_text());
    CHECK(back.hash() == c.hash());
    CHECK(back.getf("alpha") == 1.5);
    CHECK(back.geti("frames") == 8);
    CHECK_THROWS_AS(back.geti("name"), d2vr::ConfigError);
    CHECK_THROWS_AS(back.str("missing"), d2vr::ConfigError);
    CHECK_THROWS_AS(d2vr::config::apply_preset(c, "huge"), d2vr::ConfigError);
}
