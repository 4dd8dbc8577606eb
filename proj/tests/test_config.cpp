#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "loco/config.hpp"

using loco::parse_run_config;
using loco::RunConfig;

namespace {

const char* kFull = R"(
# demo run
[model]
scale = desk
final_dim = 8
rank_attn = 4
alpha_attn = 2.0

[ablation]
ffn = off

[run]
seed = 99
epochs_base = 12
epochs_task = 9
lr = 5e-4
weight_decay = 1e-5
out = runs/demo

[task 0]
shape = 16 16 8
band = 0.0 0.4
samples = 6
noise = 0.015
seed = 100
organ = liver sphere 1 1 0.3
organ = rib box 1 1 0.2

[task 1]
shape = 16 16 8
band = 0.45 1.0
spacing = 1 1 2
samples = 4
seed = 101
organ = lung ellipsoid 1 1 0.25
)";

}  // namespace

TEST_CASE("a full run file parses into every field") {
    RunConfig rc = parse_run_config(kFull);

    // the desk preset applied first, then the single-key overrides
    REQUIRE(rc.model.dims == std::vector<size_t>{16, 32, 64, 128});
    REQUIRE(rc.model.final_dim == 8);
    REQUIRE(rc.model.rank_attn == 4);
    REQUIRE(rc.model.alpha_attn == 2.0);
    REQUIRE(rc.model.rank_ffn == 4);  // untouched desk value

    REQUIRE(rc.model.adapt_attn);
    REQUIRE_FALSE(rc.model.adapt_ffn);
    REQUIRE(rc.model.adapt_conv);

    REQUIRE(rc.seed == 99);
    REQUIRE(rc.epochs_base == 12);
    REQUIRE(rc.epochs_task == 9);
    REQUIRE(rc.lr == 5e-4);
    REQUIRE(rc.weight_decay == 1e-5);
    REQUIRE(rc.out_dir == "runs/demo");

    REQUIRE(rc.tasks.size() == 2);
    const auto& t0 = rc.task(0);
    REQUIRE(t0.shape == std::array<size_t, 3>{16, 16, 8});
    REQUIRE(t0.band_lo == 0.0);
    REQUIRE(t0.band_hi == 0.4);
    REQUIRE(t0.samples == 6);
    REQUIRE(t0.noise == 0.015);
    REQUIRE(t0.seed == 100);
    REQUIRE(t0.organs.size() == 2);  // repeated keys append
    REQUIRE(t0.organs[0].class_name == "liver");
    REQUIRE(t0.organs[0].primitive == loco::Primitive::Sphere);
    REQUIRE(t0.organs[0].min_radius == 1.0);
    REQUIRE(t0.organs[0].max_radius == 1.0);
    REQUIRE(t0.organs[0].intensity == 0.3);
    REQUIRE(t0.organs[1].primitive == loco::Primitive::Box);
    REQUIRE(rc.task_classes(0) == std::vector<std::string>{"liver", "rib"});

    const auto& t1 = rc.task(1);
    REQUIRE(t1.spacing == std::array<double, 3>{1.0, 1.0, 2.0});
    REQUIRE(t1.band_lo == 0.45);
    REQUIRE(t1.noise == 0.02);  // recipe default

    REQUIRE_THROWS_AS(rc.task(5), loco::ConfigError);
}

TEST_CASE("scale preset wins regardless of key order") {
    RunConfig rc = parse_run_config(
        "[model]\nfinal_dim = 8\nscale = desk\n"
        "[task 0]\norgan = a sphere 1 2 0.3\n");
    // final_dim appears before scale in the file but still overrides the preset
    REQUIRE(rc.model.final_dim == 8);
    REQUIRE(rc.model.dims == std::vector<size_t>{16, 32, 64, 128});

    RunConfig full = parse_run_config(
        "[model]\nscale = full\n[task 0]\norgan = a sphere 1 2 0.3\n");
    REQUIRE(full.model.dims == std::vector<size_t>{64, 128, 320, 512});
}

TEST_CASE("defaults survive an almost-empty file") {
    RunConfig rc = parse_run_config("[task 0]\norgan = a sphere 1 2 0.3\n");
    REQUIRE(rc.seed == 1);
    REQUIRE(rc.epochs_base == 8);
    REQUIRE(rc.model.dims == loco::PvtConfig{}.dims);
    REQUIRE(rc.tasks.size() == 1);
}

TEST_CASE("malformed run files are rejected with ConfigError") {
    auto bad = [](const std::string& s) {
        REQUIRE_THROWS_AS(parse_run_config(s), loco::ConfigError);
    };
    const std::string t0 = "[task 0]\norgan = a sphere 1 2 0.3\n";

    bad("");                                             // no tasks
    bad("[task 1]\norgan = a sphere 1 2 0.3\n");         // first id not 0
    bad(t0 + "[task 2]\norgan = b sphere 1 2 0.3\n[task 1]\norgan = c sphere 1 2 0.3\n");
    bad(t0 + "[task 1]\norgan = b sphere 1 2 0.3\n[task 0]\norgan = c sphere 1 2 0.3\n");
    bad("[task 0]\nsamples = 3\n");                      // no organs
    bad("[model]\nbogus = 1\n" + t0);                    // unknown key
    bad("[nonsense]\nx = 1\n" + t0);                     // unknown section
    bad("[model]\nscale = galactic\n" + t0);             // unknown preset
    bad("[run]\nlr = fast\n" + t0);                      // bad number
    bad("[run]\nlr = -1\n" + t0);                        // invalid value
    bad("[run]\nepochs_base = 0\n" + t0);                // zero epochs
    bad("[task 0]\norgan = a sphere 1 2\n");             // organ arity
    bad("[task 0]\norgan = a blobby 1 2 0.3\n");         // unknown primitive
    bad("[task 0]\nshape = 16 16\norgan = a sphere 1 2 0.3\n");  // list arity
    bad("[task 0\norgan = a sphere 1 2 0.3\n");          // broken header
    bad("key = 1\n" + t0);                               // key outside section
    bad("[ablation]\nattn = maybe\n" + t0);              // bad flag
    bad("[task 0]\nband = 0.9 0.1\norgan = a sphere 1 2 0.3\n");  // recipe invariant
}

TEST_CASE("re-opening the current task section continues it") {
    RunConfig rc = parse_run_config(
        "[task 0]\norgan = a sphere 1 2 0.3\n[task 0]\norgan = b sphere 1 2 0.3\n");
    REQUIRE(rc.tasks.size() == 1);
    REQUIRE(rc.task(0).organs.size() == 2);
}

TEST_CASE("comments and blank lines are skipped") {
    RunConfig rc = parse_run_config(
        "; leading comment\n\n# another\n[task 0]\n  organ = a sphere 1 2 0.3  \n");
    REQUIRE(rc.tasks.size() == 1);
    REQUIRE(rc.task(0).organs[0].intensity == 0.3);
}

TEST_CASE("files load through the filesystem helper") {
    const auto path = std::filesystem::temp_directory_path() / "loco_cfg_test.ini";
    {
        std::ofstream out(path);
        out << "[task 0]\norgan = a sphere 1 2 0.3\n";
    }
    RunConfig rc = loco::load_run_config(path.string());
    REQUIRE(rc.tasks.size() == 1);
    std::filesystem::remove(path);
    REQUIRE_THROWS_AS(loco::load_run_config(path.string()), loco::IoError);
}
