// Command-line front end: dataset generation, base/continual training,
// fused inference, and evaluation reports over a run directory.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "loco/config.hpp"
#include "loco/continual.hpp"
#include "loco/report.hpp"

namespace fs = std::filesystem;
using namespace loco;

namespace {

struct RunPaths {
    fs::path dir;
    fs::path base() const { return dir / "base.loco"; }
    fs::path task(uint32_t id) const {
        return dir / ("task_" + std::to_string(id) + ".loco");
    }
    fs::path axis() const { return dir / "profiles" / "axis.txt"; }
    fs::path profile(uint32_t id) const {
        return dir / "profiles" / ("task_" + std::to_string(id) + ".profile");
    }
    fs::path manifest() const { return dir / "manifest.txt"; }
    fs::path config_copy() const { return dir / "config.ini"; }
    fs::path reports() const { return dir / "reports"; }
};

struct TaskData {
    std::vector<VolumeSample> train, val, test;
};

TaskData load_task_data(const SyntheticTaskRecipe& recipe) {
    const auto all = generate_dataset(recipe);
    const auto idx = split_dataset(all.size(), recipe.seed);
    TaskData d;
    for (size_t i : idx.train) d.train.push_back(all[i]);
    for (size_t i : idx.val) d.val.push_back(all[i]);
    for (size_t i : idx.test) d.test.push_back(all[i]);
    return d;
}

TaskSpec spec_for(const RunConfig& rc, uint32_t id) {
    TaskSpec s;
    s.task_id = id;
    s.classes = rc.task_classes(id);
    s.seed = rc.task(id).seed;
    return s;
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

uint64_t file_digest(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    return fnv1a64(bytes.data(), bytes.size());
}

// Everything except the `created` line is a pure function of the run
// artifacts, so reruns with the same inputs rewrite it byte-identically.
void write_manifest(const RunPaths& p, const RunConfig& rc) {
    std::ofstream out(p.manifest());
    if (!out) throw IoError("cannot write " + p.manifest().string());
    out << "loco-run v1\n";
    out << "created " << utc_now() << "\n";
    out << "seed " << rc.seed << "\n";
    std::vector<fs::path> artifacts{p.config_copy(), p.base(), p.axis()};
    for (const auto& t : rc.tasks) {
        artifacts.push_back(p.task(t.task_id));
        artifacts.push_back(p.profile(t.task_id));
    }
    out << std::hex;
    for (const auto& a : artifacts) {
        if (!fs::exists(a)) continue;
        out << "artifact " << fs::relative(a, p.dir).generic_string() << " fnv 0x"
            << file_digest(a) << "\n";
    }
}

void copy_config(const fs::path& src, const RunPaths& p) {
    if (fs::exists(p.config_copy()) && fs::equivalent(src, p.config_copy())) return;
    fs::copy_file(src, p.config_copy(), fs::copy_options::overwrite_existing);
}

AxialProfile profile_from_training(uint32_t task, const TaskSpec& spec,
                                   const std::vector<VolumeSample>& train,
                                   const AxisRegressor& axis) {
    std::vector<std::vector<double>> scores;
    std::vector<Tensor> fgs;
    for (const auto& s : train) {
        scores.push_back(axis.predict(s.image));
        fgs.push_back(foreground_union(s.masks, spec.classes));
    }
    return build_profile(task, scores, fgs);
}

void print_stats(const std::string& label, const TrainStats& stats) {
    std::printf("%s: %zu epochs\n", label.c_str(), stats.epochs.size());
    for (size_t i = 0; i < stats.epochs.size(); ++i)
        std::printf("  epoch %2zu  train %.4f  val %.4f\n", i + 1,
                    stats.epochs[i].train_loss, stats.epochs[i].val_loss);
}

struct LoadedRun {
    ContinualEngine eng;
    AxisRegressor axis;
    std::map<uint32_t, AxialProfile> profiles;
    std::vector<uint32_t> tasks;
};

// Loads the backbone plus every declared task whose shard exists on disk.
LoadedRun load_run(const RunConfig& rc, const RunPaths& p, bool need_all) {
    LoadedRun run{ContinualEngine(rc.model, rc.seed), AxisRegressor{}, {}, {}};
    run.eng.load_base(p.base().string());
    run.axis = read_axis(p.axis().string());
    for (const auto& t : rc.tasks) {
        if (!fs::exists(p.task(t.task_id))) {
            if (need_all)
                throw IoError("missing " + p.task(t.task_id).string() +
                              "; train task " + std::to_string(t.task_id) + " first");
            continue;
        }
        run.eng.load_task(p.task(t.task_id).string(), spec_for(rc, t.task_id));
        run.profiles.emplace(t.task_id, read_profile(p.profile(t.task_id).string()));
        run.tasks.push_back(t.task_id);
    }
    if (run.tasks.empty()) throw IoError("run directory has no trained tasks");
    return run;
}

struct CliArgs {
    std::string config_path;
    std::string out_override;
    uint64_t seed_override = 0;
    bool has_seed = false;
};

RunConfig load_config(const CliArgs& a) {
    if (a.config_path.empty()) throw ConfigError("--config is required");
    RunConfig rc = load_run_config(a.config_path);
    if (a.has_seed) rc.seed = a.seed_override;
    if (!a.out_override.empty()) rc.out_dir = a.out_override;
    return rc;
}

int cmd_train_base(const CliArgs& a) {
    RunConfig rc = load_config(a);
    RunPaths p{rc.out_dir};
    if (fs::exists(p.base()))
        throw ConflictError(p.base().string() + " already exists; pick a fresh out dir");
    fs::create_directories(p.dir / "profiles");
    copy_config(a.config_path, p);

    TaskData data = load_task_data(rc.task(0));
    TaskSpec spec = spec_for(rc, 0);
    ContinualEngine eng(rc.model, rc.seed);
    TrainOptions opt{rc.epochs_base, rc.lr, rc.weight_decay};
    TrainStats stats = eng.train_base(spec, data.train, data.val, opt);
    print_stats("base task", stats);

    AxisRegressor axis;
    std::vector<Tensor> images;
    for (const auto& s : data.train) images.push_back(s.image);
    axis.fit(images);
    write_axis(p.axis().string(), axis);

    write_profile(p.profile(0).string(), profile_from_training(0, spec, data.train, axis));
    eng.save_base(p.base().string());
    eng.save_task(p.task(0).string(), 0);
    write_manifest(p, rc);
    std::printf("wrote %s\n", p.base().string().c_str());
    return 0;
}

int cmd_continue(const CliArgs& a, uint32_t task) {
    RunConfig rc = load_config(a);
    if (task == 0) throw ConfigError("--task must name a continual task (>= 1)");
    RunPaths p{rc.out_dir};
    if (fs::exists(p.task(task)))
        throw ConflictError(p.task(task).string() + " already exists");

    ContinualEngine eng(rc.model, rc.seed);
    eng.load_base(p.base().string());
    AxisRegressor axis = read_axis(p.axis().string());

    TaskData data = load_task_data(rc.task(task));
    TaskSpec spec = spec_for(rc, task);
    TrainOptions opt{rc.epochs_task, rc.lr, rc.weight_decay};
    TrainStats stats = eng.continual_step(spec, data.train, data.val, opt);
    print_stats("task " + std::to_string(task), stats);

    write_profile(p.profile(task).string(),
                  profile_from_training(task, spec, data.train, axis));
    eng.save_task(p.task(task).string(), task);
    write_manifest(p, rc);
    std::printf("wrote %s\n", p.task(task).string().c_str());
    return 0;
}

int cmd_report(const CliArgs& a) {
    RunConfig rc = load_config(a);
    RunPaths p{rc.out_dir};
    LoadedRun run = load_run(rc, p, /*need_all=*/true);

    std::map<uint32_t, std::vector<VolumeSample>> eval_sets;
    for (uint32_t id : run.tasks) {
        TaskData data = load_task_data(rc.task(id));
        if (data.test.empty())
            throw ConfigError("task " + std::to_string(id) +
                              " has no held-out samples; raise its sample count");
        eval_sets.emplace(id, std::move(data.test));
    }
    EvaluationReport rep = evaluate(run.eng, run.axis, run.profiles, eval_sets);

    fs::create_directories(p.reports());
    const std::string table = rep.to_table();
    {
        std::ofstream out(p.reports() / "eval.txt");
        out << table;
    }
    {
        std::ofstream out(p.reports() / "eval.csv");
        out << rep.to_csv();
    }
    std::fputs(table.c_str(), stdout);
    std::printf("wrote %s\n", (p.reports() / "eval.csv").string().c_str());
    return 0;
}

int cmd_infer(const CliArgs& a, const std::string& input, std::string output,
              const std::string& checkpoint) {
    RunConfig rc = load_config(a);
    RunPaths p{rc.out_dir};
    LoadedRun run = load_run(rc, p, /*need_all=*/false);
    if (!checkpoint.empty()) {
        // explicit backbone override: rebuild the engine against it
        LoadedRun other{ContinualEngine(rc.model, rc.seed), run.axis, run.profiles, {}};
        other.eng.load_base(checkpoint);
        for (uint32_t id : run.tasks) {
            other.eng.load_task(p.task(id).string(), spec_for(rc, id));
            other.tasks.push_back(id);
        }
        run = std::move(other);
    }

    VolumeSample in = read_lvol(input);
    const std::vector<double> scores = run.axis.predict(in.image);
    std::vector<TaskPrediction> preds;
    for (uint32_t id : run.tasks) {
        TaskPrediction tp;
        tp.task_id = id;
        tp.probs = run.eng.predict(in.image, id).probs;
        const AxialProfile& prof = run.profiles.at(id);
        tp.slice_valid = slices_in_range(scores, prof.low, prof.high);
        preds.push_back(std::move(tp));
    }
    FusedPrediction fused = entropy_ensemble(preds);

    if (output.empty()) {
        fs::create_directories(p.reports());
        output = (p.reports() / (fs::path(input).stem().string() + "_seg.lvol")).string();
    }
    VolumeSample out;
    out.image = in.image;
    out.spacing = in.spacing;
    out.masks = fused.masks;
    write_lvol(output, out);

    for (const auto& [name, mask] : fused.masks) {
        size_t voxels = 0;
        for (double v : mask.data()) voxels += v > 0.0;
        std::printf("%-16s %zu voxels\n", name.c_str(), voxels);
    }
    std::printf("wrote %s\n", output.c_str());
    return 0;
}

int cmd_gen_data(const CliArgs& a, uint32_t task, std::string output) {
    RunConfig rc = load_config(a);
    const SyntheticTaskRecipe& recipe = rc.task(task);
    if (output.empty())
        output = (fs::path(rc.out_dir) / "data" / ("task_" + std::to_string(task))).string();
    fs::create_directories(output);
    const auto samples = generate_dataset(recipe);
    for (size_t i = 0; i < samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03zu.lvol", i);
        write_lvol((fs::path(output) / name).string(), samples[i]);
    }
    std::printf("wrote %zu volumes to %s\n", samples.size(), output.c_str());
    return 0;
}

// --- selftest ----------------------------------------------------------------

int cmd_selftest() {
    struct Check {
        const char* name;
        std::function<void()> fn;
    };
    auto expect = [](bool ok, const char* what) {
        if (!ok) throw std::runtime_error(what);
    };

    PvtConfig tiny;
    tiny.dims = {4, 8};
    tiny.enc_depths = {1, 1};
    tiny.dec_depths = {1};
    tiny.heads = {1, 2};
    tiny.sr_ratios = {2, 1};
    tiny.ffn_ratio = 2;
    tiny.final_dim = 4;
    tiny.rank_attn = tiny.rank_ffn = tiny.rank_conv = 1;
    tiny.alpha_attn = tiny.alpha_ffn = tiny.alpha_conv = 0.5;

    SyntheticTaskRecipe tiny_recipe;
    tiny_recipe.shape = {8, 8, 4};
    tiny_recipe.samples = 2;
    tiny_recipe.noise = 0.01;
    tiny_recipe.seed = 5;
    {
        OrganSpec o;
        o.class_name = "blob";
        o.min_radius = 1.0;
        o.max_radius = 1.0;
        o.intensity = 0.3;
        tiny_recipe.organs.push_back(o);
    }

    const std::vector<Check> checks = {
        {"autodiff-gradients",
         [&] {
             Rng rng(3);
             Tensor x = Tensor::randn({2, 3}, rng);
             x.set_requires_grad(true);
             Tensor w = Tensor::randn({3, 2}, rng);
             w.set_requires_grad(true);
             auto loss_of = [&] { return mean(sigmoid(matmul(x, w))); };
             Tape tape;
             Tensor loss = loss_of();
             tape.backward(loss);
             const double g = x.ensure_grad()[0];
             const double h = 1e-6;
             x.raw()[0] += h;
             const double up = loss_of().value();
             x.raw()[0] -= 2 * h;
             const double dn = loss_of().value();
             x.raw()[0] += h;
             expect(std::fabs((up - dn) / (2 * h) - g) < 1e-6, "finite difference mismatch");
         }},
        {"conv-determinism",
         [&] {
             Rng rng(4);
             Tensor v = Tensor::randn({2, 4, 4, 4}, rng);
             Tensor k = Tensor::randn({3, 2, 2, 2, 2}, rng);
             Tensor b = Tensor::randn({3}, rng);
             Tensor one = conv3d(v, k, b, 2, 0);
             Tensor two = conv3d(v, k, b, 2, 0);
             expect(one.data() == two.data(), "repeated convolution differed");
             expect(one.shape() == Shape{3, 2, 2, 2}, "bad output shape");
         }},
        {"adapter-zero-init",
         [&] {
             Pvt3d m(tiny, 11);
             m.add_head(0, 1, 11);
             Rng rng(12);
             Tensor vol = Tensor::randn({1, 8, 8, 4}, rng);
             Tensor before = m.forward(vol, 0);
             m.add_adapters(1, 13);
             m.add_head(1, 1, 13);
             Tensor base_view = m.forward(vol, 0);
             expect(before.data() == base_view.data(), "existing task output moved");
             Tensor with = m.forward(vol, 1);
             for (size_t i = 0; i < with.numel(); ++i)
                 expect(std::isfinite(with.data()[i]), "non-finite output");
         }},
        {"engine-freeze",
         [&] {
             ContinualEngine eng(tiny, 21);
             auto data = generate_dataset(tiny_recipe);
             TaskSpec s0;
             s0.task_id = 0;
             s0.classes = {"blob"};
             s0.seed = 22;
             TrainOptions opt;
             opt.epochs = 1;
             opt.lr = 1e-3;
             eng.train_base(s0, data, {}, opt);
             const uint64_t digest = eng.base_checksum();
             TaskSpec s1 = s0;
             s1.task_id = 1;
             s1.seed = 23;
             eng.continual_step(s1, data, {}, opt);
             expect(eng.base_checksum() == digest, "backbone moved");
         }},
        {"checkpoint-roundtrip",
         [&] {
             const auto path = fs::temp_directory_path() / "loco_selftest.loco";
             Rng rng(31);
             ParamMap pm;
             put_param(pm, "a", Tensor::randn({3, 2}, rng));
             put_param(pm, "b", Tensor::randn({4}, rng));
             write_checkpoint(path.string(), 7, {Shard{0, 0, pm}});
             Checkpoint cp = read_checkpoint(path.string());
             fs::remove(path);
             expect(cp.base_checksum == 7, "digest mangled");
             expect(cp.shards.size() == 1, "shard count");
             expect(cp.shards[0].tensors.at("a").data() == pm.at("a").data(), "payload mangled");
         }},
        {"synthdata-determinism",
         [&] {
             auto a = generate_sample(tiny_recipe, 0);
             auto b = generate_sample(tiny_recipe, 0);
             expect(a.image.data() == b.image.data(), "image not reproducible");
             expect(a.masks.at("blob").data() == b.masks.at("blob").data(),
                    "mask not reproducible");
         }},
        {"metric-sanity",
         [&] {
             Tensor m = Tensor::full({3, 3, 3}, 1.0);
             expect(dsc(m, m) == 1.0, "self dice");
             expect(hd95(m, m, {1, 1, 1}) == 0.0, "self distance");
             Tensor e = Tensor::zeros({3, 3, 3});
             expect(dsc(e, e) == 1.0, "empty dice convention");
         }},
        {"fusion-sanity",
         [&] {
             auto iso = pav_isotonic({1.0, 0.0});
             expect(iso[0] == 0.5 && iso[1] == 0.5, "isotonic pooling");
             expect(binary_entropy(0.5) > binary_entropy(0.9), "entropy ordering");
             TaskPrediction a, b;
             a.task_id = 1;
             a.probs.emplace("c", Tensor::full({1, 1, 1}, 0.7));
             b.task_id = 2;
             b.probs.emplace("c", Tensor::full({1, 1, 1}, 0.3));
             auto fused = entropy_ensemble({a, b});
             // equal entropies: the lower task id wins, so the voxel is set
             expect(fused.masks.at("c").data()[0] == 1.0, "tie break");
         }},
    };

    int failures = 0;
    for (const auto& c : checks) {
        try {
            c.fn();
            std::printf("ok   %s\n", c.name);
        } catch (const std::exception& e) {
            ++failures;
            std::printf("FAIL %s: %s\n", c.name, e.what());
        }
    }
    std::printf("%zu/%zu checks passed\n", checks.size() - failures, checks.size());
    return failures == 0 ? 0 : 1;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"continual 3d segmentation workbench"};
    app.require_subcommand(1);

    CliArgs args;
    uint32_t task = 0;
    std::string input, output, checkpoint;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", args.config_path, "run configuration (ini)");
        if (needs_config) c->required();
        sub->add_option("--out", args.out_override, "run directory (overrides config)");
        sub->add_option("--seed", args.seed_override, "model seed (overrides config)")
            ->each([&](const std::string&) { args.has_seed = true; });
    };

    auto* train = app.add_subcommand("train-base", "train task 0 and freeze the backbone");
    add_common(train, true);

    auto* cont = app.add_subcommand("continue", "train one continual task on a frozen backbone");
    add_common(cont, true);
    cont->add_option("--task", task, "task id to train")->required();

    auto* rep = app.add_subcommand("report", "evaluate the fused pipeline on held-out data");
    add_common(rep, true);

    auto* inf = app.add_subcommand("infer", "fused segmentation of one volume");
    add_common(inf, true);
    inf->add_option("--input", input, "input volume (lvol)")->required();
    inf->add_option("--output", output, "output path (default: reports/<stem>_seg.lvol)");
    inf->add_option("--checkpoint", checkpoint, "explicit backbone file to load");

    auto* gen = app.add_subcommand("gen-data", "write one task's synthetic volumes");
    add_common(gen, true);
    gen->add_option("--task", task, "task id to generate");
    gen->add_option("--output", output, "destination directory");

    app.add_subcommand("selftest", "run built-in invariant checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (train->parsed()) return cmd_train_base(args);
    if (cont->parsed()) return cmd_continue(args, task);
    if (rep->parsed()) return cmd_report(args);
    if (inf->parsed()) return cmd_infer(args, input, output, checkpoint);
    if (gen->parsed()) return cmd_gen_data(args, task, output);
    return cmd_selftest();
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const RecipeError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ChecksumError& e) {
        std::fprintf(stderr, "checksum error: %s\n", e.what());
        return 5;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "file error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const ConflictError& e) {
        std::fprintf(stderr, "conflict: %s\n", e.what());
        return 4;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 6;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 6;
    }
}
