// SPDX-License-Identifier: Apache-2.0
//
// d2vr command-line front end. Subcommands cover the whole pipeline:
//   gen-data      synthesize degraded/clean sequence pairs with known flow
//   train-flow    train the confidence-gated flow estimator
//   train-teacher train the multi-step diffusion restorer
//   distill       few-step adversarial distillation of the teacher
//   restore       frame-recurrent restoration of a sequence
//   eval          full-reference metrics + JSON-lines report
//   ablate        loss-term and flow-backend comparison matrix
//
// Exit codes: 0 success, 1 usage/config error, 2 missing prerequisite,
// 3 corrupt data.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "d2vr/config.hpp"
#include "d2vr/diffusion.hpp"
#include "d2vr/distill.hpp"
#include "d2vr/drfa.hpp"
#include "d2vr/image.hpp"
#include "d2vr/metrics.hpp"
#include "d2vr/synthgen.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace d2vr;

namespace {

struct PrereqError : std::runtime_error {
    explicit PrereqError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// option plumbing
// ---------------------------------------------------------------------------

struct CmdCtx {
    config::Config overrides;  // flags only
    std::string out;
    std::string config_file;
    bool force = false;

    void add_common(CLI::App* cmd) {
        cmd->add_option("--out", out, "output directory")->required();
        cmd->add_option("--config", config_file, "config snapshot to start from");
        cmd->add_flag("--force", force, "overwrite existing outputs");
        add_kv(cmd, "--seed", "seed", "global seed");
        add_kv(cmd, "--preset", "preset", "parameter preset (desk or paper)");
    }

    void add_kv(CLI::App* cmd, const std::string& flag, const std::string& key,
                const std::string& desc) {
        cmd->add_option_function<std::string>(
            flag, [this, key](const std::string& v) { overrides.set(key, v); }, desc);
    }

    config::Config resolve() const {
        config::Config c;
        if (!config_file.empty()) c.load_file(config_file);
        for (const auto& [k, v] : overrides.items()) c.set(k, v);
        const std::string preset = c.has("preset") ? c.str("preset") : "desk";
        config::apply_preset(c, preset);
        return c;
    }
};

fs::path prepare_out(const std::string& out, bool force, bool wants_empty) {
    fs::path dir(out);
    if (wants_empty && fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw ConfigError("output directory " + out + " is not empty (use --force)");
    fs::create_directories(dir);
    for (const char* sub : {"ckpt", "logs", "frames", "reports"})
        fs::create_directories(dir / sub);
    return dir;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    for (const auto& l : lines) os << l << "\n";
}

void require_checkpoint(const std::string& path, const std::string& stage) {
    if (path.empty() || !fs::exists(fs::path(path) / "manifest.txt"))
        throw PrereqError("missing prerequisite checkpoint '" + path + "': run " + stage +
                          " first");
}

synthgen::DatasetConfig dataset_config(const config::Config& c) {
    synthgen::DatasetConfig d;
    const uint64_t seed = static_cast<uint64_t>(c.geti("seed"));
    d.train_lo = seed;
    d.train_hi = seed + static_cast<uint64_t>(c.geti("num_train"));
    d.eval_lo = d.train_hi;
    d.eval_hi = d.train_hi + static_cast<uint64_t>(c.geti("num_eval"));
    d.clean.T = static_cast<int>(c.geti("frames"));
    d.clean.C = static_cast<int>(c.geti("channels"));
    d.clean.H = static_cast<int>(c.geti("height"));
    d.clean.W = static_cast<int>(c.geti("width"));
    d.motion = c.str("motion");
    d.degradation.noise_sigma = static_cast<float>(c.getf("noise"));
    d.degradation.blur_sigma = static_cast<float>(c.getf("blur"));
    d.degradation.occlusion_fraction = static_cast<float>(c.getf("occlusion"));
    d.degradation.downsample_factor = static_cast<int>(c.geti("downsample"));
    return d;
}

std::vector<synthgen::SequencePair> load_split(const std::string& data_dir,
                                               const std::string& split) {
    std::vector<synthgen::SequencePair> pairs;
    for (const auto& dir : synthgen::list_split(data_dir, split))
        pairs.push_back(synthgen::load_pair(dir));
    if (pairs.empty()) throw IoError("no sequences under " + data_dir + "/" + split);
    return pairs;
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const CmdCtx& ctx) {
    const config::Config c = ctx.resolve();
    fs::path out(ctx.out);
    if (fs::exists(out) && !fs::is_empty(out) && !ctx.force)
        throw ConfigError("output directory " + ctx.out + " is not empty (use --force)");
    fs::create_directories(out);
    synthgen::DatasetConfig d = dataset_config(c);
    synthgen::write_dataset(out, d, config::env_threads());
    c.save_snapshot(out / "config_snapshot.txt");
    std::printf("dataset: %llu train / %llu eval sequences at %dx%dx%d\n",
                static_cast<unsigned long long>(d.train_hi - d.train_lo),
                static_cast<unsigned long long>(d.eval_hi - d.eval_lo), d.clean.T, d.clean.H,
                d.clean.W);
    return 0;
}

int cmd_train_flow(const CmdCtx& ctx, const std::string& data_dir) {
    const config::Config c = ctx.resolve();
    const fs::path out = prepare_out(ctx.out, ctx.force, false);
    auto pairs = load_split(data_dir, "train");

    drfa::DrfaConfig fcfg;
    fcfg.channels = pairs[0].clean.C();
    fcfg.use_confidence = c.getb("confidence");
    drfa::DrfaParams params = drfa::init_drfa(fcfg, static_cast<uint64_t>(c.geti("seed")));

    drfa::FlowTrainConfig tcfg;
    tcfg.steps = static_cast<int>(c.geti("flow_steps"));
    tcfg.batch = static_cast<int>(c.geti("flow_batch"));
    tcfg.lr = static_cast<float>(c.getf("flow_lr"));
    tcfg.seed = static_cast<uint64_t>(c.geti("seed")) + 1;
    auto curve = drfa::train_flow(pairs, params, tcfg);

    drfa::save_drfa(out / "ckpt" / "drfa", params, {{"config_hash", c.hash()}});
    std::vector<std::string> lines = {"step,l1_loss"};
    for (size_t i = 0; i < curve.size(); ++i)
        lines.push_back(std::to_string(i) + "," + fmt(curve[i]));
    write_lines(out / "logs" / "flow_loss.csv", lines);
    c.save_snapshot(out / "config_snapshot.txt");

    // one qualitative dump: flow between the first eval-ready pair
    drfa::FlowField f = drfa::estimate_flow(pairs[0].degraded.frame(0), pairs[0].degraded.frame(1),
                                            params);
    write_flow_ppm(out / "frames" / "flow_sample.ppm", f.flow, 3.f);
    std::printf("train-flow: %zu steps, final loss %.4f, checkpoint at %s\n", curve.size(),
                curve.empty() ? 0.f : curve.back(), (out / "ckpt" / "drfa").c_str());
    return 0;
}

int cmd_train_teacher(const CmdCtx& ctx, const std::string& data_dir, const std::string& drfa_ckpt) {
    const config::Config c = ctx.resolve();
    require_checkpoint(drfa_ckpt, "train-flow");
    const fs::path out = prepare_out(ctx.out, ctx.force, false);
    auto pairs = load_split(data_dir, "train");
    drfa::DrfaParams flow = drfa::load_drfa(drfa_ckpt);
    flow.state.set_requires_grad(false);
    auto prepared = diffusion::prepare_sequences(pairs, flow);

    diffusion::DenoiserConfig ncfg;
    ncfg.channels = pairs[0].clean.C();
    ncfg.base = static_cast<int>(c.geti("denoiser_base"));
    diffusion::DenoiserNet net =
        diffusion::init_denoiser(ncfg, static_cast<uint64_t>(c.geti("seed")) + 2);
    diffusion::NoiseSchedule sched = diffusion::make_schedule();

    diffusion::TeacherTrainConfig tcfg;
    tcfg.steps = static_cast<int>(c.geti("teacher_steps"));
    tcfg.batch = static_cast<int>(c.geti("teacher_batch"));
    tcfg.lr = static_cast<float>(c.getf("teacher_lr"));
    tcfg.seed = static_cast<uint64_t>(c.geti("seed")) + 3;
    auto curve = diffusion::train_teacher(net, prepared, sched, tcfg);

    diffusion::save_denoiser(out / "ckpt" / "teacher", net,
                             {{"config_hash", c.hash()}, {"role", "teacher"}});
    std::vector<std::string> lines = {"step,eps_mse"};
    for (size_t i = 0; i < curve.size(); ++i)
        lines.push_back(std::to_string(i) + "," + fmt(curve[i]));
    write_lines(out / "logs" / "teacher_loss.csv", lines);
    c.save_snapshot(out / "config_snapshot.txt");
    std::printf("train-teacher: %zu steps, final eps-MSE %.4f\n", curve.size(),
                curve.empty() ? 0.f : curve.back());
    return 0;
}

int cmd_distill(const CmdCtx& ctx, const std::string& data_dir, const std::string& teacher_ckpt,
                const std::string& drfa_ckpt) {
    const config::Config c = ctx.resolve();
    require_checkpoint(teacher_ckpt, "train-teacher");
    require_checkpoint(drfa_ckpt, "train-flow");
    const fs::path out = prepare_out(ctx.out, ctx.force, false);
    auto pairs = load_split(data_dir, "train");
    drfa::DrfaParams flow = drfa::load_drfa(drfa_ckpt);
    flow.state.set_requires_grad(false);
    diffusion::DenoiserNet teacher = diffusion::load_denoiser(teacher_ckpt);
    teacher.state.set_requires_grad(false);
    auto prepared = diffusion::prepare_sequences(pairs, flow);
    diffusion::NoiseSchedule sched = diffusion::make_schedule();

    distill::DistillConfig dcfg;
    dcfg.lambda1 = static_cast<float>(c.getf("lambda1"));
    dcfg.lambda2 = static_cast<float>(c.getf("lambda2"));
    dcfg.total_steps = static_cast<int>(c.geti("distill_steps"));
    dcfg.batch = static_cast<int>(c.geti("distill_batch"));
    dcfg.clip_len = static_cast<int>(c.geti("clip_len"));
    dcfg.lr = static_cast<float>(c.getf("distill_lr"));
    dcfg.t_student = c.get_ints("t_student");
    dcfg.seed = static_cast<uint64_t>(c.geti("seed")) + 4;
    distill::DistillOutput res = distill::distill_run(teacher, prepared, sched, dcfg);

    diffusion::save_denoiser(out / "ckpt" / "student", res.student,
                             {{"config_hash", c.hash()}, {"role", "student"}});
    distill::save_discriminator(out / "ckpt" / "disc", res.disc);
    std::vector<std::string> lines = {distill::loss_csv_header()};
    for (const auto& row : res.log) lines.push_back(distill::loss_csv_row(row));
    write_lines(out / "logs" / "distill_loss.csv", lines);
    c.save_snapshot(out / "config_snapshot.txt");
    std::printf("distill: %d steps (lambda1=%g lambda2=%g), final total %.4f\n", dcfg.total_steps,
                dcfg.lambda1, dcfg.lambda2, res.log.empty() ? 0.f : res.log.back().l_total);
    return 0;
}

std::vector<fs::path> sequence_dirs(const std::string& input) {
    fs::path in(input);
    if (fs::exists(in / "lq.d2tn")) return {in};
    std::vector<fs::path> dirs;
    if (fs::exists(in))
        for (const auto& e : fs::directory_iterator(in))
            if (e.is_directory() && fs::exists(e.path() / "lq.d2tn")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw IoError("no sequences found under " + input);
    return dirs;
}

int cmd_restore(const CmdCtx& ctx, const std::string& input, const std::string& ckpt,
                const std::string& drfa_ckpt, const std::string& mode) {
    const config::Config c = ctx.resolve();
    require_checkpoint(ckpt, mode == "teacher" ? "train-teacher" : "distill");
    require_checkpoint(drfa_ckpt, "train-flow");
    if (mode != "teacher" && mode != "student") throw ConfigError("mode must be teacher|student");
    const fs::path out = prepare_out(ctx.out, ctx.force, false);

    diffusion::DenoiserNet net = diffusion::load_denoiser(ckpt);
    drfa::DrfaParams flow = drfa::load_drfa(drfa_ckpt);
    diffusion::NoiseSchedule sched = diffusion::make_schedule();
    diffusion::SamplerConfig scfg;
    scfg.teacher_steps = static_cast<int>(c.geti("teacher_sample_steps"));
    scfg.t_student = c.get_ints("t_student");
    const uint64_t seed = static_cast<uint64_t>(c.geti("seed")) + 5;

    std::vector<std::string> timing = {"sequence,denoiser_calls_per_frame,ms_per_frame"};
    for (const auto& dir : sequence_dirs(input)) {
        synthgen::SequencePair pair = synthgen::load_pair(dir);
        diffusion::RestoreResult r = diffusion::restore_sequence(
            net, flow, pair.degraded,
            mode == "teacher" ? diffusion::RestoreMode::teacher : diffusion::RestoreMode::student,
            scfg, sched, Rng(seed).split(pair.degraded.seed).next_u64());
        const std::string name = dir.filename().string();
        fs::create_directories(out / "frames" / name);
        save_tensor(out / "frames" / name / "restored.d2tn", r.restored.frames);
        for (int t = 0; t < r.restored.T(); ++t) {
            char fname[32];
            std::snprintf(fname, sizeof(fname), "t%03d.%s", t,
                          r.restored.C() == 3 ? "ppm" : "pgm");
            write_frame_preview(out / "frames" / name / fname, r.restored.frame(t));
        }
        timing.push_back(name + "," + std::to_string(r.denoiser_calls_per_frame) + "," +
                         fmt(r.ms_per_frame));
        std::printf("restore %s: mode=%s denoiser_calls_per_frame=%d ms_per_frame=%.1f\n",
                    name.c_str(), mode.c_str(), r.denoiser_calls_per_frame, r.ms_per_frame);
    }
    write_lines(out / "logs" / "restore_timing.csv", timing);
    c.save_snapshot(out / "config_snapshot.txt");
    return 0;
}

json metrics_to_json(const metrics::SequenceMetrics& m) {
    return json{{"id", m.id},     {"psnr", m.psnr},     {"ssim", m.ssim},
                {"tof", m.tof},   {"tlpips", m.tlpips}, {"hf_energy", m.hf_energy}};
}

void print_metric_table(const std::vector<metrics::SequenceMetrics>& rows) {
    std::printf("%-12s %10s %8s %8s %10s %12s\n", "sequence", "psnr", "ssim", "tof", "tlpips",
                "hf_energy");
    for (const auto& r : rows)
        std::printf("%-12s %10.4f %8.4f %8.4f %10.4f %12.6f\n", r.id.c_str(), r.psnr, r.ssim,
                    r.tof, r.tlpips, r.hf_energy);
}

metrics::MetricReport evaluate_dir(const std::string& restored_dir, const std::string& data_dir,
                                   const std::string& split, const drfa::DrfaParams& flow_backend,
                                   const std::string& config_hash, const std::string& ckpt_id) {
    metrics::MetricReport rep;
    rep.config_hash = config_hash;
    rep.checkpoint_id = ckpt_id;
    distill::PerceptualNet phi;
    metrics::FlowFn flow_fn = [&flow_backend](const Tensor& a, const Tensor& b) {
        return drfa::estimate_flow(a, b, flow_backend).flow;
    };
    bool phi_ready = false;
    for (const auto& e : fs::directory_iterator(restored_dir)) {
        if (!e.is_directory() || !fs::exists(e.path() / "restored.d2tn")) continue;
        const std::string name = e.path().filename().string();
        synthgen::SequencePair pair = synthgen::load_pair(fs::path(data_dir) / split / name);
        synthgen::VideoSequence restored;
        restored.frames = load_tensor(e.path() / "restored.d2tn");
        if (!phi_ready) {
            phi = distill::PerceptualNet::fixed(restored.frames.shape()[1]);
            phi_ready = true;
        }
        rep.rows.push_back(
            metrics::evaluate_sequence(name, restored, pair.clean, flow_fn, phi.fn()));
    }
    std::sort(rep.rows.begin(), rep.rows.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    if (rep.rows.empty()) throw IoError("no restored sequences under " + restored_dir);
    return rep;
}

int cmd_eval(const CmdCtx& ctx, const std::string& restored_dir, const std::string& data_dir,
             const std::string& split, const std::string& flow_ckpt) {
    const config::Config c = ctx.resolve();
    require_checkpoint(flow_ckpt, "train-flow (tOF backend)");
    const fs::path out = prepare_out(ctx.out, ctx.force, false);
    drfa::DrfaParams flow = drfa::load_drfa(flow_ckpt);

    // identify the input by its directory name only, so a rerun into a fresh
    // output tree stays byte-identical
    metrics::MetricReport rep = evaluate_dir(restored_dir, data_dir, split, flow, c.hash(),
                                             fs::path(restored_dir).filename().string());
    std::vector<std::string> lines;
    for (const auto& r : rep.rows) lines.push_back(metrics_to_json(r).dump());
    json summary = metrics_to_json(rep.summary());
    summary["config_hash"] = rep.config_hash;
    summary["checkpoint"] = rep.checkpoint_id;
    summary["sequences"] = rep.rows.size();
    lines.push_back(summary.dump());
    write_lines(out / "reports" / "eval.jsonl", lines);
    c.save_snapshot(out / "config_snapshot.txt");

    auto rows = rep.rows;
    rows.push_back(rep.summary());
    print_metric_table(rows);
    return 0;
}

int cmd_ablate(const CmdCtx& ctx, const std::string& data_dir, const std::string& teacher_ckpt,
               const std::string& drfa_ckpt, const std::string& drfa_noconf_ckpt,
               const std::string& flow_ckpt) {
    const config::Config c = ctx.resolve();
    require_checkpoint(teacher_ckpt, "train-teacher");
    require_checkpoint(drfa_ckpt, "train-flow");
    require_checkpoint(drfa_noconf_ckpt, "train-flow --confidence 0");
    require_checkpoint(flow_ckpt, "train-flow (tOF backend)");
    const fs::path out = prepare_out(ctx.out, ctx.force, false);

    auto train_pairs = load_split(data_dir, "train");
    auto eval_pairs = load_split(data_dir, "eval");
    drfa::DrfaParams flow = drfa::load_drfa(drfa_ckpt);
    flow.state.set_requires_grad(false);
    drfa::DrfaParams flow_noconf = drfa::load_drfa(drfa_noconf_ckpt);
    drfa::DrfaParams flow_metric = drfa::load_drfa(flow_ckpt);
    diffusion::DenoiserNet teacher = diffusion::load_denoiser(teacher_ckpt);
    teacher.state.set_requires_grad(false);
    auto prepared = diffusion::prepare_sequences(train_pairs, flow);
    diffusion::NoiseSchedule sched = diffusion::make_schedule();
    distill::PerceptualNet phi = distill::PerceptualNet::fixed(train_pairs[0].clean.C());
    metrics::FlowFn flow_fn = [&flow_metric](const Tensor& a, const Tensor& b) {
        return drfa::estimate_flow(a, b, flow_metric).flow;
    };

    struct Variant {
        const char* name;
        float l1, l2;
    };
    const float l1 = static_cast<float>(c.getf("lambda1"));
    const float l2 = static_cast<float>(c.getf("lambda2"));
    const Variant variants[] = {
        {"full", l1, l2}, {"wo_adv", 0.f, l2}, {"wo_tlpips", l1, 0.f}, {"wo_both", 0.f, 0.f}};

    std::vector<std::string> lines;
    std::vector<metrics::SequenceMetrics> table;
    for (const auto& v : variants) {
        distill::DistillConfig dcfg;
        dcfg.lambda1 = v.l1;
        dcfg.lambda2 = v.l2;
        dcfg.total_steps = static_cast<int>(c.geti("distill_steps"));
        dcfg.batch = static_cast<int>(c.geti("distill_batch"));
        dcfg.clip_len = static_cast<int>(c.geti("clip_len"));
        dcfg.lr = static_cast<float>(c.getf("distill_lr"));
        dcfg.t_student = c.get_ints("t_student");
        dcfg.seed = static_cast<uint64_t>(c.geti("seed")) + 4;
        distill::DistillOutput res = distill::distill_run(teacher, prepared, sched, dcfg);

        diffusion::SamplerConfig scfg;
        scfg.t_student = dcfg.t_student;
        metrics::MetricReport rep;
        for (size_t i = 0; i < eval_pairs.size(); ++i) {
            diffusion::RestoreResult r = diffusion::restore_sequence(
                res.student, flow, eval_pairs[i].degraded, diffusion::RestoreMode::student, scfg,
                sched, 1000 + i);
            rep.rows.push_back(metrics::evaluate_sequence(std::to_string(i), r.restored,
                                                          eval_pairs[i].clean, flow_fn, phi.fn()));
        }
        metrics::SequenceMetrics s = rep.summary();
        s.id = v.name;
        table.push_back(s);
        json row = metrics_to_json(s);
        row["kind"] = "loss_variant";
        row["lambda1"] = v.l1;
        row["lambda2"] = v.l2;
        lines.push_back(row.dump());
        diffusion::save_denoiser(out / "ckpt" / (std::string("student_") + v.name), res.student,
                                 {{"config_hash", c.hash()}, {"role", v.name}});
    }

    // flow-backend matrix: EPE of both estimators on the degraded eval split
    for (const auto& [name, params] : {std::pair<std::string, const drfa::DrfaParams*>{
                                           "drfa", &flow},
                                       {"no_confidence", &flow_noconf}}) {
        double total = 0.0;
        int count = 0;
        for (const auto& pair : eval_pairs) {
            for (int t = 0; t + 1 < pair.clean.T(); ++t) {
                Tensor pred =
                    drfa::estimate_flow(pair.degraded.frame(t), pair.degraded.frame(t + 1), *params)
                        .flow;
                total += metrics::epe(pred, pair.clean.flow_pair(t));
                ++count;
            }
        }
        json row = {{"kind", "flow_variant"}, {"id", name}, {"epe", total / count}};
        lines.push_back(row.dump());
        std::printf("%-16s epe=%.4f\n", name.c_str(), total / count);
    }

    write_lines(out / "reports" / "ablate.jsonl", lines);
    c.save_snapshot(out / "config_snapshot.txt");
    print_metric_table(table);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale diffusion video restoration pipeline"};
    app.require_subcommand(1);

    CmdCtx gen, tflow, tteach, dist, rest, evl, abl;
    std::string data_dir, teacher_ckpt, drfa_ckpt, drfa_noconf_ckpt, flow_ckpt, input, ckpt;
    std::string restored_dir, split = "eval", mode = "student";

    CLI::App* c_gen = app.add_subcommand("gen-data", "synthesize a degraded dataset");
    gen.add_common(c_gen);
    for (auto [flag, key] : std::initializer_list<std::pair<const char*, const char*>>{
             {"--num-train", "num_train"}, {"--num-eval", "num_eval"}, {"--frames", "frames"},
             {"--channels", "channels"},   {"--height", "height"},     {"--width", "width"},
             {"--motion", "motion"},       {"--noise", "noise"},       {"--blur", "blur"},
             {"--occlusion", "occlusion"}, {"--downsample", "downsample"}})
        gen.add_kv(c_gen, flag, key, key);

    CLI::App* c_flow = app.add_subcommand("train-flow", "train the flow estimator");
    tflow.add_common(c_flow);
    c_flow->add_option("--data", data_dir, "dataset directory")->required();
    tflow.add_kv(c_flow, "--steps", "flow_steps", "training steps");
    tflow.add_kv(c_flow, "--batch", "flow_batch", "pairs per step");
    tflow.add_kv(c_flow, "--lr", "flow_lr", "learning rate");
    tflow.add_kv(c_flow, "--confidence", "confidence", "1 = confidence gating, 0 = plain");

    CLI::App* c_teach = app.add_subcommand("train-teacher", "train the diffusion restorer");
    tteach.add_common(c_teach);
    c_teach->add_option("--data", data_dir, "dataset directory")->required();
    c_teach->add_option("--drfa", drfa_ckpt, "flow checkpoint");
    tteach.add_kv(c_teach, "--steps", "teacher_steps", "training steps");
    tteach.add_kv(c_teach, "--batch", "teacher_batch", "frames per step");
    tteach.add_kv(c_teach, "--lr", "teacher_lr", "learning rate");
    tteach.add_kv(c_teach, "--base", "denoiser_base", "denoiser width");

    CLI::App* c_dist = app.add_subcommand("distill", "few-step adversarial distillation");
    dist.add_common(c_dist);
    c_dist->add_option("--data", data_dir, "dataset directory")->required();
    c_dist->add_option("--teacher", teacher_ckpt, "teacher checkpoint");
    c_dist->add_option("--drfa", drfa_ckpt, "flow checkpoint");
    dist.add_kv(c_dist, "--steps", "distill_steps", "training steps");
    dist.add_kv(c_dist, "--batch", "distill_batch", "frames per step");
    dist.add_kv(c_dist, "--clip", "clip_len", "frames per clip");
    dist.add_kv(c_dist, "--lr", "distill_lr", "learning rate");
    dist.add_kv(c_dist, "--lambda1", "lambda1", "adversarial weight");
    dist.add_kv(c_dist, "--lambda2", "lambda2", "temporal weight");
    dist.add_kv(c_dist, "--tsteps", "t_student", "student timesteps, comma separated");

    CLI::App* c_rest = app.add_subcommand("restore", "restore a sequence or a split");
    rest.add_common(c_rest);
    c_rest->add_option("--input", input, "sequence directory or split directory")->required();
    c_rest->add_option("--ckpt", ckpt, "denoiser checkpoint (teacher or student)");
    c_rest->add_option("--drfa", drfa_ckpt, "flow checkpoint");
    c_rest->add_option("--mode", mode, "teacher|student");
    rest.add_kv(c_rest, "--teacher-steps", "teacher_sample_steps", "teacher sampler steps");
    rest.add_kv(c_rest, "--tsteps", "t_student", "student timesteps");

    CLI::App* c_eval = app.add_subcommand("eval", "full-reference evaluation");
    evl.add_common(c_eval);
    c_eval->add_option("--restored", restored_dir, "directory of restored sequences")->required();
    c_eval->add_option("--data", data_dir, "dataset directory")->required();
    c_eval->add_option("--split", split, "dataset split (default eval)");
    c_eval->add_option("--flow", flow_ckpt, "pinned flow checkpoint for tOF");

    CLI::App* c_abl = app.add_subcommand("ablate", "loss-term and flow-backend matrix");
    abl.add_common(c_abl);
    c_abl->add_option("--data", data_dir, "dataset directory")->required();
    c_abl->add_option("--teacher", teacher_ckpt, "teacher checkpoint");
    c_abl->add_option("--drfa", drfa_ckpt, "flow checkpoint (confidence)");
    c_abl->add_option("--drfa-noconf", drfa_noconf_ckpt, "flow checkpoint (no confidence)");
    c_abl->add_option("--flow", flow_ckpt, "pinned flow checkpoint for tOF");
    abl.add_kv(c_abl, "--steps", "distill_steps", "distillation steps per variant");
    abl.add_kv(c_abl, "--batch", "distill_batch", "frames per step");
    abl.add_kv(c_abl, "--clip", "clip_len", "frames per clip");
    abl.add_kv(c_abl, "--lambda1", "lambda1", "adversarial weight");
    abl.add_kv(c_abl, "--lambda2", "lambda2", "temporal weight");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (c_gen->parsed()) return cmd_gen_data(gen);
        if (c_flow->parsed()) return cmd_train_flow(tflow, data_dir);
        if (c_teach->parsed()) return cmd_train_teacher(tteach, data_dir, drfa_ckpt);
        if (c_dist->parsed()) return cmd_distill(dist, data_dir, teacher_ckpt, drfa_ckpt);
        if (c_rest->parsed()) return cmd_restore(rest, input, ckpt, drfa_ckpt, mode);
        if (c_eval->parsed()) return cmd_eval(evl, restored_dir, data_dir, split, flow_ckpt);
        if (c_abl->parsed())
            return cmd_ablate(abl, data_dir, teacher_ckpt, drfa_ckpt, drfa_noconf_ckpt, flow_ckpt);
    } catch (const PrereqError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
