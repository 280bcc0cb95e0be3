// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fqr/bench.hpp"
#include "fqr/checkpoint.hpp"
#include "fqr/dataset.hpp"
#include "fqr/detector.hpp"
#include "fqr/evalmetrics.hpp"
#include "fqr/gradcheck_suite.hpp"
#include "fqr/overlay.hpp"
#include "fqr/runconfig.hpp"
#include "fqr/trainloop.hpp"
#include "fqr/util.hpp"

namespace fqr::cli {

// Exit codes: 0 success, 2 usage error, 3 validation failure, 4 numeric
// failure (non-finite loss or a failed gradient check).
constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kValidation = 3;
constexpr int kNumeric = 4;

namespace fs = std::filesystem;

inline std::vector<Scene> load_scenes_or_fail(const std::string& dir) {
    const std::vector<Scene> scenes = load_dataset(dir);
    if (scenes.empty()) throw ValueError("no scenes in dataset " + dir);
    return scenes;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string spec_path;
    std::string out_dir;
    int count = 0;
    std::uint64_t seed = 1;
    bool force = false;
};

inline int cmd_gen_data(const GenDataArgs& a) {
    const SceneSpec spec = scene_spec_from_json(load_json_file(a.spec_path));
    if (fs::exists(a.out_dir) && !fs::is_empty(a.out_dir) && !a.force) {
        throw ValueError("output directory " + a.out_dir + " is not empty (use --force)");
    }
    std::vector<Scene> scenes;
    scenes.reserve(static_cast<std::size_t>(a.count));
    int dropped = 0;
    Rng base(a.seed);
    for (int i = 0; i < a.count; ++i) {
        Scene s = generate_scene(base.fork(static_cast<std::uint64_t>(i)).next_u64(), spec);
        s.id = "scene-" + std::to_string(a.seed) + "-" + std::to_string(i);
        dropped += s.dropped_objects;
        scenes.push_back(std::move(s));
    }
    save_dataset(a.out_dir, scenes);
    std::printf("wrote %d scenes to %s (%d placements dropped)\n", a.count, a.out_dir.c_str(),
                dropped);
    return kOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

inline RunConfig resolve_run_config(const TrainArgs& a) {
    json j = load_json_file(a.config_path);
    for (const std::string& o : a.overrides) apply_override(j, o);
    return run_config_from_json(j);
}

inline int cmd_train(const TrainArgs& a) {
    const RunConfig rc = resolve_run_config(a);
    if (rc.paths.dataset.empty()) throw ValueError("config: paths.dataset is required for train");
    const std::vector<Scene> scenes = load_scenes_or_fail(rc.paths.dataset);
    std::vector<Scene> eval_scenes;
    if (!rc.paths.eval_dataset.empty()) eval_scenes = load_scenes_or_fail(rc.paths.eval_dataset);

    Detector det(rc.model);
    AdamW opt(det.params(), rc.model.optim);
    int start_step = 0;
    if (!rc.paths.checkpoint.empty() && fs::exists(rc.paths.checkpoint)) {
        start_step = static_cast<int>(load_checkpoint(rc.paths.checkpoint, det, &opt));
        std::printf("resumed from %s at step %d\n", rc.paths.checkpoint.c_str(), start_step);
    }

    fs::create_directories(rc.paths.output_dir);
    const std::string metrics_path = (fs::path(rc.paths.output_dir) / "metrics.csv").string();
    std::ofstream metrics(metrics_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw ValueError("cannot write " + metrics_path);
    if (start_step == 0) {
        metrics << "step,total_loss,qgn_loss";
        for (int s = 0; s < rc.model.n_stages; ++s) metrics << ",stage" << s << "_loss";
        metrics << "\n";
    }
    // Wall-clock timings go to a separate log so metrics.csv stays
    // byte-reproducible for a fixed seed.
    std::ofstream timing((fs::path(rc.paths.output_dir) / "timing.log").string(),
                         start_step > 0 ? std::ios::app : std::ios::trunc);
    std::ofstream eval_csv;
    if (!eval_scenes.empty()) {
        eval_csv.open((fs::path(rc.paths.output_dir) / "eval.csv").string(),
                      start_step > 0 ? std::ios::app : std::ios::trunc);
        if (start_step == 0) eval_csv << "step,ap50,ap75,map5095\n";
    }

    const auto t0 = std::chrono::steady_clock::now();
    TrainLoopOptions opts;
    opts.steps = rc.run.steps;
    opts.batch_size = rc.run.batch_size;
    opts.shuffle_seed = rc.run.seed;
    opts.eval_every = rc.run.eval_every;
    opts.on_step = [&](int step, const TrainStepMetrics& m) {
        metrics << step << "," << fmt_double(m.total) << "," << fmt_double(m.qgn);
        for (double v : m.stage) metrics << "," << fmt_double(v);
        metrics << "\n";
        timing << step << " "
               << std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count()
               << " ms\n";
    };
    if (!eval_scenes.empty()) {
        opts.on_eval = [&](int step) {
            const EvalReport rep = evaluate_model(det, eval_scenes);
            eval_csv << step << "," << fmt_double(rep.ap50) << "," << fmt_double(rep.ap75) << ","
                     << fmt_double(rep.map5095) << "\n";
            eval_csv.flush();
            std::printf("step %d eval ap50 %.4f map %.4f\n", step, rep.ap50, rep.map5095);
            return false;
        };
    }

    const int last_step = run_train_loop(det, opt, scenes, opts, start_step);
    const std::string ckpt_path = (fs::path(rc.paths.output_dir) / "checkpoint.bin").string();
    save_checkpoint(ckpt_path, det, &opt, static_cast<std::uint64_t>(last_step));
    std::printf("trained to step %d, checkpoint at %s\n", last_step, ckpt_path.c_str());
    return kOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string dataset;
    std::string out_csv;
    std::string delta_csv;
};

inline Detector load_detector(const std::string& checkpoint) {
    Detector det(checkpoint_config(checkpoint));
    load_checkpoint(checkpoint, det, nullptr);
    return det;
}

inline int cmd_eval(const EvalArgs& a) {
    Detector det = load_detector(a.checkpoint);
    const std::vector<Scene> scenes = load_scenes_or_fail(a.dataset);

    std::vector<std::vector<Detection>> dets;
    std::vector<SceneAnnotation> anns;
    std::vector<std::vector<std::pair<Box, Box>>> delta_pairs(
        static_cast<std::size_t>(det.config().n_stages));
    std::vector<int> delta_excluded(static_cast<std::size_t>(det.config().n_stages), 0);
    for (const Scene& s : scenes) {
        Detector::Forward f = det.forward(s.image);
        dets.push_back(det.detections_from(f));
        anns.push_back(s.annotation);
        if (!a.delta_csv.empty()) {
            std::vector<Assignment> assigns;
            det.loss(f, s.annotation, nullptr, &assigns);
            for (int st = 0; st < det.config().n_stages; ++st) {
                const std::vector<Box> inputs =
                    boxes_from_array(Detector::stage_input_boxes(f, st));
                const Assignment& as = assigns[static_cast<std::size_t>(st)];
                for (std::size_t q = 0; q < inputs.size(); ++q) {
                    const int j = as.sigma[q];
                    if (j < 0) {
                        ++delta_excluded[static_cast<std::size_t>(st)];
                    } else {
                        delta_pairs[static_cast<std::size_t>(st)].emplace_back(
                            inputs[q], s.annotation.boxes[static_cast<std::size_t>(j)]);
                    }
                }
            }
        }
    }

    const EvalReport rep = evaluate_detections(dets, anns, det.config().num_classes);
    std::ofstream os(a.out_csv);
    if (!os) throw ValueError("cannot write " + a.out_csv);
    os << "metric,value\n";
    os << "ap50," << fmt_double(rep.ap50) << "\n";
    os << "ap75," << fmt_double(rep.ap75) << "\n";
    os << "map5095," << fmt_double(rep.map5095) << "\n";
    for (const auto& [t, v] : rep.ap_per_iou) {
        char key[32];
        std::snprintf(key, sizeof(key), "ap@%.2f", t);
        os << key << "," << fmt_double(v) << "\n";
    }
    for (const auto& [k, v] : rep.ar_at_k) {
        os << "ar@" << k << "," << fmt_double(v) << "\n";
    }
    for (std::size_t c = 0; c < rep.per_class_ap50.size(); ++c) {
        os << "class" << c << "_ap50," << fmt_double(rep.per_class_ap50[c]) << "\n";
    }
    os << "images," << rep.images << "\n";
    os << "ground_truths," << rep.total_gts << "\n";
    os << "detections," << rep.total_detections << "\n";
    std::printf("ap50 %.4f ap75 %.4f map %.4f (%d images)\n", rep.ap50, rep.ap75, rep.map5095,
                rep.images);

    if (!a.delta_csv.empty()) {
        const std::vector<DeltaHistogram> hists = delta_distribution(delta_pairs, delta_excluded);
        std::ofstream ds(a.delta_csv);
        if (!ds) throw ValueError("cannot write " + a.delta_csv);
        ds << "stage,dx_bin_low,dy_bin_low,count\n";
        for (const DeltaHistogram& h : hists) {
            for (int by = 0; by < DeltaHistogram::kBins; ++by) {
                for (int bx = 0; bx < DeltaHistogram::kBins; ++bx) {
                    const int c = h.counts[static_cast<std::size_t>(by) * DeltaHistogram::kBins + bx];
                    if (c == 0) continue;
                    ds << h.stage << "," << fmt_double(-1.0 + 0.05 * bx) << ","
                       << fmt_double(-1.0 + 0.05 * by) << "," << c << "\n";
                }
            }
        }
        ds << "# stage,mean_abs_dx,mean_abs_dy,matched,excluded\n";
        for (const DeltaHistogram& h : hists) {
            ds << "summary" << h.stage << "," << fmt_double(h.mean_abs_dx) << ","
               << fmt_double(h.mean_abs_dy) << "," << h.matched << "," << h.excluded << "\n";
        }
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct InferArgs {
    std::string checkpoint;
    std::string dataset;
    std::string out_jsonl;
    std::string overlay_dir;
};

inline int cmd_infer(const InferArgs& a) {
    Detector det = load_detector(a.checkpoint);
    const std::vector<Scene> scenes = load_scenes_or_fail(a.dataset);
    std::ofstream os(a.out_jsonl);
    if (!os) throw ValueError("cannot write " + a.out_jsonl);
    if (!a.overlay_dir.empty()) fs::create_directories(a.overlay_dir);
    for (const Scene& s : scenes) {
        const std::vector<Detection> dets = det.infer(s.image);
        json boxes = json::array();
        for (const Detection& d : dets) {
            boxes.push_back({{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
                             {"class", d.class_id},
                             {"score", d.score}});
        }
        os << json{{"id", s.id}, {"detections", boxes}}.dump() << "\n";
        if (!a.overlay_dir.empty()) {
            render_overlay(s, dets, (fs::path(a.overlay_dir) / (s.id + ".ppm")).string());
        }
    }
    std::printf("wrote detections for %zu scenes to %s\n", scenes.size(), a.out_jsonl.c_str());
    return kOk;
}

// ---------------------------------------------------------------------------
// recall
// ---------------------------------------------------------------------------

struct RecallArgs {
    std::string checkpoint;
    std::string dataset;
    std::string out_csv;
    std::vector<int> top_k = {1, 10, 100};
};

inline int cmd_recall(const RecallArgs& a) {
    Detector det = load_detector(a.checkpoint);
    const std::vector<Scene> scenes = load_scenes_or_fail(a.dataset);
    std::vector<std::vector<Box>> proposals(scenes.size());
    std::vector<std::vector<ScoredBox>> scored(scenes.size());
    std::vector<std::vector<Box>> gts(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        Detector::Forward f = det.forward(scenes[i].image);
        const std::vector<Box> boxes = boxes_from_array(f.initial_boxes);
        for (std::size_t q = 0; q < boxes.size(); ++q) {
            proposals[i].push_back(boxes[q]);
            const double score = det.config().mode == QueryMode::featurized
                                     ? f.query_set.scores[q]
                                     : 1.0; // learnable boxes carry no objectness
            scored[i].push_back(ScoredBox{boxes[q], score});
        }
        gts[i] = scenes[i].annotation.boxes;
    }
    const auto curve = recall_curve(proposals, gts, coco_iou_thresholds());
    const auto ar = ar_at_k(scored, gts, a.top_k);
    std::ofstream os(a.out_csv);
    if (!os) throw ValueError("cannot write " + a.out_csv);
    os << "kind,key,value\n";
    for (const auto& [t, v] : curve) os << "recall," << fmt_double(t) << "," << fmt_double(v) << "\n";
    for (const auto& [k, v] : ar) os << "ar," << k << "," << fmt_double(v) << "\n";
    std::printf("recall@0.5 %.4f (%zu scenes)\n", curve.at(0.5), scenes.size());
    return kOk;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
    std::string config_path;
    std::string checkpoint;
    std::string out_csv;
    std::vector<std::string> overrides;
    int runs = 50;
    int warmup = 5;
    int image_size = 64;
    std::uint64_t image_seed = 424242;
};

inline int cmd_bench(const BenchArgs& a) {
    ModelConfig cfg;
    std::unique_ptr<Detector> det;
    if (!a.checkpoint.empty()) {
        det = std::make_unique<Detector>(checkpoint_config(a.checkpoint));
        load_checkpoint(a.checkpoint, *det, nullptr);
    } else {
        if (a.config_path.empty()) {
            throw ValueError("bench: either --config or --checkpoint is required");
        }
        json j = load_json_file(a.config_path);
        for (const std::string& o : a.overrides) apply_override(j, o);
        det = std::make_unique<Detector>(run_config_from_json(j).model);
    }

    SceneSpec spec;
    spec.height = a.image_size;
    spec.width = a.image_size;
    const Scene scene = generate_scene(a.image_seed, spec);
    const LatencyBreakdown bd = bench_latency(*det, scene.image, a.warmup, a.runs);

    std::ofstream os(a.out_csv);
    if (!os) throw ValueError("cannot write " + a.out_csv);
    os << "component,mean_ms,std_ms\n";
    os << "backbone," << fmt_double(bd.backbone.mean_ms) << "," << fmt_double(bd.backbone.std_ms)
       << "\n";
    os << "query_generation," << fmt_double(bd.query_gen.mean_ms) << ","
       << fmt_double(bd.query_gen.std_ms) << "\n";
    for (std::size_t s = 0; s < bd.decoder_stages.size(); ++s) {
        os << "decoder_stage" << s << "," << fmt_double(bd.decoder_stages[s].mean_ms) << ","
           << fmt_double(bd.decoder_stages[s].std_ms) << "\n";
    }
    os << "decoder_total," << fmt_double(bd.decoder_total.mean_ms) << ","
       << fmt_double(bd.decoder_total.std_ms) << "\n";
    os << "total," << fmt_double(bd.total.mean_ms) << "," << fmt_double(bd.total.std_ms) << "\n";
    os << "noise_bound_ms," << fmt_double(bd.noise_bound_ms) << ",0\n";
    std::printf("total %.2f ms = backbone %.2f + query_gen %.2f + decoder %.2f (runs=%d)\n",
                bd.total.mean_ms, bd.backbone.mean_ms, bd.query_gen.mean_ms,
                bd.decoder_total.mean_ms, a.runs);
    return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradCheckArgs {
    int seeds = 20;
    double tolerance = 1e-5;
};

inline int cmd_gradcheck(const GradCheckArgs& a) {
    double worst = 0.0;
    const auto reports = run_gradcheck_suite(a.seeds, &worst);
    std::string worst_name;
    for (const GradCheckReport& r : reports) {
        if (r.worst == worst) worst_name = r.name;
        std::printf("%-24s max_rel_err %.3e\n", r.name.c_str(), r.worst);
    }
    std::printf("worst: %s at %.3e (tolerance %.1e, %d seeds per op)\n", worst_name.c_str(), worst,
                a.tolerance, a.seeds);
    return worst <= a.tolerance ? kOk : kNumeric;
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
    CLI::App app{"fqrcnn: a featurized-query object detector at desk scale"};
    app.require_subcommand(1);

    GenDataArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
    gen_cmd->add_option("--spec", gen.spec_path, "scene spec JSON file")->required();
    gen_cmd->add_option("--out", gen.out_dir, "output dataset directory")->required();
    gen_cmd->add_option("--count", gen.count, "number of scenes")->required();
    gen_cmd->add_option("--seed", gen.seed, "base seed");
    gen_cmd->add_flag("--force", gen.force, "allow writing into a non-empty directory");

    TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train", "train a detector from a run config");
    train_cmd->add_option("--config", train.config_path, "run config JSON file")->required();
    train_cmd->add_option("--set", train.overrides, "override config keys (key.path=value)");

    EvalArgs eval;
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--dataset", eval.dataset, "dataset directory")->required();
    eval_cmd->add_option("--out-csv", eval.out_csv, "metrics CSV path")->required();
    eval_cmd->add_option("--delta-csv", eval.delta_csv,
                         "also write per-stage proposal delta histograms");

    InferArgs infer;
    CLI::App* infer_cmd = app.add_subcommand("infer", "run inference and dump detections");
    infer_cmd->add_option("--checkpoint", infer.checkpoint, "checkpoint file")->required();
    infer_cmd->add_option("--dataset", infer.dataset, "dataset directory")->required();
    infer_cmd->add_option("--out-jsonl", infer.out_jsonl, "detections JSONL path")->required();
    infer_cmd->add_option("--overlay-dir", infer.overlay_dir, "write overlay pixmaps here");

    RecallArgs recall;
    CLI::App* recall_cmd =
        app.add_subcommand("recall", "proposal recall curve for the query generator");
    recall_cmd->add_option("--checkpoint", recall.checkpoint, "checkpoint file")->required();
    recall_cmd->add_option("--dataset", recall.dataset, "dataset directory")->required();
    recall_cmd->add_option("--out-csv", recall.out_csv, "recall CSV path")->required();
    recall_cmd->add_option("--topk", recall.top_k, "AR@K values");

    BenchArgs bench;
    CLI::App* bench_cmd = app.add_subcommand("bench", "per-component latency breakdown");
    bench_cmd->add_option("--config", bench.config_path, "run config JSON file");
    bench_cmd->add_option("--checkpoint", bench.checkpoint, "checkpoint file (overrides --config)");
    bench_cmd->add_option("--out-csv", bench.out_csv, "latency CSV path")->required();
    bench_cmd->add_option("--set", bench.overrides, "override config keys (key.path=value)");
    bench_cmd->add_option("--runs", bench.runs, "timed runs");
    bench_cmd->add_option("--warmup", bench.warmup, "warmup runs");
    bench_cmd->add_option("--image-size", bench.image_size, "synthetic image side");

    GradCheckArgs gc;
    CLI::App* gc_cmd = app.add_subcommand("gradcheck", "gradient check every primitive");
    gc_cmd->add_option("--seeds", gc.seeds, "random seeds per op");
    gc_cmd->add_option("--tolerance", gc.tolerance, "max relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen_data(gen);
        if (train_cmd->parsed()) return cmd_train(train);
        if (eval_cmd->parsed()) return cmd_eval(eval);
        if (infer_cmd->parsed()) return cmd_infer(infer);
        if (recall_cmd->parsed()) return cmd_recall(recall);
        if (bench_cmd->parsed()) return cmd_bench(bench);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    }
    return kUsage;
}

} // namespace fqr::cli
