#pragma once

// Command-line front end: train, eval, export, bench, report, verify-theory
// and mask-inspect.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "checkpoint.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "export.hpp"
#include "masks.hpp"
#include "theory.hpp"
#include "trainer.hpp"

namespace adjnet::cli {

inline constexpr const char* tool_version = "0.1.0";

inline std::string num(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

inline Shape parse_shape(const std::string& text) {
    Shape s;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(part, &used);
            if (used != part.size() || v < 1) throw std::invalid_argument(part);
            s.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError("bad shape '" + text + "': extents must be positive integers");
        }
    }
    if (s.empty()) {
        throw ConfigError("bad shape '" + text + "'");
    }
    return s;
}

inline std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

/// Data source options shared by train and eval.
struct DataArgs {
    std::string dataset = "cifar10";
    std::string path;
    std::string val_path;
    std::size_t train_per_class = 0;  // 0 keeps everything
    std::size_t val_per_class = 0;
};

inline Dataset load_split(const DataArgs& a, Split split) {
    const std::filesystem::path p = split == Split::test && !a.val_path.empty() ? a.val_path : a.path;
    if (split == Split::test && a.val_path.empty() && !std::filesystem::is_directory(p)) {
        throw ConfigError("--val is required when --data names a single file");
    }
    Dataset ds;
    if (a.dataset == "cifar10") {
        ds = load_cifar10(p, split);
    } else if (a.dataset == "mnist") {
        ds = load_mnist(p, split);
    } else {
        throw ConfigError("unknown dataset '" + a.dataset + "'");
    }
    const std::size_t k = split == Split::train ? a.train_per_class : a.val_per_class;
    return k > 0 ? subset_per_class(ds, k) : ds;
}

inline nlohmann::json config_to_json(const TrainConfig& c, const DataArgs& d) {
    return {{"mode", to_string(c.mode)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"base_lr", c.base_lr},
            {"warmup_fraction", c.warmup_fraction},
            {"seed", c.seed},
            {"loss",
             {{"schedule", to_string(c.loss.schedule)},
              {"c", c.loss.c},
              {"epsilon", c.loss.epsilon},
              {"granularity", to_string(c.loss.granularity)}}},
            {"dropout_keep", c.dropout_keep},
            {"net", to_json(c.net)},
            {"augment", c.augment},
            {"eval_every", c.eval_every},
            {"data",
             {{"dataset", d.dataset},
              {"path", d.path},
              {"val_path", d.val_path},
              {"train_per_class", d.train_per_class},
              {"val_per_class", d.val_per_class}}}};
}

inline void config_from_json(const nlohmann::json& j, TrainConfig& c, DataArgs& d) {
    c.mode = parse_train_mode(j.at("mode").get<std::string>());
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.base_lr = j.at("base_lr").get<double>();
    c.warmup_fraction = j.at("warmup_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& l = j.at("loss");
    c.loss.schedule = parse_schedule(l.at("schedule").get<std::string>());
    c.loss.c = l.at("c").get<double>();
    c.loss.epsilon = l.at("epsilon").get<double>();
    c.loss.granularity = parse_granularity(l.at("granularity").get<std::string>());
    c.dropout_keep = j.at("dropout_keep").get<double>();
    c.net = spec_from_json(j.at("net"));
    c.augment = j.at("augment").get<bool>();
    c.eval_every = j.at("eval_every").get<std::size_t>();
    const auto& dj = j.at("data");
    d.dataset = dj.at("dataset").get<std::string>();
    d.path = dj.at("path").get<std::string>();
    d.val_path = dj.at("val_path").get<std::string>();
    d.train_per_class = dj.at("train_per_class").get<std::size_t>();
    d.val_per_class = dj.at("val_per_class").get<std::size_t>();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + p.string());
    }
    out << text;
}

inline void print_report(std::ostream& out, const CompressionReport& r) {
    char line[160];
    std::snprintf(line, sizeof line, "%-28s %12s %12s %8s %8s\n", "layer", "weights_full", "weights_small",
                  "bn_full", "bn_small");
    out << line;
    for (const auto& l : r.layers) {
        std::snprintf(line, sizeof line, "%-28s %12zu %12zu %8zu %8zu\n", l.name.c_str(), l.weights_full,
                      l.weights_small, l.bn_full, l.bn_small);
        out << line;
    }
    out << "params_full " << r.params_full << "\n"
        << "params_full_excl_head " << r.params_full_excl_head << "\n"
        << "params_small_excl_head " << r.params_small_excl_head << "\n"
        << "params_small_incl_head " << r.params_small_incl_head << "\n"
        << "ratio_excl_head " << num(r.ratio_excl_head) << "\n"
        << "ratio_incl_head " << num(r.ratio_incl_head) << "\n";
    if (!std::isnan(r.latency_ratio)) {
        out << "latency_ratio " << num(r.latency_ratio) << "\n";
    }
}

inline std::string report_csv(const CompressionReport& r) {
    std::string s = "layer,weights_full,weights_small,bn_full,bn_small\n";
    for (const auto& l : r.layers) {
        s += l.name + "," + std::to_string(l.weights_full) + "," + std::to_string(l.weights_small) + "," +
             std::to_string(l.bn_full) + "," + std::to_string(l.bn_small) + "\n";
    }
    s += "total_excl_head," + std::to_string(r.params_full_excl_head) + "," +
         std::to_string(r.params_small_excl_head) + ",,\n";
    s += "total_incl_head," + std::to_string(r.params_full) + "," + std::to_string(r.params_small_incl_head) + ",,\n";
    return s;
}

/// Runs one command line. Returns the process exit code: 0 on success, 1 on
/// a runtime failure (or failed theory check), 2 on a usage error.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    CLI::App app{"adjnet: adjoined-network training, export and analysis", "adjnet"};
    app.require_subcommand(1);
    app.set_version_flag("--version", tool_version);

    // train
    TrainConfig tc;
    DataArgs data;
    std::uint32_t alpha = 1;
    double beta = 0.0;
    std::string mode = "adjoint", schedule = "quadratic", granularity = "epoch", out_dir, manifest_in;
    bool no_augment = false;
    auto* cmd_train = app.add_subcommand("train", "train a network and write metrics.csv, model.ckpt, manifest.json");
    cmd_train->add_option("--mode", mode, "standard | dropout | adjoint | teacher-student")->capture_default_str();
    cmd_train->add_option("--alpha", alpha, "structured mask factor a_alpha")->capture_default_str();
    cmd_train->add_option("--beta", beta, "fraction of random zeros r_beta")->capture_default_str();
    cmd_train->add_option("--schedule", schedule, "lambda schedule")->capture_default_str();
    cmd_train->add_option("--c", tc.loss.c, "lambda scale")->capture_default_str();
    cmd_train->add_option("--granularity", granularity, "epoch | step")->capture_default_str();
    cmd_train->add_option("--epochs", tc.epochs)->capture_default_str();
    cmd_train->add_option("--batch-size", tc.batch_size)->capture_default_str();
    cmd_train->add_option("--lr", tc.base_lr, "base learning rate")->capture_default_str();
    cmd_train->add_option("--warmup", tc.warmup_fraction, "warmup fraction of total steps")->capture_default_str();
    cmd_train->add_option("--dropout-keep", tc.dropout_keep, "keep probability in dropout mode")->capture_default_str();
    cmd_train->add_option("--seed", tc.seed)->capture_default_str();
    cmd_train->add_option("--dataset", data.dataset, "cifar10 | mnist")->capture_default_str();
    cmd_train->add_option("--data", data.path, "dataset directory or batch file");
    cmd_train->add_option("--val", data.val_path, "validation file (default: test split of --data)");
    cmd_train->add_option("--train-per-class", data.train_per_class, "first K training samples per class (0 = all)");
    cmd_train->add_option("--val-per-class", data.val_per_class, "first K validation samples per class (0 = all)");
    cmd_train->add_option("--eval-every", tc.eval_every)->capture_default_str();
    cmd_train->add_flag("--no-augment", no_augment, "disable flips and crops");
    cmd_train->add_option("--manifest", manifest_in, "re-run the configuration recorded in a manifest.json");
    cmd_train->add_option("--out", out_dir, "output directory")->required();

    // eval
    std::string in_ckpt, branch = "big", split = "test";
    std::uint64_t seed = 0;
    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    cmd_eval->add_option("--in", in_ckpt, "checkpoint")->required();
    cmd_eval->add_option("--dataset", data.dataset)->capture_default_str();
    cmd_eval->add_option("--data", data.path)->required();
    cmd_eval->add_option("--val", data.val_path);
    cmd_eval->add_option("--split", split, "train | test")->capture_default_str();
    cmd_eval->add_option("--per-class", data.val_per_class, "first K samples per class (0 = all)");
    cmd_eval->add_option("--branch", branch, "big | small")->capture_default_str();
    cmd_eval->add_option("--seed", seed);
    cmd_eval->add_option("--out", out_dir, "directory for eval.csv");

    // export
    std::string out_ckpt;
    auto* cmd_export = app.add_subcommand("export", "write the standalone small network");
    cmd_export->add_option("--in", in_ckpt, "adjoined checkpoint")->required();
    cmd_export->add_option("--out", out_ckpt, "exported checkpoint")->required();
    cmd_export->add_option("--seed", seed);

    // bench
    std::string full_ckpt, small_ckpt, shape_text = "8,3,32,32", csv_path;
    std::size_t warmup = 10, runs = 100;
    auto* cmd_bench = app.add_subcommand("bench", "compare inference latency of two checkpoints");
    cmd_bench->add_option("--full", full_ckpt)->required();
    cmd_bench->add_option("--small", small_ckpt)->required();
    cmd_bench->add_option("--shape", shape_text, "N,C,H,W")->capture_default_str();
    cmd_bench->add_option("--warmup", warmup)->capture_default_str();
    cmd_bench->add_option("--runs", runs)->capture_default_str();
    cmd_bench->add_option("--csv", csv_path, "write latency statistics here");
    cmd_bench->add_option("--seed", seed);

    // report
    std::string report_shape;
    auto* cmd_report = app.add_subcommand("report", "print the compression report of an adjoined checkpoint");
    cmd_report->add_option("--in", in_ckpt)->required();
    cmd_report->add_option("--csv", csv_path, "also write the per-layer table as CSV");
    cmd_report->add_option("--shape", report_shape, "measure latency ratio at this input shape");
    cmd_report->add_option("--seed", seed);

    // verify-theory
    std::size_t slots = 40;
    std::string theory_out = ".";
    std::uint64_t theory_seed = 7;
    auto* cmd_theory = app.add_subcommand("verify-theory", "check the induced-penalty derivatives numerically");
    cmd_theory->add_option("--seed", theory_seed)->capture_default_str();
    cmd_theory->add_option("--slots", slots, "slots per fixture and class (shared/unshared)")->capture_default_str();
    cmd_theory->add_option("--out", theory_out, "directory for theory_report.csv")->capture_default_str();

    // mask-inspect
    std::string mask_shape;
    auto* cmd_inspect = app.add_subcommand("mask-inspect", "print density and surviving channels of a mask");
    cmd_inspect->add_option("--shape", mask_shape, "C_out,K,K,C_in")->required();
    cmd_inspect->add_option("--alpha", alpha)->capture_default_str();
    cmd_inspect->add_option("--beta", beta)->capture_default_str();
    cmd_inspect->add_option("--seed", seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << tool_version << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "adjnet: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (*cmd_train) {
            const std::string started = utc_now();
            if (!manifest_in.empty()) {
                std::ifstream mf(manifest_in);
                if (!mf) throw ConfigError("cannot open manifest " + manifest_in);
                config_from_json(nlohmann::json::parse(mf).at("config"), tc, data);
            } else {
                tc.mode = parse_train_mode(mode);
                tc.loss.schedule = parse_schedule(schedule);
                tc.loss.granularity = parse_granularity(granularity);
                tc.augment = !no_augment;
                tc.net = NetworkSpec::desk_default(MaskSpec{alpha, beta, derive_seed(tc.seed, stream::masks)});
                if (data.path.empty()) throw ConfigError("--data is required");
            }
            tc.validate();
            const Dataset train_set = load_split(data, Split::train);
            const Dataset val_set = load_split(data, Split::test);
            TrainResult res = train(tc, train_set, val_set);

            const std::filesystem::path dir(out_dir);
            std::filesystem::create_directories(dir);
            std::string csv = MetricsRow::csv_header() + "\n";
            for (const auto& r : res.metrics) csv += r.csv() + "\n";
            write_text(dir / "metrics.csv", csv);
            Checkpoint ck = make_checkpoint(res.net, res.clock);
            ck.meta = {{"train_mode", to_string(tc.mode)}, {"seed", tc.seed}};
            save(ck, dir / "model.ckpt");
            nlohmann::json artifacts = {{"metrics", "metrics.csv"}, {"checkpoint", "model.ckpt"}};
            if (res.teacher) {
                save(make_checkpoint(*res.teacher, res.clock), dir / "teacher.ckpt");
                artifacts["teacher"] = "teacher.ckpt";
            }
            const nlohmann::json manifest = {{"tool", "adjnet"},
                                             {"version", tool_version},
                                             {"seed", tc.seed},
                                             {"config", config_to_json(tc, data)},
                                             {"artifacts", artifacts},
                                             {"threads", thread_count()},
                                             {"started", started},
                                             {"finished", utc_now()},
                                             {"aborted", res.aborted}};
            write_text(dir / "manifest.json", manifest.dump(2) + "\n");
            if (res.aborted) {
                err << "adjnet: train: " << res.abort_reason << "\n";
                return 1;
            }
            if (!res.metrics.empty()) {
                out << "final " << res.metrics.back().csv() << "\n";
            }
            return 0;
        }
        if (*cmd_eval) {
            Checkpoint ck = load(in_ckpt);
            Network<float> net = restore(ck);
            const Split sp = split == "train" ? Split::train : Split::test;
            if (split != "train" && split != "test") throw ConfigError("--split must be train or test");
            DataArgs d = data;
            d.train_per_class = data.val_per_class;
            const Dataset ds = load_split(d, sp);
            if (branch != "big" && branch != "small") throw ConfigError("--branch must be big or small");
            const EvalResult r = evaluate(net, ds, branch == "big" ? Branch::big : Branch::small);
            out << "top1 " << num(r.top1) << "\ntop5 " << num(r.top5) << "\nmean_ce " << num(r.mean_ce) << "\n";
            if (!out_dir.empty()) {
                std::filesystem::create_directories(out_dir);
                write_text(std::filesystem::path(out_dir) / "eval.csv",
                           "branch,top1,top5,mean_ce\n" + branch + "," + num(r.top1, 9) + "," + num(r.top5, 9) + "," +
                               num(r.mean_ce, 9) + "\n");
            }
            return 0;
        }
        if (*cmd_export) {
            Checkpoint ck = load(in_ckpt);
            Network<float> net = restore(ck);
            Network<float> small = export_small(net);
            Checkpoint sc = make_checkpoint(small, ck.clock);
            sc.meta = {{"exported_from", in_ckpt}};
            save(sc, out_ckpt);
            out << "exported " << count_params(small, true, false) << " nonzero parameters (from "
                << count_params(net, true, false) << ")\n";
            return 0;
        }
        if (*cmd_bench) {
            Network<float> full = restore(load(full_ckpt));
            Network<float> small = restore(load(small_ckpt));
            const Shape shape = parse_shape(shape_text);
            const LatencyStats a = benchmark(full, shape, warmup, runs, seed);
            const LatencyStats b = benchmark(small, shape, warmup, runs, seed);
            const double gain = a.median_ms / b.median_ms;
            out << "full  median_ms " << num(a.median_ms) << " iqr_ms " << num(a.iqr_ms) << "\n"
                << "small median_ms " << num(b.median_ms) << " iqr_ms " << num(b.iqr_ms) << "\n"
                << "speed_gain " << num(gain) << "\n";
            if (!csv_path.empty()) {
                write_text(csv_path, "net,median_ms,q1_ms,q3_ms,iqr_ms,runs\nfull," + num(a.median_ms, 9) + "," +
                                         num(a.q1_ms, 9) + "," + num(a.q3_ms, 9) + "," + num(a.iqr_ms, 9) + "," +
                                         std::to_string(a.runs) + "\nsmall," + num(b.median_ms, 9) + "," +
                                         num(b.q1_ms, 9) + "," + num(b.q3_ms, 9) + "," + num(b.iqr_ms, 9) + "," +
                                         std::to_string(b.runs) + "\nspeed_gain," + num(gain, 9) + ",,,,\n");
            }
            return 0;
        }
        if (*cmd_report) {
            Network<float> net = restore(load(in_ckpt));
            CompressionReport r = compression_report(net);
            if (!report_shape.empty()) {
                Network<float> small = export_small(net);
                const Shape shape = parse_shape(report_shape);
                r.latency_ratio = benchmark(net, shape, 10, 100, seed).median_ms /
                                  benchmark(small, shape, 10, 100, seed).median_ms;
            }
            print_report(out, r);
            if (!csv_path.empty()) write_text(csv_path, report_csv(r));
            return 0;
        }
        if (*cmd_theory) {
            auto fixtures = theory::make_probe_fixtures(theory_seed);
            theory::Tolerances tol;
            tol.min_engineered_unshared = 20;
            const auto rep = theory::verify_theorem(fixtures, slots, tol, theory_seed);
            std::filesystem::create_directories(theory_out);
            std::string csv =
                "fixture,layer,index,shared,fd_D1,analytic_D1,fd_D2,analytic_full_D2,simplified_penalty,"
                "dropped_terms,residual,passed\n";
            for (const auto& r : rep.rows) {
                csv += r.fixture + "," + std::to_string(r.slot.layer) + "," + std::to_string(r.slot.index) + "," +
                       (r.slot.shared ? "1" : "0") + "," + num(r.fd_D1, 12) + "," + num(r.analytic_D1, 12) + "," +
                       num(r.fd_D2, 12) + "," + num(r.analytic_full_D2, 12) + "," + num(r.simplified_penalty, 12) +
                       "," + num(r.dropped_terms, 12) + "," + num(r.residual, 12) + "," + (r.passed ? "1" : "0") +
                       "\n";
            }
            write_text(std::filesystem::path(theory_out) / "theory_report.csv", csv);
            out << "slots " << rep.rows.size() << " (shared " << rep.shared_slots << ", unshared "
                << rep.unshared_slots << "), skipped kink " << rep.skipped_kink << ", skipped small p "
                << rep.skipped_small_prob << "\n"
                << "max rel err D1 " << num(rep.max_d1_err, 3) << ", D2 " << num(rep.max_d2_err, 3)
                << ", residual " << num(rep.max_residual_err, 3) << "\n"
                << "engineered unshared slots with p' != 0: " << rep.engineered_unshared
                << ", max |penalty - D2| " << num(rep.max_penalty_err, 3) << "\n"
                << (rep.passed ? "PASS" : "FAIL: " + rep.failure) << "\n";
            return rep.passed ? 0 : 1;
        }
        if (*cmd_inspect) {
            const Shape shape = parse_shape(mask_shape);
            const Mask m = build_mask(shape, MaskSpec{alpha, beta, seed});
            const auto live = surviving_out_channels(m);
            out << "density " << num(density(m)) << "\nsurviving channels ";
            for (std::size_t i = 0; i < live.size(); ++i) out << (i ? "," : "") << live[i];
            out << "\nzeros " << m.count_zeros() << " of " << m.numel() << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        err << "adjnet: " << e.what() << "\n";
        return 1;
    }
    err << app.help();
    return 2;
}

}  // namespace adjnet::cli
