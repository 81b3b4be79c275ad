// trimlab: pretrain, train downstream, trim, sweep and benchmark from the
// command line.
//
// Exit codes: 0 ok, 1 unexpected, 2 configuration / input, 3 verification
// failure, 4 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "trimlab/config.hpp"
#include "trimlab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace trimlab;

namespace {

struct VerificationFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::string> precision;
    std::optional<int> threads;
};

struct Paths {
    std::string encoder, plan, masked, base, trimmed, ckpt;
    std::string split = "test";
    std::size_t index = 0, count = 1, probes = 64, reps = 30, warmup = 10;
    std::vector<double> grid = default_t_grid();
    std::vector<double> targets = default_targets();
};

RunConfig load(const Globals& g) {
    RunConfig c = g.config.empty() ? run_config_from_json(Json::object()) : load_run_config(g.config);
    if (g.precision) c.runtime.precision = *g.precision;
    if (g.threads) c.runtime.threads = *g.threads;
    return c;
}

/// Loads the config, applies the global flags and writes the resolved copy.
RunConfig resolve(const Globals& g, std::optional<Mode> mode = std::nullopt) {
    RunConfig c = load(g);
    if (g.seed) c.train.seed = *g.seed;
    if (!g.out.empty()) c.output = g.out;
    if (mode) c.train.mode = *mode;
    c.train.validate();
    fs::create_directories(c.output);
    write_json_file((fs::path(c.output) / "resolved_config.json").string(), to_json(c));
    return c;
}

std::string out_file(const RunConfig& c, const std::string& name) { return (fs::path(c.output) / name).string(); }

const char* metric_name(TaskKind t) {
    switch (t) {
        case TaskKind::tone_class: return "w_acc";
        case TaskKind::chord_tags: return "mAP";
        case TaskKind::pretext: return "masked_mse";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("--split: expected train, val or test");
}

ModelSpec without_head(ModelSpec s) {
    s.head.reset();
    return s;
}

/// Frozen encoder from a pretrain checkpoint with the config's head attached.
template <class T>
Model<T> load_encoder(const std::string& path, const RunConfig& c) {
    if (path.empty()) throw ConfigError("--encoder is required");
    const auto ckpt = load_checkpoint(path);
    auto m = model_from_checkpoint<T>(ckpt);
    if (!m.encoder_frozen) throw ConfigError(path + ": encoder is not frozen; run pretrain first");
    if (!(without_head(m.spec) == without_head(c.model)))
        throw ConfigError(path + ": encoder spec does not match the model section of the config");
    m.spec.head = c.model.head;
    if (!m.spec.head) throw ConfigError("model.head: downstream training needs a head");
    reinit_head(m, c.train.seed);
    return m;
}

void print_history(const HistoryRecord& h) {
    std::cout << "step " << h.step << "  L " << h.loss << "  metric " << h.metric;
    if (h.sparsity_loss) std::cout << "  active " << h.active_fraction << "  trim " << h.trim_ratio;
    std::cout << std::endl;
}

template <class T>
Json metrics_json(const RunConfig& c, const TrainResult<T>& r) {
    const auto pc = r.model.parameter_count();
    Json j{{"mode", to_string(c.train.mode)},
           {"task", to_string(c.task.task)},
           {"metric", metric_name(c.train.mode == Mode::pretrain ? TaskKind::pretext : c.task.task)},
           {"seed", c.train.seed},
           {"steps", c.train.steps},
           {"final", to_json(r.final_eval)},
           {"best", to_json(r.best)},
           {"params", {{"encoder", pc.encoder}, {"head", pc.head}}},
           {"skipped_steps", r.skipped_steps},
           {"diagnostics", r.diagnostics}};
    j["lambda"] = nullptr;
    for (const auto& h : r.history)
        if (h.lambda) j["lambda"] = *h.lambda;
    return j;
}

template <class T>
void write_run(const RunConfig& c, const TrainResult<T>& r, const std::string& ckpt_name, bool with_masks) {
    write_text(out_file(c, "history.jsonl"), history_jsonl(r.history));
    write_json_file(out_file(c, "metrics.json"), metrics_json(c, r));
    Json meta{{"mode", to_string(c.train.mode)}, {"seed", c.train.seed}};
    save_checkpoint(out_file(c, ckpt_name), make_checkpoint(r.model, with_masks ? &r.masks : nullptr, nullptr, meta));
    std::cout << "wrote " << out_file(c, ckpt_name) << std::endl;
}

struct Splits {
    Dataset train, val, test;
};

Splits load_splits(const TaskSpec& t) {
    return {make_dataset(t, Split::train), make_dataset(t, Split::val), make_dataset(t, Split::test)};
}

// ----- verbs -----------------------------------------------------------------------

template <class T>
int cmd_pretrain(const Globals& g) {
    auto c = resolve(g, Mode::pretrain);
    TaskSpec pt = c.task;
    pt.task = TaskKind::pretext;
    const auto train = make_dataset(pt, Split::train), val = make_dataset(pt, Split::val);
    auto model = build_backbone<T>(without_head(c.model), c.train.seed);
    auto r = run_pretrain(std::move(model), train, val, c.train, print_history);
    write_run(c, r, "encoder.ckpt", false);
    return 0;
}

template <class T>
int cmd_downstream(const Globals& g, const Paths& p, Mode mode) {
    auto c = resolve(g, mode);
    if (c.task.task == TaskKind::pretext) throw ConfigError("task.task: downstream modes need tone_class or chord_tags");
    const auto d = load_splits(c.task);
    Model<T> model;
    if (mode == Mode::scratch) {
        if (p.plan.empty()) throw ConfigError("--plan is required for scratch");
        const auto plan = trim_plan_from_json(read_json_file(p.plan));
        if (!(without_head(plan.source) == without_head(c.model)))
            throw ConfigError(p.plan + ": plan source does not match the model section of the config");
        model = scratch_model<T>(plan, c.train.seed);
    } else {
        model = load_encoder<T>(p.encoder, c);
    }
    auto r = run_downstream(std::move(model), {&d.train, &d.val, &d.test}, c.train, print_history);
    const char* names[] = {"pretrain.ckpt", "probe.ckpt", "masked.ckpt", "ssf.ckpt", "scratch.ckpt"};
    write_run(c, r, names[static_cast<int>(mode)], mode == Mode::mask);
    if (mode == Mode::ssf) {
        // modulation parameters live beside the model checkpoint
        Json j = Json::object();
        for (const auto& s : r.ssf)
            j[s.site_id] = {{"gamma", s.gamma.value.template cast<double>().values()},
                            {"beta", s.beta.value.template cast<double>().values()}};
        write_json_file(out_file(c, "ssf_params.json"), j);
    }
    std::cout << metric_name(c.task.task) << " (test, final) " << r.final_eval.test_metric << std::endl;
    return 0;
}

template <class T>
int cmd_trim(const Globals& g, const Paths& p) {
    if (p.masked.empty()) throw ConfigError("--masked is required");
    const RunConfig c = resolve(g);
    const auto ckpt = load_checkpoint(p.masked);
    if (!ckpt.has_masks()) throw ConfigError(p.masked + ": checkpoint carries no mask logits");
    const auto model = model_from_checkpoint<T>(ckpt);
    const auto masks = materialize(masks_from_checkpoint<T>(ckpt));
    const auto plan = plan_trim(model.spec, masks);
    auto [trimmed, report] = apply_trim(model, plan);

    Rng rng(seed_mix({c.train.seed, 0x7E57}));
    const std::size_t frames = FeatureSpec{}.frames(c.task.clip_length);
    Tensor<T> probes(Shape{p.probes, frames, model.spec.input_dim});
    for (auto& v : probes.values()) v = static_cast<T>(rng.uniform(0.0, 3.0));
    const double dev = verify_equivalence(model, masks, trimmed, plan, probes).max();
    report.max_deviation = dev;
    report.bytes_before = fs::file_size(p.masked);
    report.bytes_after = save_checkpoint(out_file(c, "trimmed.ckpt"), make_checkpoint(trimmed, nullptr, nullptr,
                                                                                      Json{{"trimmed_from", p.masked}}));
    write_json_file(out_file(c, "trim_report.json"), to_json(report));
    write_json_file(out_file(c, "plan.json"), to_json(plan));
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << "trimming ratio " << report.trimming_ratio << ", max deviation " << dev << std::endl;
    const double bound = std::is_same_v<T, double> ? 1e-10 : 1e-5;
    if (!(dev <= bound)) throw VerificationFailure("trimmed model deviates by " + std::to_string(dev));
    return 0;
}

template <class T>
int cmd_sweep(const Globals& g, const Paths& p) {
    auto c = resolve(g, Mode::mask);
    const auto d = load_splits(c.task);
    const auto encoder = load_encoder<T>(p.encoder, c);
    const Shape in{FeatureSpec{}.frames(c.task.clip_length), c.model.input_dim};
    std::vector<SweepRow> rows;
    for (double t : p.grid) {
        auto cfg = c.train;
        cfg.sparsity.t = t;
        auto r = run_downstream(encoder, {&d.train, &d.val, &d.test}, cfg);
        const auto keep = keep_counts(materialize(r.masks));
        const auto spec = derive_trimmed_spec(encoder.spec, keep);
        rows.push_back({t, r.final_eval.trim_ratio, r.final_eval.test_metric, count_params(spec).encoder, count_costs(spec, in).macs});
        write_text(out_file(c, "sweep_t" + format_double(t) + ".jsonl"), history_jsonl(r.history));
        std::cout << "t " << t << "  trim " << rows.back().trim_ratio << "  metric " << rows.back().metric << std::endl;
    }
    write_text(out_file(c, "sweep.csv"), sweep_csv(rows, select_nearest(rows, p.targets)));
    if (rows.size() > 1)
        std::cout << "non-increasing adjacent pairs " << monotone_pairs(rows) << "/" << rows.size() - 1 << std::endl;
    return 0;
}

int cmd_bench(const Globals& g, const Paths& p) {
    if (p.base.empty() || p.trimmed.empty()) throw ConfigError("--base and --trimmed are required");
    const RunConfig c = resolve(g);
    const auto base = model_from_checkpoint<float>(load_checkpoint(p.base));
    const auto trimmed = model_from_checkpoint<float>(load_checkpoint(p.trimmed));
    const std::size_t frames = FeatureSpec{}.frames(c.task.clip_length);
    Rng rng(seed_mix({c.train.seed, 0xBE7C}));
    Tensor<float> x(Shape{1, frames, base.spec.input_dim});
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform(0.0, 3.0));
    auto rb = count_costs(base.spec, x.shape()), rt = count_costs(trimmed.spec, x.shape());
    rb.bytes = fs::file_size(p.base);
    rt.bytes = fs::file_size(p.trimmed);
    auto [tb, tt] = time_pair(base, trimmed, x, p.warmup, p.reps);
    rb.timing = tb;
    rt.timing = tt;
    rb.speedup = 1.0;
    rt.speedup = speedup(tb, tt);
    write_json_file(out_file(c, "bench.json"), Json{{"base", to_json(rb)}, {"trimmed", to_json(rt)}});
    const std::string table = "model, size, flops, macs, speedup\n" + comparison_row("base", rb) + "\n" + comparison_row("trimmed", rt) + "\n";
    write_text(out_file(c, "bench.csv"), table);
    std::cout << table;
    return 0;
}

template <class T>
int cmd_eval(const Globals& g, const Paths& p) {
    if (p.ckpt.empty()) throw ConfigError("--ckpt is required");
    const RunConfig c = resolve(g);
    const auto ckpt = load_checkpoint(p.ckpt);
    const auto model = model_from_checkpoint<T>(ckpt);
    if (!model.spec.head) throw ConfigError(p.ckpt + ": checkpoint has no head to evaluate");
    const auto data = make_dataset(c.task, split_from_string(p.split));
    std::optional<AssignmentHook<T>> hook;
    if (ckpt.has_masks()) hook.emplace(model.spec, materialize(masks_from_checkpoint<T>(ckpt)));
    const auto r = evaluate(model, hook ? &*hook : nullptr, data);
    write_json_file(out_file(c, "eval.json"), Json{{"metric", metric_name(c.task.task)},
                                                   {"split", p.split},
                                                   {"value", r.value},
                                                   {"masked", ckpt.has_masks()},
                                                   {"diagnostics", r.diagnostics}});
    std::cout << metric_name(c.task.task) << " " << r.value << std::endl;
    return 0;
}

int cmd_export_wav(const Globals& g, const Paths& p) {
    const RunConfig c = resolve(g);
    const auto split = split_from_string(p.split);
    for (std::size_t i = p.index; i < p.index + p.count; ++i) {
        const auto clip = generate(c.task, split, i);
        const auto path = out_file(c, std::string(to_string(c.task.task)) + "_" + p.split + "_" + std::to_string(i) + ".wav");
        write_wav(path, clip.wave, static_cast<std::uint32_t>(c.task.sample_rate));
        std::cout << path << std::endl;
    }
    return 0;
}

template <class T>
int dispatch(const std::string& verb, const Globals& g, const Paths& p) {
    if (verb == "pretrain") return cmd_pretrain<T>(g);
    if (verb == "probe") return cmd_downstream<T>(g, p, Mode::probe);
    if (verb == "mask-train") return cmd_downstream<T>(g, p, Mode::mask);
    if (verb == "ssf") return cmd_downstream<T>(g, p, Mode::ssf);
    if (verb == "scratch") return cmd_downstream<T>(g, p, Mode::scratch);
    if (verb == "trim") return cmd_trim<T>(g, p);
    if (verb == "sweep") return cmd_sweep<T>(g, p);
    if (verb == "bench") return cmd_bench(g, p);
    if (verb == "eval") return cmd_eval<T>(g, p);
    if (verb == "export-wav") return cmd_export_wav(g, p);
    throw ConfigError("unknown command " + verb);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mask-based structured trimming of frozen encoders"};
    app.require_subcommand(1);
    Globals g;
    Paths p;
    app.add_option("--config", g.config, "run configuration (JSON)");
    app.add_option("--seed", g.seed, "training seed (overrides train.seed)");
    app.add_option("--out", g.out, "output directory (overrides output)");
    app.add_option("--precision", g.precision, "arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--threads", g.threads, "worker threads (kernels run single-threaded)")->check(CLI::PositiveNumber);

    app.add_subcommand("pretrain", "masked-frame pretraining of the encoder");
    for (const char* verb : {"probe", "mask-train", "ssf"})
        app.add_subcommand(verb, std::string(verb) + " training on a frozen encoder")
            ->add_option("--encoder", p.encoder, "pretrained encoder checkpoint")
            ->required();
    app.add_subcommand("scratch", "train the trimmed architecture from a fresh init")
        ->add_option("--plan", p.plan, "plan.json written by trim")
        ->required();
    auto* trim = app.add_subcommand("trim", "remove masked units and verify the result");
    trim->add_option("--masked", p.masked, "checkpoint written by mask-train")->required();
    trim->add_option("--probes", p.probes, "number of random verification inputs");
    auto* sweep = app.add_subcommand("sweep", "mask training over a threshold grid");
    sweep->add_option("--encoder", p.encoder, "pretrained encoder checkpoint")->required();
    sweep->add_option("--grid", p.grid, "threshold values");
    sweep->add_option("--targets", p.targets, "trimming-ratio targets");
    auto* bench = app.add_subcommand("bench", "compare size, MACs and latency of two checkpoints");
    bench->add_option("--base", p.base, "base checkpoint")->required();
    bench->add_option("--trimmed", p.trimmed, "trimmed checkpoint")->required();
    bench->add_option("--reps", p.reps, "timed repetitions")->check(CLI::Range(3, 100000));
    bench->add_option("--warmup", p.warmup, "discarded warmup runs");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    eval->add_option("--ckpt", p.ckpt, "checkpoint")->required();
    eval->add_option("--split", p.split, "train, val or test");
    auto* wav = app.add_subcommand("export-wav", "write synthetic clips as 16-bit WAV");
    wav->add_option("--split", p.split, "train, val or test");
    wav->add_option("--index", p.index, "first clip index");
    wav->add_option("--count", p.count, "number of clips");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    const std::string verb = app.get_subcommands().front()->get_name();
    try {
        const auto rt = load(g).runtime;
        if (rt.threads != 1) std::cerr << "note: kernels are single-threaded; threads = " << rt.threads << " has no effect\n";
        return rt.precision == "f64" ? dispatch<double>(verb, g, p) : dispatch<float>(verb, g, p);
    } catch (const VerificationFailure& e) {
        std::cerr << "verification failed: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return 2;
    } catch (const PlanError& e) {
        std::cerr << "plan error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
