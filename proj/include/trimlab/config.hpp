#pragma once

// Run configuration files: sections task, model, train, sparsity, runtime,
// output.

#include <fstream>
#include <string>

#include "trimlab/serialize.hpp"

namespace trimlab {

struct Runtime {
    std::string precision = "f32";  // f32 or f64
    int threads = 1;
};

struct RunConfig {
    TaskSpec task;
    ModelSpec model = default_spec(Backbone::conformer_t);
    TrainConfig train;  // train.sparsity mirrors the sparsity section
    Runtime runtime;
    std::string output = "out";
};

inline Json to_json(const RunConfig& c) {
    return Json{{"task", to_json(c.task)},
                {"model", to_json(c.model)},
                {"train", to_json(c.train)},
                {"sparsity", to_json(c.train.sparsity)},
                {"runtime", {{"precision", c.runtime.precision}, {"threads", c.runtime.threads}}},
                {"output", c.output}};
}

/// Missing sections and keys take their defaults. The head's output count
/// follows the task unless given explicitly, in which case it must agree.
inline RunConfig run_config_from_json(const Json& j) {
    detail::require_object(j, "config");
    detail::reject_unknown(j, "config", {"task", "model", "train", "sparsity", "runtime", "output"});
    RunConfig c;
    if (j.contains("task")) c.task = task_spec_from_json(j["task"]);
    if (j.contains("model")) c.model = model_spec_from_json(j["model"]);
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
    if (j.contains("sparsity")) c.train.sparsity = sparsity_from_json(j["sparsity"]);
    detail::read(j, "config", "output", c.output);
    if (j.contains("runtime")) {
        const auto& r = j["runtime"];
        detail::require_object(r, "runtime");
        detail::reject_unknown(r, "runtime", {"precision", "threads"});
        detail::read(r, "runtime", "precision", c.runtime.precision);
        detail::read(r, "runtime", "threads", c.runtime.threads);
        if (c.runtime.precision != "f32" && c.runtime.precision != "f64")
            throw ConfigError("runtime.precision: expected \"f32\" or \"f64\"");
        if (c.runtime.threads < 1) throw ConfigError("runtime.threads: must be >= 1");
    }

    const std::size_t outputs = c.task.outputs();
    const bool explicit_outputs = j.contains("model") && j["model"].contains("head") && j["model"]["head"].is_object() &&
                                  j["model"]["head"].contains("outputs");
    if (c.model.head && outputs > 0) {
        if (explicit_outputs && c.model.head->outputs != outputs)
            throw ConfigError("model.head.outputs: " + std::to_string(c.model.head->outputs) + " disagrees with task " +
                              to_string(c.task.task) + " (" + std::to_string(outputs) + " outputs)");
        c.model.head->outputs = outputs;
    }
    c.train.validate();
    return c;
}

inline Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ConfigError(path + ": not valid JSON (" + e.what() + ")");
    }
}

inline RunConfig load_run_config(const std::string& path) { return run_config_from_json(read_json_file(path)); }

inline void write_json_file(const std::string& path, const Json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << '\n';
}

}  // namespace trimlab
