#pragma once

// Synthetic audio-like tasks and the log-magnitude spectrogram front end.
//
// Every clip is a pure function of (seed, task, split, index), so datasets can
// be regenerated anywhere instead of shipped.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trimlab/core.hpp"
#include "trimlab/tensor.hpp"

namespace trimlab {

enum class TaskKind { tone_class, chord_tags, pretext };
enum class Split { train, val, test };

inline const char* to_string(TaskKind t) {
    switch (t) {
        case TaskKind::tone_class: return "tone_class";
        case TaskKind::chord_tags: return "chord_tags";
        case TaskKind::pretext: return "pretext";
    }
    return "?";
}

inline TaskKind task_from_string(const std::string& s) {
    if (s == "tone_class") return TaskKind::tone_class;
    if (s == "chord_tags") return TaskKind::chord_tags;
    if (s == "pretext") return TaskKind::pretext;
    throw ConfigError("task.task: unknown task '" + s + "' (expected tone_class, chord_tags or pretext)");
}

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

struct TaskSpec {
    TaskKind task = TaskKind::tone_class;
    double sample_rate = 8000.0;
    std::size_t clip_length = 4000;
    double noise_std = 0.05;
    std::size_t train_size = 2000;
    std::size_t val_size = 500;
    std::size_t test_size = 500;
    std::uint64_t seed = 0;

    static constexpr std::size_t kToneClasses = 10;
    static constexpr std::size_t kChordTags = 8;
    static constexpr double kTagProbability = 0.35;

    std::size_t split_size(Split s) const {
        switch (s) {
            case Split::train: return train_size;
            case Split::val: return val_size;
            case Split::test: return test_size;
        }
        return 0;
    }

    /// Number of classes (tone_class), tags (chord_tags), or 0 (pretext).
    std::size_t outputs() const {
        switch (task) {
            case TaskKind::tone_class: return kToneClasses;
            case TaskKind::chord_tags: return kChordTags;
            case TaskKind::pretext: return 0;
        }
        return 0;
    }

    void validate() const {
        if (!(sample_rate > 0)) throw ConfigError("task.sample_rate must be positive");
        if (clip_length == 0) throw ConfigError("task.clip_length must be positive");
        if (!(noise_std >= 0)) throw ConfigError("task.noise_std must be >= 0");
    }
};

struct FeatureSpec {
    std::size_t frame = 256;
    std::size_t hop = 128;
    std::size_t bins = 128;

    std::size_t frames(std::size_t length) const { return length < frame ? 0 : 1 + (length - frame) / hop; }
};

struct Clip {
    std::vector<float> wave;
    int label = -1;                   // tone_class
    std::vector<std::uint8_t> tags;  // chord_tags
};

inline double tone_frequency(std::size_t cls) { return 110.0 + 55.0 * static_cast<double>(cls); }
inline double chord_frequency(std::size_t k) { return 130.0 * std::pow(2.0, static_cast<double>(k) / 4.0); }

/// The clip at `index` of `split`. Throws std::out_of_range for a bad index.
inline Clip generate(const TaskSpec& spec, Split split, std::size_t index) {
    if (index >= spec.split_size(split))
        throw std::out_of_range(std::string("generate: index ") + std::to_string(index) + " outside " + to_string(split) +
                                " split of size " + std::to_string(spec.split_size(split)));
    Rng rng(seed_mix({spec.seed, static_cast<std::uint64_t>(spec.task) + 1, static_cast<std::uint64_t>(split) + 1, index}));
    const std::size_t n = spec.clip_length;
    std::vector<double> x(n, 0.0);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    auto add_tone = [&](double freq, double amp) {
        const double phase = rng.uniform(0.0, two_pi);
        const double w = two_pi * freq / spec.sample_rate;
        for (std::size_t i = 0; i < n; ++i) x[i] += amp * std::sin(w * static_cast<double>(i) + phase);
    };
    Clip clip;
    switch (spec.task) {
        case TaskKind::tone_class: {
            const std::size_t c = index % TaskSpec::kToneClasses;
            clip.label = static_cast<int>(c);
            const double f0 = tone_frequency(c);
            add_tone(f0, 1.0);
            add_tone(2 * f0, 0.5);
            add_tone(3 * f0, 0.25);
            break;
        }
        case TaskKind::chord_tags: {
            clip.tags.resize(TaskSpec::kChordTags);
            for (std::size_t k = 0; k < TaskSpec::kChordTags; ++k) clip.tags[k] = rng.bernoulli(TaskSpec::kTagProbability);
            for (std::size_t k = 0; k < TaskSpec::kChordTags; ++k)
                if (clip.tags[k]) add_tone(chord_frequency(k), 0.5);
            break;
        }
        case TaskKind::pretext: {
            const std::size_t parts = 1 + rng.below(4);
            for (std::size_t p = 0; p < parts; ++p) add_tone(rng.uniform(80.0, 1600.0), rng.uniform(0.2, 1.0));
            break;
        }
    }
    for (auto& v : x) v += spec.noise_std * rng.normal();
    clip.wave.assign(x.begin(), x.end());
    return clip;
}

/// log1p |DFT| of each rectangular-window frame, bins 0..bins-1, as (frames, bins).
class Featurizer {
   public:
    explicit Featurizer(FeatureSpec spec = {}) : spec_(spec), cos_(spec.frame, spec.bins), sin_(spec.frame, spec.bins) {
        constexpr double two_pi = 2.0 * std::numbers::pi;
        for (std::size_t t = 0; t < spec.frame; ++t)
            for (std::size_t k = 0; k < spec.bins; ++k) {
                // reduce k*t mod frame first so the angle stays exact for large products
                const double a = two_pi * static_cast<double>((k * t) % spec.frame) / static_cast<double>(spec.frame);
                cos_(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = std::cos(a);
                sin_(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = std::sin(a);
            }
    }

    const FeatureSpec& spec() const { return spec_; }

    Tensor<float> operator()(std::span<const float> wave) const {
        const std::size_t frames = spec_.frames(wave.size());
        if (frames == 0)
            throw std::invalid_argument("featurize: waveform of " + std::to_string(wave.size()) +
                                        " samples is shorter than one frame (" + std::to_string(spec_.frame) + ")");
        Mat framed(frames, spec_.frame);
        for (std::size_t f = 0; f < frames; ++f)
            for (std::size_t t = 0; t < spec_.frame; ++t)
                framed(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(t)) = wave[f * spec_.hop + t];
        const Mat re = framed * cos_;
        const Mat im = framed * sin_;
        Tensor<float> out(Shape{frames, spec_.bins});
        for (std::size_t f = 0; f < frames; ++f)
            for (std::size_t k = 0; k < spec_.bins; ++k) {
                const auto r = static_cast<Eigen::Index>(f), c = static_cast<Eigen::Index>(k);
                out[f * spec_.bins + k] = static_cast<float>(std::log1p(std::hypot(re(r, c), im(r, c))));
            }
        return out;
    }

   private:
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    FeatureSpec spec_;
    Mat cos_, sin_;
};

inline Tensor<float> featurize(std::span<const float> wave, const FeatureSpec& spec = {}) { return Featurizer(spec)(wave); }

/// A featurised split held in memory.
struct Dataset {
    TaskKind task = TaskKind::tone_class;
    Tensor<float> features;  // (clips, frames, bins)
    std::vector<int> labels;
    Tensor<float> tags;  // (clips, tags)

    std::size_t size() const { return features.rank() ? features.dim(0) : 0; }
    std::size_t frames() const { return features.dim(1); }
    std::size_t bins() const { return features.dim(2); }

    /// Rows `idx` of the features, (idx.size(), frames, bins).
    Tensor<float> batch_features(std::span<const std::size_t> idx) const {
        const std::size_t per = frames() * bins();
        Tensor<float> out(Shape{idx.size(), frames(), bins()});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(features.data() + idx[i] * per, per, out.data() + i * per);
        return out;
    }
    std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
        std::vector<int> out;
        for (auto i : idx) out.push_back(labels.at(i));
        return out;
    }
    Tensor<float> batch_tags(std::span<const std::size_t> idx) const {
        const std::size_t k = tags.dim(1);
        Tensor<float> out(Shape{idx.size(), k});
        for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(tags.data() + idx[i] * k, k, out.data() + i * k);
        return out;
    }
};

inline Dataset make_dataset(const TaskSpec& spec, Split split, const FeatureSpec& fspec = {}) {
    spec.validate();
    const Featurizer feat(fspec);
    const std::size_t n = spec.split_size(split), frames = fspec.frames(spec.clip_length);
    Dataset d;
    d.task = spec.task;
    d.features = Tensor<float>(Shape{n, frames, fspec.bins});
    if (spec.task == TaskKind::chord_tags) d.tags = Tensor<float>(Shape{n, TaskSpec::kChordTags});
    const std::size_t per = frames * fspec.bins;
    for (std::size_t i = 0; i < n; ++i) {
        const auto clip = generate(spec, split, i);
        const auto f = feat(clip.wave);
        std::copy(f.data(), f.data() + per, d.features.data() + i * per);
        if (spec.task == TaskKind::tone_class) d.labels.push_back(clip.label);
        if (spec.task == TaskKind::chord_tags)
            for (std::size_t k = 0; k < TaskSpec::kChordTags; ++k) d.tags[i * TaskSpec::kChordTags + k] = clip.tags[k];
    }
    return d;
}

/// 16-bit little-endian mono PCM. Samples are scaled down if they exceed
/// full scale, never clipped.
inline void write_wav(const std::string& path, std::span<const float> wave, std::uint32_t sample_rate) {
    float peak = 1.0f;
    for (float v : wave) peak = std::max(peak, std::abs(v));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_wav: cannot open " + path);
    auto put = [&](std::uint64_t v, int bytes) {
        for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
    };
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(wave.size() * 2);
    out.write("RIFF", 4);
    put(36 + data_bytes, 4);
    out.write("WAVEfmt ", 8);
    put(16, 4);
    put(1, 2);  // PCM
    put(1, 2);  // mono
    put(sample_rate, 4);
    put(sample_rate * 2, 4);
    put(2, 2);
    put(16, 2);
    out.write("data", 4);
    put(data_bytes, 4);
    for (float v : wave) {
        const auto s = static_cast<std::int16_t>(std::lround(v / peak * 32767.0f));
        put(static_cast<std::uint16_t>(s), 2);
    }
    if (!out) throw std::runtime_error("write_wav: write failed for " + path);
}

}  // namespace trimlab
