#pragma once

// Single-file checkpoints:
//   "TRIMLAB1" | u64 LE header length | JSON header | f32 LE payload
// The header carries the format version, the model spec and a manifest of
// (name, dtype, shape, offset, length) in payload order. Mask logits and
// optimizer moments travel as ordinary tensors named "mask.*" and "adam.*".

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "trimlab/serialize.hpp"

namespace trimlab {

constexpr char kCheckpointMagic[] = "TRIMLAB1";
constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

struct Checkpoint {
    Json header;  // everything except the manifest, which is rebuilt on save
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
    ModelSpec spec() const { return model_spec_from_json(header.at("spec"), "checkpoint.spec"); }
    bool has_masks() const { return header.contains("masks") && !header["masks"].empty(); }
};

/// Packs a model and optional mask logits / optimizer state. `meta` is stored
/// verbatim under "meta".
template <class T>
Checkpoint make_checkpoint(const Model<T>& model, const std::type_identity_t<std::vector<MaskSite<T>>>* masks = nullptr,
                           const std::type_identity_t<AdamState<T>>* optimizer = nullptr, Json meta = Json::object()) {
    Checkpoint c;
    c.header["format_version"] = kCheckpointVersion;
    c.header["spec"] = to_json(model.spec);
    c.header["encoder_frozen"] = model.encoder_frozen;
    c.header["meta"] = std::move(meta);
    model.for_each_parameter([&](const Parameter<T>& p) { c.tensors.push_back({p.name, p.value.template cast<float>()}); });
    Json site_ids = Json::array();
    if (masks)
        for (const auto& s : *masks) {
            site_ids.push_back(s.site_id);
            c.tensors.push_back({s.logits.name, s.logits.value.template cast<float>()});
        }
    c.header["masks"] = site_ids;
    if (optimizer && optimizer->step + optimizer->skipped > 0) {
        c.header["optimizer"] = Json{{"kind", "adam"}, {"step", optimizer->step}, {"skipped", optimizer->skipped},
                                     {"params", optimizer->names}};
        for (std::size_t i = 0; i < optimizer->names.size(); ++i) {
            c.tensors.push_back({"adam.m." + optimizer->names[i], optimizer->m[i].template cast<float>()});
            c.tensors.push_back({"adam.v." + optimizer->names[i], optimizer->v[i].template cast<float>()});
        }
    }
    return c;
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

}  // namespace detail

/// Full file contents. Deterministic: the header is dumped with sorted keys.
inline std::string serialize(const Checkpoint& c) {
    Json header = c.header;
    Json manifest = Json::array();
    std::uint64_t offset = 0;
    std::set<std::string> seen;
    for (const auto& t : c.tensors) {
        if (!seen.insert(t.name).second) throw CheckpointError("duplicate tensor name " + t.name);
        const std::uint64_t len = 4 * t.value.size();
        manifest.push_back(Json{{"name", t.name}, {"dtype", "f32"}, {"shape", t.value.shape()}, {"offset", offset}, {"length", len}});
        offset += len;
    }
    header["tensors"] = manifest;
    const std::string h = header.dump();
    std::string out(kCheckpointMagic, 8);
    detail::put_u64(out, h.size());
    out += h;
    out.reserve(out.size() + offset);
    for (const auto& t : c.tensors)
        for (float v : t.value.values()) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
        }
    return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
    if (bytes.size() < 16 || bytes.compare(0, 8, kCheckpointMagic) != 0) throw CheckpointError("not a trimlab checkpoint (bad magic)");
    const std::uint64_t hlen = detail::get_u64(bytes, 8);
    if (hlen > bytes.size() - 16) throw CheckpointError("header length exceeds file size");
    Checkpoint c;
    try {
        c.header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const Json::parse_error& e) {
        throw CheckpointError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!c.header.is_object() || c.header.value("format_version", 0) != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint format version");
    if (!c.header.contains("tensors") || !c.header["tensors"].is_array()) throw CheckpointError("header has no tensor manifest");
    const std::size_t base = 16 + hlen, payload = bytes.size() - base;
    std::uint64_t expect = 0;
    for (const auto& e : c.header["tensors"]) {
        const auto name = e.at("name").get<std::string>();
        if (e.at("dtype") != "f32") throw CheckpointError(name + ": unsupported dtype");
        const auto shape = e.at("shape").get<Shape>();
        const auto off = e.at("offset").get<std::uint64_t>(), len = e.at("length").get<std::uint64_t>();
        if (off != expect) throw CheckpointError(name + ": offsets must be contiguous and non-overlapping");
        if (len != 4 * shape_numel(shape)) throw CheckpointError(name + ": length does not match shape");
        if (off + len > payload) throw CheckpointError(name + ": data runs past end of file");
        Tensor<float> t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[base + off + 4 * i + b])) << (8 * b);
            t[i] = std::bit_cast<float>(bits);
        }
        c.tensors.push_back({name, std::move(t)});
        expect = off + len;
    }
    if (expect != payload) throw CheckpointError("trailing bytes after payload");
    c.header.erase("tensors");
    return c;
}

inline std::uint64_t save_checkpoint(const std::string& path, const Checkpoint& c) {
    const auto bytes = serialize(c);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + path);
    return bytes.size();
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

/// Rebuilds the model; every parameter of the spec must be present with its shape.
template <class T>
Model<T> model_from_checkpoint(const Checkpoint& c) {
    Model<T> m = build_backbone<T>(c.spec(), 0);
    m.for_each_parameter([&](Parameter<T>& p) {
        const auto* t = c.find(p.name);
        if (!t) throw CheckpointError("checkpoint lacks parameter " + p.name);
        if (t->value.shape() != p.value.shape())
            throw CheckpointError(p.name + ": shape " + shape_str(t->value.shape()) + " does not match spec " + shape_str(p.value.shape()));
        p.value = t->value.template cast<T>();
    });
    if (c.header.value("encoder_frozen", false)) m.freeze_encoder();
    return m;
}

template <class T>
std::vector<MaskSite<T>> masks_from_checkpoint(const Checkpoint& c) {
    if (!c.has_masks()) throw CheckpointError("checkpoint carries no mask logits");
    auto sites = make_mask_sites<T>(c.spec());
    for (auto& s : sites) {
        const auto* t = c.find(s.logits.name);
        if (!t) throw CheckpointError("checkpoint lacks mask logits for site " + s.site_id);
        if (t->value.shape() != s.logits.value.shape()) throw CheckpointError(s.logits.name + ": wrong shape");
        s.logits.value = t->value.template cast<T>();
    }
    return sites;
}

}  // namespace trimlab
