#pragma once

#include <cstring>
#include <fstream>

#include "polypflow/autograd.hpp"
#include "polypflow/config.hpp"

namespace pf {

// Single-file checkpoint archive:
//   magic line, schema version line, config text block, epoch / step counters,
//   then a named-array table (raw little-endian doubles). Parameter values and
//   optimizer moments round-trip bitwise.
namespace checkpoint {

constexpr const char* kMagic = "POLYPFLOW-CKPT";
constexpr const char* kSchemaVersion = "1";

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
constexpr std::uint64_t kMaxBlob = 1ull << 32;  // sanity bound against corrupt lengths

inline std::string read_str(std::istream& is) {
    const std::uint64_t n = read_u64(is);
    if (!is || n > kMaxBlob) throw std::runtime_error("corrupt checkpoint: bad string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(s.size()));
    return s;
}
inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_u64(os, t.shape.size());
    for (int d : t.shape) write_u64(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}
inline Tensor read_tensor(std::istream& is) {
    const std::uint64_t ndim = read_u64(is);
    if (!is || ndim > 8) throw std::runtime_error("corrupt checkpoint: bad tensor rank");
    std::vector<int> shape(ndim);
    for (auto& d : shape) {
        const std::uint64_t v = read_u64(is);
        if (!is || v > (1u << 28)) throw std::runtime_error("corrupt checkpoint: bad dimension");
        d = static_cast<int>(v);
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    return t;
}

}  // namespace detail

struct Header {
    std::string schema_version;
    std::string config_text;
    int epoch = 0;
    std::uint64_t opt_step = 0;
};

inline void save(const std::string& path, const ParamRegistry& params, const TrainConfig& cfg,
                 int epoch, std::uint64_t opt_step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    detail::write_str(os, kMagic);
    detail::write_str(os, kSchemaVersion);
    detail::write_str(os, cfg.to_kv().dump());
    detail::write_u64(os, static_cast<std::uint64_t>(epoch));
    detail::write_u64(os, opt_step);
    detail::write_u64(os, params.items.size());
    for (const Param* p : params.items) {
        detail::write_str(os, p->name);
        os.put(p->trainable ? 1 : 0);
        detail::write_tensor(os, p->value);
        const bool has_opt = !p->adam_m.shape.empty();
        os.put(has_opt ? 1 : 0);
        if (has_opt) {
            detail::write_tensor(os, p->adam_m);
            detail::write_tensor(os, p->adam_v);
        }
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

// Loads into an existing registry; every archive entry must match a registered
// parameter of the same shape.
inline Header load(const std::string& path, ParamRegistry& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    if (detail::read_str(is) != kMagic)
        throw std::runtime_error("not a PolypFlow checkpoint: " + path);
    Header h;
    h.schema_version = detail::read_str(is);
    if (h.schema_version != kSchemaVersion)
        throw std::runtime_error("checkpoint schema version mismatch: file has '" +
                                 h.schema_version + "', this build reads '" + kSchemaVersion +
                                 "'");
    h.config_text = detail::read_str(is);
    h.epoch = static_cast<int>(detail::read_u64(is));
    h.opt_step = detail::read_u64(is);
    const std::uint64_t n = detail::read_u64(is);
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name = detail::read_str(is);
        is.get();  // trainable flag, informational
        Tensor value = detail::read_tensor(is);
        Param* p = params.find(name);
        if (!p) throw std::runtime_error("checkpoint entry has no matching parameter: " + name);
        if (p->value.shape != value.shape)
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": file " +
                                     value.shape_str() + " vs model " + p->value.shape_str());
        p->value = std::move(value);
        if (is.get() == 1) {
            p->adam_m = detail::read_tensor(is);
            p->adam_v = detail::read_tensor(is);
        }
    }
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    return h;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    if (detail::read_str(is) != kMagic)
        throw std::runtime_error("not a PolypFlow checkpoint: " + path);
    std::string version = detail::read_str(is);
    if (version != kSchemaVersion)
        throw std::runtime_error("checkpoint schema version mismatch: file has '" + version +
                                 "', this build reads '" + kSchemaVersion + "'");
    std::istringstream cfg_in(detail::read_str(is));
    return TrainConfig::from_kv(KeyValueConfig::parse(cfg_in));
}

}  // namespace checkpoint
}  // namespace pf
