#pragma once
// Versioned binary checkpoint:
//   "OMNITFT\0" | u32 version | u64 header length | header JSON
//   | u32 tensor count | per tensor: u32 name length, name, u64 rows, u64 cols, f64 data
// Integers and doubles are little-endian; tensors are stored in name order.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "omnitft/error.hpp"
#include "omnitft/ingest.hpp"
#include "omnitft/model.hpp"
#include "omnitft/params.hpp"
#include "omnitft/schema.hpp"

namespace omnitft {

constexpr char kCheckpointMagic[8] = {'O', 'M', 'N', 'I', 'T', 'F', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    DatasetSchema schema;
    Normalizer normalizer;
    FillValues fill;
    /// Free-form run metadata (split seed, regime thresholds, ...).
    nlohmann::json meta = nlohmann::json::object();
    ParameterSet params;

    [[nodiscard]] Model model() const { return Model(schema, config, params, normalizer); }

    static Checkpoint from_model(const Model& m, FillValues fill, nlohmann::json meta = nlohmann::json::object()) {
        return {m.config(), m.schema(), m.normalizer(), std::move(fill), std::move(meta), m.params()};
    }
};

namespace detail {

inline nlohmann::json nan_as_null(const std::vector<double>& v) {
    auto j = nlohmann::json::array();
    for (double x : v) j.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
    return j;
}
inline std::vector<double> null_as_nan(const nlohmann::json& j) {
    std::vector<double> v;
    for (const auto& x : j) v.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
    return v;
}

template <class T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T>);
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    unsigned char b[sizeof(T)];
    is.read(reinterpret_cast<char*>(b), sizeof(T));
    require(static_cast<std::size_t>(is.gcount()) == sizeof(T), Errc::BadCheckpoint, "truncated checkpoint");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<T>(v);
}

} // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
    nlohmann::json h;
    h["model_config"] = c.config;
    h["schema"] = c.schema;
    h["normalizer"] = c.normalizer;
    h["fill"] = {{"temporal", detail::nan_as_null(c.fill.temporal)}, {"statics", detail::nan_as_null(c.fill.statics)}};
    h["meta"] = c.meta;
    const std::string header = h.dump();

    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint64_t>(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(c.params.size()));
    for (const auto& [name, t] : c.params.tensors()) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_le<std::uint64_t>(os, t.rows());
        detail::put_le<std::uint64_t>(os, t.cols());
        for (double x : t.data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(x));
    }
    require(os.good(), Errc::IoError, "checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[8];
    is.read(magic, sizeof magic);
    require(is.gcount() == 8 && std::memcmp(magic, kCheckpointMagic, 8) == 0, Errc::BadCheckpoint, "not a checkpoint");
    const auto version = detail::get_le<std::uint32_t>(is);
    require(version == kCheckpointVersion, Errc::BadCheckpoint, "unsupported checkpoint version " + std::to_string(version));
    const auto hlen = detail::get_le<std::uint64_t>(is);
    require(hlen < (1ULL << 32), Errc::BadCheckpoint, "implausible header length");
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    require(static_cast<std::uint64_t>(is.gcount()) == hlen, Errc::BadCheckpoint, "truncated header");

    Checkpoint c;
    try {
        const auto h = nlohmann::json::parse(header);
        c.config = h.at("model_config").get<ModelConfig>();
        c.schema = validate_schema(h.at("schema").get<DatasetSchema>());
        c.normalizer = h.at("normalizer").get<Normalizer>();
        c.fill.temporal = detail::null_as_nan(h.at("fill").at("temporal"));
        c.fill.statics = detail::null_as_nan(h.at("fill").at("statics"));
        c.meta = h.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::BadCheckpoint, std::string("bad checkpoint header: ") + e.what());
    }
    const auto n = detail::get_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto len = detail::get_le<std::uint32_t>(is);
        require(len < 4096, Errc::BadCheckpoint, "implausible tensor name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        require(static_cast<std::uint32_t>(is.gcount()) == len, Errc::BadCheckpoint, "truncated tensor name");
        const auto rows = detail::get_le<std::uint64_t>(is);
        const auto cols = detail::get_le<std::uint64_t>(is);
        require(rows * cols < (1ULL << 32), Errc::BadCheckpoint, "implausible tensor size");
        diff::Tensor t(rows, cols);
        for (double& x : t.data()) x = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
        c.params.add(name, std::move(t));
    }
    return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), Errc::IoError, "cannot write " + path);
    write_checkpoint(os, c);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), Errc::IoError, "cannot read " + path);
    return read_checkpoint(is);
}

} // namespace omnitft
