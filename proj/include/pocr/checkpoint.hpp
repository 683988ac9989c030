#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pocr/common.hpp"
#include "pocr/nn.hpp"
#include "pocr/tensor.hpp"

namespace pocr {

// Single-file container: magic, format version, JSON header (model config,
// schedule state, anything else), then named float64 tensors. All integers
// little-endian. Loading a file and saving it again is byte-identical.
namespace ckpt {

constexpr char kMagic[8] = {'P', 'O', 'C', 'R', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

struct NamedTensor {
    Shape shape;
    std::vector<double> data;
};

struct File {
    nlohmann::json header;
    std::map<std::string, NamedTensor> tensors;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    POCR_CHECK_DATA(is.good(), "checkpoint: unexpected end of file");
    return v;
}

}  // namespace detail

inline void save(const std::string& path, const File& file) {
    // Write to a temp file first so an interrupted save never clobbers a
    // valid checkpoint.
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        POCR_CHECK_DATA(os.good(), "checkpoint: cannot open " + tmp);
        os.write(kMagic, sizeof(kMagic));
        detail::write_pod<uint32_t>(os, kVersion);
        std::string header = file.header.dump();
        detail::write_pod<uint64_t>(os, header.size());
        os.write(header.data(), static_cast<std::streamsize>(header.size()));
        detail::write_pod<uint64_t>(os, file.tensors.size());
        for (const auto& [name, t] : file.tensors) {
            detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
            for (int64_t d : t.shape) detail::write_pod<int64_t>(os, d);
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        }
        POCR_CHECK_DATA(os.good(), "checkpoint: write failed for " + tmp);
    }
    POCR_CHECK_DATA(std::rename(tmp.c_str(), path.c_str()) == 0,
                    "checkpoint: cannot move " + tmp + " to " + path);
}

inline File load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    POCR_CHECK_DATA(is.good(), "checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    POCR_CHECK_DATA(is.good() && std::memcmp(magic, kMagic, 8) == 0,
                    "checkpoint: bad magic in " + path);
    uint32_t version = detail::read_pod<uint32_t>(is);
    POCR_CHECK_DATA(version == kVersion,
                    "checkpoint: unsupported version " + std::to_string(version) + " in " + path);
    uint64_t header_len = detail::read_pod<uint64_t>(is);
    std::string header(header_len, '\0');
    is.read(header.data(), static_cast<std::streamsize>(header_len));
    POCR_CHECK_DATA(is.good(), "checkpoint: truncated header in " + path);

    File file;
    file.header = nlohmann::json::parse(header, nullptr, /*allow_exceptions=*/false);
    POCR_CHECK_DATA(!file.header.is_discarded(), "checkpoint: corrupt JSON header in " + path);

    uint64_t count = detail::read_pod<uint64_t>(is);
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t name_len = detail::read_pod<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t ndim = detail::read_pod<uint32_t>(is);
        NamedTensor t;
        for (uint32_t d = 0; d < ndim; ++d) t.shape.push_back(detail::read_pod<int64_t>(is));
        t.data.resize(static_cast<size_t>(numel(t.shape)));
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        POCR_CHECK_DATA(is.good(), "checkpoint: truncated tensor '" + name + "' in " + path);
        file.tensors.emplace(std::move(name), std::move(t));
    }
    return file;
}

// Report of a non-strict parameter load.
struct LoadReport {
    std::vector<std::string> loaded;
    std::vector<std::string> missing;     // in store, absent from file
    std::vector<std::string> unexpected;  // in file, absent from store
};

inline void pack_params(File& file, const ParamStore& store) {
    for (const auto& [name, t] : store.params) file.tensors[name] = {t.shape(), t.values()};
}

// strict: every store tensor must be present with the right shape and no
// extras allowed. Non-strict loads the intersection and reports the rest.
inline LoadReport unpack_params(const File& file, ParamStore& store, bool strict) {
    LoadReport report;
    std::vector<std::string> mismatched;
    for (auto& [name, t] : store.params) {
        auto it = file.tensors.find(name);
        if (it == file.tensors.end()) {
            report.missing.push_back(name);
            continue;
        }
        if (it->second.shape != t.shape()) {
            mismatched.push_back(name + ": file " + shape_str(it->second.shape) + " vs model " +
                                 shape_str(t.shape()));
            continue;
        }
        t.values() = it->second.data;
        report.loaded.push_back(name);
    }
    for (const auto& [name, t] : file.tensors)
        if (!store.params.count(name)) report.unexpected.push_back(name);

    if (!mismatched.empty()) {
        std::string msg = "checkpoint: parameter shape mismatch:";
        for (const auto& m : mismatched) msg += "\n  " + m;
        throw DataError(msg);
    }
    if (strict && (!report.missing.empty() || !report.unexpected.empty())) {
        std::string msg = "checkpoint: strict load failed:";
        for (const auto& m : report.missing) msg += "\n  missing " + m;
        for (const auto& m : report.unexpected) msg += "\n  unexpected " + m;
        throw DataError(msg);
    }
    return report;
}

}  // namespace ckpt
}  // namespace pocr
