#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "tensor.hpp"

namespace gmoe {

using json = nlohmann::json;

// Tensor container used for checkpoints and feature files:
//
//   <UTF-8 JSON header> '\0' <payload>
//
// The header lists tensors in payload order as {"name", "shape"}, the dtype
// tag "f64le", the payload size in bytes and a free-form "meta" object. The
// payload is the concatenation of every tensor's values as little-endian
// IEEE-754 doubles in row-major order.

inline constexpr const char* kTensorFileFormat = "gmoe-tensors";
inline constexpr int kTensorFileSchemaVersion = 1;
inline constexpr const char* kDtypeTag = "f64le";

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The header is not valid JSON or lacks required fields.
class MalformedHeaderError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Declared shapes disagree with the payload size or with expected shapes.
class ShapeMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

/// The file ends before the declared payload does.
class TruncatedPayloadError : public FormatError {
public:
    using FormatError::FormatError;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct TensorFile {
    std::vector<NamedTensor> tensors;
    json meta = json::object();

    const Tensor& get(const std::string& name) const {
        for (const NamedTensor& t : tensors) {
            if (t.name == name) return t.tensor;
        }
        throw ShapeMismatchError("tensor file has no tensor named '" + name + "'");
    }
    bool contains(const std::string& name) const {
        for (const NamedTensor& t : tensors) {
            if (t.name == name) return true;
        }
        return false;
    }
};

namespace detail {

inline void append_le(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>(bits & 0xFF));
        bits >>= 8;
    }
}

inline double read_le(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
    return std::bit_cast<double>(bits);
}

}  // namespace detail

inline std::string encode_tensor_file(const TensorFile& file) {
    json header;
    header["format"] = kTensorFileFormat;
    header["schema_version"] = kTensorFileSchemaVersion;
    header["dtype"] = kDtypeTag;
    header["tensors"] = json::array();
    std::size_t count = 0;
    for (const NamedTensor& t : file.tensors) {
        header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
        count += t.tensor.size();
    }
    header["payload_bytes"] = count * 8;
    header["meta"] = file.meta;
    std::string out = header.dump();
    out.push_back('\0');
    out.reserve(out.size() + count * 8);
    for (const NamedTensor& t : file.tensors) {
        for (double v : t.tensor.data()) detail::append_le(out, v);
    }
    return out;
}

inline TensorFile decode_tensor_file(const std::string& bytes) {
    const std::size_t sep = bytes.find('\0');
    if (sep == std::string::npos) throw MalformedHeaderError("tensor file: missing header terminator");
    json header;
    try {
        header = json::parse(bytes.substr(0, sep));
    } catch (const json::exception& e) {
        throw MalformedHeaderError(std::string("tensor file: header is not valid JSON: ") + e.what());
    }
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array() ||
        !header.contains("payload_bytes") || !header["payload_bytes"].is_number_unsigned()) {
        throw MalformedHeaderError("tensor file: header needs a 'tensors' array and 'payload_bytes'");
    }
    if (header.value("dtype", std::string()) != kDtypeTag) {
        throw MalformedHeaderError("tensor file: unsupported dtype '" + header.value("dtype", std::string()) + "'");
    }
    const int version = header.value("schema_version", 0);
    if (version != kTensorFileSchemaVersion) {
        throw MalformedHeaderError("tensor file: unsupported schema version " + std::to_string(version));
    }

    struct Entry {
        std::string name;
        Shape shape;
    };
    std::vector<Entry> entries;
    std::size_t declared_values = 0;
    for (const json& t : header["tensors"]) {
        if (!t.is_object() || !t.contains("name") || !t["name"].is_string() || !t.contains("shape") || !t["shape"].is_array()) {
            throw MalformedHeaderError("tensor file: every tensor entry needs 'name' and 'shape'");
        }
        Entry e{t["name"].get<std::string>(), {}};
        for (const json& d : t["shape"]) {
            if (!d.is_number_unsigned() || d.get<std::size_t>() == 0) {
                throw MalformedHeaderError("tensor file: tensor '" + e.name + "' has an invalid dimension");
            }
            e.shape.push_back(d.get<std::size_t>());
        }
        declared_values += shape_size(e.shape);
        entries.push_back(std::move(e));
    }

    const std::size_t payload_bytes = header["payload_bytes"].get<std::size_t>();
    const std::size_t available = bytes.size() - sep - 1;
    if (available < payload_bytes) {
        throw TruncatedPayloadError("tensor file: payload has " + std::to_string(available) + " bytes, header declares " +
                                    std::to_string(payload_bytes));
    }
    if (available > payload_bytes) {
        throw ShapeMismatchError("tensor file: " + std::to_string(available - payload_bytes) + " trailing bytes after payload");
    }
    if (declared_values * 8 != payload_bytes) {
        throw ShapeMismatchError("tensor file: declared shapes hold " + std::to_string(declared_values) +
                                 " values but the payload holds " + std::to_string(payload_bytes / 8));
    }

    TensorFile file;
    if (header.contains("meta")) file.meta = header["meta"];
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + sep + 1;
    for (Entry& e : entries) {
        std::vector<double> values(shape_size(e.shape));
        for (double& v : values) {
            v = detail::read_le(p);
            p += 8;
        }
        file.tensors.push_back({std::move(e.name), Tensor(std::move(e.shape), std::move(values))});
    }
    return file;
}

inline void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string bytes = encode_tensor_file(file);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_tensor_file(bytes);
}

// ---------------------------------------------------------------------------
// Checkpoints: parameters by name

inline TensorFile to_tensor_file(const std::vector<Parameter>& params, json meta = json::object()) {
    TensorFile file;
    file.meta = std::move(meta);
    for (const Parameter& p : params) file.tensors.push_back({p.name, p.value});
    return file;
}

/// Copies checkpoint tensors into `params`, matching by name. Every parameter
/// must be present with an identical shape.
inline void load_parameters(const TensorFile& file, std::vector<Parameter>& params) {
    for (Parameter& p : params) {
        if (!file.contains(p.name)) throw ShapeMismatchError("checkpoint is missing parameter '" + p.name + "'");
        const Tensor& t = file.get(p.name);
        if (t.shape() != p.value.shape()) {
            throw ShapeMismatchError("checkpoint parameter '" + p.name + "' has shape " + to_string(t.shape()) +
                                     ", model expects " + to_string(p.value.shape()));
        }
        p.value = t;
        p.grad = Tensor(t.shape());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<Parameter>& params, json meta = json::object()) {
    write_tensor_file(path, to_tensor_file(params, std::move(meta)));
}

inline json load_checkpoint(const std::filesystem::path& path, std::vector<Parameter>& params) {
    TensorFile file = read_tensor_file(path);
    load_parameters(file, params);
    return file.meta;
}

/// Hash over parameter names and values; stable across runs and platforms.
inline std::uint64_t parameter_hash(const std::vector<Parameter>& params) {
    TensorHasher h;
    for (const Parameter& p : params) {
        h.add_bytes(p.name.data(), p.name.size());
        h.add(p.value);
    }
    return h.value();
}

}  // namespace gmoe
