#pragma once
// ACET v1 flat tensor container.
//
//   bytes 0..3    magic "ACET"
//   bytes 4..7    version, u32 little-endian (1)
//   bytes 8..15   header length H, u64 little-endian
//   bytes 16..    H bytes of UTF-8 JSON: name -> {dtype, shape, offset, nbytes},
//                 plus an optional "__metadata__" string map
//   data section  starts at the first multiple of 8 at or after 16+H; tensor
//                 offsets are relative to it, 8-aligned, values little-endian
//                 row-major.
//
// JSON keys are written in lexicographic order, tensors are laid out in the
// same order, and all padding bytes are zero, so equal checkpoints always
// serialize to identical files.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "acemerge/error.hpp"

namespace acemerge {

enum class DType { f32, f64 };

inline std::string_view dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

inline constexpr std::size_t kMaxTensorRank = 4;

/// Shaped row-major array of float32 or float64 values.
class Tensor {
public:
    using Shape = std::vector<std::uint64_t>;

    Tensor() : data_(std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
        validate();
    }
    Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
        validate();
    }

    /// Builds a tensor of the requested dtype from float64 values (cast if f32).
    static Tensor from_f64(Shape shape, std::span<const double> values, DType dtype) {
        if (dtype == DType::f64) return Tensor(std::move(shape), std::vector<double>(values.begin(), values.end()));
        std::vector<float> narrow(values.size());
        std::transform(values.begin(), values.end(), narrow.begin(), [](double v) { return static_cast<float>(v); });
        return Tensor(std::move(shape), std::move(narrow));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    DType dtype() const noexcept { return std::holds_alternative<std::vector<float>>(data_) ? DType::f32 : DType::f64; }

    std::size_t numel() const noexcept {
        return std::visit([](const auto& v) { return v.size(); }, data_);
    }
    std::size_t nbytes() const noexcept { return numel() * dtype_size(dtype()); }

    template <class T>
    std::span<const T> values() const {
        return std::get<std::vector<T>>(data_);
    }

    /// Values promoted to float64.
    std::vector<double> to_f64() const {
        return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
    }

    /// Bitwise equality: same dtype, same shape, identical value bytes (NaN payloads included).
    friend bool operator==(const Tensor& a, const Tensor& b) {
        if (a.shape_ != b.shape_ || a.dtype() != b.dtype()) return false;
        return std::visit(
            [&](const auto& lhs) {
                using V = std::decay_t<decltype(lhs)>;
                const auto& rhs = std::get<V>(b.data_);
                return lhs.size() == rhs.size() &&
                       (lhs.empty() || std::memcmp(lhs.data(), rhs.data(), lhs.size() * sizeof(lhs[0])) == 0);
            },
            a.data_);
    }

private:
    void validate() const {
        if (shape_.size() > kMaxTensorRank)
            throw Error(ErrorKind::validation, "tensor rank " + std::to_string(shape_.size()) + " exceeds 4");
        std::uint64_t count = 1;
        for (auto extent : shape_) {
            if (extent != 0 && count > std::numeric_limits<std::uint64_t>::max() / extent)
                throw Error(ErrorKind::validation, "tensor extent product overflows 64 bits");
            count *= extent;
        }
        if (count != numel())
            throw Error(ErrorKind::validation, "tensor data length " + std::to_string(numel()) +
                                                   " does not match shape product " + std::to_string(count));
    }

    Shape shape_;
    std::variant<std::vector<float>, std::vector<double>> data_;
};

/// Named tensors plus free-form string metadata. std::map keeps names in
/// byte-lexicographic order, which is the iteration and serialization order.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

enum class ContainerFault {
    bad_magic,
    unsupported_version,
    truncated_header,
    malformed_header,
    unknown_dtype,
    bad_shape,
    size_mismatch,
    misaligned_offset,
    truncated_data,
    overlapping_offsets,
};

inline std::string_view fault_message(ContainerFault f) {
    switch (f) {
    case ContainerFault::bad_magic: return "bad magic";
    case ContainerFault::unsupported_version: return "unsupported version";
    case ContainerFault::truncated_header: return "truncated header";
    case ContainerFault::malformed_header: return "malformed header";
    case ContainerFault::unknown_dtype: return "unknown dtype";
    case ContainerFault::bad_shape: return "bad shape";
    case ContainerFault::size_mismatch: return "size mismatch";
    case ContainerFault::misaligned_offset: return "misaligned offset";
    case ContainerFault::truncated_data: return "truncated data";
    case ContainerFault::overlapping_offsets: return "overlapping offsets";
    }
    return "container error";
}

class ContainerError : public Error {
public:
    ContainerError(ContainerFault fault, const std::string& detail)
        : Error(ErrorKind::io, std::string(fault_message(fault)) + (detail.empty() ? "" : ": " + detail)),
          fault_(fault) {}

    ContainerFault fault() const noexcept { return fault_; }

private:
    ContainerFault fault_;
};

namespace detail {

inline constexpr std::array<char, 4> kMagic = {'A', 'C', 'E', 'T'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::string_view kMetadataKey = "__metadata__";

inline std::uint64_t align8(std::uint64_t n) {
    if (n > std::numeric_limits<std::uint64_t>::max() - 7)
        throw Error(ErrorKind::validation, "container offset overflows 64 bits");
    return (n + 7) & ~std::uint64_t{7};
}

template <class U>
void put_le(std::vector<char>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const char* p) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        value |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
    return value;
}

template <class T>
void append_values(std::vector<char>& out, std::span<const T> values) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : values) put_le(out, std::bit_cast<Bits>(v));
}

template <class T>
std::vector<T> decode_values(const char* p, std::size_t count) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    std::vector<T> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<T>(get_le<Bits>(p + i * sizeof(T)));
    return values;
}

inline std::uint64_t checked_nbytes(const Tensor::Shape& shape, DType dtype) {
    std::uint64_t n = dtype_size(dtype);
    for (auto e : shape) {
        if (e != 0 && n > std::numeric_limits<std::uint64_t>::max() / e)
            throw ContainerError(ContainerFault::size_mismatch, "tensor byte length overflows 64 bits");
        n *= e;
    }
    return n;
}

} // namespace detail

/// Serializes a checkpoint into ACET v1 bytes.
inline std::vector<char> encode_container(const Checkpoint& ckpt) {
    nlohmann::json index = nlohmann::json::object();
    std::uint64_t cursor = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        if (name.empty()) throw Error(ErrorKind::validation, "tensor names must be non-empty");
        if (name == detail::kMetadataKey) throw Error(ErrorKind::validation, "tensor name collides with __metadata__");
        cursor = detail::align8(cursor);
        const std::uint64_t nbytes = tensor.nbytes();
        if (cursor > std::numeric_limits<std::uint64_t>::max() - nbytes)
            throw Error(ErrorKind::validation, "tensor too large for 64-bit offsets: " + name);
        index[name] = {{"dtype", dtype_name(tensor.dtype())},
                       {"shape", tensor.shape()},
                       {"offset", cursor},
                       {"nbytes", nbytes}};
        cursor += nbytes;
    }
    if (!ckpt.metadata.empty()) index[std::string(detail::kMetadataKey)] = ckpt.metadata;

    std::string header;
    try {
        header = index.dump();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::validation, std::string("header is not valid UTF-8: ") + e.what());
    }

    std::vector<char> out;
    out.reserve(16 + header.size() + 8 + cursor);
    for (char c : detail::kMagic) out.push_back(c);
    detail::put_le<std::uint32_t>(out, detail::kVersion);
    detail::put_le<std::uint64_t>(out, header.size());
    out.insert(out.end(), header.begin(), header.end());
    out.resize(detail::align8(out.size()), '\0');

    const std::size_t data_start = out.size();
    for (const auto& [name, tensor] : ckpt.tensors) {
        out.resize(data_start + detail::align8(out.size() - data_start), '\0');
        if (tensor.dtype() == DType::f32)
            detail::append_values(out, tensor.values<float>());
        else
            detail::append_values(out, tensor.values<double>());
    }
    return out;
}

/// Parses ACET v1 bytes. Each structural defect maps to its own ContainerFault.
inline Checkpoint decode_container(std::span<const char> bytes) {
    using detail::get_le;
    if (bytes.size() < 4 || !std::equal(detail::kMagic.begin(), detail::kMagic.end(), bytes.begin()))
        throw ContainerError(ContainerFault::bad_magic, "");
    if (bytes.size() < 16) throw ContainerError(ContainerFault::truncated_header, "file shorter than 16 bytes");
    const auto version = get_le<std::uint32_t>(bytes.data() + 4);
    if (version != detail::kVersion)
        throw ContainerError(ContainerFault::unsupported_version, std::to_string(version));
    const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
    if (header_len > bytes.size() - 16)
        throw ContainerError(ContainerFault::truncated_header,
                             "header length " + std::to_string(header_len) + " exceeds file size");

    nlohmann::json index;
    try {
        index = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ContainerError(ContainerFault::malformed_header, e.what());
    }
    if (!index.is_object()) throw ContainerError(ContainerFault::malformed_header, "header is not a JSON object");

    const std::uint64_t data_start = detail::align8(16 + header_len);
    const std::uint64_t data_len = bytes.size() > data_start ? bytes.size() - data_start : 0;

    Checkpoint ckpt;
    struct Extent {
        std::uint64_t offset, nbytes;
        std::string name;
    };
    std::vector<Extent> extents;

    for (const auto& [name, entry] : index.items()) {
        if (name == detail::kMetadataKey) {
            if (!entry.is_object()) throw ContainerError(ContainerFault::malformed_header, "__metadata__ is not an object");
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string())
                    throw ContainerError(ContainerFault::malformed_header, "metadata value for '" + k + "' is not a string");
                ckpt.metadata.emplace(k, v.get<std::string>());
            }
            continue;
        }
        if (name.empty()) throw ContainerError(ContainerFault::malformed_header, "empty tensor name");
        if (!entry.is_object()) throw ContainerError(ContainerFault::malformed_header, "entry '" + name + "' is not an object");

        const auto dtype_it = entry.find("dtype");
        if (dtype_it == entry.end() || !dtype_it->is_string())
            throw ContainerError(ContainerFault::unknown_dtype, name);
        const auto dtype_str = dtype_it->get<std::string>();
        DType dtype;
        if (dtype_str == "f32")
            dtype = DType::f32;
        else if (dtype_str == "f64")
            dtype = DType::f64;
        else
            throw ContainerError(ContainerFault::unknown_dtype, name + " has dtype '" + dtype_str + "'");

        const auto shape_it = entry.find("shape");
        if (shape_it == entry.end() || !shape_it->is_array() || shape_it->size() > kMaxTensorRank)
            throw ContainerError(ContainerFault::bad_shape, name);
        Tensor::Shape shape;
        for (const auto& e : *shape_it) {
            if (!e.is_number_unsigned()) throw ContainerError(ContainerFault::bad_shape, name);
            shape.push_back(e.get<std::uint64_t>());
        }

        const auto off_it = entry.find("offset");
        const auto len_it = entry.find("nbytes");
        if (off_it == entry.end() || len_it == entry.end() || !off_it->is_number_unsigned() ||
            !len_it->is_number_unsigned())
            throw ContainerError(ContainerFault::malformed_header, name + " lacks unsigned offset/nbytes");
        const auto offset = off_it->get<std::uint64_t>();
        const auto nbytes = len_it->get<std::uint64_t>();

        if (nbytes != detail::checked_nbytes(shape, dtype))
            throw ContainerError(ContainerFault::size_mismatch, name);
        if (offset % 8 != 0) throw ContainerError(ContainerFault::misaligned_offset, name);
        if (offset > data_len || nbytes > data_len - offset)
            throw ContainerError(ContainerFault::truncated_data,
                                 name + " needs bytes up to " + std::to_string(offset) + "+" + std::to_string(nbytes) +
                                     " of a " + std::to_string(data_len) + "-byte data section");
        extents.push_back({offset, nbytes, name});

        const char* p = bytes.data() + data_start + offset;
        const std::size_t count = nbytes / dtype_size(dtype);
        if (dtype == DType::f32)
            ckpt.tensors.emplace(name, Tensor(std::move(shape), detail::decode_values<float>(p, count)));
        else
            ckpt.tensors.emplace(name, Tensor(std::move(shape), detail::decode_values<double>(p, count)));
    }

    std::sort(extents.begin(), extents.end(), [](const Extent& a, const Extent& b) { return a.offset < b.offset; });
    for (std::size_t i = 1; i < extents.size(); ++i) {
        const auto& prev = extents[i - 1];
        if (prev.nbytes != 0 && extents[i].nbytes != 0 && prev.offset + prev.nbytes > extents[i].offset)
            throw ContainerError(ContainerFault::overlapping_offsets, prev.name + " and " + extents[i].name);
    }
    return ckpt;
}

inline void write_container(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = encode_container(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw Error(ErrorKind::io, "write failed: " + path.string());
}

inline Checkpoint read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open for reading: " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw Error(ErrorKind::io, "read failed: " + path.string());
    return decode_container(bytes);
}

enum class MismatchKind { missing_in_a, missing_in_b, shape_mismatch, dtype_mismatch };

inline std::string_view mismatch_name(MismatchKind k) {
    switch (k) {
    case MismatchKind::missing_in_a: return "missing-in-a";
    case MismatchKind::missing_in_b: return "missing-in-b";
    case MismatchKind::shape_mismatch: return "shape-mismatch";
    case MismatchKind::dtype_mismatch: return "dtype-mismatch";
    }
    return "mismatch";
}

struct Mismatch {
    MismatchKind kind;
    std::string name;

    friend bool operator==(const Mismatch&, const Mismatch&) = default;
};

/// Architecture comparison; empty iff both checkpoints have the same names
/// with the same shapes and dtypes. Results are in name order.
inline std::vector<Mismatch> shape_diff(const Checkpoint& a, const Checkpoint& b) {
    std::vector<Mismatch> out;
    auto ia = a.tensors.begin();
    auto ib = b.tensors.begin();
    while (ia != a.tensors.end() || ib != b.tensors.end()) {
        if (ib == b.tensors.end() || (ia != a.tensors.end() && ia->first < ib->first)) {
            out.push_back({MismatchKind::missing_in_b, ia->first});
            ++ia;
        } else if (ia == a.tensors.end() || ib->first < ia->first) {
            out.push_back({MismatchKind::missing_in_a, ib->first});
            ++ib;
        } else {
            if (ia->second.shape() != ib->second.shape())
                out.push_back({MismatchKind::shape_mismatch, ia->first});
            else if (ia->second.dtype() != ib->second.dtype())
                out.push_back({MismatchKind::dtype_mismatch, ia->first});
            ++ia;
            ++ib;
        }
    }
    return out;
}

} // namespace acemerge
