#include "selflab/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

namespace selflab {

namespace {

constexpr std::size_t kFixedHeaderBytes = 8;
constexpr char kTensorMagic[4] = {'S', 'L', 'T', '1'};
constexpr char kLabelMagic[4] = {'S', 'L', 'L', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_header(std::vector<std::uint8_t>& out, const char (&magic)[4],
                const std::vector<std::uint32_t>& shape) {
    out.insert(out.end(), magic, magic + 4);
    out.push_back(static_cast<std::uint8_t>(shape.size()));
    out.insert(out.end(), 3, 0);
    for (auto extent : shape) put_u32(out, extent);
}

struct Header {
    std::vector<std::uint32_t> shape;
    std::size_t payload_offset = 0;
    std::size_t element_count = 0;
};

Header parse_header(const std::vector<std::uint8_t>& bytes, const char (&magic)[4],
                    std::size_t element_bytes) {
    if (bytes.size() < kFixedHeaderBytes)
        throw TensorIoError(TensorIoErrc::bad_header, "file shorter than the 8-byte header");
    if (std::memcmp(bytes.data(), magic, 4) != 0)
        throw TensorIoError(TensorIoErrc::bad_magic,
                            std::string("expected magic ") + std::string(magic, 4));
    const unsigned rank = bytes[4];
    if (rank < 1 || rank > 4)
        throw TensorIoError(TensorIoErrc::bad_header, "rank must be 1-4, got " + std::to_string(rank));
    if (bytes[5] != 0 || bytes[6] != 0 || bytes[7] != 0)
        throw TensorIoError(TensorIoErrc::bad_header, "reserved header bytes are not zero");
    Header h;
    h.payload_offset = kFixedHeaderBytes + 4 * rank;
    if (bytes.size() < h.payload_offset)
        throw TensorIoError(TensorIoErrc::bad_header, "truncated shape block");
    h.element_count = 1;
    for (unsigned i = 0; i < rank; ++i) {
        h.shape.push_back(get_u32(bytes.data() + kFixedHeaderBytes + 4 * i));
        h.element_count *= h.shape.back();
    }
    const std::size_t payload = bytes.size() - h.payload_offset;
    if (payload != h.element_count * element_bytes)
        throw TensorIoError(TensorIoErrc::size_mismatch,
                            "shape declares " + std::to_string(h.element_count) + " elements but payload holds " +
                                std::to_string(payload) + " bytes");
    return h;
}

}  // namespace

Tensor::Tensor(std::vector<std::uint32_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    if (shape.empty() || shape.size() > 4) throw std::invalid_argument("tensor rank must be 1-4");
    if (element_count() != data.size())
        throw std::invalid_argument("tensor shape does not match data length");
}

Tensor::Tensor(std::vector<std::uint32_t> shape_, float fill) : shape(std::move(shape_)) {
    if (shape.empty() || shape.size() > 4) throw std::invalid_argument("tensor rank must be 1-4");
    data.assign(element_count(), fill);
}

std::size_t Tensor::element_count() const {
    if (shape.empty()) return 0;
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
}

std::size_t Tensor::outer_extent() const {
    if (shape.empty()) return 0;
    return std::accumulate(shape.begin(), shape.end() - 1, std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
}

HardLabelMap::HardLabelMap(std::uint32_t h, std::uint32_t w, std::vector<std::uint16_t> values)
    : height(h), width(w), data(std::move(values)) {
    if (data.size() != static_cast<std::size_t>(h) * w)
        throw std::invalid_argument("label map shape does not match data length");
}

void HardLabelMap::validate(std::size_t num_classes) const {
    for (auto v : data)
        if (v > num_classes)
            throw std::invalid_argument("label " + std::to_string(v) + " exceeds class count " +
                                        std::to_string(num_classes));
}

const char* to_string(TensorIoErrc kind) {
    switch (kind) {
        case TensorIoErrc::io: return "io";
        case TensorIoErrc::bad_magic: return "bad_magic";
        case TensorIoErrc::bad_header: return "bad_header";
        case TensorIoErrc::size_mismatch: return "size_mismatch";
        case TensorIoErrc::non_finite: return "non_finite";
    }
    return "unknown";
}

TensorIoError::TensorIoError(TensorIoErrc kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(kFixedHeaderBytes + 4 * t.rank() + 4 * t.data.size());
    put_header(out, kTensorMagic, t.shape);
    for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
    const Header h = parse_header(bytes, kTensorMagic, 4);
    std::vector<float> data(h.element_count);
    for (std::size_t i = 0; i < h.element_count; ++i) {
        data[i] = std::bit_cast<float>(get_u32(bytes.data() + h.payload_offset + 4 * i));
        if (!std::isfinite(data[i]))
            throw TensorIoError(TensorIoErrc::non_finite, "non-finite value at element " + std::to_string(i));
    }
    return Tensor(h.shape, std::move(data));
}

std::vector<std::uint8_t> encode_labels(const HardLabelMap& labels) {
    std::vector<std::uint8_t> out;
    out.reserve(kFixedHeaderBytes + 8 + 2 * labels.data.size());
    put_header(out, kLabelMagic, {labels.height, labels.width});
    for (auto v : labels.data) {
        out.push_back(static_cast<std::uint8_t>(v & 0xff));
        out.push_back(static_cast<std::uint8_t>(v >> 8));
    }
    return out;
}

HardLabelMap decode_labels(const std::vector<std::uint8_t>& bytes) {
    const Header h = parse_header(bytes, kLabelMagic, 2);
    if (h.shape.size() != 2)
        throw TensorIoError(TensorIoErrc::bad_header, "label maps must have rank 2");
    std::vector<std::uint16_t> data(h.element_count);
    const std::uint8_t* p = bytes.data() + h.payload_offset;
    for (std::size_t i = 0; i < h.element_count; ++i)
        data[i] = static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8));
    return HardLabelMap(h.shape[0], h.shape[1], std::move(data));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TensorIoError(TensorIoErrc::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw TensorIoError(TensorIoErrc::io, "read failed for " + path.string());
    return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw TensorIoError(TensorIoErrc::io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw TensorIoError(TensorIoErrc::io, "write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) { return decode_tensor(read_file_bytes(path)); }

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    write_file_bytes(path, encode_tensor(t));
}

HardLabelMap load_labels(const std::filesystem::path& path) { return decode_labels(read_file_bytes(path)); }

void save_labels(const std::filesystem::path& path, const HardLabelMap& labels) {
    write_file_bytes(path, encode_labels(labels));
}

NormalizedRows normalize_rows(const Tensor& t) {
    NormalizedRows out{t, 0};
    const std::size_t d = t.inner_extent();
    const std::size_t n = t.outer_extent();
    for (std::size_t i = 0; i < n; ++i) {
        float* row = out.tensor.data.data() + i * d;
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) sq += static_cast<double>(row[k]) * row[k];
        if (sq == 0.0) {
            ++out.zero_rows;
            continue;
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t k = 0; k < d; ++k) row[k] = static_cast<float>(row[k] * inv);
    }
    return out;
}

Matrix to_matrix(const Tensor& t) {
    Matrix m(t.outer_extent(), t.inner_extent());
    std::copy(t.data.begin(), t.data.end(), m.values().begin());
    return m;
}

Tensor from_matrix(const Matrix& m) {
    std::vector<float> data(m.values().begin(), m.values().end());
    return Tensor({static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, std::move(data));
}

}  // namespace selflab
