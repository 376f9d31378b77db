#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "selflab/matrix.hpp"

namespace selflab {

/// Dense float32 tensor, row-major with the last axis fastest. Rank 1-4.
struct Tensor {
    std::vector<std::uint32_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<std::uint32_t> shape_, std::vector<float> data_);
    explicit Tensor(std::vector<std::uint32_t> shape_, float fill = 0.0f);

    std::size_t rank() const { return shape.size(); }
    /// Product of all extents.
    std::size_t element_count() const;
    /// Size of the last axis; the number of "columns" when viewed as N x D.
    std::size_t inner_extent() const { return shape.empty() ? 0 : shape.back(); }
    /// Number of rows when viewed as N x D (product of all but the last axis).
    std::size_t outer_extent() const;

    bool operator==(const Tensor&) const = default;
};

/// Per-pixel class indices. Entries equal to the class count are IGNORE.
struct HardLabelMap {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint16_t> data;

    HardLabelMap() = default;
    HardLabelMap(std::uint32_t h, std::uint32_t w, std::uint16_t fill = 0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}
    HardLabelMap(std::uint32_t h, std::uint32_t w, std::vector<std::uint16_t> values);

    std::size_t pixel_count() const { return data.size(); }
    static constexpr std::uint16_t ignore_value(std::size_t num_classes) {
        return static_cast<std::uint16_t>(num_classes);
    }
    /// Throws std::invalid_argument if any entry exceeds num_classes.
    void validate(std::size_t num_classes) const;

    bool operator==(const HardLabelMap&) const = default;
};

enum class TensorIoErrc {
    io,
    bad_magic,
    bad_header,
    size_mismatch,
    non_finite,
};

const char* to_string(TensorIoErrc kind);

class TensorIoError : public std::runtime_error {
 public:
    TensorIoError(TensorIoErrc kind, const std::string& what);
    TensorIoErrc kind() const { return kind_; }

 private:
    TensorIoErrc kind_;
};

// SLT1 / SLL1 files: "SLT1" | rank:u8 | 3 zero bytes | rank x u32 LE extents | payload LE.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_labels(const HardLabelMap& labels);
HardLabelMap decode_labels(const std::vector<std::uint8_t>& bytes);

Tensor load_tensor(const std::filesystem::path& path);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
HardLabelMap load_labels(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const HardLabelMap& labels);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

struct NormalizedRows {
    Tensor tensor;
    std::size_t zero_rows = 0;
};

/// Scales every row of the N x D view to unit Euclidean norm. All-zero rows
/// stay zero and are counted.
NormalizedRows normalize_rows(const Tensor& t);

/// N x D view of a tensor, widened to double.
Matrix to_matrix(const Tensor& t);
/// Narrows a matrix to a rank-2 float tensor.
Tensor from_matrix(const Matrix& m);

}  // namespace selflab
