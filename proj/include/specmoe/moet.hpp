// moet.hpp - reader/writer for the MOET binary tensor format.
//
// Layout (all little-endian):
//   magic   'M' 'O' 'E' 'T'
//   version u32 = 1
//   dtype   u8  = 1 (f32)
//   ndim    u8
//   dims    ndim x u64
//   payload row-major f32

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

namespace specmoe::moet {

struct Tensor {
    std::vector<std::uint64_t> dims;
    std::vector<float> data;

    std::uint64_t elements() const {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

void write(const std::filesystem::path& path, std::span<const std::uint64_t> dims,
           std::span<const float> data);
void write(const std::filesystem::path& path, const Tensor& t);

Tensor read(const std::filesystem::path& path);

// Streaming writer for large packed arrays; dims are fixed up front and the
// element count is enforced at close().
class Writer {
public:
    Writer(const std::filesystem::path& path, std::vector<std::uint64_t> dims);
    ~Writer();

    Writer(const Writer&) = delete;
    Writer& operator=(const Writer&) = delete;

    void append(std::span<const float> chunk);
    void close();

private:
    std::ofstream out_;
    std::filesystem::path path_;
    std::uint64_t expected_ = 0;
    std::uint64_t written_ = 0;
    bool closed_ = false;
};

// Sequential reader mirror of Writer; read_chunk pulls the next n floats.
class Reader {
public:
    explicit Reader(const std::filesystem::path& path);

    const std::vector<std::uint64_t>& dims() const { return dims_; }
    std::uint64_t elements() const { return expected_; }

    void read_chunk(std::span<float> out);
    void seek_elements(std::uint64_t element_offset);

private:
    std::ifstream in_;
    std::filesystem::path path_;
    std::vector<std::uint64_t> dims_;
    std::uint64_t expected_ = 0;
    std::uint64_t header_bytes_ = 0;
};

} // namespace specmoe::moet
