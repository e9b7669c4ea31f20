#include "specmoe/moet.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

namespace specmoe::moet {

// Bulk payload I/O memcpy's f32 arrays directly; that is only valid on a
// little-endian host, which is all this project targets.
static_assert(std::endian::native == std::endian::little,
              "MOET payload I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'O', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_header(std::ostream& os, std::span<const std::uint64_t> dims) {
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    const std::uint8_t dtype = kDtypeF32;
    const std::uint8_t ndim = static_cast<std::uint8_t>(dims.size());
    if (dims.size() > 255) throw std::invalid_argument("moet: too many dims");
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    os.write(reinterpret_cast<const char*>(&ndim), 1);
    for (auto d : dims) put_u64(os, d);
}

std::vector<std::uint64_t> read_header(std::istream& is, const std::filesystem::path& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("moet: bad magic in " + path.string());
    const std::uint32_t version = get_u32(is);
    if (version != kVersion)
        throw std::runtime_error("moet: unsupported version in " + path.string());
    std::uint8_t dtype = 0, ndim = 0;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    is.read(reinterpret_cast<char*>(&ndim), 1);
    if (dtype != kDtypeF32)
        throw std::runtime_error("moet: unsupported dtype in " + path.string());
    std::vector<std::uint64_t> dims(ndim);
    for (auto& d : dims) d = get_u64(is);
    if (!is) throw std::runtime_error("moet: truncated header in " + path.string());
    return dims;
}

std::uint64_t element_count(std::span<const std::uint64_t> dims) {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

} // namespace

void write(const std::filesystem::path& path, std::span<const std::uint64_t> dims,
           std::span<const float> data) {
    if (element_count(dims) != data.size())
        throw std::invalid_argument("moet: dims do not match payload size");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("moet: cannot open for write: " + path.string());
    write_header(os, dims);
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!os) throw std::runtime_error("moet: write failed: " + path.string());
}

void write(const std::filesystem::path& path, const Tensor& t) {
    write(path, t.dims, t.data);
}

Tensor read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("moet: cannot open: " + path.string());
    Tensor t;
    t.dims = read_header(is, path);
    t.data.resize(element_count(t.dims));
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!is) throw std::runtime_error("moet: truncated payload in " + path.string());
    return t;
}

Writer::Writer(const std::filesystem::path& path, std::vector<std::uint64_t> dims)
    : out_(path, std::ios::binary), path_(path), expected_(element_count(dims)) {
    if (!out_) throw std::runtime_error("moet: cannot open for write: " + path.string());
    write_header(out_, dims);
}

Writer::~Writer() {
    if (!closed_ && written_ == expected_) {
        try {
            close();
        } catch (...) {
        }
    }
}

void Writer::append(std::span<const float> chunk) {
    if (closed_) throw std::runtime_error("moet: append after close");
    written_ += chunk.size();
    if (written_ > expected_)
        throw std::runtime_error("moet: payload overflow for " + path_.string());
    out_.write(reinterpret_cast<const char*>(chunk.data()),
               static_cast<std::streamsize>(chunk.size() * sizeof(float)));
    if (!out_) throw std::runtime_error("moet: write failed: " + path_.string());
}

void Writer::close() {
    if (closed_) return;
    if (written_ != expected_)
        throw std::runtime_error("moet: incomplete payload for " + path_.string());
    out_.flush();
    if (!out_) throw std::runtime_error("moet: flush failed: " + path_.string());
    out_.close();
    closed_ = true;
}

Reader::Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("moet: cannot open: " + path.string());
    dims_ = read_header(in_, path);
    expected_ = element_count(dims_);
    header_bytes_ = 4 + 4 + 1 + 1 + 8 * dims_.size();
}

void Reader::read_chunk(std::span<float> out) {
    in_.read(reinterpret_cast<char*>(out.data()),
             static_cast<std::streamsize>(out.size() * sizeof(float)));
    if (!in_) throw std::runtime_error("moet: truncated payload in " + path_.string());
}

void Reader::seek_elements(std::uint64_t element_offset) {
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(header_bytes_ + element_offset * sizeof(float)));
    if (!in_) throw std::runtime_error("moet: seek failed in " + path_.string());
}

} // namespace specmoe::moet
