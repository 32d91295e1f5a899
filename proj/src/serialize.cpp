#include "darts/serialize.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

namespace darts {

namespace {

// All integers little-endian on disk. The host is little-endian in practice;
// byte-wise writes keep the format well-defined regardless.
template <typename T>
void write_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError(str("truncated payload while reading ", what));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    write_le(os, bits);
}

double read_f64(std::istream& is, const char* what) {
    const std::uint64_t bits = read_le<std::uint64_t>(is, what);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

constexpr char kDftnMagic[4] = {'D', 'F', 'T', 'N'};
constexpr char kCkptMagic[4] = {'D', 'F', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

}  // namespace

void write_dftn(std::ostream& os, const Tensor& t) {
    os.write(kDftnMagic, 4);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_le<std::uint64_t>(os, d);
    for (double v : t.data()) write_f64(os, v);
}

Tensor read_dftn(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kDftnMagic, 4) != 0) {
        throw IoError("malformed header: missing DFTN magic");
    }
    const std::uint32_t rank = read_le<std::uint32_t>(is, "DFTN rank");
    if (rank > 8) throw IoError(str("malformed header: implausible DFTN rank ", rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint64_t d = read_le<std::uint64_t>(is, "DFTN dims");
        if (d == 0 || d > (1ULL << 32)) throw IoError(str("malformed header: bad DFTN dim ", d));
        shape[i] = static_cast<std::size_t>(d);
        numel *= shape[i];
    }
    std::vector<double> data(numel);
    for (std::size_t i = 0; i < numel; ++i) data[i] = read_f64(is, "DFTN payload");
    return Tensor::from_data(std::move(shape), std::move(data));
}

void write_dftn_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(str("cannot open for write: ", path));
    write_dftn(os, t);
    if (!os) throw IoError(str("write failed: ", path));
}

Tensor read_dftn_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(str("cannot open for read: ", path));
    return read_dftn(is);
}

std::vector<std::uint8_t> dftn_bytes(const Tensor& t) {
    std::ostringstream os(std::ios::binary);
    write_dftn(os, t);
    const std::string s = os.str();
    return std::vector<std::uint8_t>(s.begin(), s.end());
}

std::uint32_t crc32_bytes(const void* data, std::size_t len) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

std::uint32_t crc32_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(str("cannot open for read: ", path));
    uLong crc = ::crc32(0L, nullptr, 0);
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof(buf));
        const std::streamsize got = is.gcount();
        if (got > 0) crc = ::crc32(crc, reinterpret_cast<const Bytef*>(buf), static_cast<uInt>(got));
    }
    return static_cast<std::uint32_t>(crc);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ostringstream body(std::ios::binary);
    body.write(kCkptMagic, 4);
    write_le<std::uint32_t>(body, kCkptVersion);
    write_le<std::uint64_t>(body, ckpt.tensors.size());
    for (const auto& [name, tensor] : ckpt.tensors) {
        write_le<std::uint32_t>(body, static_cast<std::uint32_t>(name.size()));
        body.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_dftn(body, tensor);
    }
    write_le<std::uint64_t>(body, ckpt.meta_json.size());
    body.write(ckpt.meta_json.data(), static_cast<std::streamsize>(ckpt.meta_json.size()));

    const std::string bytes = body.str();
    const std::uint32_t crc = crc32_bytes(bytes.data(), bytes.size());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(str("cannot open for write: ", path));
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    write_le<std::uint32_t>(os, crc);
    if (!os) throw IoError(str("write failed: ", path));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(str("cannot open for read: ", path));
    std::stringstream all(std::ios::binary | std::ios::in | std::ios::out);
    all << is.rdbuf();
    const std::string bytes = all.str();
    if (bytes.size() < 4 + 4 + 8 + 8 + 4) throw IoError(str("truncated payload: checkpoint too small: ", path));

    const std::size_t body_len = bytes.size() - 4;
    std::uint32_t stored_crc = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        stored_crc |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[body_len + i])) << (8 * i);
    }
    const std::uint32_t actual_crc = crc32_bytes(bytes.data(), body_len);
    if (stored_crc != actual_crc) {
        throw IoError(str("checksum mismatch in checkpoint ", path, ": stored ", stored_crc, ", computed ",
                          actual_crc));
    }

    std::istringstream body(bytes.substr(0, body_len), std::ios::binary);
    char magic[4];
    body.read(magic, 4);
    if (!body || std::memcmp(magic, kCkptMagic, 4) != 0) {
        throw IoError(str("malformed header: missing DFCK magic in ", path));
    }
    const std::uint32_t version = read_le<std::uint32_t>(body, "checkpoint version");
    if (version != kCkptVersion) throw IoError(str("unsupported checkpoint version ", version));
    const std::uint64_t count = read_le<std::uint64_t>(body, "checkpoint record count");

    Checkpoint ckpt;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_le<std::uint32_t>(body, "record name length");
        std::string name(name_len, '\0');
        body.read(name.data(), name_len);
        if (!body) throw IoError("truncated payload while reading record name");
        ckpt.tensors.emplace(std::move(name), read_dftn(body));
    }
    const std::uint64_t json_len = read_le<std::uint64_t>(body, "trailer length");
    ckpt.meta_json.resize(json_len);
    body.read(ckpt.meta_json.data(), static_cast<std::streamsize>(json_len));
    if (!body) throw IoError("truncated payload while reading trailer");
    return ckpt;
}

}  // namespace darts
