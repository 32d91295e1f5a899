#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "darts/tensor.hpp"

namespace darts {

// DFTN tensor blob: magic "DFTN", u32 rank, u64 dims, float64 payload,
// everything little-endian row-major.
void write_dftn(std::ostream& os, const Tensor& t);
Tensor read_dftn(std::istream& is);
void write_dftn_file(const std::string& path, const Tensor& t);
Tensor read_dftn_file(const std::string& path);
std::vector<std::uint8_t> dftn_bytes(const Tensor& t);

std::uint32_t crc32_bytes(const void* data, std::size_t len);
std::uint32_t crc32_file(const std::string& path);

// Checkpoint container: magic "DFCK", u32 version, u64 record count,
// length-prefixed named DFTN records, a length-prefixed JSON trailer
// (config, masks, head metadata), then a u32 CRC32 of everything before it.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;  // ordered: serialization is canonical
    std::string meta_json;                  // trailer payload
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace darts
