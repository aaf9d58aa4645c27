#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "pandagpt/adam.hpp"
#include "pandagpt/tensor.hpp"

namespace pgpt {

// Binary checkpoint container. Layout:
//   magic "PGPT" | version u32 | meta length u32 + UTF-8 "key=value\n" lines |
//   per tensor: name length u32 + name + ndim u32 + dims u32[] + f32 LE data |
//   CRC32 of all preceding bytes.
// Tensors and metadata are written in sorted order, so save -> load -> save
// is byte-identical.
struct Checkpoint {
    std::map<std::string, std::string> meta;
    ParamMap tensors;
};

constexpr uint32_t kCheckpointVersion = 1;

uint32_t crc32(const void* data, size_t len, uint32_t crc = 0);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

// Returns the file's trailing CRC32, used as the checkpoint checksum in
// lineage metadata.
uint32_t save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path, uint32_t* file_crc = nullptr);

// CRC32 of the canonical tensor-table serialization alone. This is the
// freeze checksum: it must be bit-identical before and after any downstream
// training of other parameters.
uint32_t params_checksum(const ParamMap& params);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace pgpt
