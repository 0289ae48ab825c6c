#pragma once

// Checkpoint container: an uncompressed POSIX ustar archive holding one raw
// little-endian float32 blob per named array followed by manifest.json,
// which records names, shapes, absolute byte offsets of each blob, the format
// version and the digest of the configuration that produced the arrays.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "apattack/nn.hpp"

namespace apattack {

inline constexpr int kCheckpointFormatVersion = 1;

struct TarMember {
  std::string name;
  std::string bytes;
  std::uint64_t data_offset = 0;  // filled by read_tar / write_tar
};

// Deterministic archive: zero mtime, fixed mode and owner.
void write_tar(const std::filesystem::path& path, std::vector<TarMember>& members);
std::vector<TarMember> read_tar(const std::filesystem::path& path);

struct Checkpoint {
  std::string kind;           // e.g. "encoders", "inversion", "generator"
  std::string config_digest;  // digest of the producing configuration
  nlohmann::json metadata = nlohmann::json::object();  // e.g. architecture sizes
  nn::ArrayList arrays;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// SHA-256 over names, shapes and the little-endian float32 bytes.
std::string arrays_digest(const nn::ArrayList& arrays);

}  // namespace apattack
