#include "apattack/checkpoint.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "apattack/digest.hpp"
#include "apattack/errors.hpp"

namespace apattack {

namespace {

constexpr std::size_t kBlock = 512;

void put_octal(char* field, std::size_t width, std::uint64_t value) {
  // width includes the terminating NUL
  std::string digits(width - 1, '0');
  for (std::size_t i = width - 1; i-- > 0 && value > 0;) {
    digits[i] = static_cast<char>('0' + (value & 7U));
    value >>= 3U;
  }
  std::memcpy(field, digits.data(), width - 1);
  field[width - 1] = '\0';
}

std::uint64_t get_octal(const char* field, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width && field[i] != '\0' && field[i] != ' '; ++i) {
    if (field[i] < '0' || field[i] > '7') throw LoadError("malformed tar header field");
    v = (v << 3U) | static_cast<std::uint64_t>(field[i] - '0');
  }
  return v;
}

std::string make_header(const std::string& name, std::uint64_t size) {
  if (name.size() >= 100) throw InputError("tar member name too long: '" + name + "'");
  std::string h(kBlock, '\0');
  std::memcpy(h.data(), name.data(), name.size());
  put_octal(h.data() + 100, 8, 0644);
  put_octal(h.data() + 108, 8, 0);
  put_octal(h.data() + 116, 8, 0);
  put_octal(h.data() + 124, 12, size);
  put_octal(h.data() + 136, 12, 0);
  h[156] = '0';
  std::memcpy(h.data() + 257, "ustar", 6);
  std::memcpy(h.data() + 263, "00", 2);
  std::memset(h.data() + 148, ' ', 8);
  std::uint64_t sum = 0;
  for (unsigned char c : h) sum += c;
  put_octal(h.data() + 148, 7, sum);
  h[155] = ' ';
  return h;
}

std::string float_bytes(const std::vector<float>& values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (std::size_t b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFU);
  }
  return out;
}

std::vector<float> bytes_to_floats(const std::string& bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (std::size_t b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

std::string member_name(const std::string& array_name) { return "arrays/" + array_name + ".f32"; }

}  // namespace

void write_tar(const std::filesystem::path& path, std::vector<TarMember>& members) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  std::uint64_t offset = 0;
  for (auto& m : members) {
    const std::string header = make_header(m.name, m.bytes.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    offset += kBlock;
    m.data_offset = offset;
    out.write(m.bytes.data(), static_cast<std::streamsize>(m.bytes.size()));
    const std::size_t pad = (kBlock - m.bytes.size() % kBlock) % kBlock;
    const std::string zeros(pad, '\0');
    out.write(zeros.data(), static_cast<std::streamsize>(pad));
    offset += m.bytes.size() + pad;
  }
  const std::string trailer(2 * kBlock, '\0');
  out.write(trailer.data(), static_cast<std::streamsize>(trailer.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::vector<TarMember> read_tar(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string all = ss.str();
  std::vector<TarMember> members;
  std::size_t pos = 0;
  while (pos + kBlock <= all.size()) {
    const char* h = all.data() + pos;
    if (std::all_of(h, h + kBlock, [](char c) { return c == '\0'; })) break;
    if (std::memcmp(h + 257, "ustar", 5) != 0) {
      throw LoadError("'" + path.string() + "' is not a checkpoint archive (bad header at byte " +
                      std::to_string(pos) + ")");
    }
    TarMember m;
    m.name.assign(h, strnlen(h, 100));
    const std::uint64_t size = get_octal(h + 124, 12);
    pos += kBlock;
    m.data_offset = pos;
    const std::size_t available = pos <= all.size() ? all.size() - pos : 0;
    m.bytes = all.substr(pos, std::min<std::size_t>(size, available));
    const bool truncated = m.bytes.size() < size;
    members.push_back(std::move(m));
    if (truncated) break;
    pos += size + (kBlock - size % kBlock) % kBlock;
  }
  return members;
}

std::string arrays_digest(const nn::ArrayList& arrays) {
  Sha256 h;
  for (const auto& a : arrays) {
    h.update(a.name);
    h.update("\0", 1);
    for (auto d : a.shape) {
      const auto dim = static_cast<std::uint64_t>(d);
      h.update(&dim, sizeof dim);
    }
    h.update(float_bytes(a.values));
  }
  return h.hex();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::vector<TarMember> members;
  for (const auto& a : checkpoint.arrays) {
    if (a.values.size() != ag::shape_numel(a.shape)) {
      throw InputError("array '" + a.name + "' holds " + std::to_string(a.values.size()) +
                       " values for shape " + ag::shape_string(a.shape));
    }
    members.push_back({member_name(a.name), float_bytes(a.values), 0});
  }
  // Blob offsets are deterministic given sizes, so compute them before
  // emitting the manifest as the final member.
  std::uint64_t offset = 0;
  nlohmann::json arrays = nlohmann::json::array();
  for (std::size_t i = 0; i < members.size(); ++i) {
    offset += kBlock;
    const auto& a = checkpoint.arrays[i];
    arrays.push_back({{"name", a.name},
                      {"shape", a.shape},
                      {"dtype", "float32-le"},
                      {"member", members[i].name},
                      {"offset", offset},
                      {"nbytes", members[i].bytes.size()}});
    offset += members[i].bytes.size() + (kBlock - members[i].bytes.size() % kBlock) % kBlock;
  }
  nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion},
                             {"kind", checkpoint.kind},
                             {"config_digest", checkpoint.config_digest},
                             {"metadata", checkpoint.metadata},
                             {"arrays_digest", arrays_digest(checkpoint.arrays)},
                             {"arrays", arrays}};
  members.push_back({"manifest.json", manifest.dump(2) + "\n", 0});
  write_tar(path, members);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("checkpoint '" + path.string() + "' does not exist");
  const auto members = read_tar(path);
  const TarMember* manifest_member = nullptr;
  for (const auto& m : members) {
    if (m.name == "manifest.json") manifest_member = &m;
  }
  if (manifest_member == nullptr) throw LoadError("checkpoint '" + path.string() + "' has no manifest.json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_member->bytes);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("garbled manifest.json in '" + path.string() + "': " + e.what());
  }
  if (!manifest.contains("format_version")) throw LoadError("manifest.json lacks format_version");
  const int version = manifest["format_version"].get<int>();
  if (version != kCheckpointFormatVersion) {
    throw LoadError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointFormatVersion) + ")");
  }
  Checkpoint ck;
  ck.kind = manifest.value("kind", "");
  ck.config_digest = manifest.value("config_digest", "");
  if (manifest.contains("metadata")) ck.metadata = manifest["metadata"];
  for (const auto& entry : manifest.at("arrays")) {
    nn::NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<ag::Shape>();
    const std::string mname = entry.at("member").get<std::string>();
    const TarMember* blob = nullptr;
    for (const auto& m : members) {
      if (m.name == mname) blob = &m;
    }
    if (blob == nullptr) throw LoadError("checkpoint is missing the blob for array '" + a.name + "'");
    const std::size_t expected = ag::shape_numel(a.shape) * 4;
    if (blob->bytes.size() != expected || entry.at("nbytes").get<std::size_t>() != expected) {
      throw LoadError("array '" + a.name + "' blob holds " + std::to_string(blob->bytes.size()) +
                      " bytes, shape " + ag::shape_string(a.shape) + " needs " + std::to_string(expected));
    }
    if (entry.at("offset").get<std::uint64_t>() != blob->data_offset) {
      throw LoadError("array '" + a.name + "' offset disagrees with the archive layout");
    }
    a.values = bytes_to_floats(blob->bytes);
    ck.arrays.push_back(std::move(a));
  }
  if (manifest.value("arrays_digest", "") != arrays_digest(ck.arrays)) {
    throw LoadError("checkpoint '" + path.string() + "' arrays digest mismatch");
  }
  return ck;
}

}  // namespace apattack
