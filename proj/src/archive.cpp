#include "polypseg/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "polypseg/errors.hpp"

namespace polypseg {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'S', 'E', 'G', 'A', 'R', 'C', 'H'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::istream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw CheckpointError("truncated archive header: " + path.string());
  }
  return value;
}

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  return path.string() + ".tmp";
}

}  // namespace

const TensorRecord* Archive::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header;
  header["metadata"] = archive.metadata;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : archive.tensors) {
    Index count = 1;
    for (Index d : t.shape) count *= d;
    if (count != static_cast<Index>(t.values.size())) {
      throw CheckpointError("tensor " + t.name + " shape does not match its value count");
    }
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", count}});
    offset += static_cast<std::uint64_t>(count);
  }
  const std::string text = header.dump();

  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open for writing: " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, archive.format_version);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : archive.tensors) {
      out.write(reinterpret_cast<const char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    }
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw CheckpointError("write failed: " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open archive: " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a polypseg archive: " + path.string());
  }
  Archive archive;
  archive.format_version = take<std::uint32_t>(in, path);
  if (archive.format_version != kArchiveFormatVersion) {
    throw CheckpointError("unsupported archive format version " + std::to_string(archive.format_version) +
                          " in " + path.string());
  }
  const auto header_len = take<std::uint64_t>(in, path);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw CheckpointError("truncated archive header: " + path.string());
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed archive header in " + path.string() + ": " + e.what());
  }
  archive.metadata = header.value("metadata", nlohmann::json::object());
  const auto payload_start = in.tellg();
  for (const auto& entry : header.at("tensors")) {
    TensorRecord t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<Index>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::uint64_t>();
    t.values.resize(count);
    in.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(float)));
    if (!in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(count * sizeof(float)))) {
      throw CheckpointError("truncated tensor " + t.name + " in " + path.string());
    }
    archive.tensors.push_back(std::move(t));
  }
  return archive;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out << contents;
    out.flush();
    if (!out) {
      std::filesystem::remove(tmp);
      throw DataError("write failed: " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace polypseg
