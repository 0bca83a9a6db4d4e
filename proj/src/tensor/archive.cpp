// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/archive.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "ibke/errors.hpp"

namespace ibke {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kData = "tensors.bin";

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

void replace_file(const fs::path& tmp, const fs::path& dst) {
  std::error_code ec;
  fs::rename(tmp, dst, ec);
  if (ec) throw ArchiveError("archive: cannot move " + tmp.string() + " into place: " + ec.message());
}

}  // namespace

void write_archive(const fs::path& dir, const TensorMap& tensors, const json& metadata) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ArchiveError("archive: cannot create " + dir.string() + ": " + ec.message());

  json entries = json::object();
  std::uint64_t offset = 0;
  const auto data_tmp = dir / (std::string(kData) + ".tmp");
  {
    std::ofstream out(data_tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("archive: cannot open " + data_tmp.string());
    for (const auto& [name, t] : tensors) {
      if (!t.defined()) throw ArchiveError("archive: tensor '" + name + "' is undefined");
      for (double v : t.values()) {
        std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
        out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
      }
      const std::uint64_t nbytes = t.numel() * sizeof(double);
      entries[name] = {{"shape", t.shape()}, {"dtype", "float64"}, {"offset", offset}, {"nbytes", nbytes}};
      offset += nbytes;
    }
    if (!out) throw ArchiveError("archive: write failed for " + data_tmp.string());
  }

  json manifest = {{"format", kArchiveFormat},
                   {"version", kArchiveVersion},
                   {"byte_order", "little"},
                   {"data_file", kData},
                   {"total_bytes", offset},
                   {"tensors", entries},
                   {"metadata", metadata}};
  const auto manifest_tmp = dir / (std::string(kManifest) + ".tmp");
  {
    std::ofstream out(manifest_tmp, std::ios::trunc);
    if (!out) throw ArchiveError("archive: cannot open " + manifest_tmp.string());
    out << manifest.dump(2) << '\n';
    if (!out) throw ArchiveError("archive: write failed for " + manifest_tmp.string());
  }
  replace_file(data_tmp, dir / kData);
  replace_file(manifest_tmp, dir / kManifest);
}

TensorMap read_archive(const fs::path& dir, json* metadata) {
  const auto manifest_path = dir / kManifest;
  std::ifstream min(manifest_path);
  if (!min) throw ArchiveError("archive: missing " + manifest_path.string());

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
    std::uint64_t nbytes;
  };
  std::vector<Entry> entries;
  json manifest;
  std::string data_file;
  try {
    manifest = json::parse(min);
    if (manifest.at("format").get<std::string>() != kArchiveFormat) {
      throw ArchiveError("archive: unknown format '" + manifest.at("format").get<std::string>() + "'");
    }
    const int version = manifest.at("version").get<int>();
    if (version != kArchiveVersion) {
      throw ArchiveError("archive: version mismatch (file " + std::to_string(version) + ", supported " +
                         std::to_string(kArchiveVersion) + ")");
    }
    if (manifest.at("byte_order").get<std::string>() != "little") throw ArchiveError("archive: unsupported byte order");
    data_file = manifest.at("data_file").get<std::string>();
    for (const auto& [name, e] : manifest.at("tensors").items()) {
      if (e.at("dtype").get<std::string>() != "float64") {
        throw ArchiveError("archive: tensor '" + name + "' has unsupported dtype");
      }
      Entry entry{name, e.at("shape").get<Shape>(), e.at("offset").get<std::uint64_t>(),
                  e.at("nbytes").get<std::uint64_t>()};
      if (entry.nbytes != shape_numel(entry.shape) * sizeof(double)) {
        throw ArchiveError("archive: tensor '" + name + "' byte count disagrees with its shape");
      }
      entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw ArchiveError("archive: corrupted manifest " + manifest_path.string() + ": " + e.what());
  }

  const auto data_path = dir / data_file;
  std::error_code ec;
  const auto size = fs::file_size(data_path, ec);
  if (ec) throw ArchiveError("archive: missing data file " + data_path.string());
  for (const auto& e : entries) {
    if (e.offset + e.nbytes > size) throw ArchiveError("archive: tensor '" + e.name + "' extends past end of data");
  }

  std::ifstream din(data_path, std::ios::binary);
  std::vector<char> bytes(size);
  if (!din.read(bytes.data(), static_cast<std::streamsize>(size))) {
    throw ArchiveError("archive: short read on " + data_path.string());
  }

  TensorMap out;
  for (const auto& e : entries) {
    std::vector<double> values(e.nbytes / sizeof(double));
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + e.offset + i * sizeof bits, sizeof bits);
      values[i] = std::bit_cast<double>(to_little(bits));
    }
    out.emplace(e.name, Tensor(e.shape, std::move(values)));
  }
  if (metadata) *metadata = manifest.value("metadata", json::object());
  return out;
}

}  // namespace ibke
