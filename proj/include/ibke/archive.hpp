// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor archive: a directory holding manifest.json (name -> shape, dtype,
// byte offset, byte count) and one little-endian float64 buffer file.

#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "ibke/tensor.hpp"

namespace ibke {

inline constexpr int kArchiveVersion = 1;
inline constexpr const char* kArchiveFormat = "ibke-tensor-archive";

using TensorMap = std::map<std::string, Tensor>;

/// Writes `tensors` (in name order) plus free-form metadata into `dir`.
/// Files are written to temporaries and renamed into place.
void write_archive(const std::filesystem::path& dir, const TensorMap& tensors,
                   const nlohmann::json& metadata = nlohmann::json::object());

/// Reads an archive. The manifest is validated completely before any tensor
/// is materialized; on failure ArchiveError is thrown and nothing is returned.
TensorMap read_archive(const std::filesystem::path& dir, nlohmann::json* metadata = nullptr);

}  // namespace ibke
