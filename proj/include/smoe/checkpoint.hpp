// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smoe/model.hpp"
#include "smoe/tensor.hpp"

namespace smoe {

inline constexpr std::string_view kModelMagic = "SMOE-CKPT-v1";

/// Text container of named tensors with a key/value header:
///
///   <magic>
///   meta <key> <value>
///   tensor <name> <rank> <extent>...
///   <values, %.17g, space separated>
///   end
struct TensorFile {
  std::string magic;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  /// Throws ParseError when the key is missing.
  const std::string& meta_value(std::string_view key) const;
  const Tensor* find(std::string_view name) const;
};

void write_tensor_file(std::ostream& out, const TensorFile& file);
TensorFile read_tensor_file(std::istream& in, std::string_view expected_magic);

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path, std::string_view expected_magic);

void save_model(const std::filesystem::path& path, const BaseModel& model);
BaseModel load_model(const std::filesystem::path& path);

/// Shared helpers for the text formats.
std::string format_double(double value);
std::size_t parse_count(std::string_view text, std::string_view what);
double parse_double(std::string_view text, std::string_view what);

}  // namespace smoe
