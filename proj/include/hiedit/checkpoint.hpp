#pragma once

// Versioned checkpoint container shared by the model and editor files.
//
//   line 1   format tag, e.g. "toylm-v1"
//   line 2   one-line JSON header: {"config": {...}, "arrays": [{"name", "shape"}...]}
//   rest     every array as little-endian IEEE-754 float64, in header order

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "hiedit/params.hpp"

namespace hiedit {

struct Container {
  std::string tag;
  nlohmann::json config;
  ParamStore arrays;
};

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path, std::string_view expected_tag);

// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace hiedit
