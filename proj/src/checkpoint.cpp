#include "hiedit/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hiedit/error.hpp"

namespace hiedit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_container(const std::filesystem::path& path, const Container& c) {
  nlohmann::json header;
  header["config"] = c.config;
  header["arrays"] = nlohmann::json::array();
  for (const auto& name : c.arrays.names())
    header["arrays"].push_back({{"name", name}, {"shape", c.arrays.at(name).shape}});
  std::string bytes = c.tag + "\n" + header.dump() + "\n";
  for (const auto& name : c.arrays.names()) {
    const auto& v = c.arrays.at(name).value;
    const std::size_t off = bytes.size();
    bytes.resize(off + v.size() * sizeof(double));
    std::memcpy(bytes.data() + off, v.data(), v.size() * sizeof(double));
  }
  write_file_atomic(path, bytes);
}

Container load_container(const std::filesystem::path& path, std::string_view expected_tag) {
  const std::string bytes = read_file(path);
  const auto nl1 = bytes.find('\n');
  if (nl1 == std::string::npos) throw ParseError(1, path.string() + ": missing format tag");
  Container c;
  c.tag = bytes.substr(0, nl1);
  if (c.tag != expected_tag)
    throw ParseError(1, path.string() + ": expected format '" + std::string(expected_tag) + "', found '" + c.tag + "'");
  const auto nl2 = bytes.find('\n', nl1 + 1);
  if (nl2 == std::string::npos) throw ParseError(2, path.string() + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(2, path.string() + ": bad header: " + e.what());
  }
  c.config = header.value("config", nlohmann::json::object());
  std::size_t off = nl2 + 1;
  for (const auto& a : header.at("arrays")) {
    const auto name = a.at("name").get<std::string>();
    const auto shape = a.at("shape").get<ad::Shape>();
    const std::size_t n = ad::shape_size(shape);
    if (off + n * sizeof(double) > bytes.size())
      throw ParseError(3, path.string() + ": truncated data for array '" + name + "'");
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes.data() + off, n * sizeof(double));
    off += n * sizeof(double);
    c.arrays.add(name, shape, std::move(v));
  }
  if (off != bytes.size()) throw ParseError(3, path.string() + ": trailing bytes after last array");
  return c;
}

}  // namespace hiedit
