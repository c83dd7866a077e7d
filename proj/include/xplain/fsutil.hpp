#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>

#include "xplain/error.hpp"

namespace xplain::fs {

namespace stdfs = std::filesystem;

// Write to a sibling temp file, then rename over the target so readers never
// see a partial file.
inline void write_file_atomic(const stdfs::path& path, const std::string& content) {
  static std::atomic<unsigned long> counter{0};
  std::error_code ec;
  if (path.has_parent_path()) stdfs::create_directories(path.parent_path(), ec);
  const auto tmp = path.string() + ".tmp." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) +
                   "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp);
    out << content;
    out.flush();
    if (!out) throw Error(ErrorCode::Io, "short write to " + tmp);
  }
  stdfs::rename(tmp, path, ec);
  if (ec) {
    stdfs::remove(tmp);
    throw Error(ErrorCode::Io, "cannot rename into " + path.string() + ": " + ec.message());
  }
}

}  // namespace xplain::fs
