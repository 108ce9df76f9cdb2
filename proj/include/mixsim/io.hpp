#pragma once

// Output helpers. Numbers are written with "%.17g" so that files round-trip
// exactly and repeated runs are byte-identical.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixsim/errors.hpp"

namespace mixsim::io {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    for (std::size_t k = 0; k < header.size(); ++k) out_ << (k ? "," : "") << header[k];
    out_ << '\n';
  }

  /// Writes one row; integers are passed as doubles and print without a fraction.
  void row(const std::vector<double>& values) {
    for (std::size_t k = 0; k < values.size(); ++k) out_ << (k ? "," : "") << fmt(values[k]);
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// Writes via a temporary sibling and renames, so readers never see a
/// partially written file.
inline void write_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  write_text(tmp, text);
  std::filesystem::rename(tmp, path);
}

struct RunManifest {
  std::string config_path;
  std::string command;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::string tool_version;
  double wall_time = 0.0;  // s

  nlohmann::json to_json() const {
    return {{"config_path", config_path}, {"command", command},           {"seed", seed},
            {"output_dir", output_dir},   {"tool_version", tool_version}, {"wall_time", wall_time}};
  }
};

inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  write_atomic(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

}  // namespace mixsim::io
