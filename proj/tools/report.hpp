#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace mad::cli {

std::string sha1_hex(const std::string& bytes);
/// Hash of "blob <size>\0<bytes>", as git computes it.
std::string blob_sha1(const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

/// Output directory with an append-only manifest of everything written.
class RunDir {
 public:
  /// Throws ParameterError when the directory exists and force is false.
  RunDir(std::filesystem::path path, bool force);

  const std::filesystem::path& path() const { return path_; }
  void write(const std::string& name, const std::string& bytes);
  void input(const std::string& role, const std::filesystem::path& file);
  /// manifest.json: command, config hash, seed, inputs and outputs with blob hashes.
  void finish(const std::string& command, const std::string& config_hash, std::uint64_t seed);

 private:
  std::filesystem::path path_;
  std::vector<std::pair<std::string, std::string>> outputs_;                 // name, hash
  std::vector<std::tuple<std::string, std::string, std::string>> inputs_;  // role, path, hash
};

struct Series {
  std::string label;
  std::vector<double> x, y;
};

/// Line chart with axes and ticks; every series drawn as one polyline.
std::string svg_lines(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                      const std::vector<Series>& series, bool diagonal = false);
/// Overlaid histograms over a shared range.
std::string svg_histograms(const std::string& title, const std::vector<std::pair<std::string, std::vector<double>>>& groups,
                           int bins = 30);

}  // namespace mad::cli
