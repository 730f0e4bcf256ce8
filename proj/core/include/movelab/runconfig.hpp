#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace movelab {

/// Key = value run configuration. Files are line oriented: blank lines and
/// `#` comments are ignored; later keys override earlier ones; CLI flags
/// override file keys. The resolved union is written back as the run
/// manifest, so a run is reproducible from its manifest alone.
class RunConfig {
 public:
  RunConfig() = default;
  static RunConfig from_file(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

  void write_manifest(const std::filesystem::path& path, const std::string& tool_version) const;

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace movelab
