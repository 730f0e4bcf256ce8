#include "movelab/runconfig.hpp"

#include <fstream>
#include <stdexcept>

namespace movelab {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  const auto end = s.find_last_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  return s.substr(begin, end - begin + 1);
}

}  // namespace

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config file not found: " + path.string());
  RunConfig cfg;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key = value, got '" +
                                  stripped + "'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": empty key");
    cfg.entries_[key] = value;
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) { entries_[key] = value; }

bool RunConfig::has(const std::string& key) const { return entries_.count(key) > 0; }

std::string RunConfig::get_str(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw std::invalid_argument("config key '" + key + "' is required but missing");
  return it->second;
}

std::string RunConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string v = get_str(key);
  try {
    return std::stoll(v);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' is not an integer: '" + v + "'");
  }
}

int64_t RunConfig::get_int(const std::string& key, int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string v = get_str(key);
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' is not a number: '" + v + "'");
  }
}

double RunConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

void RunConfig::write_manifest(const std::filesystem::path& path, const std::string& tool_version) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
  out << "# resolved run manifest\n";
  out << "tool_version = " << tool_version << "\n";
  for (const auto& [key, value] : entries_) out << key << " = " << value << "\n";
  if (!out) throw std::runtime_error("manifest write failed: " + path.string());
}

}  // namespace movelab
