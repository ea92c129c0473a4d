#include "cmsk/config.hpp"

#include <fstream>
#include <sstream>

#include "cmsk/tensor.hpp"  // for check()

namespace cmsk {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

void parse_line(Config& cfg, std::string line, int lineno) {
  auto hash = line.find('#');
  if (hash != std::string::npos) line = line.substr(0, hash);
  line = trim(line);
  if (line.empty()) return;
  auto eq = line.find('=');
  check(eq != std::string::npos,
        "config line " + std::to_string(lineno) + " is not key=value: " + line);
  std::string key = trim(line.substr(0, eq));
  check(!key.empty(), "config line " + std::to_string(lineno) + " has no key");
  cfg[key] = trim(line.substr(eq + 1));
}

}  // namespace

Config parse_config(const std::string& text) {
  Config cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) parse_line(cfg, line, ++lineno);
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream is(path);
  check(bool(is), "cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

void apply_overrides(Config& cfg, const std::vector<std::string>& overrides) {
  int lineno = 0;
  for (const std::string& ov : overrides) parse_line(cfg, ov, ++lineno);
}

std::string cfg_str(const Config& cfg, const std::string& key,
                    const std::string& fallback) {
  auto it = cfg.find(key);
  return it == cfg.end() ? fallback : it->second;
}

int64_t cfg_int(const Config& cfg, const std::string& key, int64_t fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  try {
    size_t pos = 0;
    int64_t v = std::stoll(it->second, &pos);
    check(pos == it->second.size(), "");
    return v;
  } catch (const std::logic_error&) {
    check(false, "config key " + key + " is not an integer: " + it->second);
  }
  return fallback;  // unreachable
}

double cfg_double(const Config& cfg, const std::string& key, double fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    check(pos == it->second.size(), "");
    return v;
  } catch (const std::logic_error&) {
    check(false, "config key " + key + " is not a number: " + it->second);
  }
  return fallback;  // unreachable
}

bool cfg_bool(const Config& cfg, const std::string& key, bool fallback) {
  auto it = cfg.find(key);
  if (it == cfg.end()) return fallback;
  const std::string& v = it->second;
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  check(false, "config key " + key + " is not a boolean: " + v);
  return fallback;  // unreachable
}

std::string config_to_text(const Config& cfg) {
  std::ostringstream os;
  for (const auto& [k, v] : cfg) os << k << "=" << v << "\n";
  return os.str();
}

}  // namespace cmsk
