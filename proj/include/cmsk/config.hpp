#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cmsk {

// Line-oriented key=value configuration with '#' comments and namespaced
// keys (model.variant, train.lr, vote.alpha, ...).
using Config = std::map<std::string, std::string>;

Config parse_config(const std::string& text);
Config load_config(const std::string& path);
// Apply "key=value" strings on top of an existing config.
void apply_overrides(Config& cfg, const std::vector<std::string>& overrides);

std::string cfg_str(const Config& cfg, const std::string& key,
                    const std::string& fallback);
int64_t cfg_int(const Config& cfg, const std::string& key, int64_t fallback);
double cfg_double(const Config& cfg, const std::string& key, double fallback);
bool cfg_bool(const Config& cfg, const std::string& key, bool fallback);

// Canonical serialized form (sorted keys), used in reproducibility stanzas.
std::string config_to_text(const Config& cfg);

}  // namespace cmsk
