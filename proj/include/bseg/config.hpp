#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "bseg/error.hpp"
#include "bseg/network.hpp"
#include "bseg/objective.hpp"
#include "bseg/trainer.hpp"

namespace bseg {

struct RunConfig {
  NetConfig net;
  TrainConfig train;
  LossWeights loss;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) fail(ErrorCode::BadConfig, key + ": not a number: " + v);
  return out;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  unsigned long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    fail(ErrorCode::BadConfig, key + ": not a non-negative integer: " + v);
  return static_cast<std::size_t>(out);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorCode::BadConfig, key + ": expected true/false, got " + v);
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> setters = {
      {"in_channels", [](RunConfig& c, auto& k, auto& v) { c.net.in_channels = parse_count(k, v); }},
      {"base_channels", [](RunConfig& c, auto& k, auto& v) { c.net.base_channels = parse_count(k, v); }},
      {"depth", [](RunConfig& c, auto& k, auto& v) { c.net.depth = parse_count(k, v); }},
      {"latent_dim", [](RunConfig& c, auto& k, auto& v) { c.net.latent_dim = parse_count(k, v); }},
      {"skip_connections", [](RunConfig& c, auto& k, auto& v) { c.net.skip_connections = parse_bool(k, v); }},
      {"bayesian_weights", [](RunConfig& c, auto& k, auto& v) { c.net.bayesian_weights = parse_bool(k, v); }},
      {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.batch_size = parse_count(k, v); }},
      {"optimizer", [](RunConfig& c, auto&, auto& v) { c.train.optimizer = parse_optimizer(v); }},
      {"learning_rate", [](RunConfig& c, auto& k, auto& v) { c.train.learning_rate = parse_real(k, v); }},
      {"momentum", [](RunConfig& c, auto& k, auto& v) { c.train.momentum = parse_real(k, v); }},
      {"weight_decay", [](RunConfig& c, auto& k, auto& v) { c.train.weight_decay = parse_real(k, v); }},
      {"scheduler", [](RunConfig& c, auto&, auto& v) { c.train.scheduler = parse_scheduler(v); }},
      {"plateau_patience", [](RunConfig& c, auto& k, auto& v) { c.train.plateau_patience = parse_count(k, v); }},
      {"plateau_factor", [](RunConfig& c, auto& k, auto& v) { c.train.plateau_factor = parse_real(k, v); }},
      {"cyclical_gamma", [](RunConfig& c, auto& k, auto& v) { c.train.cyclical_gamma = parse_real(k, v); }},
      {"cyclical_period", [](RunConfig& c, auto& k, auto& v) { c.train.cyclical_period = parse_count(k, v); }},
      {"max_epochs", [](RunConfig& c, auto& k, auto& v) { c.train.max_epochs = parse_count(k, v); }},
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.train.seed = parse_count(k, v); }},
      {"mc_train_samples", [](RunConfig& c, auto& k, auto& v) { c.train.mc_train_samples = parse_count(k, v); }},
      {"val_fraction", [](RunConfig& c, auto& k, auto& v) { c.train.val_fraction = parse_real(k, v); }},
      {"latent_lr_multiplier",
       [](RunConfig& c, auto& k, auto& v) { c.train.latent_lr_multiplier = parse_real(k, v); }},
      {"use_nll", [](RunConfig& c, auto& k, auto& v) { c.train.use_nll = parse_bool(k, v); }},
      {"nll_samples", [](RunConfig& c, auto& k, auto& v) { c.train.nll_samples = parse_count(k, v); }},
      {"dice_smooth", [](RunConfig& c, auto& k, auto& v) { c.train.dice_smooth = parse_real(k, v); }},
      {"dice_weight", [](RunConfig& c, auto& k, auto& v) { c.loss.dice_weight = parse_real(k, v); }},
      {"ce_weight", [](RunConfig& c, auto& k, auto& v) { c.loss.ce_weight = parse_real(k, v); }},
      {"kl_weight_weights", [](RunConfig& c, auto& k, auto& v) { c.loss.kl_weight_weights = parse_real(k, v); }},
      {"kl_weight_latent", [](RunConfig& c, auto& k, auto& v) { c.loss.kl_weight_latent = parse_real(k, v); }},
  };
  return setters;
}

}  // namespace detail

/// Parses flat `key = value` lines. '#' starts a comment; blank lines are
/// ignored; an unknown key or malformed line is a BadConfig error naming it.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  const auto& setters = detail::config_setters();
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::BadConfig, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) fail(ErrorCode::BadConfig, "unknown config key '" + key + "'");
    if (value.empty()) fail(ErrorCode::BadConfig, "config key '" + key + "' has no value");
    it->second(base, key, value);
  }
  base.net.validate();
  base.train.validate();
  base.loss.validate();
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::config_setters()) keys.push_back(k);
  return keys;
}

}  // namespace bseg
