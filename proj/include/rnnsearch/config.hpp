// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "rnnsearch/error.hpp"
#include "rnnsearch/model.hpp"
#include "rnnsearch/trainer.hpp"

namespace rnnsearch {

/// Settings for one training run. Defaults are the published training setup
/// (minibatch 80, buckets of 1600, clipping at 1, Adadelta 0.95 / 1e-6) with
/// desk-scale network sizes.
struct RunConfig {
  std::size_t hidden = 32;
  std::size_t embed = 16;
  std::size_t maxout = 16;
  std::size_t align = 32;
  std::size_t vocab_size = 30000;  // shortlist per language
  std::size_t batch = 80;
  std::size_t bucket = 1600;
  double clip = 1.0;
  double rho = 0.95;
  double epsilon = 1e-6;
  std::uint64_t seed = 1234;
  std::size_t epochs = 10;
  std::size_t max_length = 50;  // 0 keeps every pair
  std::size_t beam = 12;
  int precision = 32;
  ContextMode context = ContextMode::attention;
  std::size_t dev_interval = 0;
  std::optional<std::size_t> max_updates;

  TrainConfig train_config() const {
    TrainConfig t;
    t.dims = {hidden, embed, maxout, align, 0, 0};
    t.mode = context;
    t.batch = batch;
    t.bucket = bucket;
    t.clip = clip;
    t.rho = rho;
    t.epsilon = epsilon;
    t.epochs = epochs;
    t.max_updates = max_updates;
    t.dev_interval = dev_interval;
    t.seed = seed;
    return t;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value, std::size_t line) {
  T out{};
  const auto* end = value.data() + value.size();
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars for doubles is missing on some toolchains; istringstream is exact enough here.
    std::istringstream ss(value);
    ss >> out;
    if (!ss || !ss.eof()) throw UsageError(concat("config line ", line, ": bad number for ", key, ": '", value, "'"));
    return out;
  } else {
    const auto res = std::from_chars(value.data(), end, out);
    if (res.ec != std::errc() || res.ptr != end) {
      throw UsageError(concat("config line ", line, ": bad integer for ", key, ": '", value, "'"));
    }
    return out;
  }
}

}  // namespace detail

/// `key = value` lines; `#` starts a comment. Unknown or repeated keys are errors.
inline RunConfig parse_config(std::istream& in) {
  RunConfig c;
  std::set<std::string> seen;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const auto text = detail::trim(raw);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw UsageError(detail::concat("config line ", line, ": expected key = value"));
    const auto key = detail::trim(text.substr(0, eq));
    const auto value = detail::trim(text.substr(eq + 1));
    if (key.empty() || value.empty()) throw UsageError(detail::concat("config line ", line, ": empty key or value"));
    if (!seen.insert(key).second) throw UsageError(detail::concat("config line ", line, ": duplicate key '", key, "'"));

    auto size = [&] { return detail::parse_number<std::size_t>(key, value, line); };
    auto positive = [&] {
      const auto v = size();
      if (v == 0) throw UsageError(detail::concat("config line ", line, ": ", key, " must be positive"));
      return v;
    };
    auto real = [&] { return detail::parse_number<double>(key, value, line); };

    if (key == "hidden") c.hidden = positive();
    else if (key == "embed") c.embed = positive();
    else if (key == "maxout") c.maxout = positive();
    else if (key == "align") c.align = positive();
    else if (key == "vocab_size") c.vocab_size = positive();
    else if (key == "batch") c.batch = positive();
    else if (key == "bucket") c.bucket = positive();
    else if (key == "clip") c.clip = real();
    else if (key == "rho") c.rho = real();
    else if (key == "epsilon") c.epsilon = real();
    else if (key == "seed") c.seed = detail::parse_number<std::uint64_t>(key, value, line);
    else if (key == "epochs") c.epochs = size();
    else if (key == "max_length") c.max_length = size();
    else if (key == "beam") c.beam = positive();
    else if (key == "dev_interval") c.dev_interval = size();
    else if (key == "max_updates") c.max_updates = size();
    else if (key == "precision") {
      c.precision = detail::parse_number<int>(key, value, line);
      if (c.precision != 32 && c.precision != 64) {
        throw UsageError(detail::concat("config line ", line, ": precision must be 32 or 64"));
      }
    } else if (key == "context") {
      if (value == "attention") c.context = ContextMode::attention;
      else if (value == "fixed") c.context = ContextMode::fixed;
      else throw UsageError(detail::concat("config line ", line, ": context must be attention or fixed"));
    } else {
      throw UsageError(detail::concat("config line ", line, ": unknown key '", key, "'"));
    }
  }
  if (!(c.clip > 0)) throw UsageError("config: clip must be positive");
  if (!(c.rho > 0 && c.rho < 1)) throw UsageError("config: rho must lie in (0, 1)");
  if (!(c.epsilon > 0)) throw UsageError("config: epsilon must be positive");
  if (c.bucket % c.batch != 0) throw UsageError("config: batch must divide bucket");
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(detail::concat("cannot open config ", path.string()));
  return parse_config(in);
}

}  // namespace rnnsearch
