#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "qmrs/error.hpp"
#include "qmrs/model.hpp"
#include "qmrs/training.hpp"

// Flat `key = value` configuration with dotted keys. Files override the
// defaults, `--set key=value` overrides the file. Unknown keys are errors.
namespace qmrs::io {

struct DataConfig {
  std::size_t n = 500;
  std::uint64_t seed = 7;
  int image_size = 128;
  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  std::size_t warmup = 5;
  std::size_t repeats = 3;
  bool operator==(const EvalConfig&) const = default;
};

struct Config {
  model::ModelConfig model;
  train::TrainConfig train;
  DataConfig data;
  EvalConfig eval;

  void validate() const {
    model.validate();
    train.validate();
    if (data.n < 10) raise<ConfigError>("data.n must be at least 10");
    if (data.image_size < 64 || data.image_size % 32) raise<ConfigError>("data.image_size must be >= 64 and a multiple of 32");
    if (eval.repeats == 0) raise<ConfigError>("eval.repeats must be positive");
  }
  bool operator==(const Config&) const = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) raise<ConfigError>("config key '", key, "': cannot parse '", text, "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  raise<ConfigError>("config key '", key, "': expected true or false, got '", text, "'");
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

// Key → accessor table, in canonical output order.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    auto integer = [&](const std::string& key, auto project) {
      using V = std::remove_cvref_t<decltype(project(std::declval<Config&>()))>;
      t.push_back({key,
                   {[project](const Config& c) { return std::to_string(project(c)); },
                    [project, key](Config& c, const std::string& s) { project(c) = parse_number<V>(key, s); }}});
    };
    auto real = [&](const std::string& key, auto project) {
      using V = std::remove_cvref_t<decltype(project(std::declval<Config&>()))>;
      t.push_back({key,
                   {[project](const Config& c) { return format_double(project(c)); },
                    [project, key](Config& c, const std::string& s) { project(c) = static_cast<V>(parse_number<double>(key, s)); }}});
    };
    auto boolean = [&](const std::string& key, auto project) {
      t.push_back({key,
                   {[project](const Config& c) { return std::string(project(c) ? "true" : "false"); },
                    [project, key](Config& c, const std::string& s) { project(c) = parse_bool(key, s); }}});
    };
    integer("model.width", [](auto& c) -> auto& { return c.model.width; });
    integer("model.heads", [](auto& c) -> auto& { return c.model.heads; });
    integer("model.layers", [](auto& c) -> auto& { return c.model.layers; });
    integer("model.channels", [](auto& c) -> auto& { return c.model.channels; });
    real("model.threshold", [](auto& c) -> auto& { return c.model.threshold; });
    integer("model.node_cap", [](auto& c) -> auto& { return c.model.node_cap; });
    real("train.lr", [](auto& c) -> auto& { return c.train.lr; });
    real("train.beta1", [](auto& c) -> auto& { return c.train.beta1; });
    real("train.beta2", [](auto& c) -> auto& { return c.train.beta2; });
    real("train.adam_eps", [](auto& c) -> auto& { return c.train.adam_eps; });
    integer("train.epochs", [](auto& c) -> auto& { return c.train.epochs; });
    integer("train.batch", [](auto& c) -> auto& { return c.train.batch; });
    integer("train.seed", [](auto& c) -> auto& { return c.train.seed; });
    integer("train.teacher_epochs", [](auto& c) -> auto& { return c.train.teacher_epochs; });
    boolean("train.refine_context", [](auto& c) -> auto& { return c.train.refine_context; });
    boolean("train.augment", [](auto& c) -> auto& { return c.train.augment; });
    real("train.lambda_detect", [](auto& c) -> auto& { return c.train.weights.detect; });
    real("train.lambda_coarse", [](auto& c) -> auto& { return c.train.weights.coarse; });
    real("train.lambda_refine", [](auto& c) -> auto& { return c.train.weights.refine; });
    real("train.lambda_inc", [](auto& c) -> auto& { return c.train.weights.inc; });
    integer("data.n", [](auto& c) -> auto& { return c.data.n; });
    integer("data.seed", [](auto& c) -> auto& { return c.data.seed; });
    integer("data.image_size", [](auto& c) -> auto& { return c.data.image_size; });
    integer("eval.warmup", [](auto& c) -> auto& { return c.eval.warmup; });
    integer("eval.repeats", [](auto& c) -> auto& { return c.eval.repeats; });
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : detail::fields()) keys.push_back(k);
  return keys;
}

inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  for (const auto& [k, f] : detail::fields()) {
    if (k == key) {
      f.set(c, value);
      return;
    }
  }
  raise<ConfigError>("unknown config key '", key, "'");
}

// "key=value" as given to --set.
inline void apply_override(Config& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) raise<ConfigError>("override '", assignment, "' is not of the form key=value");
  set_config_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

// Applies `key = value` lines on top of `base`; '#' starts a comment.
inline Config parse_config(const std::string& text, Config base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    if (body.find('=') == std::string::npos) raise<ConfigError>("config line ", lineno, ": expected key = value");
    apply_override(base, body);
  }
  return base;
}

inline Config load_config(const std::filesystem::path& path, Config base = {}) {
  std::ifstream f(path);
  if (!f) raise<ConfigError>("cannot open config file ", path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// Canonical text: every key, in table order. parse_config(to_text(c)) == c.
inline std::string to_text(const Config& c) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace qmrs::io
