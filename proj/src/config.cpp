#include "mismatch/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "mismatch/errors.hpp"
#include "mismatch/util.hpp"

namespace mismatch {

std::string_view to_string(AugmentPolicy policy) {
  switch (policy) {
    case AugmentPolicy::automatic: return "auto";
    case AugmentPolicy::on: return "on";
    case AugmentPolicy::off: return "off";
  }
  return "auto";
}

AugmentPolicy parse_augment_policy(std::string_view name) {
  if (name == "auto") return AugmentPolicy::automatic;
  if (name == "on") return AugmentPolicy::on;
  if (name == "off") return AugmentPolicy::off;
  throw ConfigError("unknown augmentation policy '" + std::string(name) + "'");
}

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("bad value '" + std::string(value) + "' for " + std::string(key));
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("bad boolean '" + std::string(value) + "' for " + std::string(key));
}

struct Entry {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Field>
Entry number(std::string key, Field field) {
  return {key,
          [key, field](RunConfig& c, std::string_view v) { field(c) = parse_number<T>(key, v); },
          [field](const RunConfig& c) {
            const T v = field(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(v);
            } else {
              return std::to_string(v);
            }
          }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back(number<std::size_t>("model.width", [](RunConfig& c) -> auto& { return c.width; }));
    t.push_back(number<double>("train.lr", [](RunConfig& c) -> auto& { return c.train.lr; }));
    t.push_back(number<std::int64_t>("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
    t.push_back(number<std::size_t>("train.batch_size",
                                    [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    t.push_back(number<std::uint64_t>("train.seed", [](RunConfig& c) -> auto& { return c.train.seed; }));
    t.push_back(number<std::size_t>("train.save_last_k",
                                    [](RunConfig& c) -> auto& { return c.train.save_last_k; }));
    t.push_back(number<double>("loss.alpha_max",
                               [](RunConfig& c) -> auto& { return c.train.alpha.alpha_max; }));
    t.push_back({"loss.alpha_schedule",
                 [](RunConfig& c, std::string_view v) { c.train.alpha.schedule = train::parse_alpha_schedule(v); },
                 [](const RunConfig& c) { return std::string(train::to_string(c.train.alpha.schedule)); }});
    t.push_back(number<double>("loss.warmup_fraction",
                               [](RunConfig& c) -> auto& { return c.train.alpha.warmup_fraction; }));
    t.push_back({"loss.stop_gradient",
                 [](RunConfig& c, std::string_view v) { c.train.stop_gradient = train::parse_stop_gradient_mode(v); },
                 [](const RunConfig& c) { return std::string(train::to_string(c.train.stop_gradient)); }});
    t.push_back(number<double>("loss.dice_smooth",
                               [](RunConfig& c) -> auto& { return c.train.dice_smooth; }));
    t.push_back(number<std::size_t>("data.crop", [](RunConfig& c) -> auto& { return c.crop; }));
    t.push_back(number<std::size_t>("data.min_foreground",
                                    [](RunConfig& c) -> auto& { return c.min_foreground; }));
    t.push_back(number<std::size_t>("data.unlabelled_slices",
                                    [](RunConfig& c) -> auto& { return c.unlabelled_slices; }));
    t.push_back({"data.augment",
                 [](RunConfig& c, std::string_view v) { c.augment = parse_augment_policy(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.augment)); }});
    t.push_back(number<double>("data.augment_noise_sigma",
                               [](RunConfig& c) -> auto& { return c.augment_noise_sigma; }));
    t.push_back({"data.augment_flip",
                 [](RunConfig& c, std::string_view v) { c.augment_flip = parse_bool("data.augment_flip", v); },
                 [](const RunConfig& c) { return std::string(c.augment_flip ? "true" : "false"); }});
    t.push_back(number<double>("eval.threshold", [](RunConfig& c) -> auto& { return c.threshold; }));
    t.push_back(number<std::size_t>("eval.bins", [](RunConfig& c) -> auto& { return c.bins; }));
    t.push_back({"eval.confidence",
                 [](RunConfig& c, std::string_view v) { c.confidence = metrics::parse_confidence_mode(v); },
                 [](const RunConfig& c) { return std::string(metrics::to_string(c.confidence)); }});
    return t;
  }();
  return table;
}

const Entry& find(std::string_view key) {
  for (const auto& e : entries()) {
    if (e.key == key) return e;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  find(key).set(*this, trim(value));
}

std::string RunConfig::get(std::string_view key) const { return find(key).get(*this); }

std::vector<std::pair<std::string, std::string>> RunConfig::echo() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : entries()) out.emplace_back(e.key, e.get(*this));
  return out;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return names;
}

void RunConfig::validate() const {
  if (width < 1) throw ConfigError("model.width must be at least 1");
  train.validate();
  if (!(augment_noise_sigma >= 0.0)) throw ConfigError("data.augment_noise_sigma must be >= 0");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("eval.threshold must lie in [0, 1]");
  if (bins < 1) throw ConfigError("eval.bins must be at least 1");
}

RunConfig parse_config(std::string_view text, std::string_view origin) {
  RunConfig config;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      config.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  config.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace mismatch
