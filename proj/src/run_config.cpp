#include "dfpf/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dfpf/errors.hpp"

namespace dfpf {

std::filesystem::path RunConfig::effective_run_dir() const {
  return run_dir.empty() ? std::filesystem::path("runs") / run_name : std::filesystem::path(run_dir);
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.synthetic_pairs < 1) throw ConfigError("data.synthetic_pairs must be at least 1");
  if (data.synthetic_size < 32 || data.synthetic_size % 32 != 0) {
    throw ConfigError("data.synthetic_size must be a positive multiple of 32");
  }
  if (!(data.change_rate >= 0 && data.change_rate <= 1)) throw ConfigError("data.change_rate must lie in [0, 1]");
  if (data.tile < 32 || data.tile % 32 != 0) throw ConfigError("data.tile must be a positive multiple of 32");
  if (data.random_crops < 0) throw ConfigError("data.random_crops must be nonnegative");
  if (run_name.empty() || run_name.find('/') != std::string::npos) throw ConfigError("run.name must be a plain name");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError(key + ": expected " + expected + ", got '" + value + "'");
}

long long to_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v, "an integer");
  }
  if (pos != v.size()) bad_value(key, v, "an integer");
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    bad_value(key, v, "a number");
  }
  if (pos != v.size()) bad_value(key, v, "a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::array<int, kLevels> to_quad(const std::string& key, const std::string& v) {
  std::array<int, kLevels> out{};
  std::stringstream ss(v);
  std::string item;
  int n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == kLevels) bad_value(key, v, "four comma-separated integers");
    out[n++] = static_cast<int>(to_int(key, trim(item)));
  }
  if (n != kLevels) bad_value(key, v, "four comma-separated integers");
  return out;
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_quad(const std::array<int, kLevels>& a) {
  return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," + std::to_string(a[3]);
}

struct Field {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_FIELD(expr)                                                                                              \
  Field {                                                                                                            \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = static_cast<decltype(c.expr)>(to_int(k, v)); }, \
        [](const RunConfig& c) { return std::to_string(c.expr); }                                                    \
  }
#define REAL_FIELD(expr)                                                                                  \
  Field {                                                                                                 \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = to_real(k, v); },             \
        [](const RunConfig& c) { return fmt_real(c.expr); }                                               \
  }
#define BOOL_FIELD(expr)                                                                                  \
  Field {                                                                                                 \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = to_bool(k, v); },             \
        [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }                         \
  }
#define QUAD_FIELD(expr)                                                                                  \
  Field {                                                                                                 \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = to_quad(k, v); },             \
        [](const RunConfig& c) { return fmt_quad(c.expr); }                                               \
  }
#define STRING_FIELD(expr)                                                                                \
  Field {                                                                                                 \
    [](RunConfig& c, const std::string&, const std::string& v) { c.expr = v; },                           \
        [](const RunConfig& c) { return c.expr; }                                                         \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"model.encoder.channels", QUAD_FIELD(model.encoder.channels)},
      {"model.encoder.depths", QUAD_FIELD(model.encoder.depths)},
      {"model.encoder.heads", QUAD_FIELD(model.encoder.heads)},
      {"model.encoder.sr_ratios", QUAD_FIELD(model.encoder.sr_ratios)},
      {"model.encoder.mlp_ratio", REAL_FIELD(model.encoder.mlp_ratio)},
      {"model.num_agents", INT_FIELD(model.num_agents)},
      {"model.phi", Field{[](RunConfig& c, const std::string&, const std::string& v) { c.model.phi = parse_phi(v); },
                          [](const RunConfig& c) { return to_string(c.model.phi); }}},
      {"model.agent_bias", BOOL_FIELD(model.agent_bias)},
      {"model.use_pefm", BOOL_FIELD(model.use_pefm)},
      {"model.use_dcfm", BOOL_FIELD(model.use_dcfm)},
      {"model.dcfm_variant",
       Field{[](RunConfig& c, const std::string&, const std::string& v) { c.model.dcfm_variant = parse_variant(v); },
             [](const RunConfig& c) { return to_string(c.model.dcfm_variant); }}},
      {"model.decoder_reduction", INT_FIELD(model.decoder_reduction)},
      {"model.threshold", REAL_FIELD(model.threshold)},
      {"train.epochs", INT_FIELD(train.epochs)},
      {"train.lr0", REAL_FIELD(train.lr0)},
      {"train.lr_min", REAL_FIELD(train.lr_min)},
      {"train.weight_decay", REAL_FIELD(train.weight_decay)},
      {"train.beta1", REAL_FIELD(train.beta1)},
      {"train.beta2", REAL_FIELD(train.beta2)},
      {"train.adam_eps", REAL_FIELD(train.adam_eps)},
      {"train.batch_size", INT_FIELD(train.batch_size)},
      {"train.seed", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                             const long long s = to_int(k, v);
                             if (s < 0) bad_value(k, v, "a nonnegative integer");
                             c.train.seed = static_cast<uint64_t>(s);
                           },
                           [](const RunConfig& c) { return std::to_string(c.train.seed); }}},
      {"train.best_metric",
       Field{[](RunConfig& c, const std::string&, const std::string& v) { c.train.best_metric = parse_best_metric(v); },
             [](const RunConfig& c) { return to_string(c.train.best_metric); }}},
      {"train.eps_bce", REAL_FIELD(train.eps_bce)},
      {"train.flips", BOOL_FIELD(train.flips)},
      {"train.divergence_factor", REAL_FIELD(train.divergence_factor)},
      {"train.divergence_patience", INT_FIELD(train.divergence_patience)},
      {"data.root", STRING_FIELD(data.root)},
      {"data.split", STRING_FIELD(data.split)},
      {"data.split_seed", INT_FIELD(data.split_seed)},
      {"data.synthetic", BOOL_FIELD(data.synthetic)},
      {"data.synthetic_pairs", INT_FIELD(data.synthetic_pairs)},
      {"data.synthetic_size", INT_FIELD(data.synthetic_size)},
      {"data.synthetic_seed", INT_FIELD(data.synthetic_seed)},
      {"data.change_rate", REAL_FIELD(data.change_rate)},
      {"data.tile", INT_FIELD(data.tile)},
      {"data.random_crops", INT_FIELD(data.random_crops)},
      {"run.name", STRING_FIELD(run_name)},
      {"run.dir", STRING_FIELD(run_dir)},
  };
  return table;
}

using Assignments = std::vector<std::pair<std::string, std::string>>;

void flatten(const nlohmann::json& j, const std::string& prefix, Assignments& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
    return;
  }
  std::string value;
  if (j.is_string()) {
    value = j.get<std::string>();
  } else if (j.is_array()) {
    for (size_t i = 0; i < j.size(); ++i) value += (i ? "," : "") + (j[i].is_string() ? j[i].get<std::string>() : j[i].dump());
  } else if (j.is_number_float()) {
    value = fmt_real(j.get<double>());
  } else {
    value = j.dump();
  }
  out.emplace_back(prefix, value);
}

Assignments parse_text(const std::string& text) {
  Assignments out;
  const std::string body = trim(text);
  if (!body.empty() && body.front() == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    flatten(j, "", out);
    return out;
  }
  std::stringstream ss(text);
  std::string line;
  int number = 0;
  while (std::getline(ss, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + " is not key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

std::pair<std::string, std::string> split_override(const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + item + "' is not key=value");
  return {trim(item.substr(0, eq)), trim(item.substr(eq + 1))};
}

RunConfig apply(const Assignments& assignments) {
  RunConfig cfg;
  for (const auto& [key, value] : assignments) {
    if (key != "model.preset") continue;
    if (value == "tiny") {
      cfg.model = ModelConfig::tiny();
    } else if (value == "default") {
      cfg.model = ModelConfig{};
    } else {
      bad_value(key, value, "tiny or default");
    }
  }
  for (const auto& [key, value] : assignments) {
    if (key == "model.preset") continue;
    auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides) {
  Assignments all = parse_text(text);
  for (const std::string& o : overrides) all.push_back(split_override(o));
  return apply(all);
}

RunConfig parse_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  std::string text;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return parse_config_text(text, overrides);
}

std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + "=" + field.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& entry : fields()) keys.push_back(entry.first);
  keys.push_back("model.preset");
  return keys;
}

}  // namespace dfpf
