#pragma once

// key=value run configuration with typed access, validation, and a
// resolved snapshot writer.

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "mris/datakit.hpp"
#include "mris/errors.hpp"
#include "mris/evaluation.hpp"
#include "mris/synthesis.hpp"
#include "mris/training.hpp"

namespace mris {

class RunConfig {
public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d{
        {"workdir", "mris_run"},
        {"seed", "42"},
        // data generation
        {"subjects", "300"},
        {"min_timepoints", "1"},
        {"max_timepoints", "4"},
        {"latent_dim", "8"},
        {"query_dim", "64"},
        {"height", "16"},
        {"width", "16"},
        {"noise", "0.05"},
        {"drift", "0.3"},
        {"split_db", "0.43"},
        {"split_downstream", "0.38"},
        // encoders and training
        {"embedding_dim", "32"},
        {"hidden_dim", "128"},
        {"hidden_layers", "2"},
        {"activation", "relu"},
        {"margin", "0.1"},
        {"reduction", "sum"},
        {"batch_size", "64"},
        {"epochs", "200"},
        {"lr_query", "1e-4"},
        {"lr_target", "1e-5"},
        {"weight_decay", "0.01"},
        {"decay_factor", "0.8"},
        {"decay_every", "150"},
        {"normalize_query", "true"},
        {"threads", "1"},
        {"groups", "1"},
        // synthesis and evaluation
        {"k", "20"},
        {"synthesize_split", "test"},
        {"probe_epochs", "300"},
        {"probe_lr", "0.05"},
        {"probe_l2", "0.1"},
    };
    return d;
  }

  /// Parses `key = value` lines; '#' starts a comment.
  static RunConfig from_text(const std::string& text, const std::string& origin = "config") {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    if (!defaults().contains(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0' || errno == ERANGE || !std::isfinite(v))
      throw ConfigError("config key '" + key + "': '" + s + "' is not a finite number");
    return v;
  }

  std::uint64_t count(const std::string& key) const {
    const auto& s = str(key);
    char* end = nullptr;
    errno = 0;
    if (s.empty() || s[0] == '-')
      throw ConfigError("config key '" + key + "': '" + s + "' is not a non-negative integer");
    const auto v = std::strtoull(s.c_str(), &end, 10);
    if (*end != '\0' || errno == ERANGE)
      throw ConfigError("config key '" + key + "': '" + s + "' is not a non-negative integer");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "': '" + s + "' is not a boolean");
  }

  std::filesystem::path workdir() const { return str("workdir"); }

  GeneratorConfig generator() const {
    GeneratorConfig g;
    g.num_subjects = count("subjects");
    g.min_timepoints = count("min_timepoints");
    g.max_timepoints = count("max_timepoints");
    g.latent_dim = count("latent_dim");
    g.query_dim = count("query_dim");
    g.shape = {count("height"), count("width")};
    g.noise = real("noise");
    g.drift = real("drift");
    g.split_db = real("split_db");
    g.split_downstream = real("split_downstream");
    g.seed = count("seed");
    g.validate();
    return g;
  }

  TrainConfig training() const {
    TrainConfig t;
    t.embedding_dim = count("embedding_dim");
    t.hidden_dim = count("hidden_dim");
    t.hidden_layers = count("hidden_layers");
    t.activation = activation_from_string(str("activation"));
    t.loss.margin = real("margin");
    const auto& red = str("reduction");
    if (red == "sum") t.loss.reduction = Reduction::sum;
    else if (red == "mean") t.loss.reduction = Reduction::mean;
    else throw ConfigError("reduction must be 'sum' or 'mean'");
    t.batch_size = count("batch_size");
    t.epochs = count("epochs");
    t.query_schedule = {real("lr_query"), real("decay_factor"), count("decay_every")};
    t.target_schedule = {real("lr_target"), real("decay_factor"), count("decay_every")};
    t.adamw.weight_decay = real("weight_decay");
    t.normalize_query = flag("normalize_query");
    t.threads = count("threads");
    t.seed = count("seed");
    t.validate();
    return t;
  }

  SynthesisConfig synthesis() const {
    SynthesisConfig s;
    s.k = count("k");
    if (s.k == 0) throw ConfigError("k must be >= 1");
    return s;
  }

  ProbeConfig probe() const {
    ProbeConfig p;
    p.epochs = count("probe_epochs");
    p.learning_rate = real("probe_lr");
    p.l2 = real("probe_l2");
    p.seed = count("seed");
    if (!(p.learning_rate > 0.0)) throw ConfigError("probe_lr must be positive");
    return p;
  }

  std::size_t groups() const {
    const auto g = count("groups");
    if (g == 0) throw ConfigError("groups must be >= 1");
    return g;
  }

  Split synthesize_split() const {
    try {
      return split_from_string(str("synthesize_split"));
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }

  /// Every key, sorted, one `key = value` per line.
  std::string resolved() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
    return out.str();
  }

private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

} // namespace mris
