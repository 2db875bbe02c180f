#pragma once

// Experiment configuration read from TOML. Every table and key is checked
// against a fixed vocabulary; anything unrecognised is a ConfigError.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "mfchaos/errors.hpp"
#include "mfchaos/particle_sim.hpp"

namespace mfchaos {

struct ExperimentConfig {
  // [model]
  std::string model_id = "mf_ou";
  int d = 1;
  int m = 1;
  std::map<std::string, double> params;
  std::string init_kind = "uniform";
  std::map<std::string, double> init_params;
  std::optional<double> q;  // declared moment order; defaults to the initial law's

  // [grid]
  double T = 1.0;
  int n_steps = 1000;

  // [ladder]
  std::vector<std::size_t> N_ladder{64, 128, 256, 512, 1024, 2048};
  std::size_t M_ref = 16384;
  std::size_t M_aux = 16384;
  std::size_t replications = 64;
  std::uint64_t seed = 20240601;
  double k = 2.0;
  std::size_t tagged = 1;
  bool analytic_law = true;
  std::vector<double> zeta_orders{2.0};

  // [direction]
  std::string direction = "linear";
  double direction_scale = 1.0;
  double direction_offset = 0.0;
  std::string g_shape = "linear";
  double r = 0.0;

  // [bismut]
  bool bismut = true;
  std::string test_function = "tanh";
  double fd_epsilon = 1e-3;

  // [output]
  std::string out_dir = "out";
  bool dump_paths = false;

  InitialLaw initial_law() const {
    auto get = [&](const char* key, double fallback) {
      const auto it = init_params.find(key);
      return it == init_params.end() ? fallback : it->second;
    };
    if (init_kind == "point") return InitialLaw::point(get("value", 0.0));
    if (init_kind == "uniform") return InitialLaw::uniform(get("lo", -1.0), get("hi", 1.0));
    if (init_kind == "normal") return InitialLaw::normal(get("mean", 0.0), get("sd", 1.0));
    if (init_kind == "student_t") return InitialLaw::student_t(get("nu", 5.0), get("scale", 1.0));
    throw ConfigError("unknown initial law '" + init_kind + "' (expected point, uniform, normal or student_t)");
  }

  /// Declared q, or the supremum of finite moment orders of the initial law.
  double moment_q() const { return q ? *q : initial_law().moment_order(); }

  double param(const std::string& key, double fallback) const {
    const auto it = params.find(key);
    return it == params.end() ? fallback : it->second;
  }

  void validate() const {
    if (N_ladder.empty()) throw ConfigError("ladder.N must not be empty");
    for (std::size_t i = 1; i < N_ladder.size(); ++i)
      if (N_ladder[i] <= N_ladder[i - 1]) throw ConfigError("ladder.N must be strictly increasing");
    if (N_ladder.front() == 0) throw ConfigError("ladder.N entries must be positive");
    const std::size_t floor = 8 * N_ladder.back();
    if (M_ref < floor)
      throw ConfigError("ladder.M_ref = " + std::to_string(M_ref) + " is below 8 * max(N) = " + std::to_string(floor));
    if (M_aux == 0) throw ConfigError("ladder.M_aux must be positive");
    if (!(k >= 2.0)) throw ConfigError("ladder.k must be >= 2");
    if (replications < 2) throw ConfigError("ladder.replications must be at least 2");
    if (tagged == 0) throw ConfigError("ladder.tagged must be positive");
    if (!(T > 0.0) || n_steps <= 0) throw ConfigError("grid.T and grid.n_steps must be positive");
    if (!(r >= 0.0 && r < T)) throw ConfigError("direction.r must lie in [0, T)");
    if (d <= 0 || m <= 0) throw ConfigError("model.d and model.m must be positive");
    if (g_shape != "linear" && g_shape != "sin2") throw ConfigError("direction.g must be 'linear' or 'sin2'");
    if (!(fd_epsilon > 0.0)) throw ConfigError("bismut.epsilon must be positive");
    for (double z : zeta_orders)
      if (!(z >= 1.0)) throw ConfigError("ladder.zeta_orders entries must be >= 1");
    (void)initial_law();
    if (moment_q() <= k) throw ConfigError("model.q must exceed ladder.k");
  }
};

namespace detail {

inline void check_keys(const toml::table& t, const std::string& where, const std::set<std::string>& allowed) {
  for (auto&& [key, node] : t) {
    (void)node;
    const std::string k(key.str());
    if (!allowed.count(k)) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError("unknown key '" + k + "' in " + where + " (allowed: " + list + ")");
    }
  }
}

inline double as_number(const toml::node& n, const std::string& where) {
  if (auto v = n.value<double>()) return *v;
  if (auto s = n.value<std::string>()) {
    if (*s == "inf" || *s == "infinity") return std::numeric_limits<double>::infinity();
  }
  throw ConfigError(where + " must be a number");
}

inline std::string as_string(const toml::node& n, const std::string& where) {
  if (auto v = n.value<std::string>()) return *v;
  throw ConfigError(where + " must be a string");
}

inline bool as_bool(const toml::node& n, const std::string& where) {
  if (auto v = n.value<bool>()) return *v;
  throw ConfigError(where + " must be a boolean");
}

inline std::int64_t as_int(const toml::node& n, const std::string& where) {
  if (auto v = n.value_exact<std::int64_t>()) return *v;
  throw ConfigError(where + " must be an integer");
}

inline std::size_t as_count(const toml::node& n, const std::string& where) {
  const auto v = as_int(n, where);
  if (v < 0) throw ConfigError(where + " must be non-negative");
  return static_cast<std::size_t>(v);
}

inline const toml::table& as_table(const toml::node& n, const std::string& where) {
  if (const auto* t = n.as_table()) return *t;
  throw ConfigError("[" + where + "] must be a table");
}

}  // namespace detail

/// Builds a config from parsed TOML, starting from the defaults above.
inline ExperimentConfig config_from_toml(const toml::table& root) {
  using namespace detail;
  ExperimentConfig c;
  check_keys(root, "the top level", {"model", "grid", "ladder", "direction", "bismut", "output"});

  if (const auto* node = root.get("model")) {
    const auto& t = as_table(*node, "model");
    check_keys(t, "[model]", {"id", "d", "m", "params", "init", "q"});
    if (const auto* n = t.get("id")) c.model_id = as_string(*n, "model.id");
    if (const auto* n = t.get("d")) c.d = static_cast<int>(as_int(*n, "model.d"));
    c.m = c.d;
    if (const auto* n = t.get("m")) c.m = static_cast<int>(as_int(*n, "model.m"));
    if (const auto* n = t.get("q")) c.q = as_number(*n, "model.q");
    if (const auto* n = t.get("params")) {
      const auto& p = as_table(*n, "model.params");
      std::set<std::string> allowed;
      if (c.model_id == "mf_ou") allowed = {"a", "b", "sigma"};
      else if (c.model_id == "kuramoto") allowed = {"kappa", "sigma"};
      else if (c.model_id == "double_well") allowed = {"theta", "kappa", "sigma"};
      else throw ConfigError("unknown model id '" + c.model_id + "' (expected mf_ou, kuramoto or double_well)");
      check_keys(p, "[model.params]", allowed);
      for (auto&& [key, v] : p) c.params[std::string(key.str())] = as_number(v, "model.params." + std::string(key.str()));
    }
    if (const auto* n = t.get("init")) {
      const auto& p = as_table(*n, "model.init");
      if (const auto* kind = p.get("kind")) c.init_kind = as_string(*kind, "model.init.kind");
      std::set<std::string> allowed{"kind"};
      if (c.init_kind == "point") allowed.insert("value");
      else if (c.init_kind == "uniform") allowed.insert({"lo", "hi"});
      else if (c.init_kind == "normal") allowed.insert({"mean", "sd"});
      else if (c.init_kind == "student_t") allowed.insert({"nu", "scale"});
      else throw ConfigError("unknown model.init.kind '" + c.init_kind + "'");
      check_keys(p, "[model.init]", allowed);
      for (auto&& [key, v] : p)
        if (key.str() != "kind") c.init_params[std::string(key.str())] = as_number(v, "model.init." + std::string(key.str()));
    }
  }

  if (const auto* node = root.get("grid")) {
    const auto& t = as_table(*node, "grid");
    check_keys(t, "[grid]", {"T", "n_steps"});
    if (const auto* n = t.get("T")) c.T = as_number(*n, "grid.T");
    if (const auto* n = t.get("n_steps")) c.n_steps = static_cast<int>(as_int(*n, "grid.n_steps"));
  }

  if (const auto* node = root.get("ladder")) {
    const auto& t = as_table(*node, "ladder");
    check_keys(t, "[ladder]",
               {"N", "M_ref", "M_aux", "replications", "seed", "k", "tagged", "analytic_law", "zeta_orders"});
    if (const auto* n = t.get("N")) {
      const auto* arr = n->as_array();
      if (arr == nullptr) throw ConfigError("ladder.N must be an array of integers");
      c.N_ladder.clear();
      for (const auto& e : *arr) c.N_ladder.push_back(as_count(e, "ladder.N entry"));
    }
    if (const auto* n = t.get("M_ref")) c.M_ref = as_count(*n, "ladder.M_ref");
    if (const auto* n = t.get("M_aux")) c.M_aux = as_count(*n, "ladder.M_aux");
    if (const auto* n = t.get("replications")) c.replications = as_count(*n, "ladder.replications");
    if (const auto* n = t.get("seed")) c.seed = static_cast<std::uint64_t>(as_count(*n, "ladder.seed"));
    if (const auto* n = t.get("k")) c.k = as_number(*n, "ladder.k");
    if (const auto* n = t.get("tagged")) c.tagged = as_count(*n, "ladder.tagged");
    if (const auto* n = t.get("analytic_law")) c.analytic_law = as_bool(*n, "ladder.analytic_law");
    if (const auto* n = t.get("zeta_orders")) {
      const auto* arr = n->as_array();
      if (arr == nullptr) throw ConfigError("ladder.zeta_orders must be an array of numbers");
      c.zeta_orders.clear();
      for (const auto& e : *arr) c.zeta_orders.push_back(as_number(e, "ladder.zeta_orders entry"));
    }
  }

  if (const auto* node = root.get("direction")) {
    const auto& t = as_table(*node, "direction");
    check_keys(t, "[direction]", {"phi", "scale", "offset", "g", "r"});
    if (const auto* n = t.get("phi")) c.direction = as_string(*n, "direction.phi");
    if (const auto* n = t.get("scale")) c.direction_scale = as_number(*n, "direction.scale");
    if (const auto* n = t.get("offset")) c.direction_offset = as_number(*n, "direction.offset");
    if (const auto* n = t.get("g")) c.g_shape = as_string(*n, "direction.g");
    if (const auto* n = t.get("r")) c.r = as_number(*n, "direction.r");
  }

  if (const auto* node = root.get("bismut")) {
    const auto& t = as_table(*node, "bismut");
    check_keys(t, "[bismut]", {"enabled", "f", "epsilon"});
    if (const auto* n = t.get("enabled")) c.bismut = as_bool(*n, "bismut.enabled");
    if (const auto* n = t.get("f")) c.test_function = as_string(*n, "bismut.f");
    if (const auto* n = t.get("epsilon")) c.fd_epsilon = as_number(*n, "bismut.epsilon");
  }

  if (const auto* node = root.get("output")) {
    const auto& t = as_table(*node, "output");
    check_keys(t, "[output]", {"dir", "dump_paths"});
    if (const auto* n = t.get("dir")) c.out_dir = as_string(*n, "output.dir");
    if (const auto* n = t.get("dump_paths")) c.dump_paths = as_bool(*n, "output.dump_paths");
  }
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(std::string_view text) {
  try {
    return config_from_toml(toml::parse(text));
  } catch (const toml::parse_error& e) {
    throw ConfigError(std::string("TOML parse error: ") + std::string(e.description()));
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  try {
    return config_from_toml(toml::parse_file(path));
  } catch (const toml::parse_error& e) {
    throw ConfigError("TOML parse error in " + path + ": " + std::string(e.description()));
  }
}

}  // namespace mfchaos
