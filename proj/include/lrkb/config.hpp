#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lrkb/io.hpp"
#include "lrkb/rng.hpp"

namespace lrkb {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Fully resolved experiment description. Defaults fill every field, so a
/// config file only has to override what it cares about.
struct RunConfig {
  // [model]
  std::string model = "advection";  // advection | fem
  Eigen::Index d = 100;             // advection state dimension
  double length = 1.0;
  double decay = 0.5;
  double forcing = 0.0;
  double sigma = 1e-3;
  double gamma = 1e-2;
  Eigen::Index r_true = 25;
  Eigen::Index nodes = 21;  // fem nodes per side
  double diffusion = 0.1;
  double advection_x = 1.0;
  double advection_y = 0.0;
  std::string observation = "full";  // full | partial
  Eigen::Index observation_grid = 5;
  double observation_side = 0.12;

  // [time]
  double dt = 1e-3;
  double T = 1.0;

  // [filter]
  std::string filter = "dlr-kbp";  // kbp | dlr-kbp | enkf | dlr-enkf
  Eigen::Index rank = 25;
  Eigen::Index particles = 100;
  std::string integrator = "em";  // em | bug
  double drop_tol = 1e-10;

  // [study]
  std::string study = "single";  // single | rank-sweep | sigma-sweep | poc
  std::vector<Eigen::Index> rank_grid;
  std::vector<double> sigma_grid;
  std::vector<Eigen::Index> particle_grid;
  int replicates = 1;
  // pair a single dlr-enkf run with a full-order ensemble on shared draws
  // and record their matched-particle distance over time
  bool consistency_check = false;

  // [run]
  std::uint64_t seed = 0;
  std::string output = "runs";
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline double parse_number(const std::string& value, const std::string& path) {
  try {
    size_t pos = 0;
    const double x = std::stod(value, &pos);
    if (pos != value.size())
      throw ConfigError(path + ": trailing characters in number '" + value +
                        "'");
    return x;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(path + ": expected a number, got '" + value + "'");
  }
}

inline std::int64_t parse_integer(const std::string& value,
                                  const std::string& path) {
  try {
    size_t pos = 0;
    const std::int64_t i = std::stoll(value, &pos);
    if (pos == value.size()) return i;
  } catch (const std::exception&) {
  }
  // tolerate exponent notation like 1e3 as long as it is integral
  const double x = parse_number(value, path);
  const auto i = static_cast<std::int64_t>(std::llround(x));
  if (static_cast<double>(i) != x)
    throw ConfigError(path + ": expected an integer, got '" + value + "'");
  return i;
}

inline bool parse_bool(const std::string& value, const std::string& path) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError(path + ": expected true or false, got '" + value + "'");
}

inline std::string parse_string(const std::string& value,
                                const std::string& path) {
  if (value.size() < 2 || value.front() != '"' || value.back() != '"')
    throw ConfigError(path + ": expected a quoted string, got '" + value +
                      "'");
  return value.substr(1, value.size() - 2);
}

inline std::vector<std::string> parse_array(const std::string& value,
                                            const std::string& path) {
  if (value.size() < 2 || value.front() != '[' || value.back() != ']')
    throw ConfigError(path + ": expected an array like [1, 2, 3]");
  std::vector<std::string> items;
  std::string body = value.substr(1, value.size() - 2);
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

/// Raw `section.key -> value` pairs; consumed entries are erased so that
/// anything left over is an unknown key.
using RawConfig = std::map<std::string, std::string>;

inline RawConfig tokenize(const std::string& text) {
  RawConfig raw;
  std::string section;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) +
                          ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("line " + std::to_string(lineno) +
                          ": empty section name");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(lineno) +
                        ": empty key or value");
    const std::string path = section.empty() ? key : section + "." + key;
    if (raw.count(path))
      throw ConfigError(path + ": duplicate key");
    raw[path] = value;
  }
  return raw;
}

class Extractor {
 public:
  explicit Extractor(RawConfig raw) : raw_(std::move(raw)) {}

  void number(const std::string& path, double& out) {
    if (auto v = take(path)) out = parse_number(*v, path);
  }
  void integer(const std::string& path, Eigen::Index& out) {
    if (auto v = take(path)) out = parse_integer(*v, path);
  }
  void integer(const std::string& path, int& out) {
    if (auto v = take(path)) out = static_cast<int>(parse_integer(*v, path));
  }
  void unsigned64(const std::string& path, std::uint64_t& out) {
    if (auto v = take(path)) {
      const std::string& value = *v;
      if (!value.empty() && value[0] == '-')
        throw ConfigError(path + ": must be non-negative");
      std::size_t used = 0;
      unsigned long long parsed = 0;
      try {
        parsed = std::stoull(value, &used);
      } catch (const std::exception&) {
        throw ConfigError(path + ": expected an unsigned integer, got '" +
                          value + "'");
      }
      if (used != value.size())
        throw ConfigError(path + ": expected an unsigned integer, got '" +
                          value + "'");
      out = static_cast<std::uint64_t>(parsed);
    }
  }
  void string(const std::string& path, std::string& out) {
    if (auto v = take(path)) out = parse_string(*v, path);
  }
  void boolean(const std::string& path, bool& out) {
    if (auto v = take(path)) out = parse_bool(*v, path);
  }
  void number_array(const std::string& path, std::vector<double>& out) {
    if (auto v = take(path)) {
      out.clear();
      for (const std::string& item : parse_array(*v, path))
        out.push_back(parse_number(item, path));
    }
  }
  void integer_array(const std::string& path,
                     std::vector<Eigen::Index>& out) {
    if (auto v = take(path)) {
      out.clear();
      for (const std::string& item : parse_array(*v, path))
        out.push_back(parse_integer(item, path));
    }
  }

  void reject_unknown() const {
    if (!raw_.empty())
      throw ConfigError("unknown key: " + raw_.begin()->first);
  }

 private:
  std::optional<std::string> take(const std::string& path) {
    auto it = raw_.find(path);
    if (it == raw_.end()) return std::nullopt;
    std::string value = it->second;
    raw_.erase(it);
    return value;
  }

  RawConfig raw_;
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

template <typename T>
bool one_of(const T& value, std::initializer_list<T> allowed) {
  return std::find(allowed.begin(), allowed.end(), value) != allowed.end();
}

}  // namespace config_detail

/// Validates cross-field invariants; returns non-fatal warnings.
inline std::vector<std::string> validate_config(const RunConfig& cfg) {
  using config_detail::one_of;
  using config_detail::require;
  require(one_of<std::string>(cfg.model, {"advection", "fem"}),
          "model.kind: must be \"advection\" or \"fem\"");
  require(cfg.d >= 2, "model.d: need at least 2 degrees of freedom");
  require(cfg.length > 0.0, "model.length: must be positive");
  require(cfg.sigma >= 0.0, "model.sigma: must be non-negative");
  require(cfg.gamma > 0.0, "model.gamma: must be positive");
  require(cfg.r_true >= 1, "model.r_true: must be at least 1");
  require(cfg.nodes >= 3, "model.nodes: need at least 3 nodes per side");
  require(cfg.diffusion >= 0.0, "model.diffusion: must be non-negative");
  require(one_of<std::string>(cfg.observation, {"full", "partial"}),
          "model.observation: must be \"full\" or \"partial\"");
  require(cfg.observation_grid >= 1, "model.observation_grid: must be >= 1");
  require(cfg.observation_side > 0.0, "model.observation_side: must be > 0");

  require(cfg.dt > 0.0, "time.dt: must be positive");
  require(cfg.T > 0.0, "time.T: must be positive");
  require(cfg.dt <= cfg.T, "time.dt: cannot exceed the horizon T");

  require(one_of<std::string>(cfg.filter,
                              {"kbp", "dlr-kbp", "enkf", "dlr-enkf"}),
          "filter.kind: must be kbp, dlr-kbp, enkf, or dlr-enkf");
  require(cfg.rank >= 1, "filter.rank: must be at least 1");
  const bool ensemble = cfg.filter == "enkf" || cfg.filter == "dlr-enkf";
  if (ensemble)
    require(cfg.particles >= 2,
            "filter.particles: ensemble filters need at least 2 particles");
  require(one_of<std::string>(cfg.integrator, {"em", "bug"}),
          "filter.integrator: must be \"em\" or \"bug\"");
  require(cfg.drop_tol >= 0.0, "filter.drop_tol: must be non-negative");
  if (cfg.model == "fem" && cfg.filter == "dlr-enkf")
    require(cfg.integrator == "bug",
            "filter.integrator: weak-form (fem) models require \"bug\"");
  const bool low_rank = cfg.filter == "dlr-kbp" || cfg.filter == "dlr-enkf";
  if (low_rank)
    require(cfg.rank <= cfg.r_true,
            "filter.rank: cannot exceed model.r_true (the initial rank)");

  require(one_of<std::string>(cfg.study,
                              {"single", "rank-sweep", "sigma-sweep", "poc"}),
          "study.kind: must be single, rank-sweep, sigma-sweep, or poc");
  if (cfg.study == "rank-sweep" || cfg.study == "sigma-sweep")
    require(cfg.filter == "dlr-kbp",
            "filter.kind: " + cfg.study +
                " compares the reduced moment filter against the full one; "
                "set filter.kind = \"dlr-kbp\"");
  if (cfg.study == "poc") {
    require(cfg.filter == "dlr-enkf" && cfg.integrator == "em" &&
                cfg.model == "advection",
            "study.kind: poc couples the explicit reduced ensemble to its "
            "mean-field limit; needs model advection, filter dlr-enkf, "
            "integrator em");
    require(cfg.rank == cfg.r_true,
            "filter.rank: poc runs at the exact initial rank r_true");
  }
  if (cfg.study == "rank-sweep")
    require(!cfg.rank_grid.empty(), "study.rank_grid: required for rank-sweep");
  for (Eigen::Index r : cfg.rank_grid)
    require(r >= 1 && r <= cfg.r_true,
            "study.rank_grid: entries must lie in [1, model.r_true]");
  if (cfg.study == "sigma-sweep")
    require(!cfg.sigma_grid.empty(),
            "study.sigma_grid: required for sigma-sweep");
  for (double s : cfg.sigma_grid)
    require(s >= 0.0, "study.sigma_grid: entries must be non-negative");
  if (cfg.study == "poc") {
    require(!cfg.particle_grid.empty(),
            "study.particle_grid: required for poc");
    for (Eigen::Index p : cfg.particle_grid)
      require(p >= 2, "study.particle_grid: entries must be at least 2");
  }
  require(cfg.replicates >= 1, "study.replicates: must be at least 1");
  if (cfg.consistency_check)
    require(cfg.study == "single" && cfg.filter == "dlr-enkf",
            "study.consistency_check: only meaningful for single dlr-enkf "
            "studies");

  std::vector<std::string> warnings;
  if (ensemble && cfg.particles <= 4 * cfg.rank - 1)
    warnings.push_back(
        "filter.particles: P <= 4R - 1; the sample covariance will be "
        "severely rank-starved");
  return warnings;
}

/// Parses the TOML-subset config text. Unknown keys are errors.
inline RunConfig parse_config(const std::string& text) {
  using namespace config_detail;
  Extractor ex(tokenize(text));
  RunConfig cfg;
  ex.string("model.kind", cfg.model);
  ex.integer("model.d", cfg.d);
  ex.number("model.length", cfg.length);
  ex.number("model.decay", cfg.decay);
  ex.number("model.forcing", cfg.forcing);
  ex.number("model.sigma", cfg.sigma);
  ex.number("model.gamma", cfg.gamma);
  ex.integer("model.r_true", cfg.r_true);
  ex.integer("model.nodes", cfg.nodes);
  ex.number("model.diffusion", cfg.diffusion);
  ex.number("model.advection_x", cfg.advection_x);
  ex.number("model.advection_y", cfg.advection_y);
  ex.string("model.observation", cfg.observation);
  ex.integer("model.observation_grid", cfg.observation_grid);
  ex.number("model.observation_side", cfg.observation_side);

  ex.number("time.dt", cfg.dt);
  ex.number("time.T", cfg.T);

  ex.string("filter.kind", cfg.filter);
  ex.integer("filter.rank", cfg.rank);
  ex.integer("filter.particles", cfg.particles);
  ex.string("filter.integrator", cfg.integrator);
  ex.number("filter.drop_tol", cfg.drop_tol);

  ex.string("study.kind", cfg.study);
  ex.integer_array("study.rank_grid", cfg.rank_grid);
  ex.number_array("study.sigma_grid", cfg.sigma_grid);
  ex.integer_array("study.particle_grid", cfg.particle_grid);
  ex.integer("study.replicates", cfg.replicates);
  ex.boolean("study.consistency_check", cfg.consistency_check);

  ex.unsigned64("run.seed", cfg.seed);
  ex.string("run.output", cfg.output);

  ex.reject_unknown();
  validate_config(cfg);
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path,
                             std::string* raw_text = nullptr) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  if (raw_text) *raw_text = ss.str();
  return parse_config(ss.str());
}

/// FNV-1a hash of the literal config text, hex-encoded.
inline std::string config_hash(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(text)));
  return std::string(buf);
}

/// Canonical echo of every resolved field; parse_config(serialize_config(c))
/// reproduces c, so a run directory always carries a re-runnable snapshot.
inline std::string serialize_config(const RunConfig& cfg) {
  using io_detail::fmt_double;
  std::ostringstream out;
  out << "[model]\n";
  out << "kind = \"" << cfg.model << "\"\n";
  out << "d = " << cfg.d << "\n";
  out << "length = " << fmt_double(cfg.length) << "\n";
  out << "decay = " << fmt_double(cfg.decay) << "\n";
  out << "forcing = " << fmt_double(cfg.forcing) << "\n";
  out << "sigma = " << fmt_double(cfg.sigma) << "\n";
  out << "gamma = " << fmt_double(cfg.gamma) << "\n";
  out << "r_true = " << cfg.r_true << "\n";
  out << "nodes = " << cfg.nodes << "\n";
  out << "diffusion = " << fmt_double(cfg.diffusion) << "\n";
  out << "advection_x = " << fmt_double(cfg.advection_x) << "\n";
  out << "advection_y = " << fmt_double(cfg.advection_y) << "\n";
  out << "observation = \"" << cfg.observation << "\"\n";
  out << "observation_grid = " << cfg.observation_grid << "\n";
  out << "observation_side = " << fmt_double(cfg.observation_side) << "\n";
  if (cfg.model == "fem") {
    out << "# observation square centers along each axis:";
    for (Eigen::Index i = 0; i < cfg.observation_grid; ++i)
      out << " "
          << fmt_double((2.0 * static_cast<double>(i) + 1.0) /
                        (2.0 * static_cast<double>(cfg.observation_grid)));
    out << "\n";
  }
  out << "\n[time]\n";
  out << "dt = " << fmt_double(cfg.dt) << "\n";
  out << "T = " << fmt_double(cfg.T) << "\n";
  out << "\n[filter]\n";
  out << "kind = \"" << cfg.filter << "\"\n";
  out << "rank = " << cfg.rank << "\n";
  out << "particles = " << cfg.particles << "\n";
  out << "integrator = \"" << cfg.integrator << "\"\n";
  out << "drop_tol = " << fmt_double(cfg.drop_tol) << "\n";
  out << "\n[study]\n";
  out << "kind = \"" << cfg.study << "\"\n";
  if (!cfg.rank_grid.empty()) {
    out << "rank_grid = [";
    for (size_t i = 0; i < cfg.rank_grid.size(); ++i)
      out << (i ? ", " : "") << cfg.rank_grid[i];
    out << "]\n";
  }
  if (!cfg.sigma_grid.empty()) {
    out << "sigma_grid = [";
    for (size_t i = 0; i < cfg.sigma_grid.size(); ++i)
      out << (i ? ", " : "") << fmt_double(cfg.sigma_grid[i]);
    out << "]\n";
  }
  if (!cfg.particle_grid.empty()) {
    out << "particle_grid = [";
    for (size_t i = 0; i < cfg.particle_grid.size(); ++i)
      out << (i ? ", " : "") << cfg.particle_grid[i];
    out << "]\n";
  }
  out << "replicates = " << cfg.replicates << "\n";
  out << "consistency_check = " << (cfg.consistency_check ? "true" : "false")
      << "\n";
  out << "\n[run]\n";
  out << "seed = " << cfg.seed << "\n";
  out << "output = \"" << cfg.output << "\"\n";
  return out.str();
}

}  // namespace lrkb
