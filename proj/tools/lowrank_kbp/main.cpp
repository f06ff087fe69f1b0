// Command line driver for the low-rank Kalman-Bucy filter library.
//
// Verbs:
//   run <config|preset>      execute a study and write its artifacts
//   compare <dir-a> <dir-b>  diff the CSV artifacts of two runs
//   validate-config <path>   parse, validate and echo a config
//   list-presets             show bundled preset configs
//
// Exit codes: 0 success, 1 internal error, 2 config error,
// 3 numerical failure, 4 comparison beyond tolerance.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lrkb/config.hpp"
#include "lrkb/io.hpp"
#include "lrkb/metrics.hpp"
#include "lrkb/studies.hpp"

#ifndef LRKB_GIT_REVISION
#define LRKB_GIT_REVISION "unknown"
#endif
#ifndef LRKB_PRESET_DIR
#define LRKB_PRESET_DIR "presets"
#endif

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInternalError = 1;
constexpr int kConfigError = 2;
constexpr int kNumericalError = 3;
constexpr int kBeyondTolerance = 4;

struct CliOptions {
  std::vector<std::string> positional;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::optional<std::string> output;
  double tolerance = 0.0;
  bool force = false;
  bool dump_modes = false;
};

void print_usage(std::ostream& out) {
  out << "usage: lowrank-kbp <verb> [args] [options]\n"
      << "\n"
      << "verbs:\n"
      << "  run <config|preset>      run a study and write artifacts\n"
      << "  compare <dir-a> <dir-b>  compare CSV artifacts of two runs\n"
      << "  validate-config <path>   check a config file and echo the resolved values\n"
      << "  list-presets             list bundled preset configs\n"
      << "\n"
      << "options:\n"
      << "  --seed <n>        override the config seed\n"
      << "  --threads <n>     worker threads for replicate studies (default 1)\n"
      << "  --output <dir>    base output directory (default from config)\n"
      << "  --force           write into <stem>/ directly, overwriting prior artifacts\n"
      << "  --dump-modes      also write the final mode matrix for low-rank filters\n"
      << "  --tolerance <t>   max allowed cell deviation for compare (default 0)\n";
}

std::uint64_t parse_u64(const std::string& text, const std::string& flag) {
  std::size_t used = 0;
  unsigned long long value = 0;
  try {
    value = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw lrkb::ConfigError(flag + " expects a non-negative integer, got '" + text + "'");
  }
  if (used != text.size())
    throw lrkb::ConfigError(flag + " expects a non-negative integer, got '" + text + "'");
  return static_cast<std::uint64_t>(value);
}

double parse_f64(const std::string& text, const std::string& flag) {
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    throw lrkb::ConfigError(flag + " expects a number, got '" + text + "'");
  }
  if (used != text.size() || !std::isfinite(value))
    throw lrkb::ConfigError(flag + " expects a finite number, got '" + text + "'");
  return value;
}

CliOptions parse_options(int argc, char** argv, int first) {
  CliOptions opts;
  for (int i = first; i < argc; ++i) {
    const std::string arg = argv[i];
    auto next = [&](const char* flag) -> std::string {
      if (i + 1 >= argc) throw lrkb::ConfigError(std::string(flag) + " requires a value");
      return argv[++i];
    };
    if (arg == "--seed") {
      opts.seed = parse_u64(next("--seed"), "--seed");
    } else if (arg == "--threads") {
      const auto n = parse_u64(next("--threads"), "--threads");
      if (n == 0 || n > 4096) throw lrkb::ConfigError("--threads must be in [1, 4096]");
      opts.threads = static_cast<int>(n);
    } else if (arg == "--output") {
      opts.output = next("--output");
    } else if (arg == "--tolerance") {
      const double t = parse_f64(next("--tolerance"), "--tolerance");
      if (t < 0) throw lrkb::ConfigError("--tolerance must be non-negative");
      opts.tolerance = t;
    } else if (arg == "--force") {
      opts.force = true;
    } else if (arg == "--dump-modes") {
      opts.dump_modes = true;
    } else if (arg == "--help" || arg == "-h") {
      print_usage(std::cout);
      std::exit(kOk);
    } else if (!arg.empty() && arg[0] == '-') {
      throw lrkb::ConfigError("unknown option: " + arg);
    } else {
      opts.positional.push_back(arg);
    }
  }
  return opts;
}

// A config argument is either a readable file path or the stem of a bundled
// preset; bare names are searched in the preset directory.
fs::path resolve_config_path(const std::string& name) {
  fs::path direct(name);
  std::error_code ec;
  if (fs::is_regular_file(direct, ec)) return direct;
  if (name.find('/') == std::string::npos && name.find('\\') == std::string::npos) {
    fs::path preset = fs::path(LRKB_PRESET_DIR) / (name + ".toml");
    if (fs::is_regular_file(preset, ec)) return preset;
  }
  throw lrkb::ConfigError("config not found: " + name);
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d%02d%02d-%02d%02d%02d", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
  return buf;
}

// Pick the run directory. Default is <base>/<stem>-<timestamp>, suffixed on
// collision so that repeated runs never clobber each other; --force instead
// reuses <base>/<stem> verbatim.
fs::path choose_output_dir(const fs::path& base, const std::string& stem, bool force) {
  if (force) return base / stem;
  const std::string tagged = stem + "-" + utc_timestamp();
  fs::path candidate = base / tagged;
  for (int k = 1; fs::exists(candidate); ++k)
    candidate = base / (tagged + "-" + std::to_string(k));
  return candidate;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << text;
}

int run_verb(const CliOptions& opts) {
  if (opts.positional.size() != 1)
    throw lrkb::ConfigError("run expects exactly one config file or preset name");
  const fs::path cfg_path = resolve_config_path(opts.positional[0]);

  lrkb::RunConfig cfg = lrkb::load_config(cfg_path);
  if (opts.seed) cfg.seed = *opts.seed;
  for (const auto& warning : lrkb::validate_config(cfg))
    std::cerr << "warning: " << warning << "\n";

  // Hash the canonical serialization after overrides so that a rerun of the
  // printed command line reproduces the recorded hash byte for byte.
  const std::string resolved = lrkb::serialize_config(cfg);
  const std::string hash = lrkb::config_hash(resolved);

  const fs::path base = opts.output ? fs::path(*opts.output) : fs::path(cfg.output);
  const fs::path out_dir = choose_output_dir(base, cfg_path.stem().string(), opts.force);
  fs::create_directories(out_dir);

  std::cout << "config:   " << cfg_path.string() << "\n"
            << "study:    " << cfg.study << "\n"
            << "seed:     " << cfg.seed << "\n"
            << "hash:     " << hash << "\n"
            << "revision: " << LRKB_GIT_REVISION << "\n"
            << "output:   " << out_dir.string() << "\n";

  const lrkb::StudyOutput result =
      lrkb::run_study(cfg, opts.threads, hash, LRKB_GIT_REVISION, opts.dump_modes);

  write_text_file(out_dir / "config.toml", resolved);
  for (const auto& [name, summary] : result.summaries) {
    lrkb::write_study_csv(out_dir / (name + ".csv"), summary);
    lrkb::write_study_json(out_dir / (name + ".json"), summary);
    if (summary.slope)
      std::cout << name << ": slope " << lrkb::io_detail::fmt_double(summary.slope->slope)
                << " +/- " << lrkb::io_detail::fmt_double(summary.slope->half_width) << "\n";
  }
  for (const auto& [name, table] : result.step_tables)
    lrkb::write_step_csv(out_dir / (name + ".csv"), table);

  std::cout << "wrote " << result.summaries.size() << " summaries, "
            << result.step_tables.size() << " step tables\n";
  return kOk;
}

int validate_verb(const CliOptions& opts) {
  if (opts.positional.size() != 1)
    throw lrkb::ConfigError("validate-config expects exactly one config file or preset name");
  const fs::path cfg_path = resolve_config_path(opts.positional[0]);
  lrkb::RunConfig cfg = lrkb::load_config(cfg_path);
  if (opts.seed) cfg.seed = *opts.seed;
  for (const auto& warning : lrkb::validate_config(cfg))
    std::cerr << "warning: " << warning << "\n";
  const std::string resolved = lrkb::serialize_config(cfg);
  std::cout << resolved;
  std::cout << "# hash: " << lrkb::config_hash(resolved) << "\n";
  return kOk;
}

int list_presets_verb(const CliOptions& opts) {
  if (!opts.positional.empty())
    throw lrkb::ConfigError("list-presets takes no arguments");
  const fs::path dir(LRKB_PRESET_DIR);
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    std::cout << "no preset directory at " << dir.string() << "\n";
    return kOk;
  }
  std::vector<fs::path> presets;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".toml")
      presets.push_back(entry.path());
  std::sort(presets.begin(), presets.end());
  for (const auto& path : presets) {
    std::string description;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      const std::string trimmed = lrkb::config_detail::trim(line);
      if (trimmed.empty()) continue;
      if (trimmed[0] == '#') description = lrkb::config_detail::trim(trimmed.substr(1));
      break;
    }
    std::cout << path.stem().string();
    if (!description.empty()) std::cout << "  " << description;
    std::cout << "\n";
  }
  return kOk;
}

// -- compare ----------------------------------------------------------------

struct CompareError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CsvMatrix {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

// Tolerant CSV reader for compare: empty cells become NaN (summary tables
// leave the std column blank for single-replicate points) and two NaNs in the
// same position count as equal.
CsvMatrix load_csv_matrix(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CompareError("cannot open " + path.string());
  CsvMatrix table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.eof()) break;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(lrkb::config_detail::trim(cell));
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (first) {
      table.header = cells;
      first = false;
      continue;
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) {
      if (c.empty()) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      std::size_t used = 0;
      double value = 0;
      try {
        value = std::stod(c, &used);
      } catch (const std::exception&) {
        throw CompareError(path.string() + ": non-numeric cell '" + c + "'");
      }
      if (used != c.size())
        throw CompareError(path.string() + ": non-numeric cell '" + c + "'");
      row.push_back(value);
    }
    table.rows.push_back(std::move(row));
  }
  if (first) throw CompareError(path.string() + ": empty file");
  return table;
}

std::set<std::string> csv_names(const fs::path& dir) {
  std::set<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csv")
      names.insert(entry.path().filename().string());
  return names;
}

int compare_verb(const CliOptions& opts) {
  if (opts.positional.size() != 2)
    throw lrkb::ConfigError("compare expects exactly two run directories");
  const fs::path dir_a(opts.positional[0]);
  const fs::path dir_b(opts.positional[1]);
  for (const auto& dir : {dir_a, dir_b}) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec))
      throw lrkb::ConfigError("not a directory: " + dir.string());
  }

  const auto names_a = csv_names(dir_a);
  const auto names_b = csv_names(dir_b);
  std::vector<std::string> shared;
  std::set_intersection(names_a.begin(), names_a.end(), names_b.begin(), names_b.end(),
                        std::back_inserter(shared));
  if (shared.empty())
    throw CompareError("no CSV artifacts in common between " + dir_a.string() + " and " +
                       dir_b.string());
  for (const auto& name : names_a)
    if (!names_b.count(name)) std::cerr << "note: only in " << dir_a.string() << ": " << name << "\n";
  for (const auto& name : names_b)
    if (!names_a.count(name)) std::cerr << "note: only in " << dir_b.string() << ": " << name << "\n";

  double overall = 0.0;
  for (const auto& name : shared) {
    const CsvMatrix a = load_csv_matrix(dir_a / name);
    const CsvMatrix b = load_csv_matrix(dir_b / name);
    if (a.header != b.header)
      throw CompareError(name + ": headers differ between runs");
    if (a.rows.size() != b.rows.size())
      throw CompareError(name + ": row counts differ (" + std::to_string(a.rows.size()) +
                         " vs " + std::to_string(b.rows.size()) + ")");
    double file_max = 0.0;
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      if (a.rows[i].size() != b.rows[i].size())
        throw CompareError(name + ": row " + std::to_string(i + 1) + " widths differ");
      for (std::size_t j = 0; j < a.rows[i].size(); ++j) {
        const double x = a.rows[i][j];
        const double y = b.rows[i][j];
        if (std::isnan(x) && std::isnan(y)) continue;
        const double dev = (std::isnan(x) || std::isnan(y))
                               ? std::numeric_limits<double>::infinity()
                               : std::abs(x - y);
        file_max = std::max(file_max, dev);
      }
    }
    std::cout << name << ": max deviation " << lrkb::io_detail::fmt_double(file_max) << "\n";
    overall = std::max(overall, file_max);
  }
  std::cout << "overall max deviation " << lrkb::io_detail::fmt_double(overall)
            << " over " << shared.size() << " files (tolerance "
            << lrkb::io_detail::fmt_double(opts.tolerance) << ")\n";
  if (overall > opts.tolerance) {
    std::cerr << "comparison beyond tolerance\n";
    return kBeyondTolerance;
  }
  return kOk;
}

bool is_numerical_failure(const std::exception& e) {
  return dynamic_cast<const lrkb::DivergedAtStep*>(&e) ||
         dynamic_cast<const lrkb::NonFiniteState*>(&e) ||
         dynamic_cast<const lrkb::SolveFailed*>(&e) ||
         dynamic_cast<const lrkb::NotPSD*>(&e) ||
         dynamic_cast<const lrkb::TooFewParticles*>(&e) ||
         dynamic_cast<const lrkb::EmptyBasis*>(&e) ||
         dynamic_cast<const lrkb::RankExceedsWidth*>(&e);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    print_usage(std::cerr);
    return kConfigError;
  }
  const std::string verb = argv[1];
  try {
    const CliOptions opts = parse_options(argc, argv, 2);
    if (verb == "run") return run_verb(opts);
    if (verb == "compare") return compare_verb(opts);
    if (verb == "validate-config") return validate_verb(opts);
    if (verb == "list-presets") return list_presets_verb(opts);
    if (verb == "--help" || verb == "-h") {
      print_usage(std::cout);
      return kOk;
    }
    std::cerr << "unknown verb: " << verb << "\n";
    print_usage(std::cerr);
    return kConfigError;
  } catch (const lrkb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const CompareError& e) {
    std::cerr << "compare error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    if (is_numerical_failure(e)) {
      std::cerr << "numerical failure: " << e.what() << "\n";
      return kNumericalError;
    }
    std::cerr << "error: " << e.what() << "\n";
    return kInternalError;
  }
}
