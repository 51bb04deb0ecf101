#include "vmoba/config.hpp"

#include <fstream>

namespace vmoba {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) {
    throw ConfigError(where + " must be a JSON object");
  }
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("unknown key \"" + item.key() + "\" in " + where);
    }
  }
}

std::size_t get_count(const json& j, const char* key, const std::string& where,
                      std::size_t fallback, bool required = false) {
  if (!j.contains(key)) {
    if (required) throw ConfigError(where + " is missing \"" + key + "\"");
    return fallback;
  }
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError(where + "." + key + " must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

double get_real(const json& j, const char* key, const std::string& where,
                double fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number()) {
    throw ConfigError(where + "." + key + " must be a number");
  }
  return v.get<double>();
}

bool get_flag(const json& j, const char* key, const std::string& where,
              bool fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_boolean()) {
    throw ConfigError(where + "." + key + " must be a boolean");
  }
  return v.get<bool>();
}

std::string get_text(const json& j, const char* key, const std::string& where,
                     const std::string& fallback, bool required = false) {
  if (!j.contains(key)) {
    if (required) throw ConfigError(where + " is missing \"" + key + "\"");
    return fallback;
  }
  const json& v = j.at(key);
  if (!v.is_string()) {
    throw ConfigError(where + "." + key + " must be a string");
  }
  return v.get<std::string>();
}

LatentGeometry parse_geometry(const json& j, const std::string& where,
                              const LatentGeometry& fallback) {
  check_keys(j, where, {"frames", "height", "width", "hidden", "heads"});
  LatentGeometry g;
  g.frames = get_count(j, "frames", where, fallback.frames, true);
  g.height = get_count(j, "height", where, fallback.height, true);
  g.width = get_count(j, "width", where, fallback.width, true);
  g.hidden = get_count(j, "hidden", where, fallback.hidden, true);
  g.heads = get_count(j, "heads", where, fallback.heads);
  if (g.heads == 0) g.heads = 1;
  return g;
}

PartitionSpec parse_partition(const json& j, const std::string& where,
                              Scheme expected) {
  check_keys(j, where, {"scheme", "block"});
  std::string scheme = get_text(j, "scheme", where, "", true);
  PartitionSpec spec;
  spec.scheme = scheme_from_name(scheme);
  if (spec.scheme != expected) {
    throw ConfigError(where + ".scheme must be \"" +
                      scheme_name(expected) + "\"");
  }
  if (!j.contains("block") || !j.at("block").is_array()) {
    throw ConfigError(where + ".block must be an array of sizes");
  }
  for (const json& v : j.at("block")) {
    if (!v.is_number_integer() || v.get<std::int64_t>() <= 0) {
      throw ConfigError(where + ".block entries must be positive integers");
    }
    spec.block.push_back(v.get<std::size_t>());
  }
  return spec;
}

SelectionPolicy parse_selection(const json& j, const std::string& where) {
  check_keys(j, where, {"scope", "rule", "tau", "k", "scaled", "include_self"});
  SelectionPolicy p;
  std::string scope = get_text(j, "scope", where, "global");
  if (scope == "global") {
    p.scope = SelectionScope::global;
  } else if (scope == "local") {
    p.scope = SelectionScope::local;
  } else {
    throw ConfigError(where + ".scope must be \"local\" or \"global\"");
  }
  std::string rule = get_text(j, "rule", where, "threshold");
  if (rule == "topk") {
    p.rule = SelectionRule::topk;
  } else if (rule == "threshold") {
    p.rule = SelectionRule::threshold;
  } else {
    throw ConfigError(where + ".rule must be \"topk\" or \"threshold\"");
  }
  p.tau = get_real(j, "tau", where, 0.25);
  p.k = get_count(j, "k", where, 2);
  p.scaled = get_flag(j, "scaled", where, true);
  p.include_self = get_flag(j, "include_self", where, true);
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return p;
}

BenchConfig parse_bench(const json& j) {
  const std::string where = "bench";
  check_keys(j, where,
             {"lengths", "repetitions", "frames", "hidden", "heads",
              "block_counts"});
  BenchConfig b;
  if (j.contains("lengths")) {
    if (!j.at("lengths").is_array()) {
      throw ConfigError("bench.lengths must be an array");
    }
    b.lengths.clear();
    for (const json& v : j.at("lengths")) {
      if (!v.is_number_integer() || v.get<std::int64_t>() <= 0) {
        throw ConfigError("bench.lengths entries must be positive integers");
      }
      b.lengths.push_back(v.get<std::size_t>());
    }
  }
  b.repetitions = get_count(j, "repetitions", where, b.repetitions);
  if (b.repetitions < 5) {
    throw ConfigError("bench.repetitions must be at least 5 (median basis)");
  }
  b.frames = get_count(j, "frames", where, b.frames);
  b.hidden = get_count(j, "hidden", where, b.hidden);
  b.heads = get_count(j, "heads", where, b.heads);
  if (j.contains("block_counts")) {
    const json& v = j.at("block_counts");
    if (!v.is_array() || v.size() != 3) {
      throw ConfigError("bench.block_counts must hold exactly 3 entries");
    }
    for (std::size_t i = 0; i < 3; ++i) {
      if (!v[i].is_number_integer() || v[i].get<std::int64_t>() <= 0) {
        throw ConfigError("bench.block_counts entries must be positive");
      }
      b.block_counts[i] = v[i].get<std::size_t>();
    }
  }
  return b;
}

AnalysisConfig parse_analysis(const json& j) {
  const std::string where = "analysis";
  check_keys(j, where, {"q", "k", "p", "fractions", "scheme"});
  AnalysisConfig a;
  a.q_path = get_text(j, "q", where, "", true);
  a.k_path = get_text(j, "k", where, "", true);
  a.p = get_real(j, "p", where, a.p);
  if (!(a.p > 0.0) || a.p > 1.0) {
    throw ConfigError("analysis.p must lie in (0, 1]");
  }
  if (j.contains("fractions")) {
    if (!j.at("fractions").is_array()) {
      throw ConfigError("analysis.fractions must be an array");
    }
    a.fractions.clear();
    for (const json& v : j.at("fractions")) {
      if (!v.is_number() || !(v.get<double>() > 0.0) || v.get<double>() > 1.0) {
        throw ConfigError("analysis.fractions entries must lie in (0, 1]");
      }
      a.fractions.push_back(v.get<double>());
    }
  }
  a.scheme = scheme_from_name(get_text(j, "scheme", where, "3d"));
  return a;
}

void parse_toytrain(const json& j, RunConfig& cfg) {
  const std::string where = "toytrain";
  check_keys(j, where,
             {"geometry", "layers", "steps", "learning_rate", "seed", "batch",
              "eval_every", "modes", "tau", "k", "partition"});
  ToyModelConfig& t = cfg.toytrain;
  if (j.contains("geometry")) {
    t.geometry = parse_geometry(j.at("geometry"), where + ".geometry",
                                t.geometry);
  }
  t.layers = get_count(j, "layers", where, t.layers);
  t.steps = get_count(j, "steps", where, t.steps);
  t.learning_rate = get_real(j, "learning_rate", where, t.learning_rate);
  t.seed = get_count(j, "seed", where, static_cast<std::size_t>(t.seed));
  t.batch = get_count(j, "batch", where, t.batch);
  t.eval_every = get_count(j, "eval_every", where, t.eval_every);
  t.tau = get_real(j, "tau", where, t.tau);
  t.moba_k = get_count(j, "k", where, t.moba_k);
  if (j.contains("modes")) {
    if (!j.at("modes").is_array() || j.at("modes").empty()) {
      throw ConfigError("toytrain.modes must be a non-empty array");
    }
    cfg.toytrain_modes.clear();
    for (const json& v : j.at("modes")) {
      if (!v.is_string()) {
        throw ConfigError("toytrain.modes entries must be strings");
      }
      try {
        cfg.toytrain_modes.push_back(attention_mode_from_name(v.get<std::string>()));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("toytrain.modes: ") + e.what());
      }
    }
  }
  if (j.contains("partition")) {
    const json& p = j.at("partition");
    check_keys(p, where + ".partition", {"1d", "2d", "3d"});
    if (p.contains("1d")) {
      t.part_1d = parse_partition(p.at("1d"), where + ".partition.1d",
                                  Scheme::temporal_1d);
    }
    if (p.contains("2d")) {
      t.part_2d = parse_partition(p.at("2d"), where + ".partition.2d",
                                  Scheme::spatial_2d);
    }
    if (p.contains("3d")) {
      t.part_3d = parse_partition(p.at("3d"), where + ".partition.3d",
                                  Scheme::spatio_temporal_3d);
    }
  }
}

// Quarter-extent fallbacks, mirroring the toy model's defaults.
PartitionSpec default_spec(Scheme scheme, const LatentGeometry& g) {
  auto quarter = [](std::size_t e) { return (e + 3) / 4; };
  switch (scheme) {
    case Scheme::temporal_1d:
      return PartitionSpec::temporal(quarter(g.frames));
    case Scheme::spatial_2d:
      return PartitionSpec::spatial(quarter(g.height), quarter(g.width));
    case Scheme::spatio_temporal_3d:
      return PartitionSpec::spatio_temporal((g.frames + 1) / 2,
                                            quarter(g.height),
                                            quarter(g.width));
  }
  throw ConfigError("unknown scheme");
}

}  // namespace

void RunConfig::validate() const {
  try {
    geometry.validate();
    part_1d.validate(geometry);
    part_2d.validate(geometry);
    part_3d.validate(geometry);
    selection.validate();
    ToyModelConfig toy = toytrain.with_defaults();
    toy.validate();
    toy.part_1d.validate(toy.geometry);
    toy.part_2d.validate(toy.geometry);
    toy.part_3d.validate(toy.geometry);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (out_dir.empty()) {
    throw ConfigError("out_dir must not be empty");
  }
}

RunConfig parse_run_config(const nlohmann::json& j) {
  check_keys(j, "config",
             {"geometry", "partition", "selection", "seed", "out_dir", "bench",
              "analysis", "toytrain"});
  if (!j.contains("geometry")) {
    throw ConfigError("config is missing \"geometry\"");
  }

  RunConfig cfg;
  cfg.geometry = parse_geometry(j.at("geometry"), "geometry", cfg.geometry);

  if (j.contains("partition")) {
    const json& p = j.at("partition");
    check_keys(p, "partition", {"1d", "2d", "3d"});
    if (p.contains("1d")) {
      cfg.part_1d = parse_partition(p.at("1d"), "partition.1d",
                                    Scheme::temporal_1d);
    }
    if (p.contains("2d")) {
      cfg.part_2d = parse_partition(p.at("2d"), "partition.2d",
                                    Scheme::spatial_2d);
    }
    if (p.contains("3d")) {
      cfg.part_3d = parse_partition(p.at("3d"), "partition.3d",
                                    Scheme::spatio_temporal_3d);
    }
  }
  if (cfg.part_1d.block.empty()) {
    cfg.part_1d = default_spec(Scheme::temporal_1d, cfg.geometry);
  }
  if (cfg.part_2d.block.empty()) {
    cfg.part_2d = default_spec(Scheme::spatial_2d, cfg.geometry);
  }
  if (cfg.part_3d.block.empty()) {
    cfg.part_3d = default_spec(Scheme::spatio_temporal_3d, cfg.geometry);
  }

  if (j.contains("selection")) {
    cfg.selection = parse_selection(j.at("selection"), "selection");
  }
  cfg.seed = get_count(j, "seed", "config", static_cast<std::size_t>(cfg.seed));
  cfg.out_dir = get_text(j, "out_dir", "config", cfg.out_dir);
  if (j.contains("bench")) cfg.bench = parse_bench(j.at("bench"));
  if (j.contains("analysis")) {
    cfg.has_analysis = true;
    cfg.analysis = parse_analysis(j.at("analysis"));
  }
  if (j.contains("toytrain")) parse_toytrain(j.at("toytrain"), cfg);

  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file " + path.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " +
                      e.what());
  }
  try {
    return parse_run_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

}  // namespace vmoba
