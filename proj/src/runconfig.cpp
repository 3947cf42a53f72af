#include "ribtoy/runconfig.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ribtoy/errors.hpp"

namespace ribtoy {

namespace {

double margin_value(const nlohmann::json& v, const std::string& path) {
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "inf" || s == "+inf" || s == "infinity") {
      return std::numeric_limits<double>::infinity();
    }
    throw ValueError(path + R"(: expected a number or "inf", got ")" + s +
                     "\"");
  }
  if (v.is_number()) return v.get<double>();
  throw ValueError(path + ": expected a number or \"inf\"");
}

nlohmann::json margin_json(double margin) {
  if (std::isinf(margin)) return "inf";
  return margin;
}

PoolMode pooling_value(const nlohmann::json& v, const std::string& path) {
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "gap") return PoolMode::Gap;
    if (s == "gndrp") return PoolMode::Gndrp;
  }
  throw ValueError(path + R"(: expected "gap" or "gndrp")");
}

const char* pooling_name(PoolMode mode) {
  return mode == PoolMode::Gap ? "gap" : "gndrp";
}

void set_field(RunConfig& cfg, const std::string& section,
               const std::string& key, const nlohmann::json& v) {
  const std::string path = section + "." + key;
  auto as_number = [&]() -> double {
    if (!v.is_number()) throw ValueError(path + ": expected a number");
    return v.get<double>();
  };
  auto as_int = [&]() -> int {
    if (!v.is_number_integer()) {
      throw ValueError(path + ": expected an integer");
    }
    return v.get<int>();
  };
  auto as_u64 = [&]() -> std::uint64_t {
    if (!v.is_number_integer()) {
      throw ValueError(path + ": expected an integer");
    }
    return v.get<std::uint64_t>();
  };
  auto as_string = [&]() -> std::string {
    if (!v.is_string()) throw ValueError(path + ": expected a string");
    return v.get<std::string>();
  };

  if (section == "dataset") {
    if (key == "source") cfg.dataset.source = as_string();
    else if (key == "idx_images") cfg.dataset.idx_images = as_string();
    else if (key == "idx_labels") cfg.dataset.idx_labels = as_string();
    else if (key == "n_per_class") {
      const int n = as_int();
      if (n < 0) throw ValueError(path + ": must be >= 0");
      cfg.dataset.n_per_class = static_cast<std::size_t>(n);
    } else if (key == "marker_fraction") {
      cfg.dataset.marker_fraction = as_number();
    } else if (key == "eval_fraction") {
      cfg.dataset.eval_fraction = as_number();
    } else if (key == "seed") cfg.dataset.seed = as_u64();
    else throw ValueError("unknown config key " + path);
  } else if (section == "model") {
    if (key == "init_seed") {
      cfg.model_init_seed = as_u64();
      cfg.pretrain.seed = cfg.model_init_seed;
    } else {
      throw ValueError("unknown config key " + path);
    }
  } else if (section == "pretrain") {
    if (key == "epochs") cfg.pretrain.epochs = as_int();
    else if (key == "lr") cfg.pretrain.lr = as_number();
    else if (key == "momentum") cfg.pretrain.momentum = as_number();
    else if (key == "batch") cfg.pretrain.batch = as_int();
    else throw ValueError("unknown config key " + path);
  } else if (section == "rib") {
    if (key == "preset") {
      const std::string name = as_string();
      const std::uint64_t keep_seed = cfg.rib.seed;
      if (name == "toy") cfg.rib = RibConfig{};
      else if (name == "paper") cfg.rib = paper_rib_config();
      else throw ValueError(path + R"(: expected "toy" or "paper")");
      cfg.rib.seed = keep_seed;
      cfg.rib_preset = name;
    } else if (key == "K") cfg.rib.K = as_int();
    else if (key == "lambda") cfg.rib.lambda = as_number();
    else if (key == "margin") cfg.rib.margin = margin_value(v, path);
    else if (key == "B") cfg.rib.B = as_int();
    else if (key == "tau") cfg.rib.tau = as_number();
    else if (key == "pooling") cfg.rib.pooling = pooling_value(v, path);
    else if (key == "seed") cfg.rib.seed = as_u64();
    else throw ValueError("unknown config key " + path);
  } else if (section == "analysis") {
    if (key == "threshold") cfg.analysis_threshold = as_number();
    else if (key == "n_images") cfg.analysis_n_images = as_int();
    else throw ValueError("unknown config key " + path);
  } else if (section == "eval") {
    if (key == "thresholds") {
      if (!v.is_array() || v.empty()) {
        throw ValueError(path + ": expected a non-empty array of numbers");
      }
      std::vector<double> ts;
      for (const auto& item : v) {
        if (!item.is_number()) {
          throw ValueError(path + ": expected a non-empty array of numbers");
        }
        ts.push_back(item.get<double>());
      }
      cfg.eval_thresholds = std::move(ts);
    } else {
      throw ValueError("unknown config key " + path);
    }
  } else if (section == "scratch") {
    if (key == "epochs") cfg.scratch.epochs = as_int();
    else if (key == "lr") cfg.scratch.lr = as_number();
    else if (key == "margin") cfg.scratch.margin = margin_value(v, path);
    else if (key == "batch") cfg.scratch.batch = as_int();
    else if (key == "seed") cfg.scratch.seed = as_u64();
    else throw ValueError("unknown config key " + path);
  } else {
    throw ValueError("unknown config section \"" + section + "\"");
  }
}

void apply_section(RunConfig& cfg, const std::string& section,
                   const nlohmann::json& body) {
  static const char* kSections[] = {"dataset",  "model", "pretrain", "rib",
                                    "analysis", "eval",  "scratch"};
  if (std::find(std::begin(kSections), std::end(kSections), section) ==
      std::end(kSections)) {
    throw ValueError("unknown config section \"" + section + "\"");
  }
  if (!body.is_object()) {
    throw ValueError("config section \"" + section + "\" must be an object");
  }
  // The preset is a whole-section baseline: apply it before its overrides.
  if (section == "rib" && body.contains("preset")) {
    set_field(cfg, section, "preset", body.at("preset"));
  }
  for (const auto& [key, value] : body.items()) {
    if (section == "rib" && key == "preset") continue;
    set_field(cfg, section, key, value);
  }
}

}  // namespace

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.pretrain.seed = cfg.model_init_seed;
  return cfg;
}

RunConfig parse_run_config(const nlohmann::json& doc) {
  if (!doc.is_object()) {
    throw ValueError("run config must be a JSON object");
  }
  RunConfig cfg = default_run_config();
  for (const auto& [section, body] : doc.items()) {
    if (section == "out") {
      if (!body.is_string()) throw ValueError("out: expected a string");
      cfg.out = body.get<std::string>();
      continue;
    }
    apply_section(cfg, section, body);
  }
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& dotted_key,
                    const std::string& value) {
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr,
                                                /*allow_exceptions=*/false);
  if (parsed.is_discarded()) parsed = value;  // bare strings stay strings

  const std::size_t dot = dotted_key.find('.');
  if (dot == std::string::npos) {
    if (dotted_key == "out") {
      if (!parsed.is_string()) {
        cfg.out = value;
      } else {
        cfg.out = parsed.get<std::string>();
      }
      return;
    }
    throw ValueError("unknown config key " + dotted_key);
  }
  set_field(cfg, dotted_key.substr(0, dot), dotted_key.substr(dot + 1),
            parsed);
}

void apply_global_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.dataset.seed = seed;
  cfg.model_init_seed = seed;
  cfg.pretrain.seed = seed;
  cfg.rib.seed = seed;
  cfg.scratch.seed = seed;
}

nlohmann::json run_config_json(const RunConfig& cfg) {
  return nlohmann::json{
      {"dataset",
       {{"source", cfg.dataset.source},
        {"idx_images", cfg.dataset.idx_images},
        {"idx_labels", cfg.dataset.idx_labels},
        {"n_per_class", cfg.dataset.n_per_class},
        {"marker_fraction", cfg.dataset.marker_fraction},
        {"eval_fraction", cfg.dataset.eval_fraction},
        {"seed", cfg.dataset.seed}}},
      {"model", {{"init_seed", cfg.model_init_seed}}},
      {"pretrain",
       {{"epochs", cfg.pretrain.epochs},
        {"lr", cfg.pretrain.lr},
        {"momentum", cfg.pretrain.momentum},
        {"batch", cfg.pretrain.batch}}},
      {"rib",
       {{"preset", cfg.rib_preset},
        {"K", cfg.rib.K},
        {"lambda", cfg.rib.lambda},
        {"margin", margin_json(cfg.rib.margin)},
        {"B", cfg.rib.B},
        {"tau", cfg.rib.tau},
        {"pooling", pooling_name(cfg.rib.pooling)},
        {"seed", cfg.rib.seed}}},
      {"analysis",
       {{"threshold", cfg.analysis_threshold},
        {"n_images", cfg.analysis_n_images}}},
      {"eval", {{"thresholds", cfg.eval_thresholds}}},
      {"scratch",
       {{"epochs", cfg.scratch.epochs},
        {"lr", cfg.scratch.lr},
        {"margin", margin_json(cfg.scratch.margin)},
        {"batch", cfg.scratch.batch},
        {"seed", cfg.scratch.seed}}},
      {"out", cfg.out}};
}

}  // namespace ribtoy
