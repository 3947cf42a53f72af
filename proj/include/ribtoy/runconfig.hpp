#pragma once

// The run configuration: one JSON document that drives every pipeline stage.
// Every field has a documented default, unknown keys are rejected, and the
// resolved configuration can be echoed back out verbatim.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "ribtoy/eval.hpp"
#include "ribtoy/model.hpp"
#include "ribtoy/rib.hpp"
#include "ribtoy/toydata.hpp"

namespace ribtoy {

struct RunConfig {
  DatasetConfig dataset;  // source, idx paths, sizes, marker fraction, seed

  // Seeds the weight initialization and the pretraining shuffle.
  std::uint64_t model_init_seed = 0;

  PretrainConfig pretrain;  // epochs, lr, momentum, batch (seed comes from
                            // model_init_seed at resolution time)

  std::string rib_preset = "toy";  // "toy" or "paper"
  RibConfig rib;

  double analysis_threshold = 0.3;
  int analysis_n_images = 100;

  std::vector<double> eval_thresholds = default_seed_thresholds();

  ScratchRibConfig scratch;

  std::string out = "run";
};

// The documented defaults (equal to a default-constructed RunConfig with the
// pretrain seed mirrored from model_init_seed).
RunConfig default_run_config();

// Parses a full document. Unknown sections or keys raise ValueError naming
// the offending key path; type mismatches likewise.
RunConfig parse_run_config(const nlohmann::json& doc);

// Applies one dotted override, e.g. ("rib.lambda", "0.01") or
// ("dataset.source", "idx"). The value string is parsed as JSON when
// possible and taken as a bare string otherwise.
void apply_override(RunConfig& cfg, const std::string& dotted_key,
                    const std::string& value);

// Routes one seed into every stage that consumes one.
void apply_global_seed(RunConfig& cfg, std::uint64_t seed);

// Full-schema echo of the resolved configuration. Infinite margins are
// encoded as the string "inf".
nlohmann::json run_config_json(const RunConfig& cfg);

}  // namespace ribtoy
