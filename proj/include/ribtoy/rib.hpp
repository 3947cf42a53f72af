#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ribtoy/model.hpp"
#include "ribtoy/toydata.hpp"

namespace ribtoy {

// Per-image adaptation settings. The defaults are the desk-scale working
// point; paper_rib_config() holds the full-scale reference values.
struct RibConfig {
  int K = 10;             // adaptation iterations
  double lambda = 1e-3;   // adaptation learning rate
  double margin = 50.0;   // logit margin m
  int B = 20;             // batch size including the image itself
  double tau = 0.4;       // selective-pooling threshold
  PoolMode pooling = PoolMode::Gndrp;
  std::uint64_t seed = 0;
};

// Throws ValueError unless K >= 0, B >= 1, 0 < tau <= 1, lambda >= 0,
// margin > 0 (+infinity allowed).
void validate(const RibConfig& cfg);

// Full-scale reference settings (backbone-specific lr and margin).
RibConfig paper_rib_config();

struct LocalizationMap {
  // Final map: sum of the stack, negatives clamped, max-normalized to 1.
  std::vector<double> map;  // H*W
  // Per-iteration normalized activation maps, iterations 0..K inclusive.
  // Negatives are kept here; only the final map clamps them.
  std::vector<std::vector<double>> stack;
  int cls = 0;
  int fallback_count = 0;  // empty-selection fallbacks seen during adaptation
};

struct AdaptResult {
  LocalizationMap loc;
  std::vector<ModelParams> thetas;       // adapted copies, iterations 1..K
  std::vector<double> logit_trajectory;  // labeled-class GAP logit, k = 0..K
};

// Batch indices for adaptation iteration k: element 0 is x_index, the other
// B-1 are drawn uniformly without replacement from the rest of the dataset.
// Deterministic in (seed, x_index, k). Throws ValueError when the dataset
// has fewer than B samples.
std::vector<std::size_t> batch_sampler(const ToyDataset& ds,
                                       std::size_t x_index, int B,
                                       std::uint64_t seed, int k);

// K margin-loss steps from a private copy of theta0 (never mutated), with
// the activation map of x recorded before the first and after every step.
// Degenerate maps raise DegenerateMapError naming the iteration.
AdaptResult rib_adapt(const ToyDataset& ds, std::size_t x_index,
                      const ModelParams& theta0, const RibConfig& cfg);

// Identical loop with the cross-entropy loss under the given output squash
// instead of the margin loss (saturation-ablation variant).
AdaptResult finetune_bce_variant(const ToyDataset& ds, std::size_t x_index,
                                 const ModelParams& theta0,
                                 const RibConfig& cfg, ProbKind prob_kind);

struct ScratchRibConfig {
  int epochs = 5;
  double lr = 1e-3;
  // No margin by default: the loss is then unbounded below by design.
  double margin = std::numeric_limits<double>::infinity();
  int batch = 32;
  std::uint64_t seed = 0;
};

struct ScratchRibResult {
  std::vector<double> step_losses;  // one entry per optimization step
  int steps_per_epoch = 0;
  bool diverged = false;       // numeric overflow ended the run early
  int terminated_at_step = -1; // step index at which it happened
};

// Trains a fresh model with the margin loss alone (mean pooling). Expected
// to run away toward -infinity without a margin; a non-finite evaluation
// terminates the run and is recorded instead of raised.
ScratchRibResult train_from_scratch_rib(const ToyDataset& ds,
                                        const ScratchRibConfig& cfg);

// "RIBM" map container: magic, H, W, stack count u32 (all big-endian),
// then the stack and the final map as big-endian 64-bit reals. Class and
// fallback count travel in a JSON sidecar next to the file.
std::vector<std::uint8_t> serialize_localization_map(const LocalizationMap& m);
LocalizationMap deserialize_localization_map(std::span<const std::uint8_t> bytes);

// Writes `path` plus a human-readable sidecar at `path`.json carrying the
// adaptation config, the class, and the fallback count.
void write_localization_map(const LocalizationMap& m, const RibConfig& cfg,
                            const std::string& path);
// Reads the binary container; the sidecar, when present, restores class and
// fallback count (absent sidecar leaves the defaults; malformed is an error).
LocalizationMap read_localization_map(const std::string& path);

}  // namespace ribtoy
