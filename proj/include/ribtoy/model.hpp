#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ribtoy/tensor.hpp"
#include "ribtoy/toydata.hpp"

namespace ribtoy {

inline constexpr std::array<std::size_t, 5> kConvWidths{16, 16, 32, 32, 64};
inline constexpr std::size_t kFeatureDim = 64;

struct ConvLayer {
  Tensor kernel;  // [F, C, 3, 3]
  Tensor bias;    // [F]
};

// The 5-conv + linear-head toy classifier. All tensors require grad.
struct ModelParams {
  std::array<ConvLayer, 5> conv;
  Tensor head_w;  // [2, 64]
  Tensor head_b;  // [2]
  std::uint64_t init_seed = 0;

  // Fixed serialization/update order: conv1..conv5 (kernel, bias), head.
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  ModelParams deep_copy() const;
  void zero_grads();
  bool bit_equal(const ModelParams& other) const;
};

// He-style init: kernels ~ N(0, 2/fan_in), biases zero, deterministic.
ModelParams init_model(std::uint64_t seed);

enum class PoolMode { Gap, Gndrp };

struct PoolingSpec {
  PoolMode mode = PoolMode::Gap;
  double tau = 0.4;
  // Governing class per batch sample (GNDRP mode only).
  std::vector<int> classes;
};

struct ForwardTrace {
  std::array<Tensor, 5> features;  // post-ReLU T_1..T_5, each [N,F_l,28,28]
  Tensor pooled;                   // [N,64]
  Tensor logits;                   // [N,2]
  PoolMode mode = PoolMode::Gap;
  std::vector<std::uint8_t> gndrp_fallback;
  int fallback_count = 0;
};

// Full forward on the given tape. In GNDRP mode the selection CAM of each
// sample's governing class is computed from this very forward's T_5 values
// (treated as constants, per the pooling op's contract).
ForwardTrace forward(Tape& tape, const ModelParams& params, const Tensor& x,
                     const PoolingSpec& pooling);

struct CamResult {
  std::vector<double> raw;         // w_c^T T_5, per pixel
  std::vector<double> normalized;  // raw / max(raw); max is exactly 1
};

// Class activation map of one image (head bias excluded). Throws
// DegenerateMapError when max(raw) <= 0.
CamResult cam(const ModelParams& params, std::span<const double> pixels,
              int cls);

// The same combination applied to an existing T_5 value slice [64*784].
CamResult cam_from_feature(std::span<const double> t5,
                           std::span<const double> w_row);

// Plain logits of a single image under GAP pooling (no tape kept).
std::array<double, 2> gap_logits(const ModelParams& params,
                                 std::span<const double> pixels);

// SGD with optional momentum; velocity buffers live in the optimizer and
// are keyed by the fixed parameter order. momentum 0 reduces to the exact
// update theta -= lr * grad.
struct SgdOptimizer {
  std::vector<std::vector<double>> velocity;
  void step(ModelParams& params, double lr, double momentum);
};

// One plain step (momentum 0) without optimizer state.
void sgd_step(ModelParams& params, double lr);

struct EpochStats {
  double loss = 0.0;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
};

struct PretrainConfig {
  int epochs = 6;
  double lr = 1e-2;
  double momentum = 0.9;
  int batch = 32;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ModelParams params;
  std::vector<EpochStats> log;
};

// Multi-label sigmoid BCE training of the toy classifier (GAP pooling).
// Deterministic in (config seed, dataset). Non-finite loss raises
// TrainingError carrying the epoch index.
PretrainResult pretrain(const ToyDataset& ds, const PretrainConfig& cfg);

// Mean argmax accuracy over the given sample indices.
double accuracy(const ModelParams& params, const ToyDataset& ds,
                std::span<const std::size_t> indices);

// "RIBW" checkpoint: magic, version u32, seed u64, 12 tensors in the fixed
// order (rank u8, dims u32[], big-endian f64 payload), trailing CRC32.
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const ModelParams& params, const std::string& path);
ModelParams read_checkpoint(const std::string& path);

}  // namespace ribtoy
