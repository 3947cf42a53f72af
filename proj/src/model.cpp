#include "ribtoy/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "ribtoy/binio.hpp"
#include "ribtoy/util.hpp"

namespace ribtoy {

std::vector<Tensor*> ModelParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& layer : conv) {
    out.push_back(&layer.kernel);
    out.push_back(&layer.bias);
  }
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
  std::vector<const Tensor*> out;
  for (const auto& layer : conv) {
    out.push_back(&layer.kernel);
    out.push_back(&layer.bias);
  }
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

ModelParams ModelParams::deep_copy() const {
  ModelParams out;
  for (std::size_t l = 0; l < conv.size(); ++l) {
    out.conv[l].kernel = conv[l].kernel.deep_copy();
    out.conv[l].bias = conv[l].bias.deep_copy();
  }
  out.head_w = head_w.deep_copy();
  out.head_b = head_b.deep_copy();
  out.init_seed = init_seed;
  return out;
}

void ModelParams::zero_grads() {
  for (Tensor* t : tensors()) t->zero_grad();
}

bool ModelParams::bit_equal(const ModelParams& other) const {
  auto a = tensors(), b = other.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->shape() != b[i]->shape()) return false;
    if (std::memcmp(a[i]->data().data(), b[i]->data().data(),
                    a[i]->size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

ModelParams init_model(std::uint64_t seed) {
  ModelParams p;
  p.init_seed = seed;
  std::mt19937_64 rng(seed);
  std::size_t in_ch = 1;
  for (std::size_t l = 0; l < kConvWidths.size(); ++l) {
    const std::size_t out_ch = kConvWidths[l];
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_ch * 9));
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> k(out_ch * in_ch * 9);
    for (auto& v : k) v = dist(rng);
    p.conv[l].kernel =
        Tensor::from_data({out_ch, in_ch, 3, 3}, std::move(k), true);
    p.conv[l].bias = Tensor::zeros({out_ch}, true);
    in_ch = out_ch;
  }
  {
    const double stddev = std::sqrt(2.0 / static_cast<double>(kFeatureDim));
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> w(2 * kFeatureDim);
    for (auto& v : w) v = dist(rng);
    p.head_w = Tensor::from_data({2, kFeatureDim}, std::move(w), true);
    p.head_b = Tensor::zeros({2}, true);
  }
  return p;
}

CamResult cam_from_feature(std::span<const double> t5,
                           std::span<const double> w_row) {
  CamResult out;
  out.raw.assign(kImagePixels, 0.0);
  for (std::size_t f = 0; f < kFeatureDim; ++f) {
    const double w = w_row[f];
    const double* plane = t5.data() + f * kImagePixels;
    for (std::size_t u = 0; u < kImagePixels; ++u)
      out.raw[u] += w * plane[u];
  }
  double mx = out.raw[0];
  for (double v : out.raw) mx = std::max(mx, v);
  if (!(mx > 0.0))
    throw DegenerateMapError(
        "class activation map has no positive response to normalize against");
  out.normalized.resize(kImagePixels);
  for (std::size_t u = 0; u < kImagePixels; ++u)
    out.normalized[u] = out.raw[u] / mx;
  return out;
}

ForwardTrace forward(Tape& tape, const ModelParams& params, const Tensor& x,
                     const PoolingSpec& pooling) {
  if (x.rank() != 4 || x.shape()[1] != 1 || x.shape()[2] != kImageH ||
      x.shape()[3] != kImageW) {
    std::ostringstream os;
    os << "forward: input must be [N,1,28,28]";
    throw ShapeError(os.str());
  }
  const std::size_t N = x.shape()[0];

  ForwardTrace trace;
  trace.mode = pooling.mode;
  Tensor cur = x;
  for (std::size_t l = 0; l < params.conv.size(); ++l) {
    Tensor pre = tape.conv2d(cur, params.conv[l].kernel, params.conv[l].bias);
    cur = tape.relu(pre);
    trace.features[l] = cur;
  }

  if (pooling.mode == PoolMode::Gap) {
    trace.pooled = tape.gap(cur);
  } else {
    if (pooling.classes.size() != N)
      throw ValueError(
          "forward: GNDRP mode needs one governing class per sample");
    // Selection CAMs from this forward's own T_5 values, as constants.
    std::vector<double> cams(N * kImagePixels);
    for (std::size_t n = 0; n < N; ++n) {
      const int cls = pooling.classes[n];
      if (cls < 0 || cls >= kNumClasses)
        throw ValueError("forward: governing class out of range");
      auto t5 = cur.data().subspan(n * kFeatureDim * kImagePixels,
                                   kFeatureDim * kImagePixels);
      auto w_row = params.head_w.data().subspan(
          static_cast<std::size_t>(cls) * kFeatureDim, kFeatureDim);
      CamResult cm = cam_from_feature(t5, w_row);
      std::copy(cm.normalized.begin(), cm.normalized.end(),
                cams.begin() + n * kImagePixels);
    }
    Tensor cam_tensor =
        Tensor::from_data({N, kImageH, kImageW}, std::move(cams));
    GndrpResult res = tape.gndrp(cur, cam_tensor, pooling.tau);
    trace.pooled = res.pooled;
    trace.gndrp_fallback = std::move(res.fallback);
    trace.fallback_count = res.fallback_count;
  }
  trace.logits = tape.linear(trace.pooled, params.head_w, params.head_b);
  return trace;
}

CamResult cam(const ModelParams& params, std::span<const double> pixels,
              int cls) {
  if (pixels.size() != kImagePixels)
    throw ShapeError("cam: expected a 784-pixel image");
  if (cls < 0 || cls >= kNumClasses)
    throw ValueError("cam: class out of range");
  Tape tape;
  Tensor x = Tensor::from_data({1, 1, kImageH, kImageW},
                               {pixels.begin(), pixels.end()});
  PoolingSpec spec;
  ForwardTrace trace = forward(tape, params, x, spec);
  auto w_row = params.head_w.data().subspan(
      static_cast<std::size_t>(cls) * kFeatureDim, kFeatureDim);
  return cam_from_feature(trace.features[4].data(), w_row);
}

std::array<double, 2> gap_logits(const ModelParams& params,
                                 std::span<const double> pixels) {
  Tape tape;
  Tensor x = Tensor::from_data({1, 1, kImageH, kImageW},
                               {pixels.begin(), pixels.end()});
  PoolingSpec spec;
  ForwardTrace trace = forward(tape, params, x, spec);
  return {trace.logits.data()[0], trace.logits.data()[1]};
}

void SgdOptimizer::step(ModelParams& params, double lr, double momentum) {
  auto ts = params.tensors();
  if (velocity.empty()) {
    velocity.resize(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i)
      velocity[i].assign(ts[i]->size(), 0.0);
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    Tensor& t = *ts[i];
    if (!t.has_grad())
      throw UsageError("sgd step: a parameter is missing its gradient");
    auto g = t.grad();
    auto v = velocity[i].data();
    auto d = t.data();
    for (std::size_t j = 0; j < t.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      d[j] -= lr * v[j];
    }
  }
}

void sgd_step(ModelParams& params, double lr) {
  for (Tensor* t : params.tensors()) {
    if (!t->has_grad())
      throw UsageError("sgd step: a parameter is missing its gradient");
    auto g = t->grad();
    auto d = t->data();
    for (std::size_t j = 0; j < t->size(); ++j) d[j] -= lr * g[j];
  }
}

namespace {

Tensor batch_pixels(const ToyDataset& ds, std::span<const std::size_t> idx) {
  std::vector<double> data;
  data.reserve(idx.size() * kImagePixels);
  for (std::size_t i : idx) {
    const auto& px = ds.samples[i].pixels;
    data.insert(data.end(), px.begin(), px.end());
  }
  return Tensor::from_data({idx.size(), 1, kImageH, kImageW},
                           std::move(data));
}

Tensor batch_labels(const ToyDataset& ds, std::span<const std::size_t> idx) {
  std::vector<double> data;
  data.reserve(idx.size() * 2);
  for (std::size_t i : idx) {
    data.push_back(ds.samples[i].label[0]);
    data.push_back(ds.samples[i].label[1]);
  }
  return Tensor::from_data({idx.size(), 2}, std::move(data));
}

}  // namespace

double accuracy(const ModelParams& params, const ToyDataset& ds,
                std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValueError("accuracy: empty index set");
  std::size_t correct = 0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto n = std::min(chunk, indices.size() - start);
    auto part = indices.subspan(start, n);
    Tape tape;
    Tensor x = batch_pixels(ds, part);
    PoolingSpec spec;
    ForwardTrace trace = forward(tape, params, x, spec);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = trace.logits.data().data() + i * 2;
      const int pred = row[1] > row[0] ? 1 : 0;
      if (pred == ds.samples[part[i]].class_index()) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

PretrainResult pretrain(const ToyDataset& ds, const PretrainConfig& cfg) {
  if (cfg.epochs < 1) throw ValueError("pretrain: epochs must be >= 1");
  if (cfg.batch < 1) throw ValueError("pretrain: batch must be >= 1");
  auto train = ds.split_indices(Split::Train);
  auto eval = ds.split_indices(Split::Eval);
  bool has0 = false, has1 = false;
  for (std::size_t i : train) {
    if (ds.samples[i].class_index() == 0) has0 = true;
    else has1 = true;
  }
  if (!has0 || !has1)
    throw ValueError("pretrain: training split must contain both classes");

  PretrainResult result;
  result.params = init_model(cfg.seed);
  SgdOptimizer opt;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(
        {cfg.seed, 0x65, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(train.begin(), train.end(), rng);
    double loss_sum = 0.0;
    try {
      for (std::size_t start = 0; start < train.size();
           start += static_cast<std::size_t>(cfg.batch)) {
        const auto n = std::min(static_cast<std::size_t>(cfg.batch),
                                train.size() - start);
        auto part = std::span<const std::size_t>(train).subspan(start, n);
        Tape tape;
        Tensor x = batch_pixels(ds, part);
        Tensor t = batch_labels(ds, part);
        PoolingSpec spec;
        ForwardTrace trace = forward(tape, result.params, x, spec);
        Tensor loss = tape.bce_loss(trace.logits, t, ProbKind::Sigmoid);
        const double lv = loss.item();
        if (!std::isfinite(lv))
          throw NumericError("pretrain: non-finite loss");
        loss_sum += lv * static_cast<double>(n);
        result.params.zero_grads();
        tape.backward(loss);
        opt.step(result.params, cfg.lr, cfg.momentum);
      }
    } catch (const NumericError& e) {
      throw TrainingError(std::string("pretrain diverged: ") + e.what(),
                          epoch);
    }
    EpochStats stats;
    stats.loss = loss_sum / static_cast<double>(train.size());
    stats.train_accuracy = accuracy(result.params, ds, train);
    stats.eval_accuracy = accuracy(result.params, ds, eval);
    result.log.push_back(stats);
  }
  return result;
}

// ---------------------------------------------------------- checkpoint

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& params) {
  ByteWriter w;
  w.magic("RIBW");
  w.u32be(kCheckpointVersion);
  w.u64be(params.init_seed);
  for (const Tensor* t : params.tensors()) {
    w.u8(static_cast<std::uint8_t>(t->rank()));
    for (std::size_t d : t->shape()) w.u32be(static_cast<std::uint32_t>(d));
    for (double v : t->data()) w.f64be(v);
  }
  w.finish_crc32();
  return w.take();
}

ModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  {
    if (bytes.size() < 4) throw FormatError("checkpoint: truncated");
    ByteReader whole(bytes);
    whole.bytes(bytes.size() - 4, "payload");
    whole.check_crc32("checkpoint");
  }
  ByteReader r(bytes);
  r.expect_magic("RIBW", "checkpoint");
  const std::uint32_t version = r.u32be("version");
  if (version != kCheckpointVersion) {
    std::ostringstream os;
    os << "checkpoint: unsupported version " << version;
    throw FormatError(os.str());
  }
  ModelParams reference = init_model(0);
  ModelParams out;
  out.init_seed = r.u64be("seed");
  auto ref_tensors = reference.tensors();
  auto out_tensors = out.tensors();
  for (std::size_t i = 0; i < ref_tensors.size(); ++i) {
    const auto& want_shape = ref_tensors[i]->shape();
    const std::uint8_t rank = r.u8("tensor rank");
    if (rank != want_shape.size())
      throw FormatError("checkpoint: tensor rank does not match architecture");
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (auto& d : shape) {
      d = r.u32be("tensor dim");
      total *= d;
    }
    if (shape != want_shape)
      throw FormatError("checkpoint: tensor shape does not match architecture");
    std::vector<double> data(total);
    for (auto& v : data) v = r.f64be("tensor value");
    *out_tensors[i] = Tensor::from_data(std::move(shape), std::move(data), true);
  }
  if (r.remaining() != 4)
    throw FormatError("checkpoint: trailing bytes before CRC");
  return out;
}

void write_checkpoint(const ModelParams& params, const std::string& path) {
  write_file(path, serialize_checkpoint(params));
}

ModelParams read_checkpoint(const std::string& path) {
  auto bytes = read_file(path);
  return deserialize_checkpoint(bytes);
}

}  // namespace ribtoy
