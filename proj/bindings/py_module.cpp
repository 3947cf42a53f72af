// Python surface for the toy localization pipeline: dataset building,
// classifier training, per-image adaptation, gradient/coverage reports,
// and seed scoring, with numpy in and out.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <stdexcept>
#include <vector>

#include "ribtoy/analysis.hpp"
#include "ribtoy/errors.hpp"
#include "ribtoy/eval.hpp"
#include "ribtoy/model.hpp"
#include "ribtoy/rib.hpp"
#include "ribtoy/toydata.hpp"

namespace py = pybind11;
using namespace ribtoy;

namespace {

constexpr std::size_t kPixels = kImageH * kImageW;

py::array_t<double> image_array(std::span<const double> values) {
  if (values.size() != kPixels) {
    throw ShapeError("expected a 28x28 image buffer");
  }
  py::array_t<double> out({kImageH, kImageW});
  std::memcpy(out.mutable_data(), values.data(), kPixels * sizeof(double));
  return out;
}

py::array_t<std::uint8_t> mask_array(std::span<const std::uint8_t> values) {
  if (values.size() != kPixels) {
    throw ShapeError("expected a 28x28 mask buffer");
  }
  py::array_t<std::uint8_t> out({kImageH, kImageW});
  std::memcpy(out.mutable_data(), values.data(), kPixels);
  return out;
}

std::vector<double> image_vector(
    const py::array_t<double, py::array::c_style | py::array::forcecast>&
        arr) {
  if (static_cast<std::size_t>(arr.size()) != kPixels) {
    throw ShapeError("expected a 28x28 (or 784-long) float array, got " +
                     std::to_string(arr.size()) + " elements");
  }
  const double* p = arr.data();
  return std::vector<double>(p, p + kPixels);
}

std::vector<std::uint8_t> mask_vector(
    const py::array_t<std::uint8_t,
                      py::array::c_style | py::array::forcecast>& arr) {
  if (static_cast<std::size_t>(arr.size()) != kPixels) {
    throw ShapeError("expected a 28x28 (or 784-long) uint8 array, got " +
                     std::to_string(arr.size()) + " elements");
  }
  const std::uint8_t* p = arr.data();
  return std::vector<std::uint8_t>(p, p + kPixels);
}

std::string pooling_name(PoolMode mode) {
  return mode == PoolMode::Gap ? "gap" : "gndrp";
}

PoolMode pooling_mode(const std::string& name) {
  if (name == "gap") return PoolMode::Gap;
  if (name == "gndrp") return PoolMode::Gndrp;
  throw ValueError("pooling must be \"gap\" or \"gndrp\", got \"" + name +
                   "\"");
}

py::dict hgr_row_dict(const HgrRow& row) {
  py::dict d;
  d["axis_kind"] = row.axis_kind;
  d["axis_value"] = row.axis_value;
  d["region"] = region_name(row.region);
  d["hgr"] = row.hgr;
  d["n_images"] = row.n_images;
  d["threshold"] = row.threshold;
  return d;
}

py::list hgr_report_list(const HgrReport& report) {
  py::list rows;
  for (const HgrRow& row : report.rows) rows.append(hgr_row_dict(row));
  return rows;
}

py::dict seed_metrics_dict(const SeedMetrics& sm) {
  py::list rows;
  for (const SeedRow& r : sm.rows) {
    py::dict d;
    d["threshold"] = r.threshold;
    d["iou_fg"] = r.iou_fg;
    d["iou_bg"] = r.iou_bg;
    d["miou"] = r.miou;
    d["precision"] = r.precision;
    d["recall"] = r.recall;
    d["f1"] = r.f1;
    d["empty_union_fg"] = r.empty_union_fg;
    d["empty_union_bg"] = r.empty_union_bg;
    rows.append(d);
  }
  py::dict out;
  out["rows"] = rows;
  out["best_threshold"] = sm.best_threshold;
  out["best_miou"] = sm.best_miou;
  return out;
}

Region region_from_name(const std::string& name) {
  if (name == "D") return Region::D;
  if (name == "ND") return Region::ND;
  if (name == "BG") return Region::BG;
  throw ValueError("region must be \"D\", \"ND\", or \"BG\", got \"" + name +
                   "\"");
}

// Keyword construction for plain config structs: build the default, then
// route every keyword through the registered attributes so an unknown name
// raises AttributeError.
template <typename T>
T from_kwargs(const py::kwargs& kw) {
  py::object obj = py::cast(T{});
  for (auto item : kw) {
    py::setattr(obj, item.first, item.second);
  }
  return obj.cast<T>();
}

}  // namespace

PYBIND11_MODULE(_ribtoy, m) {
  m.doc() =
      "Toy localization pipeline: synthetic two-class data, a small conv "
      "classifier, per-image margin-loss adaptation, and seed metrics.";

  // Translators run newest-first, so the catch-all base goes in first and
  // the specific subclasses after it.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ValueError>(m, "ValueError", PyExc_ValueError);

  m.attr("IMAGE_H") = kImageH;
  m.attr("IMAGE_W") = kImageW;

  // ------------------------------------------------------------- configs --
  py::class_<DatasetConfig>(m, "DatasetConfig")
      .def(py::init<>())
      .def(py::init(&from_kwargs<DatasetConfig>))
      .def_readwrite("source", &DatasetConfig::source)
      .def_readwrite("idx_images", &DatasetConfig::idx_images)
      .def_readwrite("idx_labels", &DatasetConfig::idx_labels)
      .def_readwrite("n_per_class", &DatasetConfig::n_per_class)
      .def_readwrite("marker_fraction", &DatasetConfig::marker_fraction)
      .def_readwrite("eval_fraction", &DatasetConfig::eval_fraction)
      .def_readwrite("seed", &DatasetConfig::seed);

  py::class_<PretrainConfig>(m, "PretrainConfig")
      .def(py::init<>())
      .def(py::init(&from_kwargs<PretrainConfig>))
      .def_readwrite("epochs", &PretrainConfig::epochs)
      .def_readwrite("lr", &PretrainConfig::lr)
      .def_readwrite("momentum", &PretrainConfig::momentum)
      .def_readwrite("batch", &PretrainConfig::batch)
      .def_readwrite("seed", &PretrainConfig::seed);

  py::class_<RibConfig>(m, "RibConfig")
      .def(py::init<>())
      .def(py::init(&from_kwargs<RibConfig>))
      .def_readwrite("K", &RibConfig::K)
      .def_readwrite("lambda_", &RibConfig::lambda)
      .def_readwrite("margin", &RibConfig::margin)
      .def_readwrite("B", &RibConfig::B)
      .def_readwrite("tau", &RibConfig::tau)
      .def_readwrite("seed", &RibConfig::seed)
      .def_property(
          "pooling",
          [](const RibConfig& c) { return pooling_name(c.pooling); },
          [](RibConfig& c, const std::string& name) {
            c.pooling = pooling_mode(name);
          });
  m.def("paper_rib_config", &paper_rib_config,
        "Reference adaptation settings from the full-scale experiment.");

  // ------------------------------------------------------------- dataset --
  py::class_<ToyDataset>(m, "Dataset")
      .def_property_readonly(
          "size", [](const ToyDataset& ds) { return ds.samples.size(); })
      .def("pixels",
           [](const ToyDataset& ds, std::size_t i) {
             if (i >= ds.samples.size()) throw ValueError("index out of range");
             return image_array(ds.samples[i].pixels);
           })
      .def("label",
           [](const ToyDataset& ds, std::size_t i) {
             if (i >= ds.samples.size()) throw ValueError("index out of range");
             return ds.samples[i].label;
           })
      .def("class_index",
           [](const ToyDataset& ds, std::size_t i) {
             if (i >= ds.samples.size()) throw ValueError("index out of range");
             return ds.samples[i].class_index();
           })
      .def("region",
           [](const ToyDataset& ds, std::size_t i) {
             if (i >= ds.samples.size()) throw ValueError("index out of range");
             return mask_array(ds.samples[i].region);
           })
      .def("split",
           [](const ToyDataset& ds, std::size_t i) {
             if (i >= ds.samples.size()) throw ValueError("index out of range");
             return ds.samples[i].split == Split::Train ? "train" : "eval";
           })
      .def("train_indices",
           [](const ToyDataset& ds) { return ds.split_indices(Split::Train); })
      .def("eval_indices",
           [](const ToyDataset& ds) { return ds.split_indices(Split::Eval); })
      .def("marked_eval_indices", &ToyDataset::marked_eval_indices)
      .def("write", [](const ToyDataset& ds,
                       const std::string& path) { write_dataset(ds, path); })
      .def_static("read",
                  [](const std::string& path) { return read_dataset(path); });

  m.def(
      "build_dataset",
      [](const DatasetConfig& cfg) { return build_toy_dataset(cfg); },
      py::arg("config"),
      "Deterministic synthetic (or digit-file) dataset with region masks.");

  // --------------------------------------------------------------- model --
  py::class_<ModelParams>(m, "Model")
      .def("write", [](const ModelParams& p,
                       const std::string& path) { write_checkpoint(p, path); })
      .def_static(
          "read",
          [](const std::string& path) { return read_checkpoint(path); });

  m.def(
      "init_model", [](std::uint64_t seed) { return init_model(seed); },
      py::arg("seed") = 0,
      "Fresh classifier parameters, deterministic in the seed.");

  m.def(
      "pretrain",
      [](const ToyDataset& ds, const PretrainConfig& cfg) {
        PretrainResult res = pretrain(ds, cfg);
        py::list log;
        for (std::size_t e = 0; e < res.log.size(); ++e) {
          py::dict d;
          d["epoch"] = e;
          d["loss"] = res.log[e].loss;
          d["train_accuracy"] = res.log[e].train_accuracy;
          d["eval_accuracy"] = res.log[e].eval_accuracy;
          log.append(d);
        }
        return py::make_tuple(std::move(res.params), log);
      },
      py::arg("dataset"), py::arg("config") = PretrainConfig{},
      "Train the classifier; returns (model, per-epoch log).");

  m.def(
      "logits",
      [](const ModelParams& params,
         const py::array_t<double, py::array::c_style | py::array::forcecast>&
             pixels) { return gap_logits(params, image_vector(pixels)); },
      py::arg("model"), py::arg("pixels"),
      "Mean-pooled class scores for one image.");

  m.def(
      "cam",
      [](const ModelParams& params,
         const py::array_t<double, py::array::c_style | py::array::forcecast>&
             pixels,
         int cls) {
        CamResult r = cam(params, image_vector(pixels), cls);
        py::dict d;
        d["map"] = image_array(r.normalized);
        d["raw"] = image_array(r.raw);
        return d;
      },
      py::arg("model"), py::arg("pixels"), py::arg("cls"),
      "Class activation map (max-normalized, and raw) for one image.");

  // ---------------------------------------------------------- adaptation --
  m.def(
      "rib_adapt",
      [](const ToyDataset& ds, std::size_t index, const ModelParams& theta0,
         const RibConfig& cfg) {
        AdaptResult r = rib_adapt(ds, index, theta0, cfg);
        py::list stack;
        for (const auto& layer : r.loc.stack) stack.append(image_array(layer));
        py::dict d;
        d["map"] = image_array(r.loc.map);
        d["stack"] = stack;
        d["cls"] = r.loc.cls;
        d["fallback_count"] = r.loc.fallback_count;
        d["logit_trajectory"] = r.logit_trajectory;
        return d;
      },
      py::arg("dataset"), py::arg("index"), py::arg("model"),
      py::arg("config") = RibConfig{},
      "Per-image margin-loss adaptation; returns the localization map, the "
      "per-iteration stack, and the labeled-logit trajectory.");

  m.def(
      "finetune_bce_variant",
      [](const ToyDataset& ds, std::size_t index, const ModelParams& theta0,
         const RibConfig& cfg, const std::string& prob_kind) {
        ProbKind kind;
        if (prob_kind == "sigmoid") kind = ProbKind::Sigmoid;
        else if (prob_kind == "tanh01") kind = ProbKind::Tanh01;
        else if (prob_kind == "softsign01") kind = ProbKind::Softsign01;
        else
          throw ValueError(
              "prob_kind must be \"sigmoid\", \"tanh01\", or \"softsign01\"");
        AdaptResult r = finetune_bce_variant(ds, index, theta0, cfg, kind);
        py::dict d;
        d["map"] = image_array(r.loc.map);
        d["cls"] = r.loc.cls;
        d["logit_trajectory"] = r.logit_trajectory;
        return d;
      },
      py::arg("dataset"), py::arg("index"), py::arg("model"),
      py::arg("config"), py::arg("prob_kind"),
      "Same adaptation loop driven by squashed cross-entropy instead of the "
      "margin loss (saturation ablation).");

  // ------------------------------------------------------------ analysis --
  m.def(
      "gradient_maps",
      [](const ModelParams& params,
         const py::array_t<double, py::array::c_style | py::array::forcecast>&
             pixels,
         int cls) {
        std::vector<GradientMap> maps =
            gradient_maps(params, image_vector(pixels), cls);
        py::list out;
        for (const GradientMap& g : maps) {
          py::dict d;
          d["layer"] = g.layer;
          d["map"] = image_array(g.map);
          d["norm_ref"] = g.norm_ref;
          out.append(d);
        }
        return out;
      },
      py::arg("model"), py::arg("pixels"), py::arg("cls"),
      "All six input-gradient maps of one image on their shared scale.");

  m.def(
      "hgr",
      [](const py::array_t<double,
                           py::array::c_style | py::array::forcecast>& map,
         const py::array_t<std::uint8_t,
                           py::array::c_style | py::array::forcecast>& region,
         const std::string& which, double threshold) {
        std::vector<double> mv = image_vector(map);
        std::vector<std::uint8_t> rv = mask_vector(region);
        return hgr(mv, rv, region_from_name(which), threshold);
      },
      py::arg("map"), py::arg("region"), py::arg("which"),
      py::arg("threshold") = kDefaultHgrThreshold,
      "Fraction of the named region whose map value exceeds the threshold.");

  m.def(
      "hgr_by_layer",
      [](const ModelParams& params, const ToyDataset& ds, int n_images,
         double threshold) {
        return hgr_report_list(hgr_by_layer(params, ds, n_images, threshold));
      },
      py::arg("model"), py::arg("dataset"), py::arg("n_images") = 100,
      py::arg("threshold") = kDefaultHgrThreshold);

  m.def(
      "hgr_by_rib_iteration",
      [](const ToyDataset& ds, const ModelParams& theta0, const RibConfig& cfg,
         int n_images, double threshold) {
        return hgr_report_list(
            hgr_by_rib_iteration(ds, theta0, cfg, n_images, threshold));
      },
      py::arg("dataset"), py::arg("model"), py::arg("config") = RibConfig{},
      py::arg("n_images") = 100,
      py::arg("threshold") = kDefaultHgrThreshold);

  // ---------------------------------------------------------------- eval --
  m.def(
      "seed_from_map",
      [](const py::array_t<double,
                           py::array::c_style | py::array::forcecast>& map,
         double threshold) {
        return mask_array(seed_from_map(image_vector(map), threshold));
      },
      py::arg("map"), py::arg("threshold"),
      "Binary foreground mask: map value >= threshold.");

  m.def(
      "sweep",
      [](const py::list& maps, const ToyDataset& ds,
         const std::vector<std::size_t>& indices,
         std::vector<double> thresholds) {
        if (maps.size() != indices.size()) {
          throw ShapeError("need one map per dataset index");
        }
        std::vector<LocalizationMap> lms(maps.size());
        std::vector<ToySample> samples;
        samples.reserve(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
          if (indices[i] >= ds.samples.size()) {
            throw ValueError("index out of range");
          }
          lms[i].map = image_vector(
              maps[i].cast<py::array_t<
                  double, py::array::c_style | py::array::forcecast>>());
          samples.push_back(ds.samples[indices[i]]);
        }
        if (thresholds.empty()) thresholds = default_seed_thresholds();
        return seed_metrics_dict(sweep(lms, samples, thresholds));
      },
      py::arg("maps"), py::arg("dataset"), py::arg("indices"),
      py::arg("thresholds") = std::vector<double>{},
      "Dataset-level seed quality across thresholds; returns the full table "
      "and the best row.");

  m.def("default_seed_thresholds", &default_seed_thresholds);
}
