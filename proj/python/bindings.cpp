// Python module: numpy-friendly wrappers over the core library. Tensors
// cross the boundary as C-contiguous float64 arrays; everything else maps
// to plain attribute structs.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <vector>

#include "protopart/data_io.hpp"
#include "protopart/errors.hpp"
#include "protopart/explain.hpp"
#include "protopart/model.hpp"
#include "protopart/projection.hpp"
#include "protopart/training.hpp"

namespace py = pybind11;
using namespace protopart;

namespace {

using DoubleArray =
    py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const DoubleArray& array) {
  std::vector<int> shape(static_cast<std::size_t>(array.ndim()));
  for (py::ssize_t i = 0; i < array.ndim(); ++i) {
    shape[static_cast<std::size_t>(i)] = static_cast<int>(array.shape(i));
  }
  Tensor t = Tensor::zeros(shape);
  std::copy(array.data(), array.data() + array.size(), t.values.begin());
  return t;
}

py::array_t<double> tensor_to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> array(shape);
  std::copy(t.values.begin(), t.values.end(), array.mutable_data());
  return array;
}

std::vector<py::array_t<double>> tensors_to_arrays(
    const std::vector<Tensor>& tensors) {
  std::vector<py::array_t<double>> out;
  out.reserve(tensors.size());
  for (const Tensor& t : tensors) out.push_back(tensor_to_array(t));
  return out;
}

}  // namespace

PYBIND11_MODULE(_protopart, m) {
  m.doc() =
      "Case-based image classifier: a conv backbone compares latent patches "
      "to learned prototypes; training, projection, explanation, pruning, "
      "ensembling, and the projection stability check.";

  py::register_exception<Error>(m, "ProtoPartError");

  py::class_<ConvBlockSpec>(m, "ConvBlockSpec")
      .def(py::init([](int channels, int kernel, int stride, int padding,
                       bool pool) {
             return ConvBlockSpec{channels, kernel, stride, padding, pool};
           }),
           py::arg("channels"), py::arg("kernel") = 3, py::arg("stride") = 1,
           py::arg("padding") = 0, py::arg("pool") = false)
      .def_readwrite("channels", &ConvBlockSpec::channels)
      .def_readwrite("kernel", &ConvBlockSpec::kernel)
      .def_readwrite("stride", &ConvBlockSpec::stride)
      .def_readwrite("padding", &ConvBlockSpec::padding)
      .def_readwrite("pool", &ConvBlockSpec::pool);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("image_h", &ModelConfig::image_h)
      .def_readwrite("image_w", &ModelConfig::image_w)
      .def_readwrite("image_c", &ModelConfig::image_c)
      .def_readwrite("blocks", &ModelConfig::blocks)
      .def_readwrite("addon_channels", &ModelConfig::addon_channels)
      .def_readwrite("proto_h", &ModelConfig::proto_h)
      .def_readwrite("proto_w", &ModelConfig::proto_w)
      .def_readwrite("class_count", &ModelConfig::class_count)
      .def_readwrite("prototypes_per_class", &ModelConfig::prototypes_per_class)
      .def_readwrite("epsilon", &ModelConfig::epsilon)
      .def("total_prototypes", &ModelConfig::total_prototypes);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lambda_cluster", &TrainConfig::lambda_cluster)
      .def_readwrite("lambda_separation", &TrainConfig::lambda_separation)
      .def_readwrite("lambda_l1", &TrainConfig::lambda_l1)
      .def_readwrite("lr_backbone", &TrainConfig::lr_backbone)
      .def_readwrite("lr_prototypes", &TrainConfig::lr_prototypes)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("stage1_epochs", &TrainConfig::stage1_epochs)
      .def_readwrite("stage3_epochs", &TrainConfig::stage3_epochs)
      .def_readwrite("cycles", &TrainConfig::cycles)
      .def_readwrite("workers", &TrainConfig::workers)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init<>())
      .def_readwrite("labels", &Dataset::labels)
      .def_readwrite("class_names", &Dataset::class_names)
      .def_readwrite("split", &Dataset::split)
      .def("add_image",
           [](Dataset& self, const DoubleArray& image, int label) {
             self.images.push_back(tensor_from_array(image));
             self.labels.push_back(label);
           },
           py::arg("image"), py::arg("label"),
           "Append one H x W x 3 image with values in [0, 1].")
      .def("image",
           [](const Dataset& self, int i) {
             if (i < 0 || i >= self.size()) {
               throw ArgumentError("image index out of range");
             }
             return tensor_to_array(self.images[static_cast<std::size_t>(i)]);
           },
           py::arg("i"))
      .def("class_count", &Dataset::class_count)
      .def("size", &Dataset::size)
      .def("__len__", &Dataset::size);

  py::class_<ProtoPNetModel>(m, "Model")
      .def_readwrite("config", &ProtoPNetModel::config)
      .def_readonly("allocation", &ProtoPNetModel::allocation)
      .def_readonly("seed", &ProtoPNetModel::seed)
      .def_property_readonly(
          "last_layer",
          [](const ProtoPNetModel& self) { return tensor_to_array(self.last_layer); })
      .def_property_readonly(
          "prototypes",
          [](const ProtoPNetModel& self) { return tensors_to_arrays(self.prototypes); })
      .def_property_readonly(
          "conv_filters",
          [](const ProtoPNetModel& self) { return tensors_to_arrays(self.conv_filters); });

  py::class_<ModelOutput>(m, "ModelOutput")
      .def_property_readonly(
          "logits", [](const ModelOutput& self) { return tensor_to_array(self.logits); })
      .def_property_readonly(
          "scores", [](const ModelOutput& self) { return tensor_to_array(self.scores); })
      .def_property_readonly(
          "min_distances",
          [](const ModelOutput& self) { return tensor_to_array(self.min_distances); })
      .def_property_readonly(
          "distance_maps",
          [](const ModelOutput& self) { return tensors_to_arrays(self.distance_maps); })
      .def_property_readonly(
          "latent", [](const ModelOutput& self) { return tensor_to_array(self.latent); });

  py::class_<StageReport>(m, "StageReport")
      .def_readonly("crsent", &StageReport::crsent)
      .def_readonly("clst", &StageReport::clst)
      .def_readonly("sep", &StageReport::sep)
      .def_readonly("total", &StageReport::total)
      .def_readonly("accuracy", &StageReport::accuracy)
      .def_readonly("seconds", &StageReport::seconds);

  py::class_<ProjectionRecord>(m, "ProjectionRecord")
      .def_readonly("prototype", &ProjectionRecord::prototype)
      .def_readonly("class_id", &ProjectionRecord::class_id)
      .def_readonly("image", &ProjectionRecord::image)
      .def_readonly("row", &ProjectionRecord::row)
      .def_readonly("col", &ProjectionRecord::col)
      .def_readonly("move_distance", &ProjectionRecord::move_distance);

  py::class_<TheoremReport>(m, "TheoremReport")
      .def_readonly("image_id", &TheoremReport::image_id)
      .def_readonly("correct_class", &TheoremReport::correct_class)
      .def_readonly("delta", &TheoremReport::delta)
      .def_readonly("theta", &TheoremReport::theta)
      .def_readonly("m_prime", &TheoremReport::m_prime)
      .def_readonly("delta_max", &TheoremReport::delta_max)
      .def_readonly("a1", &TheoremReport::a1)
      .def_readonly("a2a", &TheoremReport::a2a)
      .def_readonly("a2b", &TheoremReport::a2b)
      .def_readonly("a3", &TheoremReport::a3)
      .def_readonly("a4", &TheoremReport::a4)
      .def_readonly("logits_before", &TheoremReport::logits_before)
      .def_readonly("logits_after", &TheoremReport::logits_after)
      .def_readonly("logit_change", &TheoremReport::logit_change)
      .def_readonly("margin_ok", &TheoremReport::margin_ok)
      .def_readonly("prediction_unchanged", &TheoremReport::prediction_unchanged)
      .def_readonly("verdict", &TheoremReport::verdict)
      .def("assumptions_hold", &TheoremReport::assumptions_hold);

  py::class_<PatchBox>(m, "PatchBox")
      .def_readonly("top", &PatchBox::top)
      .def_readonly("left", &PatchBox::left)
      .def_readonly("bottom", &PatchBox::bottom)
      .def_readonly("right", &PatchBox::right)
      .def_readonly("image_id", &PatchBox::image_id)
      .def_readonly("percentile", &PatchBox::percentile);

  py::class_<PrototypeEntry>(m, "PrototypeEntry")
      .def_readonly("prototype", &PrototypeEntry::prototype)
      .def_readonly("class_id", &PrototypeEntry::class_id)
      .def_readonly("score", &PrototypeEntry::score)
      .def_readonly("weight", &PrototypeEntry::weight)
      .def_readonly("points", &PrototypeEntry::points)
      .def_readonly("box", &PrototypeEntry::box)
      .def_property_readonly(
          "activation_map",
          [](const PrototypeEntry& self) { return tensor_to_array(self.activation_map); });

  py::class_<Explanation>(m, "Explanation")
      .def_readonly("image_id", &Explanation::image_id)
      .def_readonly("predicted", &Explanation::predicted)
      .def_readonly("logits", &Explanation::logits)
      .def_readonly("points", &Explanation::points)
      .def_readonly("class_points", &Explanation::class_points)
      .def_readonly("entries", &Explanation::entries);

  py::class_<NearestPrototype>(m, "NearestPrototype")
      .def_readonly("prototype", &NearestPrototype::prototype)
      .def_readonly("class_id", &NearestPrototype::class_id)
      .def_readonly("score", &NearestPrototype::score)
      .def_readonly("box", &NearestPrototype::box);

  py::class_<NearestPatch>(m, "NearestPatch")
      .def_readonly("image", &NearestPatch::image)
      .def_readonly("row", &NearestPatch::row)
      .def_readonly("col", &NearestPatch::col)
      .def_readonly("class_id", &NearestPatch::class_id)
      .def_readonly("distance", &NearestPatch::distance);

  py::class_<PruneEntry>(m, "PruneEntry")
      .def_readonly("prototype", &PruneEntry::prototype)
      .def_readonly("class_id", &PruneEntry::class_id)
      .def_readonly("nearest", &PruneEntry::nearest)
      .def_readonly("own_count", &PruneEntry::own_count)
      .def_readonly("pruned", &PruneEntry::pruned);

  py::class_<PruneReport>(m, "PruneReport")
      .def_readonly("entries", &PruneReport::entries)
      .def_readonly("before", &PruneReport::before)
      .def_readonly("after", &PruneReport::after)
      .def_readonly("protected_classes", &PruneReport::protected_classes);

  // Model construction and inference -------------------------------------
  m.def("with_uniform_prototypes", &with_uniform_prototypes,
        py::arg("config"), py::arg("per_class"));
  m.def("validate_config", &validate_config, py::arg("config"));
  m.def("latent_extent", &latent_extent, py::arg("config"),
        "Spatial (H, W) of the backbone output.");
  m.def("build_model", &build_model, py::arg("config"), py::arg("seed"),
        "Deterministic parameter initialization from a seed.");
  m.def("model_forward",
        [](const ProtoPNetModel& model, const DoubleArray& image) {
          return model_forward(tensor_from_array(image), model);
        },
        py::arg("model"), py::arg("image"));
  m.def("predicted_class",
        [](const std::vector<double>& logits) {
          return predicted_class(Tensor({static_cast<int>(logits.size())},
                                        logits));
        },
        py::arg("logits"));
  m.def("prototype_activation", &prototype_activation, py::arg("d2"),
        py::arg("eps"), "log((d2 + 1) / (d2 + eps))");

  // Training ---------------------------------------------------------------
  m.def("validate_train_config", &validate_train_config, py::arg("config"));
  m.def("stage1_sgd", &stage1_sgd, py::arg("model"), py::arg("dataset"),
        py::arg("config"), py::call_guard<py::gil_scoped_release>(),
        "Minibatch SGD on backbone and prototypes; last layer frozen.");
  m.def("project_prototypes",
        [](ProtoPNetModel& model, const Dataset& dataset) {
          py::gil_scoped_release release;
          return project_prototypes(model, dataset);
        },
        py::arg("model"), py::arg("dataset"),
        "Snap each prototype to its nearest same-class latent patch.");
  m.def("stage3_convex_last_layer", &stage3_convex_last_layer,
        py::arg("model"), py::arg("dataset"), py::arg("config"),
        py::call_guard<py::gil_scoped_release>(),
        "Full-batch proximal gradient descent on the last layer only.");
  m.def("train_full", &train_full, py::arg("model"), py::arg("dataset"),
        py::arg("config"), py::call_guard<py::gil_scoped_release>(),
        "config.cycles repetitions of stage 1, projection, stage 3.");
  m.def("accuracy", &accuracy, py::arg("model"), py::arg("dataset"),
        py::call_guard<py::gil_scoped_release>());

  // Explanation, pruning, ensembles ---------------------------------------
  m.def("explain_image",
        [](const ProtoPNetModel& model, const DoubleArray& image,
           double percentile) {
          return explain_image(model, tensor_from_array(image), percentile);
        },
        py::arg("model"), py::arg("image"), py::arg("percentile") = 95.0);
  m.def("serialize_explanation", &serialize_explanation,
        py::arg("explanation"));
  m.def("nearest_prototypes_to_image",
        [](const ProtoPNetModel& model, const DoubleArray& image, int top_n) {
          return nearest_prototypes_to_image(model, tensor_from_array(image),
                                             top_n);
        },
        py::arg("model"), py::arg("image"), py::arg("top_n"));
  m.def("nearest_patches_to_prototype", &nearest_patches_to_prototype,
        py::arg("model"), py::arg("dataset"), py::arg("prototype"),
        py::arg("top_n"));
  m.def("prune_prototypes", &prune_prototypes, py::arg("model"),
        py::arg("dataset"), py::arg("z"), py::arg("tau"),
        py::call_guard<py::gil_scoped_release>(),
        "Returns (reduced model, prune report).");
  m.def("ensemble_logits",
        [](const std::vector<ProtoPNetModel>& models, const DoubleArray& image) {
          return ensemble_logits(models, tensor_from_array(image));
        },
        py::arg("models"), py::arg("image"),
        "Elementwise sum of every member's logits.");
  m.def("upsample_map",
        [](const DoubleArray& map, int target_h, int target_w) {
          return tensor_to_array(
              upsample_map(tensor_from_array(map), target_h, target_w));
        },
        py::arg("map"), py::arg("target_h"), py::arg("target_w"));
  m.def("extract_patch_box",
        [](const DoubleArray& map, double percentile) {
          return extract_patch_box(tensor_from_array(map), percentile);
        },
        py::arg("map"), py::arg("percentile") = 95.0);
  m.def("render_heatmap",
        [](const DoubleArray& image, const DoubleArray& map) {
          return tensor_to_array(
              render_heatmap(tensor_from_array(image), tensor_from_array(map)));
        },
        py::arg("image"), py::arg("map"));

  // Projection stability check ---------------------------------------------
  m.def("verify_projection_theorem",
        [](const ProtoPNetModel& before, const ProtoPNetModel& after,
           const DoubleArray& image, double delta) {
          return verify_projection_theorem(before, after,
                                           tensor_from_array(image), delta);
        },
        py::arg("before"), py::arg("after"), py::arg("image"),
        py::arg("delta"));
  m.def("serialize_report", &serialize_report, py::arg("report"));

  // Persistence --------------------------------------------------------------
  m.def("save_checkpoint", &save_checkpoint, py::arg("model"), py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def("load_ppds", &load_ppds, py::arg("path"));
  m.def("save_ppds", &save_ppds, py::arg("dataset"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"), py::arg("format"),
        "format: 'ppds' or 'ppm-tree'");
  m.def("write_ppm",
        [](const DoubleArray& image, const std::string& path) {
          write_ppm(tensor_from_array(image), path);
        },
        py::arg("image"), py::arg("path"));
}
