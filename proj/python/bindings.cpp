#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "kdlab/checkpoint.hpp"
#include "kdlab/cli.hpp"
#include "kdlab/data.hpp"
#include "kdlab/distill.hpp"
#include "kdlab/errors.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/models.hpp"
#include "kdlab/ops.hpp"

namespace py = pybind11;
using namespace kdlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> v(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(v));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<bool> to_flags(const std::vector<int>& v) { return {v.begin(), v.end()}; }

py::dict dataset_dict(const Dataset& ds) {
  py::dict d;
  d["images"] = ds.size() ? py::object(to_array(ds.images)) : py::object(py::none());
  d["labels"] = ds.labels;
  d["class_names"] = ds.class_names;
  return d;
}

AugmentConfig eval_config(std::size_t image_size) {
  AugmentConfig cfg;
  cfg.target_h = cfg.target_w = image_size;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

  m.def("softmax_t", [](const Array& z, double t) { return to_array(softmax_t(to_tensor(z), t)); },
        py::arg("logits"), py::arg("t"));
  m.def("kd_loss", [](const Array& t, const Array& s) { return kd_loss(to_tensor(t), to_tensor(s)).item(); },
        py::arg("teacher_probs"), py::arg("student_probs"));
  m.def("task_loss",
        [](const std::vector<std::size_t>& y, const Array& z) { return task_loss(y, to_tensor(z)).item(); },
        py::arg("labels"), py::arg("logits"));
  m.def("total_loss", py::overload_cast<double, double, double, double>(&total_loss), py::arg("l_kd"),
        py::arg("l_task"), py::arg("alpha"), py::arg("t"));
  m.def("lr_at", &lr_at, py::arg("epoch"), py::arg("base_lr"), py::arg("step"), py::arg("gamma"));

  m.def("top1_accuracy",
        [](const Array& s, const std::vector<std::size_t>& y) { return top1_accuracy({to_tensor(s), y}); },
        py::arg("scores"), py::arg("labels"));
  m.def("average_precision",
        [](const std::vector<double>& s, const std::vector<int>& pos) { return average_precision(s, to_flags(pos)); },
        py::arg("scores"), py::arg("positives"));
  m.def("mean_ap",
        [](const Array& s, const std::vector<std::size_t>& y) {
          MeanApResult r = mean_ap({to_tensor(s), y});
          return py::make_tuple(r.map, r.per_class);
        },
        py::arg("scores"), py::arg("labels"));
  m.def("cosine_similarity",
        [](const std::vector<double>& a, const std::vector<double>& b) { return cosine_similarity(a, b); },
        py::arg("a"), py::arg("b"));
  m.def("euclidean_distance",
        [](const std::vector<double>& a, const std::vector<double>& b) { return euclidean_distance(a, b); },
        py::arg("a"), py::arg("b"));
  m.def("compare_features",
        [](const Array& a, const Array& b, std::uint64_t seed) {
          SimilarityReport r = compare_features(to_tensor(a), to_tensor(b), seed);
          return py::make_tuple(r.cosine_mean, r.euclidean_mean, r.projected_dim);
        },
        py::arg("a"), py::arg("b"), py::arg("seed") = 0);

  py::class_<Model>(m, "Model")
      .def_property_readonly("preset", &Model::preset)
      .def_property_readonly("image_size", [](const Model& self) { return self.shape().image_size; })
      .def_property_readonly("num_classes", [](const Model& self) { return self.shape().num_classes; })
      .def_property_readonly("in_channels", [](const Model& self) { return self.shape().in_channels; })
      .def("count_params", &Model::count_params)
      .def("param_names",
           [](const Model& self) {
             std::vector<std::string> names;
             for (const auto& kv : self.params()) names.push_back(kv.first);
             return names;
           })
      .def("forward",
           [](Model& self, const Array& x, bool train) {
             NoGradScope ng;
             return to_array(self.forward(to_tensor(x), train ? Mode::train : Mode::eval));
           },
           py::arg("images"), py::arg("train") = false)
      .def("capture",
           [](Model& self, const Array& x, const std::string& layer) {
             return to_array(self.capture(to_tensor(x), layer));
           },
           py::arg("images"), py::arg("layer") = "features")
      .def("save", [](const Model& self, const std::filesystem::path& p) { save_checkpoint(p, self); });

  m.def("make_model",
        [](const std::string& preset, std::size_t in_channels, std::size_t image_size, std::size_t num_classes,
           std::uint64_t seed, const std::string& activation) {
          return make_model(preset, {in_channels, image_size, num_classes}, seed, parse_activation(activation));
        },
        py::arg("preset"), py::arg("in_channels") = 1, py::arg("image_size") = 32, py::arg("num_classes") = 10,
        py::arg("seed") = 0, py::arg("activation") = "gelu");
  m.def("load_model",
        [](const std::filesystem::path& p, std::optional<std::string> preset) { return load_model(p, preset); },
        py::arg("path"), py::arg("expected_preset") = py::none());
  m.def("preset_names", &preset_names);

  m.def("load_dataset",
        [](const std::filesystem::path& dir) {
          SplitDataset d = load_dataset_dir(dir);
          return py::make_tuple(dataset_dict(d.train), dataset_dict(d.test));
        },
        py::arg("dir"));
  m.def("evaluate",
        [](Model& model, const std::filesystem::path& dir, std::size_t batch_size) {
          SplitDataset d = load_dataset_dir(dir);
          Evaluation ev = evaluate(model, d.test, eval_config(model.shape().image_size), batch_size);
          py::dict out;
          out["acc"] = ev.accuracy;
          out["map"] = ev.ap.map;
          out["loss_task"] = ev.loss_task;
          out["samples"] = ev.labels.size();
          return out;
        },
        py::arg("model"), py::arg("data_dir"), py::arg("batch_size") = 64);

  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code;
          {
            py::gil_scoped_release release;
            code = run_cli(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
