#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "lab/analysis.hpp"
#include "lab/checkpoint.hpp"
#include "lab/cli.hpp"
#include "lab/data.hpp"
#include "lab/errors.hpp"
#include "lab/evaluation.hpp"
#include "lab/model.hpp"
#include "lab/objectives.hpp"

namespace py = pybind11;
using namespace lab;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() < 1 || a.ndim() > 2) {
        throw DimensionError("arrays entering the lab must have rank 1 or 2");
    }
    std::vector<int> shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) {
        shape.push_back(static_cast<int>(a.shape(i)));
    }
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "contrastive representation transfer lab";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<LoadError>(m, "LoadError", PyExc_IOError);
    py::register_exception<IoError>(m, "IoError", PyExc_IOError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    py::class_<Tensor>(m, "Tensor", py::buffer_protocol())
        .def(py::init(&tensor_from_array), py::arg("array"))
        .def_property_readonly("shape",
                               [](const Tensor& t) {
                                   py::tuple out(t.rank());
                                   for (int i = 0; i < t.rank(); ++i) out[i] = t.dim(i);
                                   return out;
                               })
        .def_property_readonly("rows", &Tensor::rows)
        .def_property_readonly("cols", &Tensor::cols)
        .def_buffer([](Tensor& t) {
            std::vector<py::ssize_t> shape, strides;
            for (int i = 0; i < t.rank(); ++i) shape.push_back(t.dim(i));
            if (t.rank() == 2) {
                strides = {static_cast<py::ssize_t>(sizeof(double)) * t.cols(),
                           static_cast<py::ssize_t>(sizeof(double))};
            } else {
                strides = {static_cast<py::ssize_t>(sizeof(double))};
            }
            return py::buffer_info(t.data(), sizeof(double),
                                   py::format_descriptor<double>::format(), t.rank(), shape,
                                   strides);
        })
        .def("__repr__",
             [](const Tensor& t) { return "Tensor(shape=" + t.shape_str() + ")"; });
    py::implicitly_convertible<py::array, Tensor>();

    py::class_<Rng>(m, "Rng")
        .def(py::init<std::uint64_t>(), py::arg("seed"))
        .def("fork", &Rng::fork, py::arg("salt"))
        .def("uniform", [](Rng& r) { return r.uniform(); })
        .def("uniform_int", [](Rng& r, int n) { return r.uniform_int(n); }, py::arg("n"))
        .def("state", &Rng::state);

    py::enum_<Split>(m, "Split")
        .value("Train", Split::Train)
        .value("Val", Split::Val)
        .value("Test", Split::Test);

    py::enum_<Objective>(m, "Objective")
        .value("CE", Objective::CE)
        .value("SelfSupCon", Objective::SelfSupCon)
        .value("SupCon", Objective::SupCon)
        .value("CESelfSupCon", Objective::CESelfSupCon)
        .value("SupConSelfSupCon", Objective::SupConSelfSupCon);
    m.def("parse_objective", &parse_objective, py::arg("name"));
    m.def("objective_name", &objective_name, py::arg("objective"));

    py::class_<EncoderConfig>(m, "EncoderConfig")
        .def(py::init<>())
        .def_readwrite("input_dim", &EncoderConfig::input_dim)
        .def_readwrite("stage_widths", &EncoderConfig::stage_widths);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("encoder", &ModelConfig::encoder)
        .def_readwrite("num_classes", &ModelConfig::num_classes)
        .def_readwrite("proj_hidden", &ModelConfig::proj_hidden)
        .def_readwrite("embed_dim", &ModelConfig::embed_dim)
        .def_readwrite("tau", &ModelConfig::tau)
        .def_readwrite("momentum", &ModelConfig::momentum)
        .def_readwrite("alpha", &ModelConfig::alpha)
        .def_readwrite("queue_capacity", &ModelConfig::queue_capacity)
        .def_readwrite("objective", &ModelConfig::objective)
        .def("validate", &ModelConfig::validate);

    py::class_<DomainSpec>(m, "DomainSpec")
        .def_readwrite("id", &DomainSpec::id)
        .def_readwrite("num_classes", &DomainSpec::num_classes)
        .def_readwrite("image_size", &DomainSpec::image_size)
        .def_readwrite("train_count", &DomainSpec::train_count)
        .def_readwrite("val_count", &DomainSpec::val_count)
        .def_readwrite("test_count", &DomainSpec::test_count)
        .def_readwrite("seed", &DomainSpec::seed)
        .def("validate", &DomainSpec::validate);
    m.def("domain_preset", &domain_preset, py::arg("name"));

    py::class_<Dataset>(m, "Dataset")
        .def_readonly("domain_id", &Dataset::domain_id)
        .def_readonly("image_size", &Dataset::image_size)
        .def_readonly("num_classes", &Dataset::num_classes)
        .def_readonly("images", &Dataset::images)
        .def_readonly("labels", &Dataset::labels)
        .def_readonly("splits", &Dataset::splits)
        .def_property_readonly("count", &Dataset::count)
        .def("subset", &Dataset::subset, py::arg("split"));
    m.def("generate_domain", &generate_domain, py::arg("spec"),
          py::call_guard<py::gil_scoped_release>());

    py::class_<ModelState>(m, "ModelState")
        .def(py::init([](const ModelConfig& cfg, Rng& rng) { return ModelState(cfg, rng); }),
             py::arg("config"), py::arg("rng"))
        .def_property_readonly("config", &ModelState::config)
        .def("features",
             [](const ModelState& s, const Tensor& x) { return *s.features(nullptr, constant(x)); },
             py::arg("images"))
        .def("logits",
             [](const ModelState& s, const Tensor& x) {
                 return *s.classifier_logits(nullptr, s.features(nullptr, constant(x)));
             },
             py::arg("images"))
        .def("key_embed", &ModelState::key_embed, py::arg("images"));

    py::class_<CheckpointMeta>(m, "CheckpointMeta").def_readonly("epoch", &CheckpointMeta::epoch);
    py::class_<LoadedCheckpoint>(m, "LoadedCheckpoint")
        .def_readonly("state", &LoadedCheckpoint::state)
        .def_readonly("meta", &LoadedCheckpoint::meta);
    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

    py::class_<FeatureSet>(m, "FeatureSet")
        .def_readonly("x", &FeatureSet::x)
        .def_readonly("y", &FeatureSet::y)
        .def_readonly("num_classes", &FeatureSet::num_classes);
    m.def("extract_features",
          py::overload_cast<const ModelState&, const Dataset&, Split>(&extract_features),
          py::arg("model"), py::arg("data"), py::arg("split"),
          py::call_guard<py::gil_scoped_release>());

    py::class_<ProbeConfig>(m, "ProbeConfig")
        .def(py::init<>())
        .def_readwrite("epochs", &ProbeConfig::epochs)
        .def_readwrite("milestones", &ProbeConfig::milestones)
        .def_readwrite("lr_grid", &ProbeConfig::lr_grid)
        .def_readwrite("batch_grid", &ProbeConfig::batch_grid)
        .def_readwrite("wd_grid", &ProbeConfig::wd_grid);
    py::class_<ProbeResult>(m, "ProbeResult")
        .def_readonly("test_accuracy", &ProbeResult::test_accuracy)
        .def_readonly("best_val_accuracy", &ProbeResult::best_val_accuracy);
    m.def("linear_probe", &linear_probe, py::arg("train"), py::arg("test"), py::arg("config"),
          py::arg("rng"), py::call_guard<py::gil_scoped_release>());

    py::class_<EpisodeSpec>(m, "EpisodeSpec")
        .def(py::init<>())
        .def_readwrite("ways", &EpisodeSpec::ways)
        .def_readwrite("shots", &EpisodeSpec::shots)
        .def_readwrite("queries", &EpisodeSpec::queries)
        .def_readwrite("episodes", &EpisodeSpec::episodes);
    py::class_<FewShotResult>(m, "FewShotResult")
        .def_readonly("mean_accuracy", &FewShotResult::mean_accuracy)
        .def_readonly("ci95", &FewShotResult::ci95)
        .def_readonly("episodes_excluded", &FewShotResult::episodes_excluded);
    m.def("fewshot_eval", &fewshot_eval, py::arg("model"), py::arg("data"), py::arg("spec"),
          py::arg("rng"), py::call_guard<py::gil_scoped_release>());

    m.def("linear_cka",
          py::overload_cast<const Tensor&, const Tensor&>(&linear_cka), py::arg("x"),
          py::arg("y"));
    m.def("calibration",
          [](const Tensor& logits, const std::vector<int>& labels) {
              const CalibrationResult r = calibration(logits, labels);
              return py::make_tuple(r.ece, r.nll);
          },
          py::arg("logits"), py::arg("labels"));
    m.def("class_separation",
          [](const Tensor& features, const std::vector<int>& labels) {
              const SeparationResult r = class_separation(features, labels);
              return py::make_tuple(r.r_intra, r.r_inter);
          },
          py::arg("features"), py::arg("labels"));

    m.def("run",
          [](const std::vector<std::string>& args) {
              std::vector<const char*> argv;
              argv.push_back("lab");
              for (const std::string& a : args) argv.push_back(a.c_str());
              return cli::run(static_cast<int>(argv.size()), argv.data());
          },
          py::arg("args"), py::call_guard<py::gil_scoped_release>(),
          "Run a CLI subcommand, e.g. run(['pretrain', '--config', 'cfg.json']).");
}
