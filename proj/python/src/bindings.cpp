// Python bindings.  Arrays cross the boundary row-major as (n, dim); the library is column-major.

#include "equiflow/cli.hpp"
#include "equiflow/config.hpp"
#include "equiflow/model.hpp"
#include "equiflow/training.hpp"
#include "equiflow/transport.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace equiflow;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PyModel {
    ModelSpec spec;
    FlowComposition flow;

    Eigen::VectorXd log_prob(const RowMatrix& x) const {
        if (x.cols() != flow.dim()) throw py::value_error("expected shape (n, " + std::to_string(flow.dim()) + ")");
        return flow.log_prob(x.transpose()).row(0).transpose();
    }
    RowMatrix sample(int n, std::uint64_t seed) const {
        if (n < 0) throw py::value_error("n must be non-negative");
        Rng rng(seed);
        return flow.sample(n, rng).transpose();
    }
};

py::dict metrics_dict(const Metrics& m) {
    py::dict d;
    d["step"] = m.step;
    d["nll"] = m.nll;
    d["group_nll"] = m.group_nll;
    d["equivariance_gap"] = m.equivariance_gap;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Equivariant normalizing flows";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ModelError>(m, "ModelError", PyExc_ValueError);

    py::class_<PyModel>(m, "Model")
        .def_property_readonly("dim", [](const PyModel& p) { return p.flow.dim(); })
        .def_property_readonly("group", [](const PyModel& p) { return p.spec.group; })
        .def_property_readonly("num_params", [](const PyModel& p) { return p.flow.params().total_count(); })
        .def("log_prob", &PyModel::log_prob, py::arg("x"))
        .def("sample", &PyModel::sample, py::arg("n"), py::arg("seed") = 0)
        .def("save", [](const PyModel& p, const std::filesystem::path& path) { save_model(path, p.spec, p.flow); });

    m.def(
        "load_model",
        [](const std::filesystem::path& path) {
            LoadedModel l = load_model(path);
            return PyModel{std::move(l.spec), std::move(l.flow)};
        },
        py::arg("path"));

    m.def(
        "build_model",
        [](const std::string& config_json) {
            const RunConfig c = run_config_from_json(nlohmann::json::parse(config_json));
            ModelSpec spec = model_spec(c);
            FlowComposition flow = build_flow(spec);
            return PyModel{std::move(spec), std::move(flow)};
        },
        py::arg("config_json"), "Untrained model for a run config given as JSON text.");

    m.def(
        "train",
        [](const std::string& config_json) {
            const RunConfig c = run_config_from_json(nlohmann::json::parse(config_json));
            ModelSpec spec = model_spec(c);
            FlowComposition flow = build_flow(spec);
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train(flow, toy_dataset(c), data_representation(c), train_config(c));
            }
            py::list history;
            for (const Metrics& x : r.history) history.append(metrics_dict(x));
            return py::make_tuple(PyModel{std::move(spec), std::move(flow)}, history, r.train_loss);
        },
        py::arg("config_json"), "Returns (model, metrics history, per-step training loss).");

    m.def(
        "moser_transport",
        [](int n, int k, double amplitude, int rk4_steps) {
            const MoserSolution s = moser_transport(cosine_moser_problem(n, k, amplitude, rk4_steps));
            py::dict d;
            d["grid"] = s.grid;
            d["eta"] = s.eta;
            d["phi"] = s.phi;
            d["pushforward_l1"] = s.diagnostics.pushforward_l1;
            d["equivariance_error"] = s.diagnostics.equivariance_error;
            return d;
        },
        py::arg("n"), py::arg("k"), py::arg("amplitude"), py::arg("rk4_steps") = 200);

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            const int code = run_cli(args, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs the command-line tool in process; returns (exit code, stdout, stderr).");
}
