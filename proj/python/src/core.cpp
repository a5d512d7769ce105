#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cwd/continuous.hpp"
#include "cwd/harness.hpp"
#include "cwd/lyapunov.hpp"
#include "cwd/objectives.hpp"
#include "cwd/optimizers.hpp"

namespace py = pybind11;
using namespace cwd;

namespace {

using Vec = std::vector<double>;

ParamVector pv(const Vec& v) { return ParamVector(v); }
const Vec& vec(const ParamVector& p) { return p.data(); }

// nlohmann::json has no caster; route through the json module.
py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict row_dict(const TrajectoryRow& r) {
  py::dict d;
  d["step"] = r.step;
  d["time"] = r.time;
  d["x"] = vec(r.x);
  d["m"] = vec(r.m);
  d["loss"] = r.loss;
  d["grad_norm"] = r.grad_norm;
  d["H"] = r.H;
  d["mask_ratio"] = r.mask_ratio;
  return d;
}

py::dict run_dict(const RunResult& r) {
  py::list rows;
  for (const auto& row : r.rows) rows.append(row_dict(row));
  py::dict d;
  d["summary"] = to_py(summary_json(r.summary));
  d["rows"] = rows;
  d["ratio_per_step"] = r.ratio_per_step;
  return d;
}

ExperimentConfig with_overrides(ExperimentConfig cfg, std::optional<std::uint64_t> seed,
                                std::optional<std::filesystem::path> out, bool emit_lyapunov) {
  ConfigOverrides o;
  o.seed = seed;
  o.out = std::move(out);
  o.emit_lyapunov = emit_lyapunov;
  o.apply(cfg);
  return cfg;
}

py::dict execute(const ExperimentConfig& cfg) {
  const RunResult r = run(cfg);
  if (!cfg.out.empty()) write_run(r, cfg.out);
  return run_dict(r);
}

// Optimizer spec plus its state, stepped from Python.
class PyOptimizer {
 public:
  PyOptimizer(const std::map<std::string, std::string>& kv, std::size_t dim, std::uint64_t seed)
      : spec_(spec_from_key_values(kv)), state_(dim, seed) {}

  Vec step(const Vec& x, const Vec& g) { return vec(cwd::step(spec_, state_, pv(x), pv(g))); }

  const OptimizerSpec& spec() const { return spec_; }
  const OptState& state() const { return state_; }

 private:
  OptimizerSpec spec_;
  OptState state_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cautious weight decay optimizers, flows and experiment harness";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

  py::class_<Objective>(m, "Objective")
      .def_property_readonly("name", &Objective::name)
      .def_property_readonly("dim", &Objective::dim)
      .def_property_readonly("infimum", &Objective::infimum)
      .def("value", [](const Objective& f, const Vec& x) { return f.value(pv(x)); }, py::arg("x"))
      .def("gradient", [](const Objective& f, const Vec& x) { return vec(f.gradient(pv(x))); }, py::arg("x"))
      .def(
          "hessian",
          [](const Objective& f, const Vec& x) {
            const DenseMatrix h = f.hessian(pv(x));
            std::vector<Vec> out(h.rows(), Vec(h.cols()));
            for (std::size_t i = 0; i < h.rows(); ++i)
              for (std::size_t j = 0; j < h.cols(); ++j) out[i][j] = h(i, j);
            return out;
          },
          py::arg("x"))
      .def("__repr__", [](const Objective& f) { return "<Objective " + f.name() + " dim=" + std::to_string(f.dim()) + ">"; });

  m.def("objective", &objective_by_name, py::arg("name"),
        "toy_hyperbola, toy_parabola or quadratic:<csv path>");
  m.def(
      "quadratic",
      [](const std::vector<Vec>& a, const Vec& b) {
        const std::size_t n = a.size();
        Vec flat;
        for (const Vec& row : a) {
          if (row.size() != n) throw DimensionError("quadratic: A must be square");
          flat.insert(flat.end(), row.begin(), row.end());
        }
        return quadratic_manifold(DenseMatrix(n, n, flat), pv(b));
      },
      py::arg("A"), py::arg("b"));
  m.def(
      "finite_diff_grad", [](const Objective& f, const Vec& x, double h) { return vec(finite_diff_grad(f, pv(x), h)); },
      py::arg("objective"), py::arg("x"), py::arg("h") = 1e-6);

  m.def(
      "cwd_mask", [](const Vec& u, const Vec& x) { return vec(cwd_mask(pv(u), pv(x))); }, py::arg("u"), py::arg("x"));
  m.def(
      "newton_schulz",
      [](const Vec& mat, std::size_t rows, std::size_t cols) {
        return vec(newton_schulz_sign(pv(mat), MatrixShape{rows, cols}));
      },
      py::arg("m"), py::arg("rows"), py::arg("cols"), "Row-major orthogonalization of an m x n matrix");

  py::class_<PyOptimizer>(m, "_Optimizer")
      .def(py::init<const std::map<std::string, std::string>&, std::size_t, std::uint64_t>(), py::arg("kv"),
           py::arg("dim"), py::arg("seed") = 0)
      .def("step", &PyOptimizer::step, py::arg("x"), py::arg("g"))
      .def_property_readonly("spec", [](const PyOptimizer& o) { return to_key_values(o.spec()); })
      .def_property_readonly("t", [](const PyOptimizer& o) { return o.state().t; })
      .def_property_readonly("m", [](const PyOptimizer& o) { return vec(o.state().m); })
      .def_property_readonly("v", [](const PyOptimizer& o) { return vec(o.state().v); })
      .def_property_readonly("last_mask", [](const PyOptimizer& o) { return vec(o.state().last_mask); })
      .def_property_readonly("last_update", [](const PyOptimizer& o) { return vec(o.state().last_update); });

  m.def(
      "run_file",
      [](const std::filesystem::path& path, std::optional<std::uint64_t> seed, std::optional<std::filesystem::path> out,
         bool emit_lyapunov) { return execute(with_overrides(load_config(path), seed, std::move(out), emit_lyapunov)); },
      py::arg("path"), py::arg("seed") = py::none(), py::arg("out") = py::none(), py::arg("emit_lyapunov") = false);
  m.def(
      "run_text",
      [](const std::string& text, std::optional<std::uint64_t> seed, std::optional<std::filesystem::path> out,
         bool emit_lyapunov) {
        std::istringstream in(text);
        return execute(with_overrides(parse_config(in), seed, std::move(out), emit_lyapunov));
      },
      py::arg("text"), py::arg("seed") = py::none(), py::arg("out") = py::none(), py::arg("emit_lyapunov") = false);

  m.def(
      "integrate",
      [](const std::string& family, const Objective& f, const Vec& x0, double lambda, double alpha, double beta,
         double gamma, double epsilon, const std::string& decay, double h, double horizon, double t0,
         std::size_t stride, const Vec& m0, std::optional<Vec> v0) {
        FlowSpec flow;
        flow.params.family = parse_flow_family(family);
        flow.params.lambda = lambda;
        flow.params.alpha = alpha;
        flow.params.beta = beta;
        flow.params.gamma = gamma;
        flow.params.epsilon = epsilon;
        flow.decay = parse_decay(decay);
        flow.h = h;
        flow.horizon = horizon;
        flow.t0 = t0;
        flow.stride = stride;
        ParamVector v;
        if (v0) {
          v = pv(*v0);
        } else if (flow.params.family == FlowFamily::Adam) {
          const ParamVector g = f.gradient(pv(x0));
          v = elementwise(ElementOp::mul, g, g);
        }
        const Trajectory traj = integrate(flow, f, pv(x0), pv(m0), v);
        const bool with_h = flow.decay == DecayKind::Cautious;
        py::list rows;
        for (const auto& r : flow_rows(traj, f, flow, with_h)) rows.append(row_dict(r));
        py::dict d;
        d["rows"] = rows;
        d["diverged"] = traj.diverged;
        if (with_h && !traj.diverged) {
          const MonitorReport rep = monitor(traj, f, flow.params);
          d["monotone"] = rep.monotone;
          d["max_increment"] = rep.max_increment;
          d["tolerance"] = rep.tolerance;
          d["violations"] = rep.violations;
        }
        return d;
      },
      py::arg("family"), py::arg("objective"), py::arg("x0"), py::kw_only(), py::arg("weight_decay") = 0.0,
      py::arg("alpha") = 1.0, py::arg("beta") = 1.0, py::arg("gamma") = 1.0, py::arg("epsilon") = 1e-8,
      py::arg("decay") = "cautious", py::arg("h") = 1e-3, py::arg("horizon") = 10.0, py::arg("t0") = 0.0,
      py::arg("stride") = 1, py::arg("m0") = Vec{}, py::arg("v0") = py::none(),
      "Integrates a continuous-time flow; Adam defaults v0 to the squared initial gradient");

  m.def(
      "pareto_check", [](const Objective& f, const Vec& x) { return to_py(pareto_json(pareto_check(pv(x), f))); },
      py::arg("objective"), py::arg("x"));

  m.def(
      "figure3",
      [](double lambda, int inits, std::int64_t steps, std::uint64_t seed) {
        Fig3Options o;
        o.lambda = lambda;
        o.inits = inits;
        o.steps = steps;
        o.seed = seed;
        return to_py(fig3_json(figure3_repro(o)));
      },
      py::arg("weight_decay"), py::arg("inits") = 5, py::arg("steps") = 50000, py::arg("seed") = 0);
}
