#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "divergent/campaign_io.hpp"
#include "divergent/hull.hpp"
#include "divergent/stats.hpp"
#include "divergent/surrogate.hpp"

namespace py = pybind11;
using namespace divergent;

namespace {

std::vector<PhaseEntry> to_phases(const std::vector<std::tuple<std::string, std::string, double>>& rows) {
  std::vector<PhaseEntry> out;
  for (const auto& [id, formula, e] : rows) out.push_back(make_phase(id, Composition::parse_formula(formula), e));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Divergence-driven materials discovery core";

  py::register_exception<Error>(m, "DivergentError");

  m.def("reduced_formula", [](const std::string& f) { return reduce_composition(Composition::parse_formula(f)).formula(); });
  m.def("classify_stability", [](double e_hull) { return std::string(to_string(classify_stability(e_hull))); },
        py::arg("e_hull"));
  m.def(
      "energy_above_hull",
      [](const std::string& formula, double energy, const std::vector<std::tuple<std::string, std::string, double>>& phases) {
        const auto x = make_phase("query", Composition::parse_formula(formula), energy);
        const auto r = energy_above_hull(x, to_phases(phases));
        return r.e_hull;
      },
      py::arg("formula"), py::arg("formation_energy"), py::arg("phases"),
      "Energy above the hull of (id, formula, formation energy) phases, eV/atom.");

  m.def(
      "aggregate_ensemble",
      [](const std::vector<double>& e, const std::vector<double>& s) {
        const auto a = aggregate_ensemble(e, s);
        return py::make_tuple(a.mean, a.sigma);
      },
      py::arg("energies"), py::arg("sigmas"));
  m.def(
      "divergence",
      [](double e_pbe, double e_mf, double sigma, const std::string& kind) {
        return divergence_metric(e_pbe, e_mf, sigma, divergence_kind_from_string(kind));
      },
      py::arg("e_pbe"), py::arg("e_mf"), py::arg("sigma_mf") = 0.0, py::arg("kind") = "abs");

  m.def(
      "welch_p",
      [](const std::vector<double>& a, const std::vector<double>& b, bool one_tailed) {
        return stats::welch_t_test(a, b, one_tailed ? stats::Tail::One : stats::Tail::Two).p;
      },
      py::arg("a"), py::arg("b"), py::arg("one_tailed") = false);
  m.def(
      "benjamini_hochberg",
      [](const std::vector<double>& p) { return stats::adjust_pvalues(p, stats::Adjustment::BenjaminiHochberg); },
      py::arg("p"));
  m.def("power_sample_size", &stats::power_sample_size, py::arg("sigma"), py::arg("delta"), py::arg("alpha") = 0.05,
        py::arg("power") = 0.9);
  m.def("efficiency_score", py::overload_cast<std::size_t, std::size_t>(&efficiency_score), py::arg("discoveries"),
        py::arg("ccsdt_calls"));

  m.def("format_config", [](const std::string& ini) { return format_run_config(parse_run_config(ini)); },
        py::arg("ini_text"), "Canonical form of an INI configuration; raises on invalid fields.");
  m.def(
      "run_campaign",
      [](const std::string& ini, std::uint64_t seed) {
        const auto cfg = parse_run_config(ini);
        auto cc = apply_variant(cfg.campaign, cfg.variants.front());
        cc.seed = seed;
        CampaignState state;
        {
          py::gil_scoped_release release;
          const auto world = build_reference_world(cfg.world);
          state = start_campaign(cc, world);
          run_campaign(state, cc, world);
        }
        py::dict out;
        out["cycles"] = state.cycle;
        out["stop_reason"] = std::string(to_string(state.stop));
        out["discoveries"] = state.discoveries();
        out["ccsdt_calls"] = state.budget.calls(Fidelity::CCSDT);
        out["budget_spent"] = state.budget.spent();
        out["state_hash"] = hex64(state.state_hash());
        out["history"] = history_table(state);
        return out;
      },
      py::arg("ini_text"), py::arg("seed") = 1);
}
