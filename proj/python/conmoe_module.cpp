// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "conmoe/analysis.hpp"
#include "conmoe/baselines.hpp"
#include "conmoe/calibration.hpp"
#include "conmoe/consolidation.hpp"
#include "conmoe/error.hpp"
#include "conmoe/geometry.hpp"
#include "conmoe/moe_model.hpp"
#include "conmoe/tensor_store.hpp"

namespace py = pybind11;
using namespace conmoe;

namespace {

Matrix to_matrix(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) {
        throw ValidationError("expected a 2-D array");
    }
    Matrix m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.values.begin());
    return m;
}

py::array_t<float> to_array(const Matrix& m) {
    py::array_t<float> out({m.rows, m.cols});
    std::copy(m.values.begin(), m.values.end(), out.mutable_data());
    return out;
}

py::dict report_dict(const FidelityReport& r) {
    py::dict d;
    d["layer_errors"] = r.layer_errors;
    d["end_to_end_error"] = r.end_to_end_error;
    d["token_count"] = r.token_count;
    d["achieved_ratio"] = r.achieved_ratio;
    d["metadata"] = r.metadata;
    return d;
}

}  // namespace

PYBIND11_MODULE(_conmoe, m) {
    m.doc() = "Train-free MoE expert-pool consolidation: prototype selection, remapping and fidelity checks";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);

    py::class_<ExpertRef>(m, "ExpertRef")
        .def(py::init<int, int>(), py::arg("layer"), py::arg("index"))
        .def_readwrite("layer", &ExpertRef::layer)
        .def_readwrite("index", &ExpertRef::index)
        .def(py::self == py::self)
        .def("__repr__", [](ExpertRef r) { return "ExpertRef(" + to_string(r) + ")"; });

    py::class_<ModelSpec>(m, "ModelSpec")
        .def(py::init([](int layers, int experts, int hidden, int intermediate, int top_k) {
                 ModelSpec s;
                 s.experts_per_layer.assign(static_cast<std::size_t>(layers), experts);
                 s.hidden = hidden;
                 s.intermediate = intermediate;
                 s.top_k = top_k;
                 s.validate();
                 return s;
             }),
             py::arg("layers"), py::arg("experts"), py::arg("hidden"), py::arg("intermediate"), py::arg("top_k"))
        .def_readonly("experts_per_layer", &ModelSpec::experts_per_layer)
        .def_readonly("hidden", &ModelSpec::hidden)
        .def_readonly("intermediate", &ModelSpec::intermediate)
        .def_readonly("top_k", &ModelSpec::top_k)
        .def_property_readonly("num_layers", &ModelSpec::num_layers);

    py::class_<MoEModel>(m, "MoEModel")
        .def_readonly("spec", &MoEModel::spec)
        .def_readonly("metadata", &MoEModel::metadata)
        .def("gate", [](const MoEModel& model, int l, int i) { return to_array(model.expert({l, i}).gate); })
        .def("up", [](const MoEModel& model, int l, int i) { return to_array(model.expert({l, i}).up); })
        .def("down", [](const MoEModel& model, int l, int i) { return to_array(model.expert({l, i}).down); })
        .def("router", [](const MoEModel& model, int l) { return to_array(model.layers.at(l).router); })
        .def(py::self == py::self);

    py::class_<CalibStats>(m, "CalibStats")
        .def_readonly("token_total", &CalibStats::token_total)
        .def_readonly("top_k", &CalibStats::top_k)
        .def("routed_count", [](const CalibStats& s, int l, int i) { return s.at({l, i}).routed_count; })
        .def("topk_count", [](const CalibStats& s, int l, int i) { return s.at({l, i}).topk_count; })
        .def("contribution", [](const CalibStats& s, int l, int i) { return contribution(s, {l, i}); })
        .def("to_json", &stats_to_json)
        .def_static("from_json", [](const std::string& t) { return stats_from_json(t); });

    py::class_<ConsolidationPlan>(m, "ConsolidationPlan")
        .def_property_readonly("policy", [](const ConsolidationPlan& p) { return std::string(to_string(p.policy)); })
        .def_readonly("rho", &ConsolidationPlan::rho)
        .def_readonly("scope_size", &ConsolidationPlan::scope_size)
        .def_readonly("assignment", &ConsolidationPlan::assignment)
        .def_readonly("drop_mask", &ConsolidationPlan::drop_mask)
        .def_readonly("metadata", &ConsolidationPlan::metadata)
        .def_property_readonly("prototypes",
                               [](const ConsolidationPlan& p) {
                                   std::vector<std::vector<ExpertRef>> out;
                                   for (const auto& s : p.scopes) out.push_back(s.prototypes);
                                   return out;
                               })
        .def("to_json", &plan_to_json)
        .def_static("from_json", [](const std::string& t) { return plan_from_json(t); })
        .def(py::self == py::self);

    m.def(
        "gen_synthetic",
        [](const ModelSpec& spec, std::uint64_t seed, const std::string& dup, double noise) {
            DupConfig cfg;
            cfg.mode = parse_dup_mode(dup);
            cfg.noise = noise;
            auto s = gen_synthetic(spec, seed, cfg);
            return py::make_tuple(std::move(s.model), std::move(s.duplicates));
        },
        py::arg("spec"), py::arg("seed") = 42, py::arg("dup") = "none", py::arg("noise") = 0.0,
        "Deterministic synthetic model; returns (model, [(copy, source), ...])");
    m.def("synthetic_tokens", &synthetic_tokens, py::arg("count"), py::arg("hidden"), py::arg("seed") = 42);

    m.def("read_checkpoint", &read_checkpoint, py::arg("path"));
    m.def("write_checkpoint", &write_checkpoint, py::arg("model"), py::arg("path"));
    m.def("checkpoint_bytes", [](const MoEModel& model) { return py::bytes(checkpoint_bytes(model)); });
    m.def("read_plan", &read_plan, py::arg("path"));
    m.def("write_plan", &write_plan, py::arg("plan"), py::arg("path"));
    m.def("read_stats", &read_stats, py::arg("path"));
    m.def("write_stats", &write_stats, py::arg("stats"), py::arg("path"));

    m.def("silu", &silu);
    m.def("model_forward",
          [](const MoEModel& model, const Vector& h, const ConsolidationPlan* plan) {
              return model_forward(model, plan, h);
          },
          py::arg("model"), py::arg("h"), py::arg("plan") = nullptr);
    m.def("materialize", &materialize, py::arg("model"), py::arg("plan"));
    m.def("identity_plan", [](const MoEModel& model) { return identity_plan(model.spec); });

    m.def(
        "projection_distance",
        [](const py::array_t<float>& a, const py::array_t<float>& b, double eps) {
            return projection_distance(to_matrix(a), to_matrix(b), eps);
        },
        py::arg("a"), py::arg("b"), py::arg("eps") = kDefaultEps);
    m.def(
        "expert_distance",
        [](const MoEModel& model, ExpertRef a, ExpertRef b, double eps) {
            return expert_distance(model.expert(a), model.expert(b), eps);
        },
        py::arg("model"), py::arg("a"), py::arg("b"), py::arg("eps") = kDefaultEps);
    m.def("minmax_norm", [](const std::vector<double>& v, double eps) { return minmax_norm(v, eps); },
          py::arg("values"), py::arg("eps") = kDefaultEps);
    m.def("budget", &budget, py::arg("rho"), py::arg("pool_size"));
    m.def("scope_partition", &scope_partition, py::arg("num_layers"), py::arg("scope_size"));

    m.def("run_calibration",
          [](const MoEModel& model, const std::vector<Vector>& tokens, int threads) {
              return run_calibration(model, tokens, threads);
          },
          py::arg("model"), py::arg("tokens"), py::arg("threads") = 1);

    m.def(
        "consolidate",
        [](const MoEModel& model, const CalibStats& stats, double rho, int scope_size, const std::string& policy,
           const std::string& importance, double eps, int threads) {
            ScopeConfig cfg;
            cfg.rho = rho;
            cfg.scope_size = scope_size;
            cfg.policy = parse_policy(policy);
            cfg.importance = parse_importance(importance);
            cfg.eps = eps;
            cfg.threads = threads;
            return consolidate(model, stats, cfg);
        },
        py::arg("model"), py::arg("stats"), py::arg("rho"), py::arg("scope_size") = 1,
        py::arg("policy") = "adaptive", py::arg("importance") = "contribution", py::arg("eps") = kDefaultEps,
        py::arg("threads") = 1);

    m.def("prune_frequency", &prune_frequency, py::arg("stats"), py::arg("rho"));
    m.def("prune_reap", &prune_reap, py::arg("stats"), py::arg("rho"));
    m.def(
        "merge_msmoe",
        [](const MoEModel& model, const CalibStats& stats, double rho, double eps) {
            auto r = merge_msmoe(model, stats, rho, eps);
            return py::make_tuple(std::move(r.plan), std::move(r.fused.base));
        },
        py::arg("model"), py::arg("stats"), py::arg("rho"), py::arg("eps") = kDefaultEps,
        "Returns (plan, fused_model)");
    m.def(
        "fuse_weighted_average",
        [](const MoEModel& model, const ConsolidationPlan& plan, const CalibStats& stats) {
            return fuse_weighted_average(model, plan, stats).base;
        },
        py::arg("model"), py::arg("plan"), py::arg("stats"));

    m.def(
        "evaluate_fidelity",
        [](const MoEModel& model, const ConsolidationPlan& plan, const std::vector<Vector>& tokens, double eps,
           int threads) { return report_dict(evaluate_fidelity(model, plan, tokens, eps, threads)); },
        py::arg("model"), py::arg("plan"), py::arg("tokens"), py::arg("eps") = kDefaultEps, py::arg("threads") = 1);
    m.def("reduction_accounting", &reduction_accounting, py::arg("plan"));
    m.def("retained_experts", &retained_experts, py::arg("plan"));
    m.def(
        "cross_layer_nn",
        [](const MoEModel& model, int scope_size, double eps) {
            const NNReport r = cross_layer_nn(model, scope_size, eps);
            py::dict d;
            d["heatmap"] = r.heatmap;
            d["layer_fraction"] = r.layer_fraction;
            d["overall_fraction"] = r.overall_fraction;
            return d;
        },
        py::arg("model"), py::arg("scope_size"), py::arg("eps") = kDefaultEps);

    m.attr("__version__") = "0.1.0";
}
