// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include "conmoe/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <regex>
#include <sstream>

#include "conmoe/error.hpp"
#include "json.hpp"

namespace conmoe {

using nlohmann::json;

namespace {

struct TensorSlot {
    Matrix* matrix;
    int rows;
    int cols;
};

// Tensors in canonical order: per layer, experts ascending (gate, up, down), then router.
template <typename Model, typename Fn>
void for_each_tensor(Model& model, Fn&& fn) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto& layer = model.layers[l];
        const std::string prefix = "layers." + std::to_string(l);
        for (std::size_t i = 0; i < layer.experts.size(); ++i) {
            auto& e = layer.experts[i];
            const std::string base = prefix + ".experts." + std::to_string(i);
            fn(base + ".gate", e.gate);
            fn(base + ".up", e.up);
            fn(base + ".down", e.down);
        }
        fn(prefix + ".router", layer.router);
    }
}

const std::regex& tensor_name_grammar() {
    static const std::regex grammar(R"(layers\.(0|[1-9][0-9]*)\.(router|experts\.(0|[1-9][0-9]*)\.(gate|up|down)))");
    return grammar;
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
        out.push_back(static_cast<char>((v >> (8 * b)) & 0xffU));
    }
}

std::uint64_t get_u64(std::string_view in) {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[static_cast<std::size_t>(b)])) << (8 * b);
    }
    return v;
}

void put_f32(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) {
        out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffU));
    }
}

float get_f32(const char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
    }
    return std::bit_cast<float>(bits);
}

json spec_to_json(const ModelSpec& spec) {
    return json{{"activation", spec.activation},   {"experts_per_layer", spec.experts_per_layer},
                {"hidden", spec.hidden},           {"intermediate", spec.intermediate},
                {"num_layers", spec.num_layers()}, {"top_k", spec.top_k}};
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec spec;
    spec.activation = j.at("activation").get<std::string>();
    require(spec.activation == "silu", "unsupported activation: " + spec.activation);
    spec.experts_per_layer = j.at("experts_per_layer").get<std::vector<int>>();
    spec.hidden = j.at("hidden").get<int>();
    spec.intermediate = j.at("intermediate").get<int>();
    spec.top_k = j.at("top_k").get<int>();
    require(j.at("num_layers").get<int>() == spec.num_layers(), "num_layers disagrees with experts_per_layer");
    spec.validate();
    return spec;
}

json ref_to_json(ExpertRef r) {
    return json::array({r.layer, r.index});
}

ExpertRef ref_from_json(const json& j) {
    require(j.is_array() && j.size() == 2, "expert reference must be [layer, index]");
    return {j.at(0).get<int>(), j.at(1).get<int>()};
}

void check_version(const json& j, int supported, const std::string& what) {
    require(j.contains("version") && j.at("version").is_number_integer(), what + ": missing version field");
    const int version = j.at("version").get<int>();
    require(version == supported, what + ": unsupported version " + std::to_string(version));
}

template <typename Fn>
auto parse_json_document(std::string_view text, const std::string& what, Fn&& fn) {
    try {
        return fn(json::parse(text));
    } catch (const json::exception& e) {
        throw ValidationError("malformed " + what + ": " + e.what());
    }
}

std::string dump(const json& j) {
    return j.dump(2) + "\n";
}

}  // namespace

std::string checkpoint_bytes(const MoEModel& model) {
    require(!model.layers.empty() && model.spec.num_layers() > 0, "empty model");
    model.validate();

    json tensors = json::array();
    std::uint64_t offset = 0;
    std::size_t count = 0;
    for_each_tensor(model, [&](const std::string& name, const Matrix& m) {
        tensors.push_back({{"name", name}, {"offset", offset}, {"shape", {m.rows, m.cols}}});
        offset += static_cast<std::uint64_t>(m.size()) * 4U;
        ++count;
    });
    require(count <= std::numeric_limits<std::uint32_t>::max(), "tensor count overflows header index");

    const json header{{"magic", kCheckpointMagic},
                      {"metadata", model.metadata},
                      {"spec", spec_to_json(model.spec)},
                      {"tensors", std::move(tensors)},
                      {"version", kCheckpointVersion}};

    std::string out = header.dump();
    out.push_back('\n');
    put_u64(out, offset);
    out.reserve(out.size() + offset);
    for_each_tensor(model, [&](const std::string&, const Matrix& m) {
        for (float f : m.values) {
            put_f32(out, f);
        }
    });
    return out;
}

MoEModel parse_checkpoint(std::string_view bytes) {
    const auto newline = bytes.find('\n');
    require(newline != std::string_view::npos, "malformed checkpoint header");
    json header;
    try {
        header = json::parse(bytes.substr(0, newline));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
    }
    require(header.is_object() && header.contains("magic") && header.at("magic").is_string() &&
                header.at("magic").get<std::string>() == kCheckpointMagic,
            "bad magic");
    check_version(header, kCheckpointVersion, "checkpoint");

    MoEModel model;
    std::vector<std::tuple<std::string, int, int, std::uint64_t>> entries;
    try {
        model.spec = spec_from_json(header.at("spec"));
        if (header.contains("metadata")) {
            model.metadata = header.at("metadata").get<Metadata>();
        }
        for (const auto& t : header.at("tensors")) {
            const auto shape = t.at("shape").get<std::vector<int>>();
            require(shape.size() == 2, "tensor shape must be 2-D");
            entries.emplace_back(t.at("name").get<std::string>(), shape[0], shape[1],
                                 t.at("offset").get<std::uint64_t>());
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
    }

    const std::string_view rest = bytes.substr(newline + 1);
    require(rest.size() >= 8, "payload length mismatch");
    const std::uint64_t payload_len = get_u64(rest);
    const std::string_view payload = rest.substr(8);
    require(payload.size() == payload_len, "payload length mismatch");

    // Allocate the architecture declared by spec, then fill from the index.
    const auto& spec = model.spec;
    for (int l = 0; l < spec.num_layers(); ++l) {
        MoELayer layer;
        const int n = spec.experts_per_layer[static_cast<std::size_t>(l)];
        for (int i = 0; i < n; ++i) {
            layer.experts.push_back({Matrix(spec.intermediate, spec.hidden), Matrix(spec.intermediate, spec.hidden),
                                     Matrix(spec.hidden, spec.intermediate)});
        }
        layer.router = Matrix(n, spec.hidden);
        model.layers.push_back(std::move(layer));
    }
    std::map<std::string, Matrix*> expected;
    for_each_tensor(model, [&](const std::string& name, Matrix& m) { expected.emplace(name, &m); });

    std::map<std::string, bool> seen;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    for (const auto& [name, rows, cols, offset] : entries) {
        require(std::regex_match(name, tensor_name_grammar()), "invalid tensor name: " + name);
        const auto it = expected.find(name);
        require(it != expected.end(), "tensor not declared by spec: " + name);
        require(!seen[name], "duplicate tensor: " + name);
        seen[name] = true;
        Matrix& m = *it->second;
        require(rows == m.rows && cols == m.cols, "shape mismatch for " + name);
        const std::uint64_t len = static_cast<std::uint64_t>(m.size()) * 4U;
        require(offset <= payload_len && len <= payload_len - offset, "offset out of range for " + name);
        ranges.emplace_back(offset, len);
        const char* src = payload.data() + offset;
        for (std::size_t k = 0; k < m.values.size(); ++k) {
            m.values[k] = get_f32(src + 4 * k);
        }
    }
    require(seen.size() == expected.size(), "missing tensor entries in checkpoint index");

    std::sort(ranges.begin(), ranges.end());
    std::uint64_t cursor = 0;
    for (const auto& [offset, len] : ranges) {
        require(offset == cursor, "tensor byte ranges overlap or leave gaps");
        cursor += len;
    }
    require(cursor == payload_len, "payload length mismatch");
    model.validate();
    return model;
}

void write_checkpoint(const MoEModel& model, const std::filesystem::path& path) {
    write_file(path, checkpoint_bytes(model));
}

MoEModel read_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(read_file(path));
}

std::string plan_to_json(const ConsolidationPlan& plan) {
    plan.validate();
    json scopes = json::array();
    json prototypes = json::array();
    for (const auto& s : plan.scopes) {
        scopes.push_back(s.layers);
        json protos = json::array();
        for (ExpertRef p : s.prototypes) {
            protos.push_back(ref_to_json(p));
        }
        prototypes.push_back(std::move(protos));
    }
    json assignment = json::array();
    for (const auto& row : plan.assignment) {
        json r = json::array();
        for (ExpertRef t : row) {
            r.push_back(ref_to_json(t));
        }
        assignment.push_back(std::move(r));
    }
    json j{{"assignment", std::move(assignment)},
           {"metadata", plan.metadata},
           {"policy", std::string(to_string(plan.policy))},
           {"prototypes", std::move(prototypes)},
           {"rho", plan.rho},
           {"scope_size", plan.scope_size},
           {"scopes", std::move(scopes)},
           {"version", plan.version}};
    if (plan.is_pruning()) {
        j["drop_mask"] = plan.drop_mask;
    }
    return dump(j);
}

ConsolidationPlan plan_from_json(std::string_view text) {
    ConsolidationPlan plan = parse_json_document(text, "plan", [](const json& j) {
        require(j.is_object(), "malformed plan: expected an object");
        check_version(j, kPlanVersion, "plan");
        ConsolidationPlan p;
        p.version = j.at("version").get<int>();
        p.rho = j.at("rho").get<double>();
        p.scope_size = j.at("scope_size").get<int>();
        p.policy = parse_policy(j.at("policy").get<std::string>());
        const auto& scopes = j.at("scopes");
        const auto& protos = j.at("prototypes");
        require(scopes.size() == protos.size(), "malformed plan: scopes and prototypes differ in length");
        for (std::size_t s = 0; s < scopes.size(); ++s) {
            PlanScope scope;
            scope.layers = scopes.at(s).get<std::vector<int>>();
            for (const auto& r : protos.at(s)) {
                scope.prototypes.push_back(ref_from_json(r));
            }
            p.scopes.push_back(std::move(scope));
        }
        for (const auto& row : j.at("assignment")) {
            std::vector<ExpertRef> r;
            for (const auto& t : row) {
                r.push_back(ref_from_json(t));
            }
            p.assignment.push_back(std::move(r));
        }
        if (j.contains("drop_mask")) {
            p.drop_mask = j.at("drop_mask").get<std::vector<std::vector<bool>>>();
        }
        if (j.contains("metadata")) {
            p.metadata = j.at("metadata").get<Metadata>();
        }
        return p;
    });
    plan.validate();
    return plan;
}

void write_plan(const ConsolidationPlan& plan, const std::filesystem::path& path) {
    write_file(path, plan_to_json(plan));
}

ConsolidationPlan read_plan(const std::filesystem::path& path) {
    return plan_from_json(read_file(path));
}

std::string stats_to_json(const CalibStats& stats) {
    stats.validate();
    json records = json::array();
    for (int l = 0; l < stats.num_layers(); ++l) {
        const auto& layer = stats.experts[static_cast<std::size_t>(l)];
        for (int i = 0; i < static_cast<int>(layer.size()); ++i) {
            const auto& s = layer[static_cast<std::size_t>(i)];
            records.push_back({{"index", i},
                               {"layer", l},
                               {"routed_count", s.routed_count},
                               {"sum_weighted_norm", s.sum_weighted_norm},
                               {"topk_count", s.topk_count}});
        }
    }
    const json j{{"experts", std::move(records)}, {"layers", stats.layer_sizes()},
                 {"metadata", stats.metadata},    {"token_total", stats.token_total},
                 {"top_k", stats.top_k},          {"version", kStatsVersion}};
    return dump(j);
}

CalibStats stats_from_json(std::string_view text) {
    CalibStats stats = parse_json_document(text, "stats", [](const json& j) {
        require(j.is_object(), "malformed stats: expected an object");
        check_version(j, kStatsVersion, "stats");
        CalibStats s;
        s.token_total = j.at("token_total").get<std::int64_t>();
        s.top_k = j.at("top_k").get<int>();
        if (j.contains("metadata")) {
            s.metadata = j.at("metadata").get<Metadata>();
        }
        const auto sizes = j.at("layers").get<std::vector<int>>();
        std::vector<std::vector<bool>> filled;
        for (int n : sizes) {
            require(n >= 1, "malformed stats: layer without experts");
            s.experts.emplace_back(static_cast<std::size_t>(n));
            filled.emplace_back(static_cast<std::size_t>(n), false);
        }
        for (const auto& r : j.at("experts")) {
            const int l = r.at("layer").get<int>();
            const int i = r.at("index").get<int>();
            require(l >= 0 && l < static_cast<int>(sizes.size()) && i >= 0 && i < sizes[static_cast<std::size_t>(l)],
                    "stats record for unknown expert " + to_string({l, i}));
            require(!filled[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)],
                    "duplicate expert record " + to_string({l, i}));
            filled[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] = true;
            auto& e = s.experts[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)];
            e.routed_count = r.at("routed_count").get<std::int64_t>();
            e.sum_weighted_norm = r.at("sum_weighted_norm").get<double>();
            e.topk_count = r.at("topk_count").get<std::int64_t>();
        }
        for (std::size_t l = 0; l < filled.size(); ++l) {
            for (std::size_t i = 0; i < filled[l].size(); ++i) {
                require(filled[l][i], "missing expert record " + to_string({static_cast<int>(l), static_cast<int>(i)}));
            }
        }
        return s;
    });
    stats.validate();
    return stats;
}

void write_stats(const CalibStats& stats, const std::filesystem::path& path) {
    write_file(path, stats_to_json(stats));
}

CalibStats read_stats(const std::filesystem::path& path) {
    return stats_from_json(read_file(path));
}

namespace {

json report_json(const FidelityReport& report) {
    return json{{"achieved_ratio", report.achieved_ratio}, {"end_to_end_error", report.end_to_end_error},
                {"layer_errors", report.layer_errors},     {"metadata", report.metadata},
                {"token_count", report.token_count},       {"version", 1}};
}

}  // namespace

std::string report_to_json(const FidelityReport& report) {
    return dump(report_json(report));
}

std::string sweep_to_json(std::span<const SweepRow> rows, double rho, const Metadata& metadata) {
    json list = json::array();
    for (const auto& row : rows) {
        list.push_back({{"report", report_json(row.report)}, {"scope_size", row.scope_size}});
    }
    return dump(json{{"metadata", metadata}, {"rho", rho}, {"rows", std::move(list)}, {"version", 1}});
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) {
        throw IoError("error while reading " + path.string());
    }
    return buf.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
        throw IoError("error while writing " + path.string());
    }
}

}  // namespace conmoe
