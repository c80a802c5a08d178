#include "equiflow/model.hpp"

#include "equiflow/json_fields.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace equiflow {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    try {
        fields::reject_unknown(j, allowed, where);
    } catch (const fields::SchemaError& e) {
        throw ModelError(e.what());
    }
}

template <class T>
T required(const json& j, const std::string& key, const std::string& where) {
    try {
        return fields::required<T>(j, key, where);
    } catch (const fields::SchemaError& e) {
        throw ModelError(e.what());
    }
}

template <class T>
T optional(const json& j, const std::string& key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    return required<T>(j, key, where);
}

json network_to_json(const NetworkConfig& c) {
    json j{{"channels", c.channels}, {"nonlinearity", c.nonlinearity}, {"output_bias", c.output_bias}};
    j["lipschitz"] = c.lipschitz ? json(*c.lipschitz) : json(nullptr);
    return j;
}

NetworkConfig network_from_json(const json& j, const std::string& where) {
    reject_unknown(j, {"channels", "nonlinearity", "lipschitz", "output_bias"}, where);
    NetworkConfig c;
    c.channels = required<std::vector<int>>(j, "channels", where);
    c.nonlinearity = optional<std::string>(j, "nonlinearity", c.nonlinearity, where);
    c.output_bias = optional<bool>(j, "output_bias", true, where);
    if (j.contains("lipschitz") && !j.at("lipschitz").is_null()) c.lipschitz = required<double>(j, "lipschitz", where);
    return c;
}

}  // namespace

std::string to_string(Orientation o) { return o == Orientation::forward ? "forward" : "inverted"; }

Orientation orientation_from_string(const std::string& s) {
    if (s == "forward") return Orientation::forward;
    if (s == "inverted") return Orientation::inverted;
    throw ModelError("unknown orientation: " + s);
}

LogDetConfig::Kind logdet_kind_from_string(const std::string& s) {
    if (s == "exact") return LogDetConfig::Kind::exact;
    if (s == "series") return LogDetConfig::Kind::series;
    if (s == "hutchinson") return LogDetConfig::Kind::hutchinson;
    throw ModelError("unknown log-det estimator: " + s);
}

std::shared_ptr<const FiniteGroup> make_group(const std::string& name, int translation_size) {
    return std::make_shared<const FiniteGroup>(FiniteGroup::parse(name, translation_size));
}

Representation make_base_rep(std::shared_ptr<const FiniteGroup> group, const RepSpec& spec) {
    if (spec.kind == "rotation2d") return rotation2d_rep(std::move(group));
    if (spec.kind == "regular") return regular_rep(std::move(group));
    if (spec.kind == "trivial") {
        if (spec.dim < 1) throw ModelError("trivial representation needs dim >= 1");
        return trivial_rep(std::move(group), spec.dim);
    }
    throw ModelError("unknown representation kind: " + spec.kind);
}

Representation make_rep(std::shared_ptr<const FiniteGroup> group, const RepSpec& spec) {
    if (spec.blocks < 1) throw ModelError("representation blocks must be positive");
    Representation base = make_base_rep(std::move(group), spec);
    if (spec.blocks == 1) return base;
    return diagonal_permutation_rep(base, spec.blocks);
}

FlowComposition build_flow(const ModelSpec& spec, bool init) {
    auto group = make_group(spec.group);
    Representation rep = make_rep(group, spec.rep);
    Representation base = make_base_rep(group, spec.rep);
    FlowComposition flow(rep, spec.seed);
    for (const LayerSpec& l : spec.layers) {
        std::shared_ptr<FlowLayer> layer;
        if (l.kind == "residual") {
            layer = std::make_shared<GResidualLayer>(l.prefix, rep, l.net, l.logdet, l.fixed_point);
        } else if (l.kind == "matexp") {
            layer = std::make_shared<MatrixExpLayer>(l.prefix, rep, l.init_scale);
        } else if (l.kind == "coupling") {
            if (spec.rep.blocks != 2) throw ModelError("coupling layers need a two-block representation");
            layer = std::make_shared<GCouplingLayer>(l.prefix, base, l.net, l.parity);
        } else if (l.kind == "iaf") {
            if (spec.rep.blocks < 2) throw ModelError("IAF layers need a multi-block representation");
            layer = std::make_shared<GIAFLayer>(l.prefix, base, spec.rep.blocks, l.net);
        } else {
            throw ModelError("unknown layer kind: " + l.kind);
        }
        flow.add(std::move(layer), l.orientation);
    }
    if (init) flow.init_params();
    return flow;
}

json to_json(const ModelSpec& spec) {
    json layers = json::array();
    for (const LayerSpec& l : spec.layers) {
        json j{{"kind", l.kind}, {"prefix", l.prefix}, {"orientation", to_string(l.orientation)}};
        if (l.kind != "matexp") j["network"] = network_to_json(l.net);
        if (l.kind == "coupling") j["parity"] = l.parity;
        if (l.kind == "residual") {
            j["logdet"] = {{"kind", to_string(l.logdet.kind)},
                           {"terms", l.logdet.terms},
                           {"probes", l.logdet.probes},
                           {"seed", l.logdet.seed}};
            j["fixed_point"] = {{"max_iters", l.fixed_point.max_iters}, {"tol", l.fixed_point.tol}};
        }
        if (l.kind == "matexp") j["init_scale"] = l.init_scale;
        layers.push_back(std::move(j));
    }
    return json{{"group", spec.group},
                {"rep", {{"kind", spec.rep.kind}, {"dim", spec.rep.dim}, {"blocks", spec.rep.blocks}}},
                {"seed", spec.seed},
                {"layers", std::move(layers)}};
}

ModelSpec model_spec_from_json(const json& j) {
    reject_unknown(j, {"group", "rep", "seed", "layers"}, "model");
    ModelSpec spec;
    spec.group = required<std::string>(j, "group", "");
    spec.seed = optional<std::uint64_t>(j, "seed", 0, "model");
    const json rep = required<json>(j, "rep", "model");
    reject_unknown(rep, {"kind", "dim", "blocks"}, "model.rep");
    spec.rep.kind = required<std::string>(rep, "kind", "model.rep");
    spec.rep.dim = optional<int>(rep, "dim", 0, "model.rep");
    spec.rep.blocks = optional<int>(rep, "blocks", 1, "model.rep");
    for (const json& lj : required<json>(j, "layers", "model")) {
        const std::string where = "model.layers";
        reject_unknown(lj, {"kind", "prefix", "orientation", "network", "parity", "logdet", "fixed_point", "init_scale"},
                       where);
        LayerSpec l;
        l.kind = required<std::string>(lj, "kind", where);
        l.prefix = required<std::string>(lj, "prefix", where);
        l.orientation = orientation_from_string(optional<std::string>(lj, "orientation", "forward", where));
        if (lj.contains("network")) l.net = network_from_json(lj.at("network"), where + ".network");
        l.parity = optional<bool>(lj, "parity", false, where);
        if (lj.contains("logdet")) {
            const json& ld = lj.at("logdet");
            reject_unknown(ld, {"kind", "terms", "probes", "seed"}, where + ".logdet");
            l.logdet.kind = logdet_kind_from_string(required<std::string>(ld, "kind", where + ".logdet"));
            l.logdet.terms = optional<int>(ld, "terms", l.logdet.terms, where + ".logdet");
            l.logdet.probes = optional<int>(ld, "probes", l.logdet.probes, where + ".logdet");
            l.logdet.seed = optional<std::uint64_t>(ld, "seed", 0, where + ".logdet");
        }
        if (lj.contains("fixed_point")) {
            const json& fp = lj.at("fixed_point");
            reject_unknown(fp, {"max_iters", "tol"}, where + ".fixed_point");
            l.fixed_point.max_iters = optional<int>(fp, "max_iters", l.fixed_point.max_iters, where + ".fixed_point");
            l.fixed_point.tol = optional<double>(fp, "tol", l.fixed_point.tol, where + ".fixed_point");
        }
        l.init_scale = optional<double>(lj, "init_scale", l.init_scale, where);
        spec.layers.push_back(std::move(l));
    }
    return spec;
}

json params_to_json(const ParameterStore& store) {
    json arr = json::array();
    for (const std::string& name : store.names()) {
        const Matrix& m = store.get(name);
        std::vector<double> data(static_cast<std::size_t>(m.size()));
        // Row-major order matches how a reader would lay the array out.
        for (Eigen::Index i = 0, k = 0; i < m.rows(); ++i)
            for (Eigen::Index c = 0; c < m.cols(); ++c) data[static_cast<std::size_t>(k++)] = m(i, c);
        arr.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}});
    }
    return arr;
}

ParameterStore params_from_json(const json& j, std::uint64_t seed) {
    if (!j.is_array()) throw ModelError("params must be an array");
    ParameterStore store(seed);
    for (const json& p : j) {
        reject_unknown(p, {"name", "rows", "cols", "data"}, "params");
        const auto rows = required<Eigen::Index>(p, "rows", "params");
        const auto cols = required<Eigen::Index>(p, "cols", "params");
        const auto data = required<std::vector<double>>(p, "data", "params");
        if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size())
            throw ModelError("parameter array has the wrong size");
        Matrix m(rows, cols);
        for (Eigen::Index i = 0, k = 0; i < rows; ++i)
            for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = data[static_cast<std::size_t>(k++)];
        store.add(required<std::string>(p, "name", "params"), std::move(m));
    }
    return store;
}

void save_model(const std::filesystem::path& path, const ModelSpec& spec, const FlowComposition& flow) {
    json j{{"format", "equiflow-model"}, {"version", 1}, {"spec", to_json(spec)}, {"params", params_to_json(flow.params())}};
    std::ofstream out(path);
    if (!out) throw ModelError("cannot write model file: " + path.string());
    out << j.dump(1) << '\n';
}

LoadedModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ModelError("cannot read model file: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ModelError("model file is not valid JSON: " + std::string(e.what()));
    }
    reject_unknown(j, {"format", "version", "spec", "params"}, "model file");
    if (optional<std::string>(j, "format", "", "") != "equiflow-model") throw ModelError("not an equiflow model file");
    if (optional<int>(j, "version", 0, "") != 1) throw ModelError("unsupported model file version");
    ModelSpec spec = model_spec_from_json(required<json>(j, "spec", ""));
    FlowComposition flow = build_flow(spec, true);
    ParameterStore loaded = params_from_json(required<json>(j, "params", ""), spec.seed);
    const ParameterStore& fresh = flow.params();
    if (loaded.names() != fresh.names()) throw ModelError("parameter names do not match the architecture");
    for (const std::string& n : fresh.names())
        if (loaded.get(n).rows() != fresh.get(n).rows() || loaded.get(n).cols() != fresh.get(n).cols())
            throw ModelError("parameter " + n + " has the wrong shape");
    flow.set_params(std::move(loaded));
    return {std::move(spec), std::move(flow)};
}

}  // namespace equiflow
