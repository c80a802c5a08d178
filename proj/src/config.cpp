#include "equiflow/config.hpp"

#include "equiflow/json_fields.hpp"

#include <fstream>

namespace equiflow {

using nlohmann::json;

namespace {

const std::set<std::string> kDatasetKinds{"eight-gaussians", "concentric-rings", "permutation-sets"};
const std::set<std::string> kModelTypes{"residual", "coupling", "iaf"};

void require(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

RunConfig parse(const json& j) {
    using fields::optional;
    using fields::reject_unknown;
    using fields::required;
    reject_unknown(j, {"group", "seed", "dataset", "model", "train"}, "");
    RunConfig c;
    c.group = required<std::string>(j, "group", "");
    c.seed = optional<std::uint64_t>(j, "seed", 0, "");

    const json d = optional<json>(j, "dataset", json::object(), "");
    reject_unknown(d, {"kind", "train_size", "test_size", "block"}, "dataset");
    c.dataset.kind = optional<std::string>(d, "kind", c.dataset.kind, "dataset");
    c.dataset.train_size = optional<int>(d, "train_size", c.dataset.train_size, "dataset");
    c.dataset.test_size = optional<int>(d, "test_size", c.dataset.test_size, "dataset");
    c.dataset.block = optional<int>(d, "block", c.dataset.block, "dataset");

    const json m = optional<json>(j, "model", json::object(), "");
    reject_unknown(m, {"type", "equivariant", "blocks", "width", "param_budget", "convs", "nonlinearity", "lipschitz",
                       "logdet", "logdet_terms", "logdet_probes", "matexp"},
                   "model");
    ModelConfig& mc = c.model;
    mc.type = optional<std::string>(m, "type", mc.type, "model");
    mc.equivariant = optional<bool>(m, "equivariant", mc.equivariant, "model");
    mc.blocks = optional<int>(m, "blocks", mc.blocks, "model");
    mc.width = optional<int>(m, "width", mc.width, "model");
    if (m.contains("param_budget") && !m.at("param_budget").is_null())
        mc.param_budget = required<int>(m, "param_budget", "model");
    mc.convs = optional<int>(m, "convs", mc.convs, "model");
    mc.nonlinearity = optional<std::string>(m, "nonlinearity", mc.nonlinearity, "model");
    mc.lipschitz = optional<double>(m, "lipschitz", mc.lipschitz, "model");
    mc.logdet = optional<std::string>(m, "logdet", mc.logdet, "model");
    mc.logdet_terms = optional<int>(m, "logdet_terms", mc.logdet_terms, "model");
    mc.logdet_probes = optional<int>(m, "logdet_probes", mc.logdet_probes, "model");
    mc.matexp = optional<bool>(m, "matexp", mc.matexp, "model");

    const json t = optional<json>(j, "train", json::object(), "");
    reject_unknown(t, {"steps", "batch_size", "lr", "beta1", "beta2", "eps", "eval_interval", "augment"}, "train");
    TrainSection& tc = c.train;
    tc.steps = optional<int>(t, "steps", tc.steps, "train");
    tc.batch_size = optional<int>(t, "batch_size", tc.batch_size, "train");
    tc.lr = optional<double>(t, "lr", tc.lr, "train");
    tc.beta1 = optional<double>(t, "beta1", tc.beta1, "train");
    tc.beta2 = optional<double>(t, "beta2", tc.beta2, "train");
    tc.eps = optional<double>(t, "eps", tc.eps, "train");
    tc.eval_interval = optional<int>(t, "eval_interval", tc.eval_interval, "train");
    tc.augment = optional<bool>(t, "augment", tc.augment, "train");
    return c;
}

void validate(const RunConfig& c) {
    require(kDatasetKinds.count(c.dataset.kind) != 0, "unknown dataset kind: " + c.dataset.kind);
    require(c.dataset.train_size > 0 && c.dataset.test_size > 0, "dataset sizes must be positive");
    require(c.dataset.block > 0, "dataset.block must be positive");
    require(kModelTypes.count(c.model.type) != 0, "unknown model type: " + c.model.type);
    require(c.model.blocks > 0 && c.model.width > 0 && c.model.convs >= 0, "model blocks, width and convs must be positive");
    require(!c.model.param_budget || *c.model.param_budget > 0, "model.param_budget must be positive");
    require(c.model.lipschitz > 0.0 && c.model.lipschitz < 1.0, "model.lipschitz must lie in (0, 1)");
    require(ad::unary_known(c.model.nonlinearity), "unknown nonlinearity: " + c.model.nonlinearity);
    try {
        logdet_kind_from_string(c.model.logdet);
    } catch (const ModelError& e) {
        throw ConfigError(e.what());
    }
    require(c.model.logdet_terms > 0 && c.model.logdet_probes > 0, "log-det terms and probes must be positive");
    require(c.train.steps >= 0 && c.train.batch_size > 0 && c.train.eval_interval > 0,
            "train steps, batch_size and eval_interval must be positive");
    require(c.train.lr > 0.0 && c.train.eps > 0.0, "train lr and eps must be positive");
    require(c.train.beta1 >= 0.0 && c.train.beta1 < 1.0 && c.train.beta2 >= 0.0 && c.train.beta2 < 1.0,
            "Adam betas must lie in [0, 1)");
}

/// Base permutation rep for coupling and IAF models: regular rep of `group` repeated to fill `dim`.
RepSpec block_rep(const FiniteGroup& group, int dim, const std::string& type) {
    require(dim % group.order() == 0, type + " model needs the data dimension to be a multiple of the group order");
    RepSpec rep{"regular", 0, dim / group.order()};
    if (type == "coupling") require(rep.blocks == 2, "coupling model needs exactly two blocks of the regular representation");
    if (type == "iaf") require(rep.blocks >= 2, "iaf model needs at least two blocks of the regular representation");
    return rep;
}

ModelSpec spec_with_width(const RunConfig& c, int width) {
    const ToyDataset data = toy_dataset(c);
    const auto group = data_group(c);
    const std::string model_group = c.model.equivariant ? group->name() : "C1";
    const ModelConfig& m = c.model;
    ModelSpec spec;
    if (m.type == "residual") {
        ResidualArchitecture arch;
        arch.blocks = m.blocks;
        arch.width = width;
        arch.convs = m.convs;
        arch.nonlinearity = m.nonlinearity;
        arch.lipschitz = m.lipschitz;
        arch.logdet.kind = logdet_kind_from_string(m.logdet);
        arch.logdet.terms = m.logdet_terms;
        arch.logdet.probes = m.logdet_probes;
        arch.logdet.seed = c.seed;
        RepSpec rep;
        if (!m.equivariant) rep = {"trivial", data.dim(), 1};
        else if (data.kind == DatasetKind::permutation_sets) rep = {"regular", 0, 2};
        else rep = {"rotation2d", 0, 1};
        spec = residual_model(model_group, rep, arch, c.seed);
    } else {
        spec.group = model_group;
        spec.seed = c.seed;
        spec.rep = block_rep(FiniteGroup::parse(model_group), data.dim(), m.type);
        for (int b = 0; b < m.blocks; ++b) {
            LayerSpec l;
            l.kind = m.type;
            l.prefix = "block" + std::to_string(b);
            l.net.channels.assign(static_cast<std::size_t>(m.convs + 1), width);
            l.net.nonlinearity = m.nonlinearity;
            l.parity = b % 2 == 1;
            spec.layers.push_back(std::move(l));
        }
    }
    if (m.matexp) {
        LayerSpec l;
        l.kind = "matexp";
        l.prefix = "matexp";
        spec.layers.insert(spec.layers.begin(), std::move(l));
    }
    return spec;
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    try {
        c = parse(j);
    } catch (const fields::SchemaError& e) {
        throw ConfigError(e.what());
    }
    validate(c);
    return c;
}

json to_json(const RunConfig& c) {
    const ModelConfig& m = c.model;
    json model{{"type", m.type},
               {"equivariant", m.equivariant},
               {"blocks", m.blocks},
               {"width", m.width},
               {"param_budget", m.param_budget ? json(*m.param_budget) : json(nullptr)},
               {"convs", m.convs},
               {"nonlinearity", m.nonlinearity},
               {"lipschitz", m.lipschitz},
               {"logdet", m.logdet},
               {"logdet_terms", m.logdet_terms},
               {"logdet_probes", m.logdet_probes},
               {"matexp", m.matexp}};
    const TrainSection& t = c.train;
    return json{{"group", c.group},
                {"seed", c.seed},
                {"dataset",
                 {{"kind", c.dataset.kind},
                  {"train_size", c.dataset.train_size},
                  {"test_size", c.dataset.test_size},
                  {"block", c.dataset.block}}},
                {"model", std::move(model)},
                {"train",
                 {{"steps", t.steps},
                  {"batch_size", t.batch_size},
                  {"lr", t.lr},
                  {"beta1", t.beta1},
                  {"beta2", t.beta2},
                  {"eps", t.eps},
                  {"eval_interval", t.eval_interval},
                  {"augment", t.augment}}}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config: " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return run_config_from_json(j);
}

std::string canonical_text(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

std::shared_ptr<const FiniteGroup> data_group(const RunConfig& c) {
    try {
        return make_group(c.group, c.dataset.block);
    } catch (const GroupError& e) {
        throw ConfigError(e.what());
    }
}

Representation data_representation(const RunConfig& c) {
    const auto group = data_group(c);
    if (c.dataset.kind == "permutation-sets") {
        require(group->order() == c.dataset.block,
                "permutation-sets needs a group of order dataset.block acting by cyclic shift");
        return make_rep(group, {"regular", 0, 2});
    }
    try {
        return rotation2d_rep(group);
    } catch (const GroupError& e) {
        throw ConfigError(std::string("group cannot act on the plane: ") + e.what());
    }
}

ToyDataset toy_dataset(const RunConfig& c) {
    return {dataset_kind_from_string(c.dataset.kind), c.dataset.block};
}

TrainConfig train_config(const RunConfig& c) {
    TrainConfig t;
    t.steps = c.train.steps;
    t.batch_size = c.train.batch_size;
    t.adam = {c.train.lr, c.train.beta1, c.train.beta2, c.train.eps};
    t.eval_interval = c.train.eval_interval;
    t.train_size = c.dataset.train_size;
    t.test_size = c.dataset.test_size;
    t.augment = c.train.augment;
    t.seed = c.seed;
    return t;
}

ModelSpec model_spec(const RunConfig& c) {
    data_representation(c);  // validates the group against the dataset
    try {
        if (!c.model.param_budget) return spec_with_width(c, c.model.width);
        const auto target = static_cast<std::size_t>(*c.model.param_budget);
        int best = 1;
        std::size_t best_gap = static_cast<std::size_t>(-1);
        for (int w = 1; w <= 64; ++w) {
            const std::size_t count = parameter_count(spec_with_width(c, w));
            const std::size_t gap = count > target ? count - target : target - count;
            if (gap < best_gap) {
                best_gap = gap;
                best = w;
            }
            if (count > target) break;
        }
        return spec_with_width(c, best);
    } catch (const ModelError& e) {
        throw ConfigError(e.what());
    } catch (const GroupError& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace equiflow
