#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "equiflow/model.hpp"

#include <filesystem>
#include <cstring>
#include <fstream>

using namespace equiflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "equiflow_test_model";
    fs::create_directories(dir);
    return dir / name;
}

LayerSpec layer(std::string kind, std::string prefix, Orientation o = Orientation::forward) {
    LayerSpec l;
    l.kind = std::move(kind);
    l.prefix = std::move(prefix);
    l.orientation = o;
    l.net.channels = {4, 4};
    return l;
}

// Nudges every parameter so the reload test does not only see initializer values.
void jitter(FlowComposition& flow) {
    Rng rng(99);
    std::normal_distribution<double> n(0.0, 1e-3);
    for (const auto& name : flow.params().names())
        for (double& v : flow.params().get(name).reshaped()) v += n(rng);
    flow.project_params();
}

}  // namespace

TEST_CASE("save and load reproduce log_prob bit for bit") {
    ModelSpec residual{"C8", {"rotation2d", 0, 1}, 3, {}};
    for (int b = 0; b < 2; ++b) {
        LayerSpec l = layer("residual", "r" + std::to_string(b), Orientation::inverted);
        l.net.lipschitz = 0.9;
        l.net.nonlinearity = "lipswish";
        residual.layers.push_back(l);
    }
    ModelSpec coupling{"C4", {"regular", 0, 2}, 4, {layer("coupling", "c0"), layer("coupling", "c1")}};
    coupling.layers[1].parity = true;
    ModelSpec iaf{"C2", {"regular", 0, 3}, 5, {layer("iaf", "a0")}};
    ModelSpec matexp{"D4", {"rotation2d", 0, 1}, 6, {layer("matexp", "m0")}};

    for (const ModelSpec& spec : {residual, coupling, iaf, matexp}) {
        FlowComposition flow = build_flow(spec);
        jitter(flow);
        const fs::path path = scratch("model_" + spec.layers[0].kind + ".json");
        save_model(path, spec, flow);
        const LoadedModel loaded = load_model(path);
        CHECK(loaded.flow.params().flatten() == flow.params().flatten());
        Rng rng(1);
        const Matrix x = standard_normal_matrix(flow.dim(), 64, rng);
        const Matrix a = flow.log_prob(x), b = loaded.flow.log_prob(x);
        CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
        CHECK(to_json(loaded.spec) == to_json(spec));
    }
}

TEST_CASE("model spec parsing rejects bad documents") {
    nlohmann::json j = to_json(ModelSpec{"C4", {"rotation2d", 0, 1}, 0, {}});
    CHECK(model_spec_from_json(j).group == "C4");

    nlohmann::json missing = j;
    missing.erase("group");
    CHECK_THROWS_WITH_AS(model_spec_from_json(missing), "missing field: group", ModelError);

    nlohmann::json extra = j;
    extra["colour"] = "blue";
    CHECK_THROWS_AS(model_spec_from_json(extra), ModelError);

    nlohmann::json bad_layer = j;
    bad_layer["layers"] = nlohmann::json::array({{{"kind", "residual"}, {"prefix", "r"}, {"orientation", "sideways"}}});
    CHECK_THROWS_AS(model_spec_from_json(bad_layer), ModelError);
}

TEST_CASE("load rejects parameters that do not fit the architecture") {
    ModelSpec spec{"C4", {"rotation2d", 0, 1}, 0, {layer("matexp", "m0")}};
    FlowComposition flow = build_flow(spec);
    const fs::path path = scratch("shape.json");
    save_model(path, spec, flow);

    nlohmann::json j;
    std::ifstream(path) >> j;
    j["params"][0]["rows"] = 3;
    std::ofstream(path) << j.dump();
    CHECK_THROWS_AS(load_model(path), ModelError);

    std::ofstream(path) << "{ not json";
    CHECK_THROWS_AS(load_model(path), ModelError);
    CHECK_THROWS_AS(load_model(scratch("does_not_exist.json")), ModelError);
}

TEST_CASE("an empty flow is the standard normal") {
    ModelSpec spec{"C1", {"trivial", 2, 1}, 0, {}};
    FlowComposition flow = build_flow(spec);
    CHECK(flow.params().total_count() == 0);
    const Matrix lp = flow.log_prob(Matrix::Zero(2, 1));
    CHECK(lp(0, 0) == doctest::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-15));
}

TEST_CASE("representation specs") {
    auto g = make_group("C3");
    CHECK(make_rep(g, {"regular", 0, 1}).dim() == 3);
    CHECK(make_rep(g, {"regular", 0, 2}).dim() == 6);
    CHECK(make_rep(g, {"trivial", 4, 1}).dim() == 4);
    CHECK_THROWS_AS(make_rep(g, {"spinor", 0, 1}), ModelError);
    CHECK(make_group("T", 5)->order() == 5);
}
