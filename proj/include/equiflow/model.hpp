#pragma once

#include "equiflow/flows.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace equiflow {

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Representation named by flavor: "rotation2d", "regular", or "trivial" (with dim).
/// blocks > 1 repeats a permutation rep diagonally.
struct RepSpec {
    std::string kind = "rotation2d";
    int dim = 0;
    int blocks = 1;
};

struct LayerSpec {
    std::string kind;  // residual | coupling | iaf | matexp
    std::string prefix;
    Orientation orientation = Orientation::forward;
    NetworkConfig net;
    bool parity = false;           // coupling
    LogDetConfig logdet;           // residual
    FixedPointConfig fixed_point;  // residual
    double init_scale = 0.1;       // matexp
};

/// Architecture description from which a FlowComposition is rebuilt.
struct ModelSpec {
    std::string group = "C1";
    RepSpec rep;
    std::uint64_t seed = 0;
    std::vector<LayerSpec> layers;
};

std::shared_ptr<const FiniteGroup> make_group(const std::string& name, int translation_size = 0);
Representation make_rep(std::shared_ptr<const FiniteGroup> group, const RepSpec& spec);
/// The permutation rep a multi-block rep repeats (the rep itself when blocks == 1).
Representation make_base_rep(std::shared_ptr<const FiniteGroup> group, const RepSpec& spec);

/// Builds the layers; parameters are initialized from spec.seed when `init` is set.
FlowComposition build_flow(const ModelSpec& spec, bool init = true);

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

nlohmann::json params_to_json(const ParameterStore& store);
ParameterStore params_from_json(const nlohmann::json& j, std::uint64_t seed);

struct LoadedModel {
    ModelSpec spec;
    FlowComposition flow;
};

/// Architecture plus parameter arrays as full-precision decimals (exact round trip).
void save_model(const std::filesystem::path& path, const ModelSpec& spec, const FlowComposition& flow);
LoadedModel load_model(const std::filesystem::path& path);

std::string to_string(Orientation o);
Orientation orientation_from_string(const std::string& s);
LogDetConfig::Kind logdet_kind_from_string(const std::string& s);

}  // namespace equiflow
