#pragma once

#include "equiflow/model.hpp"
#include "equiflow/training.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

namespace equiflow {

/// Schema or semantic error in a run config; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    std::string kind = "eight-gaussians";
    int train_size = 20000;
    int test_size = 2000;
    int block = 1;
};

struct ModelConfig {
    std::string type = "residual";  // residual | coupling | iaf
    bool equivariant = true;
    int blocks = 5;
    int width = 7;
    /// When set, the width is chosen so the parameter count is closest to the budget.
    std::optional<int> param_budget;
    int convs = 1;
    std::string nonlinearity = "lipswish";
    double lipschitz = 0.9;
    std::string logdet = "exact";
    int logdet_terms = 30;
    int logdet_probes = 1;
    /// Prepend a matrix-exponential layer.
    bool matexp = false;
};

struct TrainSection {
    int steps = 20000;
    int batch_size = 256;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int eval_interval = 500;
    bool augment = false;
};

/// Config of the train subcommand.  `group` is the data symmetry; a non-equivariant
/// model is built over the trivial group but still evaluated against `group`.
struct RunConfig {
    std::string group;
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    ModelConfig model;
    TrainSection train;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical text: every field spelled out, two-space indent, trailing newline.
std::string canonical_text(const RunConfig& config);

/// Symmetry group of the data and its action on the data space.
std::shared_ptr<const FiniteGroup> data_group(const RunConfig& config);
Representation data_representation(const RunConfig& config);
ToyDataset toy_dataset(const RunConfig& config);
TrainConfig train_config(const RunConfig& config);

/// Architecture for the run; resolves param_budget into a width.
ModelSpec model_spec(const RunConfig& config);

}  // namespace equiflow
