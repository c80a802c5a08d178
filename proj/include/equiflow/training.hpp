#pragma once

#include "equiflow/flows.hpp"
#include "equiflow/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace equiflow {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DatasetKind { eight_gaussians, concentric_rings, permutation_sets };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& name);

/// Eight isotropic Gaussians (sigma 0.2) centred on the radius-2 circle at angles 2 pi j / 8.
Matrix sample_eight_gaussians(int n, Rng& rng);
/// Rings of radius 1, 2, 3, 4 with Gaussian radial noise (sigma 0.1) and uniform angle.
Matrix sample_concentric_rings(int n, Rng& rng);
/// Vectors in R^{2d} whose law is invariant under the simultaneous cyclic shift of both d-blocks.
Matrix sample_permutation_sets(int n, int d, Rng& rng);

struct ToyDataset {
    DatasetKind kind = DatasetKind::eight_gaussians;
    /// Block length for permutation sets; ignored otherwise.
    int block = 1;

    int dim() const { return kind == DatasetKind::permutation_sets ? 2 * block : 2; }
    Matrix sample(int n, Rng& rng) const;
};

/// Mean of -log p over the columns of `batch`.  Throws TrainingError naming the first
/// sample whose log-density is not finite.
double nll_loss(const FlowComposition& flow, const Matrix& batch);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    ParameterStore m;
    ParameterStore v;
    std::uint64_t t = 0;
};

/// Bias-corrected Adam update in place.  Throws TrainingError on a non-finite gradient.
void adam_step(ParameterStore& params, const ParameterStore& grads, AdamState& state, const AdamConfig& config);

struct TrainConfig {
    int steps = 20000;
    int batch_size = 256;
    AdamConfig adam;
    int eval_interval = 500;
    int train_size = 20000;
    int test_size = 2000;
    /// Apply an independent uniformly random group element to each sample as it is drawn.
    bool augment = false;
    std::uint64_t seed = 0;
    double divergence_threshold = 1e6;
};

struct Metrics {
    int step = 0;
    double nll = 0.0;
    double group_nll = 0.0;
    double equivariance_gap = 0.0;
    double seconds = 0.0;
};

/// nll on x, mean nll over the orbit {R(g) x}, and max_g |nll(R(g) x) - nll(x)|.
Metrics evaluate_metrics(const FlowComposition& flow, const Matrix& x, const Representation& data_rep, int step);

/// max over g and columns of |log p(R(g) x) - log p(x)|, for an arbitrary data action.
double pointwise_invariance_gap(const FlowComposition& flow, const Matrix& x, const Representation& data_rep);

struct TrainResult {
    std::vector<Metrics> history;
    /// Training minibatch NLL per step (index 0 is step 1).
    std::vector<double> train_loss;
    Matrix test_set;
};

class TrainingDiverged : public TrainingError {
public:
    TrainingDiverged(const std::string& what, TrainResult partial)
        : TrainingError(what), partial_(std::move(partial)) {}
    const TrainResult& partial() const { return partial_; }

private:
    TrainResult partial_;
};

/// Held-out and training samples drawn deterministically from the config seed.
Matrix make_test_set(const ToyDataset& data, const TrainConfig& config);
Matrix make_train_set(const ToyDataset& data, const TrainConfig& config);

/// Adam on the mean NLL with constraint projection after every step.  `data_rep` is the
/// symmetry of the data, used for augmentation and for the group metrics.
TrainResult train(FlowComposition& flow, const ToyDataset& data, const Representation& data_rep,
                  const TrainConfig& config, const std::function<void(const Metrics&)>& on_eval = {});

void write_metrics_csv(const std::filesystem::path& path, const std::vector<Metrics>& history);
void write_timing_csv(const std::filesystem::path& path, const std::vector<Metrics>& history);
void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& loss);

/// Residual-flow architecture on R^n: `blocks` G-residual blocks, channels [width] * (1 + convs).
struct ResidualArchitecture {
    int blocks = 5;
    int width = 8;
    int convs = 1;
    std::string nonlinearity = "lipswish";
    double lipschitz = 0.9;
    LogDetConfig logdet;
};

ModelSpec residual_model(const std::string& group, const RepSpec& rep, const ResidualArchitecture& arch,
                         std::uint64_t seed);
std::size_t parameter_count(const ModelSpec& spec);

/// Width whose parameter count is closest to `target` (ties go to the smaller width).
int auto_size_width(const std::string& group, const RepSpec& rep, ResidualArchitecture arch, std::size_t target,
                    int max_width = 64);

struct MonotoneReport {
    bool ok = true;
    /// Largest increase between consecutive window means (negative when strictly decreasing).
    double worst_increase = 0.0;
    /// Tolerance applied to that increase at the worst window.
    double tolerance = 0.0;
    int windows = 0;
};

/**
 * Non-overlapping window means of the training loss over the final (1 - start_fraction)
 * of training must not increase by more than three standard errors of the difference of
 * two window means.  Each window's standard error comes from kMonotoneBatches batch
 * means, which accounts for correlation between consecutive steps.
 */
inline constexpr int kMonotoneBatches = 10;
MonotoneReport moving_average_check(const std::vector<double>& loss, int window = 500, double start_fraction = 0.25);

}  // namespace equiflow
