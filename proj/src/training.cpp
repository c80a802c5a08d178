#include "equiflow/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

namespace equiflow {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void require_positive(int n, const char* what) {
    if (n < 1) throw TrainingError(std::string(what) + " must be positive");
}

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw TrainingError("cannot write " + path.string());
    out << std::setprecision(17);
    return out;
}

}  // namespace

std::string to_string(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::eight_gaussians: return "eight-gaussians";
        case DatasetKind::concentric_rings: return "concentric-rings";
        case DatasetKind::permutation_sets: return "permutation-sets";
    }
    return "unknown";
}

DatasetKind dataset_kind_from_string(const std::string& name) {
    if (name == "eight-gaussians") return DatasetKind::eight_gaussians;
    if (name == "concentric-rings") return DatasetKind::concentric_rings;
    if (name == "permutation-sets") return DatasetKind::permutation_sets;
    throw TrainingError("unknown dataset: " + name);
}

Matrix sample_eight_gaussians(int n, Rng& rng) {
    require_positive(n, "sample count");
    std::uniform_int_distribution<int> mode(0, 7);
    std::normal_distribution<double> noise(0.0, 0.2);
    Matrix x(2, n);
    for (int j = 0; j < n; ++j) {
        const double a = kTwoPi * mode(rng) / 8.0;
        x(0, j) = 2.0 * std::cos(a) + noise(rng);
        x(1, j) = 2.0 * std::sin(a) + noise(rng);
    }
    return x;
}

Matrix sample_concentric_rings(int n, Rng& rng) {
    require_positive(n, "sample count");
    std::uniform_int_distribution<int> ring(1, 4);
    std::uniform_real_distribution<double> angle(0.0, kTwoPi);
    std::normal_distribution<double> noise(0.0, 0.1);
    Matrix x(2, n);
    for (int j = 0; j < n; ++j) {
        const double r = ring(rng) + noise(rng);
        const double a = angle(rng);
        x(0, j) = r * std::cos(a);
        x(1, j) = r * std::sin(a);
    }
    return x;
}

Matrix sample_permutation_sets(int n, int d, Rng& rng) {
    require_positive(n, "sample count");
    require_positive(d, "block length");
    // Two template patterns, each randomly rotated as a pair of d-blocks, plus noise.
    std::uniform_int_distribution<int> shift(0, d - 1);
    std::bernoulli_distribution which(0.5);
    std::normal_distribution<double> noise(0.0, 0.3);
    Matrix x(2 * d, n);
    for (int j = 0; j < n; ++j) {
        const int pattern = which(rng) ? 1 : 0;
        const int s = shift(rng);
        for (int i = 0; i < d; ++i) {
            const int src = (i + d - s) % d;
            const double a = kTwoPi * src / d;
            x(i, j) = (pattern == 0 ? 1.5 * std::cos(a) : -1.0 + (src == 0 ? 2.5 : 0.0)) + noise(rng);
            x(d + i, j) = (pattern == 0 ? 1.5 * std::sin(a) : 0.5 * src / std::max(1, d - 1)) + noise(rng);
        }
    }
    return x;
}

Matrix ToyDataset::sample(int n, Rng& rng) const {
    switch (kind) {
        case DatasetKind::eight_gaussians: return sample_eight_gaussians(n, rng);
        case DatasetKind::concentric_rings: return sample_concentric_rings(n, rng);
        case DatasetKind::permutation_sets: return sample_permutation_sets(n, block, rng);
    }
    throw TrainingError("unknown dataset");
}

double nll_loss(const FlowComposition& flow, const Matrix& batch) {
    if (batch.cols() == 0) throw TrainingError("empty batch");
    const Matrix lp = flow.log_prob(batch);
    for (Eigen::Index j = 0; j < lp.cols(); ++j)
        if (!std::isfinite(lp(0, j))) throw TrainingError("non-finite log-density at sample " + std::to_string(j));
    return -lp.mean();
}

void adam_step(ParameterStore& params, const ParameterStore& grads, AdamState& state, const AdamConfig& config) {
    if (state.t == 0 && state.m.names().empty() && !params.names().empty()) {
        state.m = params.zeros_like();
        state.v = params.zeros_like();
    }
    if (grads.names() != params.names()) throw TrainingError("gradient and parameter names differ");
    for (const std::string& n : params.names())
        if (!grads.get(n).allFinite()) throw TrainingError("non-finite gradient for " + n);
    ++state.t;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
    for (const std::string& n : params.names()) {
        const Matrix& g = grads.get(n);
        Matrix& m = state.m.get(n);
        Matrix& v = state.v.get(n);
        Matrix& p = params.get(n);
        if (g.rows() != p.rows() || g.cols() != p.cols()) throw TrainingError("gradient shape mismatch for " + n);
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
        p.array() -= config.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config.eps);
    }
}

Metrics evaluate_metrics(const FlowComposition& flow, const Matrix& x, const Representation& data_rep, int step) {
    Metrics m;
    m.step = step;
    m.nll = nll_loss(flow, x);
    double total = 0.0;
    for (const Matrix& r : data_rep.matrices()) {
        const double g_nll = nll_loss(flow, r * x);
        total += g_nll;
        m.equivariance_gap = std::max(m.equivariance_gap, std::abs(g_nll - m.nll));
    }
    m.group_nll = total / static_cast<double>(data_rep.matrices().size());
    return m;
}

double pointwise_invariance_gap(const FlowComposition& flow, const Matrix& x, const Representation& data_rep) {
    const Matrix lp = flow.log_prob(x);
    double gap = 0.0;
    for (const Matrix& r : data_rep.matrices()) gap = std::max(gap, (flow.log_prob(r * x) - lp).cwiseAbs().maxCoeff());
    return gap;
}

Matrix make_test_set(const ToyDataset& data, const TrainConfig& config) {
    Rng rng(config.seed ^ 0x7e57'5e70'0000'0001ULL);
    return data.sample(config.test_size, rng);
}

Matrix make_train_set(const ToyDataset& data, const TrainConfig& config) {
    Rng rng(config.seed ^ 0x7a1b'0000'0000'0002ULL);
    return data.sample(config.train_size, rng);
}

TrainResult train(FlowComposition& flow, const ToyDataset& data, const Representation& data_rep,
                  const TrainConfig& config, const std::function<void(const Metrics&)>& on_eval) {
    if (config.steps < 0) throw TrainingError("steps must be non-negative");
    require_positive(config.batch_size, "batch size");
    require_positive(config.eval_interval, "eval interval");
    require_positive(config.train_size, "training set size");
    require_positive(config.test_size, "test set size");
    if (data.dim() != flow.dim() || data_rep.dim() != flow.dim())
        throw TrainingError("dataset, symmetry and flow dimensions differ");

    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    auto seconds = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };

    TrainResult result;
    result.test_set = make_test_set(data, config);
    const Matrix train_set = make_train_set(data, config);
    Rng rng(config.seed);
    std::uniform_int_distribution<int> pick(0, config.train_size - 1);
    std::uniform_int_distribution<int> element(0, data_rep.group().order() - 1);

    auto record = [&](int step) {
        Metrics m = evaluate_metrics(flow, result.test_set, data_rep, step);
        m.seconds = seconds();
        result.history.push_back(m);
        if (on_eval) on_eval(m);
    };
    record(0);

    std::vector<GResidualLayer*> residuals;
    for (std::size_t i = 0; i < flow.size(); ++i)
        if (auto* r = dynamic_cast<GResidualLayer*>(&flow.layer(i))) residuals.push_back(r);

    AdamState adam;
    Matrix batch(flow.dim(), config.batch_size);
    for (int step = 1; step <= config.steps; ++step) {
        for (int j = 0; j < config.batch_size; ++j) {
            const int idx = pick(rng);
            if (config.augment) batch.col(j) = data_rep.matrix(element(rng)) * train_set.col(idx);
            else batch.col(j) = train_set.col(idx);
        }
        for (GResidualLayer* r : residuals) r->set_probe_step(static_cast<std::uint64_t>(step));
        const double inv_b = 1.0 / config.batch_size;
        auto loss = [&](ad::TapeContext& c) {
            return c.scale(c.sum(flow.log_prob_tape(c, c.constant(batch))), -inv_b);
        };
        ad::ValueAndGrad vg = ad::value_and_grad(loss, flow.params());
        result.train_loss.push_back(vg.value);
        if (!std::isfinite(vg.value) || vg.value > config.divergence_threshold) {
            try {
                record(step);
            } catch (const TrainingError&) {
                // The held-out NLL may itself be non-finite; the partial history is still returned.
            }
            throw TrainingDiverged("training diverged at step " + std::to_string(step) + " (loss " +
                                       std::to_string(vg.value) + ")",
                                   std::move(result));
        }
        flow.constrain_gradient(vg.grad);
        adam_step(flow.params(), vg.grad, adam, config.adam);
        flow.project_params();
        if (step % config.eval_interval == 0 || step == config.steps) record(step);
    }
    return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<Metrics>& history) {
    auto out = open_csv(path);
    out << "step,nll,group_nll,equivariance_gap\n";
    for (const Metrics& m : history) out << m.step << ',' << m.nll << ',' << m.group_nll << ',' << m.equivariance_gap << '\n';
}

void write_timing_csv(const std::filesystem::path& path, const std::vector<Metrics>& history) {
    auto out = open_csv(path);
    out << "step,seconds\n";
    for (const Metrics& m : history) out << m.step << ',' << m.seconds << '\n';
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& loss) {
    auto out = open_csv(path);
    out << "step,train_nll\n";
    for (std::size_t i = 0; i < loss.size(); ++i) out << i + 1 << ',' << loss[i] << '\n';
}

ModelSpec residual_model(const std::string& group, const RepSpec& rep, const ResidualArchitecture& arch,
                         std::uint64_t seed) {
    if (arch.blocks < 1 || arch.width < 1 || arch.convs < 0) throw TrainingError("invalid residual architecture");
    ModelSpec spec;
    spec.group = group;
    spec.rep = rep;
    spec.seed = seed;
    for (int b = 0; b < arch.blocks; ++b) {
        LayerSpec l;
        l.kind = "residual";
        l.prefix = "block" + std::to_string(b);
        // Density evaluation uses the explicit x + h(x); sampling uses the fixed-point inverse.
        l.orientation = Orientation::inverted;
        l.net.channels.assign(static_cast<std::size_t>(arch.convs + 1), arch.width);
        l.net.nonlinearity = arch.nonlinearity;
        l.net.lipschitz = arch.lipschitz;
        l.logdet = arch.logdet;
        spec.layers.push_back(std::move(l));
    }
    return spec;
}

std::size_t parameter_count(const ModelSpec& spec) { return build_flow(spec, true).params().total_count(); }

int auto_size_width(const std::string& group, const RepSpec& rep, ResidualArchitecture arch, std::size_t target,
                    int max_width) {
    int best = 1;
    std::size_t best_gap = static_cast<std::size_t>(-1);
    for (int w = 1; w <= max_width; ++w) {
        arch.width = w;
        const std::size_t count = parameter_count(residual_model(group, rep, arch, 0));
        const std::size_t gap = count > target ? count - target : target - count;
        if (gap < best_gap) {
            best_gap = gap;
            best = w;
        }
        if (count > target) break;
    }
    return best;
}

MonotoneReport moving_average_check(const std::vector<double>& loss, int window, double start_fraction) {
    if (window < 2 * kMonotoneBatches)
        throw TrainingError("window must be at least " + std::to_string(2 * kMonotoneBatches));
    MonotoneReport rep;
    rep.worst_increase = -std::numeric_limits<double>::infinity();
    const auto begin = static_cast<std::size_t>(std::ceil(start_fraction * static_cast<double>(loss.size())));
    std::vector<double> means, ses;
    for (std::size_t s = begin; s + static_cast<std::size_t>(window) <= loss.size(); s += static_cast<std::size_t>(window)) {
        double mean = 0.0;
        for (int i = 0; i < window; ++i) mean += loss[s + static_cast<std::size_t>(i)];
        mean /= window;
        // Batch means: consecutive losses are correlated through the slowly moving parameters.
        const int len = window / kMonotoneBatches;
        double var = 0.0;
        for (int b = 0; b < kMonotoneBatches; ++b) {
            double bm = 0.0;
            for (int i = 0; i < len; ++i) bm += loss[s + static_cast<std::size_t>(b * len + i)];
            var += std::pow(bm / len - mean, 2);
        }
        var /= kMonotoneBatches - 1;
        means.push_back(mean);
        ses.push_back(std::sqrt(var / kMonotoneBatches));
    }
    rep.windows = static_cast<int>(means.size());
    double worst_excess = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < means.size(); ++i) {
        const double inc = means[i] - means[i - 1];
        const double tol = 3.0 * std::hypot(ses[i], ses[i - 1]);
        if (inc - tol > worst_excess) {
            worst_excess = inc - tol;
            rep.worst_increase = inc;
            rep.tolerance = tol;
        }
        if (inc > tol) rep.ok = false;
    }
    if (means.size() < 2) rep.worst_increase = 0.0;
    return rep;
}

}  // namespace equiflow
