#include "equiflow/cli.hpp"

#include "equiflow/config.hpp"
#include "equiflow/json_fields.hpp"
#include "equiflow/transport.hpp"
#include "equiflow/verify.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>

namespace equiflow {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// Bad flags or an invalid config; maps to exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::ofstream open_out(const fs::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << std::setprecision(17);
    return f;
}

void prepare_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config is not valid JSON: " + std::string(e.what()));
    }
}

int report_exit(const CheckReport& report, const fs::path& dir, std::ostream& out) {
    report.write(dir);
    out << report.text();
    return report.all_passed() ? kExitOk : kExitFailure;
}

// ---- train -----------------------------------------------------------------------

int cmd_train(const fs::path& config_path, const fs::path& dir, std::optional<std::uint64_t> seed, std::ostream& out) {
    RunConfig config;
    ModelSpec spec;
    try {
        config = load_run_config(config_path);
        if (seed) config.seed = *seed;
        spec = model_spec(config);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    const Representation data_rep = data_representation(config);
    prepare_dir(dir);
    open_out(dir / "config.json") << canonical_text(config);

    FlowComposition flow = build_flow(spec);
    out << "training " << config.model.type << " flow over " << spec.group << " with "
        << flow.params().total_count() << " parameters\n";
    TrainResult result;
    int code = kExitOk;
    try {
        result = train(flow, toy_dataset(config), data_rep, train_config(config), [&](const Metrics& m) {
            out << "step " << m.step << "  nll " << m.nll << "  group_nll " << m.group_nll << "  gap "
                << m.equivariance_gap << '\n';
        });
    } catch (const TrainingDiverged& e) {
        result = e.partial();
        code = kExitFailure;
        out << "diverged: " << e.what() << '\n';
    }
    write_metrics_csv(dir / "metrics.csv", result.history);
    write_timing_csv(dir / "timing.csv", result.history);
    write_loss_csv(dir / "train_loss.csv", result.train_loss);
    if (code == kExitOk) save_model(dir / "model.json", spec, flow);
    return code;
}

// ---- density-grid / sample -----------------------------------------------------------

LoadedModel load_or_fail(const fs::path& path) {
    try {
        return load_model(path);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("cannot load model: ") + e.what());
    }
}

int cmd_density_grid(const fs::path& model_path, const fs::path& dir, double bound, int resolution, std::ostream& out) {
    if (resolution < 1) throw UsageError("--resolution must be at least 1");
    if (!(bound > 0.0) || !std::isfinite(bound)) throw UsageError("--bound must be positive");
    const LoadedModel model = load_or_fail(model_path);
    if (model.flow.dim() != 2) throw UsageError("density-grid needs a two-dimensional model");
    prepare_dir(dir);

    // Row r runs top to bottom (y = bound .. -bound), column c left to right.
    auto coord = [&](int i) { return resolution == 1 ? 0.0 : -bound + 2.0 * bound * i / (resolution - 1); };
    Matrix pts(2, static_cast<Eigen::Index>(resolution) * resolution);
    for (int r = 0; r < resolution; ++r)
        for (int c = 0; c < resolution; ++c) {
            pts(0, r * resolution + c) = coord(c);
            pts(1, r * resolution + c) = coord(resolution - 1 - r);
        }
    const Matrix density = model.flow.log_prob(pts).array().exp().matrix();

    std::ofstream csv = open_out(dir / "density.csv");
    csv << "x,y,density\n";
    for (Eigen::Index i = 0; i < pts.cols(); ++i) csv << pts(0, i) << ',' << pts(1, i) << ',' << density(0, i) << '\n';

    const double peak = density.maxCoeff();
    std::ofstream img = open_out(dir / "density.pgm");
    img << "P5\n" << resolution << ' ' << resolution << "\n255\n";
    for (Eigen::Index i = 0; i < density.cols(); ++i) {
        const double v = peak > 0.0 ? density(0, i) / peak : 0.0;
        img.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)))));
    }
    out << "wrote " << resolution << "x" << resolution << " grid, peak density " << peak << '\n';
    return kExitOk;
}

int cmd_sample(const fs::path& model_path, const fs::path& dir, int n, std::uint64_t seed, std::ostream& out) {
    if (n < 1) throw UsageError("--n must be at least 1");
    const LoadedModel model = load_or_fail(model_path);
    prepare_dir(dir);
    Rng rng(seed);
    const Matrix x = model.flow.sample(n, rng);
    std::ofstream csv = open_out(dir / "samples.csv");
    for (Eigen::Index d = 0; d < x.rows(); ++d) csv << (d ? "," : "") << 'x' << d;
    csv << '\n';
    for (Eigen::Index i = 0; i < x.cols(); ++i) {
        for (Eigen::Index d = 0; d < x.rows(); ++d) csv << (d ? "," : "") << x(d, i);
        csv << '\n';
    }
    out << "wrote " << n << " samples\n";
    return kExitOk;
}

// ---- verify ---------------------------------------------------------------------------

int cmd_verify(const std::string& target, const fs::path& dir, std::uint64_t seed, std::ostream& out) {
    CheckReport report;
    if (target == "builtin-suite") {
        report = builtin_suite(seed);
    } else {
        const LoadedModel model = load_or_fail(target);
        report = verify_flow(model.flow, seed);
    }
    prepare_dir(dir);
    return report_exit(report, dir, out);
}

// ---- demos ------------------------------------------------------------------------------

template <class F>
auto schema(F&& f) {
    try {
        return f();
    } catch (const fields::SchemaError& e) {
        throw UsageError(e.what());
    }
}

int cmd_moser_demo(const std::optional<fs::path>& config_path, const fs::path& dir, std::ostream& out) {
    const json j = config_path ? read_json(*config_path) : json::object();
    int n = 0, k = 0, steps = 0;
    double amplitude = 0.0;
    schema([&] {
        fields::reject_unknown(j, {"n", "k", "amplitude", "rk4_steps"}, "");
        n = fields::optional<int>(j, "n", 2048, "");
        k = fields::optional<int>(j, "k", 4, "");
        amplitude = fields::optional<double>(j, "amplitude", 0.3, "");
        steps = fields::optional<int>(j, "rk4_steps", 200, "");
        return 0;
    });
    if (n < 16 || k < 1 || steps < 1 || !(std::abs(amplitude) < 1.0))
        throw UsageError("moser-demo needs n >= 16, k >= 1, rk4_steps >= 1 and |amplitude| < 1");
    prepare_dir(dir);

    CheckReport report;
    guarded(report, "moser", [&] {
        const MoserProblem problem = cosine_moser_problem(n, k, amplitude, steps);
        const MoserSolution sol = moser_transport(problem);
        std::ofstream csv = open_out(dir / "moser.csv");
        csv << "theta,mu,nu,eta,phi\n";
        for (Eigen::Index i = 0; i < sol.grid.size(); ++i)
            csv << sol.grid(i) << ',' << problem.mu(i) << ',' << problem.nu(i) << ',' << sol.eta(i) << ','
                << sol.phi(i) << '\n';
        report.add("pushforward_l1", sol.diagnostics.pushforward_l1, 1e-3);
        report.add("equivariance", sol.diagnostics.equivariance_error, 1e-6);
        // Central differences carry an O(h^2) error, so the bound scales with the grid.
        report.add("eta_residual", sol.diagnostics.eta_residual, 1e-5 * std::pow(2048.0 / n, 2));
        report.add("eta_invariance", sol.diagnostics.eta_invariance, 1e-10);
        if (n % 4 == 0 && (n / 4) % k == 0) {
            const MoserSolution coarse = moser_transport(cosine_moser_problem(n / 4, k, amplitude, steps));
            report.add("refinement", 2.0 * sol.diagnostics.pushforward_l1 / coarse.diagnostics.pushforward_l1, 1.0,
                       "2 / (error ratio from n/4 to n)");
        }
    });
    return report_exit(report, dir, out);
}

struct UniversalCase {
    Representation rep;
    VectorMap phi;
    double lipschitz;
};

UniversalCase universal_case(const std::string& name) {
    auto neg = [](const Vector& x) -> Vector { return -x; };
    auto id = [](const Vector& x) -> Vector { return x; };
    auto c2 = std::make_shared<const FiniteGroup>(FiniteGroup::cyclic(2));
    Representation sign(c2, {Matrix::Identity(1, 1), -Matrix::Identity(1, 1)}, RepFlavor::trivial);
    if (name == "negation") return {sign, neg, 1.0};
    if (name == "identity") return {sign, id, 1.0};
    if (name == "half-turn") return {rotation2d_rep(make_group("C4")), neg, 1.0};
    throw UsageError("unknown phi: " + name + " (expected negation, identity or half-turn)");
}

int cmd_universality_demo(const std::optional<fs::path>& config_path, const fs::path& dir, std::ostream& out) {
    const json j = config_path ? read_json(*config_path) : json::object();
    std::string phi_name;
    int samples = 0, traces = 0;
    std::uint64_t seed = 0;
    schema([&] {
        fields::reject_unknown(j, {"phi", "samples", "traces", "seed"}, "");
        phi_name = fields::optional<std::string>(j, "phi", "negation", "");
        samples = fields::optional<int>(j, "samples", 1000, "");
        traces = fields::optional<int>(j, "traces", 8, "");
        seed = fields::optional<std::uint64_t>(j, "seed", 0, "");
        return 0;
    });
    if (samples < 1 || traces < 0) throw UsageError("samples must be positive and traces non-negative");
    const UniversalCase uc = universal_case(phi_name);
    prepare_dir(dir);

    CheckReport report;
    guarded(report, "universal", [&] {
        const UniversalFlowPlan plan = build_universal_flow(uc.phi, uc.phi, uc.lipschitz, uc.lipschitz, uc.rep, seed + 7);
        Rng rng(seed);
        report.add("target", universal_target_error(plan, samples, rng), 1e-10);
        report.add("equivariance", universal_equivariance_error(plan, samples, rng), 1e-12);
        double worst = 0.0;
        for (const auto& b : plan.blocks) worst = std::max(worst, empirical_lipschitz(b.residual, 2 * plan.n, 10000, rng));
        report.add("block_lipschitz", worst, 1.0);

        std::ofstream csv = open_out(dir / "trace.csv");
        csv << "sample,block,name,residual_norm";
        for (int d = 0; d < 2 * plan.n; ++d) csv << ",s" << d;
        csv << '\n';
        // Trace inputs lie on the lattice T 2^-10 Z, where every step of the construction
        // for these maps is exact in binary floating point, so the pad must return to 0 bitwise.
        // Off the lattice it returns to 0 up to roundoff, which the target check covers.
        std::uniform_int_distribution<int> lattice(-1024 * 4 / plan.T, 1024 * 4 / plan.T);
        const double spacing = plan.T * std::ldexp(1.0, -10);
        double final_pad = 0.0;
        for (int s = 0; s < traces; ++s) {
            Vector xy = Vector::Zero(2 * plan.n);
            for (int d = 0; d < plan.n; ++d) xy(d) = spacing * lattice(rng);
            const std::vector<Vector> states = plan.trace(xy);
            for (std::size_t b = 0; b < states.size(); ++b) {
                const double moved = b == 0 ? 0.0 : (states[b] - states[b - 1]).norm();
                csv << s << ',' << b << ',' << (b == 0 ? std::string("input") : plan.blocks[b - 1].name) << ','
                    << moved;
                for (Eigen::Index d = 0; d < states[b].size(); ++d) csv << ',' << states[b](d);
                csv << '\n';
            }
            final_pad = std::max(final_pad, states.back().tail(plan.n).cwiseAbs().maxCoeff());
        }
        // The pad must come back exactly to zero, not just to roundoff.
        report.add("final_pad", final_pad, std::numeric_limits<double>::denorm_min(), "exact zero required");
        out << "T = " << plan.T << ", corrections = " << plan.corrections << ", blocks = " << plan.blocks.size() << '\n';
    });
    return report_exit(report, dir, out);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Equivariant finite normalizing flows", "equiflow"};
    app.require_subcommand(1);

    std::string config, out_dir, model, target;
    std::uint64_t seed = 0;
    double bound = 4.0;
    int resolution = 101, n = 1000;

    auto* train_cmd = app.add_subcommand("train", "Train a flow from a run config");
    train_cmd->add_option("--config", config, "Run config JSON")->required();
    train_cmd->add_option("--out", out_dir, "Output directory")->required();
    auto* train_seed = train_cmd->add_option("--seed", seed, "Override the config seed");

    auto* grid_cmd = app.add_subcommand("density-grid", "Evaluate a 2D model's density on a square grid");
    grid_cmd->add_option("--model", model, "Model JSON")->required();
    grid_cmd->add_option("--out", out_dir, "Output directory")->required();
    grid_cmd->add_option("--bound", bound, "Half-width of the square");
    grid_cmd->add_option("--resolution", resolution, "Points per side");

    auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a model");
    sample_cmd->add_option("--model", model, "Model JSON")->required();
    sample_cmd->add_option("--out", out_dir, "Output directory")->required();
    sample_cmd->add_option("--n", n, "Number of samples");
    sample_cmd->add_option("--seed", seed, "Sampling seed");

    auto* verify_cmd = app.add_subcommand("verify", "Run the property suite on a model or the builtin suite");
    verify_cmd->add_option("--model", target, "Model JSON or builtin-suite")->required();
    verify_cmd->add_option("--out", out_dir, "Output directory")->required();
    verify_cmd->add_option("--seed", seed, "Seed for random test inputs");

    auto* moser_cmd = app.add_subcommand("moser-demo", "Equivariant Moser transport on the circle");
    auto* moser_config = moser_cmd->add_option("--config", config, "Demo config JSON");
    moser_cmd->add_option("--out", out_dir, "Output directory")->required();

    auto* univ_cmd = app.add_subcommand("universality-demo", "Padded universal flow construction");
    auto* univ_config = univ_cmd->add_option("--config", config, "Demo config JSON");
    univ_cmd->add_option("--out", out_dir, "Output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    }

    auto optional_path = [&](CLI::Option* opt) -> std::optional<fs::path> {
        if (opt->count() == 0) return std::nullopt;
        return fs::path(config);
    };
    try {
        if (*train_cmd)
            return cmd_train(config, out_dir, train_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt,
                             out);
        if (*grid_cmd) return cmd_density_grid(model, out_dir, bound, resolution, out);
        if (*sample_cmd) return cmd_sample(model, out_dir, n, seed, out);
        if (*verify_cmd) return cmd_verify(target, out_dir, seed, out);
        if (*moser_cmd) return cmd_moser_demo(optional_path(moser_config), out_dir, out);
        if (*univ_cmd) return cmd_universality_demo(optional_path(univ_config), out_dir, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace equiflow
