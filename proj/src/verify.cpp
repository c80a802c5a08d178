#include "equiflow/verify.hpp"

#include "equiflow/linalg.hpp"
#include "equiflow/model.hpp"
#include "equiflow/transport.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace equiflow {

void CheckReport::add(std::string name, double value, double threshold, std::string note) {
    const bool pass = std::isfinite(value) && value < threshold;
    results_.push_back({std::move(name), value, threshold, pass, std::move(note)});
}

void CheckReport::add_failure(std::string name, std::string note) {
    results_.push_back({std::move(name), std::nan(""), 0.0, false, std::move(note)});
}

void CheckReport::merge(const CheckReport& other, const std::string& prefix) {
    for (CheckResult r : other.results_) {
        r.name = prefix + r.name;
        results_.push_back(std::move(r));
    }
}

bool CheckReport::all_passed() const { return failures() == 0; }

std::size_t CheckReport::failures() const {
    std::size_t n = 0;
    for (const auto& r : results_) n += r.pass ? 0 : 1;
    return n;
}

std::string CheckReport::text() const {
    std::ostringstream out;
    out << std::setprecision(3) << std::scientific;
    for (const auto& r : results_) {
        out << (r.pass ? "PASS " : "FAIL ") << r.name << "  value=" << r.value << "  threshold=" << r.threshold;
        if (!r.note.empty()) out << "  (" << r.note << ")";
        out << '\n';
    }
    out << results_.size() - failures() << "/" << results_.size() << " checks passed\n";
    return out.str();
}

void CheckReport::write(const std::filesystem::path& dir) const {
    std::ofstream txt(dir / "report.txt");
    std::ofstream csv(dir / "report.csv");
    if (!txt || !csv) throw std::runtime_error("cannot write report into " + dir.string());
    txt << text();
    csv << std::setprecision(17) << "check,value,threshold,pass\n";
    for (const auto& r : results_) csv << r.name << ',' << r.value << ',' << r.threshold << ',' << (r.pass ? 1 : 0) << '\n';
}

void guarded(CheckReport& report, const std::string& name, const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        report.add_failure(name, e.what());
    }
}

namespace {

double round_trip_threshold(const FlowLayer& layer) { return layer.kind() == "residual" ? 1e-8 : 1e-12; }

bool tape_differentiable(const FlowComposition& flow) {
    for (std::size_t i = 0; i < flow.size(); ++i)
        if (flow.layer(i).kind() == "residual" && flow.orientation(i) == Orientation::forward) return false;
    return true;
}

}  // namespace

CheckReport verify_flow(const FlowComposition& flow, std::uint64_t seed) {
    CheckReport report;
    Rng rng(seed);
    const ParameterStore& p = flow.params();
    for (std::size_t i = 0; i < flow.size(); ++i) {
        const FlowLayer& layer = flow.layer(i);
        const std::string tag = "layer" + std::to_string(i) + "." + layer.kind() + ".";
        guarded(report, tag + "equivariance", [&] {
            report.add(tag + "equivariance", layer_equivariance_error(layer, p, 100, rng), 1e-10);
        });
        if (const auto* m = dynamic_cast<const MatrixExpLayer*>(&layer))
            report.add(tag + "commutation", m->commutation_error(p), 1e-12);
        if (const auto* r = dynamic_cast<const GResidualLayer*>(&layer)) {
            guarded(report, tag + "lipschitz_certificate", [&] {
                report.add(tag + "lipschitz_certificate", r->h_net().lipschitz_bound(p, 100), 1.0);
            });
        }
        guarded(report, tag + "round_trip", [&] {
            const Matrix x = standard_normal_matrix(layer.dim(), 1000, rng);
            const LayerOutput f = layer.forward(p, x);
            const LayerOutput b = layer.inverse(p, f.y);
            report.add(tag + "round_trip", (b.y - x).cwiseAbs().maxCoeff(), round_trip_threshold(layer));
            report.add(tag + "logdet_consistency", (f.logdet + b.logdet).cwiseAbs().maxCoeff(), 1e-8);
        });
    }
    guarded(report, "density_invariance", [&] {
        report.add("density_invariance", density_invariance_error(flow, standard_normal_matrix(flow.dim(), 100, rng)), 1e-8);
    });
    guarded(report, "flow_round_trip", [&] {
        const Matrix x = standard_normal_matrix(flow.dim(), 200, rng);
        report.add("flow_round_trip", (flow.push_forward(flow.pull_back(x).y).y - x).cwiseAbs().maxCoeff(), 1e-6);
    });
    if (tape_differentiable(flow) && flow.params().total_count() > 0) {
        guarded(report, "nll_gradient", [&] {
            const Matrix x = standard_normal_matrix(flow.dim(), 8, rng);
            auto loss = [&](ad::TapeContext& c) {
                return c.scale(c.sum(flow.log_prob_tape(c, c.constant(x))), -1.0 / 8.0);
            };
            report.add("nll_gradient", ad::finite_diff_check(loss, p, 1e-5, 128, seed), 1e-4);
        });
    }
    return report;
}

CheckReport transport_suite() {
    CheckReport report;
    guarded(report, "moser", [&] {
        const MoserSolution fine = moser_transport(cosine_moser_problem(2048, 4, 0.3));
        const MoserSolution coarse = moser_transport(cosine_moser_problem(512, 4, 0.3));
        report.add("moser.pushforward_l1", fine.diagnostics.pushforward_l1, 1e-3);
        report.add("moser.equivariance", fine.diagnostics.equivariance_error, 1e-6);
        // Refinement from 512 to 2048 must at least halve the error: check 2 / ratio < 1.
        report.add("moser.refinement", 2.0 * fine.diagnostics.pushforward_l1 / coarse.diagnostics.pushforward_l1, 1.0,
                   "2 / (error ratio)");
    });
    guarded(report, "universal", [&] {
        auto c2 = std::make_shared<const FiniteGroup>(FiniteGroup::cyclic(2));
        Representation sign(c2, {Matrix::Identity(1, 1), -Matrix::Identity(1, 1)}, RepFlavor::trivial);
        auto neg = [](const Vector& x) -> Vector { return -x; };
        auto c4 = std::make_shared<const FiniteGroup>(FiniteGroup::cyclic(4));
        const std::pair<std::string, UniversalFlowPlan> plans[] = {
            {"negation", build_universal_flow(neg, neg, 1.0, 1.0, sign)},
            {"half_turn", build_universal_flow(neg, neg, 1.0, 1.0, rotation2d_rep(c4))}};
        for (const auto& [name, plan] : plans) {
            Rng rng(17);
            report.add("universal." + name + ".target", universal_target_error(plan, 1000, rng), 1e-10);
            report.add("universal." + name + ".equivariance", universal_equivariance_error(plan, 1000, rng), 1e-12);
            double worst = 0.0;
            for (const auto& b : plan.blocks) worst = std::max(worst, empirical_lipschitz(b.residual, 2 * plan.n, 10000, rng));
            report.add("universal." + name + ".block_lipschitz", worst, 1.0);
        }
    });
    return report;
}

CheckReport builtin_suite(std::uint64_t seed) {
    CheckReport report;

    guarded(report, "groups", [&] {
        double worst = 0.0;
        for (const char* name : {"C4", "C8", "C16", "D4", "D8"}) {
            auto g = make_group(name);
            if (!g->verify_axioms()) worst = 1.0;
            const Representation rot = rotation2d_rep(g), reg = regular_rep(g);
            worst = std::max({worst, rot.homomorphism_error(), reg.homomorphism_error(), rot.orthogonality_error()});
        }
        report.add("groups.axioms_and_homomorphisms", worst, 1e-12);
    });

    auto run_model = [&](const std::string& name, const ModelSpec& spec) {
        guarded(report, name, [&] {
            FlowComposition flow = build_flow(spec);
            report.merge(verify_flow(flow, seed), name + ".");
        });
    };
    auto layer = [](std::string kind, std::string prefix, Orientation o = Orientation::forward) {
        LayerSpec l;
        l.kind = std::move(kind);
        l.prefix = std::move(prefix);
        l.orientation = o;
        l.net.channels = {4, 4};
        return l;
    };

    for (const char* g : {"C2", "C4"}) {
        ModelSpec spec{g, {"regular", 0, 2}, seed, {}};
        spec.layers.push_back(layer("coupling", "c0"));
        spec.layers.push_back(layer("coupling", "c1"));
        spec.layers.back().parity = true;
        run_model(std::string("coupling_") + g, spec);
    }
    for (const char* g : {"C4", "C8", "C16", "D4", "D8"}) {
        ModelSpec spec{g, {"rotation2d", 0, 1}, seed, {}};
        for (int b = 0; b < 2; ++b) {
            LayerSpec l = layer("residual", "r" + std::to_string(b), Orientation::inverted);
            l.net.nonlinearity = "lipswish";
            l.net.lipschitz = 0.9;
            spec.layers.push_back(l);
        }
        run_model(std::string("residual_") + g, spec);
    }
    {
        ModelSpec spec{"C2", {"regular", 0, 3}, seed, {}};
        spec.layers.push_back(layer("iaf", "a0"));
        run_model("iaf_C2_k3", spec);
    }
    {
        ModelSpec spec{"C4", {"rotation2d", 0, 1}, seed, {}};
        LayerSpec m = layer("matexp", "m0");
        m.init_scale = 0.3;
        spec.layers.push_back(m);
        run_model("matexp_C4", spec);
    }

    guarded(report, "logdet", [&] {
        auto g = make_group("C4");
        NetworkConfig cfg;
        cfg.channels = {4, 4};
        cfg.nonlinearity = "lipswish";
        cfg.lipschitz = 0.9;
        GResidualLayer r("r", rotation2d_rep(g), cfg);
        ParameterStore store;
        Rng rng(seed);
        r.init_params(store, rng);
        double worst = 0.0;
        for (int t = 0; t < 20; ++t) {
            const Vector x = standard_normal_matrix(2, 1, rng).col(0);
            worst = std::max(worst, std::abs(logdet_series(r, store, x, 30) - logdet_exact(r, store, x)));
        }
        report.add("logdet.series_vs_exact", worst, logdet_series_tail_bound(0.9, 30));
        Matrix d = Matrix::Zero(2, 2);
        d(0, 0) = 1.0;
        d(1, 1) = 3.0;
        const double est = hutchinson_trace([&](const Vector& v) -> Vector { return d * v; }, 2, 100000, rng);
        report.add("logdet.hutchinson_diag", std::abs(est - 4.0), 1e-10);
    });

    report.merge(transport_suite());
    return report;
}

}  // namespace equiflow
