#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "equiflow/cli.hpp"
#include "equiflow/config.hpp"

#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace equiflow;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "equiflow_test_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kMinimal = R"({
  "group": "C8",
  "seed": 3,
  "dataset": {"kind": "eight-gaussians", "train_size": 300, "test_size": 100},
  "model": {"type": "residual", "blocks": 2, "width": 3},
  "train": {"steps": 20, "batch_size": 32, "eval_interval": 10}
})";

std::vector<std::vector<double>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(row);
    }
    return rows;
}

fs::path save_spec(const fs::path& dir, const ModelSpec& spec) {
    const fs::path path = dir / "model.json";
    save_model(path, spec, build_flow(spec));
    return path;
}

}  // namespace

TEST_CASE("train writes its artifacts and reruns byte-identically") {
    const fs::path dir = fresh_dir("train");
    write(dir / "config.in.json", kMinimal);
    const Run a = cli({"train", "--config", (dir / "config.in.json").string(), "--out", (dir / "a").string()});
    REQUIRE_MESSAGE(a.code == 0, a.err);
    for (const char* f : {"config.json", "metrics.csv", "timing.csv", "train_loss.csv", "model.json"})
        CHECK_MESSAGE(fs::exists(dir / "a" / f), f);
    const Run b = cli({"train", "--config", (dir / "config.in.json").string(), "--out", (dir / "b").string()});
    REQUIRE(b.code == 0);
    CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
    CHECK(slurp(dir / "a" / "train_loss.csv") == slurp(dir / "b" / "train_loss.csv"));
    CHECK(read_csv(dir / "a" / "metrics.csv").size() == 3);

    // The echoed config is canonical: reading and re-emitting it changes nothing.
    const std::string echoed = slurp(dir / "a" / "config.json");
    CHECK(canonical_text(load_run_config(dir / "a" / "config.json")) == echoed);

    // --seed overrides the config and is echoed.
    const Run c = cli({"train", "--config", (dir / "config.in.json").string(), "--out", (dir / "c").string(),
                       "--seed", "4"});
    REQUIRE(c.code == 0);
    CHECK(load_run_config(dir / "c" / "config.json").seed == 4);
    CHECK(slurp(dir / "a" / "metrics.csv") != slurp(dir / "c" / "metrics.csv"));
}

TEST_CASE("train config errors exit 2") {
    const fs::path dir = fresh_dir("train_errors");
    auto run_with = [&](const std::string& text) {
        write(dir / "cfg.json", text);
        return cli({"train", "--config", (dir / "cfg.json").string(), "--out", (dir / "out").string()});
    };
    const Run missing = run_with(R"({"seed": 1})");
    CHECK(missing.code == 2);
    CHECK(missing.err.find("missing field: group") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out"));

    CHECK(run_with(R"({"group": "C8", "learning_rate": 1})").code == 2);
    CHECK(run_with(R"({"group": "C8", "model": {"width": "wide"}})").code == 2);
    CHECK(run_with(R"({"group": "C8", "dataset": {"kind": "spirals"}})").code == 2);
    CHECK(run_with(R"({"group": "Q8"})").code == 2);
    CHECK(run_with(R"({"group": "C8", "model": {"type": "coupling"}})").code == 2);
    CHECK(run_with("{ nope").code == 2);
    CHECK(cli({"train", "--config", (dir / "absent.json").string(), "--out", (dir / "out").string()}).code == 2);
}

TEST_CASE("run config schema") {
    const RunConfig c = run_config_from_json(nlohmann::json::parse(kMinimal));
    CHECK(c.group == "C8");
    CHECK(c.model.width == 3);
    CHECK(c.train.lr == 1e-3);
    CHECK(run_config_from_json(to_json(c)).seed == c.seed);
    CHECK(canonical_text(run_config_from_json(to_json(c))) == canonical_text(c));

    // Baseline arm: same data symmetry, trivial-group model, parameter budget resolved to a width.
    RunConfig base = c;
    base.model.equivariant = false;
    base.model.param_budget = parameter_count(model_spec(c));
    const ModelSpec spec = model_spec(base);
    CHECK(spec.group == "C1");
    CHECK(spec.rep.kind == "trivial");
    const double eq = static_cast<double>(parameter_count(model_spec(c)));
    CHECK(std::abs(static_cast<double>(parameter_count(spec)) - eq) <= 0.05 * eq);

    // Set data uses the translation group on the block index.
    RunConfig sets = c;
    sets.group = "T";
    sets.dataset.kind = "permutation-sets";
    sets.dataset.block = 3;
    sets.model.type = "coupling";
    sets.model.blocks = 2;
    CHECK(data_representation(sets).dim() == 6);
    CHECK(build_flow(model_spec(sets)).dim() == 6);
}

TEST_CASE("density grid") {
    const fs::path dir = fresh_dir("grid");

    SUBCASE("empty flow is the standard normal") {
        const fs::path model = save_spec(dir, {"C1", {"trivial", 2, 1}, 0, {}});
        const Run r = cli({"density-grid", "--model", model.string(), "--out", (dir / "g").string(), "--bound", "2",
                           "--resolution", "5"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        const auto rows = read_csv(dir / "g" / "density.csv");
        REQUIRE(rows.size() == 25);
        CHECK(rows[12][0] == 0.0);
        CHECK(rows[12][1] == 0.0);
        CHECK(rows[12][2] == doctest::Approx(1.0 / (2.0 * std::numbers::pi)).epsilon(1e-14));
        // Radial symmetry: the four edge midpoints share one value.
        CHECK(rows[2][2] == rows[10][2]);
        CHECK(rows[2][2] == rows[14][2]);
        CHECK(rows[2][2] == rows[22][2]);
        const std::string img = slurp(dir / "g" / "density.pgm");
        CHECK(img.rfind("P5\n5 5\n255\n", 0) == 0);
        CHECK(img.size() == std::string("P5\n5 5\n255\n").size() + 25);
        CHECK(static_cast<unsigned char>(img.back()) < static_cast<unsigned char>(img[11 + 12]));
        CHECK(static_cast<unsigned char>(img[11 + 12]) == 255);
    }
    SUBCASE("equivariant model is symmetric on grid points") {
        ModelSpec spec{"C4", {"rotation2d", 0, 1}, 9, {}};
        for (int b = 0; b < 2; ++b) {
            LayerSpec l;
            l.kind = "residual";
            l.prefix = "r" + std::to_string(b);
            l.orientation = Orientation::inverted;
            l.net.channels = {4, 4};
            l.net.lipschitz = 0.9;
            l.net.nonlinearity = "lipswish";
            spec.layers.push_back(l);
        }
        const fs::path model = save_spec(dir, spec);
        const int n = 21;
        REQUIRE(cli({"density-grid", "--model", model.string(), "--out", (dir / "g").string(), "--bound", "3",
                     "--resolution", std::to_string(n)})
                    .code == 0);
        const auto rows = read_csv(dir / "g" / "density.csv");
        // Quarter turn maps grid cell (r, c) to (n-1-c, r).
        double worst = 0.0;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c)
                worst = std::max(worst, std::abs(rows[static_cast<std::size_t>(r * n + c)][2] -
                                                 rows[static_cast<std::size_t>((n - 1 - c) * n + r)][2]));
        CHECK(worst < 1e-8);
    }
    SUBCASE("bad arguments") {
        const fs::path model = save_spec(dir, {"C1", {"trivial", 2, 1}, 0, {}});
        CHECK(cli({"density-grid", "--model", model.string(), "--out", (dir / "g").string(), "--resolution", "0"})
                  .code == 2);
        CHECK(cli({"density-grid", "--model", model.string(), "--out", (dir / "g").string(), "--bound", "-1"}).code ==
              2);
        CHECK(cli({"density-grid", "--model", (dir / "missing.json").string(), "--out", (dir / "g").string()}).code ==
              1);
    }
}

TEST_CASE("sample") {
    const fs::path dir = fresh_dir("sample");
    const fs::path model = save_spec(dir, {"C4", {"rotation2d", 0, 1}, 0, {}});
    REQUIRE(cli({"sample", "--model", model.string(), "--out", (dir / "s").string(), "--n", "7", "--seed", "2"})
                .code == 0);
    const auto rows = read_csv(dir / "s" / "samples.csv");
    CHECK(rows.size() == 7);
    CHECK(rows[0].size() == 2);
    REQUIRE(cli({"sample", "--model", model.string(), "--out", (dir / "t").string(), "--n", "7", "--seed", "2"})
                .code == 0);
    CHECK(slurp(dir / "s" / "samples.csv") == slurp(dir / "t" / "samples.csv"));
}

TEST_CASE("verify") {
    const fs::path dir = fresh_dir("verify");
    SUBCASE("builtin suite passes") {
        const Run r = cli({"verify", "--model", "builtin-suite", "--out", (dir / "b").string()});
        CHECK_MESSAGE(r.code == 0, r.out);
        CHECK(fs::exists(dir / "b" / "report.txt"));
        CHECK(fs::exists(dir / "b" / "report.csv"));
    }
    SUBCASE("perturbing a commutant generator entry fails the equivariance checks") {
        ModelSpec spec{"C4", {"rotation2d", 0, 1}, 0, {}};
        LayerSpec m;
        m.kind = "matexp";
        m.prefix = "m0";
        spec.layers.push_back(m);
        const fs::path model = save_spec(dir, spec);
        CHECK(cli({"verify", "--model", model.string(), "--out", (dir / "clean").string()}).code == 0);

        nlohmann::json j;
        std::ifstream(model) >> j;
        j["params"][0]["data"][1] = j["params"][0]["data"][1].get<double>() + 1e-2;
        std::ofstream(model) << j.dump(1);
        const Run r = cli({"verify", "--model", model.string(), "--out", (dir / "bad").string()});
        CHECK(r.code == 1);
        CHECK(r.out.find("FAIL layer0.matexp.equivariance") != std::string::npos);
        CHECK(r.out.find("FAIL density_invariance") != std::string::npos);
    }
}

TEST_CASE("demos") {
    const fs::path dir = fresh_dir("demos");
    SUBCASE("moser") {
        const Run r = cli({"moser-demo", "--out", (dir / "m").string()});
        CHECK_MESSAGE(r.code == 0, r.out);
        CHECK(r.out.find("PASS pushforward_l1") != std::string::npos);
        CHECK(read_csv(dir / "m" / "moser.csv").size() == 2048);
        write(dir / "bad.json", R"({"n": 2048, "order": 4})");
        CHECK(cli({"moser-demo", "--config", (dir / "bad.json").string(), "--out", (dir / "x").string()}).code == 2);
    }
    SUBCASE("universality: negation returns the pad exactly to zero") {
        const Run r = cli({"universality-demo", "--out", (dir / "u").string()});
        CHECK_MESSAGE(r.code == 0, r.out);
        CHECK(r.out.find("PASS final_pad") != std::string::npos);
    }
    SUBCASE("universality: identity leaves every block trace at zero") {
        write(dir / "id.json", R"({"phi": "identity"})");
        REQUIRE(cli({"universality-demo", "--config", (dir / "id.json").string(), "--out", (dir / "i").string()})
                    .code == 0);
        std::ifstream in(dir / "i" / "trace.csv");
        std::string line;
        std::getline(in, line);
        int rows = 0;
        while (std::getline(in, line)) {
            std::stringstream ss(line);
            std::string cell;
            for (int k = 0; k < 4; ++k) std::getline(ss, cell, ',');
            CHECK(std::stod(cell) == 0.0);
            ++rows;
        }
        CHECK(rows > 0);
    }
    SUBCASE("half turn") {
        write(dir / "h.json", R"({"phi": "half-turn"})");
        CHECK(cli({"universality-demo", "--config", (dir / "h.json").string(), "--out", (dir / "h").string()}).code ==
              0);
        write(dir / "q.json", R"({"phi": "quarter-turn"})");
        CHECK(cli({"universality-demo", "--config", (dir / "q.json").string(), "--out", (dir / "q").string()}).code ==
              2);
    }
}

TEST_CASE("usage errors") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"fly"}).code == 2);
    CHECK(cli({"train", "--out", "x"}).code == 2);
    CHECK(cli({"--help"}).code == 0);
}
