#include "test_support.hpp"

#include "smplab/experiments.hpp"

#include <cstdlib>
#include <fstream>

#include <sys/wait.h>
#include <unistd.h>

using namespace smplab;

namespace {

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = fs::temp_directory_path() /
                ("smplab_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Json preset(const std::string& name, std::size_t paths, std::uint64_t seed) {
    return Json{{"preset", name}, {"paths", paths}, {"seed", seed}};
}

using Command = bool (*)(RunContext&);

fs::path run_command(const Json& j, const fs::path& out, const std::string& name, Command cmd, unsigned threads = 1) {
    RunContext run(parse_config(j), out, name, threads);
    cmd(run);
    return run.dir();
}

std::string last_line(const std::string& s) {
    const auto end = s.find_last_not_of('\n');
    const auto start = s.rfind('\n', end);
    return s.substr(start == std::string::npos ? 0 : start + 1, end - (start == std::string::npos ? 0 : start + 1) + 1);
}

}  // namespace

TEST(ConfigHash, StableUnderKeyOrderAndNumberSpelling) {
    const auto a = parse_config(Json::parse(R"({"preset": "zero", "paths": 1000, "seed": 5})"));
    const auto b = parse_config(Json::parse(R"({"seed": 5.0, "paths": 1000.0, "preset": "zero", "output": "x"})"));
    EXPECT_EQ(config_hash(a.canonical), config_hash(b.canonical));
    EXPECT_EQ(config_hash(a.canonical).size(), 16u);
    EXPECT_EQ(config_hash(a.canonical), config_hash(parse_config(a.canonical).canonical));
}

TEST(ConfigHash, SensitiveToContent) {
    const auto base = config_hash(parse_config(preset("zero", 1000, 5)).canonical);
    EXPECT_NE(base, config_hash(parse_config(preset("zero", 1000, 6)).canonical));
    EXPECT_NE(base, config_hash(parse_config(preset("zero", 1001, 5)).canonical));
    EXPECT_NE(base, config_hash(parse_config(preset("benchmark-n8", 1000, 5)).canonical));
}

TEST(Config, RejectsInvalidInput) {
    auto bad = [](const char* text) { return parse_config(Json::parse(text)); };
    EXPECT_THROW(bad(R"({"preset": "zero", "paths": 1000})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "zero", "paths": 50, "seed": 1})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "zero", "paths": 1000, "seed": -1})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "zero", "paths": 1000, "seed": 1.5})"), ConfigError);
    EXPECT_THROW(bad(R"({"paths": 1000, "seed": 1})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "zero", "inline": {}, "seed": 1})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "nope", "seed": 1})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "zero", "seed": 1, "steps": 100})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "zero", "seed": 1, "colour": "red"})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "zero", "seed": 1, "scheme": "rk4"})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "mp-n4-U3", "seed": 1, "base_intervals": [0, 3, 1, 1]})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "mp-n4-U3", "seed": 1, "n_intervals": 3})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "mp-n4-U3", "seed": 1, "optimizer": {"mode": "random"}})"), ConfigError);
    EXPECT_THROW(bad(R"({"preset": "mp-n4-U3", "seed": 1, "spikes": [{"t0": 0.1, "eps": 0.1, "u": 9}]})"),
                 ConfigError);
    EXPECT_THROW(bad(R"([1, 2])"), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, OverridesEnterTheHash) {
    const Json j = preset("zero", 1000, 5);
    const auto c = parse_config(j, 2000, 9);
    EXPECT_EQ(c.paths, 2000u);
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(config_hash(c.canonical), config_hash(parse_config(preset("zero", 2000, 9)).canonical));
}

TEST(Config, InlineProblemBuilds) {
    const auto c = load_config(std::string(SMPLAB_CONFIG_DIR) + "/inline-scalar.json");
    const auto& p = c.problem;
    EXPECT_EQ(p.coeffs.dim, 2);
    EXPECT_EQ(p.controls.size(), 2u);
    EXPECT_EQ(p.steps, 64u);
    const PathContext ctx{};
    const auto cv = p.coeffs.at(0.0, ctx, p.controls[1]);
    EXPECT_NEAR(cv.b(0), 0.7, 1e-15);
    EXPECT_NEAR(cv.b(1), -0.4, 1e-15);
    EXPECT_TRUE(verify_coercivity(p.family, p.triple, 100, 1, p.horizon).pass);
    EXPECT_THROW(parse_config(Json::parse(R"({"seed": 1, "inline": {"A": [[1.0]], "x0": [1.0, 2.0]}})")),
                 ConfigError);
}

TEST(Simulate, ZeroPresetHasZeroCost) {
    TempDir tmp;
    const auto dir = run_command(preset("zero", 200, 1), tmp.path(), "simulate", cmd_simulate);
    EXPECT_EQ(last_line(slurp(dir / "stats.csv")), "J,,0,0");
    const Json rec = Json::parse(slurp(dir / "record.json"));
    EXPECT_TRUE(rec.at("pass").get<bool>());
    EXPECT_EQ(rec.at("config_hash").get<std::string>(), dir.filename().string());
}

TEST(Simulate, RerunsAreByteIdenticalAcrossThreadCounts) {
    TempDir a, b;
    const Json j = Json::parse(slurp(std::string(SMPLAB_CONFIG_DIR) + "/inline-scalar.json"));
    const auto da = run_command(j, a.path(), "simulate", cmd_simulate, 1);
    const auto db = run_command(j, b.path(), "simulate", cmd_simulate, 3);
    EXPECT_EQ(slurp(da / "stats.csv"), slurp(db / "stats.csv"));
    EXPECT_EQ(slurp(da / "plots/moments.dat"), slurp(db / "plots/moments.dat"));
    run_command(j, a.path(), "adjoint", cmd_adjoint, 1);
    run_command(j, b.path(), "adjoint", cmd_adjoint, 3);
    EXPECT_EQ(slurp(da / "adjoint.csv"), slurp(db / "adjoint.csv"));
    EXPECT_EQ(slurp(da / "duality.csv"), slurp(db / "duality.csv"));
}

TEST(Simulate, CostMatchesLibrary) {
    TempDir tmp;
    const Json j = preset("benchmark-n8", 500, 3);
    const auto dir = run_command(j, tmp.path(), "simulate", cmd_simulate);
    const auto p = presets::benchmark_n8();
    auto noise = sample_paths(p.cov, p.grid(), 500, 3);
    const auto ens = integrate(p.coeffs, p.family, smplab::testing::base_control(p), noise);
    const auto J = cost(ens, p.coeffs);
    std::ostringstream expected;
    expected << std::setprecision(17) << "J,," << J.value << ',' << J.stderr_;
    EXPECT_EQ(last_line(slurp(dir / "stats.csv")), expected.str());
}

TEST(Adjoint, ZeroTerminalCostGivesZeroTable) {
    TempDir tmp;
    const auto dir = run_command(preset("zero", 200, 2), tmp.path(), "adjoint", cmd_adjoint);
    std::istringstream in(slurp(dir / "adjoint.csv"));
    std::string line;
    std::getline(in, line);
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(line.substr(line.find(',')), ",0,0,0");
    }
    EXPECT_EQ(rows, 129u);
}

TEST(CheckMp, SingletonSetSkipsFalsification) {
    TempDir tmp;
    const auto dir = run_command(preset("scalar-closed-form", 200, 4), tmp.path(), "check-mp", cmd_check_mp);
    const Json rec = Json::parse(slurp(dir / "record.json"));
    const auto& run = rec.at("runs").at("check-mp");
    EXPECT_TRUE(run.at("checks").at("maximum_principle").at("pass").get<bool>());
    EXPECT_FALSE(run.at("checks").contains("falsification_detected"));
    EXPECT_FALSE(fs::exists(dir / "margins_perturbed.csv"));
}

TEST(SpikeSweep, ZeroPresetGivesZeroVariation) {
    TempDir tmp;
    const auto dir = run_command(preset("zero", 200, 5), tmp.path(), "spike-sweep", cmd_spike_sweep);
    const Json rec = Json::parse(slurp(dir / "record.json"));
    const auto& checks = rec.at("runs").at("spike-sweep").at("checks");
    EXPECT_TRUE(checks.at("scaling_degenerate_zero").at("pass").get<bool>());
    std::istringstream in(slurp(dir / "scaling.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::istringstream row(line);
        std::string eps, sup;
        std::getline(row, eps, ',');
        std::getline(row, sup, ',');
        EXPECT_EQ(sup, "0");
    }
}

TEST(Record, MergesCommandsIntoOneFile) {
    TempDir tmp;
    const Json j = preset("zero", 200, 6);
    run_command(j, tmp.path(), "simulate", cmd_simulate);
    const auto dir = run_command(j, tmp.path(), "adjoint", cmd_adjoint);
    const Json rec = Json::parse(slurp(dir / "record.json"));
    EXPECT_TRUE(rec.at("runs").contains("simulate"));
    EXPECT_TRUE(rec.at("runs").contains("adjoint"));
}

TEST(Report, EmptyDirectoryIsAnError) {
    TempDir tmp;
    EXPECT_THROW(cmd_report(tmp.path()), std::invalid_argument);
    EXPECT_THROW(cmd_report(tmp.path() / "missing"), std::invalid_argument);
}

TEST(Report, ListsRunsSortedByHash) {
    TempDir tmp;
    const auto d1 = run_command(preset("zero", 200, 7), tmp.path(), "simulate", cmd_simulate);
    const auto d2 = run_command(preset("zero", 200, 8), tmp.path(), "simulate", cmd_simulate);
    const auto text = cmd_report(tmp.path());
    const auto h1 = d1.filename().string(), h2 = d2.filename().string();
    ASSERT_NE(text.find(h1), std::string::npos);
    ASSERT_NE(text.find(h2), std::string::npos);
    EXPECT_EQ(text.find(h1) < text.find(h2), h1 < h2);
    EXPECT_NE(text.find("seed=7"), std::string::npos);
    EXPECT_NE(text.find("PASS coercivity"), std::string::npos);
    EXPECT_EQ(slurp(tmp.path() / "summary.txt"), text);
    EXPECT_EQ(slurp(tmp.path() / "summary_pass_fraction.dat"), "0 1\n1 1\n");
}

TEST(Cli, ExitCodes) {
    TempDir tmp;
    const fs::path cfg = tmp.path() / "bad.json";
    std::ofstream(cfg) << R"({"preset": "zero", "paths": 10})";
    const std::string cli = SMPLAB_CLI_PATH;
    auto status = [](const std::string& cmd) {
        const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
        return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    };
    EXPECT_EQ(status(cli + " simulate --config " + cfg.string() + " --out " + tmp.path().string()), 2);
    EXPECT_EQ(status(cli + " simulate --config " + std::string(SMPLAB_CONFIG_DIR) + "/zero.json --paths 200 --out " +
                     tmp.path().string()),
              0);
    EXPECT_EQ(status(cli + " report --out " + tmp.path().string()), 0);
    EXPECT_EQ(status(cli + " report --out " + (tmp.path() / "missing").string()), 3);
    EXPECT_NE(status(cli + " frobnicate"), 0);
}
