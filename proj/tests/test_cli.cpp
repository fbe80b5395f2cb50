#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code;
    std::string output;
};

CliRun run(const std::string& args, const fs::path& dir) {
    const fs::path log = dir / "cli.log";
    const std::string cmd = std::string("ASSIM_DETERMINISTIC=1 \"") + ASSIMILATE_BIN + "\" " + args + " > \"" +
                            log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream is(log);
    std::stringstream ss;
    ss << is.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("assimilate_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path dir_;
};

}  // namespace

TEST_F(Cli, TruthIsReproducible) {
    const CliRun a = run("truth --model dw --n 200 --seed 4 --out \"" + (dir_ / "a").string() + "\"", dir_);
    const CliRun b = run("truth --model dw --n 200 --seed 4 --out \"" + (dir_ / "b").string() + "\"", dir_);
    ASSERT_EQ(a.code, 0) << a.output;
    ASSERT_EQ(b.code, 0) << b.output;
    EXPECT_EQ(slurp(dir_ / "a" / "truth.csv"), slurp(dir_ / "b" / "truth.csv"));
    EXPECT_EQ(slurp(dir_ / "a" / "observations.csv"), slurp(dir_ / "b" / "observations.csv"));
    EXPECT_TRUE(fs::exists(dir_ / "a" / "manifest.json"));
    EXPECT_TRUE(fs::exists(dir_ / "a" / "config.resolved"));
}

TEST_F(Cli, AssimilateWritesOutputs) {
    const CliRun r = run("assimilate --model dw --n 300 --seed 2 --method shadow --out \"" + dir_.string() + "\"", dir_);
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"analysis.csv", "summary.csv", "manifest.json", "histogram_shadow_data.csv",
                          "histogram_shadow_model.csv"})
        EXPECT_TRUE(fs::exists(dir_ / f)) << f;
    bool trace = false;
    for (const auto& e : fs::directory_iterator(dir_))
        trace |= e.path().filename().string().rfind("trace_shadow_", 0) == 0;
    EXPECT_TRUE(trace);
    EXPECT_EQ(slurp(dir_ / "histogram_shadow_data.csv").rfind("bin_left,bin_right,count,density\n", 0), 0u);
}

TEST_F(Cli, EnsembleRuns) {
    const CliRun r = run("ensemble --model dw --n 200 --replicates 2 --jobs 2 --out \"" + dir_.string() + "\"", dir_);
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(dir_ / "summary.csv"));
    EXPECT_TRUE(fs::exists(dir_ / "replicates.csv"));
}

TEST_F(Cli, ConfigurationErrorsExitTwo) {
    EXPECT_EQ(run("truth --model lorenz05 --out \"" + dir_.string() + "\"", dir_).code, 2);
    const CliRun unknown = run("truth --model nope --out \"" + dir_.string() + "\"", dir_);
    EXPECT_NE(unknown.output.find("l96"), std::string::npos);
    EXPECT_EQ(run("assimilate --model dw --n 50 --rho 1.5 --out \"" + dir_.string() + "\"", dir_).code, 2);
    EXPECT_EQ(run("assimilate --model dw --n 50 --init sideways --method w4dvar --out \"" + dir_.string() + "\"", dir_).code, 2);
    EXPECT_EQ(run("frobnicate", dir_).code, 2);

    std::ofstream(dir_ / "bad.cfg") << "model = dw\nbogus = 1\n";
    const CliRun bad = run("ensemble --config \"" + (dir_ / "bad.cfg").string() + "\" --out \"" + dir_.string() + "\"", dir_);
    EXPECT_EQ(bad.code, 2);
    EXPECT_NE(bad.output.find("bad.cfg:2: unknown key 'bogus'"), std::string::npos) << bad.output;
}

TEST_F(Cli, SolverFailureExitsThree) {
    const CliRun r = run("assimilate --model dw --n 4000 --seed 1 --method newton --max-iter 200 --out \"" + dir_.string() + "\"", dir_);
    EXPECT_EQ(r.code, 3) << r.output;
}
