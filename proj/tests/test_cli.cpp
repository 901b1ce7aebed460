#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli_app.hpp"
#include "test_support.hpp"

using namespace stackstop;
using testing_support::data_path;
using testing_support::read_file;
using json = nlohmann::json;

namespace {

struct CliRun {
  int code = 0;
  std::string out, err;
  json report() const { return json::parse(out); }
  json body() const { return report().at("body"); }
  json result() const { return body().at("result"); }
};

CliRun run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "stackstop");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string temp_path(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() /
             (std::string("stackstop_cli_") + info->test_suite_name() + "_" + info->name());
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::string without_timestamp(const std::string& text) {
  json j = json::parse(text);
  j.erase("timestamp");
  return j.dump();
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, ValidateExampleFile) {
  auto r = run_cli({"validate", data_path("eg1.json")});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.result().at("valid").get<bool>());
  EXPECT_EQ(r.body().at("spec_hash"), spec_hash(eg1_deterministic()));
}

TEST(Cli, FiniteReportOnFirstExample) {
  auto r = run_cli({"finite", "--spec", data_path("eg1.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  json res = r.result();

  std::vector<int> rho_times;
  std::vector<double> leader_values;
  for (const auto& c : res["stopping_times"][0]["candidates"]) {
    rho_times.push_back(c["rho"]["stop_time"].get<int>());
    leader_values.push_back(c["leader_value"].get<double>());
  }
  EXPECT_EQ(rho_times, (std::vector<int>{1, 0, 2}));
  EXPECT_EQ(leader_values, (std::vector<double>{3, 2, 4}));

  ASSERT_EQ(res["precommitment"].size(), 2u);
  EXPECT_EQ(res["precommitment"][0]["time"], 0);
  EXPECT_EQ(res["precommitment"][0]["stop_time"], 2);
  EXPECT_DOUBLE_EQ(res["precommitment"][0]["value"].get<double>(), 4.0);
  EXPECT_EQ(res["precommitment"][1]["time"], 1);
  EXPECT_EQ(res["precommitment"][1]["stop_time"], 1);
  EXPECT_FALSE(res["time_consistency"]["consistent"].get<bool>());

  for (const auto& row : res["equilibrium"]["policy"]) EXPECT_EQ(row, json::array({1}));
  EXPECT_DOUBLE_EQ(res["equilibrium"]["leader_value"][0].get<double>(), 3.0);

  bool found = false;
  for (const auto& p : res["nash"][0]["pairs"])
    found = found || (p["tau"]["stop_time"] == 1 && p["rho"]["stop_time"] == 0);
  EXPECT_TRUE(found);
}

TEST(Cli, ScanReportsPositiveMinimum) {
  auto r = run_cli({"scan-noneq", "--spec", data_path("nonexistence_K.json"), "--grid", "51"});
  ASSERT_EQ(r.code, 0) << r.err;
  json res = r.result();
  EXPECT_GT(res["min_residual"].get<double>(), 0.0);
  EXPECT_NEAR(res["min_residual"].get<double>(), 1.8342007434944207, 1e-6);
  EXPECT_EQ(res["argmin_index"], 2448);
  EXPECT_TRUE(res["positive"].get<bool>());
}

TEST(Cli, ReportsEmbedOptionsAndSpecHash) {
  auto r = run_cli({"scan-noneq", "--spec", "builtin:nonexistence_K", "--grid", "5"});
  ASSERT_EQ(r.code, 0);
  json b = r.body();
  EXPECT_EQ(b["spec_hash"], spec_hash(nonexistence_K()));
  EXPECT_EQ(b["options"]["grid"], 5);
  EXPECT_EQ(b["options"]["tol"], 1e-10);
  EXPECT_EQ(b["options"]["threads"], 1);
  EXPECT_EQ(b["command"], "scan-noneq");
  EXPECT_TRUE(r.report().contains("timestamp"));
}

TEST(Cli, RerunsAreByteIdenticalApartFromTimestamp) {
  const std::vector<std::vector<std::string>> commands = {
      {"finite", "--spec", "builtin:eg1"},
      {"sweep", "--spec", "builtin:eg1", "--grid", "21"},
      {"entropy-eq", "--spec", "builtin:nonexistence_K", "--lambda", "0.1", "--tol", "1e-6",
       "--threads", "3"},
      {"simulate", "--spec", data_path("single_state.json"), "--p", "0.3", "--paths", "2000",
       "--threads", "2"},
      {"interval", "--spec", data_path("single_state.json")},
      {"follower", "--spec", "builtin:nonexistence_K", "--p", "0,1,0", "--lambda", "0.5"},
  };
  for (const auto& cmd : commands) {
    auto a = run_cli(cmd), b = run_cli(cmd);
    EXPECT_EQ(a.code, 0) << cmd[0] << ": " << a.err;
    EXPECT_EQ(without_timestamp(a.out), without_timestamp(b.out)) << cmd[0];
  }
}

TEST(Cli, ValidationErrorsExitOneWithReport) {
  const std::string bad = temp_path("bad.json");
  {
    std::ofstream(bad) << R"({"n_states": 1, "transition": [[0.5]]})";
  }
  auto r = run_cli({"validate", bad});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.body()["status"], "validation_error");
  EXPECT_NE(r.body()["message"].get<std::string>().find("SpecError"), std::string::npos);

  EXPECT_EQ(run_cli({"finite", "--spec", "builtin:eg1", "--unknown-flag"}).code, 1);
  EXPECT_EQ(run_cli({"finite"}).code, 1);
  EXPECT_EQ(run_cli({"finite", "--spec", "builtin:nonexistence_K"}).code, 1);
  EXPECT_EQ(run_cli({"validate", "builtin:nope"}).code, 1);
  EXPECT_EQ(run_cli({"follower", "--spec", "builtin:nonexistence_K", "--p", "0,2,0"}).code, 1);
  EXPECT_EQ(run_cli({"follower", "--spec", "builtin:nonexistence_K", "--p", "0,1"}).code, 1);
}

TEST(Cli, BudgetFailuresExitTwoWithPartialReport) {
  auto r = run_cli({"finite", "--spec", "builtin:eg1", "--max-candidates", "2"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.body()["status"], "budget_exceeded");
  EXPECT_TRUE(r.result().contains("equilibrium"));

  auto s = run_cli({"scan-noneq", "--spec", "builtin:nonexistence_K", "--max-points", "10"});
  EXPECT_EQ(s.code, 2);

  auto e = run_cli({"entropy-eq", "--spec", "builtin:nonexistence_K", "--lambda", "0.1",
                    "--tol", "1e-14", "--max-iter", "0", "--max-starts", "1", "--grid-points",
                    "2"});
  EXPECT_EQ(e.code, 2);
  EXPECT_EQ(e.body()["status"], "tolerance_not_met");
  EXPECT_FALSE(e.result()["equilibria"][0]["success"].get<bool>());
  EXPECT_NE(e.result()["equilibria"][0]["message"].get<std::string>().find("budget"),
            std::string::npos);
}

TEST(Cli, HelpExitsZero) {
  auto r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("scan-noneq"), std::string::npos);
  EXPECT_EQ(run_cli({"sweep", "--help"}).code, 0);
}

TEST(Cli, OutFileReceivesReport) {
  const std::string out = temp_path("report.json");
  auto r = run_cli({"interval", "--spec", data_path("single_state.json"), "--out", out});
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(r.out.empty());
  json j = json::parse(read_file(out));
  EXPECT_NEAR(j["body"]["result"]["lower"][0].get<double>(), 1.0, 1e-8);
  EXPECT_NEAR(j["body"]["result"]["upper"][0].get<double>(), 1.5, 1e-8);
}

TEST(Cli, SweepCsvHasBranchColumn) {
  const std::string csv = temp_path("sweep.csv");
  auto r = run_cli({"sweep", "--spec", "builtin:eg1", "--grid", "11", "--csv", csv});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_DOUBLE_EQ(r.result()["supremum"].get<double>(), 4.5);
  EXPECT_FALSE(r.result()["attained"].get<bool>());
  const std::string text = read_file(csv);
  EXPECT_EQ(text.substr(0, text.find('\n')), "prob,value,branch");
  EXPECT_NE(text.find("0.5,4.5,limit\n"), std::string::npos);
  EXPECT_NE(text.find("0.4,4.4,value\n"), std::string::npos);
  EXPECT_EQ(r.body()["csv_files"], json::array({csv}));
}

TEST(Cli, EntropySweepCsv) {
  const std::string csv = temp_path("lambda.csv");
  auto r = run_cli({"entropy-eq", "--spec", "builtin:nonexistence_K", "--sweep", "1,0.1",
                    "--tol", "1e-6", "--csv", csv});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string text = read_file(csv);
  EXPECT_EQ(text.substr(0, text.find('\n')), "lambda,p_1,p_2,p_3,residual,epsilon");
  EXPECT_EQ(count_lines(text), 3);
  EXPECT_NE(text.find("\n1,1,0,0,"), std::string::npos);
  for (const auto& e : r.result()["equilibria"]) {
    EXPECT_LE(e["residual"].get<double>(), 1e-6);
    EXPECT_EQ(e["epsilon_certificate"].get<double>(),
              epsilon_certificate(nonexistence_K(), e["lambda"].get<double>()));
  }
}

TEST(Cli, ScanCsvListsEveryGridPoint) {
  const std::string csv = temp_path("scan.csv");
  auto r = run_cli({"scan-noneq", "--spec", "builtin:nonexistence_K", "--grid", "3", "--csv", csv});
  ASSERT_EQ(r.code, 0);
  const std::string text = read_file(csv);
  EXPECT_EQ(text.substr(0, text.find('\n')), "p_1,p_2,p_3,residual_max");
  EXPECT_EQ(count_lines(text), 28);
}

TEST(Cli, PrecommitCsvPerState) {
  const std::string csv = temp_path("v.csv");
  auto r = run_cli({"precommit", "--spec", "builtin:nonexistence_K", "--grid-points", "11",
                    "--csv", csv});
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(r.body()["csv_files"].size(), 3u);
  for (const auto& f : r.body()["csv_files"]) {
    const std::string text = read_file(f.get<std::string>());
    EXPECT_EQ(text.rfind("w,v,attaining_p_1", 0), 0u);
  }
  EXPECT_EQ(r.result()["states"].size(), 3u);
}

TEST(Cli, SimulatePathPolicyMatchesAnalytic) {
  const std::string pol = temp_path("policy.json");
  {
    std::ofstream(pol) << R"({"paths": [{"path": [0, 0], "p": 0.4}], "fill": 0.0})";
  }
  auto r = run_cli({"simulate", "--spec", data_path("eg1.json"), "--policy", pol, "--paths",
                    "100000", "--seed", "7"});
  ASSERT_EQ(r.code, 0) << r.err;
  json a = r.result()["analytic"];
  EXPECT_NEAR(a["j1"].get<double>(), 4.4, 1e-12);
  EXPECT_FALSE(a["flagged"].get<bool>());
}

TEST(Cli, SimulateExplicitFollowerAndConditioning) {
  const std::string pol = temp_path("policy.json");
  {
    std::ofstream(pol) << R"({"leader": [1.0], "leader_continues_first": true})";
  }
  auto r = run_cli({"simulate", "--spec", data_path("single_state.json"), "--policy", pol,
                    "--paths", "20000"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(r.result()["analytic"]["j2"].get<double>(), 1.5, 1e-12);

  EXPECT_EQ(run_cli({"simulate", "--spec", data_path("single_state.json"), "--policy", pol,
                     "--p", "1"})
                .code,
            1);
}

TEST(Cli, FollowerOnFiniteSpecKeysNodesByPath) {
  auto r = run_cli({"follower", "--spec", "builtin:eg1", "--p", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  json nodes = r.result()["nodes"];
  ASSERT_TRUE(nodes.contains("(0,[0])"));
  ASSERT_TRUE(nodes.contains("(2,[0,0,0])"));
  EXPECT_DOUBLE_EQ(nodes["(0,[0])"]["V_C"].get<double>(), 4.0);
}
