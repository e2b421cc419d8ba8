#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "support/test_helpers.hpp"
#include "twophase/cli.hpp"
#include "twophase/errors.hpp"
#include "twophase/io.hpp"
#include "twophase/mean_score.hpp"
#include "twophase/model.hpp"

using namespace twophase;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("twophase_test_" + std::to_string(Rng(std::random_device{}())()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

// Writes a cohort as a CSV with continuous time = time index, so the
// boundaries 1..J reproduce it exactly.
void write_cohort_csv(const fs::path& path, const Cohort& cohort, bool with_flag,
                      const IndexList& validated) {
  std::ofstream out(path);
  out.precision(17);
  out << "time,event,z";
  for (int k = 1; k <= cohort.n_covariates; ++k) out << ",x" << k;
  if (with_flag) out << ",validated";
  out << "\n";
  std::vector<bool> is_validated(cohort.size(), false);
  for (std::size_t idx : validated) is_validated[idx] = true;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto& rec = cohort.records[i];
    out << rec.time_index << "," << (rec.event ? 1 : 0) << "," << rec.surrogate[0];
    for (int k = 0; k < cohort.n_covariates; ++k) out << "," << (*rec.covariates)[k];
    if (with_flag) out << "," << (is_validated[i] ? 1 : 0);
    out << "\n";
  }
}

std::string standard_mapping(int n_covariates, int n_times, bool with_flag) {
  std::ostringstream out;
  out << "time_column = time\nevent_column = event\nsurrogate_columns = z\n";
  out << "covariate_columns =";
  for (int k = 1; k <= n_covariates; ++k) out << (k > 1 ? "," : " ") << "x" << k;
  out << "\n";
  if (with_flag) out << "validated_flag_column = validated\n";
  out << "boundaries =";
  for (int j = 1; j <= n_times; ++j) out << (j > 1 ? "," : " ") << j;
  out << "\n";
  return out.str();
}

int run_cli(const std::vector<std::string>& args, std::string* out_text = nullptr,
            std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("stratum key serialization round-trips") {
  const StratumKey key{3, true, {2, 7}};
  CHECK(key.to_string() == "y:3|d:1|z:2,7");
  CHECK(StratumKey::parse(key.to_string()) == key);
  CHECK(StratumKey::parse("y:6|d:0|z:4") == StratumKey{6, false, {4}});
  CHECK_THROWS_AS(StratumKey::parse("nonsense"), ArgumentError);
}

TEST_CASE("discretization onto the interval grid") {
  TempDir dir;
  const auto csv = dir.path / "cohort.csv";
  write_file(csv,
             "time,event,z,x1\n"
             "1.2,1,2,0.5\n"     // event inside the third half-year interval
             "2.1,0,1,0.25\n"    // intermittently censored
             "3.4,1,3,0.1\n"     // event beyond the window: censored at J
             "3.0,0,4,\n");      // fully followed, not validated
  io::ColumnMapping mapping;
  mapping.time_column = "time";
  mapping.event_column = "event";
  mapping.surrogate_columns = {"z"};
  mapping.covariate_columns = {"x1"};
  io::DiscretizationSpec spec;
  spec.boundaries = {0.5, 1.0, 1.5, 2.0, 2.5, 3.0};

  SUBCASE("plain load keeps the intermittent record") {
    const auto loaded = io::load_cohort(csv.string(), mapping, spec);
    REQUIRE(loaded.cohort.size() == 4);
    CHECK(loaded.cohort.records[0].time_index == 3);
    CHECK(loaded.cohort.records[0].event);
    CHECK(loaded.cohort.records[1].time_index == 5);
    CHECK(!loaded.cohort.records[1].event);
    CHECK(loaded.cohort.records[2].time_index == 6);
    CHECK(!loaded.cohort.records[2].event);  // beyond the window
    CHECK(loaded.validated == IndexList{0, 1, 2});
  }

  SUBCASE("reduced-cohort rule drops and tallies") {
    spec.drop_intermittent = true;
    spec.end_of_study = 3.0;
    const auto loaded = io::load_cohort(csv.string(), mapping, spec);
    CHECK(loaded.cohort.size() == 3);
    CHECK(loaded.dropped_intermittent == 1);
    // A quarter of rows dropped earns the hard warning.
    CHECK(!loaded.warnings.empty());
  }
}

TEST_CASE("row-addressed load errors") {
  TempDir dir;
  io::ColumnMapping mapping;
  mapping.time_column = "time";
  mapping.event_column = "event";
  mapping.surrogate_columns = {"z"};
  mapping.covariate_columns = {"x1"};
  io::DiscretizationSpec spec;
  spec.boundaries = {1, 2, 3};

  const auto bad_col = dir.path / "badcol.csv";
  write_file(bad_col, "when,event,z,x1\n1,1,1,0.5\n");
  CHECK_THROWS_WITH_AS(io::load_cohort(bad_col.string(), mapping, spec),
                       doctest::Contains("'time'"), DataError);

  const auto bad_cell = dir.path / "badcell.csv";
  write_file(bad_cell, "time,event,z,x1\n1,1,1,0.5\n2,1,oops,0.5\n");
  CHECK_THROWS_WITH_AS(io::load_cohort(bad_cell.string(), mapping, spec),
                       doctest::Contains("row 2"), DataError);

  const auto bad_time = dir.path / "badtime.csv";
  write_file(bad_time, "time,event,z,x1\n-1,1,1,0.5\n");
  CHECK_THROWS_WITH_AS(io::load_cohort(bad_time.string(), mapping, spec),
                       doctest::Contains("row 1"), DataError);

  const auto partial = dir.path / "partial.csv";
  write_file(partial, "time,event,z,x1,x2\n1,1,1,0.5,\n");
  io::ColumnMapping two = mapping;
  two.covariate_columns = {"x1", "x2"};
  CHECK_THROWS_WITH_AS(io::load_cohort(partial.string(), two, spec),
                       doctest::Contains("all present or all empty"), DataError);
}

TEST_CASE("file round-trip reproduces the in-memory fit") {
  const Cohort cohort = testsupport::scenario_cohort(404, 600);
  Rng rng(18);
  const IndexList validated = design::draw_srs(cohort.size(), 200, rng);

  TempDir dir;
  const auto csv = dir.path / "cohort.csv";
  write_cohort_csv(csv, cohort, true, validated);
  io::ColumnMapping mapping;
  mapping.time_column = "time";
  mapping.event_column = "event";
  mapping.surrogate_columns = {"z"};
  mapping.covariate_columns = {"x1", "x2", "x3", "x4"};
  mapping.validated_flag_column = "validated";
  io::DiscretizationSpec spec;
  spec.boundaries = {1, 2, 3, 4, 5, 6};
  const auto loaded = io::load_cohort(csv.string(), mapping, spec);
  REQUIRE(loaded.cohort.size() == cohort.size());

  const FitResult from_file =
      meanscore::mean_score_fit(loaded.cohort, loaded.validated, Link::CLogLog);
  const FitResult in_memory = meanscore::mean_score_fit(cohort, validated, Link::CLogLog);
  CHECK((from_file.theta.packed() - in_memory.theta.packed()).lpNorm<Eigen::Infinity>() < 1e-9);
}

TEST_CASE("allocation csv round-trips through the loader") {
  Allocation alloc;
  alloc.counts[StratumKey{1, true, {1}}] = 12;
  alloc.counts[StratumKey{6, false, {3}}] = 0;
  alloc.counts[StratumKey{2, true, {2, 4}}] = 7;
  alloc.total = 19;
  std::ostringstream out;
  io::write_allocation_csv(out, alloc);
  TempDir dir;
  const auto path = dir.path / "allocation.csv";
  write_file(path, out.str());
  const Allocation back = io::read_allocation_csv(path.string());
  CHECK(back.total == 19);
  CHECK(back.count(StratumKey{1, true, {1}}) == 12);
  CHECK(back.count(StratumKey{2, true, {2, 4}}) == 7);
}

TEST_CASE("cli: balanced design over the full stratum grid") {
  // Scenario cohorts carry seven (y, d) levels and four surrogate codes.
  const Cohort cohort = testsupport::scenario_cohort(51, 4000);
  TempDir dir;
  const auto csv = dir.path / "cohort.csv";
  write_cohort_csv(csv, cohort, false, {});
  const auto mapping = dir.path / "mapping.cfg";
  write_file(mapping, standard_mapping(4, 6, false));
  const auto out_dir = dir.path / "design";

  std::string text;
  const int code = run_cli({"design", "--cohort", csv.string(), "--mapping", mapping.string(),
                            "--n", "400", "--method", "balanced", "--out", out_dir.string()},
                           &text);
  REQUIRE(code == 0);
  const Allocation alloc = io::read_allocation_csv((out_dir / "allocation.csv").string());
  CHECK(alloc.counts.size() == 28);
  CHECK(alloc.total == 400);
}

TEST_CASE("cli: fit on a fully validated cohort reports model-based errors") {
  const Cohort cohort = testsupport::scenario_cohort(52, 500);
  TempDir dir;
  const auto csv = dir.path / "cohort.csv";
  write_cohort_csv(csv, cohort, false, {});
  const auto mapping = dir.path / "mapping.cfg";
  write_file(mapping, standard_mapping(4, 6, false));
  const auto out_dir = dir.path / "fit";

  const int code = run_cli({"fit", "--cohort", csv.string(), "--mapping", mapping.string(),
                            "--link", "cloglog", "--out", out_dir.string()});
  REQUIRE(code == 0);
  const json doc = json::parse(read_file(out_dir / "estimates.json"));
  CHECK(doc["format_version"] == 1);
  CHECK(doc["strata"]["uncovered"].empty());

  const FitResult mle = model::fit_mle(cohort, Link::CLogLog);
  for (int p = 0; p < mle.theta.dim(); ++p) {
    CHECK(doc["estimate"][p].get<double>() ==
          doctest::Approx(mle.theta.packed()[p]).epsilon(1e-8));
    CHECK(doc["se"][p].get<double>() ==
          doctest::Approx(std::sqrt(mle.covariance(p, p))).epsilon(1e-6));
  }
}

TEST_CASE("cli: cox subcommand consumes design weights") {
  const Cohort cohort = testsupport::scenario_cohort(53, 400);
  TempDir dir;
  const auto csv = dir.path / "cohort.csv";
  write_cohort_csv(csv, cohort, false, {});
  const auto mapping = dir.path / "mapping.cfg";
  write_file(mapping, standard_mapping(4, 6, false));
  std::ostringstream weights;
  weights << "row,weight\n";
  for (std::size_t i = 1; i <= cohort.size(); i += 2) weights << i << ",2.0\n";
  const auto weights_path = dir.path / "weights.csv";
  write_file(weights_path, weights.str());
  const auto out_dir = dir.path / "cox";

  const int code = run_cli({"cox", "--cohort", csv.string(), "--mapping", mapping.string(),
                            "--weights", weights_path.string(), "--out", out_dir.string()});
  REQUIRE(code == 0);
  const json doc = json::parse(read_file(out_dir / "estimates.json"));
  CHECK(doc["convergence"]["converged"] == true);
  CHECK(doc["estimate"].size() == 4);
}

TEST_CASE("cli: simulate output is byte-identical across runs and thread counts") {
  TempDir dir;
  const auto config = dir.path / "scenario.cfg";
  write_file(config,
             "N = 400\nn = 80\ncensoring = 0.5\nreplications = 4\nmaster_seed = 97\n"
             "external_size = 1200\n");
  const auto out1 = dir.path / "run1";
  const auto out2 = dir.path / "run2";
  REQUIRE(run_cli({"simulate", "--config", config.string(), "--out", out1.string(),
                   "--threads", "1"}) == 0);
  REQUIRE(run_cli({"simulate", "--config", config.string(), "--out", out2.string(),
                   "--threads", "4"}) == 0);
  CHECK(read_file(out1 / "summary.csv") == read_file(out2 / "summary.csv"));
  CHECK(read_file(out1 / "summary.json") == read_file(out2 / "summary.json"));
  CHECK(read_file(out1 / "estimates.csv") == read_file(out2 / "estimates.csv"));
  CHECK(!read_file(out1 / "summary.csv").empty());
}

TEST_CASE("cli: exit code contract") {
  std::string err;
  CHECK(run_cli({"design", "--definitely-not-a-flag"}, nullptr, &err) == 1);
  CHECK(json::parse(err)["error"]["type"] == "usage");

  err.clear();
  TempDir dir;
  const auto mapping = dir.path / "mapping.cfg";
  write_file(mapping, standard_mapping(1, 3, false));
  CHECK(run_cli({"fit", "--cohort", (dir.path / "missing.csv").string(), "--mapping",
                 mapping.string(), "--out", dir.path.string()},
                nullptr, &err) == 2);
  CHECK(json::parse(err)["error"]["type"] == "data");

  // Numeric failure: a cohort whose only covariate separates the outcome.
  const auto csv = dir.path / "separate.csv";
  write_file(csv,
             "time,event,z,x1\n"
             "1,1,1,1\n1,1,1,1\n1,1,1,1\n1,1,1,1\n"
             "3,0,1,-1\n3,0,1,-1\n3,0,1,-1\n3,0,1,-1\n");
  err.clear();
  const int code = run_cli({"fit", "--cohort", csv.string(), "--mapping", mapping.string(),
                            "--link", "logit", "--out", dir.path.string()},
                           nullptr, &err);
  CHECK(code == 3);
  CHECK(json::parse(err)["error"]["type"] == "numeric");
}

TEST_CASE("cli: check subcommand runs the oracle suites") {
  std::string text;
  CHECK(run_cli({"check"}, &text) == 0);
  CHECK(text.find("PASS") != std::string::npos);
  CHECK(text.find("FAIL") == std::string::npos);
}
