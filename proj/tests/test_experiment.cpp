#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "loopdet/experiment.hpp"

using namespace loopdet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Scratch directory shared by the cases; wiped once at first use.
const fs::path& scratch() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "loopdet_experiment_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string write_file(const std::string& name, const json& doc) {
  const fs::path p = scratch() / name;
  std::ofstream(p) << doc.dump(2);
  return p.string();
}

json base_estimate_config() {
  return json{
      {"kind", "estimate-det"},
      {"seed", 42},
      {"replicas", 120},
      {"manifold", {{"dim", 2}, {"side", {1.0, 1.0}}}},
      {"mass", {{"constant", 1.0}}},
      {"connections",
       json::array({json{{"name", "triv"}, {"form", "trivial"}},
                    json{{"name", "twist"}, {"form", "flat-abelian"}, {"theta", {0.3, 0.0}}}})},
      {"soup", {{"alpha", 1.0}, {"t_min", 1e-3}, {"t_max", 20.0}}},
      {"params", {{"conn0", "triv"}, {"conn1", "twist"}, {"bands", 3}, {"pilot", 20}}},
  };
}

json campbell_config(long long replicas) {
  return json{
      {"kind", "campbell"},
      {"seed", 7},
      {"replicas", replicas},
      {"params",
       {{"cases", json::array({json{{"name", "half"},
                                    {"rate", 2.0},
                                    {"g", {{"form", "constant"}, {"value", -0.5}}}}})}}},
  };
}

struct EnvGuard {
  std::string name;
  std::string old;
  bool had = false;
  EnvGuard(const std::string& n, const std::string& value) : name(n) {
    if (const char* v = std::getenv(n.c_str())) {
      had = true;
      old = v;
    }
    setenv(n.c_str(), value.c_str(), 1);
  }
  ~EnvGuard() {
    if (had)
      setenv(name.c_str(), old.c_str(), 1);
    else
      unsetenv(name.c_str());
  }
};

}  // namespace

TEST_CASE("config schema rejects malformed documents") {
  // Baseline parses.
  CHECK_NOTHROW(parse_config(base_estimate_config()));

  // Unknown keys are rejected at every level.
  auto reject = [](json doc) { CHECK_THROWS_AS(parse_config(doc), SchemaError); };
  {
    json d = base_estimate_config();
    d["surprise"] = 1;
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["manifold"]["shape"] = "torus";
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["mass"]["units"] = "GeV";
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["connections"][0]["charge"] = 2;
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["soup"]["cutoff"] = 0.1;
    reject(d);
  }
  {
    // Kind-specific params are validated when the experiment starts.
    json d = base_estimate_config();
    d["params"]["typo"] = true;
    CHECK_THROWS_AS(run_experiment(parse_config(d)), SchemaError);
  }

  // Missing required keys.
  for (const char* key : {"kind", "seed", "replicas", "manifold", "mass", "connections", "soup"}) {
    json d = base_estimate_config();
    d.erase(key);
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["params"].erase("conn0");
    CHECK_THROWS_AS(run_experiment(parse_config(d)), SchemaError);
  }

  // Value validation.
  {
    json d = base_estimate_config();
    d["manifold"]["dim"] = 4;
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["manifold"]["side"] = {1.0};
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["mass"] = {{"constant", -1.0}};
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["mass"] = {{"field", {{"form", "cosine"}, {"base", 0.5}, {"amplitude", 0.7}}}};
    reject(d);  // base - |amplitude| <= 0
  }
  {
    json d = base_estimate_config();
    d["soup"]["t_min"] = -1.0;
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["replicas"] = 0;
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["schema_version"] = 2;
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["kind"] = "unheard-of";
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["connections"][1]["theta"] = {0.3};  // wrong arity
    reject(d);
  }
  {
    json d = base_estimate_config();
    d["connections"].push_back(d["connections"][0]);  // duplicate name
    reject(d);
  }

  // Per-kind block enforcement.
  {
    json d = campbell_config(100);
    d["manifold"] = {{"dim", 2}, {"side", {1.0, 1.0}}};
    reject(d);  // campbell has no manifold
  }
  {
    json d = base_estimate_config();
    d.erase("soup");
    reject(d);  // estimate-det requires the soup window
  }
  {
    json d = campbell_config(100);
    d.erase("replicas");
    reject(d);
  }
  {
    // spectral-oracle is deterministic: replicas are meaningless there.
    json d = base_estimate_config();
    d["kind"] = "spectral-oracle";
    d.erase("soup");
    d["params"] = {{"conn0", "triv"}, {"conn1", "twist"}};
    reject(d);  // still has replicas
    d.erase("replicas");
    CHECK_NOTHROW(parse_config(d));
  }

  // Unknown connection referenced from params.
  {
    json d = base_estimate_config();
    d["params"]["conn1"] = "ghost";
    CHECK_THROWS_AS(run_experiment(parse_config(d)), SchemaError);
  }
}

TEST_CASE("config loading distinguishes I/O failures from schema failures") {
  CHECK_THROWS_AS(load_config((scratch() / "does_not_exist.json").string()), IoError);
  const fs::path garbled = scratch() / "garbled.json";
  std::ofstream(garbled) << "{ not json";
  CHECK_THROWS_AS(load_config(garbled.string()), SchemaError);
  CHECK_NOTHROW(load_config(write_file("ok.json", campbell_config(100))));
}

TEST_CASE("identical connections give the exact unit ratio") {
  json d = base_estimate_config();
  d["params"]["conn1"] = "triv";
  const RunOutcome out = run_experiment(parse_config(d));
  CHECK(out.pass);
  const json& ratio = out.record.at("payload").at("ratio_re");
  CHECK(ratio.at("value").get<double>() == 1.0);
  CHECK(ratio.at("stderr").get<double>() == 0.0);
  for (const json& c : out.record.at("checks"))
    if (c.at("name") == "oracle_match") CHECK(c.at("z").get<double>() == 0.0);
}

TEST_CASE("payloads are bitwise reproducible and worker-count independent") {
  const json d = base_estimate_config();
  const auto payload_dump = [&] {
    const RunOutcome out = run_experiment(parse_config(d));
    return out.record.at("payload").dump() + "|" + json(out.record.at("checks")).dump();
  };
  std::string first, second, third;
  {
    EnvGuard workers("LOOPDET_WORKERS", "1");
    first = payload_dump();
    second = payload_dump();
  }
  {
    EnvGuard workers("LOOPDET_WORKERS", "3");
    third = payload_dump();
  }
  CHECK(first == second);
  CHECK(first == third);
}

TEST_CASE("records land under the output root with provenance attached") {
  EnvGuard root("LOOPDET_OUTPUT_ROOT", scratch().string());
  json d = campbell_config(4000);
  d["output"] = "records/campbell_out.json";
  const std::string cfg_path = write_file("campbell_run.json", d);

  RunOutcome outcome;
  fs::path record_path;
  std::string error;
  const int code = run_and_write(cfg_path, &outcome, &record_path, &error);
  CHECK(code == kExitOk);
  CHECK(record_path == scratch() / "records/campbell_out.json");
  REQUIRE(fs::exists(record_path));

  json rec;
  std::ifstream(record_path) >> rec;
  CHECK(rec.at("schema_version") == 1);
  CHECK(rec.at("kind") == "campbell");
  CHECK(rec.at("provenance").at("seed") == 7);
  CHECK(rec.at("provenance").contains("workers"));
  CHECK(rec.at("config_hash") == config_hash(d));
  CHECK(rec.at("pass").get<bool>());
  // Every payload quantity carries an uncertainty or an exactness flag.
  for (const auto& [key, node] : rec.at("payload").at("half").items()) {
    CHECK((node.contains("stderr") || node.at("exact") == true));
  }
}

TEST_CASE("a failed certificate still writes its record and exits 3") {
  EnvGuard root("LOOPDET_OUTPUT_ROOT", scratch().string());
  json d = base_estimate_config();
  // 120 replicas cannot reach a 1e-6 relative error: an honest failure.
  d["params"]["stderr_target_rel"] = 1e-6;
  d["output"] = "records/failed_target.json";
  const std::string cfg_path = write_file("failed_target.json", d);

  RunOutcome outcome;
  fs::path record_path;
  std::string error;
  const int code = run_and_write(cfg_path, &outcome, &record_path, &error);
  CHECK(code == kExitCertificate);
  CHECK(!outcome.pass);
  REQUIRE(fs::exists(record_path));
  json rec;
  std::ifstream(record_path) >> rec;
  CHECK(!rec.at("pass").get<bool>());
  bool found = false;
  for (const json& c : rec.at("checks"))
    if (c.at("name") == "stderr_target") {
      found = true;
      CHECK(!c.at("pass").get<bool>());
    }
  CHECK(found);
}

TEST_CASE("compare pairs shared payload quantities with combined uncertainties") {
  const RunOutcome a = run_experiment(parse_config(campbell_config(4000)));

  // A record compared against itself: every shared key at z = 0.
  const CompareReport self = compare_records(a.record, a.record);
  CHECK(self.all_pass);
  CHECK(!self.keys.empty());
  for (const CompareKey& k : self.keys) CHECK(k.z == 0.0);

  // Same experiment, different seed: statistically compatible.
  json d2 = campbell_config(4000);
  d2["seed"] = 8;
  const RunOutcome b = run_experiment(parse_config(d2));
  CHECK(compare_records(a.record, b.record).all_pass);

  // A perturbed mean far outside the combined band fails.
  json tampered = b.record;
  tampered["payload"]["half"]["mc_re"]["value"] =
      tampered["payload"]["half"]["mc_re"]["value"].get<double>() + 0.1;
  const CompareReport bad = compare_records(a.record, tampered);
  CHECK(!bad.all_pass);

  // Two exact quantities that differ also fail (infinite z).
  json exact_off = b.record;
  exact_off["payload"]["half"]["exact_re"]["value"] = 0.25;
  CHECK(!compare_records(a.record, exact_off).all_pass);

  // Records with no shared quantities cannot be compared.
  json alien;
  alien["payload"] = {{"elsewhere", {{"value", 1.0}, {"exact", true}}}};
  CHECK_THROWS_AS(compare_records(a.record, alien), SchemaError);
}

TEST_CASE("suite runs every config in a directory and aggregates exit codes") {
  const fs::path dir = scratch() / "suite";
  fs::create_directories(dir);
  EnvGuard root("LOOPDET_OUTPUT_ROOT", (scratch() / "suite_records").string());

  {
    json ok = campbell_config(2000);
    ok["output"] = "a_ok.record.json";
    std::ofstream(dir / "a_ok.json") << ok.dump(2);
  }
  {
    json bad = campbell_config(2000);
    bad["unknown_top_level"] = 1;
    std::ofstream(dir / "b_bad_schema.json") << bad.dump(2);
  }

  const SuiteReport report = run_suite(dir.string());
  REQUIRE(report.items.size() == 2);
  CHECK(report.items[0].exit_code == kExitOk);
  CHECK(report.items[1].exit_code == kExitSchema);
  CHECK(report.exit_code == kExitSchema);  // schema failures dominate certificate ones
  CHECK(fs::exists(scratch() / "suite_records" / "a_ok.record.json"));

  CHECK_THROWS_AS(run_suite((scratch() / "no_such_dir").string()), IoError);
}

TEST_CASE("csv side tables are exported next to the record when requested") {
  EnvGuard root("LOOPDET_OUTPUT_ROOT", scratch().string());
  json d = base_estimate_config();
  d["params"]["csv"] = true;
  d["output"] = "csv/est.record.json";
  const std::string cfg_path = write_file("csv_config.json", d);
  fs::path record_path;
  const int code = run_and_write(cfg_path, nullptr, &record_path, nullptr);
  CHECK(code == kExitOk);
  CHECK(fs::exists(scratch() / "csv/est.record.bands.csv"));
  std::ifstream csv(scratch() / "csv/est.record.bands.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "t_lo,t_hi,n,mean_re,se");
}
