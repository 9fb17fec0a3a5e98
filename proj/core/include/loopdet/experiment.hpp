#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "loopdet/connection.hpp"
#include "loopdet/loop_soup.hpp"
#include "loopdet/torus.hpp"

namespace loopdet {

// Configuration or record-content problems: malformed documents, unknown
// keys, missing fields, values a library precondition rejects.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem problems: unreadable configs, unwritable outputs.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitSchema = 2;       // config / record shape problems
inline constexpr int kExitCertificate = 3;  // record written, a check failed
inline constexpr int kExitIo = 4;

// Parsed, schema-validated experiment description.  `raw` keeps the
// normalized document for hashing and provenance.
struct ExperimentConfig {
  std::string kind;
  std::uint64_t seed = 1;
  long long replicas = 0;
  TorusSpec torus;  // meaningful for every kind except campbell
  MassField mass = MassField::constant_mass(1.0);
  std::vector<std::string> conn_names;
  std::vector<ConnectionSpec> conns;
  bool has_soup = false;
  SoupConfig soup;
  std::string output;     // record path; empty -> derived from kind + hash
  nlohmann::json params;  // kind-specific block, already validated
  nlohmann::json raw;

  const ConnectionSpec& connection(const std::string& name) const;  // SchemaError
};

// Throws SchemaError on any violation (unknown keys anywhere included).
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::string& path);  // + IoError

// FNV-1a (64-bit, hex) of the normalized document dump.
std::string config_hash(const nlohmann::json& doc);

struct RunOutcome {
  nlohmann::json record;
  bool pass = true;  // conjunction of the record's checks
};

// Executes the experiment.  Deterministic: for a fixed (config, seed, worker
// count) the record's payload / checks / pass fields are bitwise identical.
RunOutcome run_experiment(const ExperimentConfig& cfg);

// Output root: LOOPDET_OUTPUT_ROOT when set, else the current directory.
// Relative config outputs are joined to the root.
std::filesystem::path resolve_output_path(const ExperimentConfig& cfg);
// Writes the record (and, when the config asks for CSV tables, resolved
// sibling files); creates parent directories.  Throws IoError.
void write_record(const ExperimentConfig& cfg, const nlohmann::json& record,
                  const std::filesystem::path& file);

// Runs the config at `path` and writes its record.  Returns the process exit
// code (0 ok, 2 schema, 3 certificate failure with the record written, 4 io)
// and, through the out-parameters when non-null, the outcome and the record
// location.  Never throws.
int run_and_write(const std::string& path, RunOutcome* outcome = nullptr,
                  std::filesystem::path* record_path = nullptr, std::string* error = nullptr);

struct CompareKey {
  std::string key;  // JSON pointer into the payload
  double a = 0.0, b = 0.0;
  double sigma = 0.0;  // combined uncertainty
  double z = 0.0;
  bool pass = true;
};
struct CompareReport {
  std::vector<CompareKey> keys;
  bool all_pass = true;
};

// Pairs every quantity node ({"value", "stderr"/"syst"/"exact"}) present in
// both payloads; z = |a-b| / sqrt(sigma_a^2 + sigma_b^2), pass at |z| <= 3.
// Two exact values compare at absolute tolerance 1e-12.  Throws SchemaError
// when the records share no quantity keys.
CompareReport compare_records(const nlohmann::json& a, const nlohmann::json& b);

struct SuiteItem {
  std::string config;
  std::string kind;
  int exit_code = 0;
  std::string record_path;
  std::string message;
};
struct SuiteReport {
  std::vector<SuiteItem> items;
  int exit_code = 0;  // precedence: io > schema > certificate > ok
};

// Runs every *.json under dir (sorted), writing records as `run` would.
SuiteReport run_suite(const std::string& dir);

}  // namespace loopdet
