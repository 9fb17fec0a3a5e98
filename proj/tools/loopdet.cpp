// loopdet: command-line driver for the experiment layer.
//
//   loopdet run <config.json>     run one experiment, write its record
//   loopdet compare <a> <b>       cross-validate two result records
//   loopdet suite <dir>           run every *.json config under a directory
//
// Exit codes: 0 ok, 2 config/schema violation, 3 numerical certificate
// failure (the record is still written), 4 I/O failure.

#include <cstdio>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "loopdet/experiment.hpp"

namespace {

using nlohmann::json;

json load_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw loopdet::IoError("cannot read record file " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw loopdet::SchemaError(path + ": not valid JSON: " + e.what());
  }
  return doc;
}

void print_checks(const json& record) {
  if (!record.contains("checks")) return;
  for (const json& c : record.at("checks")) {
    std::string extra;
    if (c.contains("z")) extra = "  z = " + std::to_string(c.at("z").get<double>());
    std::printf("  [%s] %s%s\n", c.at("pass").get<bool>() ? "pass" : "FAIL",
                c.at("name").get<std::string>().c_str(), extra.c_str());
  }
}

int cmd_run(const std::string& config) {
  loopdet::RunOutcome outcome;
  std::filesystem::path record_path;
  std::string error;
  const int code = loopdet::run_and_write(config, &outcome, &record_path, &error);
  if (code == loopdet::kExitSchema || code == loopdet::kExitIo || code == 1) {
    std::fprintf(stderr, "loopdet run: %s\n", error.c_str());
    return code;
  }
  std::printf("record: %s\n", record_path.string().c_str());
  print_checks(outcome.record);
  std::printf("%s\n", outcome.pass ? "PASS" : "CERTIFICATE FAILURE");
  return code;
}

int cmd_compare(const std::string& a_path, const std::string& b_path) {
  const json a = load_record(a_path);
  const json b = load_record(b_path);
  const loopdet::CompareReport report = loopdet::compare_records(a, b);
  for (const loopdet::CompareKey& k : report.keys)
    std::printf("  [%s] %-40s a = %.12g  b = %.12g  z = %.3g\n", k.pass ? "pass" : "FAIL",
                k.key.c_str(), k.a, k.b, k.z);
  std::printf("%zu shared quantities: %s\n", report.keys.size(),
              report.all_pass ? "PASS" : "MISMATCH");
  return report.all_pass ? loopdet::kExitOk : loopdet::kExitCertificate;
}

int cmd_suite(const std::string& dir) {
  const loopdet::SuiteReport report = loopdet::run_suite(dir);
  for (const loopdet::SuiteItem& item : report.items) {
    if (item.exit_code == loopdet::kExitOk || item.exit_code == loopdet::kExitCertificate)
      std::printf("  [%s] %s -> %s\n", item.exit_code == loopdet::kExitOk ? "pass" : "FAIL",
                  item.config.c_str(), item.record_path.c_str());
    else
      std::printf("  [error %d] %s: %s\n", item.exit_code, item.config.c_str(),
                  item.message.c_str());
  }
  std::printf("%zu configs, exit %d\n", report.items.size(), report.exit_code);
  return report.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monte Carlo determinants of connection Laplacians on flat tori"};
  app.require_subcommand(1);

  std::string config, cmp_a, cmp_b, suite_dir;
  CLI::App* run = app.add_subcommand("run", "run one experiment config and write its record");
  run->add_option("config", config, "JSON experiment config")->required();
  CLI::App* cmp = app.add_subcommand("compare", "cross-validate two result records");
  cmp->add_option("a", cmp_a, "first record")->required();
  cmp->add_option("b", cmp_b, "second record")->required();
  CLI::App* suite = app.add_subcommand("suite", "run every *.json config under a directory");
  suite->add_option("dir", suite_dir, "config directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Bad invocations are schema failures; --help and friends stay 0.
    const int code = app.exit(e);
    return code == 0 ? 0 : loopdet::kExitSchema;
  }

  try {
    if (run->parsed()) return cmd_run(config);
    if (cmp->parsed()) return cmd_compare(cmp_a, cmp_b);
    return cmd_suite(suite_dir);
  } catch (const loopdet::IoError& e) {
    std::fprintf(stderr, "loopdet: %s\n", e.what());
    return loopdet::kExitIo;
  } catch (const loopdet::SchemaError& e) {
    std::fprintf(stderr, "loopdet: %s\n", e.what());
    return loopdet::kExitSchema;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "loopdet: %s\n", e.what());
    return 1;
  }
}
