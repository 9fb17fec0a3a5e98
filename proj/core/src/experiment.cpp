#include "loopdet/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "loopdet/estimator.hpp"
#include "loopdet/gff.hpp"
#include "loopdet/parallel.hpp"
#include "loopdet/paths.hpp"
#include "loopdet/rng.hpp"
#include "loopdet/spectral.hpp"
#include "loopdet/stats.hpp"

namespace loopdet {

using nlohmann::json;
using cplx = std::complex<double>;

namespace {

// ---------------------------------------------------------------- utilities

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Quantity nodes: every payload numeric carries an uncertainty (statistical
// "stderr", deterministic "syst" bound, or both) or an exactness flag.
json q_stat(double v, double se) { return json{{"value", v}, {"stderr", se}}; }
json q_stat(double v, double se, double syst) {
  return json{{"value", v}, {"stderr", se}, {"syst", syst}};
}
json q_bound(double v, double bound) { return json{{"value", v}, {"stderr", 0.0}, {"syst", bound}}; }
json q_exact(double v) { return json{{"value", v}, {"exact", true}}; }

json check_node(const std::string& name, bool pass) { return json{{"name", name}, {"pass", pass}}; }

// z with a guard for exact agreement at zero combined uncertainty.
double z_score(double a, double b, double sigma) {
  const double d = std::abs(a - b);
  if (sigma > 0.0) return d / sigma;
  return d == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------- schema

[[noreturn]] void fail(const std::string& ctx, const std::string& msg) {
  throw SchemaError(ctx + ": " + msg);
}

void require_object(const json& v, const std::string& ctx) {
  if (!v.is_object()) fail(ctx, "expected an object");
}

// Unknown keys are rejected everywhere: catches typos that would otherwise
// silently run a different experiment than the author intended.
void check_keys(const json& obj, const std::string& ctx, const std::vector<std::string>& required,
                const std::vector<std::string>& optional) {
  require_object(obj, ctx);
  for (const auto& [key, _] : obj.items()) {
    const bool known = std::find(required.begin(), required.end(), key) != required.end() ||
                       std::find(optional.begin(), optional.end(), key) != optional.end();
    if (!known) fail(ctx, "unknown key \"" + key + "\"");
  }
  for (const std::string& key : required)
    if (!obj.contains(key)) fail(ctx, "missing required key \"" + key + "\"");
}

void require_key(const json& obj, const std::string& key, const std::string& ctx) {
  if (!obj.contains(key)) fail(ctx, "missing required key \"" + key + "\"");
}

double get_num(const json& obj, const std::string& key, const std::string& ctx) {
  require_key(obj, key, ctx);
  const json& v = obj.at(key);
  if (!v.is_number()) fail(ctx, "\"" + key + "\" must be a number");
  return v.get<double>();
}

double get_num_or(const json& obj, const std::string& key, const std::string& ctx, double dflt) {
  return obj.contains(key) ? get_num(obj, key, ctx) : dflt;
}

long long get_int(const json& obj, const std::string& key, const std::string& ctx) {
  require_key(obj, key, ctx);
  const json& v = obj.at(key);
  if (!v.is_number_integer()) fail(ctx, "\"" + key + "\" must be an integer");
  return v.get<long long>();
}

long long get_int_or(const json& obj, const std::string& key, const std::string& ctx,
                     long long dflt) {
  return obj.contains(key) ? get_int(obj, key, ctx) : dflt;
}

bool get_bool_or(const json& obj, const std::string& key, const std::string& ctx, bool dflt) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_boolean()) fail(ctx, "\"" + key + "\" must be a boolean");
  return v.get<bool>();
}

std::string get_str(const json& obj, const std::string& key, const std::string& ctx) {
  require_key(obj, key, ctx);
  const json& v = obj.at(key);
  if (!v.is_string()) fail(ctx, "\"" + key + "\" must be a string");
  return v.get<std::string>();
}

std::vector<double> get_num_array(const json& v, const std::string& ctx) {
  if (!v.is_array()) fail(ctx, "expected an array of numbers");
  std::vector<double> out;
  for (const json& e : v) {
    if (!e.is_number()) fail(ctx, "expected an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

// --------------------------------------------------------- config sub-parsers

TorusSpec parse_manifold(const json& m) {
  check_keys(m, "manifold", {"dim", "side"}, {});
  const int dim = static_cast<int>(get_int(m, "dim", "manifold"));
  const std::vector<double> side = get_num_array(m.at("side"), "manifold.side");
  if (dim < 2 || dim > 3) fail("manifold", "dim must be 2 or 3");
  if (static_cast<int>(side.size()) != dim) fail("manifold", "side must list dim lengths");
  std::array<double, 3> s{1.0, 1.0, 1.0};
  for (int j = 0; j < dim; ++j) s[static_cast<std::size_t>(j)] = side[static_cast<std::size_t>(j)];
  TorusSpec torus = TorusSpec::box(dim, s);
  try {
    torus.validate();
  } catch (const std::invalid_argument& e) {
    fail("manifold", e.what());
  }
  return torus;
}

MassField parse_mass(const json& m, const TorusSpec& torus) {
  check_keys(m, "mass", {}, {"constant", "field"});
  if (m.contains("constant") == m.contains("field"))
    fail("mass", "exactly one of \"constant\" or \"field\"");
  if (m.contains("constant")) {
    const double c = get_num(m, "constant", "mass");
    if (!(c >= 0.0)) fail("mass", "constant must be >= 0");
    return MassField::constant_mass(c);
  }
  const json& f = m.at("field");
  check_keys(f, "mass.field", {"form", "base", "amplitude"}, {"axis"});
  if (get_str(f, "form", "mass.field") != "cosine")
    fail("mass.field", "the only named form is \"cosine\"");
  const double base = get_num(f, "base", "mass.field");
  const double amp = get_num(f, "amplitude", "mass.field");
  const int axis = static_cast<int>(get_int_or(f, "axis", "mass.field", 0));
  if (axis < 0 || axis >= torus.dim) fail("mass.field", "axis out of range");
  const double lower = base - std::abs(amp);
  if (!(lower > 0.0)) fail("mass.field", "base - |amplitude| must be positive");
  const double omega = 2.0 * M_PI / torus.side[axis];
  return MassField::field(
      [base, amp, axis, omega](const Vec& x) { return base + amp * std::cos(omega * x[axis]); },
      lower);
}

ScalarField parse_scalar_field(const json& f, const TorusSpec& torus, const std::string& ctx) {
  check_keys(f, ctx, {"form", "amplitude"}, {"axis"});
  if (get_str(f, "form", ctx) != "cosine") fail(ctx, "the only named form is \"cosine\"");
  const double amp = get_num(f, "amplitude", ctx);
  const int axis = static_cast<int>(get_int_or(f, "axis", ctx, 0));
  if (axis < 0 || axis >= torus.dim) fail(ctx, "axis out of range");
  const double omega = 2.0 * M_PI / torus.side[axis];
  return ScalarField{[amp, axis, omega](const Vec& x) { return amp * std::cos(omega * x[axis]); },
                     std::abs(amp)};
}

ConnectionSpec parse_connection(const json& c, const TorusSpec& torus, const std::string& ctx) {
  const std::string form = get_str(c, "form", ctx);
  try {
    if (form == "trivial") {
      check_keys(c, ctx, {"name", "form"}, {"rank"});
      return ConnectionSpec::trivial(static_cast<int>(get_int_or(c, "rank", ctx, 1)));
    }
    if (form == "flat-abelian") {
      check_keys(c, ctx, {"name", "form", "theta"}, {});
      const std::vector<double> th = get_num_array(c.at("theta"), ctx + ".theta");
      if (static_cast<int>(th.size()) != torus.dim) fail(ctx, "theta must list dim components");
      std::array<double, 3> theta{0.0, 0.0, 0.0};
      for (int j = 0; j < torus.dim; ++j)
        theta[static_cast<std::size_t>(j)] = th[static_cast<std::size_t>(j)];
      return ConnectionSpec::flat_abelian(theta);
    }
    if (form == "su2-axis") {
      // a_j = c_j * i * sigma_j (Pauli matrices in axis order).
      check_keys(c, ctx, {"name", "form", "coeff"}, {});
      const std::vector<double> co = get_num_array(c.at("coeff"), ctx + ".coeff");
      if (static_cast<int>(co.size()) != torus.dim) fail(ctx, "coeff must list dim entries");
      std::vector<Mat> a;
      for (int j = 0; j < torus.dim; ++j) {
        Mat s(2, 2);
        if (j == 0)
          s << 0, 1, 1, 0;
        else if (j == 1)
          s << 0, cplx(0, -1), cplx(0, 1), 0;
        else
          s << 1, 0, 0, -1;
        a.push_back(cplx(0.0, co[static_cast<std::size_t>(j)]) * s);
      }
      return ConnectionSpec::constant(a);
    }
    if (form == "levy-area") {
      // Lift field i pi B (x1 dx2 - x2 dx1); defined on zero-winding loops.
      check_keys(c, ctx, {"name", "form", "b"}, {});
      if (torus.dim != 2) fail(ctx, "levy-area needs dim == 2");
      const double b = get_num(c, "b", ctx);
      return ConnectionSpec::field_one_form(
          1, 2,
          [b](const Vec& x, std::vector<Mat>& a) {
            a[0](0, 0) = cplx(0.0, -M_PI * b * x[1]);
            a[1](0, 0) = cplx(0.0, M_PI * b * x[0]);
          },
          true);
    }
  } catch (const std::invalid_argument& e) {
    fail(ctx, e.what());
  }
  fail(ctx, "unknown form \"" + form + "\"");
}

StepsPolicy parse_steps(const json& s, const std::string& ctx) {
  check_keys(s, ctx, {}, {"n_min", "h0"});
  StepsPolicy p;
  p.n_min = static_cast<int>(get_int_or(s, "n_min", ctx, p.n_min));
  p.h0 = get_num_or(s, "h0", ctx, p.h0);
  if (p.n_min < 1 || !(p.h0 > 0.0)) fail(ctx, "need n_min >= 1 and h0 > 0");
  return p;
}

SoupConfig parse_soup(const json& s, const TorusSpec& torus) {
  check_keys(s, "soup", {"alpha", "t_min", "t_max"}, {"steps", "salt"});
  SoupConfig cfg;
  cfg.torus = torus;
  cfg.alpha = get_num(s, "alpha", "soup");
  cfg.t_min = get_num(s, "t_min", "soup");
  cfg.t_max = get_num(s, "t_max", "soup");
  if (s.contains("steps")) cfg.steps = parse_steps(s.at("steps"), "soup.steps");
  cfg.stream_salt = static_cast<std::uint64_t>(get_int_or(s, "salt", "soup", 0));
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    fail("soup", e.what());
  }
  return cfg;
}

Vec parse_point(const json& v, const TorusSpec& torus, const std::string& ctx) {
  const std::vector<double> p = get_num_array(v, ctx);
  if (static_cast<int>(p.size()) != torus.dim) fail(ctx, "point must list dim coordinates");
  Vec out{0.0, 0.0, 0.0};
  for (int j = 0; j < torus.dim; ++j) out[j] = p[static_cast<std::size_t>(j)];
  return out;
}

Section parse_section(const json& v, const TorusSpec& torus, int rank, const std::string& ctx) {
  if (!v.is_array() || v.empty()) fail(ctx, "a section is a non-empty array of mode terms");
  Section s;
  for (const json& term : v) {
    check_keys(term, ctx, {"n", "v"}, {});
    const std::vector<double> n = get_num_array(term.at("n"), ctx + ".n");
    if (static_cast<int>(n.size()) != torus.dim) fail(ctx, "mode n must list dim integers");
    std::array<int, 3> mode{0, 0, 0};
    for (int j = 0; j < torus.dim; ++j) {
      const double c = n[static_cast<std::size_t>(j)];
      if (c != std::floor(c)) fail(ctx, "mode n must be integral");
      mode[static_cast<std::size_t>(j)] = static_cast<int>(c);
    }
    const json& coeffs = term.at("v");
    if (!coeffs.is_array() || static_cast<int>(coeffs.size()) != rank)
      fail(ctx, "v must list rank [re, im] pairs");
    Eigen::VectorXcd vec(rank);
    for (int k = 0; k < rank; ++k) {
      const std::vector<double> c = get_num_array(coeffs.at(static_cast<std::size_t>(k)),
                                                  ctx + ".v");
      if (c.size() != 2) fail(ctx, "each coefficient is an [re, im] pair");
      vec(k) = cplx(c[0], c[1]);
    }
    s.terms.push_back({mode, vec});
  }
  return s;
}

// Per-kind schema: which top-level blocks are required / allowed.
struct KindShape {
  enum class Block { Forbidden, Optional, Required };
  bool manifold = true;
  bool mass = true;
  Block connections = Block::Required;
  Block soup = Block::Optional;
};

KindShape shape_for(const std::string& kind) {
  using Block = KindShape::Block;
  KindShape s;
  if (kind == "campbell") {
    s.manifold = s.mass = false;
    s.connections = Block::Forbidden;
    s.soup = Block::Forbidden;
  } else if (kind == "soup-sample") {
    s.connections = Block::Forbidden;
    s.soup = Block::Required;
  } else if (kind == "estimate-det" || kind == "conformal") {
    s.soup = Block::Required;
  } else if (kind == "moments") {
    // The small-t study reads a named connection; the rotation-field study
    // builds its own from params, and neither uses the mass.
    s.mass = false;
    s.connections = Block::Optional;
  } else if (kind == "validate-kernel" || kind == "integral-form" || kind == "spectral-oracle" ||
             kind == "symanzik") {
    // defaults: manifold + mass + connections required, soup optional
  } else {
    fail("kind", "unknown experiment kind \"" + kind + "\"");
  }
  return s;
}

bool kind_needs_replicas(const std::string& kind) { return kind != "spectral-oracle"; }

}  // namespace

// ------------------------------------------------------------- public parse

const ConnectionSpec& ExperimentConfig::connection(const std::string& name) const {
  for (std::size_t i = 0; i < conn_names.size(); ++i)
    if (conn_names[i] == name) return conns[i];
  throw SchemaError("params: unknown connection \"" + name + "\"");
}

ExperimentConfig parse_config(const json& doc) {
  check_keys(doc, "config", {"kind", "seed"},
             {"schema_version", "description", "manifold", "mass", "connections", "soup",
              "replicas", "output", "params"});
  if (doc.contains("schema_version") && doc.at("schema_version") != 1)
    fail("config", "unsupported schema_version");
  if (doc.contains("description") && !doc.at("description").is_string())
    fail("config", "description must be a string");

  ExperimentConfig cfg;
  cfg.kind = get_str(doc, "kind", "config");
  const KindShape shape = shape_for(cfg.kind);
  cfg.seed = static_cast<std::uint64_t>(get_int(doc, "seed", "config"));

  if (kind_needs_replicas(cfg.kind)) {
    if (!doc.contains("replicas")) fail("config", "missing required key \"replicas\"");
    cfg.replicas = get_int(doc, "replicas", "config");
    if (cfg.replicas < 1) fail("config", "replicas must be >= 1");
  } else if (doc.contains("replicas")) {
    fail("config", "\"replicas\" has no meaning for kind " + cfg.kind);
  }

  if (shape.manifold) {
    if (!doc.contains("manifold")) fail("config", "missing required key \"manifold\"");
    cfg.torus = parse_manifold(doc.at("manifold"));
  } else if (doc.contains("manifold")) {
    fail("config", "\"manifold\" has no meaning for kind " + cfg.kind);
  }

  if (shape.mass) {
    if (!doc.contains("mass")) fail("config", "missing required key \"mass\"");
    cfg.mass = parse_mass(doc.at("mass"), cfg.torus);
  } else if (doc.contains("mass")) {
    fail("config", "\"mass\" has no meaning for kind " + cfg.kind);
  }

  if (doc.contains("connections")) {
    if (shape.connections == KindShape::Block::Forbidden)
      fail("config", "\"connections\" has no meaning for kind " + cfg.kind);
    const json& arr = doc.at("connections");
    if (!arr.is_array() || arr.empty()) fail("connections", "expected a non-empty array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string ctx = "connections[" + std::to_string(i) + "]";
      require_object(arr.at(i), ctx);
      const std::string name = get_str(arr.at(i), "name", ctx);
      if (std::find(cfg.conn_names.begin(), cfg.conn_names.end(), name) != cfg.conn_names.end())
        fail(ctx, "duplicate connection name \"" + name + "\"");
      cfg.conn_names.push_back(name);
      cfg.conns.push_back(parse_connection(arr.at(i), cfg.torus, ctx));
    }
  } else if (shape.connections == KindShape::Block::Required) {
    fail("config", "missing required key \"connections\"");
  }

  if (doc.contains("soup")) {
    if (shape.soup == KindShape::Block::Forbidden)
      fail("config", "\"soup\" has no meaning for kind " + cfg.kind);
    cfg.soup = parse_soup(doc.at("soup"), cfg.torus);
    cfg.has_soup = true;
  } else if (shape.soup == KindShape::Block::Required) {
    fail("config", "kind " + cfg.kind + " requires a \"soup\" block");
  }

  if (doc.contains("output")) cfg.output = get_str(doc, "output", "config");
  cfg.params = doc.contains("params") ? doc.at("params") : json::object();
  require_object(cfg.params, "params");
  cfg.raw = doc;
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw SchemaError(path + ": not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

std::string config_hash(const json& doc) { return fnv1a_hex(doc.dump()); }

// ------------------------------------------------------------------ runners

namespace {

struct KindResult {
  json payload = json::object();
  json tables = json::object();  // exported verbatim as CSV when asked
  std::vector<json> checks;
};

double mass_constant_or_fail(const ExperimentConfig& cfg, const std::string& who) {
  if (!cfg.mass.constant) fail(who, "requires a constant mass");
  return cfg.mass.const_value;
}

StepsPolicy steps_of(const ExperimentConfig& cfg) {
  return cfg.has_soup ? cfg.soup.steps : StepsPolicy{};
}

// Bridge studies may pin the discretization in params; flat-abelian holonomy
// is exact in the winding class, so coarse policies are legitimate there.
StepsPolicy steps_override(const ExperimentConfig& cfg, const std::string& ctx) {
  if (cfg.params.contains("steps")) return parse_steps(cfg.params.at("steps"), ctx + ".steps");
  return steps_of(cfg);
}

// Deterministic determinant oracle exp(alpha [zeta_1'(0)/n1 - zeta_0'(0)/n0])
// with every truncation / quadrature certificate folded into one bound.
struct OracleDet {
  double log_value = 0.0;
  double log_err = 0.0;
  double ratio = 1.0;
  double ratio_err = 0.0;
  ZetaDiffResult zeta;
};

OracleDet det_oracle(const ExperimentConfig& cfg, const ConnectionSpec& c0,
                     const ConnectionSpec& c1, double alpha, double t0, int n_max_floor) {
  const double m = mass_constant_or_fail(cfg, "spectral oracle");
  const double a_norm = std::max(connection_sup_norm(cfg.torus, c0),
                                 connection_sup_norm(cfg.torus, c1));
  const int box = std::max(n_max_floor, spectral_box_for(cfg.torus, t0, a_norm));
  const SpectralModel m0(cfg.torus, c0, m, box);
  const SpectralModel m1(cfg.torus, c1, m, box);
  OracleDet o;
  o.zeta = zeta_prime_diff(m1, m0, t0);
  o.log_value = alpha * o.zeta.value;
  o.log_err = alpha * (o.zeta.quad_error + o.zeta.small_t_residual + o.zeta.large_t_bound +
                       o.zeta.box_tail_bound);
  o.ratio = std::exp(o.log_value);
  o.ratio_err = o.ratio * o.log_err;
  return o;
}

void add_if_finite(json& payload, const std::string& key, const json& node) {
  if (std::isfinite(node.at("value").get<double>())) payload[key] = node;
}

// |mean| * (e^b - 1): absolute-scale version of a log-scale bias bound b.
double bias_abs(double mean, double log_bound) {
  if (!std::isfinite(log_bound)) return 0.0;
  return std::abs(mean) * std::expm1(log_bound);
}

// ---- estimate-det -----------------------------------------------------

KindResult run_estimate_det(const ExperimentConfig& cfg) {
  const std::string ctx = "params(estimate-det)";
  check_keys(cfg.params, ctx, {"conn0", "conn1"},
             {"bands", "pilot", "symmetrize", "mass_mode", "oracle", "small_t_fit",
              "stderr_target_rel", "strict_diamagnetic", "zeta_t0", "zeta_n_max", "csv"});
  const ConnectionSpec& c0 = cfg.connection(get_str(cfg.params, "conn0", ctx));
  const ConnectionSpec& c1 = cfg.connection(get_str(cfg.params, "conn1", ctx));

  EstimatorOptions opt;
  opt.n_bands = static_cast<int>(get_int_or(cfg.params, "bands", ctx, 12));
  opt.pilot = get_int_or(cfg.params, "pilot", ctx, 400);
  opt.replicas = cfg.replicas;
  opt.symmetrize = get_bool_or(cfg.params, "symmetrize", ctx, true);
  opt.seed = cfg.seed;
  if (cfg.params.contains("mass_mode")) {
    const std::string mm = get_str(cfg.params, "mass_mode", ctx);
    if (mm == "auto")
      opt.mass_mode = MassMode::Auto;
    else if (mm == "weight")
      opt.mass_mode = MassMode::Weight;
    else if (mm == "thin")
      opt.mass_mode = MassMode::Thin;
    else
      fail(ctx, "mass_mode must be auto | weight | thin");
  }

  const json fit = cfg.params.value("small_t_fit", json::object());
  check_keys(fit, ctx + ".small_t_fit", {}, {"nodes", "samples"});
  const int fit_nodes = static_cast<int>(get_int_or(fit, "nodes", ctx, 9));
  const long long fit_samples = get_int_or(fit, "samples", ctx, 4000);
  opt.fitted_c = fit_chi_quadratic_bound(cfg.torus, cfg.mass, c0, c1, cfg.soup.t_min, fit_nodes,
                                         fit_samples, cfg.seed, cfg.soup.steps);

  const ProductEstimate est = estimate_partition_ratio(cfg.soup, cfg.mass, c0, c1, opt);

  KindResult out;
  const double b_small = bias_abs(est.mean.real(), est.small_t_bias_bound);
  const double b_large = bias_abs(est.mean.real(), est.large_r_bias_bound);
  out.payload["ratio_re"] = q_stat(est.mean.real(), est.stderr_mean, b_small + b_large);
  if (opt.symmetrize) out.payload["ratio_im"] = q_exact(est.mean.imag());
  add_if_finite(out.payload, "log_mean", q_stat(est.log_mean, est.log_stderr));
  out.payload["n_replicas"] = q_exact(static_cast<double>(est.n_replicas));
  out.payload["alpha"] = q_exact(cfg.soup.alpha);
  out.payload["fitted_c"] = q_exact(opt.fitted_c);
  add_if_finite(out.payload, "bias_small_log", q_exact(est.small_t_bias_bound));
  add_if_finite(out.payload, "bias_large_log", q_exact(est.large_r_bias_bound));

  json bands = json::array();
  for (const ProductEstimate::Band& b : est.bands)
    bands.push_back({b.t_lo, b.t_hi, static_cast<double>(b.n), b.mean.real(), b.se});
  out.tables["bands"] = {{"columns", {"t_lo", "t_hi", "n", "mean_re", "se"}}, {"rows", bands}};

  if (get_bool_or(cfg.params, "oracle", ctx, true)) {
    const double t0 = get_num_or(cfg.params, "zeta_t0", ctx, 1e-3);
    const int n_floor = static_cast<int>(get_int_or(cfg.params, "zeta_n_max", ctx, 0));
    const OracleDet od = det_oracle(cfg, c0, c1, cfg.soup.alpha, t0, n_floor);
    out.payload["oracle_log_re"] = q_bound(od.log_value, od.log_err);
    out.payload["oracle_ratio_re"] = q_bound(od.ratio, od.ratio_err);

    const double diff = std::abs(est.mean.real() - od.ratio);
    const double tol = 3.0 * est.stderr_mean + b_small + b_large + od.ratio_err;
    json c = check_node("oracle_match", diff <= tol);
    c["diff"] = diff;
    c["tol"] = tol;
    c["z"] = z_score(est.mean.real(), od.ratio, std::hypot(est.stderr_mean, od.ratio_err));
    out.checks.push_back(c);
  }

  if (cfg.params.contains("stderr_target_rel")) {
    const double rel = get_num(cfg.params, "stderr_target_rel", ctx);
    json c = check_node("stderr_target",
                        est.stderr_mean <= rel * std::abs(est.mean.real()));
    c["stderr"] = est.stderr_mean;
    c["target"] = rel * std::abs(est.mean.real());
    out.checks.push_back(c);
  }

  {
    json c = check_node("diamagnetic", est.mean.real() <= 1.0 + 3.0 * est.stderr_mean);
    c["margin"] = 1.0 - est.mean.real();
    out.checks.push_back(c);
  }
  if (get_bool_or(cfg.params, "strict_diamagnetic", ctx, false)) {
    json c = check_node("diamagnetic_strict",
                        1.0 - est.mean.real() > 3.0 * est.stderr_mean);
    c["margin"] = 1.0 - est.mean.real();
    c["three_se"] = 3.0 * est.stderr_mean;
    out.checks.push_back(c);
  }
  return out;
}

// ---- integral-form ----------------------------------------------------

KindResult run_integral_form(const ExperimentConfig& cfg) {
  const std::string ctx = "params(integral-form)";
  check_keys(cfg.params, ctx, {"conn0", "conn1", "t_lo", "t_hi", "nodes", "samples_per_node"},
             {"alpha", "oracle", "zeta_t0", "zeta_n_max", "csv"});
  const ConnectionSpec& c0 = cfg.connection(get_str(cfg.params, "conn0", ctx));
  const ConnectionSpec& c1 = cfg.connection(get_str(cfg.params, "conn1", ctx));
  const double t_lo = get_num(cfg.params, "t_lo", ctx);
  const double t_hi = get_num(cfg.params, "t_hi", ctx);
  const int nodes = static_cast<int>(get_int(cfg.params, "nodes", ctx));
  const long long spn = get_int(cfg.params, "samples_per_node", ctx);
  const double alpha =
      get_num_or(cfg.params, "alpha", ctx, cfg.has_soup ? cfg.soup.alpha : 1.0);

  IntegralFormResult r;
  try {
    r = integral_form_estimate(cfg.torus, cfg.mass, c0, c1, t_lo, t_hi, nodes, spn, alpha,
                               cfg.seed, steps_of(cfg));
  } catch (const std::invalid_argument& e) {
    fail(ctx, e.what());
  }

  KindResult out;
  const double syst = r.ratio * r.grid_error;
  out.payload["ratio_re"] = q_stat(r.ratio, r.ratio_se, syst);
  out.payload["integral"] = q_stat(r.integral, r.integral_se, r.grid_error);
  out.payload["grid_error_log"] = q_exact(r.grid_error);
  out.payload["alpha"] = q_exact(alpha);
  add_if_finite(out.payload, "window_slope", q_stat(r.window_slope, r.window_slope_se));

  json rows = json::array();
  for (std::size_t i = 0; i < r.t_nodes.size(); ++i)
    rows.push_back({r.t_nodes[i], r.chi_mean[i], r.chi_se[i]});
  out.tables["nodes"] = {{"columns", {"t", "chi_mean", "chi_se"}}, {"rows", rows}};

  if (get_bool_or(cfg.params, "oracle", ctx, true)) {
    const double t0 = get_num_or(cfg.params, "zeta_t0", ctx, 1e-3);
    const int n_floor = static_cast<int>(get_int_or(cfg.params, "zeta_n_max", ctx, 0));
    const OracleDet od = det_oracle(cfg, c0, c1, alpha, t0, n_floor);
    out.payload["oracle_ratio_re"] = q_bound(od.ratio, od.ratio_err);
    const double sigma = std::sqrt(r.ratio_se * r.ratio_se + syst * syst +
                                   od.ratio_err * od.ratio_err);
    json c = check_node("oracle_match", z_score(r.ratio, od.ratio, sigma) <= 3.0);
    c["z"] = z_score(r.ratio, od.ratio, sigma);
    out.checks.push_back(c);
  }
  return out;
}

// ---- spectral-oracle --------------------------------------------------

KindResult run_spectral_oracle(const ExperimentConfig& cfg) {
  const std::string ctx = "params(spectral-oracle)";
  check_keys(cfg.params, ctx, {"conn0", "conn1"}, {"alpha", "zeta_t0", "zeta_n_max"});
  const ConnectionSpec& c0 = cfg.connection(get_str(cfg.params, "conn0", ctx));
  const ConnectionSpec& c1 = cfg.connection(get_str(cfg.params, "conn1", ctx));
  const double alpha =
      get_num_or(cfg.params, "alpha", ctx, cfg.has_soup ? cfg.soup.alpha : 1.0);
  const double t0 = get_num_or(cfg.params, "zeta_t0", ctx, 1e-3);
  const int n_floor = static_cast<int>(get_int_or(cfg.params, "zeta_n_max", ctx, 0));

  const OracleDet od = det_oracle(cfg, c0, c1, alpha, t0, n_floor);
  const double m = cfg.mass.const_value;
  const double a_norm = std::max(connection_sup_norm(cfg.torus, c0),
                                 connection_sup_norm(cfg.torus, c1));
  const int box = std::max(n_floor, spectral_box_for(cfg.torus, t0, a_norm));

  KindResult out;
  out.payload["zeta_diff"] = q_bound(od.zeta.value, od.log_err / std::max(alpha, 1e-300));
  out.payload["log_re"] = q_bound(od.log_value, od.log_err);
  out.payload["ratio_re"] = q_bound(od.ratio, od.ratio_err);
  out.payload["alpha"] = q_exact(alpha);
  out.payload["min_eigenvalue_0"] =
      q_exact(SpectralModel(cfg.torus, c0, m, box).min_eigenvalue());
  out.payload["min_eigenvalue_1"] =
      q_exact(SpectralModel(cfg.torus, c1, m, box).min_eigenvalue());
  return out;
}

// ---- validate-kernel --------------------------------------------------

KindResult run_validate_kernel(const ExperimentConfig& cfg) {
  const std::string ctx = "params(validate-kernel)";
  check_keys(cfg.params, ctx, {"t", "x", "y"}, {"connection", "n_max", "steps"});
  const double t = get_num(cfg.params, "t", ctx);
  if (!(t > 0.0)) fail(ctx, "t must be positive");
  const Vec x = parse_point(cfg.params.at("x"), cfg.torus, ctx + ".x");
  const Vec y = parse_point(cfg.params.at("y"), cfg.torus, ctx + ".y");
  const ConnectionSpec& conn =
      cfg.params.contains("connection")
          ? cfg.connection(get_str(cfg.params, "connection", ctx))
          : (cfg.conns.size() == 1
                 ? cfg.conns.front()
                 : throw SchemaError(ctx + ": \"connection\" needed with several candidates"));

  const double m = mass_constant_or_fail(cfg, "validate-kernel");
  const int box = std::max(static_cast<int>(get_int_or(cfg.params, "n_max", ctx, 0)),
                           spectral_box_for(cfg.torus, t, connection_sup_norm(cfg.torus, conn)));
  const SpectralModel model(cfg.torus, conn, m, box);
  const Mat k_spec = model.heat_kernel_matrix(t, x, y);
  const double p = heat_kernel(cfg.torus, t, x, y);
  const double entry_tail = model.heat_trace_tail(t) / cfg.torus.volume();
  // The spectral side includes the killing factor; keep both sides massive.
  const double kill = std::exp(-m * t);

  const int rank = conn.rank;
  const StepsPolicy steps = steps_override(cfg, ctx);
  const int n_steps = steps_for(t, steps);
  const std::size_t n_chunks = 256;
  std::vector<std::vector<WelfordC>> slot(n_chunks,
                                          std::vector<WelfordC>(static_cast<std::size_t>(rank * rank)));
  const long long n = cfg.replicas;
  parallel_for(n_chunks, default_workers(), [&](std::size_t c) {
    Rng rng = make_stream(cfg.seed, {stream::bridge_study, 3, c});
    const long long lo = n * static_cast<long long>(c) / static_cast<long long>(n_chunks);
    const long long hi = n * static_cast<long long>(c + 1) / static_cast<long long>(n_chunks);
    for (long long i = lo; i < hi; ++i) {
      const LoopPath path = sample_bridge(cfg.torus, t, x, y, n_steps, rng);
      const Mat u = holonomy(path, conn);
      for (int r = 0; r < rank; ++r)
        for (int s = 0; s < rank; ++s)
          slot[c][static_cast<std::size_t>(r * rank + s)].add(u(r, s));
    }
  });
  std::vector<WelfordC> acc(static_cast<std::size_t>(rank * rank));
  for (const auto& chunk : slot)
    for (std::size_t e = 0; e < acc.size(); ++e) acc[e].merge(chunk[e]);

  KindResult out;
  out.payload["t"] = q_exact(t);
  out.payload["p_t"] = q_exact(p);
  for (int r = 0; r < rank; ++r)
    for (int s = 0; s < rank; ++s) {
      const std::string tag = std::to_string(r) + std::to_string(s);
      const WelfordC& w = acc[static_cast<std::size_t>(r * rank + s)];
      const cplx spec = k_spec(r, s);
      const cplx mc = kill * p * w.mean();
      const double se_re = kill * p * w.se_re(), se_im = kill * p * w.se_im();
      out.payload["k" + tag + "_spectral_re"] = q_bound(spec.real(), entry_tail);
      out.payload["k" + tag + "_spectral_im"] = q_bound(spec.imag(), entry_tail);
      out.payload["k" + tag + "_mc_re"] = q_stat(mc.real(), se_re);
      out.payload["k" + tag + "_mc_im"] = q_stat(mc.imag(), se_im);
      json cre = check_node("fk_" + tag + "_re",
                            std::abs(spec.real() - mc.real()) <= 3.0 * se_re + entry_tail);
      cre["z"] = z_score(spec.real(), mc.real(), se_re);
      out.checks.push_back(cre);
      json cim = check_node("fk_" + tag + "_im",
                            std::abs(spec.imag() - mc.imag()) <= 3.0 * se_im + entry_tail);
      cim["z"] = z_score(spec.imag(), mc.imag(), se_im);
      out.checks.push_back(cim);
    }
  return out;
}

// ---- soup-sample ------------------------------------------------------

KindResult run_soup_sample(const ExperimentConfig& cfg) {
  const std::string ctx = "params(soup-sample)";
  check_keys(cfg.params, ctx, {}, {"save", "save_replicas", "with_paths"});
  const SoupSampler sampler(cfg.soup);

  const std::size_t n_chunks = 128;
  struct Slot {
    Welford count, duration;
  };
  std::vector<Slot> slot(n_chunks);
  const long long n = cfg.replicas;
  parallel_for(n_chunks, default_workers(), [&](std::size_t c) {
    const long long lo = n * static_cast<long long>(c) / static_cast<long long>(n_chunks);
    const long long hi = n * static_cast<long long>(c + 1) / static_cast<long long>(n_chunks);
    for (long long r = lo; r < hi; ++r) {
      long long count = 0;
      sampler.visit_replica(cfg.seed, static_cast<std::uint64_t>(r),
                            [&](const LoopEvent& ev, PathMaker&) {
                              ++count;
                              slot[c].duration.add(ev.duration);
                            });
      slot[c].count.add(static_cast<double>(count));
    }
  });
  Welford count, duration;
  for (const Slot& s : slot) {
    count.merge(s.count);
    duration.merge(s.duration);
  }

  KindResult out;
  out.payload["expected_count"] = q_exact(sampler.expected_count());
  out.payload["count_mean"] = q_stat(count.mean, count.stderr_mean());
  out.payload["duration_mean"] = q_stat(duration.mean, duration.stderr_mean());
  json c = check_node("count_mean", std::abs(count.mean - sampler.expected_count()) <=
                                        3.0 * count.stderr_mean());
  c["z"] = z_score(count.mean, sampler.expected_count(), count.stderr_mean());
  out.checks.push_back(c);

  if (cfg.params.contains("save")) {
    const std::string file = get_str(cfg.params, "save", ctx);
    const long long keep = get_int_or(cfg.params, "save_replicas", ctx, 4);
    const bool with_paths = get_bool_or(cfg.params, "with_paths", ctx, true);
    try {
      save_soup(realize_soup(cfg.soup, cfg.seed, static_cast<std::uint64_t>(keep), with_paths),
                file);
    } catch (const std::exception& e) {
      throw IoError(std::string("soup-sample: cannot save snapshot: ") + e.what());
    }
    out.payload["snapshot_file"] = file;
  }
  return out;
}

// ---- moments ----------------------------------------------------------

KindResult run_moments_small_t(const ExperimentConfig& cfg) {
  const std::string ctx = "params(moments/small-t)";
  check_keys(cfg.params, ctx, {"study", "connection", "t_grid"}, {"x", "expect", "steps", "csv"});
  const ConnectionSpec& conn = cfg.connection(get_str(cfg.params, "connection", ctx));
  const std::vector<double> t_grid = get_num_array(cfg.params.at("t_grid"), ctx + ".t_grid");
  Vec x{0.0, 0.0, 0.0};
  if (cfg.params.contains("x"))
    x = parse_point(cfg.params.at("x"), cfg.torus, ctx + ".x");
  else
    for (int j = 0; j < cfg.torus.dim; ++j) x[j] = 0.5 * cfg.torus.side[j];

  MomentReport r;
  try {
    r = moments_vs_t(cfg.torus, conn, t_grid, {x}, cfg.replicas, cfg.seed,
                     steps_override(cfg, ctx));
  } catch (const std::invalid_argument& e) {
    fail(ctx, e.what());
  }

  KindResult out;
  auto arr = [](const std::vector<double>& v, const std::vector<double>& se) {
    json a = json::array();
    for (std::size_t i = 0; i < v.size(); ++i) a.push_back(q_stat(v[i], se[i]));
    return a;
  };
  json ts = json::array();
  for (double t : r.t_grid) ts.push_back(q_exact(t));
  out.payload["t_grid"] = ts;
  out.payload["m1"] = arr(r.m1, r.m1_se);
  out.payload["m2"] = arr(r.m2, r.m2_se);
  out.payload["m4"] = arr(r.m4, r.m4_se);
  out.payload["mean_norm"] = arr(r.mean_norm, r.mean_norm_se);
  add_if_finite(out.payload, "slope_m1", q_stat(r.slope_m1.slope, r.slope_m1.slope_se));
  add_if_finite(out.payload, "slope_m2", q_stat(r.slope_m2.slope, r.slope_m2.slope_se));
  add_if_finite(out.payload, "slope_mean", q_stat(r.slope_mean.slope, r.slope_mean.slope_se));

  json rows = json::array();
  for (std::size_t i = 0; i < r.t_grid.size(); ++i)
    rows.push_back({r.t_grid[i], r.m1[i], r.m1_se[i], r.m2[i], r.m2_se[i], r.m4[i], r.m4_se[i],
                    r.mean_norm[i], r.mean_norm_se[i]});
  out.tables["moments"] = {
      {"columns", {"t", "m1", "m1_se", "m2", "m2_se", "m4", "m4_se", "mean_norm", "mean_se"}},
      {"rows", rows}};

  if (cfg.params.contains("expect")) {
    const json& e = cfg.params.at("expect");
    check_keys(e, ctx + ".expect", {}, {"m1", "m2", "mean"});
    auto slope_check = [&](const char* key, double slope, bool finite) {
      if (!e.contains(key)) return;
      const std::vector<double> band = get_num_array(e.at(key), ctx + ".expect");
      if (band.size() != 2) fail(ctx, "expect bands are [target, tolerance]");
      json c = check_node(std::string("slope_") + key,
                          finite && std::abs(slope - band[0]) <= band[1]);
      c["slope"] = slope;
      c["target"] = band[0];
      c["tol"] = band[1];
      out.checks.push_back(c);
    };
    slope_check("m1", r.slope_m1.slope, std::isfinite(r.slope_m1.slope));
    slope_check("m2", r.slope_m2.slope, std::isfinite(r.slope_m2.slope));
    slope_check("mean", r.slope_mean.slope, std::isfinite(r.slope_mean.slope));
  }
  return out;
}

KindResult run_moments_levy(const ExperimentConfig& cfg) {
  const std::string ctx = "params(moments/levy)";
  check_keys(cfg.params, ctx, {"study", "b", "t_list"}, {"base", "steps", "csv"});
  if (cfg.torus.dim != 2) fail(ctx, "the rotation-field study needs dim == 2");
  const double b = get_num(cfg.params, "b", ctx);
  const std::vector<double> t_list = get_num_array(cfg.params.at("t_list"), ctx + ".t_list");
  if (t_list.empty()) fail(ctx, "t_list must be non-empty");
  Vec base{0.4, 0.6, 0.0};
  if (cfg.params.contains("base"))
    base = parse_point(cfg.params.at("base"), cfg.torus, ctx + ".base");

  const ConnectionSpec conn = ConnectionSpec::field_one_form(
      1, 2,
      [b](const Vec& p, std::vector<Mat>& a) {
        a[0](0, 0) = cplx(0.0, -M_PI * b * p[1]);
        a[1](0, 0) = cplx(0.0, M_PI * b * p[0]);
      },
      true);
  const StepsPolicy steps = steps_override(cfg, ctx);

  KindResult out;
  json ts = json::array(), mc_re = json::array(), mc_im = json::array(),
       oracle = json::array();
  json rows = json::array();
  for (std::size_t it = 0; it < t_list.size(); ++it) {
    const double t = t_list[it];
    if (!(t > 0.0)) fail(ctx, "t_list entries must be positive");
    const int n_steps = steps_for(t, steps);
    const std::size_t n_chunks = 64;
    std::vector<WelfordC> slot(n_chunks);
    const long long n = cfg.replicas;
    parallel_for(n_chunks, default_workers(), [&](std::size_t c) {
      Rng rng = make_stream(cfg.seed, {stream::bridge_study, 4, it, c});
      const long long lo = n * static_cast<long long>(c) / static_cast<long long>(n_chunks);
      const long long hi = n * static_cast<long long>(c + 1) / static_cast<long long>(n_chunks);
      for (long long i = lo; i < hi; ++i) {
        const LoopPath path =
            sample_bridge_fixed_winding(cfg.torus, t, base, base, {0, 0, 0}, n_steps, rng);
        slot[c].add(trace_norm(holonomy(path, conn)));
      }
    });
    WelfordC acc;
    for (const WelfordC& w : slot) acc.merge(w);

    const double u = M_PI * b * t;
    const double exact = u == 0.0 ? 1.0 : u / std::sinh(u);
    ts.push_back(q_exact(t));
    mc_re.push_back(q_stat(acc.mean().real(), acc.se_re()));
    mc_im.push_back(q_stat(acc.mean().imag(), acc.se_im()));
    oracle.push_back(q_exact(exact));
    rows.push_back({t, acc.mean().real(), acc.se_re(), exact});

    json c = check_node("levy_t" + std::to_string(t),
                        std::abs(acc.mean().real() - exact) <= 3.0 * acc.se_re());
    c["z"] = z_score(acc.mean().real(), exact, acc.se_re());
    out.checks.push_back(c);
  }
  out.payload["t_list"] = ts;
  out.payload["trace_mc_re"] = mc_re;
  out.payload["trace_mc_im"] = mc_im;
  out.payload["trace_oracle"] = oracle;
  out.tables["levy"] = {{"columns", {"t", "mc_re", "se", "oracle"}}, {"rows", rows}};
  return out;
}

KindResult run_moments(const ExperimentConfig& cfg) {
  const std::string study = get_str(cfg.params, "study", "params(moments)");
  if (study == "small-t") return run_moments_small_t(cfg);
  if (study == "levy") return run_moments_levy(cfg);
  fail("params(moments)", "study must be small-t | levy");
}

// ---- symanzik ---------------------------------------------------------

KindResult run_symanzik(const ExperimentConfig& cfg) {
  const std::string ctx = "params(symanzik)";
  check_keys(cfg.params, ctx, {"ensemble", "f"},
             {"sections_a", "sections_b", "sections", "n_max", "weights_soup", "csv"});
  const json& ens = cfg.params.at("ensemble");
  if (!ens.is_array() || ens.empty()) fail(ctx, "ensemble must be a non-empty array");
  std::vector<EnsembleMember> members;
  for (const json& m : ens) {
    check_keys(m, ctx + ".ensemble", {"connection", "prob"}, {});
    members.push_back({cfg.connection(get_str(m, "connection", ctx)),
                       get_num(m, "prob", ctx + ".ensemble")});
  }
  const std::vector<double> f = get_num_array(cfg.params.at("f"), ctx + ".f");
  const int n_max = static_cast<int>(get_int_or(cfg.params, "n_max", ctx, 3));
  const int rank = members.front().conn.rank;
  const double m = mass_constant_or_fail(cfg, "symanzik");

  const bool complex_case = cfg.params.contains("sections_a");
  if (complex_case == cfg.params.contains("sections"))
    fail(ctx, "give either sections_a + sections_b (complex) or sections (real)");

  SymanzikResult res;
  try {
    if (complex_case) {
      if (!cfg.params.contains("sections_b")) fail(ctx, "sections_a needs sections_b");
      std::vector<Section> a, bsec;
      for (const json& s : cfg.params.at("sections_a"))
        a.push_back(parse_section(s, cfg.torus, rank, ctx + ".sections_a"));
      for (const json& s : cfg.params.at("sections_b"))
        bsec.push_back(parse_section(s, cfg.torus, rank, ctx + ".sections_b"));
      res = symanzik_complex(cfg.torus, m, members, a, bsec, f, cfg.replicas, cfg.seed, n_max);
    } else {
      std::vector<Section> s;
      for (const json& sec : cfg.params.at("sections"))
        s.push_back(parse_section(sec, cfg.torus, rank, ctx + ".sections"));
      res = symanzik_real(cfg.torus, m, members, s, f, cfg.replicas, cfg.seed, n_max);
    }
  } catch (const std::invalid_argument& e) {
    fail(ctx, e.what());
  }

  KindResult out;
  const double f_syst = 1e-9 * std::max(1.0, std::abs(res.formula));
  out.payload["formula_re"] = q_bound(res.formula.real(), f_syst);
  out.payload["formula_im"] = q_bound(res.formula.imag(), f_syst);
  out.payload["direct_re"] = q_stat(res.direct.real(), res.direct_se_re);
  out.payload["direct_im"] = q_stat(res.direct.imag(), res.direct_se_im);
  out.payload["samples"] = q_exact(static_cast<double>(res.samples));
  json ws = json::array(), draws = json::array();
  for (std::size_t k = 0; k < res.weights.size(); ++k) {
    ws.push_back(q_bound(res.weights[k], 1e-9));
    draws.push_back(q_exact(static_cast<double>(res.member_draws[k])));
  }
  out.payload["weights"] = ws;
  out.payload["member_draws"] = draws;

  auto side_check = [&](const char* name, double direct, double formula, double se) {
    const double sigma = std::hypot(se, f_syst);
    json c = check_node(name, z_score(direct, formula, sigma) <= 3.0);
    c["z"] = z_score(direct, formula, sigma);
    out.checks.push_back(c);
  };
  side_check("direct_vs_formula_re", res.direct.real(), res.formula.real(), res.direct_se_re);
  side_check("direct_vs_formula_im", res.direct.imag(), res.formula.imag(), res.direct_se_im);

  {
    bool ok = true;
    double worst = 0.0;
    for (std::size_t k = 0; k < res.weights.size(); ++k) {
      const double w = res.weights[k];
      const double n = static_cast<double>(res.samples);
      const double sigma = std::sqrt(std::max(w * (1.0 - w) / n, 1e-300));
      const double z = std::abs(res.member_draws[k] / n - w) / sigma;
      worst = std::max(worst, z);
      ok = ok && z <= 3.0;
    }
    json c = check_node("member_marginal", ok);
    c["worst_z"] = worst;
    out.checks.push_back(c);
  }

  if (cfg.params.contains("weights_soup")) {
    const json& wsj = cfg.params.at("weights_soup");
    check_keys(wsj, ctx + ".weights_soup", {}, {"bands", "pilot", "replicas"});
    if (!cfg.has_soup) fail(ctx, "weights_soup needs the soup block");
    EstimatorOptions wopt;
    wopt.n_bands = static_cast<int>(get_int_or(wsj, "bands", ctx, 6));
    wopt.pilot = get_int_or(wsj, "pilot", ctx, 200);
    wopt.replicas = get_int_or(wsj, "replicas", ctx, 20000);
    wopt.seed = cfg.seed;
    const AnnealedWeights soup_w = annealed_weights_soup(cfg.soup, cfg.mass, members, wopt);
    json arr = json::array();
    bool ok = true;
    double worst = 0.0;
    for (std::size_t k = 0; k < soup_w.weights.size(); ++k) {
      arr.push_back(q_stat(soup_w.weights[k], soup_w.ses[k]));
      const double sigma = std::hypot(soup_w.ses[k], 1e-9);
      const double z = z_score(soup_w.weights[k], res.weights[k], sigma);
      worst = std::max(worst, z);
      ok = ok && z <= 3.0;
    }
    out.payload["weights_soup"] = arr;
    json c = check_node("weights_soup_vs_spectral", ok);
    c["worst_z"] = worst;
    out.checks.push_back(c);
  }
  return out;
}

// ---- conformal --------------------------------------------------------

KindResult run_conformal(const ExperimentConfig& cfg) {
  const std::string ctx = "params(conformal)";
  check_keys(cfg.params, ctx, {"f", "conn0", "conn1"}, {"oracle", "zeta_t0", "csv"});
  if (cfg.torus.dim != 2) fail(ctx, "conformal reparametrization needs dim == 2");
  const ScalarField field = parse_scalar_field(cfg.params.at("f"), cfg.torus, ctx + ".f");
  const ConnectionSpec& c0 = cfg.connection(get_str(cfg.params, "conn0", ctx));
  const ConnectionSpec& c1 = cfg.connection(get_str(cfg.params, "conn1", ctx));
  const double m = mass_constant_or_fail(cfg, "conformal");
  if (!(m > 0.0)) fail(ctx, "needs a positive constant mass");

  // One soup on a widened duration window covers both clock cutoffs: the
  // new clock of any loop satisfies T / e^{2F} <= T^ <= T e^{2F}, F = sup|f|.
  const double stretch = std::exp(2.0 * field.bound_abs);
  SoupConfig wide = cfg.soup;
  wide.t_min = cfg.soup.t_min / stretch;
  wide.t_max = cfg.soup.t_max * stretch;
  const SoupSampler sampler(wide);

  struct Slot {
    Welford a, b, d;
    double dev = 0.0;
  };
  const std::size_t n_chunks = 128;
  std::vector<Slot> slot(n_chunks);
  const long long n = cfg.replicas;
  parallel_for(n_chunks, default_workers(), [&](std::size_t c) {
    for (long long r = n * static_cast<long long>(c) / static_cast<long long>(n_chunks);
         r < n * static_cast<long long>(c + 1) / static_cast<long long>(n_chunks); ++r) {
      double prod_a = 1.0, prod_b = 1.0;
      sampler.visit_replica(cfg.seed, static_cast<std::uint64_t>(r),
                            [&](const LoopEvent& ev, PathMaker& maker) {
        // Mass by thinning; the conformal change maps the killing rate to
        // e^{-2f} m, whose new-clock integral equals the old one pathwise,
        // so one survival decision is exact for both clocks.
        if (ev.thin_u >= std::exp(-m * ev.duration)) return;
        const LoopPath& path = maker();
        Rng loop_rng = make_stream(cfg.seed, {stream::conformal, ev.replica, ev.index});
        const LoopPath re = conformal_reparam(path, field, loop_rng);
        const bool in_a =
            ev.duration >= cfg.soup.t_min && ev.duration <= cfg.soup.t_max;
        const bool in_b = re.duration >= cfg.soup.t_min && re.duration <= cfg.soup.t_max;
        if (!in_a && !in_b) return;
        const cplx tr1p = trace_norm(holonomy(path, c1));
        const cplx tr0p = trace_norm(holonomy(path, c0));
        const cplx tr1q = trace_norm(holonomy(re, c1));
        const cplx tr0q = trace_norm(holonomy(re, c0));
        slot[c].dev = std::max({slot[c].dev, std::abs(tr1p - tr1q), std::abs(tr0p - tr0q)});
        if (in_a) prod_a *= 1.0 + (tr1p - tr0p).real();
        if (in_b) prod_b *= 1.0 + (tr1q - tr0q).real();
      });
      slot[c].a.add(prod_a);
      slot[c].b.add(prod_b);
      slot[c].d.add(prod_a - prod_b);
    }
  });
  Welford a, b, d;
  double dev = 0.0;
  for (const Slot& s : slot) {
    a.merge(s.a);
    b.merge(s.b);
    d.merge(s.d);
    dev = std::max(dev, s.dev);
  }

  KindResult out;
  out.payload["ratio_g"] = q_stat(a.mean, a.stderr_mean());
  out.payload["ratio_ghat"] = q_stat(b.mean, b.stderr_mean());
  out.payload["clock_diff"] = q_stat(d.mean, d.stderr_mean());
  out.payload["trace_dev_max"] = q_exact(dev);

  const double combined = std::hypot(a.stderr_mean(), b.stderr_mean());
  {
    json c = check_node("clock_agreement", std::abs(a.mean - b.mean) <= 3.0 * combined);
    c["z"] = z_score(a.mean, b.mean, combined);
    c["coupled_z"] = z_score(d.mean, 0.0, d.stderr_mean());
    out.checks.push_back(c);
  }
  {
    json c = check_node("reparam_trace", dev <= 1e-6);
    c["max_dev"] = dev;
    out.checks.push_back(c);
  }

  if (get_bool_or(cfg.params, "oracle", ctx, false)) {
    const double t0 = get_num_or(cfg.params, "zeta_t0", ctx, 1e-3);
    const OracleDet od = det_oracle(cfg, c0, c1, cfg.soup.alpha, t0, 0);
    out.payload["oracle_ratio_re"] = q_bound(od.ratio, od.ratio_err);
    json c = check_node("oracle_match",
                        std::abs(a.mean - od.ratio) <= 3.0 * a.stderr_mean() + od.ratio_err);
    c["z"] = z_score(a.mean, od.ratio, a.stderr_mean());
    out.checks.push_back(c);
  }
  return out;
}

// ---- campbell ---------------------------------------------------------

KindResult run_campbell(const ExperimentConfig& cfg) {
  const std::string ctx = "params(campbell)";
  check_keys(cfg.params, ctx, {"cases"}, {});
  const json& cases = cfg.params.at("cases");
  if (!cases.is_array() || cases.empty()) fail(ctx, "cases must be a non-empty array");

  KindResult out;
  std::size_t idx = 0;
  for (const json& cs : cases) {
    check_keys(cs, ctx + ".case", {"name", "rate", "g"}, {});
    const std::string name = get_str(cs, "name", ctx);
    const double rate = get_num(cs, "rate", ctx);
    const json& g = cs.at("g");
    check_keys(g, ctx + ".g", {"form"}, {"value", "amplitude"});
    const std::string form = get_str(g, "form", ctx);
    std::function<cplx(double)> fn;
    if (form == "constant") {
      const double v = get_num(g, "value", ctx + ".g");
      fn = [v](double) { return cplx(v, 0.0); };
    } else if (form == "oscillatory") {
      const double amp = get_num(g, "amplitude", ctx + ".g");
      fn = [amp](double x) { return amp * std::exp(cplx(0.0, 2.0 * M_PI * x)); };
    } else {
      fail(ctx, "g.form must be constant | oscillatory");
    }

    CampbellCheck c;
    try {
      c = campbell_expectation_check(rate, fn, static_cast<std::uint64_t>(cfg.replicas),
                                     cfg.seed + idx);
    } catch (const std::invalid_argument& e) {
      fail(ctx, e.what());
    }
    json node;
    node["mc_re"] = q_stat(c.mc.real(), c.se_re);
    node["mc_im"] = q_stat(c.mc.imag(), c.se_im);
    node["exact_re"] = q_bound(c.exact.real(), 1e-12);
    node["exact_im"] = q_bound(c.exact.imag(), 1e-12);
    out.payload[name] = node;

    json kre = check_node("campbell_" + name + "_re",
                          std::abs(c.mc.real() - c.exact.real()) <= 3.0 * c.se_re + 1e-12);
    kre["z"] = z_score(c.mc.real(), c.exact.real(), c.se_re);
    out.checks.push_back(kre);
    json kim = check_node("campbell_" + name + "_im",
                          std::abs(c.mc.imag() - c.exact.imag()) <= 3.0 * c.se_im + 1e-12);
    kim["z"] = z_score(c.mc.imag(), c.exact.imag(), c.se_im);
    out.checks.push_back(kim);
    ++idx;
  }
  return out;
}

KindResult dispatch(const ExperimentConfig& cfg) {
  if (cfg.kind == "estimate-det") return run_estimate_det(cfg);
  if (cfg.kind == "integral-form") return run_integral_form(cfg);
  if (cfg.kind == "spectral-oracle") return run_spectral_oracle(cfg);
  if (cfg.kind == "validate-kernel") return run_validate_kernel(cfg);
  if (cfg.kind == "soup-sample") return run_soup_sample(cfg);
  if (cfg.kind == "moments") return run_moments(cfg);
  if (cfg.kind == "symanzik") return run_symanzik(cfg);
  if (cfg.kind == "conformal") return run_conformal(cfg);
  if (cfg.kind == "campbell") return run_campbell(cfg);
  fail("kind", "unhandled experiment kind " + cfg.kind);
}

}  // namespace

// --------------------------------------------------------------- assembling

RunOutcome run_experiment(const ExperimentConfig& cfg) {
  const auto tick = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const KindResult kr = dispatch(cfg);

  json record;
  record["schema_version"] = 1;
  record["kind"] = cfg.kind;
  record["config_hash"] = config_hash(cfg.raw);
  record["config"] = cfg.raw;
  record["provenance"] = {{"seed", cfg.seed}, {"workers", default_workers()}};
  record["started_utc"] = started;
  record["finished_utc"] = utc_now();
  record["runtime_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - tick).count();
  record["payload"] = kr.payload;
  if (!kr.tables.empty()) record["tables"] = kr.tables;
  record["checks"] = kr.checks;
  bool pass = true;
  for (const json& c : kr.checks) pass = pass && c.at("pass").get<bool>();
  record["pass"] = pass;
  return {record, pass};
}

std::filesystem::path resolve_output_path(const ExperimentConfig& cfg) {
  const char* env = std::getenv("LOOPDET_OUTPUT_ROOT");
  const std::filesystem::path root = (env && *env) ? env : ".";
  std::filesystem::path file =
      cfg.output.empty()
          ? std::filesystem::path(cfg.kind + "-" + config_hash(cfg.raw).substr(0, 12) + ".json")
          : std::filesystem::path(cfg.output);
  return file.is_absolute() ? file : root / file;
}

void write_record(const ExperimentConfig& cfg, const json& record,
                  const std::filesystem::path& file) {
  std::error_code ec;
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path(), ec);
  std::ofstream out(file);
  if (!out) throw IoError("cannot write record " + file.string());
  out << record.dump(2) << "\n";
  if (!out) throw IoError("failed while writing record " + file.string());

  if (get_bool_or(cfg.params, "csv", "params", false) && record.contains("tables")) {
    for (const auto& [name, table] : record.at("tables").items()) {
      std::filesystem::path csv = file;
      csv.replace_extension();
      csv += "." + name + ".csv";
      std::ofstream os(csv);
      if (!os) throw IoError("cannot write table " + csv.string());
      const json& cols = table.at("columns");
      for (std::size_t i = 0; i < cols.size(); ++i)
        os << cols.at(i).get<std::string>() << (i + 1 < cols.size() ? "," : "\n");
      os.precision(17);
      for (const json& row : table.at("rows")) {
        for (std::size_t i = 0; i < row.size(); ++i)
          os << row.at(i).get<double>() << (i + 1 < row.size() ? "," : "\n");
      }
      if (!os) throw IoError("failed while writing table " + csv.string());
    }
  }
}

int run_and_write(const std::string& path, RunOutcome* outcome,
                  std::filesystem::path* record_path, std::string* error) {
  try {
    const ExperimentConfig cfg = load_config(path);
    RunOutcome out = run_experiment(cfg);
    const std::filesystem::path file = resolve_output_path(cfg);
    write_record(cfg, out.record, file);
    if (outcome) *outcome = out;
    if (record_path) *record_path = file;
    return out.pass ? kExitOk : kExitCertificate;
  } catch (const IoError& e) {
    if (error) *error = e.what();
    return kExitIo;
  } catch (const SchemaError& e) {
    if (error) *error = e.what();
    return kExitSchema;
  } catch (const std::invalid_argument& e) {
    if (error) *error = e.what();
    return kExitSchema;
  } catch (const std::exception& e) {
    if (error) *error = e.what();
    return 1;
  }
}

// ------------------------------------------------------------------ compare

namespace {

struct Quant {
  double value = 0.0;
  double sigma = 0.0;
  bool exact = false;
};

void flatten(const json& node, const std::string& prefix, std::map<std::string, Quant>& out) {
  if (node.is_object()) {
    if (node.contains("value") && node.at("value").is_number()) {
      Quant q;
      q.value = node.at("value").get<double>();
      const double se = node.contains("stderr") ? node.at("stderr").get<double>() : 0.0;
      const double syst = node.contains("syst") ? node.at("syst").get<double>() : 0.0;
      q.sigma = std::hypot(se, syst);
      q.exact = node.contains("exact") && node.at("exact").get<bool>();
      out[prefix] = q;
      return;
    }
    for (const auto& [key, child] : node.items()) flatten(child, prefix + "/" + key, out);
  } else if (node.is_array()) {
    for (std::size_t i = 0; i < node.size(); ++i)
      flatten(node.at(i), prefix + "/" + std::to_string(i), out);
  }
}

}  // namespace

CompareReport compare_records(const json& a, const json& b) {
  if (!a.is_object() || !a.contains("payload") || !b.is_object() || !b.contains("payload"))
    throw SchemaError("compare: both inputs must be result records with a payload");
  std::map<std::string, Quant> qa, qb;
  flatten(a.at("payload"), "", qa);
  flatten(b.at("payload"), "", qb);

  CompareReport report;
  for (const auto& [key, va] : qa) {
    const auto it = qb.find(key);
    if (it == qb.end()) continue;
    const Quant& vb = it->second;
    CompareKey ck;
    ck.key = key;
    ck.a = va.value;
    ck.b = vb.value;
    ck.sigma = std::hypot(va.sigma, vb.sigma);
    const double diff = std::abs(va.value - vb.value);
    if (ck.sigma > 0.0) {
      ck.z = diff / ck.sigma;
      ck.pass = ck.z <= 3.0;
    } else {
      // Two exact quantities: equal within write-out precision.
      ck.pass = diff <= 1e-12 * std::max({1.0, std::abs(va.value), std::abs(vb.value)});
      ck.z = ck.pass ? 0.0 : std::numeric_limits<double>::infinity();
    }
    report.all_pass = report.all_pass && ck.pass;
    report.keys.push_back(ck);
  }
  if (report.keys.empty()) throw SchemaError("compare: records share no comparable payload keys");
  return report;
}

// -------------------------------------------------------------------- suite

SuiteReport run_suite(const std::string& dir) {
  std::vector<std::filesystem::path> configs;
  {
    std::error_code ec;
    std::filesystem::directory_iterator it(dir, ec);
    if (ec) throw IoError("cannot read suite directory " + dir + ": " + ec.message());
    for (const auto& entry : it)
      if (entry.is_regular_file() && entry.path().extension() == ".json")
        configs.push_back(entry.path());
  }
  std::sort(configs.begin(), configs.end());
  if (configs.empty()) throw SchemaError("suite: no .json configs in " + dir);

  SuiteReport report;
  bool any_io = false, any_schema = false, any_cert = false;
  for (const std::filesystem::path& p : configs) {
    SuiteItem item;
    item.config = p.string();
    RunOutcome out;
    std::filesystem::path rec;
    std::string err;
    item.exit_code = run_and_write(p.string(), &out, &rec, &err);
    item.record_path = rec.string();
    item.message = err;
    if (out.record.contains("kind")) item.kind = out.record.at("kind").get<std::string>();
    any_io = any_io || item.exit_code == kExitIo;
    any_schema = any_schema || item.exit_code == kExitSchema || item.exit_code == 1;
    any_cert = any_cert || item.exit_code == kExitCertificate;
    report.items.push_back(std::move(item));
  }
  report.exit_code = any_io       ? kExitIo
                     : any_schema ? kExitSchema
                     : any_cert   ? kExitCertificate
                                  : kExitOk;
  return report;
}

}  // namespace loopdet
