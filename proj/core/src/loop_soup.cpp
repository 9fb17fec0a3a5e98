#include "loopdet/loop_soup.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "loopdet/parallel.hpp"
#include "loopdet/quadrature.hpp"
#include "loopdet/stats.hpp"

namespace loopdet {

void SoupConfig::validate() const {
  torus.validate();
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw std::invalid_argument("soup: alpha must be positive and finite");
  if (!(t_min > 0.0) || !(t_max > t_min) || !std::isfinite(t_max))
    throw std::invalid_argument("soup: need 0 < t_min < t_max < inf");
  if (steps.n_min < 2 || !(steps.h0 > 0.0))
    throw std::invalid_argument("soup: bad step policy");
}

double intensity_total(const TorusSpec& torus, double t_min, double t_max) {
  const double vol = torus.volume();
  // In u = log t the integrand V p_{e^u}(0,0) spans its whole range smoothly.
  auto g = [&](double u) { return vol * heat_kernel_diag(torus, std::exp(u)); };
  return integrate(g, std::log(t_min), std::log(t_max)).value;
}

DurationSampler::DurationSampler(const TorusSpec& torus, double t_min, double t_max,
                                 int n_knots) {
  if (n_knots < 8) throw std::invalid_argument("duration sampler: too few knots");
  u_lo_ = std::log(t_min);
  u_hi_ = std::log(t_max);
  h_ = (u_hi_ - u_lo_) / n_knots;
  const double vol = torus.volume();
  std::vector<double> g(n_knots + 1);
  for (int i = 0; i <= n_knots; ++i)
    g[i] = vol * heat_kernel_diag(torus, std::exp(u_lo_ + i * h_));
  cdf_.assign(n_knots + 1, 0.0);
  for (int i = 0; i < n_knots; ++i) cdf_[i + 1] = cdf_[i] + 0.5 * h_ * (g[i] + g[i + 1]);
  total_ = cdf_.back();
  for (double& c : cdf_) c /= total_;
  cdf_.back() = 1.0;
  pdf_u_.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) pdf_u_[i] = g[i] / total_;
}

double DurationSampler::sample(Rng& rng) const {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  return quantile(unif(rng));
}

double DurationSampler::quantile(double c) const {
  c = std::clamp(c, 0.0, 1.0);
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), c);
  int idx = static_cast<int>(it - cdf_.begin()) - 1;
  idx = std::clamp(idx, 0, static_cast<int>(cdf_.size()) - 2);
  const double q = c - cdf_[idx];
  const double g0 = pdf_u_[idx];
  const double s = (pdf_u_[idx + 1] - g0) / h_;
  // Root of g0 tau + s tau^2 / 2 = q; the discriminant is >= g1^2 >= 0.
  const double disc = std::sqrt(std::max(g0 * g0 + 2.0 * s * q, 0.0));
  double tau = (g0 + disc > 0.0) ? 2.0 * q / (g0 + disc) : 0.5 * h_;
  tau = std::clamp(tau, 0.0, h_);
  return std::exp(u_lo_ + idx * h_ + tau);
}

double DurationSampler::density(double t) const {
  if (!(t > 0.0)) return 0.0;
  const double u = std::log(t);
  if (u < u_lo_ || u > u_hi_) return 0.0;
  int idx = static_cast<int>((u - u_lo_) / h_);
  idx = std::clamp(idx, 0, static_cast<int>(pdf_u_.size()) - 2);
  const double w = (u - (u_lo_ + idx * h_)) / h_;
  const double gu = (1.0 - w) * pdf_u_[idx] + w * pdf_u_[idx + 1];
  return gu / t;
}

Vec winding_shift(const TorusSpec& torus, const std::array<int, 3>& winding) {
  Vec s{0.0, 0.0, 0.0};
  for (int j = 0; j < torus.dim; ++j) s[j] = winding[j] * torus.side[j];
  return s;
}

const LoopPath& PathMaker::operator()() {
  if (!path_) {
    Rng rng = make_stream(seed_, {stream::soup_replica, salt_, ev_->replica, ev_->index, 1});
    const int n = steps_for(ev_->duration, *steps_);
    path_ = sample_bridge_fixed_winding(*torus_, ev_->duration, ev_->base, ev_->base,
                                        winding_shift(*torus_, ev_->winding), n, rng);
  }
  return *path_;
}

SoupSampler::SoupSampler(const SoupConfig& cfg)
    : cfg_(cfg), durations_(cfg.torus, cfg.t_min, cfg.t_max) {
  cfg_.validate();
}

double SoupSampler::expected_count() const { return cfg_.alpha * durations_.total(); }

void SoupSampler::visit_replica(std::uint64_t seed, std::uint64_t replica,
                                const std::function<void(const LoopEvent&, PathMaker&)>& fn) const {
  Rng rng = make_stream(seed, {stream::soup_replica, cfg_.stream_salt, replica});
  std::poisson_distribution<long long> count(expected_count());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const long long n = count(rng);
  const Vec zero{0.0, 0.0, 0.0};
  for (long long i = 0; i < n; ++i) {
    LoopEvent ev;
    ev.replica = replica;
    ev.index = static_cast<std::uint64_t>(i);
    ev.duration = durations_.sample(rng);
    for (int j = 0; j < cfg_.torus.dim; ++j) ev.base[j] = cfg_.torus.side[j] * unif(rng);
    const Vec disp = sample_winding(cfg_.torus, ev.duration, zero, rng);
    for (int j = 0; j < cfg_.torus.dim; ++j)
      ev.winding[j] = static_cast<int>(std::llround(disp[j] / cfg_.torus.side[j]));
    ev.thin_u = unif(rng);
    PathMaker maker(cfg_.torus, cfg_.steps, ev, seed, cfg_.stream_salt);
    fn(ev, maker);
  }
}

SoupSnapshot realize_soup(const SoupConfig& cfg, std::uint64_t seed, std::uint64_t n_replicas,
                          bool with_paths) {
  SoupSampler sampler(cfg);
  SoupSnapshot snap;
  snap.cfg = sampler.config();
  snap.seed = seed;
  snap.n_replicas = n_replicas;
  snap.with_paths = with_paths;
  for (std::uint64_t r = 0; r < n_replicas; ++r) {
    sampler.visit_replica(seed, r, [&](const LoopEvent& ev, PathMaker& maker) {
      SoupSnapshot::Loop loop;
      loop.replica = r;
      loop.duration = ev.duration;
      loop.base = ev.base;
      loop.winding = ev.winding;
      if (with_paths) {
        const LoopPath& p = maker();
        loop.n_steps = p.n_steps;
        loop.lift = p.lift;
      }
      snap.loops.push_back(std::move(loop));
    });
  }
  return snap;
}

namespace {

constexpr char kMagic[] = "LOOPSOUP1\n";
constexpr std::size_t kMagicLen = 10;

nlohmann::json config_to_json(const SoupConfig& cfg) {
  return nlohmann::json{
      {"torus", {{"dim", cfg.torus.dim},
                 {"side", {cfg.torus.side[0], cfg.torus.side[1], cfg.torus.side[2]}}}},
      {"alpha", cfg.alpha},
      {"t_min", cfg.t_min},
      {"t_max", cfg.t_max},
      {"steps", {{"n_min", cfg.steps.n_min}, {"h0", cfg.steps.h0}}},
      {"stream_salt", cfg.stream_salt}};
}

SoupConfig config_from_json(const nlohmann::json& j) {
  SoupConfig cfg;
  cfg.torus.dim = j.at("torus").at("dim").get<int>();
  const auto& side = j.at("torus").at("side");
  for (int k = 0; k < 3; ++k) cfg.torus.side[k] = side.at(k).get<double>();
  cfg.alpha = j.at("alpha").get<double>();
  cfg.t_min = j.at("t_min").get<double>();
  cfg.t_max = j.at("t_max").get<double>();
  cfg.steps.n_min = j.at("steps").at("n_min").get<int>();
  cfg.steps.h0 = j.at("steps").at("h0").get<double>();
  cfg.stream_salt = j.at("stream_salt").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_soup(const SoupSnapshot& snap, const std::string& file) {
  nlohmann::json header;
  header["format"] = 1;
  header["endianness"] = "little";
  header["config"] = config_to_json(snap.cfg);
  header["seed"] = snap.seed;
  header["n_replicas"] = snap.n_replicas;
  header["with_paths"] = snap.with_paths;
  nlohmann::json loops = nlohmann::json::array();
  for (const auto& loop : snap.loops) {
    loops.push_back({{"replica", loop.replica},
                     {"t", loop.duration},
                     {"base", {loop.base[0], loop.base[1], loop.base[2]}},
                     {"winding", {loop.winding[0], loop.winding[1], loop.winding[2]}},
                     {"n_steps", loop.n_steps}});
  }
  header["loops"] = std::move(loops);
  const std::string head = header.dump();

  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_soup: cannot open " + file);
  out.write(kMagic, kMagicLen);
  const std::uint64_t len = head.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  if (snap.with_paths) {
    const int d = snap.cfg.torus.dim;
    std::vector<double> buf;
    for (const auto& loop : snap.loops) {
      buf.clear();
      buf.reserve(static_cast<std::size_t>(loop.n_steps + 1) * d);
      for (const Vec& p : loop.lift)
        for (int j = 0; j < d; ++j) buf.push_back(p[j]);
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(double)));
    }
  }
  if (!out) throw std::runtime_error("save_soup: write failed for " + file);
}

SoupSnapshot load_soup(const std::string& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("load_soup: cannot open " + file);
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw std::runtime_error("load_soup: bad magic in " + file);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > (1ull << 32))
    throw std::runtime_error("load_soup: bad header length in " + file);
  std::string head(len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("load_soup: truncated header in " + file);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_soup: header parse error: ") + e.what());
  }
  SoupSnapshot snap;
  try {
    snap.cfg = config_from_json(header.at("config"));
    snap.seed = header.at("seed").get<std::uint64_t>();
    snap.n_replicas = header.at("n_replicas").get<std::uint64_t>();
    snap.with_paths = header.at("with_paths").get<bool>();
    for (const auto& j : header.at("loops")) {
      SoupSnapshot::Loop loop;
      loop.replica = j.at("replica").get<std::uint64_t>();
      loop.duration = j.at("t").get<double>();
      const auto& base = j.at("base");
      for (int k = 0; k < 3; ++k) loop.base[k] = base.at(k).get<double>();
      const auto& w = j.at("winding");
      for (int k = 0; k < 3; ++k) loop.winding[k] = w.at(k).get<int>();
      loop.n_steps = j.at("n_steps").get<int>();
      snap.loops.push_back(std::move(loop));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_soup: header schema error: ") + e.what());
  }
  if (snap.with_paths) {
    const int d = snap.cfg.torus.dim;
    for (auto& loop : snap.loops) {
      const std::size_t count = static_cast<std::size_t>(loop.n_steps + 1) * d;
      std::vector<double> buf(count);
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(count * sizeof(double)));
      if (!in) throw std::runtime_error("load_soup: truncated payload in " + file);
      loop.lift.resize(loop.n_steps + 1);
      for (int i = 0; i <= loop.n_steps; ++i) {
        Vec p{0.0, 0.0, 0.0};
        for (int j = 0; j < d; ++j) p[j] = buf[static_cast<std::size_t>(i) * d + j];
        loop.lift[i] = p;
      }
    }
  }
  return snap;
}

MeanCheck campbell_sum_check(const SoupConfig& cfg, std::uint64_t seed, std::uint64_t n_replicas,
                             const std::function<double(double)>& f) {
  SoupSampler sampler(cfg);
  std::vector<double> slot(n_replicas, 0.0);
  parallel_for(n_replicas, default_workers(), [&](std::size_t r) {
    double sum = 0.0;
    sampler.visit_replica(seed, r, [&](const LoopEvent& ev, PathMaker&) { sum += f(ev.duration); });
    slot[r] = sum;
  });
  Welford acc;
  for (double v : slot) acc.add(v);
  const double vol = cfg.torus.volume();
  auto g = [&](double u) {
    const double t = std::exp(u);
    return cfg.alpha * vol * f(t) * heat_kernel_diag(cfg.torus, t);
  };
  MeanCheck out;
  out.mc = acc.mean;
  out.se = acc.stderr_mean();
  out.exact = integrate(g, std::log(cfg.t_min), std::log(cfg.t_max), 1e-10).value;
  return out;
}

ProductCheck campbell_product_check(const SoupConfig& cfg, std::uint64_t seed,
                                    std::uint64_t n_replicas, double u,
                                    const std::function<double(double)>& f) {
  SoupSampler sampler(cfg);
  std::vector<std::complex<double>> slot(n_replicas, {0.0, 0.0});
  parallel_for(n_replicas, default_workers(), [&](std::size_t r) {
    std::complex<double> prod{1.0, 0.0};
    sampler.visit_replica(seed, r, [&](const LoopEvent& ev, PathMaker&) {
      prod *= std::exp(std::complex<double>(0.0, u * f(ev.duration)));
    });
    slot[r] = prod;
  });
  WelfordC acc;
  for (const auto& z : slot) acc.add(z);

  const double vol = cfg.torus.volume();
  auto integrand = [&](double w, bool real_part) {
    const double t = std::exp(w);
    const std::complex<double> e =
        std::exp(std::complex<double>(0.0, u * f(t))) - std::complex<double>(1.0, 0.0);
    const double weight = cfg.alpha * vol * heat_kernel_diag(cfg.torus, t);
    return weight * (real_part ? e.real() : e.imag());
  };
  const double a = std::log(cfg.t_min), b = std::log(cfg.t_max);
  const double ire = integrate([&](double w) { return integrand(w, true); }, a, b, 1e-10).value;
  const double iim = integrate([&](double w) { return integrand(w, false); }, a, b, 1e-10).value;

  ProductCheck out;
  out.mc = acc.mean();
  out.se_re = acc.se_re();
  out.se_im = acc.se_im();
  out.exact = std::exp(std::complex<double>(ire, iim));
  return out;
}

CampbellCheck campbell_expectation_check(double rate,
                                         const std::function<std::complex<double>(double)>& g,
                                         std::uint64_t n_samples, std::uint64_t seed) {
  if (!(rate >= 0.0)) throw std::invalid_argument("campbell_expectation_check: rate >= 0");
  if (n_samples < 2) throw std::invalid_argument("campbell_expectation_check: n_samples >= 2");

  // Fixed chunk count keeps the reduction order, and therefore the result,
  // independent of the worker count.
  const std::size_t n_chunks = 256;
  std::vector<WelfordC> slot(n_chunks);
  parallel_for(n_chunks, default_workers(), [&](std::size_t c) {
    Rng rng = make_stream(seed, {stream::campbell, c});
    std::poisson_distribution<int> pois(rate);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const std::uint64_t lo = n_samples * c / n_chunks, hi = n_samples * (c + 1) / n_chunks;
    for (std::uint64_t i = lo; i < hi; ++i) {
      const int n = pois(rng);
      std::complex<double> prod{1.0, 0.0};
      for (int k = 0; k < n; ++k) prod *= 1.0 + g(unif(rng));
      slot[c].add(prod);
    }
  });
  WelfordC acc;
  for (const WelfordC& w : slot) acc.merge(w);

  const auto part = [&](bool real_part) {
    return integrate([&](double x) { return real_part ? g(x).real() : g(x).imag(); }, 0.0, 1.0,
                     1e-12)
        .value;
  };
  CampbellCheck out;
  out.mc = acc.mean();
  out.se_re = acc.se_re();
  out.se_im = acc.se_im();
  out.exact = std::exp(rate * std::complex<double>(part(true), part(false)));
  return out;
}

}  // namespace loopdet
