// Command-line driver: phase diagrams, constrained minimization, decay fits,
// grand-canonical simulation and a self-check suite.

#include <kacpotts/kacpotts.hpp>

#include <CLI11.hpp>

#include <boost/version.hpp>
#include <Eigen/Core>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace kacpotts;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Configuration: defaults, then the JSON file, then explicit flags.

void reject_unknown(const json& given, const json& allowed, const std::string& where) {
  if (!given.is_object()) throw config_error(where + ": expected a JSON object");
  for (const auto& [key, value] : given.items()) {
    if (!allowed.contains(key)) throw config_error("unknown key '" + key + "' in " + where);
    if (allowed[key].is_object() && !allowed[key].empty()) reject_unknown(value, allowed[key], where + "." + key);
  }
}

void merge(json& into, const json& from) {
  for (const auto& [key, value] : from.items()) {
    if (value.is_object() && into.contains(key) && into[key].is_object()) merge(into[key], value);
    else into[key] = value;
  }
}

json load_config(const std::string& path, const std::string& experiment, const json& defaults) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw config_error(std::string("malformed config: ") + e.what());
  }
  // A manifest written by an earlier run is accepted as a config.
  if (j.is_object() && j.contains("manifest_version")) {
    if (j.value("experiment", "") != experiment) throw config_error("manifest belongs to another experiment");
    j = j.at("config");
  }
  if (j.is_object() && j.contains("experiment")) {
    if (j["experiment"] != experiment) throw config_error("config is for experiment " + j["experiment"].dump());
    j.erase("experiment");
  }
  reject_unknown(j, defaults, "config");
  return j;
}

template <typename T>
T get(const json& cfg, const char* key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw config_error(std::string("bad value for key '") + key + "': " + cfg.value(key, json()).dump());
  }
}

struct Run {
  std::string experiment;
  fs::path out;
  json config;
  std::vector<std::string> artifacts;

  fs::path file(const std::string& name) {
    artifacts.push_back(name);
    const auto p = out / name;
    fs::create_directories(p.parent_path());
    return p;
  }

  void write_json(const std::string& name, const json& j) {
    std::ofstream(file(name)) << j.dump(2) << "\n";
  }

  void write_manifest() {
    json m;
    m["manifest_version"] = 1;
    m["program"] = "kacpotts";
    m["version"] = kVersion;
    m["experiment"] = experiment;
    m["config"] = config;
    m["artifacts"] = artifacts;
    m["libraries"] = {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
                      {"boost", BOOST_LIB_VERSION},
                      {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                            std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                            std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
    std::ofstream(out / "manifest.json") << m.dump(2) << "\n";
  }
};

// ---------------------------------------------------------------------------
// phase-diagram

json phase_diagram_defaults() { return {{"beta_grid", "1:5:0.25"}, {"S", 3}}; }

std::vector<double> parse_grid(const std::string& spec) {
  double a, b, step;
  char c1, c2;
  std::istringstream is(spec);
  if (!(is >> a >> c1 >> b >> c2 >> step) || c1 != ':' || c2 != ':' || !(is >> std::ws).eof())
    throw config_error("beta grid must look like a:b:step, got '" + spec + "'");
  if (!(step > 0.0) || b < a || !(a > 0.0)) throw config_error("beta grid needs 0 < a <= b and step > 0");
  std::vector<double> out;
  for (long i = 0;; ++i) {
    const double x = a + static_cast<double>(i) * step;
    if (x > b + 1e-9 * step) break;
    out.push_back(x);
  }
  return out;
}

void phase_diagram(Run& run) {
  const auto grid = parse_grid(get<std::string>(run.config, "beta_grid"));
  const int S = get<int>(run.config, "S");
  if (S < 2) throw config_error("S must be at least 2");
  std::ofstream csv(run.file("phase_diagram.csv"));
  csv << "beta,lambda,a,b,c,b_star,phi,kappa_ord,kappa_disord\n";
  json all = json::array(), skipped = json::array();
  for (double beta : grid) {
    try {
      const auto cl = critical_lambda(beta, S);
      const auto& m = cl.set;
      const auto bad = m.check();
      if (!bad.empty()) throw property_violation("phase diagram at beta " + io::num(beta) + ": " + bad.front());
      csv << io::num(beta) << "," << io::num(m.lambda) << "," << io::num(m.a) << "," << io::num(m.b) << ","
          << io::num(m.c) << "," << io::num(m.b_star) << "," << io::num(m.phi) << "," << io::num(m.kappa.front())
          << "," << io::num(m.kappa.back()) << "\n";
      auto j = io::to_json(m);
      j["bisection_steps"] = cl.bisection_steps;
      j["monotone"] = cl.monotone;
      all.push_back(j);
      std::printf("beta %-8s lambda %.12g\n", io::num(beta).c_str(), m.lambda);
    } catch (const numerical_error& e) {
      skipped.push_back({{"beta", beta}, {"reason", e.what()}});
      std::printf("beta %-8s skipped: %s\n", io::num(beta).c_str(), e.what());
    }
  }
  run.write_json("phase_diagram.json", {{"points", all}, {"skipped", skipped}});
  std::ofstream(run.file("phase_diagram.gp"))
      << "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'beta'\n"
         "set terminal pngcairo size 900,600\nset output 'phase_diagram.png'\nset multiplot layout 1,2\n"
         "set ylabel 'lambda_beta'\nplot 'phase_diagram.csv' using 1:2 with linespoints\n"
         "set ylabel 'density'\nplot 'phase_diagram.csv' using 1:3 w lp, '' using 1:4 w lp, '' using 1:5 w lp\n"
         "unset multiplot\n";
}

// ---------------------------------------------------------------------------
// minimize / decay-fit

json problem_defaults() {
  return {{"gamma", 0.0625}, {"beta", 1.0},   {"S", 3},          {"k", 1},       {"t", 1.0},
          {"eps", 0.0},      {"zeta", 0.1},   {"universe", 40},  {"side", 16},   {"offset", -1},
          {"block", 1},      {"seed", 1},     {"hessian", true}, {"profile", "quartic"},
          {"exterior", {{"kind", "pure"}, {"amplitude", 0.0}, {"label", 0}}}};
}

struct Problem {
  MfMinimizerSet mins;
  std::optional<FunctionalProblem<2>> prob;
};

Problem build_problem(const json& cfg) {
  Problem out;
  const double gamma = get<double>(cfg, "gamma"), beta = get<double>(cfg, "beta");
  const int S = get<int>(cfg, "S"), k = get<int>(cfg, "k");
  const int U = get<int>(cfg, "universe"), side = get<int>(cfg, "side");
  int offset = get<int>(cfg, "offset");
  if (offset < 0) offset = (U - side) / 2;
  if (!(gamma > 0.0 && gamma < 1.0)) throw config_error("gamma must lie in (0,1)");
  if (k < 1 || k > S + 1) throw config_error("k must lie in 1..S+1");
  if (side < 1 || offset + side > U) throw config_error("region does not fit in the universe");
  out.mins = critical_lambda(beta, S).set;
  const auto kernel =
      std::make_shared<DiscreteKernel<2>>(KacKernel<2>(gamma, parse_profile(get<std::string>(cfg, "profile"))),
                                          1.0 / std::sqrt(gamma));
  Lattice<2> lat{kernel->mesh(), {U, U}, true};
  CellSet<2> region(lat.mesh);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) region.insert({offset + i, offset + j});

  const auto& ext_cfg = cfg.at("exterior");
  const auto kind = get<std::string>(ext_cfg, "kind");
  int label = get<int>(ext_cfg, "label");
  if (label == 0) label = k;
  if (label < 1 || label > S + 1) throw config_error("exterior label must lie in 1..S+1");
  auto ext = DensityField<2>::constant(lat, out.mins.rho[label - 1]);
  if (kind == "perturbed") {
    const double amp = get<double>(ext_cfg, "amplitude");
    CounterRng rng(get<std::uint64_t>(cfg, "seed"), 7);
    for (double& v : ext.values) v = std::max(0.0, v + amp * (2.0 * rng.uniform() - 1.0));
  } else if (kind != "pure") {
    throw config_error("exterior kind must be 'pure' or 'perturbed'");
  }
  FunctionalParams p;
  p.k = k;
  p.beta = beta;
  p.lambda = out.mins.lambda;
  p.t = get<double>(cfg, "t");
  p.eps = get<double>(cfg, "eps");
  p.zeta = get<double>(cfg, "zeta");
  out.prob.emplace(kernel, lat, region, ext, out.mins.rho[k - 1], p, get<int>(cfg, "block"));
  return out;
}

void minimize(Run& run) {
  auto pb = build_problem(run.config);
  const auto& prob = *pb.prob;
  auto [rho, diag] = minimize_constrained(prob);
  auto j = io::to_json(diag);
  j["f_star"] = f_star(rho, prob);
  j["lambda"] = prob.params.lambda;
  j["kappa_star"] = kappa_star(prob.rho_k(), prob.params.beta);
  if (get<bool>(run.config, "hessian")) {
    const auto h = hessian_min_eig(rho, prob);
    j["hessian_min_eig"] = h.value;
    j["hessian_converged"] = h.converged;
  }
  std::ofstream csv(run.file("minimizer.csv"));
  io::write_csv(csv, rho);
  run.write_json("diagnostics.json", j);
  std::printf("converged %s, max |rho - rho_k| %.3e\n", diag.converged ? "yes" : "no", diag.max_deviation);
  if (!diag.converged) throw numerical_error("minimization did not converge");
}

json decay_defaults() {
  auto d = problem_defaults();
  d["side"] = 32;
  d["universe"] = 56;
  d["exterior"]["kind"] = "perturbed";
  d["exterior"]["amplitude"] = 0.05;
  d["hessian"] = false;
  return d;
}

void decay(Run& run) {
  auto pb = build_problem(run.config);
  const auto& prob = *pb.prob;
  auto [rho, diag] = minimize_constrained(prob);
  if (!diag.converged) throw numerical_error("minimization did not converge");
  const auto dist = distance_to_complement(prob);
  std::vector<double> dev(prob.n_sites(), 0.0);
  double worst = 0.0;
  std::ofstream csv(run.file("deviation.csv"));
  csv << "distance,deviation\n";
  for (std::size_t i = 0; i < prob.n_sites(); ++i) {
    for (int s = 0; s < prob.species(); ++s)
      dev[i] = std::max(dev[i], std::abs(rho.at(prob.sites()[i], s) - prob.rho_k()[s]));
    worst = std::max(worst, dev[i]);
    csv << io::num(dist[i]) << "," << io::num(dev[i]) << "\n";
  }
  const auto fit = decay_fit(dev, dist, get<double>(run.config, "gamma"));
  auto j = io::to_json(fit);
  j["max_deviation"] = worst;
  j["c_star"] = worst / prob.params.zeta;
  j["minimize"] = io::to_json(diag);
  run.write_json("decay.json", j);
  std::ofstream(run.file("decay.gp")) << "set datafile separator ','\nset logscale y\nset xlabel 'distance'\n"
                                         "set ylabel 'max_s |rho - rho_k|'\nset terminal pngcairo\n"
                                         "set output 'decay.png'\nplot 'deviation.csv' using 1:2 skip 1 with points\n";
  std::printf("slope %.6g, R2 %.4f, c* %.4g\n", fit.slope, fit.r2, worst / prob.params.zeta);
}

// ---------------------------------------------------------------------------
// simulate

json simulate_defaults() {
  return {{"seed", 1},          {"sweeps", 1000},     {"burn_in", 200},      {"box", 32.0},
          {"gamma", 0.3},       {"beta", 2.0},        {"lambda", nullptr},   {"S", 3},
          {"bc", "periodic"},   {"snapshot_every", 0}, {"sample_every", 10}, {"moves_per_sweep", 0},
          {"ell_minus", 8.0},   {"ell_plus", 8.0},    {"zeta", 0.68},        {"profile", "quartic"},
          {"interaction", true}, {"check_every", 50}, {"batches", 20}};
}

void simulate(Run& run) {
  const auto& cfg = run.config;
  SimParams p;
  p.S = get<int>(cfg, "S");
  p.beta = get<double>(cfg, "beta");
  p.gamma = get<double>(cfg, "gamma");
  p.profile = parse_profile(get<std::string>(cfg, "profile"));
  p.interaction = get<bool>(cfg, "interaction");
  const auto cl = critical_lambda(p.beta, p.S);
  const auto& mins = cl.set;
  p.lambda = cfg.at("lambda").is_null() ? mins.lambda : get<double>(cfg, "lambda");
  run.config["lambda"] = p.lambda;

  const double L = get<double>(cfg, "box");
  const auto bc_spec = get<std::string>(cfg, "bc");
  std::optional<int> k;
  if (bc_spec != "periodic") {
    if (bc_spec.rfind("k=", 0) != 0) throw config_error("bc must be 'periodic' or 'k=<label>'");
    try {
      k = std::stoi(bc_spec.substr(2));
    } catch (const std::exception&) {
      throw config_error("bad boundary label in '" + bc_spec + "'");
    }
    if (*k < 1 || *k > p.S + 1) throw config_error("boundary label must lie in 1..S+1");
  }
  const auto box = Box<2>::cube(L, k ? BoundaryMode::external : BoundaryMode::periodic);
  const auto bc = k ? BoundaryCondition<2>::density_collar(mins.rho[*k - 1], *k) : BoundaryCondition<2>::periodic();

  ScaleParams sp;
  sp.gamma = p.gamma;
  sp.ell_minus_override = get<double>(cfg, "ell_minus");
  sp.ell_plus_override = get<double>(cfg, "ell_plus");
  sp.zeta_override = get<double>(cfg, "zeta");
  sp.validate(L);

  GcmcOptions opt;
  auto moves = get<std::size_t>(cfg, "moves_per_sweep");
  if (moves == 0) {
    double top = 0.0;
    for (const auto& r : mins.rho) top = std::max(top, std::accumulate(r.begin(), r.end(), 0.0));
    moves = std::max<std::size_t>(100, static_cast<std::size_t>(std::ceil(top * box.volume())));
    run.config["moves_per_sweep"] = moves;
  }
  opt.moves_per_sweep = moves;
  opt.check_every = get<int>(cfg, "check_every");

  const auto sweeps = get<std::uint64_t>(cfg, "sweeps"), burn = get<std::uint64_t>(cfg, "burn_in");
  const auto snap = get<std::uint64_t>(cfg, "snapshot_every"), every = get<std::uint64_t>(cfg, "sample_every");
  if (every == 0) throw config_error("sample_every must be positive");
  Gcmc<2> g(box, bc, p, get<std::uint64_t>(cfg, "seed"), 0, {}, opt);
  Observables<2> obs(p.S, sp, &mins, k);
  std::ofstream traj(run.file("trajectory.jsonl"));
  for (std::uint64_t i = 1; i <= sweeps; ++i) {
    g.sweep();
    if (i > burn && i % every == 0) {
      obs.add(g.config(), box);
      Observables<2> one(p.S, sp, &mins, k);
      one.add(g.config(), box);
      const auto r = one.finish(1);
      json line{{"sweep", i}, {"n", g.size()}, {"energy", g.energy()}, {"counts", g.counts()},
                {"theta_fraction", r.theta_fraction}, {"contours", r.contours}};
      traj << line.dump() << "\n";
    }
    if (snap > 0 && i % snap == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "snapshots/config_%08llu.csv", static_cast<unsigned long long>(i));
      std::ofstream os(run.file(name));
      io::write_csv(os, g.config());
    }
  }
  {
    std::ofstream os(run.file("final.csv"));
    io::write_csv(os, g.config());
  }
  auto j = io::to_json(obs.finish(get<int>(cfg, "batches")));
  j["acceptance"] = json::object();
  const char* names[] = {"displacement", "flip", "insertion", "deletion"};
  for (int m = 0; m < 4; ++m) j["acceptance"][names[m]] = g.stats().rate(static_cast<MoveType>(m));
  j["lambda"] = p.lambda;
  j["phases"] = io::to_json(mins);
  run.write_json("observables.json", j);
  std::ofstream(run.file("trajectory.gp"))
      << "set xlabel 'sweep'\nset ylabel 'n'\nset terminal pngcairo\nset output 'trajectory.png'\n"
         "plot '< jq -r \"[.sweep,.n]|@tsv\" trajectory.jsonl' using 1:2 with lines title 'particles'\n";
  std::printf("final n %zu, energy %.6g\n", g.size(), g.energy());
}

// ---------------------------------------------------------------------------
// validate

json validate_defaults() { return {{"quick", false}, {"seed", 1}}; }

struct Check {
  std::string name;
  bool pass;
  std::string detail;
};

void validate(Run& run) {
  const bool quick = get<bool>(run.config, "quick");
  const auto seed = get<std::uint64_t>(run.config, "seed");
  std::vector<Check> checks;
  auto add = [&](std::string name, bool pass, std::string detail) {
    std::printf("%-28s %s  %s\n", name.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
    checks.push_back({std::move(name), pass, std::move(detail)});
  };

  for (double beta : {1.0, 2.0}) {
    const auto cl = critical_lambda(beta, 3);
    const auto& m = cl.set;
    const auto bad = m.check();
    double res = 0.0;
    for (double r : m.residual) res = std::max(res, r);
    const double gap = std::abs(m.free_energy.front() - m.free_energy.back());
    add("mean-field beta=" + io::num(beta), bad.empty() && res < 1e-10 && gap < 1e-9,
        "lambda " + io::num(m.lambda) + ", residual " + io::num(res));
    const double closed = 1.0 / (beta * m.a) - 1.0;
    add("kappa closed form beta=" + io::num(beta), std::abs(m.kappa.back() - closed) < 1e-10 && m.kappa.front() > 0.0,
        "kappa_disord " + io::num(m.kappa.back()));
    const auto up = mf_pressures(beta, m.lambda + 1e-3, m), dn = mf_pressures(beta, m.lambda - 1e-3, m);
    add("pressure sign beta=" + io::num(beta), (up.p_ord - up.p_disord) * (dn.p_ord - dn.p_disord) < 0.0, "");
  }

  {
    const auto mins = critical_lambda(1.0, 3).set;
    const double gamma = 1.0 / 16;
    const auto kernel = std::make_shared<DiscreteKernel<2>>(KacKernel<2>(gamma), 4.0);
    const int side = quick ? 8 : 16, U = side + 24;
    Lattice<2> lat{4.0, {U, U}, true};
    CellSet<2> region(4.0);
    for (int i = 0; i < side; ++i)
      for (int j = 0; j < side; ++j) region.insert({12 + i, 12 + j});
    FunctionalParams fp;
    fp.k = 2;
    fp.lambda = mins.lambda;
    FunctionalProblem<2> prob(kernel, lat, region, DensityField<2>::constant(lat, mins.ordered(2)), mins.ordered(2), fp);
    const auto [rho, diag] = minimize_constrained(prob);
    add("functional rigidity", diag.converged && diag.max_deviation < 1e-8, "max dev " + io::num(diag.max_deviation));

    // Gradient against a fourth-order central difference at a perturbed field.
    CounterRng rng(seed, 1);
    std::vector<double> u(prob.dim());
    for (std::size_t q = 0; q < u.size(); ++q) u[q] = prob.rho_k()[q % 3] * (1.0 + 0.2 * (2.0 * rng.uniform() - 1.0));
    const auto f = prob.embed(u);
    const auto grad = f_star_gradient(f, prob);
    double worst = 0.0;
    for (int t = 0; t < (quick ? 6 : 30); ++t) {
      const std::size_t c = prob.sites()[rng.below(prob.n_sites())];
      const int s = static_cast<int>(rng.below(3));
      const double h = 1e-3 * f.at(c, s);
      auto at = [&](double m) {
        auto x = f;
        x.at(c, s) += m * h;
        return f_star(x, prob);
      };
      const double fd = (8.0 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12.0 * h);
      worst = std::max(worst, std::abs(grad.at(c, s) - fd) / std::max(1.0, std::abs(fd)));
    }
    add("functional gradient", worst < 1e-6, "max rel error " + io::num(worst));
  }

  {
    CounterRng rng(seed, 2);
    SimParams p;
    p.gamma = 0.5;
    p.lambda = 0.3;
    const auto box = Box<2>::cube(5.0, BoundaryMode::external);
    double worst = 0.0, pair_min = 0.0;
    for (int i = 0; i < (quick ? 2 : 8); ++i) {
      ParticleConfig<2> q(1 + rng.below(8));
      for (auto& x : q) x = {{5.0 * rng.uniform(), 5.0 * rng.uniform()}, static_cast<int>(rng.below(3))};
      const double a = energy_total(q, box, BoundaryCondition<2>::none(), p);
      const double b = energy_total_integral(q, box, BoundaryCondition<2>::none(), p);
      worst = std::max(worst, std::abs(a - b) / std::abs(a));
      pair_min = std::min(pair_min, a + p.lambda * static_cast<double>(q.size()));
    }
    add("energy forms agree", worst < 1e-7, "max rel difference " + io::num(worst));
    add("pair energy nonnegative", pair_min >= 0.0, "");
  }

  {
    SimParams p;
    p.gamma = 0.3;
    p.beta = 1.5;
    p.lambda = 0.2;
    const auto box = Box<2>::cube(12.0, BoundaryMode::external);
    const auto bc = BoundaryCondition<2>::density_collar({0.8, 0.1, 0.1});
    GcmcOptions opt;
    opt.moves_per_sweep = 200;
    Gcmc<2> g(box, bc, p, seed, 3, {}, opt);
    g.run(quick ? 5 : 30);
    double worst = 0.0;
    for (auto t : {MoveType::displacement, MoveType::flip, MoveType::insertion, MoveType::deletion})
      for (int i = 0; i < (quick ? 10 : 50); ++i)
        if (const auto d = g.detailed_balance_defect(t)) worst = std::max(worst, std::abs(*d));
    add("detailed balance", worst < 1e-12, "max log defect " + io::num(worst));
    bool cache_ok = true;
    try {
      g.check_cache();
    } catch (const property_violation&) {
      cache_ok = false;
    }
    const double h = energy_total(g.config(), box, bc, p);
    add("cached energy", cache_ok && std::abs(h - g.energy()) < 1e-9 * std::max(1.0, std::abs(h)),
        "n " + std::to_string(g.size()));
  }

  {
    // Random blob fields: contours, their constant collars, and exact resynthesis.
    CounterRng rng(seed, 4);
    int bad = 0;
    const int fields = quick ? 10 : 50;
    for (int f = 0; f < fields; ++f) {
      Lattice<2> lat{1.0, {24, 24}, true};
      const int background = 1 + static_cast<int>(rng.below(4));
      PhaseField<2> theta(lat, IndicatorKind::theta, 3, background);
      for (int b = 0; b < 3; ++b) {
        const auto x0 = static_cast<std::int64_t>(rng.below(24)), y0 = static_cast<std::int64_t>(rng.below(24));
        const auto w = static_cast<std::int64_t>(1 + rng.below(4)), h = static_cast<std::int64_t>(1 + rng.below(4));
        for (std::int64_t i = x0; i < x0 + w; ++i)
          for (std::int64_t j = y0; j < y0 + h; ++j) theta.at(lat.wrap(Index<2>{i, j})) = 0;
      }
      const auto gs = contours_from_theta(theta);
      bool ok = synthesize_theta(gs, lat, 3, background) == theta;
      for (const auto& g : gs)
        for (const auto& x : delta_out(g.closure(), &lat)) ok = ok && theta.at(x) == g.color;
      if (!ok) ++bad;
    }
    add("contour round trip", bad == 0, std::to_string(fields) + " fields");
  }

  json j = json::array();
  bool all = true;
  for (const auto& c : checks) {
    j.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    all = all && c.pass;
  }
  run.write_json("validate.json", j);
  if (!all) throw property_violation("validation suite reported failures");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kac-Potts continuum gas: mean field, free-energy functional, indicators and simulation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  struct Sub {
    CLI::App* app;
    std::string config_path;
    std::string out = "kacpotts_out";
    json flags = json::object();
  };
  std::map<std::string, Sub> subs;
  auto make = [&](const std::string& name, const std::string& help) -> Sub& {
    auto& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.app->add_option("--config", s.config_path, "JSON config (or a manifest from an earlier run)");
    s.app->add_option("--out", s.out, "output directory");
    return s;
  };
  // Flags write straight into the override object so the manifest echoes them.
  auto flag = [](Sub& s, const std::string& opt, const std::string& key, const std::string& help, auto example) {
    using T = decltype(example);
    s.app->add_option_function<T>(opt, [&s, key](const T& v) { s.flags[key] = v; }, help);
  };

  auto& pd = make("phase-diagram", "coexistence line lambda_beta and the pure phases over a beta grid");
  flag(pd, "--beta-grid", "beta_grid", "a:b:step", std::string());
  flag(pd, "--S", "S", "number of species", 0);

  auto& mn = make("minimize", "constrained minimization of the free-energy functional on a square region");
  flag(mn, "--seed", "seed", "seed for the exterior perturbation", std::uint64_t{});
  flag(mn, "--k", "k", "phase label imposed in the region", 0);
  flag(mn, "--beta", "beta", "inverse temperature", 0.0);

  auto& df = make("decay-fit", "decay of the minimizer's deviation away from a perturbed boundary");
  flag(df, "--seed", "seed", "seed for the exterior perturbation", std::uint64_t{});
  flag(df, "--k", "k", "phase label imposed in the region", 0);
  flag(df, "--beta", "beta", "inverse temperature", 0.0);

  auto& sm = make("simulate", "grand-canonical Metropolis run");
  flag(sm, "--seed", "seed", "random seed", std::uint64_t{});
  flag(sm, "--sweeps", "sweeps", "number of sweeps", std::uint64_t{});
  flag(sm, "--burn-in", "burn_in", "sweeps discarded before sampling", std::uint64_t{});
  flag(sm, "--box", "box", "box side", 0.0);
  flag(sm, "--gamma", "gamma", "Kac scaling parameter", 0.0);
  flag(sm, "--beta", "beta", "inverse temperature", 0.0);
  flag(sm, "--lambda", "lambda", "chemical potential (default: coexistence value)", 0.0);
  flag(sm, "--bc", "bc", "periodic or k=<label>", std::string());
  flag(sm, "--snapshot-every", "snapshot_every", "sweeps between CSV snapshots (0: none)", std::uint64_t{});
  flag(sm, "--moves-per-sweep", "moves_per_sweep", "Metropolis moves per sweep (0: automatic)", std::uint64_t{});

  auto& vd = make("validate", "property self-checks");
  vd.app->add_flag_callback("--quick", [&vd] { vd.flags["quick"] = true; }, "smaller instances");
  flag(vd, "--seed", "seed", "random seed", std::uint64_t{});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::map<std::string, std::pair<json (*)(), void (*)(Run&)>> table{
      {"phase-diagram", {phase_diagram_defaults, phase_diagram}},
      {"minimize", {problem_defaults, minimize}},
      {"decay-fit", {decay_defaults, decay}},
      {"simulate", {simulate_defaults, simulate}},
      {"validate", {validate_defaults, validate}}};

  for (auto& [name, sub] : subs) {
    if (!sub.app->parsed()) continue;
    Run run;
    run.experiment = name;
    try {
      const auto [defaults_fn, body] = table.at(name);
      const json defaults = defaults_fn();
      run.config = defaults;
      if (!sub.config_path.empty()) merge(run.config, load_config(sub.config_path, name, defaults));
      merge(run.config, sub.flags);
      run.out = sub.out;
      fs::create_directories(run.out);
      body(run);
      run.write_manifest();
      return 0;
    } catch (const config_error& e) {
      std::fprintf(stderr, "config error: %s\n", e.what());
      return 2;
    } catch (const std::invalid_argument& e) {
      std::fprintf(stderr, "config error: %s\n", e.what());
      return 2;
    } catch (const numerical_error& e) {
      std::fprintf(stderr, "numerical failure: %s\n", e.what());
      return 1;
    } catch (const property_violation& e) {
      if (!run.out.empty()) run.write_manifest();
      std::fprintf(stderr, "property violation: %s\n", e.what());
      return 3;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 1;
    }
  }
  return 2;
}
