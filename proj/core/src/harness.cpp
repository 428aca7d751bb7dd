#include "resilab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>

#include "json.hpp"

#include "resilab/digest.hpp"
#include "resilab/matrix_market.hpp"

namespace resilab::harness {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t at = 0;
  for (;;) {
    const std::size_t next = s.find(sep, at);
    if (next == std::string::npos) {
      out.push_back(s.substr(at));
      return out;
    }
    out.push_back(s.substr(at, next - at));
    at = next + 1;
  }
}

std::int64_t parse_i64(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError("expected an integer for " + what + ", got '" + s + "'");
  }
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  const std::int64_t v = parse_i64(s, what);
  if (v < 0) throw UsageError(what + " must be non-negative, got '" + s + "'");
  return static_cast<std::uint64_t>(v);
}

double parse_f64(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError("expected a number for " + what + ", got '" + s + "'");
  }
}

bool parse_bool(const std::string& s, const std::string& what) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw UsageError("expected true/false for " + what + ", got '" + s + "'");
}

std::string format_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex(const std::string& s) {
  return std::stoull(s, nullptr, 16);
}

}  // namespace

// -- flag parsing ----------------------------------------------------------------

solver::Detector parse_detector(const std::string& s) {
  if (s == "none") return solver::Detector::None;
  if (s == "bounded") return solver::Detector::Bounded;
  if (s == "monotonicity") return solver::Detector::Monotonicity;
  throw UsageError("unknown detector '" + s + "' (none|bounded|monotonicity)");
}

faultlab::CorruptionModel parse_model(const std::string& s) {
  faultlab::CorruptionModel m;
  if (s == "bitflip") {
    m.kind = faultlab::CorruptionModel::Kind::BitFlip;
    m.bit = -1;
    return m;
  }
  if (s.rfind("bitflip:", 0) == 0) {
    m.kind = faultlab::CorruptionModel::Kind::BitFlip;
    m.bit = static_cast<int>(parse_i64(s.substr(8), "bit position"));
    if (m.bit < 0 || m.bit > 63) throw UsageError("bit position must be in [0, 63]");
    return m;
  }
  if (s.rfind("scale:", 0) == 0) {
    m.kind = faultlab::CorruptionModel::Kind::Scale;
    m.factor = parse_f64(s.substr(6), "scale factor");
    return m;
  }
  throw UsageError("unknown corruption model '" + s + "' (bitflip|bitflip:B|scale:F)");
}

std::uint64_t parse_interval(const std::string& s) {
  if (s == "none") return 0;
  return parse_u64(s, "sdc interval");
}

FailureSpec parse_failures(const std::string& s) {
  FailureSpec f;
  if (s == "none") return f;
  if (s.rfind("auto:", 0) == 0) {
    const std::vector<std::string> parts = split(s.substr(5), ':');
    if (parts.size() != 2) throw UsageError("failures auto needs MEAN:COUNT, got '" + s + "'");
    f.kind = FailureSpec::Kind::Auto;
    f.mean_steps = parse_f64(parts[0], "failure mean");
    f.count = static_cast<int>(parse_i64(parts[1], "failure count"));
    if (f.mean_steps <= 0 || f.count < 0) throw UsageError("failures auto needs mean > 0, count >= 0");
    return f;
  }
  if (s.rfind("list:", 0) == 0) {
    f.kind = FailureSpec::Kind::List;
    for (const std::string& item : split(s.substr(5), ',')) {
      const std::vector<std::string> rk = split(item, '@');
      if (rk.size() != 2) throw UsageError("failures list items are RANK@OUTER, got '" + item + "'");
      faultlab::FailureEvent ev;
      ev.rank = static_cast<runtime::RankId>(parse_i64(rk[0], "failure rank"));
      ev.trigger.space = faultlab::FailureTrigger::Space::OuterIndex;
      ev.trigger.value = parse_u64(rk[1], "failure outer index");
      f.listed.push_back(ev);
    }
    return f;
  }
  throw UsageError("unknown failures spec '" + s + "' (none|auto:MEAN:COUNT|list:r@k,...)");
}

// -- canonical key=value form ------------------------------------------------------

namespace {

std::string model_to_string(const faultlab::CorruptionModel& m) {
  if (m.kind == faultlab::CorruptionModel::Kind::BitFlip)
    return m.bit < 0 ? "bitflip" : "bitflip:" + std::to_string(m.bit);
  return "scale:" + format_f64(m.factor);
}

std::string failures_to_string(const FailureSpec& f) {
  switch (f.kind) {
    case FailureSpec::Kind::None:
      return "none";
    case FailureSpec::Kind::Auto:
      return "auto:" + format_f64(f.mean_steps) + ":" + std::to_string(f.count);
    case FailureSpec::Kind::List: {
      std::string s = "list:";
      for (std::size_t i = 0; i < f.listed.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(f.listed[i].rank) + "@" + std::to_string(f.listed[i].trigger.value);
      }
      return s;
    }
  }
  return "none";
}

std::string detector_to_string(solver::Detector d) {
  switch (d) {
    case solver::Detector::None: return "none";
    case solver::Detector::Bounded: return "bounded";
    case solver::Detector::Monotonicity: return "monotonicity";
  }
  return "none";
}

}  // namespace

std::vector<std::pair<std::string, std::string>> config_kv(const ExperimentConfig& c) {
  std::vector<std::pair<std::string, std::string>> kv;
  if (c.problem.kind == ProblemSpec::Kind::Poisson3D) {
    kv.emplace_back("problem", "poisson3d");
    kv.emplace_back("nx", std::to_string(c.problem.nx));
    kv.emplace_back("ny", std::to_string(c.problem.ny));
    kv.emplace_back("nz", std::to_string(c.problem.nz));
  } else {
    kv.emplace_back("problem", "mm");
    kv.emplace_back("matrix", c.problem.path);
  }
  kv.emplace_back("ranks", std::to_string(c.ranks));
  kv.emplace_back("spares", std::to_string(c.spares));
  kv.emplace_back("inner", std::to_string(c.solver.inner_iters));
  kv.emplace_back("outer", std::to_string(c.solver.outer_iters));
  kv.emplace_back("tol", format_f64(c.solver.tol));
  kv.emplace_back("detector", detector_to_string(c.solver.detector));
  kv.emplace_back("bound-slack", format_f64(c.solver.bound_slack));
  kv.emplace_back("mono-interval", std::to_string(c.solver.mono_interval));
  kv.emplace_back("max-sdc-restarts", std::to_string(c.solver.max_sdc_restarts));
  kv.emplace_back("checkpoint-basis", c.solver.checkpoint_basis ? "true" : "false");
  kv.emplace_back("sdc-interval", c.sdc_interval == 0 ? "none" : std::to_string(c.sdc_interval));
  kv.emplace_back("sdc-model", model_to_string(c.model));
  kv.emplace_back("failures", failures_to_string(c.failures));
  kv.emplace_back("seed", std::to_string(c.seed));
  kv.emplace_back("reps", std::to_string(c.reps));
  kv.emplace_back("watchdog", format_f64(c.watchdog_seconds));
  return kv;
}

void apply_kv(ExperimentConfig& c, const std::string& key, const std::string& value) {
  if (key == "problem") {
    if (value == "poisson3d") c.problem.kind = ProblemSpec::Kind::Poisson3D;
    else if (value == "mm") c.problem.kind = ProblemSpec::Kind::MatrixMarket;
    else throw UsageError("unknown problem '" + value + "' (poisson3d|mm)");
  } else if (key == "nx") c.problem.nx = parse_i64(value, key);
  else if (key == "ny") c.problem.ny = parse_i64(value, key);
  else if (key == "nz") c.problem.nz = parse_i64(value, key);
  else if (key == "matrix") c.problem.path = value;
  else if (key == "ranks") c.ranks = static_cast<int>(parse_i64(value, key));
  else if (key == "spares") c.spares = static_cast<int>(parse_i64(value, key));
  else if (key == "inner") c.solver.inner_iters = static_cast<int>(parse_i64(value, key));
  else if (key == "outer") c.solver.outer_iters = static_cast<int>(parse_i64(value, key));
  else if (key == "tol") c.solver.tol = parse_f64(value, key);
  else if (key == "detector") c.solver.detector = parse_detector(value);
  else if (key == "bound-slack") c.solver.bound_slack = parse_f64(value, key);
  else if (key == "mono-interval") c.solver.mono_interval = static_cast<int>(parse_i64(value, key));
  else if (key == "max-sdc-restarts") c.solver.max_sdc_restarts = static_cast<int>(parse_i64(value, key));
  else if (key == "checkpoint-basis") c.solver.checkpoint_basis = parse_bool(value, key);
  else if (key == "sdc-interval") c.sdc_interval = parse_interval(value);
  else if (key == "sdc-model") c.model = parse_model(value);
  else if (key == "failures") c.failures = parse_failures(value);
  else if (key == "seed") c.seed = parse_u64(value, key);
  else if (key == "reps") c.reps = static_cast<int>(parse_i64(value, key));
  else if (key == "watchdog") c.watchdog_seconds = parse_f64(value, key);
  else throw UsageError("unknown config key '" + key + "'");
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  ExperimentConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
    apply_kv(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = digest::kFnvOffset;
  for (const auto& [k, v] : config_kv(c)) {
    const std::string line = k + "=" + v + "\n";
    h = digest::fnv1a64(line.data(), line.size(), h);
  }
  return h;
}

faultlab::FaultPlan plan_from_config(const ExperimentConfig& c, std::uint64_t seed) {
  faultlab::FaultPlan plan;
  plan.seed = seed;
  plan.sdc_interval = c.sdc_interval;
  plan.model = c.model;
  switch (c.failures.kind) {
    case FailureSpec::Kind::None:
      break;
    case FailureSpec::Kind::Auto: {
      std::vector<runtime::RankId> candidates(static_cast<std::size_t>(c.ranks));
      for (int r = 0; r < c.ranks; ++r) candidates[static_cast<std::size_t>(r)] = r;
      plan.failures = faultlab::plan_failures(c.failures.mean_steps, c.failures.count,
                                              candidates, seed);
      break;
    }
    case FailureSpec::Kind::List:
      plan.failures = c.failures.listed;
      break;
  }
  return plan;
}

// -- running -----------------------------------------------------------------------

const char* status_name(solver::SolveStatus s) {
  switch (s) {
    case solver::SolveStatus::Converged: return "converged";
    case solver::SolveStatus::BudgetExhausted: return "budget_exhausted";
    case solver::SolveStatus::InsufficientSpares: return "insufficient_spares";
    case solver::SolveStatus::HolderDead: return "holder_dead";
    case solver::SolveStatus::Error: return "error";
  }
  return "error";
}

namespace {

solver::SolveStatus status_from_name(const std::string& s) {
  if (s == "converged") return solver::SolveStatus::Converged;
  if (s == "budget_exhausted") return solver::SolveStatus::BudgetExhausted;
  if (s == "insufficient_spares") return solver::SolveStatus::InsufficientSpares;
  if (s == "holder_dead") return solver::SolveStatus::HolderDead;
  return solver::SolveStatus::Error;
}

}  // namespace

RepResult run_single(const ExperimentConfig& c, const faultlab::FaultPlan& plan,
                     metrics::EventLog* capture) {
  runtime::WorldOptions wo;
  wo.n_ranks = c.ranks;
  wo.n_spares = c.spares;
  wo.watchdog_seconds = c.watchdog_seconds;
  runtime::World world(wo);

  metrics::Metrics m;
  metrics::EventLog own_log;
  metrics::EventLog& log = capture ? *capture : own_log;

  faultlab::FaultLab lab(plan, world, m, log);
  solver::FaultHooks* hooks = lab.arm();

  solver::SolverConfig scfg = c.solver;
  scfg.checkpoints_enabled = c.spares > 0;

  solver::StaticBuilder builder;
  if (c.problem.kind == ProblemSpec::Kind::Poisson3D) {
    linalg::Poisson3DSpec ps;
    ps.nx = c.problem.nx;
    ps.ny = c.problem.ny;
    ps.nz = c.problem.nz;
    builder = solver::make_poisson_builder(ps);
  } else {
    auto mat = std::make_shared<linalg::CsrMatrix>(
        linalg::read_matrix_market_file(c.problem.path));
    builder = solver::make_csr_builder(std::move(mat));
  }

  std::vector<solver::SolveResult> results(static_cast<std::size_t>(c.ranks));
  std::mutex results_mu;
  const auto program = [&](runtime::RankCtx& ctx) -> std::int64_t {
    solver::SolveResult r = solver::ft_gmres(ctx, builder, scfg, hooks, m, log);
    const std::int64_t ok = r.converged ? 1 : 0;
    std::lock_guard<std::mutex> lk(results_mu);
    results[static_cast<std::size_t>(ctx.rank())] = std::move(r);
    return ok;
  };
  const runtime::WorldResult wr = world.run(program);

  RepResult rep;
  rep.seed = plan.seed;
  rep.aborted = wr.aborted;
  rep.abort_reason = wr.abort_reason;
  rep.final_epoch = wr.final_epoch;
  rep.trace_hash = wr.trace_hash;
  rep.metrics = metrics::snapshot(m);
  bool have_status = false;
  for (int r = 0; r < c.ranks && !have_status; ++r) {
    if (wr.rank_outcomes[static_cast<std::size_t>(r)] == runtime::RankOutcome::Finished) {
      const solver::SolveResult& sr = results[static_cast<std::size_t>(r)];
      rep.status = sr.status;
      rep.converged = sr.converged;
      rep.final_rel_residual = sr.final_rel_residual;
      rep.outers_completed = sr.outers_completed;
      have_status = true;
    }
  }
  if (!have_status) {
    rep.status = solver::SolveStatus::Error;
    rep.converged = false;
  }
  return rep;
}

namespace {

/// The numeric CSV columns (everything after config_hash and rep), in the
/// emission order. Aggregation, CSV rows, and the recompute oracle all key
/// off this single list.
std::vector<std::pair<std::string, double>> numeric_columns(const RepResult& r) {
  const metrics::MetricsSnapshot& m = r.metrics;
  return {
      {"converged", r.converged ? 1.0 : 0.0},
      {"final_relative_residual", r.final_rel_residual},
      {"spmv_count", static_cast<double>(m.spmv_count)},
      {"n_extra", static_cast<double>(m.n_extra())},
      {"sdc_injected", static_cast<double>(m.sdc_injected)},
      {"sdc_detected", static_cast<double>(m.sdc_detected)},
      {"inner_restarts", static_cast<double>(m.inner_restarts)},
      {"outer_restarts", static_cast<double>(m.outer_restarts)},
      {"checkpoints_taken", static_cast<double>(m.checkpoints_taken)},
      {"bytes_checkpointed", static_cast<double>(m.bytes_checkpointed)},
      {"t_sdc_d", m.t_sdc_detect},
      {"t_sdc_r", m.t_sdc_recover},
      {"t_pf_x", m.t_pf_exclude},
      {"t_pf_r", m.t_pf_recover},
      {"t_check", m.t_checkpoint},
      {"t_check_dynamic_fraction", m.t_check_dynamic_fraction()},
      {"t_recompute", m.t_recompute},
      {"total_time", m.t_total},
  };
}

Aggregate aggregate_reps(const std::vector<RepResult>& reps) {
  Aggregate agg;
  if (reps.empty()) return agg;
  const auto names = numeric_columns(reps[0]);
  for (std::size_t c = 0; c < names.size(); ++c) {
    double sum = 0;
    for (const RepResult& r : reps) sum += numeric_columns(r)[c].second;
    const double mean = sum / static_cast<double>(reps.size());
    double var = 0;
    for (const RepResult& r : reps) {
      const double d = numeric_columns(r)[c].second - mean;
      var += d * d;
    }
    var /= static_cast<double>(reps.size());
    const double sd = std::sqrt(var);
    agg.mean.emplace_back(names[c].first, mean);
    agg.stddev.emplace_back(names[c].first, sd);
    agg.cov.emplace_back(names[c].first, mean != 0.0 ? sd / std::fabs(mean) : 0.0);
  }
  return agg;
}

void validate(const ExperimentConfig& c) {
  if (c.reps < 1) throw UsageError("reps must be >= 1");
  if (c.ranks < 1) throw UsageError("ranks must be >= 1");
  if (c.spares < 0) throw UsageError("spares must be >= 0");
  if (c.solver.inner_iters < 1 || c.solver.outer_iters < 1)
    throw UsageError("inner and outer budgets must be >= 1");
  if (c.solver.mono_interval < 1) throw UsageError("mono-interval must be >= 1");
  if (c.problem.kind == ProblemSpec::Kind::Poisson3D) {
    if (c.problem.nx < 1 || c.problem.ny < 1 || c.problem.nz < 1)
      throw UsageError("poisson3d needs nx, ny, nz >= 1");
  } else if (c.problem.path.empty()) {
    throw UsageError("problem mm needs a matrix path");
  }
  if (c.failures.planned_failures() > c.spares)
    throw UsageError("spares must cover planned failures (" +
                     std::to_string(c.failures.planned_failures()) + " planned, " +
                     std::to_string(c.spares) + " spares)");
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& c) {
  validate(c);
  RunReport report;
  report.config = c;
  report.config_hash = config_hash(c);
  for (int i = 0; i < c.reps; ++i) {
    const std::uint64_t rep_seed = c.seed + static_cast<std::uint64_t>(i);
    RepResult rep = run_single(c, plan_from_config(c, rep_seed));
    rep.rep = i;
    report.reps.push_back(std::move(rep));
  }
  report.aggregate = aggregate_reps(report.reps);
  return report;
}

// -- emission ----------------------------------------------------------------------

std::string csv_header() {
  return "config_hash,rep,converged,final_relative_residual,spmv_count,n_extra,"
         "sdc_injected,sdc_detected,inner_restarts,outer_restarts,checkpoints_taken,"
         "bytes_checkpointed,t_sdc_d,t_sdc_r,t_pf_x,t_pf_r,t_check,"
         "t_check_dynamic_fraction,t_recompute,total_time";
}

std::string to_csv(const RunReport& r) {
  std::string out = csv_header() + "\n";
  for (const RepResult& rep : r.reps) {
    out += format_hex(r.config_hash);
    out += ',';
    out += std::to_string(rep.rep);
    for (const auto& [name, value] : numeric_columns(rep)) {
      (void)name;
      out += ',';
      out += format_f64(value);
    }
    out += '\n';
  }
  return out;
}

namespace {

json metrics_to_json(const metrics::MetricsSnapshot& m) {
  return json{
      {"spmv_count", m.spmv_count},
      {"detector_spmvs", m.detector_spmvs},
      {"detector_checks", m.detector_checks},
      {"sdc_injected", m.sdc_injected},
      {"sdc_detected", m.sdc_detected},
      {"inner_restarts", m.inner_restarts},
      {"inner_abandoned", m.inner_abandoned},
      {"sanitized_values", m.sanitized_values},
      {"sdc_lost_steps", m.sdc_lost_steps},
      {"replay_lost_steps", m.replay_lost_steps},
      {"failures_observed", m.failures_observed},
      {"outer_restarts", m.outer_restarts},
      {"pf_lost_steps", m.pf_lost_steps},
      {"recomputed_outers", m.recomputed_outers},
      {"checkpoints_taken", m.checkpoints_taken},
      {"bytes_checkpointed", m.bytes_checkpointed},
      {"n_extra", m.n_extra()},
      {"t_sdc_d", m.t_sdc_detect},
      {"t_sdc_r", m.t_sdc_recover},
      {"t_pf_x", m.t_pf_exclude},
      {"t_pf_r", m.t_pf_recover},
      {"t_check", m.t_checkpoint},
      {"t_check_dynamic", m.t_checkpoint_dynamic},
      {"t_check_dynamic_fraction", m.t_check_dynamic_fraction()},
      {"t_recompute", m.t_recompute},
      {"total_time", m.t_total},
  };
}

metrics::MetricsSnapshot metrics_from_json(const json& j) {
  metrics::MetricsSnapshot m;
  m.spmv_count = j.at("spmv_count").get<std::uint64_t>();
  m.detector_spmvs = j.at("detector_spmvs").get<std::uint64_t>();
  m.detector_checks = j.at("detector_checks").get<std::uint64_t>();
  m.sdc_injected = j.at("sdc_injected").get<std::uint64_t>();
  m.sdc_detected = j.at("sdc_detected").get<std::uint64_t>();
  m.inner_restarts = j.at("inner_restarts").get<std::uint64_t>();
  m.inner_abandoned = j.at("inner_abandoned").get<std::uint64_t>();
  m.sanitized_values = j.at("sanitized_values").get<std::uint64_t>();
  m.sdc_lost_steps = j.at("sdc_lost_steps").get<std::uint64_t>();
  m.replay_lost_steps = j.at("replay_lost_steps").get<std::uint64_t>();
  m.failures_observed = j.at("failures_observed").get<std::uint64_t>();
  m.outer_restarts = j.at("outer_restarts").get<std::uint64_t>();
  m.pf_lost_steps = j.at("pf_lost_steps").get<std::uint64_t>();
  m.recomputed_outers = j.at("recomputed_outers").get<std::uint64_t>();
  m.checkpoints_taken = j.at("checkpoints_taken").get<std::uint64_t>();
  m.bytes_checkpointed = j.at("bytes_checkpointed").get<std::uint64_t>();
  m.t_sdc_detect = j.at("t_sdc_d").get<double>();
  m.t_sdc_recover = j.at("t_sdc_r").get<double>();
  m.t_pf_exclude = j.at("t_pf_x").get<double>();
  m.t_pf_recover = j.at("t_pf_r").get<double>();
  m.t_checkpoint = j.at("t_check").get<double>();
  m.t_checkpoint_dynamic = j.at("t_check_dynamic").get<double>();
  m.t_recompute = j.at("t_recompute").get<double>();
  m.t_total = j.at("total_time").get<double>();
  return m;
}

json pairs_to_json(const std::vector<std::pair<std::string, double>>& pairs) {
  json j = json::object();
  for (const auto& [k, v] : pairs) j[k] = v;
  return j;
}

std::vector<std::pair<std::string, double>> pairs_from_json(const json& j,
                                                            const RepResult& key_source) {
  // Rebuild in canonical column order so round trips are field-identical.
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [name, unused] : numeric_columns(key_source)) {
    (void)unused;
    out.emplace_back(name, j.at(name).get<double>());
  }
  return out;
}

}  // namespace

std::string to_json(const RunReport& r) {
  json j;
  json cfg = json::object();
  for (const auto& [k, v] : config_kv(r.config)) cfg[k] = v;
  j["config"] = cfg;
  j["config_hash"] = format_hex(r.config_hash);
  j["reps"] = json::array();
  for (const RepResult& rep : r.reps) {
    json jr;
    jr["rep"] = rep.rep;
    jr["seed"] = rep.seed;
    jr["status"] = status_name(rep.status);
    jr["converged"] = rep.converged;
    jr["final_relative_residual"] = rep.final_rel_residual;
    jr["outers_completed"] = rep.outers_completed;
    jr["aborted"] = rep.aborted;
    jr["abort_reason"] = rep.abort_reason;
    jr["final_epoch"] = rep.final_epoch;
    jr["trace_hash"] = format_hex(rep.trace_hash);
    jr["metrics"] = metrics_to_json(rep.metrics);
    j["reps"].push_back(std::move(jr));
  }
  j["aggregate"] = json{{"mean", pairs_to_json(r.aggregate.mean)},
                        {"stddev", pairs_to_json(r.aggregate.stddev)},
                        {"cov", pairs_to_json(r.aggregate.cov)}};
  return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed report JSON: ") + e.what());
  }
  RunReport r;
  try {
    for (const auto& [k, v] : j.at("config").items())
      apply_kv(r.config, k, v.get<std::string>());
    r.config_hash = parse_hex(j.at("config_hash").get<std::string>());
    for (const json& jr : j.at("reps")) {
      RepResult rep;
      rep.rep = jr.at("rep").get<int>();
      rep.seed = jr.at("seed").get<std::uint64_t>();
      rep.status = status_from_name(jr.at("status").get<std::string>());
      rep.converged = jr.at("converged").get<bool>();
      rep.final_rel_residual = jr.at("final_relative_residual").get<double>();
      rep.outers_completed = jr.at("outers_completed").get<std::uint64_t>();
      rep.aborted = jr.at("aborted").get<bool>();
      rep.abort_reason = jr.at("abort_reason").get<std::string>();
      rep.final_epoch = jr.at("final_epoch").get<int>();
      rep.trace_hash = parse_hex(jr.at("trace_hash").get<std::string>());
      rep.metrics = metrics_from_json(jr.at("metrics"));
      r.reps.push_back(std::move(rep));
    }
    if (!r.reps.empty()) {
      r.aggregate.mean = pairs_from_json(j.at("aggregate").at("mean"), r.reps[0]);
      r.aggregate.stddev = pairs_from_json(j.at("aggregate").at("stddev"), r.reps[0]);
      r.aggregate.cov = pairs_from_json(j.at("aggregate").at("cov"), r.reps[0]);
    }
  } catch (const json::exception& e) {
    throw UsageError(std::string("report JSON missing fields: ") + e.what());
  }
  return r;
}

RunReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open report '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return report_from_json(buf.str());
}

// -- composition --------------------------------------------------------------------

namespace {

void require_comparable(const ExperimentConfig& a, const ExperimentConfig& b,
                        const char* role) {
  const bool same_problem =
      a.problem.kind == b.problem.kind && a.problem.nx == b.problem.nx &&
      a.problem.ny == b.problem.ny && a.problem.nz == b.problem.nz &&
      a.problem.path == b.problem.path;
  if (!same_problem)
    throw ConfigMismatch(std::string("problem differs between baseline and ") + role);
  if (a.ranks != b.ranks)
    throw ConfigMismatch(std::string("rank count differs between baseline and ") + role);
  if (a.solver.inner_iters != b.solver.inner_iters ||
      a.solver.outer_iters != b.solver.outer_iters || a.solver.tol != b.solver.tol)
    throw ConfigMismatch(std::string("solve budget differs between baseline and ") + role);
}

double mean_spmv(const RunReport& r) {
  double s = 0;
  for (const RepResult& rep : r.reps) s += static_cast<double>(rep.metrics.spmv_count);
  return r.reps.empty() ? 0.0 : s / static_cast<double>(r.reps.size());
}

double mean_time(const RunReport& r) {
  double s = 0;
  for (const RepResult& rep : r.reps) s += rep.metrics.t_total;
  return r.reps.empty() ? 0.0 : s / static_cast<double>(r.reps.size());
}

}  // namespace

CompareReport compare_runs(const RunReport& baseline, const RunReport& se,
                           const RunReport& pf, const RunReport& multi) {
  require_comparable(baseline.config, se.config, "se");
  require_comparable(baseline.config, pf.config, "pf");
  require_comparable(baseline.config, multi.config, "multi");

  CompareReport r;
  r.baseline_hash = baseline.config_hash;
  r.se_hash = se.config_hash;
  r.pf_hash = pf.config_hash;
  r.multi_hash = multi.config_hash;

  r.spmv_baseline = mean_spmv(baseline);
  r.spmv_se = mean_spmv(se);
  r.spmv_pf = mean_spmv(pf);
  r.spmv_multi = mean_spmv(multi);
  r.spmv_overhead_se = r.spmv_se - r.spmv_baseline;
  r.spmv_overhead_pf = r.spmv_pf - r.spmv_baseline;
  r.spmv_estimate = r.spmv_baseline + r.spmv_overhead_se + r.spmv_overhead_pf;
  r.spmv_discrepancy = r.spmv_multi - r.spmv_estimate;

  r.time_baseline = mean_time(baseline);
  r.time_se = mean_time(se);
  r.time_pf = mean_time(pf);
  r.time_multi = mean_time(multi);
  r.time_overhead_se = r.time_se - r.time_baseline;
  r.time_overhead_pf = r.time_pf - r.time_baseline;
  r.time_estimate = r.time_baseline + r.time_overhead_se + r.time_overhead_pf;
  r.time_discrepancy = r.time_multi - r.time_estimate;

  const std::size_t n = baseline.reps.size();
  if (n > 0 && se.reps.size() == n && pf.reps.size() == n && multi.reps.size() == n) {
    for (std::size_t i = 0; i < n; ++i) {
      r.rep_spmv_discrepancy.push_back(
          static_cast<double>(multi.reps[i].metrics.spmv_count) -
          static_cast<double>(se.reps[i].metrics.spmv_count) -
          static_cast<double>(pf.reps[i].metrics.spmv_count) +
          static_cast<double>(baseline.reps[i].metrics.spmv_count));
    }
  }
  return r;
}

std::string to_json(const CompareReport& r) {
  json j{
      {"baseline_hash", format_hex(r.baseline_hash)},
      {"se_hash", format_hex(r.se_hash)},
      {"pf_hash", format_hex(r.pf_hash)},
      {"multi_hash", format_hex(r.multi_hash)},
      {"spmv", json{{"baseline", r.spmv_baseline},
                    {"se", r.spmv_se},
                    {"pf", r.spmv_pf},
                    {"multi", r.spmv_multi},
                    {"overhead_se", r.spmv_overhead_se},
                    {"overhead_pf", r.spmv_overhead_pf},
                    {"estimate", r.spmv_estimate},
                    {"discrepancy", r.spmv_discrepancy}}},
      {"time", json{{"baseline", r.time_baseline},
                    {"se", r.time_se},
                    {"pf", r.time_pf},
                    {"multi", r.time_multi},
                    {"overhead_se", r.time_overhead_se},
                    {"overhead_pf", r.time_overhead_pf},
                    {"estimate", r.time_estimate},
                    {"discrepancy", r.time_discrepancy}}},
      {"rep_spmv_discrepancy", r.rep_spmv_discrepancy},
  };
  return j.dump(2) + "\n";
}

}  // namespace resilab::harness
