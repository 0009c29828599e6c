#pragma once

// Experiment runners behind the command-line tool. Each runner turns a
// validated configuration into a RunLog; emit_reports writes it to disk.
// Every random stream is derived from (configuration, run seed), so a seed
// list fully determines the output and per-seed work can run on any number
// of worker threads.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <optional>
#include <thread>

#include "tslab/beta.hpp"
#include "tslab/config.hpp"
#include "tslab/dynamics.hpp"
#include "tslab/metrics.hpp"
#include "tslab/report.hpp"

namespace tslab {

/// job(i) for every i in [0, n) on up to `workers` threads; results are
/// returned in index order and the first failure (by index) is rethrown.
template <class R, class F>
std::vector<R> parallel_map(std::size_t n, int workers, F&& job) {
  std::vector<std::optional<R>> out(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto drain = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i].emplace(job(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1,
                                                 std::max<std::size_t>(n, 1));
  if (k == 1) {
    drain();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < k; ++t) pool.emplace_back(drain);
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<R> result;
  result.reserve(n);
  for (std::optional<R>& o : out) result.push_back(std::move(*o));
  return result;
}

struct RunSeeds {
  std::uint64_t teacher, student, train, validation, aux;
};

inline RunSeeds run_seeds(const ExperimentConfig& c, std::uint64_t seed) {
  return {derive_seed(c.teacher.seed, seed), derive_seed(seed, 1), derive_seed(seed, 2),
          derive_seed(seed, 3), derive_seed(seed, 4)};
}

inline Network build_teacher(const ExperimentConfig& c, std::uint64_t seed) {
  TeacherSpec t = c.teacher;
  t.seed = run_seeds(c, seed).teacher;
  return make_teacher(t);
}

inline Network build_student(const ExperimentConfig& c, const Network& teacher,
                             std::uint64_t student_seed) {
  StudentInit s = c.student;
  s.seed = student_seed;
  return make_student(teacher, s);
}

inline Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  Index epoch = 0;
  double loss = 0.0;
  std::vector<double> rho_bar;  // per hidden layer
  std::vector<Index> covered;
};

struct TrainRun {
  std::uint64_t seed = 0;
  Network teacher, initial, final_net;
  std::vector<EpochRecord> epochs;
  std::vector<std::vector<CorrelationMatrix>> checkpoints;  // [layer][epoch]
  std::vector<std::vector<double>> r_mean;                  // [layer][epoch]
  std::vector<std::vector<Vector>> v_norms;                 // [epoch][layer]
  bool diverged = false;
  std::string divergence;

  double final_loss() const { return epochs.back().loss; }
  double final_rho(Index layer) const { return epochs.back().rho_bar[static_cast<std::size_t>(layer)]; }
  /// First epoch whose rho_bar at `layer` reaches `target`, or -1.
  Index epochs_to(Index layer, double target) const {
    for (const EpochRecord& e : epochs)
      if (e.rho_bar[static_cast<std::size_t>(layer)] >= target) return e.epoch;
    return -1;
  }
};

/// Plain SGD on the squared loss against the teacher's outputs. Every epoch
/// (and before the first) the student is evaluated on a fixed validation
/// batch drawn from an independent infinite stream.
inline TrainRun train_student(const ExperimentConfig& c, std::uint64_t seed, const Network& teacher,
                              const Network& student, Index epochs) {
  TrainRun r;
  r.seed = seed;
  r.teacher = teacher;
  r.initial = student;
  const RunSeeds rs = run_seeds(c, seed);
  StreamSpec train_spec = c.stream;
  train_spec.seed = rs.train;
  GausStream stream(train_spec);
  GausStream validation({c.stream.dim, c.stream.stddev, StreamMode::infinite, 0, rs.validation});
  const Matrix xv = validation.next_batch(c.train.validation_size);
  const ForwardTrace tv = forward(teacher, xv);
  const Index hidden = teacher.num_layers() - 1;
  r.checkpoints.resize(static_cast<std::size_t>(hidden));

  Network net = student;
  auto evaluate = [&](Index epoch) {
    EpochRecord e;
    e.epoch = epoch;
    const ForwardTrace ts = forward(net, xv);
    e.loss = loss(ts.output(), tv.output());
    std::vector<Vector> norms;
    for (Index l = 0; l < hidden; ++l) {
      CorrelationMatrix cm = rho_matrix(ts.layers[l].relu_out, tv.layers[l].relu_out);
      const RhoBar rb = rho_bar(cm);
      e.rho_bar.push_back(rb.value);
      e.covered.push_back(rb.covered);
      r.checkpoints[static_cast<std::size_t>(l)].push_back(std::move(cm));
      norms.push_back(v_row_norms(net, l));
    }
    r.v_norms.push_back(std::move(norms));
    r.epochs.push_back(std::move(e));
    if (!(r.epochs.back().loss <= c.train.divergence_loss)) {
      r.diverged = true;
      r.divergence = "validation loss " + fmt(r.epochs.back().loss) + " at epoch " + std::to_string(epoch);
    }
  };

  evaluate(0);
  for (Index ep = 1; ep <= epochs && !r.diverged; ++ep) {
    try {
      for (Index b = 0; b < c.train.batches_per_epoch; ++b) {
        const Matrix x = stream.next_batch(c.train.batch_size);
        const Matrix y = teacher_labels(teacher, x);
        const ForwardTrace ts = forward(net, x);
        const double batch_loss = loss(ts.output(), y);
        if (!(batch_loss <= c.train.divergence_loss)) {
          r.diverged = true;
          r.divergence = "batch loss " + fmt(batch_loss) + " in epoch " + std::to_string(ep);
          break;
        }
        net = sgd_step(net, backward(net, ts, y), c.train.eta);
      }
    } catch (const NumericError& e) {
      r.diverged = true;
      r.divergence = e.what();
    } catch (const DegenerateBatchError& e) {
      r.diverged = true;
      r.divergence = e.what();
    }
    if (r.diverged) break;
    evaluate(ep);
  }
  r.final_net = net;
  for (const auto& cps : r.checkpoints)
    r.r_mean.push_back(cps.size() >= 2 ? mean_rank(cps) : std::vector<double>(cps.size(), 0.0));
  return r;
}

inline TrainRun run_train_seed(const ExperimentConfig& c, std::uint64_t seed) {
  const Network teacher = build_teacher(c, seed);
  const Network student = build_student(c, teacher, run_seeds(c, seed).student);
  return train_student(c, seed, teacher, student, c.train.epochs);
}

/// Overlap and Lipschitz audits of a teacher, as run metadata.
inline Json assumption_report(const ExperimentConfig& c, const Network& teacher, std::uint64_t seed) {
  GausStream s({c.stream.dim, c.stream.stddev, StreamMode::infinite, 0, run_seeds(c, seed).aux});
  Json layers = Json::array();
  if (teacher.num_layers() >= 2) {
    bool wide = true;
    for (Index l = 1; l + 1 < static_cast<Index>(teacher.spec.widths.size()); ++l)
      wide = wide && teacher.spec.widths[l] >= 2;
    if (wide)
      for (const OverlapReport& o : overlap_eps(teacher, s, 20000))
        layers.push_back({{"eps_d", finite_or_null(o.eps_d)},
                          {"eps_l", finite_or_null(o.eps_l)},
                          {"dead_node", o.dead_node ? Json(*o.dead_node) : Json(nullptr)}});
  }
  const LipschitzReport k = lipschitz_probe(teacher.layers[0].w.col(0), s, 20000, 4, {0.05}, seed);
  return {{"overlap", layers}, {"K_d", k.k_d}, {"K_l", k.k_l}, {"lipschitz_probes", k.probes},
          {"lipschitz_skipped", k.skipped}};
}

namespace detail {

inline std::vector<std::string> prefixed(const std::string& arm, std::vector<std::string> cells) {
  if (!arm.empty()) cells.insert(cells.begin() + 1, arm);
  return cells;
}

inline std::string run_name(const std::string& arm, std::uint64_t seed) {
  return (arm.empty() ? "" : arm + "_") + "seed" + std::to_string(seed);
}

/// Summary rows, per-run tables and plot series for a group of runs that
/// share one arm label (empty outside ablations).
inline void add_train_runs(RunLog& log, const std::string& arm, const std::vector<TrainRun>& runs) {
  for (const TrainRun& r : runs) {
    for (std::size_t e = 0; e < r.epochs.size(); ++e)
      for (std::size_t l = 0; l < r.epochs[e].rho_bar.size(); ++l)
        log.summary.add(prefixed(arm, {log.config_hash, fmt_int(r.seed), fmt_int(r.epochs[e].epoch),
                                       fmt_int(l), fmt(r.epochs[e].rho_bar[l]), fmt(r.r_mean[l][e]),
                                       fmt(r.epochs[e].loss), fmt_int(r.epochs[e].covered[l]),
                                       r.diverged ? "1" : "0"}));
    Table vn{{"epoch", "layer", "node", "norm"}, {}};
    for (std::size_t e = 0; e < r.v_norms.size(); ++e)
      for (std::size_t l = 0; l < r.v_norms[e].size(); ++l)
        for (Index j = 0; j < r.v_norms[e][l].size(); ++j)
          vn.add({fmt_int(r.epochs[e].epoch), fmt_int(l), fmt_int(j), fmt(r.v_norms[e][l](j))});
    log.tables["runs/" + run_name(arm, r.seed) + "_vnorms.csv"] = std::move(vn);
    Table corr{{"layer", "student", "teacher", "rho"}, {}};
    for (std::size_t l = 0; l < r.checkpoints.size(); ++l) {
      const CorrelationMatrix& cm = r.checkpoints[l].back();
      for (Index j = 0; j < cm.students(); ++j)
        for (Index k = 0; k < cm.teachers(); ++k)
          if (cm.valid(j, k)) corr.add({fmt_int(l), fmt_int(j), fmt_int(k), fmt(cm.rho(j, k))});
    }
    log.tables["runs/" + run_name(arm, r.seed) + "_correlations.csv"] = std::move(corr);
  }
}

inline Table train_header(bool with_arm) {
  return {prefixed(with_arm ? "arm" : "", {"config_hash", "seed", "epoch", "layer", "rho_bar", "r_mean",
                                           "loss", "covered", "diverged"}),
          {}};
}

/// Min/max across seeds of every per-epoch metric.
inline void add_minmax(Table& t, const std::string& arm, const std::vector<TrainRun>& runs) {
  if (runs.empty()) return;
  std::size_t epochs = 0;
  for (const TrainRun& r : runs) epochs = std::max(epochs, r.epochs.size());
  const std::size_t layers = runs.front().checkpoints.size();
  for (std::size_t e = 0; e < epochs; ++e)
    for (std::size_t l = 0; l < layers; ++l) {
      double rlo = INFINITY, rhi = -INFINITY, mlo = INFINITY, mhi = -INFINITY, llo = INFINITY,
             lhi = -INFINITY;
      Index count = 0;
      for (const TrainRun& r : runs) {
        if (e >= r.epochs.size()) continue;
        ++count;
        rlo = std::min(rlo, r.epochs[e].rho_bar[l]), rhi = std::max(rhi, r.epochs[e].rho_bar[l]);
        mlo = std::min(mlo, r.r_mean[l][e]), mhi = std::max(mhi, r.r_mean[l][e]);
        llo = std::min(llo, r.epochs[e].loss), lhi = std::max(lhi, r.epochs[e].loss);
      }
      std::vector<std::string> row{fmt_int(e), fmt_int(l), fmt(rlo), fmt(rhi), fmt(mlo), fmt(mhi), fmt(llo),
                                   fmt(lhi), fmt_int(count)};
      if (!arm.empty()) row.insert(row.begin(), arm);
      t.add(std::move(row));
    }
}

inline Table minmax_header(bool with_arm) {
  std::vector<std::string> h{"epoch", "layer", "rho_bar_min", "rho_bar_max", "r_mean_min", "r_mean_max",
                             "loss_min", "loss_max", "runs"};
  if (with_arm) h.insert(h.begin(), "arm");
  return {h, {}};
}

inline void add_train_plots(RunLog& log, const std::string& arm, const std::vector<TrainRun>& runs) {
  if (runs.empty()) return;
  const std::size_t layers = runs.front().checkpoints.size();
  auto find_plot = [&](const std::string& file, const std::string& title, const std::string& y) -> Plot& {
    for (Plot& p : log.plots)
      if (p.file == file) return p;
    log.plots.push_back({file, title, "epoch", y, {}});
    return log.plots.back();
  };
  for (const TrainRun& r : runs) {
    const std::string name = run_name(arm, r.seed);
    Series loss_s{name, {}, {}};
    for (const EpochRecord& e : r.epochs) {
      loss_s.x.push_back(static_cast<double>(e.epoch));
      loss_s.y.push_back(std::log10(e.loss));
    }
    find_plot("loss.svg", "validation loss", "log10 loss").series.push_back(loss_s);
    for (std::size_t l = 0; l < layers; ++l) {
      Series rho{name, {}, {}}, rank{name, {}, {}};
      for (std::size_t e = 0; e < r.epochs.size(); ++e) {
        rho.x.push_back(static_cast<double>(r.epochs[e].epoch));
        rho.y.push_back(r.epochs[e].rho_bar[l]);
        rank.x.push_back(static_cast<double>(r.epochs[e].epoch));
        rank.y.push_back(r.r_mean[l][e]);
      }
      find_plot("rho_bar_layer" + std::to_string(l) + ".svg", "mean best correlation, layer " + std::to_string(l),
                "rho_bar")
          .series.push_back(rho);
      find_plot("r_mean_layer" + std::to_string(l) + ".svg", "mean rank of final winners, layer " + std::to_string(l),
                "r_mean")
          .series.push_back(rank);
    }
  }
}

inline Json divergence_meta(const std::string& arm, const std::vector<TrainRun>& runs) {
  Json out = Json::array();
  for (const TrainRun& r : runs)
    if (r.diverged) out.push_back({{"arm", arm}, {"seed", r.seed}, {"reason", r.divergence}});
  return out;
}

}  // namespace detail

inline RunLog run_train(const ExperimentConfig& c, int workers) {
  RunLog log;
  log.config_hash = config_hash(c);
  log.summary = detail::train_header(false);
  struct Result {
    TrainRun run;
    Json assumptions;
  };
  std::vector<Result> results = parallel_map<Result>(c.seeds.size(), workers, [&](std::size_t i) {
    Result r{run_train_seed(c, c.seeds[i]), {}};
    r.assumptions = assumption_report(c, r.run.teacher, c.seeds[i]);
    return r;
  });
  std::vector<TrainRun> runs;
  Json assumptions = Json::object();
  for (Result& r : results) {
    assumptions[std::to_string(r.run.seed)] = r.assumptions;
    runs.push_back(std::move(r.run));
  }
  detail::add_train_runs(log, "", runs);
  Table mm = detail::minmax_header(false);
  detail::add_minmax(mm, "", runs);
  log.tables["summary_minmax.csv"] = std::move(mm);
  detail::add_train_plots(log, "", runs);
  log.meta["assumptions"] = assumptions;
  log.meta["diverged"] = detail::divergence_meta("", runs);
  return log;
}

/// Each arm is the base configuration with the arm's patch merged in, run
/// over the same seed list.
inline RunLog run_ablations(const ExperimentConfig& c, int workers) {
  RunLog log;
  log.config_hash = config_hash(c);
  log.summary = detail::train_header(true);
  std::vector<ExperimentConfig> arms;
  for (const AblationArm& a : c.arms) arms.push_back(apply_arm(c, a));
  const std::size_t n = arms.size() * c.seeds.size();
  std::vector<TrainRun> all = parallel_map<TrainRun>(n, workers, [&](std::size_t i) {
    return run_train_seed(arms[i / c.seeds.size()], c.seeds[i % c.seeds.size()]);
  });
  Table mm = detail::minmax_header(true);
  Table reach{{"arm", "seed", "layer", "epochs_to_0.9", "final_rho_bar"}, {}};
  Json diverged = Json::array();
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const std::vector<TrainRun> runs(all.begin() + static_cast<long>(a * c.seeds.size()),
                                     all.begin() + static_cast<long>((a + 1) * c.seeds.size()));
    const std::string& name = c.arms[a].name;
    detail::add_train_runs(log, name, runs);
    detail::add_minmax(mm, name, runs);
    detail::add_train_plots(log, name, runs);
    for (const TrainRun& r : runs)
      for (std::size_t l = 0; l < r.checkpoints.size(); ++l)
        reach.add({name, fmt_int(r.seed), fmt_int(l), fmt_int(r.epochs_to(static_cast<Index>(l), 0.9)),
                   fmt(r.final_rho(static_cast<Index>(l)))});
    for (const Json& d : detail::divergence_meta(name, runs)) diverged.push_back(d);
    log.meta["arms"][name] = config_to_json(arms[a]);
  }
  log.tables["summary_minmax.csv"] = std::move(mm);
  log.tables["epochs_to_target.csv"] = std::move(reach);
  log.meta["diverged"] = diverged;
  return log;
}

// ---------------------------------------------------------------------------
// Lottery tickets

/// Distinct student per teacher column by greedy assignment on descending
/// correlation (ties: smaller teacher, then smaller student index). Teachers
/// left without a valid student get -1.
inline std::vector<Index> greedy_winners(const CorrelationMatrix& c) {
  struct Pair {
    double rho;
    Index j, k;
  };
  std::vector<Pair> pairs;
  for (Index j = 0; j < c.students(); ++j)
    for (Index k = 0; k < c.teachers(); ++k)
      if (c.valid(j, k)) pairs.push_back({c.rho(j, k), j, k});
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.rho != b.rho) return a.rho > b.rho;
    if (a.k != b.k) return a.k < b.k;
    return a.j < b.j;
  });
  std::vector<Index> winner(static_cast<std::size_t>(c.teachers()), -1);
  std::vector<bool> taken(static_cast<std::size_t>(c.students()), false);
  for (const Pair& p : pairs) {
    if (winner[static_cast<std::size_t>(p.k)] >= 0 || taken[static_cast<std::size_t>(p.j)]) continue;
    winner[static_cast<std::size_t>(p.k)] = p.j;
    taken[static_cast<std::size_t>(p.j)] = true;
  }
  return winner;
}

/// The sub-network keeping only the listed nodes of each hidden layer
/// (indices in increasing order); inputs and outputs are kept whole.
inline Network extract_subnetwork(const Network& net, const std::vector<std::vector<Index>>& keep) {
  const Index hidden = net.num_layers() - 1;
  if (static_cast<Index>(keep.size()) != hidden) throw ConfigError("extract_subnetwork: one index list per hidden layer");
  auto all = [](Index n) {
    std::vector<Index> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), Index{0});
    return v;
  };
  Network out;
  out.spec = net.spec;
  for (Index l = 0; l < hidden; ++l) {
    if (keep[static_cast<std::size_t>(l)].empty()) throw ConfigError("extract_subnetwork: empty layer");
    out.spec.widths[static_cast<std::size_t>(l + 1)] = static_cast<Index>(keep[static_cast<std::size_t>(l)].size());
  }
  for (Index l = 0; l < net.num_layers(); ++l) {
    const Layer& src = net.layers[static_cast<std::size_t>(l)];
    const std::vector<Index> rows = l == 0 ? all(src.w.rows()) : keep[static_cast<std::size_t>(l - 1)];
    const std::vector<Index> cols = l == hidden ? all(src.w.cols()) : keep[static_cast<std::size_t>(l)];
    Layer dst;
    dst.w = src.w(rows, cols);
    if (src.b.size()) dst.b = src.b(cols);
    if (src.c0.size()) dst.c0 = src.c0(cols);
    if (src.c1.size()) dst.c1 = src.c1(cols);
    out.layers.push_back(std::move(dst));
  }
  out.validate();
  return out;
}

struct LotteryOutcome {
  std::uint64_t seed = 0;
  TrainRun base, reset, reinit;
  std::vector<std::vector<Index>> winners;  // [layer][teacher]
  std::vector<Index> shared;                // teachers whose top student was already taken
};

inline LotteryOutcome run_lottery_seed(const ExperimentConfig& c, std::uint64_t seed) {
  LotteryOutcome o;
  o.seed = seed;
  const Network teacher = build_teacher(c, seed);
  const Network student = build_student(c, teacher, run_seeds(c, seed).student);
  o.base = train_student(c, seed, teacher, student, c.train.epochs);
  std::vector<std::vector<Index>> keep;
  for (const auto& cps : o.base.checkpoints) {
    const CorrelationMatrix& last = cps.back();
    std::vector<Index> w = greedy_winners(last);
    const RhoBar top = rho_bar(last);
    Index shared = 0;
    for (std::size_t k = 0; k < w.size(); ++k)
      if (top.best[k] >= 0 && top.best[k] != w[k]) ++shared;
    o.shared.push_back(shared);
    std::vector<Index> kept;
    for (Index j : w)
      if (j >= 0) kept.push_back(j);
    std::sort(kept.begin(), kept.end());
    keep.push_back(kept);
    o.winners.push_back(std::move(w));
  }
  const Index retrain = c.lottery.retrain_epochs < 0 ? c.train.epochs : c.lottery.retrain_epochs;
  o.reset = train_student(c, seed, teacher, extract_subnetwork(student, keep), retrain);
  const Network fresh = build_student(c, teacher, derive_seed(seed, 5));
  o.reinit = train_student(c, seed, teacher, extract_subnetwork(fresh, keep), retrain);
  return o;
}

inline RunLog run_lottery(const ExperimentConfig& c, int workers) {
  RunLog log;
  log.config_hash = config_hash(c);
  log.summary = {{"config_hash", "seed", "arm", "layer", "final_loss", "rho_bar", "diverged"}, {}};
  std::vector<LotteryOutcome> outs = parallel_map<LotteryOutcome>(
      c.seeds.size(), workers, [&](std::size_t i) { return run_lottery_seed(c, c.seeds[i]); });
  Table winners{{"seed", "layer", "teacher", "student", "rho"}, {}};
  Json shared = Json::object();
  for (const LotteryOutcome& o : outs) {
    const std::pair<const char*, const TrainRun*> arms[] = {
        {"winners_reset", &o.reset}, {"winners_reinit", &o.reinit}, {"baseline", &o.base}};
    for (const auto& [name, run] : arms)
      for (std::size_t l = 0; l < run->checkpoints.size(); ++l)
        log.summary.add({log.config_hash, fmt_int(o.seed), name, fmt_int(l), fmt(run->final_loss()),
                         fmt(run->final_rho(static_cast<Index>(l))), run->diverged ? "1" : "0"});
    for (std::size_t l = 0; l < o.winners.size(); ++l)
      for (std::size_t k = 0; k < o.winners[l].size(); ++k) {
        const Index j = o.winners[l][k];
        winners.add({fmt_int(o.seed), fmt_int(l), fmt_int(k), fmt_int(j),
                     j < 0 ? "nan" : fmt(o.base.checkpoints[l].back().rho(j, static_cast<Index>(k)))});
      }
    shared[std::to_string(o.seed)] = o.shared;
  }
  log.tables["winners.csv"] = std::move(winners);
  log.meta["shared_winners"] = shared;
  for (const char* arm : {"winners_reset", "winners_reinit", "baseline"}) {
    std::vector<TrainRun> runs;
    for (const LotteryOutcome& o : outs)
      runs.push_back(std::string(arm) == "baseline" ? o.base : std::string(arm) == "winners_reset" ? o.reset : o.reinit);
    detail::add_train_plots(log, arm, runs);
  }
  return log;
}

// ---------------------------------------------------------------------------
// BatchNorm bias audit

inline RunLog run_bn_audit(const ExperimentConfig& c, int workers) {
  RunLog log;
  log.config_hash = config_hash(c);
  log.summary = {{"config_hash", "seed", "layer", "n_neg", "n_pos", "neg_fraction"}, {}};
  std::vector<TrainRun> runs = parallel_map<TrainRun>(
      c.seeds.size(), workers, [&](std::size_t i) { return run_train_seed(c, c.seeds[i]); });
  for (const TrainRun& r : runs) {
    Table hist{{"layer", "n_neg", "n_pos", "bin_lo", "bin_hi", "count"}, {}};
    for (const BnLayerAudit& a : bn_bias_audit(r.final_net)) {
      const double total = static_cast<double>(a.n_negative + a.n_positive);
      log.summary.add({log.config_hash, fmt_int(r.seed), fmt_int(a.layer), fmt_int(a.n_negative),
                       fmt_int(a.n_positive), fmt(static_cast<double>(a.n_negative) / total)});
      for (int b = 0; b < kAuditBins; ++b)
        hist.add({fmt_int(a.layer), fmt_int(a.n_negative), fmt_int(a.n_positive), fmt(a.bin_lo(b)),
                  fmt(a.bin_hi(b)), fmt_int(a.counts[static_cast<std::size_t>(b)])});
    }
    log.tables["runs/audit_seed" + std::to_string(r.seed) + ".csv"] = std::move(hist);
  }
  Table training = detail::train_header(false);
  std::swap(training, log.summary);
  detail::add_train_runs(log, "", runs);
  std::swap(training, log.summary);
  log.tables["training.csv"] = std::move(training);
  log.meta["diverged"] = detail::divergence_meta("", runs);
  return log;
}

// ---------------------------------------------------------------------------
// Gradient decomposition check

inline RunLog run_verify_thm1(const ExperimentConfig& c, int workers) {
  RunLog log;
  log.config_hash = config_hash(c);
  log.summary = {{"config_hash", "seed", "trial", "student_widths", "teacher_widths", "batch",
                  "max_residual", "max_gradient", "relative", "pass"},
                 {}};
  const VerifySettings& v = c.verify;
  auto widths_text = [](const std::vector<Index>& w) {
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "-" : "") + std::to_string(w[i]);
    return s;
  };
  using Rows = std::vector<std::vector<std::string>>;
  std::vector<Rows> per_seed = parallel_map<Rows>(c.seeds.size(), workers, [&](std::size_t i) {
    Rng rng(derive_seed(c.seeds[i], 0x7E1));
    auto width = [&] { return 1 + static_cast<Index>(rng.index(static_cast<std::size_t>(v.max_width))); };
    Rows rows;
    for (Index trial = 0; trial < v.trials; ++trial) {
      const Index depth = 1 + static_cast<Index>(rng.index(static_cast<std::size_t>(v.max_depth)));
      std::vector<Index> ws{width()}, wt;
      for (Index l = 1; l < depth; ++l) ws.push_back(width());
      ws.push_back(width());
      wt = ws;
      for (Index l = 1; l < depth; ++l) wt[static_cast<std::size_t>(l)] = width();
      const Index batch = 1 + static_cast<Index>(rng.index(static_cast<std::size_t>(v.max_batch)));
      Network s = init_network(NetworkSpec::make(ws), rng), t = init_network(NetworkSpec::make(wt), rng);
      for (Layer& l : s.layers) l.b = rng.gaussian(l.b.size(), 1, 0.3);
      for (Layer& l : t.layers) l.b = rng.gaussian(l.b.size(), 1, 0.3);
      const Matrix x = rng.gaussian(batch, ws.front());
      const ForwardTrace ts = forward(s, x), tt = forward(t, x);
      const IdentityCheck chk = verify_identity(compute_beta(s, t, ts, tt), ts, tt, backward(s, ts, tt.output()));
      const bool pass = chk.relative() < v.tolerance;
      rows.push_back({log.config_hash, fmt_int(c.seeds[i]), fmt_int(trial), widths_text(ws), widths_text(wt),
                      fmt_int(batch), fmt(chk.max_residual), fmt(chk.max_gradient), fmt(chk.relative()),
                      pass ? "1" : "0"});
    }
    return rows;
  });
  Index failures = 0;
  for (const Rows& rows : per_seed)
    for (const auto& row : rows) {
      failures += row.back() == "0";
      log.summary.add(row);
    }
  log.checks_passed = failures == 0;
  log.meta["failures"] = failures;
  return log;
}

// ---------------------------------------------------------------------------
// Overlap-function check

/// Joint activation probability and ReLU product moment of two unit
/// directions at angle theta, sampled in the plane they span.
inline std::pair<Estimate, Estimate> planar_psi(double theta, Index n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x2D));
  const double ct = std::cos(theta), st = std::sin(theta);
  double hits = 0.0, sum = 0.0, sum_sq = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double a = rng.normal(), b = ct * a + st * rng.normal();
    hits += (a > 0.0 && b > 0.0) ? 1.0 : 0.0;
    const double prod = std::max(a, 0.0) * std::max(b, 0.0);
    sum += prod;
    sum_sq += prod * prod;
  }
  const double nn = static_cast<double>(n);
  const double p = hits / nn, mean = sum / nn;
  const double var = std::max(sum_sq / nn - mean * mean, 0.0) * nn / (nn - 1.0);
  return {{p, std::sqrt(p * (1.0 - p) / nn)}, {mean, std::sqrt(var / nn)}};
}

inline RunLog run_psi_check(const ExperimentConfig& c, int workers) {
  RunLog log;
  log.config_hash = config_hash(c);
  log.summary = {{"config_hash", "seed", "quantity", "angle", "estimate", "std_error", "reference",
                  "reference_se", "z"},
                 {}};
  const PsiSettings& p = c.psi;
  using Rows = std::vector<std::vector<std::string>>;
  std::vector<Rows> per_seed = parallel_map<Rows>(c.seeds.size(), workers, [&](std::size_t i) {
    const std::uint64_t seed = c.seeds[i];
    Rng rng(derive_seed(seed, 0x951));
    GausStream stream({p.dim, 1.0, StreamMode::infinite, 0, derive_seed(seed, 0x952)});
    const Vector w = rng.gaussian(p.dim, 1).normalized();
    Vector u = rng.gaussian(p.dim, 1);
    u = (u - w * w.dot(u)).normalized();
    Rows rows;
    auto row = [&](const std::string& q, double angle, const Estimate& e, const Estimate& ref) {
      const double se = std::hypot(e.std_error, ref.std_error);
      rows.push_back({log.config_hash, fmt_int(seed), q, fmt(angle), fmt(e.value), fmt(e.std_error),
                      fmt(ref.value), fmt(ref.std_error), fmt(se > 0 ? std::abs(e.value - ref.value) / se : 0.0)});
    };
    for (double a : p.angles) {
      const Vector w2 = std::cos(a) * w + std::sin(a) * u;
      const auto [ref_d, ref_l] = planar_psi(a, p.samples, seed);
      row("psi_d", a, psi_d(w, w2, stream, p.samples), ref_d);
      row("psi_l", a, psi_l(w, w2, stream, p.samples), ref_l);
    }
    row("psi_d_self", 0.0, psi_d(w, w, stream, p.samples), {0.5, 0.0});
    row("psi_d_opposite", M_PI, psi_d(w, -w, stream, p.samples), {0.0, 0.0});
    const Estimate small = psi_d(w, w, stream, std::max<Index>(2, p.samples / 4));
    const Estimate large = psi_d(w, w, stream, p.samples);
    row("psi_d_se_ratio_4x", 0.0, {small.std_error / large.std_error, 0.0}, {2.0, 0.0});
    return rows;
  });
  for (const Rows& rows : per_seed)
    for (const auto& r : rows) log.summary.add(r);
  return log;
}

// ---------------------------------------------------------------------------
// Quadratic fall-off probe

inline RunLog run_falloff(const ExperimentConfig& c, int workers) {
  RunLog log;
  log.config_hash = config_hash(c);
  log.summary = {{"config_hash", "seed", "delta", "diff", "std_error", "l_star", "kept"}, {}};
  const FalloffSettings& f = c.falloff;
  std::vector<FalloffResult> results = parallel_map<FalloffResult>(c.seeds.size(), workers, [&](std::size_t i) {
    Rng rng(derive_seed(c.seeds[i], 0xFA0));
    GausStream stream({f.dim, 1.0, StreamMode::infinite, 0, derive_seed(c.seeds[i], 0xFA1)});
    return quadratic_falloff_probe(rng.gaussian(f.dim, 1).normalized(), f.scales, stream, f.samples, c.seeds[i]);
  });
  Table fits{{"config_hash", "seed", "exponent", "c0_hat", "fitted", "kept_points"}, {}};
  Plot plot{"falloff.svg", "diagonal correlation gap vs perturbation", "log10 |w - w*|", "log10 |l* - l|", {}};
  for (std::size_t i = 0; i < results.size(); ++i) {
    const FalloffResult& r = results[i];
    Index kept = 0;
    Series s{"seed" + std::to_string(c.seeds[i]), {}, {}};
    for (const FalloffPoint& p : r.points) {
      log.summary.add({log.config_hash, fmt_int(c.seeds[i]), fmt(p.delta), fmt(p.diff), fmt(p.std_error),
                       fmt(p.l_star), p.kept ? "1" : "0"});
      kept += p.kept;
      if (p.kept) {
        s.x.push_back(std::log10(p.delta));
        s.y.push_back(std::log10(std::abs(p.diff)));
      }
    }
    plot.series.push_back(s);
    fits.add({log.config_hash, fmt_int(c.seeds[i]), fmt(r.exponent), fmt(r.c0_hat), r.fitted ? "1" : "0",
              fmt_int(kept)});
  }
  log.tables["fits.csv"] = std::move(fits);
  log.plots.push_back(std::move(plot));
  return log;
}

// ---------------------------------------------------------------------------
// Over-parameterized two-layer grid

struct Thm5Record {
  Index t = 0;
  double u_mean = 0.0, r_mean = 0.0, ratio = 0.0;
  std::optional<HypothesisEntry> monitor;
};

struct Thm5Run {
  Index overparam = 1;
  double p_w = 0.0, p_v = 0.0;
  std::uint64_t seed = 0;
  std::vector<Thm5Record> records;
  LedgerInputs inputs;
  std::optional<ConstantLedger> ledger;
  std::string ledger_note;
  bool guaranteed = false;
  std::string failure;
  Table trajectory;
};

/// Ledger inputs measured on the initial state: overlap of the teacher
/// columns, Lipschitz and fall-off constants around the first teacher column,
/// the largest initial u-set angle and the upper-layer norm bounds.
inline LedgerInputs measure_ledger_inputs(const TwoLayerState& st, Index n, std::uint64_t seed) {
  GausStream s({st.w.rows(), 1.0, StreamMode::infinite, 0, derive_seed(seed, 0x1ED)});
  const OverlapReport o = overlap_eps_columns(st.w_star, s, n);
  const LipschitzReport k = lipschitz_probe(st.w_star.col(0), s, n, 4, {0.05}, seed);
  const FalloffResult f = quadratic_falloff_probe(st.w_star.col(0), {0.05, 0.1, 0.2}, s, n, seed);
  LedgerInputs in;
  in.k_d = k.k_d;
  in.k_l = k.k_l;
  in.theta0 = 0.0;
  for (Index j = 0; j < st.m(); ++j) in.theta0 = std::max(in.theta0, angle_between(st.w.col(j), st.w_star.col(j)));
  in.eps_d = o.eps_d;
  in.eps_l = o.eps_l;
  in.b_v = std::max(st.v.rowwise().norm().maxCoeff(), st.v_star.rowwise().norm().maxCoeff());
  in.b_dv = (st.v.topRows(st.m()) - st.v_star).rowwise().norm().maxCoeff();
  in.m = st.m();
  in.n = st.n();
  in.c0 = f.fitted ? f.c0_hat : std::nan("");
  in.eta = st.eta;
  in.d_min = o.d.diagonal().minCoeff();
  in.l_min = o.l.diagonal().minCoeff();
  return in;
}

inline Json ledger_json(const LedgerInputs& in, const std::optional<ConstantLedger>& g) {
  Json inputs = {{"K_d", in.k_d}, {"K_l", in.k_l}, {"theta0", in.theta0}, {"eps_d", finite_or_null(in.eps_d)},
                 {"eps_l", finite_or_null(in.eps_l)}, {"B_v", in.b_v}, {"B_dv", in.b_dv}, {"m", in.m},
                 {"n", in.n}, {"C0", finite_or_null(in.c0)}, {"eta", in.eta}, {"d_min", in.d_min},
                 {"l_min", in.l_min}};
  if (!g) return {{"inputs", inputs}};
  auto family = [](const FamilyConstants& f) {
    return Json{{"C_u", f.c_u}, {"C_r", f.c_r}, {"M_uu", f.m_uu}, {"M_ur", f.m_ur}, {"M_ru", f.m_ru},
                {"M_rr", f.m_rr}, {"B_u", f.b_u}, {"B_r", f.b_r}, {"floor", f.floor}};
  };
  return {{"inputs", inputs},
          {"d", family(g->d)},
          {"l", family(g->l)},
          {"lambda_bar", g->lambda_bar},
          {"kappa", g->kappa},
          {"w_cond", g->w_cond},
          {"v_cond", g->v_cond},
          {"gamma", g->gamma},
          {"rate_w", g->rate_w},
          {"rate_v", g->rate_v},
          {"iterations", g->iterations},
          {"feasible", g->feasible},
          {"binding", g->binding}};
}

inline Thm5Run run_thm5_cell(const ExperimentConfig& c, Index overparam, double p_w, double p_v,
                             std::uint64_t seed) {
  const Thm5Settings& s = c.thm5;
  Thm5Run run;
  run.overparam = overparam;
  run.p_w = p_w;
  run.p_v = p_v;
  run.seed = seed;
  const RunSeeds rs = run_seeds(c, seed);
  TwoLayerInit init;
  init.d = s.input;
  init.m = s.hidden;
  init.c = s.output;
  init.overparam = overparam;
  init.p_w = p_w;
  init.p_v = p_v;
  init.eta = s.eta;
  init.teacher_seed = rs.teacher;
  init.seed = rs.student;
  TwoLayerState st = make_two_layer(init);

  run.inputs = measure_ledger_inputs(st, s.ledger_samples, rs.aux);
  try {
    run.ledger = thm5_constants(run.inputs);
    run.guaranteed = run.ledger->feasible;
    if (!run.guaranteed) run.ledger_note = "infeasible: " + run.ledger->binding;
  } catch (const PreconditionError& e) {
    run.ledger_note = std::string("unavailable: ") + e.what();
  }

  std::vector<std::string> header{"t"};
  for (Index j = 0; j < st.m(); ++j) header.push_back("sin_" + std::to_string(j));
  for (Index j = 0; j < st.n(); ++j) header.push_back("v_" + std::to_string(j));
  for (const char* h : {"w_separation", "wu_contraction", "v_contraction", "wr_bound", "gamma", "rate_w"})
    header.push_back(h);
  run.trajectory.header = header;

  GausStream stream({s.input, 1.0, StreamMode::infinite, 0, rs.train});
  GausStream probe({s.input, 1.0, StreamMode::infinite, 0, rs.validation});
  auto record = [&] {
    Thm5Record r;
    r.t = st.t;
    const Vector norms = st.row_norms();
    r.u_mean = norms.head(st.m()).mean();
    r.r_mean = st.n() > st.m() ? norms.tail(st.n() - st.m()).mean() : 0.0;
    r.ratio = st.norm_ratio();
    if (run.ledger) {
      const PairMoments ext = pair_moments(probe.next_batch(s.samples), st.w, st.extended_teacher(), true, false);
      r.monitor = monitor_hypotheses(st, *run.ledger, ext);
    }
    std::vector<std::string> row{fmt_int(st.t)};
    const Vector sines = column_sines(st.w, st.w_star);
    for (Index j = 0; j < sines.size(); ++j) row.push_back(fmt(sines(j)));
    for (Index j = 0; j < norms.size(); ++j) row.push_back(fmt(norms(j)));
    const double nan = std::nan("");
    row.push_back(fmt(r.monitor ? r.monitor->w_separation : nan));
    row.push_back(fmt(r.monitor ? r.monitor->wu_contraction : nan));
    row.push_back(fmt(r.monitor ? r.monitor->v_contraction : nan));
    row.push_back(fmt(r.monitor ? r.monitor->wr_bound : nan));
    row.push_back(fmt(run.ledger ? run.ledger->gamma : nan));
    row.push_back(fmt(run.ledger ? run.ledger->rate_w : nan));
    run.trajectory.add(std::move(row));
    run.records.push_back(std::move(r));
  };
  record();
  try {
    for (Index t = 1; t <= s.iterations; ++t) {
      step_two_layer(st, stream, s.samples);
      if (t % s.record_every == 0 || t == s.iterations) record();
    }
  } catch (const NumericError& e) {
    run.failure = e.what();
  }
  return run;
}

inline std::string cell_name(Index overparam, double p_w, double p_v) {
  return "o" + std::to_string(overparam) + "_pw" + fmt(p_w) + "_pv" + fmt(p_v);
}

inline RunLog run_thm5_grid(const ExperimentConfig& c, int workers) {
  const Thm5Settings& s = c.thm5;
  RunLog log;
  log.config_hash = config_hash(c);
  log.summary = {{"config_hash", "overparam", "p_w", "p_v", "mode", "t", "u_norm_mean", "u_norm_std",
                  "r_norm_mean", "r_norm_std", "ratio_mean", "ratio_std", "below_target", "runs"},
                 {}};
  struct Cell {
    Index overparam;
    double p_w, p_v;
  };
  std::vector<Cell> cells;
  for (Index k : s.overparams)
    for (const auto& [pw, pv] : s.cells) cells.push_back({k, pw, pv});
  const std::size_t per = c.seeds.size();
  std::vector<Thm5Run> runs = parallel_map<Thm5Run>(cells.size() * per, workers, [&](std::size_t i) {
    const Cell& cell = cells[i / per];
    return run_thm5_cell(c, cell.overparam, cell.p_w, cell.p_v, c.seeds[i % per]);
  });

  Json meta_cells = Json::array();
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    const Cell& cell = cells[ci];
    const std::string name = cell_name(cell.overparam, cell.p_w, cell.p_v);
    bool all_guaranteed = s.mode == "guaranteed";
    Json seeds = Json::array();
    std::size_t longest = 0;
    for (std::size_t k = 0; k < per; ++k) {
      const Thm5Run& r = runs[ci * per + k];
      all_guaranteed = all_guaranteed && r.guaranteed;
      longest = std::max(longest, r.records.size());
      log.tables["runs/" + name + "_seed" + std::to_string(r.seed) + ".csv"] = r.trajectory;
      seeds.push_back({{"seed", r.seed},
                       {"guaranteed", r.guaranteed},
                       {"ledger_note", r.ledger_note},
                       {"ledger", ledger_json(r.inputs, r.ledger)},
                       {"final_ratio", r.records.back().ratio},
                       {"failure", r.failure}});
    }
    const std::string mode = all_guaranteed ? "guaranteed" : "free-run";
    Plot plot{"thm5_" + name + ".svg", "row norms of V, " + name, "iteration", "row norm", {}};
    Series series[6] = {{"u-set mean", {}, {}}, {"u-set +std", {}, {}}, {"u-set -std", {}, {}},
                        {"r-set mean", {}, {}}, {"r-set +std", {}, {}}, {"r-set -std", {}, {}}};
    for (std::size_t i = 0; i < longest; ++i) {
      std::vector<double> u, rr, ratio;
      Index t = 0;
      for (std::size_t k = 0; k < per; ++k) {
        const Thm5Run& r = runs[ci * per + k];
        if (i >= r.records.size()) continue;
        t = r.records[i].t;
        u.push_back(r.records[i].u_mean);
        rr.push_back(r.records[i].r_mean);
        ratio.push_back(r.records[i].ratio);
      }
      auto mean_std = [](const std::vector<double>& v) {
        double m = 0.0, q = 0.0;
        for (double x : v) m += x / static_cast<double>(v.size());
        for (double x : v) q += (x - m) * (x - m);
        return std::pair<double, double>{m, v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0};
      };
      const auto [um, us] = mean_std(u);
      const auto [rm, rsd] = mean_std(rr);
      const auto [qm, qs] = mean_std(ratio);
      const double below =
          static_cast<double>(std::count_if(ratio.begin(), ratio.end(), [&](double x) { return x < s.ratio_target; })) /
          static_cast<double>(ratio.size());
      log.summary.add({log.config_hash, fmt_int(cell.overparam), fmt(cell.p_w), fmt(cell.p_v), mode, fmt_int(t),
                       fmt(um), fmt(us), fmt(rm), fmt(rsd), fmt(qm), fmt(qs), fmt(below), fmt_int(ratio.size())});
      const double values[6] = {um, um + us, um - us, rm, rm + rsd, rm - rsd};
      for (int k = 0; k < 6; ++k) {
        series[k].x.push_back(static_cast<double>(t));
        series[k].y.push_back(values[k]);
      }
    }
    for (Series& se : series) plot.series.push_back(std::move(se));
    log.plots.push_back(std::move(plot));
    meta_cells.push_back({{"cell", name}, {"mode", mode}, {"runs", seeds}});
  }
  log.meta["cells"] = meta_cells;
  return log;
}

// ---------------------------------------------------------------------------

inline RunLog run_experiment(const ExperimentConfig& c, int workers) {
  const auto start = std::chrono::steady_clock::now();
  RunLog log;
  switch (c.kind) {
    case ExperimentKind::verify_thm1: log = run_verify_thm1(c, workers); break;
    case ExperimentKind::train: log = run_train(c, workers); break;
    case ExperimentKind::thm5_grid: log = run_thm5_grid(c, workers); break;
    case ExperimentKind::ablate_size:
    case ExperimentKind::ablate_overparam:
    case ExperimentKind::ablate_finite: log = run_ablations(c, workers); break;
    case ExperimentKind::lottery: log = run_lottery(c, workers); break;
    case ExperimentKind::bn_audit: log = run_bn_audit(c, workers); break;
    case ExperimentKind::psi_check: log = run_psi_check(c, workers); break;
    case ExperimentKind::falloff_probe: log = run_falloff(c, workers); break;
  }
  log.config = config_to_json(c);
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

}  // namespace tslab
