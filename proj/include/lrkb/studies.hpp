#pragma once

#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "lrkb/config.hpp"
#include "lrkb/dlr.hpp"
#include "lrkb/dlr_enkf.hpp"
#include "lrkb/fem.hpp"
#include "lrkb/kbp.hpp"
#include "lrkb/metrics.hpp"
#include "lrkb/model.hpp"

namespace lrkb {

/// Numerical failure annotated with the step at which it surfaced.
struct DivergedAtStep : std::runtime_error {
  Eigen::Index step;
  DivergedAtStep(Eigen::Index s, const std::string& what)
      : std::runtime_error("step " + std::to_string(s) + ": " + what),
        step(s) {}
};

struct ModelBundle {
  LinearAffineModel model;
  LowRankGaussian ic;
  std::optional<QuadMesh> mesh;  // fem only
};

inline std::vector<ObsSquare> observation_squares_from_config(
    const RunConfig& cfg) {
  std::vector<ObsSquare> squares;
  const auto g = static_cast<double>(cfg.observation_grid);
  for (Eigen::Index j = 0; j < cfg.observation_grid; ++j)
    for (Eigen::Index i = 0; i < cfg.observation_grid; ++i)
      squares.push_back({(2.0 * static_cast<double>(i) + 1.0) / (2.0 * g),
                         (2.0 * static_cast<double>(j) + 1.0) / (2.0 * g),
                         cfg.observation_side});
  return squares;
}

/// Instantiates the configured model and initial law; `sigma` overrides the
/// config value so sweeps can rebuild per grid point.
inline ModelBundle build_bundle(const RunConfig& cfg, double sigma) {
  ModelBundle b;
  if (cfg.model == "advection") {
    b.model = build_upwind_model(cfg.d, cfg.length, cfg.decay, cfg.forcing,
                                 sigma, cfg.gamma);
    b.ic = advection_initial_condition(cfg.d, cfg.length, cfg.r_true);
  } else {
    b.mesh = build_mesh(cfg.nodes, cfg.nodes);
    const FemOperators ops = assemble_operators(
        *b.mesh, cfg.diffusion, {cfg.advection_x, cfg.advection_y}, sigma);
    if (cfg.observation == "full") {
      b.model = build_fem_model_full(ops, cfg.gamma);
    } else {
      const MatrixXd H = assemble_partial_observation(
          *b.mesh, observation_squares_from_config(cfg));
      b.model = build_fem_model_partial(ops, H, cfg.gamma);
    }
    b.ic = fem_initial_condition(*b.mesh, cfg.r_true, ops.M);
  }
  return b;
}

inline ModelBundle build_bundle(const RunConfig& cfg) {
  return build_bundle(cfg, cfg.sigma);
}

/// Restricts a low-rank Gaussian to its best rank-R part (top eigenpairs of
/// the coefficient Gram matrix).
inline LowRankGaussian truncate_ic(const LowRankGaussian& ic,
                                   Eigen::Index R) {
  const Eigen::Index r0 = ic.U.cols();
  if (R > r0)
    throw std::invalid_argument(
        "truncate_ic: requested rank exceeds the initial basis");
  if (R == r0) return ic;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig{ic.MY};
  LowRankGaussian out;
  out.mean = ic.mean;
  out.U = ic.U * eig.eigenvectors().rightCols(R).rowwise().reverse();
  out.MY = MatrixXd(
      eig.eigenvalues().tail(R).reverse().cwiseMax(0.0).asDiagonal());
  return out;
}

struct TruthPath {
  MatrixXd signal;  // (n_steps + 1) x d
  ObservationPath obs;
};

/// One replicate's signal and observation path, drawn from purpose-keyed
/// streams so every filter sees the same truth.
inline TruthPath make_truth(const LinearAffineModel& m,
                            const LowRankGaussian& ic, Eigen::Index n_steps,
                            double dt, const RngPlan& plan,
                            std::uint64_t replicate) {
  auto ic_stream = plan.stream("ic", replicate);
  const VectorXd x0 = sample_low_rank_ic(ic, ic_stream);
  auto signal_stream = plan.stream("signal", replicate);
  TruthPath t;
  t.signal = simulate_signal(m, x0, n_steps, dt, signal_stream);
  auto obs_stream = plan.stream("obs", replicate);
  t.obs = simulate_observations(m, t.signal, dt, obs_stream);
  return t;
}

struct StepTable {
  std::vector<std::string> header;
  MatrixXd rows;
};

inline void write_step_csv(const std::filesystem::path& path,
                           const StepTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  for (size_t i = 0; i < table.header.size(); ++i)
    out << (i ? ", " : "") << table.header[i];
  out << "\n";
  for (Eigen::Index r = 0; r < table.rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.rows.cols(); ++c)
      out << (c ? "," : "") << io_detail::fmt_double(table.rows(r, c));
    out << "\n";
  }
}

namespace study_detail {

template <typename Fn>
void step_loop(Eigen::Index n, Fn&& body) {
  for (Eigen::Index i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (const DivergedAtStep&) {
      throw;
    } catch (const std::exception& e) {
      throw DivergedAtStep(i, e.what());
    }
  }
}

// trace of U M U^T without forming it (valid for any U, symmetric M)
inline double reconstructed_trace(const MatrixXd& U, const MatrixXd& M) {
  return (M.cwiseProduct(U.transpose() * U)).sum();
}

}  // namespace study_detail

struct MomentRun {
  StepTable steps;  // t, trace_P, mean_norm, rmse
  double irmse_value = 0.0;
  KbState final_state;   // covariance reconstructed for the reduced filter
  MatrixXd final_modes;  // reduced filter only
};

/// Full-order or reduced moment filter along one observation path, with the
/// per-step diagnostics used by the study CSVs.
inline MomentRun run_moment_filter(const LinearAffineModel& m,
                                   const LowRankGaussian& ic,
                                   const ObservationPath& obs,
                                   const MatrixXd& signal,
                                   const std::string& kind, Eigen::Index rank,
                                   OpCount* ops = nullptr) {
  const double dt = obs.dt;
  const Eigen::Index n = obs.steps();
  const bool reduced = kind == "dlr-kbp";
  if (!reduced && kind != "kbp")
    throw std::invalid_argument("run_moment_filter: unknown kind " + kind);

  MomentRun run;
  run.steps.header = {"t", "trace_P", "mean_norm", "rmse"};
  run.steps.rows.resize(n + 1, 4);

  KbState kb;
  DlrKbState ds;
  if (reduced)
    ds = dlr_state_from_ic(truncate_ic(ic, rank));
  else
    kb = kb_state_from_ic(ic);

  const auto record = [&](Eigen::Index i) {
    const double tr = reduced ? study_detail::reconstructed_trace(ds.U, ds.M)
                              : kb.cov.trace();
    const VectorXd& mean = reduced ? ds.mean : kb.mean;
    run.steps.rows.row(i) << dt * static_cast<double>(i), tr, mean.norm(),
        rmse(mean, tr, signal.row(i).transpose());
    if (!run.steps.rows.row(i).allFinite())
      throw DivergedAtStep(i, "non-finite filter diagnostics");
  };

  study_detail::step_loop(n, [&](Eigen::Index i) {
    record(i);
    const VectorXd dZ = obs.dZ.row(i).transpose();
    if (reduced)
      dlr_kb_step(m, ds, dZ, dt, ops);
    else
      kb_step(m, kb, dZ, dt, ops);
  });
  record(n);

  run.irmse_value = irmse(run.steps.rows.col(3), dt, dt * n);
  if (reduced) {
    run.final_state.mean = ds.mean;
    run.final_state.cov = reconstruct_cov(ds);
    run.final_modes = ds.U;
  } else {
    run.final_state = kb;
  }
  return run;
}

/// No-assimilation baseline: mean and covariance evolve under the model
/// alone (zero gain), recorded with the same diagnostics.
inline MomentRun run_zero_gain_moments(const LinearAffineModel& m,
                                       const LowRankGaussian& ic,
                                       Eigen::Index n, double dt,
                                       const MatrixXd& signal) {
  MomentRun run;
  run.steps.header = {"t", "trace_P", "mean_norm", "rmse"};
  run.steps.rows.resize(n + 1, 4);
  KbState st = kb_state_from_ic(ic);
  const auto record = [&](Eigen::Index i) {
    run.steps.rows.row(i) << dt * static_cast<double>(i), st.cov.trace(),
        st.mean.norm(), rmse(st.mean, st.cov.trace(), signal.row(i).transpose());
    if (!run.steps.rows.row(i).allFinite())
      throw DivergedAtStep(i, "non-finite propagated moments");
  };
  study_detail::step_loop(n, [&](Eigen::Index i) {
    record(i);
    st.mean += dt * (m.A * st.mean + m.f);
    st.cov += dt * (m.A * st.cov + st.cov * m.A.transpose() + m.Sigma);
    resymmetrize(st.cov);
  });
  record(n);
  run.irmse_value = irmse(run.steps.rows.col(3), dt, dt * n);
  run.final_state = st;
  return run;
}

struct EnsembleRun {
  StepTable steps;
  double irmse_value = 0.0;
  MatrixXd final_particles;
  DlrEnsemble final_reduced;  // reduced filter only
};

/// Full-order or reduced ensemble filter along one observation path. The
/// reduced filter writes `t, rmse_ensemble, trace_Mhat, trunc_err,
/// stiefel_defect, dropped_cols`; the full-order one `t, rmse_ensemble,
/// trace_Phat`.
inline EnsembleRun run_ensemble_filter(
    const LinearAffineModel& m, const LowRankGaussian& ic,
    const ObservationPath& obs, const MatrixXd& signal,
    const std::string& kind, Eigen::Index rank, Eigen::Index particles,
    const std::string& integrator, double drop_tol, const RngPlan& plan,
    std::uint64_t replicate, OpCount* ops = nullptr) {
  const double dt = obs.dt;
  const Eigen::Index n = obs.steps();
  const bool reduced = kind == "dlr-enkf";
  if (!reduced && kind != "enkf")
    throw std::invalid_argument("run_ensemble_filter: unknown kind " + kind);
  const SparseMat* W = m.has_mass() ? &*m.mass : nullptr;

  EnsembleRun run;
  run.steps.header =
      reduced ? std::vector<std::string>{"t", "rmse_ensemble", "trace_Mhat",
                                         "trunc_err", "stiefel_defect",
                                         "dropped_cols"}
              : std::vector<std::string>{"t", "rmse_ensemble", "trace_Phat"};
  run.steps.rows.resize(n + 1, static_cast<Eigen::Index>(
                                   run.steps.header.size()));

  DlrEnsemble ens;
  MatrixXd X;
  if (reduced) {
    ens = init_reduced_ensemble(truncate_ic(ic, rank), particles, plan,
                                replicate);
  } else {
    X.resize(m.d, particles);
    for (Eigen::Index p = 0; p < particles; ++p) {
      auto stream =
          plan.stream("enkf-ic", replicate, static_cast<std::uint64_t>(p));
      X.col(p) = sample_low_rank_ic(ic, stream);
    }
  }
  EnsembleNoise noise(plan, particles, replicate);
  std::optional<SemiImplicitSolver> solver;
  const bool use_bug = reduced && integrator == "bug";
  if (use_bug || (!reduced && m.has_mass())) solver.emplace(m, dt);

  // row i describes the state at t_i; the truncation diagnostics belong to
  // the step that produced it
  const auto record = [&](Eigen::Index i, const BugStepReport* report) {
    const double t = dt * static_cast<double>(i);
    const VectorXd x = signal.row(i).transpose();
    if (reduced) {
      const double trace_Mhat =
          ens.Y.squaredNorm() / static_cast<double>(particles - 1);
      const MatrixXd gram = W ? MatrixXd(ens.U.transpose() * (*W * ens.U))
                              : MatrixXd(ens.U.transpose() * ens.U);
      const double defect =
          (gram - MatrixXd::Identity(ens.rank(), ens.rank())).norm();
      run.steps.rows.row(i) << t,
          ensemble_rmse(reconstruct_particles(ens), x, W), trace_Mhat,
          report ? report->truncation_error : 0.0, defect,
          report ? static_cast<double>(report->dropped_cols) : 0.0;
    } else {
      const MatrixXd centered = X.colwise() - VectorXd(X.rowwise().mean());
      run.steps.rows.row(i) << t, ensemble_rmse(X, x, W),
          centered.squaredNorm() / static_cast<double>(particles - 1);
    }
    if (!run.steps.rows.row(i).allFinite())
      throw DivergedAtStep(i, "non-finite ensemble diagnostics");
  };

  BugStepReport last_report;
  record(0, nullptr);
  study_detail::step_loop(n, [&](Eigen::Index i) {
    const VectorXd dZ = obs.dZ.row(i).transpose();
    const MatrixXd dW = noise.draw_w(m.d, dt);
    const MatrixXd dV = noise.draw_v(m.k, dt);
    if (reduced && use_bug)
      last_report = bug_step(m, *solver, ens, dZ, dW, dV, dt, drop_tol, ops);
    else if (reduced)
      dlr_enkf_em_step(m, ens, dZ, dW, dV, dt, ops);
    else if (solver)
      enkf_step_semi_implicit(m, *solver, X, dZ, dW, dV, dt, ops);
    else
      enkf_step(m, X, dZ, dW, dV, dt, ops);
    record(i + 1, use_bug ? &last_report : nullptr);
  });

  run.irmse_value = irmse(run.steps.rows.col(1), dt, dt * n);
  if (reduced) {
    run.final_particles = reconstruct_particles(ens);
    run.final_reduced = std::move(ens);
  } else {
    run.final_particles = std::move(X);
  }
  return run;
}

/// Runs the reduced ensemble filter and the full-order one on identical
/// noise draws and records their matched-particle distance, relative to the
/// full-order ensemble magnitude, at every step.
inline StepTable run_consistency_pair(
    const LinearAffineModel& m, const LowRankGaussian& ic,
    const ObservationPath& obs, Eigen::Index rank, Eigen::Index particles,
    const std::string& integrator, double drop_tol, const RngPlan& plan,
    std::uint64_t replicate) {
  const double dt = obs.dt;
  const Eigen::Index n = obs.steps();
  const SparseMat* W = m.has_mass() ? &*m.mass : nullptr;

  DlrEnsemble ens =
      init_reduced_ensemble(truncate_ic(ic, rank), particles, plan, replicate);
  MatrixXd X(m.d, particles);
  for (Eigen::Index p = 0; p < particles; ++p) {
    auto stream =
        plan.stream("enkf-ic", replicate, static_cast<std::uint64_t>(p));
    X.col(p) = sample_low_rank_ic(ic, stream);
  }
  EnsembleNoise noise(plan, particles, replicate);
  const bool use_bug = integrator == "bug";
  std::optional<SemiImplicitSolver> solver;
  if (use_bug || m.has_mass()) solver.emplace(m, dt);

  StepTable table;
  table.header = {"t", "ell2p_rel"};
  table.rows.resize(n + 1, 2);
  const auto record = [&](Eigen::Index i) {
    const double scale =
        std::max(ell2p_distance(X, MatrixXd::Zero(m.d, particles), W),
                 1e-300);
    table.rows.row(i) << dt * static_cast<double>(i),
        ell2p_distance(X, reconstruct_particles(ens), W) / scale;
  };
  record(0);
  study_detail::step_loop(n, [&](Eigen::Index i) {
    const VectorXd dZ = obs.dZ.row(i).transpose();
    const MatrixXd dW = noise.draw_w(m.d, dt);
    const MatrixXd dV = noise.draw_v(m.k, dt);
    if (use_bug)
      bug_step(m, *solver, ens, dZ, dW, dV, dt, drop_tol);
    else
      dlr_enkf_em_step(m, ens, dZ, dW, dV, dt);
    if (solver)
      enkf_step_semi_implicit(m, *solver, X, dZ, dW, dV, dt);
    else
      enkf_step(m, X, dZ, dW, dV, dt);
    record(i + 1);
  });
  return table;
}

struct PocOutcome {
  double gram_err_sq = 0.0;      // |Mhat - M_Y|_F^2 at T
  double particle_err_sq = 0.0;  // |Xhat^(1) - X^(1)|^2 at T
};

/// One replicate of the propagation-of-chaos experiment: the interacting
/// reduced ensemble against its mean-field limit driven by the first
/// particle's noise.
inline PocOutcome run_poc_replicate(const LinearAffineModel& m,
                                    const LowRankGaussian& ic,
                                    const ObservationPath& obs,
                                    Eigen::Index particles,
                                    const RngPlan& plan,
                                    std::uint64_t replicate) {
  const double dt = obs.dt;
  const Eigen::Index n = obs.steps();
  DlrEnsemble ens = init_reduced_ensemble(ic, particles, plan, replicate);
  DlrKbState mf = dlr_state_from_ic(ic);
  // the mean-field rider reuses particle 0's initial draw, uncentered
  auto s0 = plan.stream("enkf-ic", replicate, 0);
  VectorXd y1 = gaussian_factor(ic.MY) * s0.normal_vector(ic.U.cols());
  EnsembleNoise noise(plan, particles, replicate);

  study_detail::step_loop(n, [&](Eigen::Index i) {
    const VectorXd dZ = obs.dZ.row(i).transpose();
    const MatrixXd dW = noise.draw_w(m.d, dt);
    const MatrixXd dV = noise.draw_v(m.k, dt);
    dlr_meanfield_step(m, mf, y1, dZ, dW.col(0), dV.col(0), dt);
    dlr_enkf_em_step(m, ens, dZ, dW, dV, dt);
  });

  PocOutcome out;
  out.gram_err_sq = (sample_reduced_cov(ens) - mf.M).squaredNorm();
  const VectorXd coupled = ens.U0 + ens.U * ens.Y.row(0).transpose();
  const VectorXd limit = mf.mean + mf.U * y1;
  out.particle_err_sq = (coupled - limit).squaredNorm();
  return out;
}

namespace study_detail {

/// Replicate-parallel dispatch; results must be written to disjoint slots.
template <typename Fn>
void for_each_replicate(int replicates, int threads, Fn&& fn) {
  if (threads <= 1) {
    for (int r = 0; r < replicates; ++r) fn(r);
    return;
  }
  std::atomic<int> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= replicates) return;
      try {
        fn(r);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n_workers = std::min(threads, replicates);
  pool.reserve(static_cast<size_t>(n_workers));
  for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace study_detail

struct StudyOutput {
  std::vector<std::pair<std::string, StudyResult>> summaries;
  std::vector<std::pair<std::string, StepTable>> step_tables;
};

namespace study_detail {

inline StudyResult base_result(const RunConfig& cfg, const std::string& hash,
                               const std::string& git_rev) {
  StudyResult result;
  result.study = cfg.study;
  result.seed = cfg.seed;
  result.config_hash = hash;
  result.git_revision = git_rev;
  return result;
}

inline StepTable matrix_table(const MatrixXd& m, const std::string& prefix) {
  StepTable table;
  table.header.reserve(static_cast<size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    table.header.push_back(prefix + "_" + std::to_string(j));
  table.rows = m;
  return table;
}

inline StudyOutput run_single_study(const RunConfig& cfg, int threads,
                                    const std::string& hash,
                                    const std::string& git_rev,
                                    bool dump_modes) {
  const ModelBundle bundle = build_bundle(cfg);
  const auto n = static_cast<Eigen::Index>(std::llround(cfg.T / cfg.dt));
  const RngPlan plan{cfg.seed};
  const bool ensemble = cfg.filter == "enkf" || cfg.filter == "dlr-enkf";

  std::vector<double> values(static_cast<size_t>(cfg.replicates));
  StudyOutput out;
  std::mutex table_mutex;
  study_detail::for_each_replicate(cfg.replicates, threads, [&](int rep) {
    const TruthPath truth = make_truth(bundle.model, bundle.ic, n, cfg.dt,
                                       plan, static_cast<std::uint64_t>(rep));
    StepTable table;
    double value = 0.0;
    std::vector<std::pair<std::string, StepTable>> extras;
    if (ensemble) {
      EnsembleRun run = run_ensemble_filter(
          bundle.model, bundle.ic, truth.obs, truth.signal, cfg.filter,
          cfg.rank, cfg.particles, cfg.integrator, cfg.drop_tol, plan,
          static_cast<std::uint64_t>(rep));
      value = run.irmse_value;
      table = std::move(run.steps);
      if (rep == 0) {
        extras.emplace_back(
            "final_mean",
            matrix_table(run.final_particles.rowwise().mean().transpose(),
                         "m"));
        if (dump_modes && cfg.filter == "dlr-enkf")
          extras.emplace_back("final_modes",
                              matrix_table(run.final_reduced.U, "mode"));
      }
    } else {
      MomentRun run =
          run_moment_filter(bundle.model, bundle.ic, truth.obs, truth.signal,
                            cfg.filter, cfg.rank);
      value = run.irmse_value;
      table = std::move(run.steps);
      if (rep == 0) {
        extras.emplace_back(
            "final_mean",
            matrix_table(run.final_state.mean.transpose(), "m"));
        if (dump_modes && cfg.filter == "dlr-kbp")
          extras.emplace_back("final_modes",
                              matrix_table(run.final_modes, "mode"));
      }
    }
    values[static_cast<size_t>(rep)] = value;
    {
      std::lock_guard<std::mutex> lock(table_mutex);
      out.step_tables.emplace_back("steps_rep" + std::to_string(rep),
                                   std::move(table));
      for (auto& extra : extras)
        out.step_tables.push_back(std::move(extra));
    }
    if (cfg.consistency_check && rep == 0) {
      StepTable consistency = run_consistency_pair(
          bundle.model, bundle.ic, truth.obs, cfg.rank, cfg.particles,
          cfg.integrator, cfg.drop_tol, plan, 0);
      std::lock_guard<std::mutex> lock(table_mutex);
      out.step_tables.emplace_back("steps_consistency",
                                   std::move(consistency));
    }
  });

  StudyResult result = base_result(cfg, hash, git_rev);
  result.points.push_back(
      make_study_point(static_cast<double>(cfg.rank), values));
  out.summaries.emplace_back("summary", std::move(result));
  return out;
}

inline StudyOutput run_rank_sweep(const RunConfig& cfg, int threads,
                                  const std::string& hash,
                                  const std::string& git_rev) {
  const ModelBundle bundle = build_bundle(cfg);
  const auto n = static_cast<Eigen::Index>(std::llround(cfg.T / cfg.dt));
  const RngPlan plan{cfg.seed};
  const size_t n_ranks = cfg.rank_grid.size();

  std::vector<std::vector<double>> cov_errs(n_ranks),
      mean_errs(n_ranks);
  for (auto& v : cov_errs) v.resize(static_cast<size_t>(cfg.replicates));
  for (auto& v : mean_errs) v.resize(static_cast<size_t>(cfg.replicates));
  StudyOutput out;
  std::mutex table_mutex;

  study_detail::for_each_replicate(cfg.replicates, threads, [&](int rep) {
    const TruthPath truth = make_truth(bundle.model, bundle.ic, n, cfg.dt,
                                       plan, static_cast<std::uint64_t>(rep));
    KbState fom = kb_state_from_ic(bundle.ic);
    std::vector<DlrKbState> reduced;
    reduced.reserve(n_ranks);
    for (Eigen::Index R : cfg.rank_grid)
      reduced.push_back(dlr_state_from_ic(truncate_ic(bundle.ic, R)));

    const bool record = rep == 0;
    std::vector<StepTable> tables(record ? n_ranks : 0);
    if (record)
      for (auto& t : tables) {
        t.header = {"t", "mean_err", "cov_err", "bap"};
        t.rows.resize(n + 1, 4);
      }
    const auto snapshot = [&](Eigen::Index i) {
      if (!record) return;
      Eigen::SelfAdjointEigenSolver<MatrixXd> eig{fom.cov};
      const VectorXd lambda = eig.eigenvalues();  // ascending
      for (size_t k = 0; k < n_ranks; ++k) {
        const Eigen::Index R = cfg.rank_grid[k];
        const double bap =
            R >= lambda.size() ? 0.0 : lambda.head(lambda.size() - R).norm();
        tables[k].rows.row(i) << cfg.dt * static_cast<double>(i),
            (reduced[k].mean - fom.mean).norm(),
            (reconstruct_cov(reduced[k]) - fom.cov).norm(), bap;
      }
    };
    study_detail::step_loop(n, [&](Eigen::Index i) {
      snapshot(i);
      const VectorXd dZ = truth.obs.dZ.row(i).transpose();
      kb_step(bundle.model, fom, dZ, cfg.dt);
      for (auto& st : reduced) dlr_kb_step(bundle.model, st, dZ, cfg.dt);
    });
    snapshot(n);

    for (size_t k = 0; k < n_ranks; ++k) {
      cov_errs[k][static_cast<size_t>(rep)] =
          (reconstruct_cov(reduced[k]) - fom.cov).norm();
      mean_errs[k][static_cast<size_t>(rep)] =
          (reduced[k].mean - fom.mean).norm();
    }
    if (record) {
      std::lock_guard<std::mutex> lock(table_mutex);
      for (size_t k = 0; k < n_ranks; ++k)
        out.step_tables.emplace_back(
            "steps_rank" + std::to_string(cfg.rank_grid[k]),
            std::move(tables[k]));
    }
  });

  StudyResult cov_result = base_result(cfg, hash, git_rev);
  StudyResult mean_result = cov_result;
  for (size_t k = 0; k < n_ranks; ++k) {
    cov_result.points.push_back(make_study_point(
        static_cast<double>(cfg.rank_grid[k]), cov_errs[k]));
    mean_result.points.push_back(make_study_point(
        static_cast<double>(cfg.rank_grid[k]), mean_errs[k]));
  }
  out.summaries.emplace_back("summary_cov_err", std::move(cov_result));
  out.summaries.emplace_back("summary_mean_err", std::move(mean_result));
  return out;
}

inline StudyOutput run_sigma_sweep(const RunConfig& cfg, int threads,
                                   const std::string& hash,
                                   const std::string& git_rev) {
  const auto n = static_cast<Eigen::Index>(std::llround(cfg.T / cfg.dt));
  const RngPlan plan{cfg.seed};
  const size_t n_sigmas = cfg.sigma_grid.size();
  // models are shared across replicates, rebuilt per noise level
  std::vector<ModelBundle> bundles;
  bundles.reserve(n_sigmas);
  for (double sigma : cfg.sigma_grid) bundles.push_back(build_bundle(cfg, sigma));

  std::vector<std::vector<double>> cov_errs(n_sigmas), mean_errs(n_sigmas);
  for (auto& v : cov_errs) v.resize(static_cast<size_t>(cfg.replicates));
  for (auto& v : mean_errs) v.resize(static_cast<size_t>(cfg.replicates));
  StudyOutput out;
  std::mutex table_mutex;

  study_detail::for_each_replicate(cfg.replicates, threads, [&](int rep) {
    for (size_t k = 0; k < n_sigmas; ++k) {
      const ModelBundle& bundle = bundles[k];
      const TruthPath truth =
          make_truth(bundle.model, bundle.ic, n, cfg.dt, plan,
                     static_cast<std::uint64_t>(rep));
      KbState fom = kb_state_from_ic(bundle.ic);
      DlrKbState dlr = dlr_state_from_ic(truncate_ic(bundle.ic, cfg.rank));
      const bool record = rep == 0;
      StepTable table;
      if (record) {
        table.header = {"t", "mean_err", "cov_err"};
        table.rows.resize(n + 1, 3);
      }
      const auto snapshot = [&](Eigen::Index i) {
        if (!record) return;
        table.rows.row(i) << cfg.dt * static_cast<double>(i),
            (dlr.mean - fom.mean).norm(),
            (reconstruct_cov(dlr) - fom.cov).norm();
      };
      study_detail::step_loop(n, [&](Eigen::Index i) {
        snapshot(i);
        const VectorXd dZ = truth.obs.dZ.row(i).transpose();
        kb_step(bundle.model, fom, dZ, cfg.dt);
        dlr_kb_step(bundle.model, dlr, dZ, cfg.dt);
      });
      snapshot(n);
      cov_errs[k][static_cast<size_t>(rep)] =
          (reconstruct_cov(dlr) - fom.cov).norm();
      mean_errs[k][static_cast<size_t>(rep)] = (dlr.mean - fom.mean).norm();
      if (record) {
        std::lock_guard<std::mutex> lock(table_mutex);
        out.step_tables.emplace_back(
            "steps_sigma" + io_detail::fmt_double(cfg.sigma_grid[k]),
            std::move(table));
      }
    }
  });

  StudyResult cov_result = base_result(cfg, hash, git_rev);
  StudyResult mean_result = cov_result;
  for (size_t k = 0; k < n_sigmas; ++k) {
    cov_result.points.push_back(
        make_study_point(cfg.sigma_grid[k], cov_errs[k]));
    mean_result.points.push_back(
        make_study_point(cfg.sigma_grid[k], mean_errs[k]));
  }
  out.summaries.emplace_back("summary_cov_err", std::move(cov_result));
  out.summaries.emplace_back("summary_mean_err", std::move(mean_result));
  return out;
}

inline StudyOutput run_poc_study(const RunConfig& cfg, int threads,
                                 const std::string& hash,
                                 const std::string& git_rev) {
  const ModelBundle bundle = build_bundle(cfg);
  const auto n = static_cast<Eigen::Index>(std::llround(cfg.T / cfg.dt));
  const RngPlan plan{cfg.seed};
  const size_t n_points = cfg.particle_grid.size();

  std::vector<std::vector<double>> gram(n_points), particle(n_points);
  for (auto& v : gram) v.resize(static_cast<size_t>(cfg.replicates));
  for (auto& v : particle) v.resize(static_cast<size_t>(cfg.replicates));

  study_detail::for_each_replicate(cfg.replicates, threads, [&](int rep) {
    const TruthPath truth = make_truth(bundle.model, bundle.ic, n, cfg.dt,
                                       plan, static_cast<std::uint64_t>(rep));
    for (size_t k = 0; k < n_points; ++k) {
      const PocOutcome poc = run_poc_replicate(
          bundle.model, bundle.ic, truth.obs, cfg.particle_grid[k], plan,
          static_cast<std::uint64_t>(rep));
      gram[k][static_cast<size_t>(rep)] = poc.gram_err_sq;
      particle[k][static_cast<size_t>(rep)] = poc.particle_err_sq;
    }
  });

  StudyOutput out;
  StudyResult gram_result = base_result(cfg, hash, git_rev);
  StudyResult particle_result = gram_result;
  VectorXd xs(static_cast<Eigen::Index>(n_points)),
      gram_means(static_cast<Eigen::Index>(n_points)),
      particle_means(static_cast<Eigen::Index>(n_points));
  for (size_t k = 0; k < n_points; ++k) {
    const double x = static_cast<double>(cfg.particle_grid[k]);
    gram_result.points.push_back(make_study_point(x, gram[k]));
    particle_result.points.push_back(make_study_point(x, particle[k]));
    xs(static_cast<Eigen::Index>(k)) = x;
    gram_means(static_cast<Eigen::Index>(k)) =
        gram_result.points.back().mean;
    particle_means(static_cast<Eigen::Index>(k)) =
        particle_result.points.back().mean;
  }
  if (n_points >= 4) {
    gram_result.slope = fit_loglog_slope(xs, gram_means);
    particle_result.slope = fit_loglog_slope(xs, particle_means);
  }
  out.summaries.emplace_back("summary_gram", std::move(gram_result));
  out.summaries.emplace_back("summary_particle", std::move(particle_result));
  return out;
}

}  // namespace study_detail

/// Runs the configured study and returns its summaries and per-step tables
/// (replicate 0 carries the per-step diagnostics for sweeps).
inline StudyOutput run_study(const RunConfig& cfg, int threads,
                             const std::string& hash,
                             const std::string& git_rev,
                             bool dump_modes = false) {
  if (cfg.study == "single")
    return study_detail::run_single_study(cfg, threads, hash, git_rev,
                                          dump_modes);
  if (cfg.study == "rank-sweep")
    return study_detail::run_rank_sweep(cfg, threads, hash, git_rev);
  if (cfg.study == "sigma-sweep")
    return study_detail::run_sigma_sweep(cfg, threads, hash, git_rev);
  if (cfg.study == "poc")
    return study_detail::run_poc_study(cfg, threads, hash, git_rev);
  throw ConfigError("study.kind: unknown study " + cfg.study);
}

}  // namespace lrkb
