#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bem/filter.hpp"

namespace bem {

namespace detail {

inline double trace_solve(const MatrixXd& cov, const MatrixXd& moment, const std::string& what) {
    Eigen::LLT<MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError(what + " is not positive definite");
    return llt.solve(moment).trace();
}

}  // namespace detail

/// E[(xi_0 - mu0)(xi_0 - mu0)'] under the smoothed initial estimate.
inline MatrixXd initial_moment(const HyperParams& phi, const PassResult& pass) {
    const VectorXd e = pass.smoothed0.mean - phi.mu0;
    return pass.smoothed0.cov + e * e.transpose();
}

/// Expected complete-data log posterior, constants dropped.
inline double surrogate(const HyperParams& phi, const PassResult& pass, std::size_t n) {
    const double nn = static_cast<double>(n);
    double l = 0.0;
    if (n > 0) {
        l -= 0.5 * nn * logdet_spd(phi.r_a, "R^a");
        l -= 0.5 * nn * logdet_spd(phi.q_a, "Q^a");
        l -= 0.5 * detail::trace_solve(phi.r_a, pass.obs_moment, "R^a");
        l -= 0.5 * detail::trace_solve(phi.q_a, pass.proc_moment, "Q^a");
    }
    l -= 0.5 * logdet_spd(phi.p0, "P0");
    l -= 0.5 * detail::trace_solve(phi.p0, initial_moment(phi, pass), "P0");
    if (!std::isfinite(l)) throw NumericalError("surrogate: non-finite value");
    return l;
}

/// Zero the cross-blocks between z, theta and p.
inline void project_blockdiag(MatrixXd& q, const StateLayout& L) {
    const int offs[3] = {L.z0(), L.theta0(), L.p0()};
    const int lens[3] = {L.nz(), L.ntheta, L.np};
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
            if (a != b) q.block(offs[a], offs[b], lens[a], lens[b]).setZero();
}

inline HyperParams m_step(const PassResult& pass, std::size_t n, const HyperParams& like, bool blockdiag = false) {
    if (n == 0) throw ValidationError("m_step: at least one time step is required");
    HyperParams out = like;
    out.mu0 = pass.smoothed0.mean;
    out.p0 = symmetrized(pass.smoothed0.cov);
    out.r_a = symmetrized(pass.obs_moment / static_cast<double>(n));
    out.q_a = symmetrized(pass.proc_moment / static_cast<double>(n));
    if (blockdiag) project_blockdiag(out.q_a, out.layout);
    return out;
}

struct DefaultHyperOptions {
    double gamma = 1e-4;
    double q_theta = 1e-8;
    double q_z = 1e-13;
    double q_p = 1e3;
    double r_pd_factor = 10.0;
    double p0_z = 1e-8;
    double p0_theta_rel = 0.25;
    std::optional<double> p0_p;  // defaults to q_p
};

/// Mean square of each data column.
inline VectorXd mean_square(const MatrixXd& data) {
    if (data.rows() == 0) return VectorXd::Zero(data.cols());
    return data.array().square().colwise().mean().transpose();
}

/// Starting Phi when the steady-state initializer is skipped.
inline HyperParams default_hyperparams(const MatrixXd& data, const StructuralModel& model, const SensorConfig& cfg,
                                       const VectorXd& theta0, const DefaultHyperOptions& o = {}) {
    cfg.validate(model);
    model.check_theta(theta0);
    if (data.cols() != cfg.n_meas()) throw ValidationError("default_hyperparams: data/sensor channel mismatch");
    HyperParams phi;
    phi.layout = StateLayout(model);
    phi.n_meas = cfg.n_meas();
    phi.n_pseudo = cfg.n_pseudo;
    const StateLayout& L = phi.layout;
    const int nx = L.size();
    phi.mu0 = VectorXd::Zero(nx);
    phi.mu0.segment(L.theta0(), L.ntheta) = theta0;
    phi.p0 = MatrixXd::Zero(nx, nx);
    phi.p0.block(0, 0, L.nz(), L.nz()).diagonal().setConstant(o.p0_z);
    for (int s = 0; s < L.ntheta; ++s) {
        const double sd = o.p0_theta_rel * std::max(std::abs(theta0(s)), 1e-12);
        phi.p0(L.theta0() + s, L.theta0() + s) = sd * sd;
    }
    phi.p0.block(L.p0(), L.p0(), L.np, L.np).diagonal().setConstant(o.p0_p.value_or(o.q_p));

    phi.q_a = MatrixXd::Zero(nx, nx);
    phi.q_a.block(0, 0, L.nz(), L.nz()).diagonal().setConstant(o.q_z);
    phi.q_a.block(L.theta0(), L.theta0(), L.ntheta, L.ntheta).diagonal().setConstant(o.q_theta);
    phi.q_a.block(L.p0(), L.p0(), L.np, L.np).diagonal().setConstant(o.q_p);

    const int no = cfg.n_obs();
    phi.r_a = MatrixXd::Zero(no, no);
    const VectorXd ms = mean_square(data);
    for (int i = 0; i < cfg.n_meas(); ++i) {
        const double v = o.gamma * ms(i);
        if (!(v > 0.0)) throw ValidationError("default_hyperparams: channel " + std::to_string(i + 1) + " is all zero");
        phi.r_a(i, i) = v;
    }
    for (int i = 0; i < cfg.n_pseudo; ++i) phi.r_a(cfg.n_meas() + i, cfg.n_meas() + i) = o.r_pd_factor * o.q_p;
    return phi;
}

struct BemOptions {
    double tol = 2e-4;
    int itrmax = 200;
    bool project_blockdiag = false;
    JacobianStrategy strategy = JacobianStrategy::series_sensitivity;
    bool final_pass = true;
    std::function<void(int, double, double, const HyperParams&)> on_iteration;
};

struct TracePoint {
    int iteration = 0;
    double surrogate = 0.0;
    double con = 0.0;
};

struct BemResult {
    MatrixXd smoothed_mean;  // N_xi x (n+1)
    MatrixXd smoothed_var;
    HyperParams phi;
    std::vector<TracePoint> trace;
    std::vector<HyperParams> history;  // Phi after each M-step
    int iterations = 0;
    bool converged = false;
    std::string failure;               // empty on success
    std::optional<std::size_t> failed_step;
};

inline double convergence_metric(double l1, double l0) { return std::abs(l1 - l0) / std::max(std::abs(l0), 1.0); }

/// Alternate E-step passes and M-step updates until the surrogate settles.
inline BemResult run_bem(const MatrixXd& data, const StructuralModel& model, const SensorConfig& cfg,
                         const HyperParams& phi0, const BemOptions& opts = {}) {
    if (data.rows() == 0) throw ValidationError("run_bem: dataset has no samples");
    if (opts.itrmax < 1) throw ValidationError("run_bem: itrmax must be positive");
    if (!(opts.tol > 0.0)) throw ValidationError("run_bem: tol must be positive");
    phi0.validate();
    const auto n = static_cast<std::size_t>(data.rows());

    BemResult out;
    out.phi = phi0;
    PassOptions po;
    po.strategy = opts.strategy;
    po.store_trajectory = false;
    double l0 = 1.0;
    try {
        for (int it = 1; it <= opts.itrmax; ++it) {
            const PassResult pass = run_pass(data, model, cfg, out.phi, po);
            const HyperParams next = m_step(pass, n, out.phi, opts.project_blockdiag);
            const double l1 = surrogate(next, pass, n);
            const double con = it == 1 ? std::numeric_limits<double>::infinity() : convergence_metric(l1, l0);
            out.trace.push_back({it, l1, con});
            out.history.push_back(next);
            out.phi = next;
            out.iterations = it;
            if (opts.on_iteration) opts.on_iteration(it, l1, con, next);
            l0 = l1;
            if (con < opts.tol) {
                out.converged = true;
                break;
            }
        }
        if (opts.final_pass) {
            po.store_trajectory = true;
            const PassResult fin = run_pass(data, model, cfg, out.phi, po);
            out.smoothed_mean = fin.smoothed_mean;
            out.smoothed_var = fin.smoothed_var;
        }
    } catch (const FilterAbort& e) {
        out.converged = false;
        out.failure = e.what();
        out.failed_step = e.step();
    } catch (const NumericalError& e) {
        out.converged = false;
        out.failure = e.what();
    }
    return out;
}

struct VirtualSeries {
    std::vector<VirtualChannel> channels;
    MatrixXd mean;  // (n+1) x channels
    MatrixXd std;
};

/// Posterior mean and standard deviation of virtual channels at every step, under hyperparameters phi.
inline VirtualSeries emit_virtual(const MatrixXd& data, const StructuralModel& model, const SensorConfig& cfg,
                                  const HyperParams& phi, const std::vector<VirtualChannel>& channels,
                                  JacobianStrategy strategy = JacobianStrategy::series_sensitivity) {
    if (channels.empty()) throw ValidationError("emit_virtual: no channels requested");
    for (const auto& ch : channels) virtual_row(model, ch);
    VirtualSeries out;
    out.channels = channels;
    const auto rows = static_cast<Eigen::Index>(data.rows() + 1);
    const auto nc = static_cast<Eigen::Index>(channels.size());
    out.mean.resize(rows, nc);
    out.std.resize(rows, nc);
    PassOptions po;
    po.strategy = strategy;
    po.store_trajectory = false;
    po.on_smoothed = [&](std::size_t k, const GaussianEstimate& e) {
        const VirtualPosterior vp = virtual_posterior(model, e.mean, e.cov, channels);
        out.mean.row(static_cast<Eigen::Index>(k)) = vp.mean.transpose();
        out.std.row(static_cast<Eigen::Index>(k)) = vp.cov.diagonal().cwiseMax(0.0).cwiseSqrt().transpose();
    };
    run_pass(data, model, cfg, phi, po);
    return out;
}

inline VirtualSeries emit_virtual(const BemResult& result, const MatrixXd& data, const StructuralModel& model,
                                  const SensorConfig& cfg, const std::vector<VirtualChannel>& channels,
                                  JacobianStrategy strategy = JacobianStrategy::series_sensitivity) {
    return emit_virtual(data, model, cfg, result.phi, channels, strategy);
}

}  // namespace bem
