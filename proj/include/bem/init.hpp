#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bem/em.hpp"

namespace bem {

/// Frozen-theta LTI model over zeta = [z; p].
struct ReducedModel {
    MatrixXd a_z;  // [[A, B], [0, I]]
    MatrixXd g_z;  // [G_c, J_c] with pseudo rows
    int n_zeta = 0;
};

inline ReducedModel reduce_model(const StructuralModel& model, const SensorConfig& cfg, const VectorXd& theta0) {
    model.check_theta(theta0);
    const StateLayout L(model);
    const ContinuousSS c = continuous_ss(model, theta0);
    const DiscreteSS d = discretize(c.a_c, c.b_c, model.dt());
    if (!d.a.allFinite() || !d.b.allFinite()) throw NumericalError("reduce_model: divergent discretization");
    ReducedModel rm;
    rm.n_zeta = L.nz() + L.np;
    rm.a_z = MatrixXd::Identity(rm.n_zeta, rm.n_zeta);
    rm.a_z.topLeftCorner(L.nz(), L.nz()) = d.a;
    rm.a_z.topRightCorner(L.nz(), L.np) = d.b;
    const MatrixXd g = ObservationModel(model, cfg).matrix(theta0);
    rm.g_z.resize(g.rows(), rm.n_zeta);
    rm.g_z.leftCols(L.nz()) = g.leftCols(L.nz());
    rm.g_z.rightCols(L.np) = g.rightCols(L.np);
    return rm;
}

struct StationarySet {
    MatrixXd p_pred;    // predictive covariance
    MatrixXd k_gain;    // filter gain
    MatrixXd p_filt;    // filtered covariance
    MatrixXd l_gain;    // smoother gain
    MatrixXd p_smooth;  // smoothed covariance
};

inline StationarySet stationary_gains(const ReducedModel& rm, const MatrixXd& q_z, const MatrixXd& r_a) {
    StationarySet s;
    s.p_pred = solve_dare(rm.a_z, rm.g_z, q_z, r_a).p_pred;
    const MatrixXd gp = rm.g_z * s.p_pred;
    MatrixXd innov = r_a + gp * rm.g_z.transpose();
    symmetrize(innov);
    s.k_gain = spd_solve(innov, gp, 1e-14, "stationary_gains: innovation covariance").transpose();
    s.p_filt = s.p_pred - s.k_gain * gp;
    symmetrize(s.p_filt);
    // L = P A' (P^-)^-1
    s.l_gain = spd_solve(s.p_pred, rm.a_z * s.p_filt, 1e-16, "stationary_gains: predictive covariance").transpose();
    MatrixXd c = s.p_filt - s.l_gain * s.p_pred * s.l_gain.transpose();
    symmetrize(c);
    s.p_smooth = solve_stein(s.l_gain, c);
    return s;
}

struct InitializerOptions {
    double tol = 2e-4;
    int itrmax = 200;
    std::optional<VectorXd> mu0;  // zero when unset
    std::optional<MatrixXd> p0;   // 1e-2 I when unset
};

struct InitializerResult {
    MatrixXd q_hat;  // N_zeta x N_zeta
    MatrixXd r_hat;
    VectorXd mu0;
    MatrixXd p0;
    std::vector<TracePoint> trace;
    std::vector<MatrixXd> q_history;
    std::vector<MatrixXd> r_history;
    int iterations = 0;
    bool converged = false;
    std::string failure;
};

namespace detail {

struct StationaryMoments {
    VectorXd zeta01;
    MatrixXd obs;   // sum of residual outer products, smoothed-covariance terms added
    MatrixXd proc;
};

inline StationaryMoments stationary_pass(const MatrixXd& data, const ReducedModel& rm, const StationarySet& st,
                                         const VectorXd& mu0, int n_pseudo) {
    const auto n = data.rows();
    const int nm = static_cast<int>(data.cols());
    const int no = nm + n_pseudo;
    const int nzeta = rm.n_zeta;
    StationaryMoments out;
    out.obs = MatrixXd::Zero(no, no);
    out.proc = MatrixXd::Zero(nzeta, nzeta);
    VectorXd filt = mu0;
    VectorXd d = VectorXd::Zero(no);
    VectorXd prev_sm;
    VectorXd sm, resid, e;
    auto obs_term = [&](Eigen::Index j, const VectorXd& s) {
        d.head(nm) = data.row(j - 1).transpose();
        resid = d - rm.g_z * s;
        out.obs.noalias() += resid * resid.transpose();
    };
    for (Eigen::Index k = 1; k <= n; ++k) {
        const VectorXd pred = rm.a_z * filt;
        d.head(nm) = data.row(k - 1).transpose();
        const VectorXd upd = pred + st.k_gain * (d - rm.g_z * pred);
        sm = filt + st.l_gain * (upd - pred);
        if (k == 1) {
            out.zeta01 = sm;
        } else {
            obs_term(k - 1, sm);
            e = sm - rm.a_z * prev_sm;
            out.proc.noalias() += e * e.transpose();
        }
        prev_sm = sm;
        filt = upd;
    }
    if (n == 0) {
        out.zeta01 = filt;
    } else {
        obs_term(n, filt);
        e = filt - rm.a_z * prev_sm;
        out.proc.noalias() += e * e.transpose();
    }
    const double nn = static_cast<double>(n);
    const MatrixXd& ps = st.p_smooth;
    const MatrixXd alp = rm.a_z * st.l_gain * ps;
    out.obs += nn * (rm.g_z * ps * rm.g_z.transpose());
    out.proc += nn * (ps + rm.a_z * ps * rm.a_z.transpose() - alp - alp.transpose());
    symmetrize(out.obs);
    symmetrize(out.proc);
    return out;
}

inline double stationary_surrogate(const MatrixXd& r, const MatrixXd& q, const MatrixXd& p0, const VectorXd& mu0,
                                   const StationaryMoments& m, const MatrixXd& p_smooth, std::size_t n) {
    const double nn = static_cast<double>(n);
    double l = -0.5 * nn * logdet_spd(r, "R^a") - 0.5 * nn * logdet_spd(q, "Q^zeta") - 0.5 * logdet_spd(p0, "P0");
    l -= 0.5 * trace_solve(r, m.obs, "R^a");
    l -= 0.5 * trace_solve(q, m.proc, "Q^zeta");
    const VectorXd e = m.zeta01 - mu0;
    l -= 0.5 * trace_solve(p0, p_smooth + e * e.transpose(), "P0");
    if (!std::isfinite(l)) throw NumericalError("initializer surrogate: non-finite value");
    return l;
}

}  // namespace detail

/// Steady-state noise initializer with theta frozen at theta0.
inline InitializerResult run_initializer(const MatrixXd& data, const StructuralModel& model, const SensorConfig& cfg,
                                         const VectorXd& theta0, const MatrixXd& q0, const MatrixXd& r0,
                                         const InitializerOptions& opts = {}) {
    cfg.validate(model);
    if (data.rows() == 0) throw ValidationError("run_initializer: dataset has no samples");
    if (data.cols() != cfg.n_meas()) throw ValidationError("run_initializer: data/sensor channel mismatch");
    const ReducedModel rm = reduce_model(model, cfg, theta0);
    const int nzeta = rm.n_zeta;
    if (q0.rows() != nzeta || q0.cols() != nzeta) throw ValidationError("run_initializer: q0 has wrong size");
    if (r0.rows() != cfg.n_obs() || r0.cols() != cfg.n_obs())
        throw ValidationError("run_initializer: r0 has wrong size");
    const auto n = static_cast<std::size_t>(data.rows());

    InitializerResult out;
    out.q_hat = q0;
    out.r_hat = r0;
    out.mu0 = opts.mu0.value_or(VectorXd::Zero(nzeta));
    out.p0 = opts.p0.value_or(MatrixXd::Identity(nzeta, nzeta) * 1e-2);
    double l0 = 1.0;
    for (int it = 1; it <= opts.itrmax; ++it) {
        StationarySet st;
        try {
            st = stationary_gains(rm, out.q_hat, out.r_hat);
        } catch (const NumericalError& e) {
            out.failure = e.what();
            out.converged = false;
            return out;
        }
        const detail::StationaryMoments m = detail::stationary_pass(data, rm, st, out.mu0, cfg.n_pseudo);
        const double nn = static_cast<double>(n);
        MatrixXd r_new = m.obs / nn;
        MatrixXd q_new = m.proc / nn;
        symmetrize(r_new);
        symmetrize(q_new);
        const VectorXd mu_new = m.zeta01;
        const MatrixXd p0_new = st.p_smooth;
        double l1 = 0.0;
        try {
            l1 = detail::stationary_surrogate(r_new, q_new, p0_new, mu_new, m, st.p_smooth, n);
        } catch (const NumericalError& e) {
            out.failure = e.what();
            out.converged = false;
            return out;
        }
        const double con = it == 1 ? std::numeric_limits<double>::infinity() : convergence_metric(l1, l0);
        out.trace.push_back({it, l1, con});
        out.q_hat = q_new;
        out.r_hat = r_new;
        out.mu0 = mu_new;
        out.p0 = p0_new;
        out.q_history.push_back(q_new);
        out.r_history.push_back(r_new);
        out.iterations = it;
        l0 = l1;
        if (con < opts.tol) {
            out.converged = true;
            break;
        }
    }
    return out;
}

/// Initial Q^zeta = blockdiag(q_z I, q_p I).
inline MatrixXd reduced_process_noise(const StateLayout& L, double q_z, double q_p) {
    MatrixXd q = MatrixXd::Zero(L.nz() + L.np, L.nz() + L.np);
    q.topLeftCorner(L.nz(), L.nz()).diagonal().setConstant(q_z);
    q.bottomRightCorner(L.np, L.np).diagonal().setConstant(q_p);
    return q;
}

/// Embed the initializer output into a full Phi; theta blocks come from `base`, theta cross-blocks are zero.
inline HyperParams embed_initializer(const InitializerResult& init, const HyperParams& base) {
    HyperParams phi = base;
    const StateLayout& L = phi.layout;
    const int nz = L.nz(), np = L.np, t0 = L.theta0(), p0 = L.p0();
    auto embed = [&](const MatrixXd& src, MatrixXd& dst) {
        dst.block(0, 0, nz, nz) = src.block(0, 0, nz, nz);
        dst.block(0, p0, nz, np) = src.block(0, nz, nz, np);
        dst.block(p0, 0, np, nz) = src.block(nz, 0, np, nz);
        dst.block(p0, p0, np, np) = src.block(nz, nz, np, np);
        dst.block(0, t0, nz, L.ntheta).setZero();
        dst.block(t0, 0, L.ntheta, nz).setZero();
        dst.block(p0, t0, np, L.ntheta).setZero();
        dst.block(t0, p0, L.ntheta, np).setZero();
    };
    embed(init.q_hat, phi.q_a);
    embed(init.p0, phi.p0);
    phi.mu0.head(nz) = init.mu0.head(nz);
    phi.mu0.tail(np) = init.mu0.tail(np);
    phi.r_a = init.r_hat;
    symmetrize(phi.q_a);
    symmetrize(phi.p0);
    return phi;
}

}  // namespace bem
