#pragma once

#include <functional>
#include <string>
#include <utility>

#include "bem/model.hpp"

namespace bem {

struct GaussianEstimate {
    VectorXd mean;
    MatrixXd cov;
};

/// Phi = {mu0, P0, Q^a, R^a} with the block layout needed for reporting.
struct HyperParams {
    VectorXd mu0;
    MatrixXd p0;
    MatrixXd q_a;
    MatrixXd r_a;
    StateLayout layout;
    int n_meas = 0;
    int n_pseudo = 0;

    int n_obs() const { return n_meas + n_pseudo; }

    void validate() const {
        const int nx = layout.size();
        if (mu0.size() != nx) throw ValidationError("hyperparameters: mu0 has wrong length");
        auto sq = [](const MatrixXd& m, int n, const char* name) {
            if (m.rows() != n || m.cols() != n)
                throw ValidationError(std::string("hyperparameters: ") + name + " must be " + std::to_string(n) +
                                      "x" + std::to_string(n));
            if (!m.allFinite()) throw ValidationError(std::string("hyperparameters: ") + name + " is not finite");
            if ((m - m.transpose()).norm() > 1e-10 * (1.0 + m.norm()))
                throw ValidationError(std::string("hyperparameters: ") + name + " is not symmetric");
        };
        sq(p0, nx, "P0");
        sq(q_a, nx, "Q^a");
        sq(r_a, n_obs(), "R^a");
    }
};

/// Thrown when a pass aborts; carries the last finite estimate.
class FilterAbort : public DivergenceError {
public:
    FilterAbort(const std::string& what, std::size_t step, GaussianEstimate last)
        : DivergenceError(what, step), last_(std::move(last)) {}
    const GaussianEstimate& last_estimate() const noexcept { return last_; }

private:
    GaussianEstimate last_;
};

inline constexpr double kInnovationMinRcond = 1e-14;
inline constexpr double kPredictiveMinRcond = 1e-16;

struct Prediction {
    GaussianEstimate est;
    MatrixXd jacobian;  // F at the previous mean
};

/// P_{k|k-1} = F P F' + Q^a for F = [[A, D, B], [0, I, 0], [0, 0, I]], exploiting the identity rows.
inline MatrixXd propagate_covariance(const MatrixXd& f, const MatrixXd& p, const MatrixXd& q, int nz) {
    const Eigen::Index n = p.rows();
    const Eigen::Index nr = n - nz;
    MatrixXd fp(n, n);
    fp.topRows(nz).noalias() = f.topRows(nz) * p;
    fp.bottomRows(nr) = p.bottomRows(nr);
    MatrixXd out(n, n);
    out.leftCols(nz).noalias() = fp * f.topRows(nz).transpose();
    out.rightCols(nr) = fp.rightCols(nr);
    out += q;
    symmetrize(out);
    return out;
}

inline Prediction ekf_predict(const GaussianEstimate& prev, ProcessModel& pm, const MatrixXd& q_a) {
    Prediction out;
    pm.linearize(prev.mean, out.est.mean, out.jacobian);
    out.est.cov = propagate_covariance(out.jacobian, prev.cov, q_a, pm.layout().nz());
    if (!out.est.cov.allFinite()) throw NumericalError("ekf_predict: non-finite covariance");
    return out;
}

inline GaussianEstimate ekf_predict(const GaussianEstimate& prev, const StructuralModel& model, const MatrixXd& q_a) {
    ProcessModel pm(model);
    return ekf_predict(prev, pm, q_a).est;
}

inline GaussianEstimate ekf_update(const GaussianEstimate& pred, const VectorXd& d_a, const ObservationModel& om,
                                   const MatrixXd& r_a) {
    if (d_a.size() != om.n_obs()) throw ValidationError("ekf_update: observation vector has wrong length");
    const MatrixXd h = om.jacobian(pred.mean);
    const VectorXd innov = d_a - om.map(pred.mean);
    const MatrixXd hp = h * pred.cov;
    MatrixXd s = r_a + hp * h.transpose();
    symmetrize(s);
    // gain' = S^-1 H P
    const MatrixXd gain_t = spd_solve(s, hp, kInnovationMinRcond, "ekf_update: innovation covariance");
    GaussianEstimate out;
    out.mean = pred.mean + gain_t.transpose() * innov;
    // Joseph form
    const MatrixXd ikh = MatrixXd::Identity(pred.cov.rows(), pred.cov.cols()) - gain_t.transpose() * h;
    out.cov = ikh * pred.cov * ikh.transpose() + gain_t.transpose() * r_a * gain_t;
    symmetrize(out.cov);
    if (!out.mean.allFinite() || !out.cov.allFinite()) throw NumericalError("ekf_update: non-finite estimate");
    return out;
}

struct SmoothResult {
    GaussianEstimate smoothed;  // estimate at k-1 given data through k
    MatrixXd gain;              // L_{k-1}
    MatrixXd cross_cov;         // L_{k-1} P_{k-1|k}
};

inline SmoothResult smooth_one_lag(const GaussianEstimate& filtered_km1, const GaussianEstimate& pred_k,
                                   const GaussianEstimate& updated_k, const MatrixXd& f_jac) {
    const MatrixXd fp = f_jac * filtered_km1.cov;
    SmoothResult out;
    out.gain = spd_solve(pred_k.cov, fp, kPredictiveMinRcond, "smooth_one_lag: predictive covariance").transpose();
    out.smoothed.mean = filtered_km1.mean + out.gain * (updated_k.mean - pred_k.mean);
    out.smoothed.cov = filtered_km1.cov + out.gain * (updated_k.cov - pred_k.cov) * out.gain.transpose();
    symmetrize(out.smoothed.cov);
    out.cross_cov = out.gain * out.smoothed.cov;
    return out;
}

/// Conditioning of the lag pair (xi_{k-1}, xi_k) in the process-noise expectation.
enum class LagPairing {
    joint,   // both given data through k+1 (xi_{k-1} corrected one more step)
    mixed,   // xi_{k-1} given data through k, xi_k given data through k+1
};

struct PassOptions {
    JacobianStrategy strategy = JacobianStrategy::series_sensitivity;
    LagPairing pairing = LagPairing::joint;
    bool store_trajectory = true;
    /// Called with (k, estimate of xi_k given data through k+1), k = 0..n in order; the last one is filtered.
    std::function<void(std::size_t, const GaussianEstimate&)> on_smoothed;
};

/// Sums over k = 1..n of the expectations used by the M-step.
struct PassResult {
    std::size_t n = 0;
    GaussianEstimate smoothed0;  // xi_{0|1}
    GaussianEstimate final_filtered;
    MatrixXd smoothed_mean;      // N_xi x (n+1)
    MatrixXd smoothed_var;       // N_xi x (n+1), diagonal of the covariances
    MatrixXd obs_moment;         // sum E[(d - h)(d - h)']
    MatrixXd proc_moment;        // sum E[(xi_k - f(xi_{k-1}))(...)']
};

/// Row k-1 of `data` (n x N_m) is the physical measurement at step k; pseudo targets are zero.
inline PassResult run_pass(const MatrixXd& data, const StructuralModel& model, const SensorConfig& cfg,
                           const HyperParams& phi, const PassOptions& opts = {}) {
    const ObservationModel om(model, cfg);
    const StateLayout L(model);
    const int nx = L.size();
    const int nz = L.nz();
    const int nm = cfg.n_meas();
    const int no = cfg.n_obs();
    if (phi.layout.size() != nx || phi.n_obs() != no) throw ValidationError("run_pass: hyperparameter layout mismatch");
    phi.validate();
    if (data.rows() > 0 && data.cols() != nm)
        throw ValidationError("run_pass: data has " + std::to_string(data.cols()) + " channels, sensor config expects " +
                              std::to_string(nm));
    const auto n = static_cast<std::size_t>(data.rows());

    ProcessModel pm_filter(model, opts.strategy);
    ProcessModel pm_smooth(model, opts.strategy);

    PassResult res;
    res.n = n;
    res.obs_moment = MatrixXd::Zero(no, no);
    res.proc_moment = MatrixXd::Zero(nx, nx);
    if (opts.store_trajectory) {
        res.smoothed_mean.resize(nx, static_cast<Eigen::Index>(n + 1));
        res.smoothed_var.resize(nx, static_cast<Eigen::Index>(n + 1));
    }

    GaussianEstimate filt{phi.mu0, phi.p0};
    VectorXd d_a = VectorXd::Zero(no);

    // state of the lagged expectation accumulators
    GaussianEstimate prev_sm;  // xi_{j-1|j}
    VectorXd prev_f;           // f(xi_{j-1|j})
    MatrixXd prev_F;           // F at xi_{j-1|j}
    MatrixXd prev_gain;        // L_{j-1}
    VectorXd fj;
    MatrixXd Fj;

    auto record = [&](std::size_t k, const GaussianEstimate& e) {
        if (opts.store_trajectory) {
            res.smoothed_mean.col(static_cast<Eigen::Index>(k)) = e.mean;
            res.smoothed_var.col(static_cast<Eigen::Index>(k)) = e.cov.diagonal();
        }
        if (opts.on_smoothed) opts.on_smoothed(k, e);
    };

    auto accumulate_obs = [&](std::size_t j, const GaussianEstimate& sm) {
        d_a.head(nm) = data.row(static_cast<Eigen::Index>(j - 1)).transpose();
        const MatrixXd h = om.jacobian(sm.mean);
        const VectorXd r = d_a - om.map(sm.mean);
        res.obs_moment.noalias() += r * r.transpose();
        res.obs_moment.noalias() += h * sm.cov * h.transpose();
    };

    // E[(xi_j - f(xi_{j-1}))(...)'] with Cov(xi_{j-1}, xi_j) = L_{j-1} P_j; filt_j is xi_{j|j}
    auto accumulate_proc = [&](const GaussianEstimate& sm_j, const GaussianEstimate& filt_j) {
        const MatrixXd lp = prev_gain * sm_j.cov;
        VectorXd e = sm_j.mean - prev_f;
        MatrixXd p_lag = prev_sm.cov;
        if (opts.pairing == LagPairing::joint) {
            const VectorXd dm = prev_gain * (sm_j.mean - filt_j.mean);
            e -= prev_F * dm;
            p_lag += prev_gain * (sm_j.cov - filt_j.cov) * prev_gain.transpose();
        }
        const MatrixXd fc = prev_F * lp;
        res.proc_moment.noalias() += e * e.transpose();
        res.proc_moment += sm_j.cov;
        res.proc_moment += propagate_covariance(prev_F, p_lag, MatrixXd::Zero(nx, nx), nz);
        res.proc_moment -= fc + fc.transpose();
    };

    for (std::size_t k = 1; k <= n; ++k) {
        try {
            Prediction pred = ekf_predict(filt, pm_filter, phi.q_a);
            d_a.head(nm) = data.row(static_cast<Eigen::Index>(k - 1)).transpose();
            GaussianEstimate upd = ekf_update(pred.est, d_a, om, phi.r_a);
            SmoothResult sm = smooth_one_lag(filt, pred.est, upd, pred.jacobian);

            const std::size_t j = k - 1;  // index just smoothed
            if (j == 0) {
                res.smoothed0 = sm.smoothed;
            } else {
                accumulate_obs(j, sm.smoothed);
                accumulate_proc(sm.smoothed, filt);
            }
            record(j, sm.smoothed);
            pm_smooth.linearize(sm.smoothed.mean, fj, Fj);
            prev_sm = std::move(sm.smoothed);
            prev_f = fj;
            prev_F = Fj;
            prev_gain = std::move(sm.gain);
            filt = std::move(upd);
        } catch (const NumericalError& e) {
            throw FilterAbort(e.what(), k, filt);
        }
    }

    if (n == 0) {
        res.smoothed0 = filt;
        record(0, filt);
    } else {
        // tail: the filtered estimate stands in for xi_{n|n+1}
        accumulate_obs(n, filt);
        accumulate_proc(filt, filt);
        record(n, filt);
    }
    res.final_filtered = filt;
    symmetrize(res.obs_moment);
    symmetrize(res.proc_moment);
    return res;
}

}  // namespace bem
