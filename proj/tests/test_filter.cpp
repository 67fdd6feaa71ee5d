#include <random>
#include <unsupported/Eigen/MatrixFunctions>

#include <gtest/gtest.h>

#include "bem/filter.hpp"

using namespace bem;

namespace {

struct Lti {
    StructuralModel model;
    SensorConfig cfg;
    HyperParams phi;
    MatrixXd data;
    MatrixXd f;  // augmented transition
    MatrixXd h;  // augmented observation
};

Lti make_lti(int n, std::uint64_t seed) {
    Lti s;
    ModelParts p;
    p.mass = (MatrixXd(2, 2) << 1.0, 0.0, 0.0, 2.0).finished();
    p.k0 = (MatrixXd(2, 2) << 300, -100, -100, 100).finished();
    p.c0 = (MatrixXd(2, 2) << 0.6, -0.2, -0.2, 0.2).finished();
    p.s_p = (MatrixXd(2, 1) << 0, 1).finished();
    p.dt = 0.01;
    s.model = StructuralModel(p);
    s.cfg.disp = {0};
    s.cfg.acc = {1};
    s.cfg.n_pseudo = 1;

    // oracle matrices built straight from the definitions
    const MatrixXd minv = p.mass.inverse();
    MatrixXd ac = MatrixXd::Zero(5, 5);
    ac.block(0, 2, 2, 2).setIdentity();
    ac.block(2, 0, 2, 2) = -minv * p.k0;
    ac.block(2, 2, 2, 2) = -minv * p.c0;
    ac.block(2, 4, 2, 1) = minv * p.s_p;
    s.f = (ac * p.dt).exp();
    s.h = MatrixXd::Zero(3, 5);
    s.h(0, 0) = 1.0;
    s.h.row(1) = ac.row(3);
    s.h(2, 4) = 1.0;

    s.phi.layout = StateLayout(s.model);
    s.phi.n_meas = 2;
    s.phi.n_pseudo = 1;
    s.phi.mu0 = (VectorXd(5) << 0.01, 0.0, 0.0, 0.0, 0.5).finished();
    s.phi.p0 = (VectorXd(5) << 1e-4, 1e-4, 1e-3, 1e-3, 1.0).finished().asDiagonal();
    s.phi.q_a = (VectorXd(5) << 1e-10, 1e-10, 1e-8, 1e-8, 1e-2).finished().asDiagonal();
    s.phi.r_a = (VectorXd(3) << 1e-6, 1e-2, 10.0).finished().asDiagonal();

    std::mt19937_64 g(seed);
    std::normal_distribution<double> nd;
    VectorXd x = VectorXd::Zero(5);
    s.data.resize(n, 2);
    for (int k = 0; k < n; ++k) {
        x = s.f * x;
        x(4) += 0.5 * nd(g);
        s.data(k, 0) = x(0) + 1e-3 * nd(g);
        s.data(k, 1) = s.h.row(1).dot(x) + 0.1 * nd(g);
    }
    return s;
}

struct KfTrace {
    std::vector<VectorXd> m_filt, m_pred;
    std::vector<MatrixXd> p_filt, p_pred;
};

// textbook linear Kalman filter (index 0 = prior)
KfTrace kalman(const Lti& s) {
    KfTrace t;
    t.m_filt.push_back(s.phi.mu0);
    t.p_filt.push_back(s.phi.p0);
    t.m_pred.emplace_back();
    t.p_pred.emplace_back();
    for (int k = 0; k < s.data.rows(); ++k) {
        const VectorXd mp = s.f * t.m_filt.back();
        const MatrixXd pp = s.f * t.p_filt.back() * s.f.transpose() + s.phi.q_a;
        VectorXd d(3);
        d << s.data(k, 0), s.data(k, 1), 0.0;
        const MatrixXd sm = s.h * pp * s.h.transpose() + s.phi.r_a;
        const MatrixXd gain = pp * s.h.transpose() * sm.inverse();
        t.m_pred.push_back(mp);
        t.p_pred.push_back(pp);
        t.m_filt.push_back(mp + gain * (d - s.h * mp));
        t.p_filt.push_back((MatrixXd::Identity(5, 5) - gain * s.h) * pp);
    }
    return t;
}

double rel(const MatrixXd& a, const MatrixXd& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }

}  // namespace

TEST(Predict, ZeroStateWithZeroCovarianceGivesQ) {
    const Lti s = make_lti(0, 1);
    GaussianEstimate e{VectorXd::Zero(5), MatrixXd::Zero(5, 5)};
    const GaussianEstimate out = ekf_predict(e, s.model, s.phi.q_a);
    EXPECT_EQ(out.mean.norm(), 0.0);
    EXPECT_TRUE(out.cov.isApprox(s.phi.q_a));
}

TEST(Predict, MatchesLinearPropagation) {
    const Lti s = make_lti(0, 1);
    GaussianEstimate e{s.phi.mu0, s.phi.p0};
    const GaussianEstimate out = ekf_predict(e, s.model, s.phi.q_a);
    EXPECT_LE(rel(out.mean, s.f * s.phi.mu0), 1e-12);
    EXPECT_LE(rel(out.cov, s.f * s.phi.p0 * s.f.transpose() + s.phi.q_a), 1e-12);
}

TEST(Update, ScalarGainOneHalf) {
    ModelParts p;
    p.mass = MatrixXd::Ones(1, 1);
    p.k0 = MatrixXd::Constant(1, 1, 10.0);
    p.dt = 0.1;
    const StructuralModel m(p);
    SensorConfig cfg;
    cfg.disp = {0};
    const ObservationModel om(m, cfg);
    GaussianEstimate pred{VectorXd::Zero(2), MatrixXd::Identity(2, 2)};
    const GaussianEstimate out = ekf_update(pred, VectorXd::Constant(1, 2.0), om, MatrixXd::Identity(1, 1));
    EXPECT_NEAR(out.mean(0), 1.0, 1e-15);
    EXPECT_NEAR(out.mean(1), 0.0, 1e-15);
    EXPECT_NEAR(out.cov(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(out.cov(1, 1), 1.0, 1e-15);
}

TEST(Update, ZeroInnovationKeepsMean) {
    const Lti s = make_lti(0, 1);
    const ObservationModel om(s.model, s.cfg);
    GaussianEstimate pred{s.phi.mu0, s.phi.p0};
    const GaussianEstimate out = ekf_update(pred, om.map(s.phi.mu0), om, s.phi.r_a);
    EXPECT_LE((out.mean - s.phi.mu0).norm(), 1e-15);
    EXPECT_LE(out.cov.trace(), s.phi.p0.trace());
    EXPECT_THROW(ekf_update(pred, VectorXd::Zero(2), om, s.phi.r_a), ValidationError);
}

TEST(Smoother, ScalarHandCase) {
    // x_{k-1|k-1} ~ (0, 1), F = 1, Q = 1 -> prediction (0, 2); update to (1, 1)
    const GaussianEstimate f{VectorXd::Zero(1), MatrixXd::Ones(1, 1)};
    const GaussianEstimate pr{VectorXd::Zero(1), MatrixXd::Constant(1, 1, 2.0)};
    const GaussianEstimate up{VectorXd::Ones(1), MatrixXd::Ones(1, 1)};
    const SmoothResult r = smooth_one_lag(f, pr, up, MatrixXd::Ones(1, 1));
    EXPECT_NEAR(r.gain(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(r.smoothed.mean(0), 0.5, 1e-15);
    EXPECT_NEAR(r.smoothed.cov(0, 0), 0.75, 1e-15);
    EXPECT_NEAR(r.cross_cov(0, 0), 0.375, 1e-15);
}

TEST(Pass, LtiMatchesIndependentKalmanFilter) {
    const Lti s = make_lti(300, 7);
    const PassResult r = run_pass(s.data, s.model, s.cfg, s.phi);
    const KfTrace kf = kalman(s);
    const auto n = static_cast<std::size_t>(s.data.rows());
    EXPECT_LE(rel(r.final_filtered.mean, kf.m_filt[n]), 1e-10);
    EXPECT_LE(rel(r.final_filtered.cov, kf.p_filt[n]), 1e-10);
    // one-lag smoothed means and variances at every step
    double obs_err = 0.0;
    MatrixXd obs = MatrixXd::Zero(3, 3);
    for (std::size_t j = 0; j <= n; ++j) {
        VectorXd ms = kf.m_filt[j];
        MatrixXd ps = kf.p_filt[j];
        if (j < n) {
            const MatrixXd gain = kf.p_filt[j] * s.f.transpose() * kf.p_pred[j + 1].inverse();
            ms += gain * (kf.m_filt[j + 1] - kf.m_pred[j + 1]);
            ps += gain * (kf.p_filt[j + 1] - kf.p_pred[j + 1]) * gain.transpose();
        }
        const auto c = static_cast<Eigen::Index>(j);
        obs_err = std::max(obs_err, rel(r.smoothed_mean.col(c), ms));
        EXPECT_LE(rel(r.smoothed_var.col(c), ps.diagonal()), 1e-9) << j;
        EXPECT_LE(r.smoothed_var.col(c).sum(), kf.p_filt[j].trace() * (1 + 1e-12)) << j;
        if (j >= 1) {
            VectorXd d(3);
            d << s.data(c - 1, 0), s.data(c - 1, 1), 0.0;
            const VectorXd e = d - s.h * ms;
            obs += e * e.transpose() + s.h * ps * s.h.transpose();
        }
    }
    EXPECT_LE(obs_err, 1e-9);
    EXPECT_LE(rel(r.obs_moment, obs), 1e-9);
    EXPECT_LE(rel(r.smoothed0.mean, r.smoothed_mean.col(0)), 1e-15);
}

TEST(Pass, ProcessMomentIsPositiveSemidefinite) {
    const Lti s = make_lti(200, 3);
    for (auto pairing : {LagPairing::joint, LagPairing::mixed}) {
        PassOptions o;
        o.pairing = pairing;
        const PassResult r = run_pass(s.data, s.model, s.cfg, s.phi, o);
        EXPECT_EQ((r.proc_moment - r.proc_moment.transpose()).norm(), 0.0);
        const VectorXd ev = Eigen::SelfAdjointEigenSolver<MatrixXd>(r.proc_moment).eigenvalues();
        EXPECT_GE(ev.minCoeff(), -1e-9 * ev.maxCoeff());
    }
}

TEST(Pass, EmptyDataReturnsPrior) {
    const Lti s = make_lti(0, 1);
    const PassResult r = run_pass(MatrixXd(0, 2), s.model, s.cfg, s.phi);
    EXPECT_EQ(r.n, 0u);
    EXPECT_EQ(r.smoothed0.mean, s.phi.mu0);
    EXPECT_EQ(r.smoothed0.cov, s.phi.p0);
    EXPECT_EQ(r.obs_moment.norm(), 0.0);
}

TEST(Pass, Deterministic) {
    const Lti s = make_lti(100, 5);
    const PassResult a = run_pass(s.data, s.model, s.cfg, s.phi);
    const PassResult b = run_pass(s.data, s.model, s.cfg, s.phi);
    EXPECT_EQ(a.smoothed_mean, b.smoothed_mean);
    EXPECT_EQ(a.proc_moment, b.proc_moment);
}

TEST(Pass, CallbackSeesEveryStep) {
    const Lti s = make_lti(20, 5);
    std::vector<std::size_t> seen;
    PassOptions o;
    o.store_trajectory = false;
    o.on_smoothed = [&](std::size_t k, const GaussianEstimate&) { seen.push_back(k); };
    run_pass(s.data, s.model, s.cfg, s.phi, o);
    ASSERT_EQ(seen.size(), 21u);
    for (std::size_t k = 0; k < seen.size(); ++k) EXPECT_EQ(seen[k], k);
}

TEST(Pass, SingularInnovationAborts) {
    Lti s = make_lti(5, 5);
    s.phi.p0.setZero();
    s.phi.q_a.setZero();
    s.phi.r_a.setZero();
    try {
        run_pass(s.data, s.model, s.cfg, s.phi);
        FAIL() << "expected abort";
    } catch (const FilterAbort& e) {
        EXPECT_EQ(e.step(), 1u);
        EXPECT_EQ(e.last_estimate().mean, s.phi.mu0);
    }
}

TEST(Pass, RejectsMismatchedData) {
    const Lti s = make_lti(0, 1);
    EXPECT_THROW(run_pass(MatrixXd::Zero(4, 3), s.model, s.cfg, s.phi), ValidationError);
    HyperParams bad = s.phi;
    bad.q_a(0, 1) = 1.0;
    EXPECT_THROW(run_pass(MatrixXd::Zero(4, 2), s.model, s.cfg, bad), ValidationError);
}
