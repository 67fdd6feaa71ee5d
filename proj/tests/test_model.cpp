#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "bem/sim.hpp"

using namespace bem;

namespace {

StructuralModel one_dof(double dt = 1e-3) {
    ModelParts p;
    p.mass = MatrixXd::Ones(1, 1);
    p.k_sub = {MatrixXd::Ones(1, 1)};
    p.c_sub = {MatrixXd::Ones(1, 1)};
    p.s_p = MatrixXd::Ones(1, 1);
    p.dt = dt;
    p.theta_nominal = (VectorXd(2) << 1000.0, 1.0).finished();
    return StructuralModel(std::move(p));
}

// direct spring-chain assembly: spring i joins DOF i-1 (ground for i = 0) and DOF i
MatrixXd chain_oracle(const VectorXd& k) {
    const auto n = k.size();
    MatrixXd out = MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        out(i, i) += k(i);
        if (i > 0) {
            out(i - 1, i - 1) += k(i);
            out(i - 1, i) -= k(i);
            out(i, i - 1) -= k(i);
        }
    }
    return out;
}

VectorXd random_xi(std::mt19937_64& g, const StateLayout& L, const VectorXd& theta_centre) {
    std::normal_distribution<double> nd;
    VectorXd xi(L.size());
    for (int i = 0; i < L.size(); ++i) xi(i) = nd(g);
    xi.head(L.nd) *= 1e-2;
    xi.segment(L.nd, L.nd) *= 1e-1;
    for (int s = 0; s < L.ntheta; ++s) xi(L.theta0() + s) = theta_centre(s) * (1.0 + 0.2 * nd(g));
    return xi;
}

}  // namespace

TEST(Assemble, ZeroThetaGivesKnownPart) {
    ModelParts p;
    p.mass = MatrixXd::Identity(2, 2);
    p.k0 = (MatrixXd(2, 2) << 3, -1, -1, 2).finished();
    p.c0 = 0.1 * p.k0;
    p.k_sub = chain_substructures(2);
    p.c_sub = chain_substructures(2);
    p.dt = 0.01;
    const StructuralModel m(p);
    const VectorXd z = VectorXd::Zero(4);
    EXPECT_TRUE(assemble_stiffness(m, z).isApprox(p.k0));
    EXPECT_TRUE(assemble_damping(m, z).isApprox(p.c0));
}

TEST(Assemble, EightDofChain) {
    const Benchmark b = benchmark_8dof(Case8::I, 'a', false, 1, 0.01);
    const VectorXd th = b.model.theta_nominal();
    const MatrixXd k = assemble_stiffness(b.model, th);
    EXPECT_TRUE(k.isApprox(chain_oracle(th.head(8))));
    for (int i = 0; i < 7; ++i) EXPECT_DOUBLE_EQ(k(i, i), 2000.0);
    EXPECT_DOUBLE_EQ(k(7, 7), 1000.0);
    EXPECT_DOUBLE_EQ(k(3, 4), -1000.0);
    EXPECT_TRUE(assemble_damping(b.model, th).isApprox(chain_oracle(th.tail(8))));
}

TEST(Assemble, ShearFrameStiffnessLayout) {
    const StructuralModel m = shear_frame_model();
    VectorXd th(6);
    th << 3.0, 5.0, 7.0, 0.01, 0.02, 0.03;
    MatrixXd expected(3, 3);
    expected << 3 + 5, -5, 0, -5, 5 + 7, -7, 0, -7, 7;
    EXPECT_TRUE(assemble_stiffness(m, th).isApprox(expected));
}

TEST(Assemble, ShearFrameModalDamping) {
    const StructuralModel m = shear_frame_model();
    const VectorXd nom = shear_frame_nominal();
    VectorXd th = nom;
    th.tail(3) << 0.01, 0.03, 0.05;
    const MatrixXd c = assemble_damping(m, th);
    EXPECT_LT((c - c.transpose()).norm(), 1e-12 * c.norm());
    // modal oracle: Phi' C Phi = diag(2 xi_i omega_i) with mass-normalized modes
    Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> es(assemble_stiffness(m, nom), m.mass());
    const MatrixXd phi = es.eigenvectors();
    const MatrixXd modal = phi.transpose() * c * phi;
    for (int i = 0; i < 3; ++i) {
        const double w = std::sqrt(es.eigenvalues()(i));
        EXPECT_NEAR(modal(i, i), 2.0 * th(3 + i) * w, 1e-9 * w);
        for (int j = 0; j < 3; ++j)
            if (i != j) EXPECT_NEAR(modal(i, j), 0.0, 1e-9 * w);
    }
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<MatrixXd>(c).eigenvalues().minCoeff(), -1e-12);
}

TEST(Assemble, Symmetric) {
    const Benchmark b = benchmark_8dof(Case8::II, 'a', false, 1, 0.01);
    std::mt19937_64 g(2);
    std::uniform_real_distribution<double> u(0.0, 2000.0);
    for (int t = 0; t < 5; ++t) {
        VectorXd th(16);
        for (int i = 0; i < 16; ++i) th(i) = u(g);
        const MatrixXd k = assemble_stiffness(b.model, th), c = assemble_damping(b.model, th);
        EXPECT_EQ((k - k.transpose()).norm(), 0.0);
        EXPECT_EQ((c - c.transpose()).norm(), 0.0);
    }
}

TEST(Assemble, LengthMismatch) {
    EXPECT_THROW(assemble_stiffness(one_dof(), VectorXd::Zero(3)), ValidationError);
}

TEST(Model, RejectsBadMass) {
    ModelParts p;
    p.mass = (MatrixXd(2, 2) << 1, 0, 0, -1).finished();
    p.dt = 0.1;
    EXPECT_THROW(StructuralModel{p}, ValidationError);
}

TEST(ContinuousSS, OneDof) {
    const StructuralModel m = one_dof();
    const ContinuousSS c = continuous_ss(m, m.theta_nominal());
    MatrixXd a(2, 2);
    a << 0, 1, -1000, -1;
    EXPECT_TRUE(c.a_c.isApprox(a));
    EXPECT_DOUBLE_EQ(c.b_c(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(c.b_c(1, 0), 1.0);
}

TEST(ContinuousSS, EightDofFrequencyRange) {
    const Benchmark b = benchmark_8dof(Case8::I, 'a', false, 1, 0.01);
    const VectorXd f = natural_frequencies_hz(b.model, b.model.theta_nominal());
    EXPECT_NEAR(f.minCoeff(), 0.93, 0.01);
    EXPECT_NEAR(f.maxCoeff(), 9.89, 0.01);
    const ContinuousSS c = continuous_ss(b.model, b.model.theta_nominal());
    const Eigen::VectorXcd ev = c.a_c.eigenvalues();
    const double hi = ev.imag().cwiseAbs().maxCoeff() / (2 * M_PI);
    EXPECT_NEAR(hi, 9.89, 0.01);
}

TEST(ContinuousSS, FoldingThetaIntoKnownPart) {
    const StructuralModel m = one_dof();
    ModelParts p = m.parts();
    p.k0 = 1000.0 * MatrixXd::Ones(1, 1);
    p.c0 = MatrixXd::Ones(1, 1);
    const StructuralModel folded(p);
    EXPECT_TRUE(continuous_ss(folded, VectorXd::Zero(2)).a_c.isApprox(continuous_ss(m, m.theta_nominal()).a_c));
}

TEST(Transition, OriginFixed) {
    const Benchmark b = benchmark_8dof(Case8::I, 'a', false, 1, 0.01);
    const StateLayout L(b.model);
    VectorXd xi = VectorXd::Zero(L.size());
    xi.segment(L.theta0(), L.ntheta) = b.theta0;
    xi(L.p0()) = 0.0;
    const VectorXd f = augmented_transition(b.model, xi);
    EXPECT_TRUE(f.isApprox(xi));
}

TEST(Transition, MatchesExplicitRecursion) {
    const Benchmark b = benchmark_8dof(Case8::I, 'a', false, 1, 0.01);
    const StateLayout L(b.model);
    const VectorXd th = b.model.theta_nominal();
    const ContinuousSS c = continuous_ss(b.model, th);
    const DiscreteSS d = discretize(c.a_c, c.b_c, b.model.dt());
    VectorXd xi = VectorXd::Zero(L.size());
    xi.segment(L.theta0(), L.ntheta) = th;
    xi(L.p0()) = 2.5;
    VectorXd z = VectorXd::Zero(L.nz());
    ProcessModel pm(b.model);
    for (int k = 0; k < 50; ++k) {
        xi = pm.transition(xi);
        z = d.a * z + d.b * VectorXd::Constant(1, 2.5);
    }
    EXPECT_LE((xi.head(L.nz()) - z).norm(), 1e-12 * z.norm());
    EXPECT_DOUBLE_EQ(xi(L.p0()), 2.5);
}

TEST(Transition, SmallStepIsNearIdentity) {
    const StructuralModel m = one_dof(1e-9);
    VectorXd xi(5);
    xi << 0.3, -0.2, 1000.0, 1.0, 4.0;
    EXPECT_LT((augmented_transition(m, xi) - xi).norm(), 1e-5);
}

TEST(ProcessJacobian, KnownSystemIsConstant) {
    ModelParts p;
    p.mass = MatrixXd::Identity(2, 2);
    p.k0 = (MatrixXd(2, 2) << 2, -1, -1, 1).finished() * 100.0;
    p.c0 = 0.01 * p.k0;
    p.s_p = (MatrixXd(2, 1) << 0, 1).finished();
    p.dt = 0.01;
    const StructuralModel m(p);
    const StateLayout L(m);
    VectorXd xi = VectorXd::LinSpaced(L.size(), -1, 1);
    const ContinuousSS c = continuous_ss(m, VectorXd());
    const DiscreteSS d = discretize(c.a_c, c.b_c, 0.01);
    MatrixXd aa = MatrixXd::Identity(L.size(), L.size());
    aa.topLeftCorner(4, 4) = d.a;
    aa.topRightCorner(4, 1) = d.b;
    EXPECT_LE((process_jacobian(m, xi) - aa).norm(), 1e-14);
}

TEST(ProcessJacobian, ThetaColumnsVanishAtOrigin) {
    const Benchmark b = benchmark_8dof(Case8::I, 'a', false, 1, 0.01);
    const StateLayout L(b.model);
    VectorXd xi = VectorXd::Zero(L.size());
    xi.segment(L.theta0(), L.ntheta) = b.theta0;
    for (auto s : {JacobianStrategy::finite_difference, JacobianStrategy::finite_difference_action,
                   JacobianStrategy::series_sensitivity}) {
        const MatrixXd j = process_jacobian(b.model, xi, s);
        EXPECT_EQ(j.block(0, L.theta0(), L.nz(), L.ntheta).norm(), 0.0);
    }
}

TEST(ProcessJacobian, MatchesCentralDifferences) {
    std::mt19937_64 g(4);
    for (const Benchmark& b : {benchmark_8dof(Case8::II, 'a', false, 1, 0.01), benchmark_shear_frame(1, true, 0.1)}) {
        const StateLayout L(b.model);
        for (int t = 0; t < 3; ++t) {
            const VectorXd xi = random_xi(g, L, b.model.theta_nominal());
            // oracle: central differences of the transition, step 1e-6 (1 + |xi_i|)
            MatrixXd fd(L.size(), L.size());
            for (int i = 0; i < L.size(); ++i) {
                const double h = 1e-6 * (1.0 + std::abs(xi(i)));
                VectorXd xp = xi, xm = xi;
                xp(i) += h;
                xm(i) -= h;
                fd.col(i) = (augmented_transition(b.model, xp) - augmented_transition(b.model, xm)) / (2 * h);
            }
            for (auto s : {JacobianStrategy::finite_difference, JacobianStrategy::finite_difference_action,
                           JacobianStrategy::series_sensitivity}) {
                const MatrixXd j = process_jacobian(b.model, xi, s);
                EXPECT_LE((j - fd).norm(), 1e-5 * fd.norm());
            }
        }
    }
}

TEST(Observation, ZeroStateGivesZero) {
    const Benchmark b = benchmark_8dof(Case8::I, 'b', false, 1, 0.01);
    const StateLayout L(b.model);
    VectorXd xi = VectorXd::Zero(L.size());
    xi.segment(L.theta0(), L.ntheta) = b.theta0;
    EXPECT_EQ(observation_map(b.model, b.cfg, xi).norm(), 0.0);
}

TEST(Observation, DisplacementSelection) {
    const Benchmark b = benchmark_8dof(Case8::I, 'a', false, 1, 0.01);
    SensorConfig cfg;
    cfg.disp = {2, 5};
    const StateLayout L(b.model);
    const VectorXd xi = VectorXd::LinSpaced(L.size(), 1, 33);
    const VectorXd h = observation_map(b.model, cfg, xi);
    ASSERT_EQ(h.size(), 2);
    EXPECT_DOUBLE_EQ(h(0), xi(2));
    EXPECT_DOUBLE_EQ(h(1), xi(5));
    EXPECT_TRUE(observation_jacobian(b.model, cfg, xi).isApprox(ObservationModel(b.model, cfg).matrix(b.theta0)));
}

TEST(Observation, SingleDofAcceleration) {
    const StructuralModel m = one_dof();
    SensorConfig cfg;
    cfg.acc = {0};
    cfg.n_pseudo = 1;
    VectorXd xi(5);
    const double x = 0.01, v = -0.2, k = 950.0, c = 1.3, p = 4.0;
    xi << x, v, k, c, p;
    const VectorXd h = observation_map(m, cfg, xi);
    EXPECT_NEAR(h(0), -k * x - c * v + p, 1e-12);
    EXPECT_DOUBLE_EQ(h(1), p);
    const MatrixXd j = observation_jacobian(m, cfg, xi);
    EXPECT_NEAR(j(0, 2), -x, 1e-15);
    EXPECT_NEAR(j(0, 3), -v, 1e-15);
    EXPECT_NEAR(j(0, 4), 1.0, 1e-15);
    EXPECT_EQ(j.row(1), (VectorXd(5) << 0, 0, 0, 0, 1).finished().transpose());
}

TEST(Observation, LinearInStateAtFixedTheta) {
    const Benchmark b = benchmark_8dof(Case8::II, 'a', false, 1, 0.01);
    const StateLayout L(b.model);
    std::mt19937_64 g(9);
    VectorXd a = random_xi(g, L, b.theta0), c = random_xi(g, L, b.theta0);
    c.segment(L.theta0(), L.ntheta) = a.segment(L.theta0(), L.ntheta);
    VectorXd s = a + c;
    s.segment(L.theta0(), L.ntheta) = a.segment(L.theta0(), L.ntheta);
    const ObservationModel om(b.model, b.cfg);
    EXPECT_LE((om.map(s) - om.map(a) - om.map(c)).norm(), 1e-9 * om.map(s).norm());
}

TEST(Observation, JacobianMatchesCentralDifferences) {
    std::mt19937_64 g(6);
    for (const Benchmark& b : {benchmark_8dof(Case8::II, 'a', false, 1, 0.01), benchmark_shear_frame(1, true, 0.1)}) {
        const StateLayout L(b.model);
        const ObservationModel om(b.model, b.cfg);
        for (int t = 0; t < 3; ++t) {
            const VectorXd xi = random_xi(g, L, b.model.theta_nominal());
            MatrixXd fd(om.n_obs(), L.size());
            for (int i = 0; i < L.size(); ++i) {
                const double h = 1e-6 * (1.0 + std::abs(xi(i)));
                VectorXd xp = xi, xm = xi;
                xp(i) += h;
                xm(i) -= h;
                fd.col(i) = (om.map(xp) - om.map(xm)) / (2 * h);
            }
            EXPECT_LE((om.jacobian(xi) - fd).norm(), 1e-6 * fd.norm());
        }
    }
}

TEST(Sensors, Validation) {
    const StructuralModel m = one_dof();
    SensorConfig none;
    EXPECT_THROW(none.validate(m), ValidationError);
    SensorConfig bad;
    bad.acc = {3};
    EXPECT_THROW(bad.validate(m), ValidationError);
    SensorConfig pseudo;
    pseudo.acc = {0};
    pseudo.n_pseudo = 2;
    EXPECT_THROW(pseudo.validate(m), ValidationError);
}

TEST(Virtual, ZeroCovarianceGivesZeroVariance) {
    ModelParts p;
    p.mass = MatrixXd::Identity(2, 2);
    p.k0 = (MatrixXd(2, 2) << 2, -1, -1, 1).finished() * 100.0;
    p.s_p = (MatrixXd(2, 1) << 0, 1).finished();
    p.dt = 0.01;
    const StructuralModel m(p);
    const StateLayout L(m);
    const VirtualPosterior vp = virtual_posterior(m, VectorXd::LinSpaced(L.size(), 0, 1), MatrixXd::Zero(5, 5));
    EXPECT_EQ(vp.cov.norm(), 0.0);
}

TEST(Virtual, DisplacementRowReproducesState) {
    const Benchmark b = benchmark_8dof(Case8::I, 'a', false, 1, 0.01);
    const StateLayout L(b.model);
    VectorXd mean = VectorXd::LinSpaced(L.size(), 0.1, 3.3);
    mean.segment(L.theta0(), L.ntheta) = b.theta0;
    const VirtualPosterior vp = virtual_posterior(b.model, mean, MatrixXd::Zero(L.size(), L.size()),
                                                  {{VirtualKind::disp, 5}, {VirtualKind::vel, 5}});
    EXPECT_DOUBLE_EQ(vp.mean(0), mean(5));
    EXPECT_DOUBLE_EQ(vp.mean(1), mean(8 + 5));
}

TEST(Virtual, SingleDofAccelerationPosterior) {
    const StructuralModel m = one_dof();
    VectorXd mean(5);
    const double x = 0.02, v = 0.1, k = 980.0, c = 0.9, p = -3.0;
    mean << x, v, k, c, p;
    MatrixXd cov = MatrixXd::Zero(5, 5);
    cov.diagonal() << 1e-6, 1e-4, 25.0, 0.01, 0.5;
    cov(0, 2) = cov(2, 0) = 1e-4;
    const VirtualPosterior vp = virtual_posterior(m, mean, cov, {{VirtualKind::acc, 0}});
    EXPECT_NEAR(vp.mean(0), -k * x - c * v + p, 1e-12);
    // hand row of the linearized map: [-k, -c, -x, -v, 1]
    VectorXd j(5);
    j << -k, -c, -x, -v, 1.0;
    EXPECT_NEAR(vp.cov(0, 0), j.dot(cov * j), 1e-12);
}

TEST(Virtual, RejectsUnknownChannel) {
    const StructuralModel m = one_dof();
    EXPECT_THROW(virtual_row(m, {VirtualKind::stress, 0}), ValidationError);
    EXPECT_THROW(virtual_row(m, {VirtualKind::disp, 1}), ValidationError);
}
