#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/SVD>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <string>

#include "bem/error.hpp"

namespace bem {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline bool all_finite(const MatrixXd& m) { return m.allFinite(); }

inline void require_finite(const MatrixXd& m, const char* what) {
    if (!m.allFinite()) throw ValidationError(std::string(what) + ": non-finite entries");
}

inline void require_square(const MatrixXd& m, const char* what) {
    if (m.rows() != m.cols())
        throw ValidationError(std::string(what) + ": matrix is " + std::to_string(m.rows()) + "x" +
                              std::to_string(m.cols()) + ", expected square");
}

inline MatrixXd symmetrized(const MatrixXd& p) { return 0.5 * (p + p.transpose()); }

inline void symmetrize(MatrixXd& p) { p = 0.5 * (p + p.transpose()).eval(); }

/// Matrix exponential (scaling and squaring with a Pade approximant).
inline MatrixXd expm(const MatrixXd& m) {
    require_square(m, "expm");
    require_finite(m, "expm");
    if (m.size() == 0) return m;
    MatrixXd e = m.exp();
    if (!e.allFinite()) throw NumericalError("expm: overflow");
    return e;
}

struct DiscreteSS {
    MatrixXd a;
    MatrixXd b;
};

/// Zero-order-hold discretization from the exponential of [[A_c, B_c], [0, 0]] * dt.
inline DiscreteSS discretize(const MatrixXd& a_c, const MatrixXd& b_c, double dt) {
    require_square(a_c, "discretize");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("discretize: dt must be positive");
    if (b_c.rows() != a_c.rows() && b_c.size() != 0)
        throw ValidationError("discretize: b_c row count does not match a_c");
    require_finite(a_c, "discretize");
    require_finite(b_c, "discretize");
    const Eigen::Index n = a_c.rows();
    const Eigen::Index m = b_c.cols();
    MatrixXd blk = MatrixXd::Zero(n + m, n + m);
    blk.topLeftCorner(n, n) = a_c * dt;
    if (m > 0) blk.topRightCorner(n, m) = b_c * dt;
    const MatrixXd e = expm(blk);
    return {e.topLeftCorner(n, n), e.topRightCorner(n, m)};
}

/// Largest modulus among the eigenvalues.
inline double spectral_radius(const MatrixXd& m) {
    if (m.size() == 0) return 0.0;
    Eigen::EigenSolver<MatrixXd> es(m, false);
    if (es.info() != Eigen::Success) throw NumericalError("spectral_radius: eigen decomposition failed");
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Count of singular values above rel_tol times the largest one.
inline int numerical_rank(const MatrixXd& m, double rel_tol = 1e-10) {
    require_finite(m, "numerical_rank");
    if (m.size() == 0) return 0;
    const VectorXd s = Eigen::BDCSVD<MatrixXd>(m).singularValues();
    if (s.size() == 0 || s(0) == 0.0) return 0;
    const double cut = rel_tol * s(0);
    return static_cast<int>((s.array() > cut).count());
}

inline double largest_singular_value(const MatrixXd& m) {
    if (m.size() == 0) return 0.0;
    return Eigen::BDCSVD<MatrixXd>(m).singularValues()(0);
}

/// Solve P X = B for symmetric positive (semi-)definite P.
/// Jacobi-equilibrated Cholesky, falling back to LDLT. Throws when the scaled
/// matrix has reciprocal condition below min_rcond.
inline MatrixXd spd_solve(const MatrixXd& p, const MatrixXd& b, double min_rcond, const char* what) {
    const Eigen::Index n = p.rows();
    VectorXd d(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double pii = p(i, i);
        if (!(pii > 0.0) || !std::isfinite(pii))
            throw NumericalError(std::string(what) + ": non-positive diagonal entry");
        d(i) = 1.0 / std::sqrt(pii);
    }
    const MatrixXd ps = d.asDiagonal() * p * d.asDiagonal();
    const MatrixXd bs = d.asDiagonal() * b;
    Eigen::LLT<MatrixXd> llt(ps);
    if (llt.info() == Eigen::Success && llt.rcond() >= min_rcond) return d.asDiagonal() * llt.solve(bs);
    Eigen::LDLT<MatrixXd> ldlt(ps);
    const VectorXd piv = ldlt.vectorD().cwiseAbs();
    if (ldlt.info() != Eigen::Success || !(ldlt.rcond() >= min_rcond) || !(piv.minCoeff() > min_rcond * piv.maxCoeff()))
        throw NumericalError(std::string(what) + ": matrix numerically singular");
    return d.asDiagonal() * ldlt.solve(bs);
}

/// log det of a symmetric positive definite matrix via Cholesky.
inline double logdet_spd(const MatrixXd& p, const std::string& what) {
    if (p.size() == 0) return 0.0;
    Eigen::LLT<MatrixXd> llt(p);
    if (llt.info() != Eigen::Success) throw NumericalError(what + " is not positive definite");
    const VectorXd diag = llt.matrixL().toDenseMatrix().diagonal();
    return 2.0 * diag.array().log().sum();
}

struct DareSolution {
    MatrixXd p_pred;
    double residual = 0.0;
    int iterations = 0;
};

enum class DareMethod { doubling, fixed_point };

struct DareOptions {
    DareMethod method = DareMethod::doubling;
    int max_iterations = 100000;
    double step_tol = 1e-12;
};

/// Right-hand side of P = A P A' - A P G' (R + G P G')^-1 G P A' + Q.
inline MatrixXd dare_map(const MatrixXd& a, const MatrixXd& g, const MatrixXd& q, const MatrixXd& r,
                         const MatrixXd& p) {
    const MatrixXd pg = p * g.transpose();
    const MatrixXd s = r + g * pg;
    Eigen::LLT<MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw NumericalError("solve_dare: innovation covariance not positive definite");
    const MatrixXd apg = a * pg;
    MatrixXd out = a * p * a.transpose() - apg * llt.solve(apg.transpose()) + q;
    symmetrize(out);
    return out;
}

inline double dare_residual(const MatrixXd& a, const MatrixXd& g, const MatrixXd& q, const MatrixXd& r,
                            const MatrixXd& p) {
    return (p - dare_map(a, g, q, r, p)).norm() / (1.0 + p.norm());
}

namespace detail {

inline bool dare_fixed_point(const MatrixXd& a, const MatrixXd& g, const MatrixXd& q, const MatrixXd& r,
                             MatrixXd& p, int max_iterations, double step_tol, int& iterations) {
    for (int it = 0; it < max_iterations; ++it) {
        MatrixXd next = dare_map(a, g, q, r, p);
        if (!next.allFinite()) return false;
        const double step = (next - p).norm();
        p = std::move(next);
        iterations = it + 1;
        if (step <= step_tol * std::max(p.norm(), 1e-300)) return true;
    }
    return false;
}

// Structure-preserving doubling on the dual (filtering) Riccati equation.
inline bool dare_doubling(const MatrixXd& a, const MatrixXd& g, const MatrixXd& q, const MatrixXd& r,
                          MatrixXd& p, int& iterations) {
    const Eigen::Index n = a.rows();
    Eigen::LLT<MatrixXd> rllt(r);
    if (rllt.info() != Eigen::Success) return false;
    MatrixXd ak = a.transpose();
    MatrixXd gk = g.transpose() * rllt.solve(g);
    MatrixXd hk = q;
    symmetrize(gk);
    const MatrixXd eye = MatrixXd::Identity(n, n);
    for (int it = 0; it < 80; ++it) {
        Eigen::PartialPivLU<MatrixXd> w(eye + gk * hk);
        const MatrixXd wa = w.solve(ak);
        MatrixXd h_next = hk + ak.transpose() * hk * wa;
        MatrixXd g_next = gk + ak * w.solve(gk * ak.transpose());
        MatrixXd a_next = ak * wa;
        symmetrize(h_next);
        symmetrize(g_next);
        if (!h_next.allFinite() || !g_next.allFinite() || !a_next.allFinite()) return false;
        const double step = (h_next - hk).norm();
        hk = std::move(h_next);
        gk = std::move(g_next);
        ak = std::move(a_next);
        iterations = it + 1;
        if (step <= 1e-15 * hk.norm() || ak.norm() <= 1e-300) break;
    }
    p = hk;
    return true;
}

}  // namespace detail

/// Stationary predictive covariance of a Kalman filter with transition a,
/// observation g, process noise q, measurement noise r.
inline DareSolution solve_dare(const MatrixXd& a, const MatrixXd& g, const MatrixXd& q, const MatrixXd& r,
                               const DareOptions& opts = {}) {
    require_square(a, "solve_dare(a)");
    require_square(q, "solve_dare(q)");
    require_square(r, "solve_dare(r)");
    if (g.cols() != a.rows() || q.rows() != a.rows() || r.rows() != g.rows())
        throw ValidationError("solve_dare: dimension mismatch");
    require_finite(a, "solve_dare(a)");
    require_finite(g, "solve_dare(g)");
    require_finite(q, "solve_dare(q)");
    require_finite(r, "solve_dare(r)");

    constexpr double kResidualTol = 1e-8;
    DareSolution sol;
    MatrixXd p;
    bool ok = false;
    if (opts.method == DareMethod::doubling) {
        ok = detail::dare_doubling(a, g, q, r, p, sol.iterations);
        if (ok) ok = dare_residual(a, g, q, r, p) <= kResidualTol;
        if (!ok) {
            // polish or restart with the plain fixed-point map
            if (!p.allFinite() || p.size() == 0) p = q;
            int extra = 0;
            ok = detail::dare_fixed_point(a, g, q, r, p, opts.max_iterations, opts.step_tol, extra);
            sol.iterations += extra;
        }
    } else {
        p = q;
        ok = detail::dare_fixed_point(a, g, q, r, p, opts.max_iterations, opts.step_tol, sol.iterations);
    }
    if (ok) {
        sol.residual = dare_residual(a, g, q, r, p);
        ok = sol.residual <= kResidualTol;
    }
    if (ok) {
        // stabilizing solution only: closed loop A (I - K G) strictly inside the unit circle
        MatrixXd s = r + g * p * g.transpose();
        symmetrize(s);
        const MatrixXd kt = s.ldlt().solve(g * p);
        const MatrixXd closed = a - a * kt.transpose() * g;
        ok = closed.allFinite() && spectral_radius(closed) < 1.0 - 1e-12;
    }
    if (!ok) throw NumericalError("solve_dare: system not detectable / stabilizable with given noise");
    sol.p_pred = p;
    return sol;
}

struct SteinOptions {
    Eigen::Index kronecker_max_order = 64;
};

inline double stein_residual(const MatrixXd& l, const MatrixXd& c, const MatrixXd& p) {
    return (l * p * l.transpose() - p + c).norm() / (1.0 + p.norm());
}

/// Solve L P L' - P + C = 0.
inline MatrixXd solve_stein(const MatrixXd& l, const MatrixXd& c, const SteinOptions& opts = {}) {
    require_square(l, "solve_stein(l)");
    require_square(c, "solve_stein(c)");
    if (l.rows() != c.rows()) throw ValidationError("solve_stein: dimension mismatch");
    require_finite(l, "solve_stein(l)");
    require_finite(c, "solve_stein(c)");
    const Eigen::Index n = l.rows();
    if (n == 0) return c;
    if (spectral_radius(l) >= 1.0) throw NumericalError("solve_stein: spectral radius >= 1, no bounded solution");

    MatrixXd p(n, n);
    if (n <= opts.kronecker_max_order) {
        const Eigen::Index nn = n * n;
        MatrixXd sys = MatrixXd::Identity(nn, nn);
        // vec(L P L') = (L kron L) vec(P), column-major vec
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) sys.block(i * n, j * n, n, n) -= l(i, j) * l;
        const VectorXd rhs = Eigen::Map<const VectorXd>(c.data(), nn);
        const VectorXd x = sys.partialPivLu().solve(rhs);
        p = Eigen::Map<const MatrixXd>(x.data(), n, n);
    } else {
        p = c;
        MatrixXd lk = l;
        for (int it = 0; it < 200; ++it) {
            const MatrixXd inc = lk * p * lk.transpose();
            p += inc;
            lk = (lk * lk).eval();
            if (inc.norm() <= 1e-17 * p.norm() || lk.norm() <= 1e-300) break;
        }
    }
    symmetrize(p);
    if (!p.allFinite()) throw NumericalError("solve_stein: non-finite solution");
    if (stein_residual(l, c, p) > 1e-9) throw NumericalError("solve_stein: residual check failed");
    return p;
}

}  // namespace bem
