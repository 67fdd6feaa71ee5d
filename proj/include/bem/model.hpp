#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bem/matcore.hpp"

namespace bem {

/// Raw ingredients of a structural model; validated by StructuralModel.
struct ModelParts {
    MatrixXd mass;
    MatrixXd k0;                    // empty -> zero
    MatrixXd c0;                    // empty -> zero
    std::vector<MatrixXd> k_sub;
    std::vector<MatrixXd> c_sub;
    MatrixXd s_p;                   // N_d x N_p force distribution
    MatrixXd strain_map;            // N_eps x N_d (may have zero rows)
    MatrixXd stress_map;            // N_sigma x N_d (may have zero rows)
    double dt = 0.0;
    VectorXd theta_nominal;         // optional, length N_theta
};

/// M, K_0, C_0, K_s, C_s, S_p, strain/stress maps and the sampling interval.
/// Immutable after construction.
class StructuralModel {
public:
    StructuralModel() = default;

    explicit StructuralModel(ModelParts parts) : p_(std::move(parts)) {
        const Eigen::Index nd = p_.mass.rows();
        if (nd == 0) throw ValidationError("model: mass matrix is empty");
        require_square(p_.mass, "model: mass");
        require_finite(p_.mass, "model: mass");
        if ((p_.mass - p_.mass.transpose()).norm() > 1e-12 * p_.mass.norm())
            throw ValidationError("model: mass matrix is not symmetric");
        Eigen::LLT<MatrixXd> llt(p_.mass);
        if (llt.info() != Eigen::Success) throw ValidationError("model: mass matrix is not positive definite");
        mass_inv_ = llt.solve(MatrixXd::Identity(nd, nd));
        symmetrize(mass_inv_);

        auto check_sq = [&](MatrixXd& m, const std::string& name) {
            if (m.size() == 0) m = MatrixXd::Zero(nd, nd);
            if (m.rows() != nd || m.cols() != nd)
                throw ValidationError("model: " + name + " must be " + std::to_string(nd) + "x" + std::to_string(nd));
            require_finite(m, ("model: " + name).c_str());
            if ((m - m.transpose()).norm() > 1e-12 * (1.0 + m.norm()))
                throw ValidationError("model: " + name + " is not symmetric");
        };
        check_sq(p_.k0, "k0");
        check_sq(p_.c0, "c0");
        for (std::size_t s = 0; s < p_.k_sub.size(); ++s) check_sq(p_.k_sub[s], "k_sub[" + std::to_string(s) + "]");
        for (std::size_t s = 0; s < p_.c_sub.size(); ++s) check_sq(p_.c_sub[s], "c_sub[" + std::to_string(s) + "]");

        if (p_.s_p.rows() != nd && p_.s_p.size() != 0)
            throw ValidationError("model: force distribution must have " + std::to_string(nd) + " rows");
        if (p_.s_p.size() == 0) p_.s_p = MatrixXd::Zero(nd, 0);
        require_finite(p_.s_p, "model: force distribution");
        if (p_.strain_map.size() == 0) p_.strain_map = MatrixXd::Zero(0, nd);
        if (p_.stress_map.size() == 0) p_.stress_map = MatrixXd::Zero(0, nd);
        if (p_.strain_map.cols() != nd) throw ValidationError("model: strain_map must have N_d columns");
        if (p_.stress_map.cols() != nd) throw ValidationError("model: stress_map must have N_d columns");
        if (!(p_.dt > 0.0) || !std::isfinite(p_.dt)) throw ValidationError("model: dt must be positive");
        if (p_.theta_nominal.size() != 0 && p_.theta_nominal.size() != n_theta())
            throw ValidationError("model: theta_nominal length " + std::to_string(p_.theta_nominal.size()) +
                                  " does not match N_theta = " + std::to_string(n_theta()));

        minv_k0_ = mass_inv_ * p_.k0;
        minv_c0_ = mass_inv_ * p_.c0;
        for (const auto& k : p_.k_sub) minv_ksub_.push_back(mass_inv_ * k);
        for (const auto& c : p_.c_sub) minv_csub_.push_back(mass_inv_ * c);
        minv_sp_ = mass_inv_ * p_.s_p;
    }

    int n_dof() const { return static_cast<int>(p_.mass.rows()); }
    int n_stiff() const { return static_cast<int>(p_.k_sub.size()); }
    int n_damp() const { return static_cast<int>(p_.c_sub.size()); }
    int n_theta() const { return n_stiff() + n_damp(); }
    int n_input() const { return static_cast<int>(p_.s_p.cols()); }
    int n_strain() const { return static_cast<int>(p_.strain_map.rows()); }
    int n_stress() const { return static_cast<int>(p_.stress_map.rows()); }
    double dt() const { return p_.dt; }

    const MatrixXd& mass() const { return p_.mass; }
    const MatrixXd& mass_inv() const { return mass_inv_; }
    const MatrixXd& k0() const { return p_.k0; }
    const MatrixXd& c0() const { return p_.c0; }
    const std::vector<MatrixXd>& k_sub() const { return p_.k_sub; }
    const std::vector<MatrixXd>& c_sub() const { return p_.c_sub; }
    const MatrixXd& s_p() const { return p_.s_p; }
    const MatrixXd& strain_map() const { return p_.strain_map; }
    const MatrixXd& stress_map() const { return p_.stress_map; }
    const VectorXd& theta_nominal() const { return p_.theta_nominal; }
    const ModelParts& parts() const { return p_; }

    /// M^-1 K_0, M^-1 K_s, M^-1 C_0, M^-1 C_s, M^-1 S_p.
    const MatrixXd& minv_k0() const { return minv_k0_; }
    const MatrixXd& minv_c0() const { return minv_c0_; }
    const std::vector<MatrixXd>& minv_ksub() const { return minv_ksub_; }
    const std::vector<MatrixXd>& minv_csub() const { return minv_csub_; }
    const MatrixXd& minv_sp() const { return minv_sp_; }

    /// M^-1 dK/dtheta_s (stiffness) or M^-1 dC/dtheta_s (damping).
    const MatrixXd& minv_sub(int s) const {
        return s < n_stiff() ? minv_ksub_[static_cast<std::size_t>(s)]
                             : minv_csub_[static_cast<std::size_t>(s - n_stiff())];
    }
    bool is_stiffness(int s) const { return s < n_stiff(); }

    /// Copy with a different sampling interval.
    StructuralModel with_dt(double dt) const {
        ModelParts q = p_;
        q.dt = dt;
        return StructuralModel(std::move(q));
    }

    void check_theta(const VectorXd& theta) const {
        if (theta.size() != n_theta())
            throw ValidationError("theta has length " + std::to_string(theta.size()) + ", expected " +
                                  std::to_string(n_theta()));
    }

private:
    ModelParts p_;
    MatrixXd mass_inv_;
    MatrixXd minv_k0_, minv_c0_, minv_sp_;
    std::vector<MatrixXd> minv_ksub_, minv_csub_;
};

/// Sensor placement; DOF/strain indices are zero-based.
struct SensorConfig {
    std::vector<int> strain;
    std::vector<int> disp;
    std::vector<int> vel;
    std::vector<int> acc;
    int n_pseudo = 0;

    int n_meas() const { return static_cast<int>(strain.size() + disp.size() + vel.size() + acc.size()); }
    int n_obs() const { return n_meas() + n_pseudo; }

    void validate(const StructuralModel& model) const {
        if (n_meas() < 1) throw ValidationError("sensor config: at least one physical measurement is required");
        auto check = [](const std::vector<int>& v, int limit, const char* what) {
            for (int i : v)
                if (i < 0 || i >= limit)
                    throw ValidationError(std::string("sensor config: ") + what + " index " + std::to_string(i + 1) +
                                          " out of range 1.." + std::to_string(limit));
        };
        check(strain, model.n_strain(), "strain");
        check(disp, model.n_dof(), "disp");
        check(vel, model.n_dof(), "vel");
        check(acc, model.n_dof(), "acc");
        if (n_pseudo < 0 || n_pseudo > model.n_input())
            throw ValidationError("sensor config: n_pseudo must be between 0 and N_p = " +
                                  std::to_string(model.n_input()));
    }

    static MatrixXd selection(const std::vector<int>& idx, int n) {
        MatrixXd s = MatrixXd::Zero(static_cast<Eigen::Index>(idx.size()), n);
        for (std::size_t r = 0; r < idx.size(); ++r) s(static_cast<Eigen::Index>(r), idx[r]) = 1.0;
        return s;
    }
};

/// Offsets of the z, theta, p blocks inside the augmented state.
struct StateLayout {
    int nd = 0;
    int ntheta = 0;
    int nk = 0;
    int np = 0;

    StateLayout() = default;
    explicit StateLayout(const StructuralModel& m)
        : nd(m.n_dof()), ntheta(m.n_theta()), nk(m.n_stiff()), np(m.n_input()) {}

    int nz() const { return 2 * nd; }
    int z0() const { return 0; }
    int theta0() const { return 2 * nd; }
    int p0() const { return 2 * nd + ntheta; }
    int size() const { return 2 * nd + ntheta + np; }
};

inline MatrixXd assemble_stiffness(const StructuralModel& m, const VectorXd& theta) {
    m.check_theta(theta);
    MatrixXd k = m.k0();
    for (int s = 0; s < m.n_stiff(); ++s) k += theta(s) * m.k_sub()[static_cast<std::size_t>(s)];
    return k;
}

inline MatrixXd assemble_damping(const StructuralModel& m, const VectorXd& theta) {
    m.check_theta(theta);
    MatrixXd c = m.c0();
    for (int s = 0; s < m.n_damp(); ++s) c += theta(m.n_stiff() + s) * m.c_sub()[static_cast<std::size_t>(s)];
    return c;
}

struct ContinuousSS {
    MatrixXd a_c;
    MatrixXd b_c;
};

/// A_c = [[0, I], [-M^-1 K, -M^-1 C]], B_c = [0; M^-1 S_p].
inline ContinuousSS continuous_ss(const StructuralModel& m, const VectorXd& theta) {
    m.check_theta(theta);
    const int nd = m.n_dof();
    MatrixXd mk = m.minv_k0();
    MatrixXd mc = m.minv_c0();
    for (int s = 0; s < m.n_stiff(); ++s) mk += theta(s) * m.minv_ksub()[static_cast<std::size_t>(s)];
    for (int s = 0; s < m.n_damp(); ++s)
        mc += theta(m.n_stiff() + s) * m.minv_csub()[static_cast<std::size_t>(s)];
    ContinuousSS ss;
    ss.a_c = MatrixXd::Zero(2 * nd, 2 * nd);
    ss.a_c.topRightCorner(nd, nd).setIdentity();
    ss.a_c.bottomLeftCorner(nd, nd) = -mk;
    ss.a_c.bottomRightCorner(nd, nd) = -mc;
    ss.b_c = MatrixXd::Zero(2 * nd, m.n_input());
    ss.b_c.bottomRows(nd) = m.minv_sp();
    return ss;
}

/// Undamped natural frequencies in Hz, ascending.
inline VectorXd natural_frequencies_hz(const StructuralModel& m, const VectorXd& theta) {
    const MatrixXd k = assemble_stiffness(m, theta);
    Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> es(k, m.mass());
    if (es.info() != Eigen::Success) throw NumericalError("natural_frequencies: eigen decomposition failed");
    return es.eigenvalues().cwiseMax(0.0).cwiseSqrt() / (2.0 * M_PI);
}

/// Discrete pair keyed on theta, two-slot cache (filter and smoother chains alternate).
class DiscretizationCache {
public:
    explicit DiscretizationCache(const StructuralModel& m) : model_(&m) {}

    const DiscreteSS& at(const VectorXd& theta) {
        for (auto& slot : slots_) {
            if (slot.valid && same(slot.theta, theta)) {
                slot.stamp = ++clock_;
                return slot.ss;
            }
        }
        Slot& victim = slots_[0].stamp <= slots_[1].stamp ? slots_[0] : slots_[1];
        const ContinuousSS c = continuous_ss(*model_, theta);
        victim.ss = discretize(c.a_c, c.b_c, model_->dt());
        victim.theta = theta;
        victim.valid = true;
        victim.stamp = ++clock_;
        ++misses_;
        return victim.ss;
    }

    long misses() const { return misses_; }

private:
    struct Slot {
        VectorXd theta;
        DiscreteSS ss;
        bool valid = false;
        long stamp = 0;
    };

    static bool same(const VectorXd& a, const VectorXd& b) {
        if (a.size() != b.size()) return false;
        for (Eigen::Index i = 0; i < a.size(); ++i)
            if (std::abs(a(i) - b(i)) > 1e-12 * std::max(std::abs(a(i)), std::abs(b(i)))) return false;
        return true;
    }

    const StructuralModel* model_;
    std::array<Slot, 2> slots_;
    long clock_ = 0;
    long misses_ = 0;
};

/// How the theta-columns of the process Jacobian are computed.
enum class JacobianStrategy {
    finite_difference,         // central differences of full re-discretizations
    finite_difference_action,  // central differences of the exponential action on [z; p]
    series_sensitivity,        // exact derivative of the truncated Taylor action
};

/// Augmented transition f(xi) = A^a(theta) xi and its Jacobian. Holds a per-run cache.
class ProcessModel {
public:
    explicit ProcessModel(const StructuralModel& m,
                          JacobianStrategy strategy = JacobianStrategy::series_sensitivity)
        : model_(&m), layout_(m), strategy_(strategy), cache_(m) {}

    const StructuralModel& model() const { return *model_; }
    const StateLayout& layout() const { return layout_; }
    JacobianStrategy strategy() const { return strategy_; }

    const DiscreteSS& discrete(const VectorXd& theta) { return cache_.at(theta); }

    VectorXd transition(const VectorXd& xi) {
        check(xi);
        const auto& L = layout_;
        const DiscreteSS& d = cache_.at(xi.segment(L.theta0(), L.ntheta));
        VectorXd out = xi;
        out.head(L.nz()) = d.a * xi.head(L.nz()) + d.b * xi.tail(L.np);
        if (!out.allFinite()) throw NumericalError("augmented_transition: non-finite state");
        return out;
    }

    /// f(xi) and F = df/dxi at xi.
    void linearize(const VectorXd& xi, VectorXd& f, MatrixXd& jac) {
        check(xi);
        const auto& L = layout_;
        const VectorXd theta = xi.segment(L.theta0(), L.ntheta);
        const DiscreteSS& d = cache_.at(theta);
        const VectorXd z = xi.head(L.nz());
        const VectorXd p = xi.tail(L.np);
        f = xi;
        f.head(L.nz()) = d.a * z + d.b * p;
        jac.setIdentity(L.size(), L.size());
        jac.topLeftCorner(L.nz(), L.nz()) = d.a;
        jac.topRightCorner(L.nz(), L.np) = d.b;
        if (L.ntheta > 0) {
            MatrixXd cols(L.nz(), L.ntheta);
            theta_columns(theta, z, p, cols);
            jac.block(0, L.theta0(), L.nz(), L.ntheta) = cols;
        }
        if (!f.allFinite() || !jac.allFinite()) throw NumericalError("process_jacobian: non-finite result");
    }

    MatrixXd jacobian(const VectorXd& xi) {
        VectorXd f;
        MatrixXd jac;
        linearize(xi, f, jac);
        return jac;
    }

    /// d(A(theta) z + B(theta) p)/dtheta, one column per parameter.
    void theta_columns(const VectorXd& theta, const VectorXd& z, const VectorXd& p, MatrixXd& cols) {
        const auto& L = layout_;
        cols.resize(L.nz(), L.ntheta);
        switch (strategy_) {
            case JacobianStrategy::finite_difference: {
                for (int s = 0; s < L.ntheta; ++s) {
                    const double h = 1e-6 * (1.0 + std::abs(theta(s)));
                    VectorXd tp = theta, tm = theta;
                    tp(s) += h;
                    tm(s) -= h;
                    const ContinuousSS cp = continuous_ss(*model_, tp);
                    const ContinuousSS cm = continuous_ss(*model_, tm);
                    const DiscreteSS dp = discretize(cp.a_c, cp.b_c, model_->dt());
                    const DiscreteSS dm = discretize(cm.a_c, cm.b_c, model_->dt());
                    cols.col(s) = ((dp.a * z + dp.b * p) - (dm.a * z + dm.b * p)) / (2.0 * h);
                }
                break;
            }
            case JacobianStrategy::finite_difference_action: {
                prepare_action(theta);
                VectorXd w(L.nz() + L.np);
                w << z, p;
                VectorXd gp, gm;
                for (int s = 0; s < L.ntheta; ++s) {
                    const double h = 1e-6 * (1.0 + std::abs(theta(s)));
                    action(s, h, w, gp);
                    action(s, -h, w, gm);
                    cols.col(s) = (gp - gm) / (2.0 * h);
                }
                break;
            }
            case JacobianStrategy::series_sensitivity: {
                prepare_action(theta);
                VectorXd w(L.nz() + L.np);
                w << z, p;
                sensitivity_all(w, cols);
                break;
            }
        }
    }

private:
    void check(const VectorXd& xi) const {
        if (xi.size() != layout_.size())
            throw ValidationError("augmented state has length " + std::to_string(xi.size()) + ", expected " +
                                  std::to_string(layout_.size()));
    }

    // Generator X = [[A_c, B_c], [0, 0]] dt in balanced coordinates (displacements scaled by omega),
    // with a scaling count and Taylor degree fixed at the base point so perturbed
    // evaluations use the same polynomial.
    void prepare_action(const VectorXd& theta) {
        const auto& L = layout_;
        const int nd = L.nd;
        const ContinuousSS c = continuous_ss(*model_, theta);
        double w2 = 0.0;
        for (int i = 0; i < nd; ++i) w2 = std::max(w2, std::abs(c.a_c(nd + i, i)));
        omega_ = std::sqrt(std::max(w2, 1e-300));
        if (!(omega_ > 0.0) || !std::isfinite(omega_)) omega_ = 1.0;
        const double dt = model_->dt();
        const int n = L.nz() + L.np;
        gen_ = MatrixXd::Zero(n, n);
        // x~ = omega x: rows of x scaled by omega, columns of x by 1/omega
        gen_.block(0, nd, nd, nd) = MatrixXd::Identity(nd, nd) * (omega_ * dt);
        gen_.block(nd, 0, nd, nd) = c.a_c.bottomLeftCorner(nd, nd) * (dt / omega_);
        gen_.block(nd, nd, nd, nd) = c.a_c.bottomRightCorner(nd, nd) * dt;
        gen_.block(nd, L.nz(), nd, L.np) = c.b_c.bottomRows(nd) * dt;
        const double nrm = gen_.cwiseAbs().colwise().sum().maxCoeff();
        scalings_ = std::max(1, static_cast<int>(std::ceil(nrm / 0.5)));
        const double x = nrm / scalings_;
        double term = 1.0;
        degree_ = 0;
        while (degree_ < 40) {
            ++degree_;
            term *= x / degree_;
            if (term * x / (degree_ + 1) <= 1e-18) break;
        }
    }

    // Top block of exp(X(theta + h e_s)) w, original coordinates.
    void action(int s, double h, const VectorXd& w, VectorXd& out) {
        const int nd = layout_.nd;
        const int n = static_cast<int>(gen_.rows());
        MatrixXd x = gen_;
        const MatrixXd& ms = model_->minv_sub(s);
        const double dt = model_->dt();
        if (model_->is_stiffness(s))
            x.block(nd, 0, nd, nd) -= ms * (h * dt / omega_);
        else
            x.block(nd, nd, nd, nd) -= ms * (h * dt);
        x /= static_cast<double>(scalings_);
        VectorXd v = w;
        v.head(nd) *= omega_;
        VectorXd term(n), acc(n);
        for (int r = 0; r < scalings_; ++r) {
            acc = v;
            term = v;
            for (int j = 1; j <= degree_; ++j) {
                term = (x * term) / static_cast<double>(j);
                acc += term;
            }
            v = acc;
        }
        out = v.head(layout_.nz());
        out.head(nd) /= omega_;
    }

    // All parameter directions at once: velocity rows of E_s u, balanced coordinates.
    void directions(const VectorXd& u, MatrixXd& e) {
        const int nd = layout_.nd;
        const int nk = model_->n_stiff(), nc = model_->n_damp();
        const double dt = model_->dt();
        if (stacked_.rows() == 0) {
            stacked_.resize(static_cast<Eigen::Index>(nk + nc) * nd, nd);
            for (int s = 0; s < nk + nc; ++s) stacked_.middleRows(static_cast<Eigen::Index>(s) * nd, nd) = model_->minv_sub(s);
        }
        e.setZero();
        if (nk > 0) {
            const VectorXd t = stacked_.topRows(static_cast<Eigen::Index>(nk) * nd) * u.head(nd);
            e.block(nd, 0, nd, nk) = Eigen::Map<const MatrixXd>(t.data(), nd, nk) * (-dt / omega_);
        }
        if (nc > 0) {
            const VectorXd t = stacked_.bottomRows(static_cast<Eigen::Index>(nc) * nd) * u.segment(nd, nd);
            e.block(nd, nk, nd, nc) = Eigen::Map<const MatrixXd>(t.data(), nd, nc) * (-dt);
        }
    }

    void sensitivity_all(const VectorXd& w, MatrixXd& cols) {
        const int nd = layout_.nd;
        const auto n = gen_.rows();
        const int nt = layout_.ntheta;
        const MatrixXd x = gen_ / static_cast<double>(scalings_);
        const double inv_s = 1.0 / static_cast<double>(scalings_);
        VectorXd v = w;
        v.head(nd) *= omega_;
        MatrixXd dv = MatrixXd::Zero(n, nt);
        VectorXd u(n), su(n);
        MatrixXd du(n, nt), sdu(n, nt), e(n, nt), tmp(n, nt);
        for (int r = 0; r < scalings_; ++r) {
            u = v;
            du = dv;
            su = v;
            sdu = dv;
            for (int j = 1; j <= degree_; ++j) {
                directions(u, e);
                tmp.noalias() = x * du;
                du = (tmp + e * inv_s) / static_cast<double>(j);
                u = (x * u) / static_cast<double>(j);
                su += u;
                sdu += du;
            }
            v = su;
            dv = sdu;
        }
        cols = dv.topRows(layout_.nz());
        cols.topRows(nd) /= omega_;
    }

    const StructuralModel* model_;
    StateLayout layout_;
    JacobianStrategy strategy_;
    DiscretizationCache cache_;
    MatrixXd gen_;
    double omega_ = 1.0;
    int scalings_ = 1;
    int degree_ = 1;
    MatrixXd stacked_;  // M^-1 K_s then M^-1 C_s, stacked by rows
};

inline VectorXd augmented_transition(const StructuralModel& m, const VectorXd& xi) {
    ProcessModel pm(m);
    return pm.transition(xi);
}

inline MatrixXd process_jacobian(const StructuralModel& m, const VectorXd& xi,
                                 JacobianStrategy strategy = JacobianStrategy::series_sensitivity) {
    ProcessModel pm(m, strategy);
    return pm.jacobian(xi);
}

/// Observation rows: strain, displacement, velocity, acceleration, then input pseudo rows.
class ObservationModel {
public:
    ObservationModel(const StructuralModel& m, const SensorConfig& cfg) : model_(&m), cfg_(cfg), layout_(m) {
        cfg.validate(m);
        const int nd = m.n_dof();
        s_a_ = SensorConfig::selection(cfg.acc, nd);
        sa_minv_k0_ = s_a_ * m.minv_k0();
        sa_minv_c0_ = s_a_ * m.minv_c0();
        for (int s = 0; s < m.n_theta(); ++s) sa_minv_sub_.push_back(s_a_ * m.minv_sub(s));
        j_c_ = s_a_ * m.minv_sp();
        strain_rows_ = SensorConfig::selection(cfg.strain, m.n_strain()) * m.strain_map();
    }

    const SensorConfig& config() const { return cfg_; }
    const StateLayout& layout() const { return layout_; }
    int n_obs() const { return cfg_.n_obs(); }

    int acc_offset() const {
        return static_cast<int>(cfg_.strain.size() + cfg_.disp.size() + cfg_.vel.size());
    }

    /// G^a(theta): observation matrix at fixed theta, theta columns zero.
    MatrixXd matrix(const VectorXd& theta) const {
        const auto& L = layout_;
        const int nd = L.nd;
        MatrixXd g = MatrixXd::Zero(n_obs(), L.size());
        int r = 0;
        const auto ns = static_cast<int>(cfg_.strain.size());
        if (ns > 0) g.block(r, 0, ns, nd) = strain_rows_;
        r += ns;
        for (int i : cfg_.disp) g(r++, i) = 1.0;
        for (int i : cfg_.vel) g(r++, nd + i) = 1.0;
        const auto na = static_cast<int>(cfg_.acc.size());
        if (na > 0) {
            MatrixXd ak = sa_minv_k0_, ac = sa_minv_c0_;
            for (int s = 0; s < L.ntheta; ++s) {
                if (model_->is_stiffness(s))
                    ak += theta(s) * sa_minv_sub_[static_cast<std::size_t>(s)];
                else
                    ac += theta(s) * sa_minv_sub_[static_cast<std::size_t>(s)];
            }
            g.block(r, 0, na, nd) = -ak;
            g.block(r, nd, na, nd) = -ac;
            g.block(r, L.p0(), na, L.np) = j_c_;
        }
        r += na;
        for (int i = 0; i < cfg_.n_pseudo; ++i) g(r++, L.p0() + i) = 1.0;
        return g;
    }

    VectorXd map(const VectorXd& xi) const {
        check(xi);
        return matrix(xi.segment(layout_.theta0(), layout_.ntheta)) * xi;
    }

    MatrixXd jacobian(const VectorXd& xi) const {
        check(xi);
        const auto& L = layout_;
        MatrixXd h = matrix(xi.segment(L.theta0(), L.ntheta));
        const int r0 = acc_offset();
        const auto na = static_cast<Eigen::Index>(cfg_.acc.size());
        if (na > 0) {
            for (int s = 0; s < L.ntheta; ++s) {
                const auto& sub = sa_minv_sub_[static_cast<std::size_t>(s)];
                if (model_->is_stiffness(s))
                    h.block(r0, L.theta0() + s, na, 1) = -sub * xi.head(L.nd);
                else
                    h.block(r0, L.theta0() + s, na, 1) = -sub * xi.segment(L.nd, L.nd);
            }
        }
        return h;
    }

private:
    void check(const VectorXd& xi) const {
        if (xi.size() != layout_.size())
            throw ValidationError("augmented state has length " + std::to_string(xi.size()) + ", expected " +
                                  std::to_string(layout_.size()));
    }

    const StructuralModel* model_;
    SensorConfig cfg_;
    StateLayout layout_;
    MatrixXd s_a_, sa_minv_k0_, sa_minv_c0_, j_c_, strain_rows_;
    std::vector<MatrixXd> sa_minv_sub_;
};

inline VectorXd observation_map(const StructuralModel& m, const SensorConfig& cfg, const VectorXd& xi) {
    return ObservationModel(m, cfg).map(xi);
}

inline MatrixXd observation_jacobian(const StructuralModel& m, const SensorConfig& cfg, const VectorXd& xi) {
    return ObservationModel(m, cfg).jacobian(xi);
}

enum class VirtualKind { stress, strain, disp, vel, acc };

inline const char* to_string(VirtualKind k) {
    switch (k) {
        case VirtualKind::stress: return "stress";
        case VirtualKind::strain: return "strain";
        case VirtualKind::disp: return "disp";
        case VirtualKind::vel: return "vel";
        case VirtualKind::acc: return "acc";
    }
    return "?";
}

struct VirtualChannel {
    VirtualKind kind;
    int index;  // zero-based DOF, strain or stress row
};

/// Row of the full virtual-sensing matrix G^e for one channel.
inline int virtual_row(const StructuralModel& m, const VirtualChannel& ch) {
    const int nd = m.n_dof();
    auto check = [&](int limit) {
        if (ch.index < 0 || ch.index >= limit)
            throw ValidationError(std::string("virtual channel ") + to_string(ch.kind) + " index " +
                                  std::to_string(ch.index + 1) + " out of range");
    };
    switch (ch.kind) {
        case VirtualKind::stress: check(m.n_stress()); return ch.index;
        case VirtualKind::strain: check(m.n_strain()); return m.n_stress() + ch.index;
        case VirtualKind::disp: check(nd); return m.n_stress() + m.n_strain() + ch.index;
        case VirtualKind::vel: check(nd); return m.n_stress() + m.n_strain() + nd + ch.index;
        case VirtualKind::acc: check(nd); return m.n_stress() + m.n_strain() + 2 * nd + ch.index;
    }
    return 0;
}

/// G^e(theta): stress, strain, displacement, velocity, acceleration rows over the augmented state.
inline MatrixXd virtual_sense_map(const StructuralModel& m, const VectorXd& theta) {
    const StateLayout L(m);
    const int nd = L.nd;
    const int ns = m.n_stress(), ne = m.n_strain();
    const ContinuousSS c = continuous_ss(m, theta);
    MatrixXd g = MatrixXd::Zero(ns + ne + 3 * nd, L.size());
    g.block(0, 0, ns, nd) = m.stress_map();
    g.block(ns, 0, ne, nd) = m.strain_map();
    g.block(ns + ne, 0, nd, nd).setIdentity();
    g.block(ns + ne + nd, nd, nd, nd).setIdentity();
    g.block(ns + ne + 2 * nd, 0, nd, 2 * nd) = c.a_c.bottomRows(nd);
    g.block(ns + ne + 2 * nd, L.p0(), nd, L.np) = m.minv_sp();
    return g;
}

struct VirtualPosterior {
    VectorXd mean;
    MatrixXd cov;
};

/// Gaussian posterior of virtual channels from an augmented estimate (all rows when channels is empty).
inline VirtualPosterior virtual_posterior(const StructuralModel& m, const VectorXd& mean, const MatrixXd& cov,
                                          const std::vector<VirtualChannel>& channels = {}) {
    const StateLayout L(m);
    if (mean.size() != L.size() || cov.rows() != L.size() || cov.cols() != L.size())
        throw ValidationError("virtual_posterior: estimate dimension mismatch");
    const VectorXd theta = mean.segment(L.theta0(), L.ntheta);
    const MatrixXd g = virtual_sense_map(m, theta);
    MatrixXd jac = g;
    const int acc0 = m.n_stress() + m.n_strain() + 2 * L.nd;
    for (int s = 0; s < L.ntheta; ++s) {
        const MatrixXd& ms = m.minv_sub(s);
        if (m.is_stiffness(s))
            jac.block(acc0, L.theta0() + s, L.nd, 1) = -ms * mean.head(L.nd);
        else
            jac.block(acc0, L.theta0() + s, L.nd, 1) = -ms * mean.segment(L.nd, L.nd);
    }
    MatrixXd gs = g, js = jac;
    if (!channels.empty()) {
        gs.resize(static_cast<Eigen::Index>(channels.size()), L.size());
        js.resize(static_cast<Eigen::Index>(channels.size()), L.size());
        for (std::size_t i = 0; i < channels.size(); ++i) {
            const int r = virtual_row(m, channels[i]);
            gs.row(static_cast<Eigen::Index>(i)) = g.row(r);
            js.row(static_cast<Eigen::Index>(i)) = jac.row(r);
        }
    }
    VirtualPosterior out;
    out.mean = gs * mean;
    out.cov = js * cov * js.transpose();
    symmetrize(out.cov);
    return out;
}

/// Spring-chain substructures: spring s links DOF s-1 and s, spring 0 links DOF 0 to ground.
inline std::vector<MatrixXd> chain_substructures(int nd) {
    std::vector<MatrixXd> subs;
    for (int s = 0; s < nd; ++s) {
        MatrixXd k = MatrixXd::Zero(nd, nd);
        k(s, s) = 1.0;
        if (s > 0) {
            k(s - 1, s - 1) = 1.0;
            k(s - 1, s) = -1.0;
            k(s, s - 1) = -1.0;
        }
        subs.push_back(k);
    }
    return subs;
}

/// Modal damping substructures M phi phi' M / (phi' M phi) * 4 pi f for each mode of (k_nominal, mass),
/// so that C = sum_i xi_i C_i gives damping ratio xi_i in mode i.
inline std::vector<MatrixXd> modal_damping_substructures(const MatrixXd& mass, const MatrixXd& k_nominal) {
    Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> es(k_nominal, mass);
    if (es.info() != Eigen::Success) throw NumericalError("modal damping: eigen decomposition failed");
    std::vector<MatrixXd> subs;
    for (Eigen::Index i = 0; i < mass.rows(); ++i) {
        const VectorXd phi = es.eigenvectors().col(i);
        const double w = std::sqrt(std::max(es.eigenvalues()(i), 0.0));
        const VectorXd mphi = mass * phi;
        MatrixXd c = mphi * mphi.transpose() / phi.dot(mphi) * (2.0 * w);
        symmetrize(c);
        subs.push_back(c);
    }
    return subs;
}

}  // namespace bem
