#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "bem/model.hpp"
#include "bem/sim.hpp"

namespace bem {

/// How the theta columns of the rank matrix are built.
enum class OrcFormulation {
    bilinear,  // exact derivative of G(theta) A(theta)^j z0 (product rule through every factor)
    literal,   // row j holds sum_{i<j} G0 A0^i C + H with C = [A_s z0], H = [G_s z0]
};

struct OrcOptions {
    OrcFormulation formulation = OrcFormulation::bilinear;
    std::optional<VectorXd> theta_lin;  // linearization point; model nominal, else zero
    double rel_tol = 1e-10;
};

/// Stacked Lie-derivative matrix [O | G | H] of order k, each column group scaled
/// by its largest singular value. Row block j and input-derivative column i carry
/// the rank-neutral time scaling omega^-j and omega^i.
struct OrcMatrix {
    int order_k = 0;
    int nz = 0;
    int ntheta = 0;
    int np = 0;
    int rows_per_block = 0;
    MatrixXd o;
    MatrixXd g;
    MatrixXd h;
    VectorXd z0;

    int n_cols() const { return nz + ntheta + (order_k + 1) * np; }

    MatrixXd full() const {
        MatrixXd m(o.rows(), n_cols());
        m << o, g, h;
        return m;
    }

    MatrixXd og() const {
        MatrixXd m(o.rows(), nz + ntheta);
        m << o, g;
        return m;
    }

    /// Order j <= order_k matrix from the leading rows and input columns (group scaling redone).
    OrcMatrix truncated(int j) const {
        if (j < 0 || j > order_k) throw ValidationError("OrcMatrix::truncated: order out of range");
        OrcMatrix t;
        t.order_k = j;
        t.nz = nz;
        t.ntheta = ntheta;
        t.np = np;
        t.rows_per_block = rows_per_block;
        t.z0 = z0;
        const auto rows = static_cast<Eigen::Index>(j + 1) * rows_per_block;
        t.o = o.topRows(rows);
        t.g = g.topRows(rows);
        t.h = h.topLeftCorner(rows, static_cast<Eigen::Index>(j + 1) * np);
        t.normalize();
        return t;
    }

    void normalize() {
        for (MatrixXd* m : {&o, &g, &h}) {
            const double s = largest_singular_value(*m);
            if (s > 0.0) *m /= s;
        }
    }

    /// H of order k-1 (top-left sub-block).
    MatrixXd h_prev() const {
        if (order_k == 0) return MatrixXd::Zero(0, 0);
        return h.topLeftCorner(static_cast<Eigen::Index>(order_k) * rows_per_block,
                               static_cast<Eigen::Index>(order_k) * np);
    }
};

inline VectorXd orc_theta_lin(const StructuralModel& model, const OrcOptions& opts) {
    if (opts.theta_lin) {
        model.check_theta(*opts.theta_lin);
        return *opts.theta_lin;
    }
    if (model.theta_nominal().size() == model.n_theta()) return model.theta_nominal();
    return VectorXd::Zero(model.n_theta());
}

namespace detail {

inline OrcMatrix build_orc_unscaled(const StructuralModel& model, const SensorConfig& cfg, const VectorXd& z0, int k,
                                    const OrcOptions& opts) {
    cfg.validate(model);
    if (k < 0) throw ValidationError("build_orc: order must be non-negative");
    const StateLayout L(model);
    const int nd = L.nd, nz = L.nz(), nt = L.ntheta, np = L.np;
    if (z0.size() != nz) throw ValidationError("build_orc: z0 must have length 2 N_d");
    const VectorXd theta = orc_theta_lin(model, opts);
    const ContinuousSS c = continuous_ss(model, theta);
    const ObservationModel om(model, cfg);
    const MatrixXd ga = om.matrix(theta);
    const int nm = cfg.n_obs();
    const MatrixXd g0 = ga.leftCols(nz);
    const MatrixXd jc = ga.rightCols(np);
    const int acc0 = om.acc_offset();
    const auto na = static_cast<int>(cfg.acc.size());

    // time scale and balancing z = T zh, T = diag(I, omega I)
    double w2 = 0.0;
    for (int i = 0; i < nd; ++i) w2 = std::max(w2, std::abs(c.a_c(nd + i, i)));
    double omega = std::sqrt(w2);
    if (!(omega > 0.0) || !std::isfinite(omega)) omega = 1.0;
    VectorXd t(nz);
    t << VectorXd::Ones(nd), VectorXd::Constant(nd, omega);
    const VectorXd tinv = t.cwiseInverse();
    const MatrixXd ah = tinv.asDiagonal() * (c.a_c / omega) * t.asDiagonal();
    const MatrixXd bh = tinv.asDiagonal() * (c.b_c / omega);
    const MatrixXd gh = g0 * t.asDiagonal();
    const VectorXd zh = tinv.asDiagonal() * z0;

    // derivative matrices per parameter, balanced
    std::vector<MatrixXd> as(static_cast<std::size_t>(nt)), gs(static_cast<std::size_t>(nt));
    for (int s = 0; s < nt; ++s) {
        MatrixXd da = MatrixXd::Zero(nz, nz);
        MatrixXd dg = MatrixXd::Zero(nm, nz);
        const MatrixXd& ms = model.minv_sub(s);
        const MatrixXd sa = SensorConfig::selection(cfg.acc, nd) * ms;
        if (model.is_stiffness(s)) {
            da.block(nd, 0, nd, nd) = -ms;
            if (na) dg.block(acc0, 0, na, nd) = -sa;
        } else {
            da.block(nd, nd, nd, nd) = -ms;
            if (na) dg.block(acc0, nd, na, nd) = -sa;
        }
        as[static_cast<std::size_t>(s)] = tinv.asDiagonal() * (da / omega) * t.asDiagonal();
        gs[static_cast<std::size_t>(s)] = dg * t.asDiagonal();
    }

    OrcMatrix out;
    out.order_k = k;
    out.nz = nz;
    out.ntheta = nt;
    out.np = np;
    out.rows_per_block = nm;
    out.z0 = z0;
    const int rows = (k + 1) * nm;
    out.o = MatrixXd::Zero(rows, nz);
    out.g = MatrixXd::Zero(rows, nt);
    out.h = MatrixXd::Zero(rows, (k + 1) * np);

    MatrixXd apow = MatrixXd::Identity(nz, nz);  // Ah^j
    VectorXd v = zh;                             // Ah^j zh
    std::vector<VectorXd> dvec(static_cast<std::size_t>(nt), VectorXd::Zero(nz));
    // literal form: running sum_{i<j} G Ah^i C_s (scaled by omega^{i+1-j})
    MatrixXd lit_sum = MatrixXd::Zero(nm, nt);
    MatrixXd cmat(nz, nt), hmat(nm, nt);
    for (int s = 0; s < nt; ++s) {
        cmat.col(s) = as[static_cast<std::size_t>(s)] * zh;
        hmat.col(s) = gs[static_cast<std::size_t>(s)] * zh;
    }
    std::vector<MatrixXd> gab;  // G Ah^i Bh, i = 0..k-1
    for (int j = 0; j <= k; ++j) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(j) * nm;
        out.o.block(r0, 0, nm, nz) = gh * apow;
        if (opts.formulation == OrcFormulation::bilinear) {
            for (int s = 0; s < nt; ++s)
                out.g.block(r0, s, nm, 1) = gs[static_cast<std::size_t>(s)] * v + gh * dvec[static_cast<std::size_t>(s)];
        } else {
            const double w = j == 0 ? 0.0 : 1.0;
            out.g.block(r0, 0, nm, nt) = w * lit_sum + hmat * std::pow(omega, -j);
        }
        for (int i = 0; i < j; ++i)
            out.h.block(r0, static_cast<Eigen::Index>(i) * np, nm, np) = gab[static_cast<std::size_t>(j - 1 - i)];
        out.h.block(r0, static_cast<Eigen::Index>(j) * np, nm, np) = jc;

        // advance to j+1
        gab.push_back(gh * apow * bh);
        lit_sum = lit_sum / omega + gh * apow * cmat;
        for (int s = 0; s < nt; ++s)
            dvec[static_cast<std::size_t>(s)] = ah * dvec[static_cast<std::size_t>(s)] + as[static_cast<std::size_t>(s)] * v;
        v = ah * v;
        apow = ah * apow;
    }
    return out;
}

}  // namespace detail

inline OrcMatrix build_orc(const StructuralModel& model, const SensorConfig& cfg, const VectorXd& z0, int k,
                           const OrcOptions& opts = {}) {
    OrcMatrix out = detail::build_orc_unscaled(model, cfg, z0, k, opts);
    out.normalize();
    return out;
}

struct OrcVerdict {
    bool observable = false;
    int rank_og = 0;
    int rank_h = 0;
    int rank_h_prev = 0;
};

inline OrcVerdict check_full(const OrcMatrix& orc, double rel_tol = 1e-10,
                             std::optional<int> known_rank_h_prev = std::nullopt) {
    OrcVerdict v;
    v.rank_og = numerical_rank(orc.og(), rel_tol);
    v.rank_h = numerical_rank(orc.h, rel_tol);
    if (orc.order_k == 0) {
        const int r = numerical_rank(orc.full(), rel_tol);
        v.observable = r == orc.n_cols();
    } else {
        v.rank_h_prev = known_rank_h_prev ? *known_rank_h_prev : numerical_rank(orc.h_prev(), rel_tol);
        v.observable = v.rank_og == orc.nz + orc.ntheta && v.rank_h_prev == v.rank_h - orc.np;
    }
    return v;
}

/// True when deleting column m lowers the rank of the full matrix by exactly one.
inline bool check_component(const OrcMatrix& orc, int m, double rel_tol = 1e-10) {
    const MatrixXd full = orc.full();
    if (m < 0 || m >= full.cols())
        throw ValidationError("check_component: column " + std::to_string(m) + " out of range");
    MatrixXd red(full.rows(), full.cols() - 1);
    red << full.leftCols(m), full.rightCols(full.cols() - m - 1);
    return numerical_rank(full, rel_tol) - numerical_rank(red, rel_tol) == 1;
}

struct ScanRow {
    int k = 0;
    int rank_og = 0;
    int rank_h = 0;
    bool observable = false;
};

struct ScanResult {
    std::vector<ScanRow> rows;
    std::optional<int> first_observable;
    bool monotone = true;               // no loss of observability after the first observable order
    std::vector<bool> per_component;    // at the first observable order, else at k_max
};

inline ScanResult scan_orders(const StructuralModel& model, const SensorConfig& cfg, const VectorXd& z0, int k_max,
                              const OrcOptions& opts = {}) {
    if (k_max < 1) throw ValidationError("scan_orders: k_max must be at least 1");
    ScanResult res;
    std::optional<OrcMatrix> at_first;
    OrcMatrix last;
    const OrcMatrix top = detail::build_orc_unscaled(model, cfg, z0, k_max, opts);
    std::optional<int> rank_h_prev;
    for (int k = 0; k <= k_max; ++k) {
        OrcMatrix orc = top.truncated(k);
        const OrcVerdict v = check_full(orc, opts.rel_tol, rank_h_prev);
        rank_h_prev = v.rank_h;
        res.rows.push_back({k, v.rank_og, v.rank_h, v.observable});
        if (v.observable && !res.first_observable) {
            res.first_observable = k;
            at_first = orc;
        }
        if (res.first_observable && !v.observable) res.monotone = false;
        last = std::move(orc);
    }
    const OrcMatrix& ref = at_first ? *at_first : last;
    for (int m = 0; m < ref.n_cols(); ++m) res.per_component.push_back(check_component(ref, m, opts.rel_tol));
    return res;
}

inline int default_k_max(const StructuralModel& model) { return 2 * StateLayout(model).size(); }

/// First observable orders over random z0 draws and the most frequent outcome (-1 = never).
struct ModalScan {
    std::vector<int> firsts;
    int modal = -1;
    bool disagreement = false;
};

inline VectorXd random_z0(int nz, std::uint64_t seed, int trial) {
    const CounterRng rng(seed, stream_id(StreamPurpose::z0, static_cast<std::uint64_t>(trial)));
    VectorXd z(nz);
    for (int i = 0; i < nz; ++i) z(i) = rng.normal(static_cast<std::uint64_t>(i));
    return z;
}

inline ModalScan modal_first_order(const StructuralModel& model, const SensorConfig& cfg, int k_max, int trials,
                                   std::uint64_t seed, const OrcOptions& opts = {}) {
    if (trials < 1) throw ValidationError("modal_first_order: trials must be positive");
    ModalScan out;
    std::map<int, int> counts;
    for (int t = 0; t < trials; ++t) {
        const VectorXd z0 = random_z0(2 * model.n_dof(), seed, t);
        const OrcMatrix top = detail::build_orc_unscaled(model, cfg, z0, k_max, opts);
        int first = -1;
        std::optional<int> rank_h_prev;
        for (int k = 0; k <= k_max; ++k) {
            const OrcVerdict v = check_full(top.truncated(k), opts.rel_tol, rank_h_prev);
            rank_h_prev = v.rank_h;
            if (v.observable) {
                first = k;
                break;
            }
        }
        out.firsts.push_back(first);
        ++counts[first];
    }
    int best = 0;
    for (const auto& [value, cnt] : counts)
        if (cnt > best) {
            best = cnt;
            out.modal = value;
        }
    out.disagreement = counts.size() > 1;
    return out;
}

}  // namespace bem
