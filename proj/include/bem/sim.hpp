#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bem/model.hpp"

namespace bem {

/// Counter-based generator: the SplitMix64 finalizer applied to key + (i+1)*golden.
/// Draw i of stream s under seed is a pure function of (seed, s, i).
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream) : key_(mix(mix(seed) ^ (stream * 0xD1B54A32D192ED03ull))) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t bits(std::uint64_t i) const { return mix(key_ + i * 0x9E3779B97F4A7C15ull); }

    /// Uniform on [0, 1).
    double uniform(std::uint64_t i) const { return static_cast<double>(bits(i) >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller on draws 2i and 2i+1.
    double normal(std::uint64_t i) const {
        const double u1 = (static_cast<double>(bits(2 * i) >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(bits(2 * i + 1) >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    std::uint64_t key_;
};

/// Stream identifiers: purpose in the high word, channel in the low word.
enum class StreamPurpose : std::uint64_t { force = 1, noise = 2, z0 = 3, aux = 4 };

inline std::uint64_t stream_id(StreamPurpose p, std::uint64_t channel) {
    return (static_cast<std::uint64_t>(p) << 32) | channel;
}

enum class ChannelKind { strain, disp, vel, acc, input, theta };

inline const char* to_string(ChannelKind k) {
    switch (k) {
        case ChannelKind::strain: return "strain";
        case ChannelKind::disp: return "disp";
        case ChannelKind::vel: return "vel";
        case ChannelKind::acc: return "acc";
        case ChannelKind::input: return "input";
        case ChannelKind::theta: return "theta";
    }
    return "?";
}

inline const char* units(ChannelKind k) {
    switch (k) {
        case ChannelKind::strain: return "1";
        case ChannelKind::disp: return "m";
        case ChannelKind::vel: return "m/s";
        case ChannelKind::acc: return "m/s^2";
        case ChannelKind::input: return "N";
        case ChannelKind::theta: return "";
    }
    return "";
}

struct Channel {
    ChannelKind kind;
    int index;           // zero-based DOF / strain row / input / parameter
    bool truth = false;  // ground truth, never fed to identification

    std::string name() const { return std::string(to_string(kind)) + "_" + std::to_string(index + 1); }
};

/// Uniformly sampled series; row k-1 holds time k*dt.
struct Dataset {
    double dt = 0.0;
    std::vector<Channel> channels;
    MatrixXd values;
    std::uint64_t seed = 0;

    std::size_t n() const { return static_cast<std::size_t>(values.rows()); }

    /// Sensor channels in stored order.
    MatrixXd measurements() const {
        std::vector<Eigen::Index> cols;
        for (std::size_t c = 0; c < channels.size(); ++c)
            if (!channels[c].truth) cols.push_back(static_cast<Eigen::Index>(c));
        MatrixXd out(values.rows(), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = values.col(cols[i]);
        return out;
    }

    /// Column of a channel, or -1.
    Eigen::Index find(ChannelKind kind, int index, bool truth) const {
        for (std::size_t c = 0; c < channels.size(); ++c)
            if (channels[c].kind == kind && channels[c].index == index && channels[c].truth == truth)
                return static_cast<Eigen::Index>(c);
        return -1;
    }

    VectorXd column(ChannelKind kind, int index, bool truth) const {
        const Eigen::Index c = find(kind, index, truth);
        if (c < 0)
            throw ValidationError(std::string("dataset has no ") + (truth ? "truth " : "") + to_string(kind) + "_" +
                                  std::to_string(index + 1) + " channel");
        return values.col(c);
    }
};

enum class ForceKind { gwn, impact, narrowband };

inline const char* to_string(ForceKind k) {
    switch (k) {
        case ForceKind::gwn: return "gwn";
        case ForceKind::impact: return "impact";
        case ForceKind::narrowband: return "narrowband";
    }
    return "?";
}

struct ForceSpec {
    ForceKind kind = ForceKind::gwn;
    int input = 0;           // column of S_p
    double std = 0.0;        // gwn, narrowband
    double t0 = 0.0;         // impact
    double amplitude = 0.0;  // impact peak
    double width = 0.02;     // impact duration
    double f_lo = 0.0;       // narrowband band edges, Hz
    double f_hi = 0.0;
};

struct ThetaChange {
    double t = 0.0;
    int index = 0;
    double value = 0.0;
};

struct Scenario {
    VectorXd theta;  // true parameters at t = 0
    std::vector<ForceSpec> forces;
    std::vector<ThetaChange> schedule;
    double duration = 30.0;
    double noise_percent = 1.0;
    VectorXd z0;     // initial state, zero when empty

    std::size_t steps(double dt) const { return static_cast<std::size_t>(std::llround(duration / dt)); }

    void validate(const StructuralModel& m) const {
        m.check_theta(theta);
        if (!(duration > 0.0)) throw ValidationError("scenario: duration must be positive");
        if (!(noise_percent >= 0.0)) throw ValidationError("scenario: noise percent must be non-negative");
        for (const auto& f : forces) {
            if (f.input < 0 || f.input >= m.n_input())
                throw ValidationError("scenario: force input " + std::to_string(f.input + 1) + " out of range");
            if (f.kind == ForceKind::impact && !(f.width > 0.0))
                throw ValidationError("scenario: impact width must be positive");
            if (f.kind == ForceKind::narrowband && !(f.f_hi > f.f_lo && f.f_lo > 0.0))
                throw ValidationError("scenario: narrowband band must satisfy 0 < f_lo < f_hi");
        }
        for (const auto& c : schedule) {
            if (c.t < 0.0 || c.t > duration) throw ValidationError("scenario: parameter change outside the record");
            if (c.index < 0 || c.index >= m.n_theta())
                throw ValidationError("scenario: parameter change index out of range");
        }
        if (z0.size() != 0 && z0.size() != 2 * m.n_dof()) throw ValidationError("scenario: z0 has wrong length");
    }
};

/// Parameter vector in force at step k.
inline VectorXd theta_at(const Scenario& sc, std::size_t k, double dt) {
    VectorXd th = sc.theta;
    for (const auto& c : sc.schedule)
        if (static_cast<double>(k) >= std::llround(c.t / dt)) th(c.index) = c.value;
    return th;
}

/// Input time histories p_0..p_n as an (n+1) x N_p matrix.
inline MatrixXd generate_inputs(const StructuralModel& m, const Scenario& sc, std::uint64_t seed) {
    const double dt = m.dt();
    const std::size_t n = sc.steps(dt);
    MatrixXd p = MatrixXd::Zero(static_cast<Eigen::Index>(n + 1), m.n_input());
    for (std::size_t fi = 0; fi < sc.forces.size(); ++fi) {
        const ForceSpec& f = sc.forces[fi];
        const CounterRng rng(seed, stream_id(StreamPurpose::force, fi));
        VectorXd col = VectorXd::Zero(static_cast<Eigen::Index>(n + 1));
        switch (f.kind) {
            case ForceKind::gwn:
                for (std::size_t k = 0; k <= n; ++k) col(static_cast<Eigen::Index>(k)) = f.std * rng.normal(k);
                break;
            case ForceKind::impact:
                for (std::size_t k = 0; k <= n; ++k) {
                    const double t = static_cast<double>(k) * dt - f.t0;
                    if (t >= 0.0 && t <= f.width)
                        col(static_cast<Eigen::Index>(k)) = f.amplitude * std::sin(M_PI * t / f.width);
                }
                break;
            case ForceKind::narrowband: {
                // second-order band-pass (bilinear transform), unit peak gain at the geometric centre
                const double fc = std::sqrt(f.f_lo * f.f_hi);
                const double q = fc / (f.f_hi - f.f_lo);
                const double w0 = 2.0 * M_PI * fc * dt;
                const double alpha = std::sin(w0) / (2.0 * q);
                const double a0 = 1.0 + alpha;
                const double b0 = alpha / a0, b2 = -alpha / a0;
                const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
                double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
                for (std::size_t k = 0; k <= n; ++k) {
                    const double x = rng.normal(k);
                    const double y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
                    x2 = x1;
                    x1 = x;
                    y2 = y1;
                    y1 = y;
                    col(static_cast<Eigen::Index>(k)) = y;
                }
                const double sd = std::sqrt(col.array().square().mean());
                if (sd > 0.0) col *= f.std / sd;
                for (std::size_t k = 0; k <= n; ++k)
                    col(static_cast<Eigen::Index>(k)) *= static_cast<double>(k) / static_cast<double>(n);
                break;
            }
        }
        p.col(f.input) += col;
    }
    return p;
}

/// Noise-free propagation z_k = A z_{k-1} + B p_{k-1}; sensor channels per cfg plus truth channels.
inline Dataset simulate(const StructuralModel& m, const SensorConfig& cfg, const Scenario& sc, std::uint64_t seed) {
    cfg.validate(m);
    sc.validate(m);
    const int nd = m.n_dof();
    const double dt = m.dt();
    const std::size_t n = sc.steps(dt);
    const MatrixXd p = generate_inputs(m, sc, seed);

    Dataset ds;
    ds.dt = dt;
    ds.seed = seed;
    for (int i : cfg.strain) ds.channels.push_back({ChannelKind::strain, i, false});
    for (int i : cfg.disp) ds.channels.push_back({ChannelKind::disp, i, false});
    for (int i : cfg.vel) ds.channels.push_back({ChannelKind::vel, i, false});
    for (int i : cfg.acc) ds.channels.push_back({ChannelKind::acc, i, false});
    const auto ns = static_cast<int>(ds.channels.size());
    for (int i = 0; i < nd; ++i) ds.channels.push_back({ChannelKind::disp, i, true});
    for (int i = 0; i < nd; ++i) ds.channels.push_back({ChannelKind::vel, i, true});
    for (int i = 0; i < nd; ++i) ds.channels.push_back({ChannelKind::acc, i, true});
    for (int j = 0; j < m.n_input(); ++j) ds.channels.push_back({ChannelKind::input, j, true});
    for (int s = 0; s < m.n_theta(); ++s) ds.channels.push_back({ChannelKind::theta, s, true});
    ds.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(ds.channels.size()));

    const MatrixXd s_eps = SensorConfig::selection(cfg.strain, m.n_strain()) * m.strain_map();
    VectorXd z = sc.z0.size() ? sc.z0 : VectorXd::Zero(2 * nd);
    VectorXd th_prev = theta_at(sc, 0, dt);
    ContinuousSS cs = continuous_ss(m, th_prev);
    DiscreteSS d = discretize(cs.a_c, cs.b_c, dt);
    auto check_stable = [&](const VectorXd& th) {
        if (spectral_radius(d.a) > 1.0 + 1e-9)
            throw NumericalError("simulate: unstable parameter set (spectral radius of A exceeds 1)");
        (void)th;
    };
    check_stable(th_prev);

    for (std::size_t k = 1; k <= n; ++k) {
        z = d.a * z + d.b * p.row(static_cast<Eigen::Index>(k - 1)).transpose();
        const VectorXd th = theta_at(sc, k, dt);
        if (th != th_prev) {
            cs = continuous_ss(m, th);
            d = discretize(cs.a_c, cs.b_c, dt);
            check_stable(th);
            th_prev = th;
        }
        const VectorXd pk = p.row(static_cast<Eigen::Index>(k)).transpose();
        const VectorXd acc = cs.a_c.bottomRows(nd) * z + m.minv_sp() * pk;
        auto row = ds.values.row(static_cast<Eigen::Index>(k - 1));
        int c = 0;
        if (!cfg.strain.empty()) {
            const VectorXd e = s_eps * z.head(nd);
            for (Eigen::Index i = 0; i < e.size(); ++i) row(c++) = e(i);
        }
        for (int i : cfg.disp) row(c++) = z(i);
        for (int i : cfg.vel) row(c++) = z(nd + i);
        for (int i : cfg.acc) row(c++) = acc(i);
        for (int i = 0; i < 2 * nd; ++i) row(ns + i) = z(i);
        for (int i = 0; i < nd; ++i) row(ns + 2 * nd + i) = acc(i);
        for (int j = 0; j < m.n_input(); ++j) row(ns + 3 * nd + j) = pk(j);
        for (int s = 0; s < m.n_theta(); ++s) row(ns + 3 * nd + m.n_input() + s) = th(s);
        if (!row.allFinite()) throw NumericalError("simulate: non-finite response at step " + std::to_string(k));
    }
    return ds;
}

/// Adds white noise with std = percent/100 * RMS to each sensor channel.
inline Dataset add_noise(const Dataset& ds, double percent, std::uint64_t seed) {
    if (!(percent >= 0.0)) throw ValidationError("add_noise: percent must be non-negative");
    Dataset out = ds;
    if (percent == 0.0) return out;
    for (std::size_t c = 0; c < ds.channels.size(); ++c) {
        if (ds.channels[c].truth) continue;
        const auto col = static_cast<Eigen::Index>(c);
        const double rms = std::sqrt(ds.values.col(col).array().square().mean());
        const double sd = percent / 100.0 * rms;
        const CounterRng rng(seed, stream_id(StreamPurpose::noise, c));
        for (Eigen::Index k = 0; k < ds.values.rows(); ++k)
            out.values(k, col) += sd * rng.normal(static_cast<std::uint64_t>(k));
    }
    return out;
}

/// A model, its sensors, the generating scenario and the noisy record.
struct Benchmark {
    StructuralModel model;
    SensorConfig cfg;
    Scenario scenario;
    Dataset data;
    VectorXd theta0;  // starting guess for identification
};

enum class Case8 { I, II, II_nb };

inline StructuralModel make_chain_model(const VectorXd& masses, const std::vector<int>& force_dofs, double dt,
                                        const VectorXd& theta_nominal) {
    const auto nd = static_cast<int>(masses.size());
    ModelParts p;
    p.mass = masses.asDiagonal();
    p.k_sub = chain_substructures(nd);
    p.c_sub = chain_substructures(nd);
    p.s_p = MatrixXd::Zero(nd, static_cast<Eigen::Index>(force_dofs.size()));
    for (std::size_t j = 0; j < force_dofs.size(); ++j) p.s_p(force_dofs[j], static_cast<Eigen::Index>(j)) = 1.0;
    p.dt = dt;
    p.theta_nominal = theta_nominal;
    return StructuralModel(std::move(p));
}

/// 8-DOF spring-mass chain, m = 1 kg, k = 1000 N/m, c = 1 N s/m, sampled at 1 kHz.
inline Benchmark benchmark_8dof(Case8 c, char config, bool damage, std::uint64_t seed, double duration = 30.0,
                                double noise_percent = 1.0) {
    if (config != 'a' && config != 'b') throw ValidationError("benchmark_8dof: config must be 'a' or 'b'");
    const int nd = 8;
    VectorXd nominal(2 * nd);
    nominal << VectorXd::Constant(nd, 1000.0), VectorXd::Constant(nd, 1.0);
    std::vector<int> force_dofs = {0};
    if (c != Case8::I) force_dofs.push_back(3);

    Benchmark b;
    b.model = make_chain_model(VectorXd::Ones(nd), force_dofs, 1e-3, nominal);
    b.cfg.acc = {0, 3, 7};
    if (config == 'a')
        b.cfg.disp = {0, 3};
    else
        b.cfg.n_pseudo = static_cast<int>(force_dofs.size());

    b.scenario.theta = nominal;
    b.scenario.duration = duration;
    b.scenario.noise_percent = noise_percent;
    if (c == Case8::II_nb) {
        const VectorXd f = natural_frequencies_hz(b.model, nominal);
        ForceSpec nb;
        nb.kind = ForceKind::narrowband;
        nb.input = 0;
        nb.std = 5.0;
        nb.f_lo = f(1);
        nb.f_hi = f(2);
        b.scenario.forces.push_back(nb);
    } else {
        ForceSpec g;
        g.kind = ForceKind::gwn;
        g.input = 0;
        g.std = 5.0;
        b.scenario.forces.push_back(g);
    }
    if (c != Case8::I) {
        ForceSpec imp;
        imp.kind = ForceKind::impact;
        imp.input = 1;
        imp.t0 = c == Case8::II ? 15.0 : 20.0;
        imp.amplitude = 20.0;
        imp.width = 0.02;
        b.scenario.forces.push_back(imp);
    }
    if (damage) b.scenario.schedule.push_back({15.0, 5, 750.0});

    b.theta0.resize(2 * nd);
    b.theta0 << VectorXd::Constant(nd, 900.0), VectorXd::Constant(nd, 1.1);
    b.data = add_noise(simulate(b.model, b.cfg, b.scenario, seed), noise_percent, seed);
    return b;
}

/// Nominal storey stiffnesses and damping ratios of the synthetic shear frame.
inline VectorXd shear_frame_nominal() {
    VectorXd th(6);
    th << 1.0e4, 1.0e4, 1.0e4, 0.02, 0.02, 0.02;
    return th;
}

/// 3-DOF shear frame with modal damping and base excitation S_p = -M 1.
inline StructuralModel shear_frame_model(double dt = 0.005) {
    const VectorXd th = shear_frame_nominal();
    ModelParts p;
    VectorXd m(3);
    m << 5.63, 6.03, 4.66;
    p.mass = m.asDiagonal();
    p.k_sub = chain_substructures(3);
    MatrixXd k_nom = MatrixXd::Zero(3, 3);
    for (int s = 0; s < 3; ++s) k_nom += th(s) * p.k_sub[static_cast<std::size_t>(s)];
    p.c_sub = modal_damping_substructures(p.mass, k_nom);
    p.s_p = -(p.mass * VectorXd::Ones(3));
    p.dt = dt;
    p.theta_nominal = th;
    return StructuralModel(std::move(p));
}

/// Synthetic stand-in for the laboratory record: white ground acceleration, 75 s at 200 Hz.
inline Benchmark benchmark_shear_frame(std::uint64_t seed, bool pseudo = true, double duration = 75.0,
                                       double noise_percent = 1.0) {
    Benchmark b;
    b.model = shear_frame_model();
    b.cfg.acc = {1, 2};
    b.cfg.n_pseudo = pseudo ? 1 : 0;
    b.scenario.theta = shear_frame_nominal();
    b.scenario.duration = duration;
    b.scenario.noise_percent = noise_percent;
    ForceSpec g;
    g.kind = ForceKind::gwn;
    g.input = 0;
    g.std = 1.0;
    b.scenario.forces.push_back(g);
    b.theta0 = 0.9 * shear_frame_nominal();
    b.data = add_noise(simulate(b.model, b.cfg, b.scenario, seed), noise_percent, seed);
    return b;
}

}  // namespace bem
