#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cli.hpp"

namespace bem::cli {

void write_text_atomic(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + tmp.string());
        out << text;
        out.flush();
        if (!out) throw ValidationError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

void write_json_atomic(const fs::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

namespace {

void append_number(std::string& s, double v) {
    char buf[32];
    const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
    s.append(buf, static_cast<std::size_t>(n));
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_csv(const Table& t) {
    std::string s;
    for (std::size_t c = 0; c < t.header.size(); ++c) {
        if (c) s += ',';
        s += t.header[c];
    }
    s += '\n';
    s.reserve(s.size() + static_cast<std::size_t>(t.values.size()) * 24);
    for (Eigen::Index r = 0; r < t.values.rows(); ++r) {
        for (Eigen::Index c = 0; c < t.values.cols(); ++c) {
            if (c) s += ',';
            append_number(s, t.values(r, c));
        }
        s += '\n';
    }
    return s;
}

Table read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open data file " + path.string());
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw ValidationError(path.string() + ": empty file");
    for (auto& h : split(line, ',')) t.header.push_back(trim(h));
    const std::size_t nc = t.header.size();
    std::vector<double> vals;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != nc)
            throw ValidationError(path.string() + ": line " + std::to_string(rows + 2) + " has " +
                                  std::to_string(cells.size()) + " fields, expected " + std::to_string(nc));
        for (const auto& cell : cells) {
            const std::string c = trim(cell);
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
            if (ec != std::errc() || ptr != c.data() + c.size())
                throw ValidationError(path.string() + ": line " + std::to_string(rows + 2) + ": bad number '" + c +
                                      "'");
            vals.push_back(v);
        }
        ++rows;
    }
    t.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(nc));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < nc; ++c)
            t.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = vals[r * nc + c];
    return t;
}

MatrixXd select_measurements(const Table& t, const SensorConfig& cfg, double dt, const std::string& where) {
    if (t.header.empty() || t.header[0] != "time") throw ValidationError(where + ": first column must be 'time'");
    if (t.values.rows() == 0) throw ValidationError(where + ": no samples");
    if (t.values.rows() >= 2) {
        const double step = t.values(1, 0) - t.values(0, 0);
        if (std::abs(step - dt) > 1e-6 * dt)
            throw ValidationError(where + ": sampling interval " + std::to_string(step) + " differs from model dt " +
                                  std::to_string(dt));
    }
    std::vector<std::string> names;
    for (int i : cfg.strain) names.push_back("strain_" + std::to_string(i + 1));
    for (int i : cfg.disp) names.push_back("disp_" + std::to_string(i + 1));
    for (int i : cfg.vel) names.push_back("vel_" + std::to_string(i + 1));
    for (int i : cfg.acc) names.push_back("acc_" + std::to_string(i + 1));
    MatrixXd out(t.values.rows(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto it = std::find(t.header.begin(), t.header.end(), names[i]);
        if (it == t.header.end()) throw ValidationError(where + ": missing column '" + names[i] + "'");
        out.col(static_cast<Eigen::Index>(i)) = t.values.col(it - t.header.begin());
    }
    if (!out.allFinite()) throw ValidationError(where + ": non-finite measurement");
    return out;
}

std::vector<VirtualChannel> parse_channels(const std::string& spec) {
    std::vector<VirtualChannel> out;
    for (const auto& raw : split(spec, ',')) {
        const std::string item = trim(raw);
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ValidationError("--channels: expected kind:index, got '" + item + "'");
        const std::string kind = item.substr(0, colon);
        const std::string idx = item.substr(colon + 1);
        VirtualChannel ch{};
        if (kind == "disp")
            ch.kind = VirtualKind::disp;
        else if (kind == "vel")
            ch.kind = VirtualKind::vel;
        else if (kind == "acc")
            ch.kind = VirtualKind::acc;
        else if (kind == "strain")
            ch.kind = VirtualKind::strain;
        else if (kind == "stress")
            ch.kind = VirtualKind::stress;
        else
            throw ValidationError("--channels: unknown kind '" + kind + "'");
        int i = 0;
        const auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), i);
        if (ec != std::errc() || ptr != idx.data() + idx.size() || i < 1)
            throw ValidationError("--channels: bad 1-based index '" + idx + "'");
        ch.index = i - 1;
        out.push_back(ch);
    }
    if (out.empty()) throw ValidationError("--channels: no channels given");
    return out;
}

std::string channel_label(const VirtualChannel& ch) {
    return std::string(to_string(ch.kind)) + "_" + std::to_string(ch.index + 1);
}

json hyper_to_json(const HyperParams& phi, const SensorConfig& cfg) {
    const StateLayout& L = phi.layout;
    json j;
    j["layout"] = {{"n_dof", L.nd}, {"n_theta", L.ntheta}, {"n_input", L.np}, {"n_meas", phi.n_meas},
                   {"n_pseudo", phi.n_pseudo}};
    json names = json::array();
    for (int i : cfg.strain) names.push_back("strain_" + std::to_string(i + 1));
    for (int i : cfg.disp) names.push_back("disp_" + std::to_string(i + 1));
    for (int i : cfg.vel) names.push_back("vel_" + std::to_string(i + 1));
    for (int i : cfg.acc) names.push_back("acc_" + std::to_string(i + 1));
    for (int i = 0; i < cfg.n_pseudo; ++i) names.push_back("pseudo_" + std::to_string(i + 1));
    j["observation_labels"] = names;
    j["mu0"] = vector_to_json(phi.mu0);
    j["P0"] = matrix_to_json(phi.p0);
    j["Q_a"] = matrix_to_json(phi.q_a);
    j["R_a"] = matrix_to_json(phi.r_a);
    json blocks;
    blocks["Q_z"] = matrix_to_json(phi.q_a.block(0, 0, L.nz(), L.nz()));
    if (L.ntheta) blocks["Q_theta"] = matrix_to_json(phi.q_a.block(L.theta0(), L.theta0(), L.ntheta, L.ntheta));
    if (L.np) blocks["Q_p"] = matrix_to_json(phi.q_a.block(L.p0(), L.p0(), L.np, L.np));
    blocks["R"] = matrix_to_json(phi.r_a.topLeftCorner(phi.n_meas, phi.n_meas));
    if (phi.n_pseudo)
        blocks["R_pd"] = matrix_to_json(phi.r_a.bottomRightCorner(phi.n_pseudo, phi.n_pseudo));
    j["blocks"] = blocks;
    return j;
}

HyperParams hyper_from_json(const json& j, const HyperParams& like, const std::string& where) {
    HyperParams phi = like;
    for (const char* k : {"mu0", "P0", "Q_a", "R_a"})
        if (!j.contains(k)) throw ValidationError(where + ": missing '" + k + "'");
    phi.mu0 = vector_from_json(j["mu0"], where + ".mu0");
    phi.p0 = matrix_from_json(j["P0"], where + ".P0");
    phi.q_a = matrix_from_json(j["Q_a"], where + ".Q_a");
    phi.r_a = matrix_from_json(j["R_a"], where + ".R_a");
    try {
        phi.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(where + ": " + e.what());
    }
    return phi;
}

}  // namespace bem::cli
