// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance --bundle <dir> [--workers N] [--only 1,2,...]
//
// Criteria 4-7 read the bundle produced by run-all on the default config.
// Stages already up to date in <dir> are reused, so a finished bundle makes
// the check cheap.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"

#include "roomsbi/flow.hpp"
#include "roomsbi/helmholtz.hpp"
#include "roomsbi/io.hpp"
#include "roomsbi/pipeline.hpp"
#include "roomsbi/random.hpp"
#include "roomsbi/runner.hpp"

using namespace roomsbi;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Verdict {
    bool pass{false};
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

// --- 1: forward solver -----------------------------------------------------

Verdict forward_solver() {
    const RoomSpec room;
    const auto mats = assemble(std::make_shared<const HexMesh>(build_mesh(room, {})));
    SurfaceImpedances rigid;
    rigid.fill(Complex(1e6, 0));

    Rng rng(21);
    std::vector<Vector3> pts;
    while (pts.size() < 10) {
        const Vector3 x(rng.uniform() * room.Lx, rng.uniform() * room.Ly, rng.uniform() * room.Lz);
        if ((x - room.source_position).norm() > 0.3) pts.push_back(x);
    }
    double worst = 0;
    for (double f : {41.3, 124.0, 218.9}) {
        const auto sol = solve_frequency(mats, room, rigid, f);
        double num = 0, den = 0;
        for (const auto& x : pts) {
            const Complex fem = interpolate(*mats.mesh, sol.pressure, locate_point(*mats.mesh, x));
            const Complex ref = analytic_rigid_box_response_converged(room, x, f, 1e-8);
            num += std::norm(fem - ref);
            den += std::norm(ref);
        }
        worst = std::max(worst, std::sqrt(num / den));
    }

    const auto corner = locate_point(*mats.mesh, Vector3::Zero());
    double best_f = 0, best = 0;
    for (double f = 75.0; f <= 90.0; f += 0.05) {
        const auto sol = solve_frequency(mats, room, rigid, f);
        const double a = std::abs(interpolate(*mats.mesh, sol.pressure, corner));
        if (a > best) best = a, best_f = f;
    }
    const double expected = room.c / (2 * room.Lz);
    const double peak_err = std::abs(best_f - expected) / expected;
    return {worst < 0.02 && peak_err < 0.02,
            "max oracle deviation " + fmt(worst) + " (< 0.02), peak " + fmt(best_f, 6) + " Hz vs " +
                fmt(expected, 6) + " Hz (rel " + fmt(peak_err) + " < 0.02)"};
}

// --- 2: flow unit checks ---------------------------------------------------

Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
    return m;
}

Flow perturbed_flow(int theta_dim, int data_dim, int hidden, int layers, std::uint64_t seed) {
    FlowConfig cfg;
    cfg.theta_dim = theta_dim;
    cfg.data_dim = data_dim;
    cfg.transforms = 2;
    cfg.hidden = hidden;
    cfg.hidden_layers = layers;
    cfg.embedding = true;
    cfg.embedding_hidden = {8};
    cfg.embedding_dim = 3;
    Eigen::VectorXd lo(theta_dim), hi(theta_dim);
    for (int i = 0; i < theta_dim; ++i) lo[i] = -1.0 + 0.25 * i, hi[i] = 1.0 + 0.5 * i;
    Flow f(cfg, ThetaBijection::logit(lo, hi),
           {Eigen::VectorXd::Zero(data_dim), Eigen::VectorXd::Ones(data_dim)}, seed);
    Rng rng(seed + 1);
    for (Eigen::Index i = 0; i < f.num_parameters(); ++i) f.parameters()[i] += 0.3 * rng.normal() * f.parameter_mask()[i];
    return f;
}

Verdict flow_units() {
    const SplineOptions opts;
    Rng rng(3);
    double round_trip = 0;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> raw(static_cast<std::size_t>(opts.raw_size()));
        for (auto& v : raw) v = 1.5 * rng.normal();
        const auto p = make_spline_params<double>(raw, opts);
        for (double x = -6; x <= 6; x += 0.01) {
            const auto [y, ld] = spline_forward(x, p);
            const auto [xr, ldr] = spline_inverse(y, p);
            round_trip = std::max({round_trip, std::abs(xr - x), std::abs(ld + ldr)});
        }
    }

    const Flow g = perturbed_flow(4, 6, 8, 2, 41);
    Eigen::MatrixXd t(4, 8);
    for (Eigen::Index j = 0; j < t.cols(); ++j)
        for (Eigen::Index i = 0; i < 4; ++i)
            t(i, j) = g.bijection().shift[i] + g.bijection().scale[i] * rng.uniform(0.001, 0.999);
    const GradCheckResult gc = grad_check(g, t, normal_matrix(6, 8, 44));

    const Flow f = perturbed_flow(5, 6, 12, 3, 51);
    const Eigen::Index R = f.config().spline.raw_size();
    const Eigen::MatrixXd ctx = normal_matrix(3, 4, 53);
    const Eigen::MatrixXd y = normal_matrix(5, 4, 54);
    bool sparse = true;
    for (int k = 0; k < f.config().transforms; ++k) {
        const Eigen::MatrixXd base = f.conditioner(k, y, ctx);
        for (Eigen::Index j = 0; j < 5; ++j) {
            Eigen::MatrixXd yp = y;
            yp.row(j).array() += 0.7;
            const Eigen::MatrixXd out = f.conditioner(k, yp, ctx);
            for (Eigen::Index d = 0; d < 5; ++d) {
                const bool same = out.middleRows(d * R, R) == base.middleRows(d * R, R);
                if (same != (d <= j)) sparse = false;
            }
        }
    }
    return {round_trip <= 1e-10 && gc.max_error <= 1e-4 && sparse,
            "spline round trip " + fmt(round_trip) + " (<= 1e-10), grad_check " + fmt(gc.max_error) +
                " (<= 1e-4), autoregressive sparsity " + (sparse ? "exact" : "violated")};
}

// --- 3: conjugate Gaussian -------------------------------------------------

Verdict conjugate_toy() {
    const Eigen::Index n = 50000;
    Eigen::Matrix2d s0;
    s0 << 1.0, 0.5, 0.5, 1.0;
    const double sigma = 0.5;
    const Eigen::Matrix2d l0 = s0.llt().matrixL();
    const Eigen::MatrixXd theta = l0 * normal_matrix(2, n, 91);
    const Eigen::MatrixXd x = theta + sigma * normal_matrix(2, n, 92);

    FlowConfig cfg;
    cfg.theta_dim = 2;
    cfg.data_dim = 2;
    cfg.embedding = false;
    cfg.transforms = 3;
    cfg.hidden = 32;
    cfg.hidden_layers = 2;
    TrainConfig tc;
    tc.max_epochs = 50;
    tc.patience = 50;
    tc.seed = 1;
    const TrainResult r =
        train_flow(theta, x, cfg, ThetaBijection::affine(Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(2)), tc);

    const Eigen::Vector2d x_obs(1.0, 0.9);
    const Eigen::Matrix2d post_cov = (s0.inverse() + Eigen::Matrix2d::Identity() / (sigma * sigma)).inverse();
    const Eigen::Vector2d post_mean = post_cov * x_obs / (sigma * sigma);
    const Eigen::MatrixXd s = r.model.sample(x_obs, 50000, 93);
    const Eigen::Vector2d mean = s.rowwise().mean();
    const Eigen::MatrixXd c = s.colwise() - mean;
    const Eigen::Matrix2d cov = c * c.transpose() / static_cast<double>(s.cols() - 1);
    const double em = (mean - post_mean).norm() / post_mean.norm();
    const double ec = (cov - post_cov).norm() / post_cov.norm();
    return {em <= 0.05 && ec <= 0.05, "relative mean error " + fmt(em) + ", covariance error " + fmt(ec) + " (<= 0.05)"};
}

// --- 4-7: benchmark bundle -------------------------------------------------

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw ArtifactError(p.string() + ": missing");
    return json::parse(in);
}

Verdict benchmark(const fs::path& out) {
    const json m = read_json(out / "metrics.json");
    std::string errs;
    bool ok = true;
    for (std::size_t s = 0; s < m["relative_l2"].size(); ++s) {
        const double e = m["relative_l2"][s];
        ok = ok && e <= 0.15;
        errs += (s ? ", " : "") + fmt(e, 3);
    }
    return {ok, "per-surface relative L2 [" + errs + "] (each <= 0.15, N_sim 4000, 26 points, 30 dB)"};
}

Verdict ppc_quality(const fs::path& out) {
    const CsvTable t = read_csv(out / "ppc.csv");
    const double min_mac = t.rows.col(13).minCoeff();
    const double inside = t.rows.col(16).mean();
    return {min_mac >= 0.90 && inside >= 0.8,
            "min mean MAC " + fmt(min_mac) + " (>= 0.90), reference inside HDI at " + fmt(100 * inside, 3) +
                "% of frequencies (>= 80%)"};
}

Verdict calibration(const fs::path& out) {
    const json s = read_json(out / "c2st_summary.json");
    const int n = s["n_observations"];
    const int within = s["flow_within_null"];
    const int exits = s["corrupted_outside_null"];
    return {within >= 2 && exits == n, "flow within null at " + std::to_string(within) + "/" + std::to_string(n) +
                                           " (>= 2), corrupted control outside at " + std::to_string(exits) + "/" +
                                           std::to_string(n) + " (all)"};
}

Verdict study_trends(const fs::path& out) {
    const json s = read_json(out / "study_summary.json");
    std::vector<std::pair<double, double>> snr, nsim;
    for (const auto& r : s["rows"]) {
        if (r["mean_relative_l2"].is_null()) return {false, "study point " + r["axis"].get<std::string>() + "=" +
                                                                fmt(r["value"].get<double>()) + " failed"};
        auto& dst = r["axis"] == "snr_db" ? snr : nsim;
        if (r["axis"] == "snr_db" || r["axis"] == "n_sim") dst.emplace_back(r["value"], r["mean_relative_l2"]);
    }
    std::sort(snr.begin(), snr.end());
    std::sort(nsim.begin(), nsim.end());
    bool mono = snr.size() >= 2;
    std::string snr_txt, nsim_txt;
    for (std::size_t i = 0; i < snr.size(); ++i) {
        if (i && snr[i].second > snr[i - 1].second) mono = false;
        snr_txt += (i ? ", " : "") + fmt(snr[i].first) + " dB: " + fmt(snr[i].second, 3);
    }
    for (std::size_t i = 0; i < nsim.size(); ++i)
        nsim_txt += (i ? ", " : "") + fmt(nsim[i].first) + ": " + fmt(nsim[i].second, 3);
    const bool more_data = nsim.size() >= 2 && nsim.back().second <= nsim.front().second;
    return {mono && more_data, "SNR [" + snr_txt + "] non-increasing " + (mono ? "yes" : "no") + "; N_sim [" +
                                   nsim_txt + "] largest <= smallest " + (more_data ? "yes" : "no")};
}

// --- 8: HDI ----------------------------------------------------------------

Verdict hdi_checks() {
    Rng rng(3);
    std::vector<double> v(1000000);
    for (auto& x : v) x = rng.normal();
    const auto [lo, hi] = hdi(v, 0.9);
    const double dev = std::max(std::abs(lo + 1.6448536269514722), std::abs(hi - 1.6448536269514722));

    Rng r2(11);
    int held = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> w(100 + r2.index(400));
        for (auto& x : w) x = std::exp(r2.normal());
        const double mass = r2.uniform(0.05, 0.95);
        const auto [a, b] = hdi(w, mass);
        const auto inside = std::count_if(w.begin(), w.end(), [&](double x) { return a <= x && x <= b; });
        held += static_cast<double>(inside) >= std::ceil(mass * static_cast<double>(w.size())) - 1e-9;
    }
    return {dev <= 0.02 && held == 100, "Gaussian 90% HDI [" + fmt(lo, 5) + ", " + fmt(hi, 5) + "] (deviation " +
                                            fmt(dev) + " <= 0.02), mass containment " + std::to_string(held) +
                                            "/100"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string bundle = "acceptance_bundle";
    unsigned workers = 1;
    std::vector<int> only;
    app.add_option("--bundle", bundle, "Output directory for the default-config run");
    app.add_option("--workers", workers)->check(CLI::PositiveNumber);
    app.add_option("--only", only, "Criteria to run")->delimiter(',')->check(CLI::Range(1, 8));
    CLI11_PARSE(app, argc, argv);
    const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8}
                                                : std::set<int>(only.begin(), only.end());

    using Clock = std::chrono::steady_clock;
    const auto seconds = [](Clock::time_point a) { return std::chrono::duration<double>(Clock::now() - a).count(); };

    bool bundle_ok = true;
    std::string bundle_note;
    if (selected.count(4) || selected.count(5) || selected.count(6) || selected.count(7)) {
        const auto t0 = Clock::now();
        RunContext ctx;
        ctx.cfg = parse_config_text("");
        ctx.out = bundle;
        ctx.workers = workers;
        ctx.log = [](const std::string& m) { std::cerr << m << '\n'; };
        try {
            std::string ran;
            for (const auto& o : run_all(ctx))
                if (o.ran) ran += std::string(ran.empty() ? "" : ",") + stage_name(o.stage);
            bundle_note = "run-all " + fmt(seconds(t0), 5) + " s, stages run: " + (ran.empty() ? "none" : ran);
        } catch (const std::exception& e) {
            bundle_ok = false;
            bundle_note = std::string("run-all failed: ") + e.what();
        }
        std::cout << "bundle " << bundle << ": " << bundle_note << std::endl;
    }

    struct Criterion {
        int id;
        const char* name;
        double limit_s;  // runtime limit, 0 when the criterion sets none beyond the bundle
        std::function<Verdict()> check;
    };
    const fs::path out = bundle;
    const std::vector<Criterion> criteria = {
        {1, "forward solver", 300, forward_solver},
        {2, "flow units", 120, flow_units},
        {3, "conjugate oracle", 600, conjugate_toy},
        {4, "benchmark", 0, [&] { return benchmark(out); }},
        {5, "ppc quality", 0, [&] { return ppc_quality(out); }},
        {6, "calibration", 0, [&] { return calibration(out); }},
        {7, "study trends", 0, [&] { return study_trends(out); }},
        {8, "hdi", 0, hdi_checks},
    };

    int failed = 0, run = 0;
    for (const auto& c : criteria) {
        if (!selected.count(c.id)) continue;
        ++run;
        const auto t0 = Clock::now();
        Verdict v;
        if (c.id >= 4 && c.id <= 7 && !bundle_ok) {
            v = {false, bundle_note};
        } else {
            try {
                v = c.check();
            } catch (const std::exception& e) {
                v = {false, std::string("error: ") + e.what()};
            }
        }
        const double dt = seconds(t0);
        if (c.limit_s > 0 && dt > c.limit_s) {
            v.pass = false;
            v.detail += "; runtime over " + fmt(c.limit_s) + " s";
        }
        failed += !v.pass;
        std::cout << "criterion " << c.id << " (" << c.name << "): " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail
                  << "  [" << fmt(dt, 4) << " s]" << std::endl;
    }
    std::cout << "acceptance: " << run - failed << "/" << run << " passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
