#include "doctest.h"

#include <cmath>
#include <limits>
#include <memory>

#include "roomsbi/diagnostics.hpp"
#include "roomsbi/random.hpp"

using namespace roomsbi;

namespace {

Eigen::VectorXcd random_complex(Eigen::Index n, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::VectorXcd v(n);
    for (auto& z : v) z = {rng.normal(), rng.normal()};
    return v;
}

Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

// theta ~ N(0, I_2), x = theta + N(0, s^2 I): posterior N(x / (1 + s^2), s^2 / (1 + s^2) I).
constexpr double kSigma = 0.5;

PosteriorSampler exact_sampler() {
    return [](const Eigen::VectorXd& x, Eigen::Index n, std::uint64_t seed) {
        const double v = kSigma * kSigma / (1 + kSigma * kSigma);
        Eigen::MatrixXd t = std::sqrt(v) * normal_matrix(2, n, seed);
        t.colwise() += x / (1 + kSigma * kSigma);
        return t;
    };
}

FeatureMap stacked_features() {
    return [](const Eigen::MatrixXd& theta, const Eigen::MatrixXd& x) {
        const Eigen::MatrixXd xs = x.cols() == 1 ? Eigen::MatrixXd(x.replicate(1, theta.cols())) : x;
        Eigen::MatrixXd f(theta.rows() + xs.rows(), theta.cols());
        f << theta, xs;
        return f;
    };
}

} // namespace

TEST_CASE("relative l2 error") {
    const Eigen::VectorXcd ref = random_complex(19, 1);
    CHECK(relative_l2(ref, ref) == 0.0);
    CHECK(relative_l2(1.1 * ref, ref) == doctest::Approx(0.1));
    Eigen::VectorXcd est = ref;
    est[0] *= 2.0;
    CHECK(relative_l2(est, ref) == doctest::Approx(1.0 / 19.0));
    CHECK(relative_l2(Eigen::VectorXcd::Zero(19), ref) == doctest::Approx(1.0));
    const Eigen::VectorXcd err = random_complex(19, 9);
    for (double s : {0.0, 0.5, 3.0})
        CHECK(relative_l2(ref + s * err, ref) == doctest::Approx(s * relative_l2(ref + err, ref)));
    Eigen::VectorXcd zero = ref;
    zero[4] = 0;
    const std::vector<double> freqs = sixth_octave_centres();
    try {
        (void)relative_l2(ref, zero, freqs);
        FAIL("expected DomainError");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("100") != std::string::npos);
    }
    CHECK_THROWS_AS((void)relative_l2(ref.head(3), ref), ValidationError);
}

TEST_CASE("modal assurance criterion") {
    const Eigen::VectorXcd a = random_complex(50, 2);
    CHECK(mac(a, a) == doctest::Approx(1.0));
    CHECK(mac(a, Complex(-2.0, 3.5) * a) == doctest::Approx(1.0));
    Eigen::VectorXcd e0 = Eigen::VectorXcd::Zero(2), e1 = e0;
    e0[0] = 1;
    e1[1] = Complex(0, 1);
    CHECK(mac(e0, e1) == 0.0);
    CHECK(mac(e0, Eigen::Vector2cd(1, 1)) == doctest::Approx(0.5));
    const Eigen::VectorXcd b = random_complex(50, 3);
    CHECK(std::abs(mac(Complex(0.3, -7.0) * a, Complex(-1e3, 2.0) * b) - mac(a, b)) <= 1e-12);
    for (std::uint64_t s = 0; s < 50; ++s) {
        const double m = mac(a, random_complex(50, 100 + s));
        CHECK(m >= 0.0);
        CHECK(m <= 1.0);
    }
    CHECK_THROWS_AS((void)mac(a, Eigen::VectorXcd::Zero(50)), DomainError);
}

TEST_CASE("sound pressure level") {
    CHECK(spl(Complex(1.0, 0.0)) == doctest::Approx(90.96910013008056).epsilon(1e-14));
    CHECK(spl(Complex(0.0, 1.0)) == doctest::Approx(90.96910013008056).epsilon(1e-14));
    CHECK(spl(Complex(10.0, 0.0)) - spl(Complex(1.0, 0.0)) == doctest::Approx(20.0));
    CHECK(std::abs(spl(Complex(std::sqrt(2.0) * 2e-5, 0))) <= 1e-12);
    CHECK(spl(Complex(std::sqrt(2.0) * 2e-4, 0)) == doctest::Approx(20.0));
    CHECK(std::isinf(spl(Complex(0, 0))));
    CHECK(spl(Complex(0, 0)) < 0);
}

TEST_CASE("validation nodes") {
    const RoomSpec room;
    MeshOptions mo;
    mo.f_max = 150;
    const HexMesh mesh = build_mesh(room, mo);
    const auto obs = select_observation_points(room, {.seed = 4});
    const auto all = validation_nodes(mesh, room, obs.points, 1u << 30, 1);
    for (auto i : all) {
        const Vector3 x = mesh.nodes.col(i);
        CHECK((x - room.source_position).norm() >= 0.1);
        for (const auto& p : obs.points) CHECK((x - p).norm() > 1e-9);
    }
    const auto capped = validation_nodes(mesh, room, obs.points, 50, 1);
    CHECK(capped.size() == 50);
    CHECK(std::is_sorted(capped.begin(), capped.end()));
    CHECK(capped == validation_nodes(mesh, room, obs.points, 50, 1));
    CHECK(capped != validation_nodes(mesh, room, obs.points, 50, 2));
}

TEST_CASE("posterior predictive check with a collapsed posterior") {
    const RoomSpec room;
    MeshOptions mo;
    mo.f_max = 150;
    const auto mesh = std::make_shared<const HexMesh>(build_mesh(room, mo));
    const auto obs = select_observation_points(room, {.seed = 4});
    const auto nodes = validation_nodes(*mesh, room, obs.points, 40, 3);
    std::vector<Vector3> pts;
    for (auto i : nodes) pts.push_back(mesh->nodes.col(i));
    const Simulator sim(room, mesh, pts, {63.0, 125.0});
    const ThetaVector theta = ReferenceSet::benchmark().theta();
    const Eigen::MatrixXcd reference = sim.simulate_fields(theta);
    const Eigen::MatrixXd samples = theta.replicate(1, 120);

    PPCOptions opts;
    opts.n_ppc = 100;
    opts.workers = 2;
    const PPCReport r = posterior_predictive_check(samples, sim, reference, opts);
    CHECK(r.n_ppc == 100);
    CHECK(r.n_failed == 0);
    CHECK(r.fraction_inside() == 1.0);
    for (Eigen::Index f = 0; f < 2; ++f) {
        CHECK(r.mac_band.mean[f] == doctest::Approx(1.0));
        CHECK(r.re_band.lower[f] == r.re_band.upper[f]);
        CHECK(r.spl_band.mean[f] == doctest::Approx(r.ref_spl[f]));
    }

    SUBCASE("a wrong reference falls outside") {
        const PPCReport bad = posterior_predictive_check(samples, sim, 3.0 * reference, opts);
        CHECK(bad.fraction_inside() == 0.0);
        CHECK(bad.mac_band.mean[0] == doctest::Approx(1.0));
    }
    SUBCASE("preconditions") {
        PPCOptions few = opts;
        few.n_ppc = 99;
        CHECK_THROWS_AS((void)posterior_predictive_check(samples, sim, reference, few), ValidationError);
        PPCOptions many = opts;
        many.n_ppc = 121;
        CHECK_THROWS_AS((void)posterior_predictive_check(samples, sim, reference, many), ValidationError);
        CHECK_THROWS_AS((void)posterior_predictive_check(samples, sim, reference.leftCols(1), opts), ValidationError);
    }
}

TEST_CASE("classifier") {
    const Eigen::MatrixXd a = normal_matrix(3, 400, 5);
    Eigen::MatrixXd b = normal_matrix(3, 400, 6);
    b.row(0).array() += 4.0;
    Eigen::MatrixXd x(3, 800);
    x << a, b;
    Eigen::VectorXd y(800);
    y << Eigen::VectorXd::Zero(400), Eigen::VectorXd::Ones(400);
    ClassifierConfig cfg;
    cfg.hidden = {16, 16};
    cfg.epochs = 30;

    const Classifier c = Classifier::fit(x, y, cfg, 1);
    const Eigen::VectorXd p = c.predict(x);
    CHECK(((p.array() > 0.5).cast<double>() == y.array()).cast<double>().mean() > 0.95);
    CHECK((p.array() >= 0).all());
    CHECK((p.array() <= 1).all());
    CHECK(Classifier::fit(x, y, cfg, 1).predict(x) == p);

    ClassifierConfig wild = cfg;
    wild.learning_rate = 1e300;
    CHECK_THROWS_AS((void)Classifier::fit(x, y, wild, 1), DiagnosticError);
    CHECK_THROWS_AS((void)Classifier::fit(x, y.head(10), cfg, 1), ValidationError);
    CHECK_THROWS_AS((void)c.predict(x.topRows(2)), ValidationError);
    ClassifierConfig bad = cfg;
    bad.patience = 0;
    CHECK_THROWS_AS((void)Classifier::fit(x, y, bad, 1), ValidationError);
    bad = cfg;
    bad.validation_fraction = 1.0;
    CHECK_THROWS_AS((void)Classifier::fit(x, y, bad, 1), ValidationError);
}

TEST_CASE("classifier early stopping on pure noise") {
    // Labels independent of the features: a held-out split stops training
    // before the network memorises, unlike training to the epoch limit.
    const Eigen::MatrixXd x = normal_matrix(200, 500, 7);
    Eigen::VectorXd y(500);
    Rng rng(8);
    for (auto& v : y) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    const Eigen::MatrixXd fresh = normal_matrix(200, 1000, 9);
    const auto spread = [&](const Classifier& c) { return (c.predict(fresh).array() - 0.5).abs().mean(); };

    ClassifierConfig stopped;
    stopped.epochs = 100;
    ClassifierConfig full = stopped;
    full.validation_fraction = 0;
    const double s_stop = spread(Classifier::fit(x, y, stopped, 3));
    const double s_full = spread(Classifier::fit(x, y, full, 3));
    INFO("early-stopped " << s_stop << ", full " << s_full);
    CHECK(s_stop < 0.1);
    CHECK(s_full > 2 * s_stop);
}

TEST_CASE("local classifier two-sample test") {
    const Eigen::Index n = 1000;
    const Eigen::MatrixXd theta = normal_matrix(2, n, 30);
    const Eigen::MatrixXd x = theta + kSigma * normal_matrix(2, n, 31);
    const std::vector<Eigen::VectorXd> observations{Eigen::Vector2d(0.5, -0.3)};

    LC2STOptions opts;
    opts.n_eval = 2000;
    opts.classifier.hidden = {32, 32};
    opts.classifier.epochs = 20;
    opts.seed = 7;

    const auto exact = lc2st(theta, x, observations, exact_sampler(), stacked_features(), opts);
    REQUIRE(exact.size() == 1);
    const CalibrationReport& r = exact[0];
    CHECK(r.pass);
    CHECK(r.null_statistics.size() == 100);
    CHECK(r.cdf[0] == 0.0);
    CHECK(r.cdf[r.cdf.size() - 1] == 1.0);
    for (Eigen::Index g = 1; g < r.grid.size(); ++g) CHECK(r.cdf[g] >= r.cdf[g - 1]);
    for (Eigen::Index g = 0; g < r.grid.size(); ++g) CHECK(r.null_lower[g] <= r.null_upper[g]);

    const Eigen::Vector2d lo(-3, -3), hi(3, 3);
    const auto shifted = lc2st(theta, x, observations, shifted_sampler(exact_sampler(), lo, hi), stacked_features(), opts);
    const CalibrationReport& s = shifted[0];
    INFO("exact " << r.statistic << " shifted " << s.statistic << " threshold " << s.threshold);
    CHECK_FALSE(s.pass);
    bool exits = false;
    for (Eigen::Index g = 0; g < s.grid.size(); ++g) exits = exits || s.cdf[g] < s.null_lower[g] || s.cdf[g] > s.null_upper[g];
    CHECK(exits);

    CHECK_THROWS_AS((void)lc2st(theta.leftCols(199), x.leftCols(199), observations, exact_sampler(),
                                stacked_features(), opts),
                    ValidationError);
}

TEST_CASE("shifted sampler stays in the box") {
    const Eigen::Vector2d lo(0, 10), hi(1, 20);
    const PosteriorSampler base = [](const Eigen::VectorXd&, Eigen::Index n, std::uint64_t seed) {
        Rng rng(seed);
        Eigen::MatrixXd t(2, n);
        for (Eigen::Index j = 0; j < n; ++j) t.col(j) << rng.uniform(), 10 + 10 * rng.uniform();
        return t;
    };
    const Eigen::MatrixXd s = shifted_sampler(base, lo, hi)(Eigen::VectorXd(), 1000, 3);
    const Eigen::MatrixXd b = base(Eigen::VectorXd(), 1000, 3);
    CHECK((s.row(0).array() > 0).all());
    CHECK((s.row(0).array() < 1).all());
    CHECK((s.row(1).array() > 10).all());
    CHECK((s.row(1).array() < 20).all());
    // Draws below 0.75 of the width move up by exactly a quarter.
    CHECK(s(0, 0) == doctest::Approx(b(0, 0) < 0.75 ? b(0, 0) + 0.25 : 1.75 - b(0, 0)));
}
