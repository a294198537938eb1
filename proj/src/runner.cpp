#include "roomsbi/runner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "roomsbi/errors.hpp"
#include "roomsbi/io.hpp"
#include "roomsbi/parallel.hpp"
#include "roomsbi/random.hpp"

namespace roomsbi {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kManifestFormat = "roomsbi-manifest";

std::string surface_file(int k) { return "impedance_surface_" + std::to_string(k + 1) + ".csv"; }

json pick(const json& j, std::initializer_list<const char*> keys) {
    json out = json::object();
    for (const char* k : keys) out[k] = j.at(k);
    return out;
}

std::string digest(const json& j) { return sha256_string(j.dump()); }

void say(const RunContext& ctx, const std::string& msg) {
    if (ctx.log) ctx.log(msg);
}

[[noreturn]] void rethrow_prefixed(const Error& e, const std::string& prefix) {
    const std::string msg = prefix + e.what();
    const std::string cat = e.category();
    if (cat == "domain") throw DomainError(msg);
    if (cat == "validation") throw ValidationError(msg);
    if (cat == "resource") throw ResourceError(msg);
    if (cat == "infeasible") throw InfeasibleError(msg);
    if (cat == "solver") throw SolverError(msg);
    if (cat == "support") throw SupportError(msg);
    if (cat == "training") throw TrainingError(msg);
    if (cat == "artifact") throw ArtifactError(msg);
    if (cat == "diagnostic") throw DiagnosticError(msg);
    throw Error(msg);
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

std::shared_ptr<const HexMesh> training_mesh(const RunConfig& cfg) {
    return std::make_shared<const HexMesh>(build_mesh(cfg.room, cfg.mesh));
}

std::shared_ptr<const HexMesh> fine_mesh(const RunConfig& cfg) {
    MeshOptions m = cfg.mesh;
    m.refinement = cfg.observation_refinement;
    return std::make_shared<const HexMesh>(build_mesh(cfg.room, m));
}

ObservationOptions observation_options(const RunConfig& cfg, std::size_t n) {
    ObservationOptions o = cfg.observation;
    o.n = n;
    o.seed = cfg.seeds.observation_points;
    return o;
}

TrainConfig train_config(const RunConfig& cfg, std::size_t n_records, bool shrink_batch, const RunContext& ctx) {
    TrainConfig tc = cfg.training;
    tc.seed = cfg.seeds.training;
    // Small study datasets cannot hold 10 batches of the configured size.
    const int cap = static_cast<int>(n_records / 10);
    if (shrink_batch && tc.batch_size > cap) {
        say(ctx, "  batch size reduced from " + std::to_string(tc.batch_size) + " to " + std::to_string(cap) +
                     " for " + std::to_string(n_records) + " records");
        tc.batch_size = std::max(1, cap);
    }
    return tc;
}

FlowConfig flow_config(const RunConfig& cfg, Eigen::Index data_dim) {
    FlowConfig fc = cfg.flow;
    fc.theta_dim = kThetaDim;
    fc.data_dim = static_cast<int>(data_dim);
    return fc;
}

Flow train_model(const RunConfig& cfg, const TrainingDataset& ds, bool shrink_batch, const RunContext& ctx,
                 std::vector<EpochLog>* log = nullptr, int* best_epoch = nullptr) {
    const Eigen::MatrixXd x = noisy_training_data(ds, cfg.snr_db, cfg.seeds.training_noise);
    const TrainConfig tc = train_config(cfg, static_cast<std::size_t>(ds.size()), shrink_batch, ctx);
    TrainResult r = train_flow(ds.theta, x, flow_config(cfg, x.rows()), prior_bijection(cfg.prior), tc,
                               [&](const EpochLog& e) {
                                   if (e.epoch % 10 == 0)
                                       say(ctx, "  epoch " + std::to_string(e.epoch) +
                                                    ": train " + format_double(e.train_loss) +
                                                    ", validation " + format_double(e.validation_loss));
                               });
    if (log) *log = r.log;
    if (best_epoch) *best_epoch = r.best_epoch;
    return std::move(r.model);
}

/// Reference observation (clean and noisy) in ObservationVector order.
struct ReferenceObservation {
    ObservationVector clean, noisy;
};

ReferenceObservation reference_observation(const RunConfig& cfg, const std::vector<Vector3>& points, double snr_db) {
    const Simulator sim(cfg.room, fine_mesh(cfg), points, cfg.freqs);
    ReferenceObservation r;
    r.clean = sim.simulate(cfg.reference.theta());
    r.noisy = add_noise(r.clean, snr_db, cfg.seeds.observation_noise);
    return r;
}

void write_reference_csv(const fs::path& path, const ReferenceObservation& r) {
    const std::size_t np = r.clean.n_points, nf = r.clean.freqs.size();
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(np * nf), 6);
    Eigen::Index k = 0;
    for (std::size_t f = 0; f < nf; ++f)
        for (std::size_t j = 0; j < np; ++j, ++k) {
            const Complex c = r.clean.at(f, j), n = r.noisy.at(f, j);
            rows.row(k) << r.clean.freqs[f], static_cast<double>(j), c.real(), c.imag(), n.real(), n.imag();
        }
    write_csv(path, {"frequency_hz", "point", "re_clean", "im_clean", "re_noisy", "im_noisy"}, rows);
}

ObservationVector read_reference_clean(const fs::path& path, const std::vector<double>& freqs, std::size_t np) {
    const CsvTable t = read_csv(path);
    if (t.rows.rows() != static_cast<Eigen::Index>(np * freqs.size()) || t.rows.cols() != 6)
        throw ArtifactError(path.string() + ": unexpected shape");
    ObservationVector v;
    v.freqs = freqs;
    v.n_points = np;
    v.values.resize(2 * t.rows.rows());
    for (Eigen::Index k = 0; k < t.rows.rows(); ++k) {
        v.values[2 * k] = t.rows(k, 2);
        v.values[2 * k + 1] = t.rows(k, 3);
    }
    return v;
}

std::array<double, kNumSurfaces> surface_errors(const PosteriorEnsemble& e, const ReferenceSet& ref) {
    std::array<double, kNumSurfaces> out{};
    for (int s = 0; s < kNumSurfaces; ++s) {
        Eigen::VectorXcd z(static_cast<Eigen::Index>(e.freqs.size()));
        for (std::size_t f = 0; f < e.freqs.size(); ++f)
            z[static_cast<Eigen::Index>(f)] = eval_impedance(ref.surfaces[static_cast<std::size_t>(s)], e.freqs[f]);
        out[static_cast<std::size_t>(s)] = relative_l2(e.mean_impedance(s), z, e.freqs);
    }
    return out;
}

double mean_band_width(const PosteriorEnsemble& e) {
    double total = 0;
    std::size_t n = 0;
    for (const auto& b : e.bands)
        for (const BandStats* c : {&b.re, &b.im}) {
            total += (c->upper - c->lower).sum();
            n += static_cast<std::size_t>(c->upper.size());
        }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Stages

void do_generate(const RunContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const auto obs = select_observation_points(cfg.room, observation_options(cfg, cfg.observation.n));
    write_points_csv(ctx.out / "observation_points.csv", obs.points);
    const auto mesh = training_mesh(cfg);
    say(ctx, "  training mesh: " + std::to_string(mesh->num_nodes()) + " nodes");
    const Simulator sim(cfg.room, mesh, obs.points, cfg.freqs);
    GenerationOptions g;
    g.n_sim = cfg.n_sim;
    g.seed = cfg.seeds.dataset;
    g.workers = ctx.workers;
    g.max_skip_fraction = cfg.max_skip_fraction;
    g.mesh = cfg.mesh;
    const std::size_t step = std::max<std::size_t>(1, cfg.n_sim / 20);
    g.progress = [&](std::size_t done, std::size_t total) {
        if (done % step == 0 || done == total)
            say(ctx, "  simulated " + std::to_string(done) + "/" + std::to_string(total));
    };
    const TrainingDataset ds = generate_training_set(sim, cfg.prior, g);
    for (const auto& s : ds.skipped) say(ctx, "  skipped record " + std::to_string(s.index) + ": " + s.reason);
    ds.save(ctx.out / "dataset.bin");
}

void do_train(const RunContext& ctx) {
    const TrainingDataset ds = TrainingDataset::load(ctx.out / "dataset.bin");
    std::vector<EpochLog> log;
    int best = 0;
    const Flow model = train_model(ctx.cfg, ds, false, ctx, &log, &best);
    model.save(ctx.out / "model.flow");
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(log.size()), 3);
    for (std::size_t i = 0; i < log.size(); ++i)
        rows.row(static_cast<Eigen::Index>(i)) << log[i].epoch, log[i].train_loss, log[i].validation_loss;
    write_csv(ctx.out / "training_log.csv", {"epoch", "train_loss", "validation_loss"}, rows);
    say(ctx, "  best epoch " + std::to_string(best) + " of " + std::to_string(log.size()));
}

void do_infer(const RunContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const auto points = read_points_csv(ctx.out / "observation_points.csv");
    const ReferenceObservation ref = reference_observation(cfg, points, cfg.snr_db);
    write_reference_csv(ctx.out / "reference_observation.csv", ref);
    const Flow model = Flow::load(ctx.out / "model.flow");
    const PosteriorEnsemble e =
        infer_posterior(model, ref.noisy.values, cfg.n_samples, cfg.seeds.posterior, cfg.freqs, cfg.hdi_mass,
                        ctx.workers);
    write_posterior_samples_csv(ctx.out / "posterior_samples.csv", e.samples);
    for (int s = 0; s < kNumSurfaces; ++s)
        write_band_csv(ctx.out / surface_file(s), cfg.freqs, e.bands[static_cast<std::size_t>(s)]);
}

void do_ppc(const RunContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const auto& d = cfg.diagnostics;
    const auto points = read_points_csv(ctx.out / "observation_points.csv");
    const Eigen::MatrixXd samples = read_posterior_samples_csv(ctx.out / "posterior_samples.csv");
    const auto mesh = training_mesh(cfg);
    const auto nodes =
        validation_nodes(*mesh, cfg.room, points, d.validation_cap, cfg.seeds.validation_nodes, d.validation_exclusion);
    std::vector<Vector3> vpts;
    for (auto i : nodes) vpts.push_back(mesh->nodes.col(i));
    write_points_csv(ctx.out / "validation_points.csv", vpts);
    say(ctx, "  " + std::to_string(vpts.size()) + " validation points");

    const Simulator predictive(cfg.room, mesh, vpts, cfg.freqs);
    const Eigen::MatrixXcd reference =
        Simulator(cfg.room, fine_mesh(cfg), vpts, cfg.freqs).simulate_fields(cfg.reference.theta());
    PPCOptions o;
    o.n_ppc = d.n_ppc;
    o.seed = cfg.seeds.ppc;
    o.mass = cfg.hdi_mass;
    o.workers = ctx.workers;
    const PPCReport r = posterior_predictive_check(samples, predictive, reference, o);
    r.write_csv(ctx.out / "ppc.csv");

    double min_mac = 1;
    for (Eigen::Index f = 0; f < r.mac_band.mean.size(); ++f) min_mac = std::min(min_mac, r.mac_band.mean[f]);
    write_json(ctx.out / "ppc_summary.json",
               {{"n_ppc", r.n_ppc},
                {"n_failed", r.n_failed},
                {"n_validation_points", vpts.size()},
                {"hdi_mass", r.mass},
                {"averaging",
                 "per draw and frequency: Re and Im are means over validation points; SPL is the level of the "
                 "point-mean of |p| (peak amplitude, RMS = |p|/sqrt 2, re 20 uPa); HDIs and means are then taken "
                 "over draws. The reference field (fine mesh, reference parameters) is reduced the same way."},
                {"fraction_reference_inside", r.fraction_inside()},
                {"min_mean_mac", min_mac}});
}

/// Prior draws simulated on the training mesh with measurement noise.
void simulate_prior_pairs(const Simulator& sim, const RunConfig& cfg, std::size_t n, std::uint64_t seed,
                          unsigned workers, Eigen::MatrixXd& theta, Eigen::MatrixXd& x) {
    theta.resize(kThetaDim, static_cast<Eigen::Index>(n));
    x.resize(static_cast<Eigen::Index>(sim.output_size()), static_cast<Eigen::Index>(n));
    parallel_for(n, workers, [&](std::size_t i) {
        const auto k = static_cast<Eigen::Index>(i);
        theta.col(k) = sample_prior(cfg.prior, mix_seed(seed, i));
        x.col(k) = add_noise(sim.simulate(theta.col(k)), cfg.snr_db, mix_seed(mix_seed(seed, i), 1)).values;
    });
}

json calibration_json(const std::vector<CalibrationReport>& reports) {
    json arr = json::array();
    for (const auto& r : reports)
        arr.push_back({{"statistic", r.statistic}, {"threshold", r.threshold}, {"within_null", r.pass}});
    return arr;
}

void do_c2st(const RunContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const auto& d = cfg.diagnostics;
    const auto points = read_points_csv(ctx.out / "observation_points.csv");
    const Flow model = Flow::load(ctx.out / "model.flow");
    const Simulator sim(cfg.room, training_mesh(cfg), points, cfg.freqs);

    Eigen::MatrixXd cal_theta, cal_x, val_theta, val_x;
    say(ctx, "  simulating " + std::to_string(d.n_cal) + " calibration pairs");
    simulate_prior_pairs(sim, cfg, d.n_cal, cfg.seeds.calibration, ctx.workers, cal_theta, cal_x);
    simulate_prior_pairs(sim, cfg, d.n_observations, mix_seed(cfg.seeds.calibration, 1), ctx.workers, val_theta,
                         val_x);
    std::vector<Eigen::VectorXd> observations;
    for (Eigen::Index o = 0; o < val_x.cols(); ++o) observations.emplace_back(val_x.col(o));

    LC2STOptions o;
    o.n_null = d.n_null;
    o.n_eval = d.n_eval;
    o.level = d.level;
    o.classifier = d.classifier;
    o.seed = cfg.seeds.lc2st;
    o.workers = ctx.workers;
    say(ctx, "  training classifiers for the flow");
    const auto flow = lc2st(cal_theta, cal_x, observations, flow_sampler(model), flow_features(model), o);
    say(ctx, "  training classifiers for the corrupted control");
    const auto corrupted = lc2st(cal_theta, cal_x, observations,
                                 shifted_sampler(flow_sampler(model), cfg.prior.lower, cfg.prior.upper,
                                                 d.corruption_fraction),
                                 flow_features(model), o);
    write_calibration_csv(ctx.out / "c2st_flow.csv", flow);
    write_calibration_csv(ctx.out / "c2st_corrupted.csv", corrupted);

    std::size_t within = 0, exits = 0;
    for (const auto& r : flow) within += r.pass;
    for (const auto& r : corrupted) exits += !r.pass;
    json val = json::array();
    for (Eigen::Index k = 0; k < val_theta.cols(); ++k)
        val.push_back(std::vector<double>(val_theta.col(k).data(), val_theta.col(k).data() + kThetaDim));
    write_json(ctx.out / "c2st_summary.json",
               {{"statistic", "mean |d - 0.5| over classifier outputs d on posterior draws at the observation"},
                {"null_level", d.level},
                {"n_null", d.n_null},
                {"n_cal", d.n_cal},
                {"validation_theta", val},
                {"flow", calibration_json(flow)},
                {"corrupted", calibration_json(corrupted)},
                {"flow_within_null", within},
                {"corrupted_outside_null", exits},
                {"n_observations", flow.size()}});
}

void do_metrics(const RunContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    Eigen::MatrixXd eps(kNumSurfaces, 2);
    json errors = json::array();
    for (int s = 0; s < kNumSurfaces; ++s) {
        const CsvTable t = read_csv(ctx.out / surface_file(s));
        if (t.rows.cols() != 7) throw ArtifactError(surface_file(s) + ": unexpected columns");
        Eigen::VectorXcd est(t.rows.rows()), ref(t.rows.rows());
        std::vector<double> freqs(static_cast<std::size_t>(t.rows.rows()));
        for (Eigen::Index f = 0; f < t.rows.rows(); ++f) {
            freqs[static_cast<std::size_t>(f)] = t.rows(f, 0);
            est[f] = {t.rows(f, 1), t.rows(f, 4)};
            ref[f] = eval_impedance(cfg.reference.surfaces[static_cast<std::size_t>(s)], t.rows(f, 0));
        }
        eps.row(s) << s + 1, relative_l2(est, ref, freqs);
        errors.push_back(eps(s, 1));
    }
    write_csv(ctx.out / "metrics_surfaces.csv", {"surface", "relative_l2"}, eps);

    const CsvTable ppc = read_csv(ctx.out / "ppc.csv");
    if (ppc.rows.cols() != 17) throw ArtifactError("ppc.csv: unexpected columns");
    Eigen::MatrixXd mac_rows(ppc.rows.rows(), 4);
    mac_rows << ppc.rows.col(0), ppc.rows.col(13), ppc.rows.col(14), ppc.rows.col(15);
    write_csv(ctx.out / "metrics_mac.csv", {"frequency_hz", "mac_mean", "mac_hdi_lo", "mac_hdi_hi"}, mac_rows);
    write_json(ctx.out / "metrics.json", {{"relative_l2", errors},
                                          {"mean_relative_l2", eps.col(1).mean()},
                                          {"max_relative_l2", eps.col(1).maxCoeff()},
                                          {"min_mean_mac", ppc.rows.col(13).minCoeff()},
                                          {"fraction_reference_inside", ppc.rows.col(16).mean()}});
}

struct StudyRow {
    std::string axis;
    double value{0};
    std::size_t n_sim{0}, n_pos{0};
    double snr{0};
    std::array<double, kNumSurfaces> eps{};
    double mean_eps{std::nan("")};
    double band_width{std::nan("")};
    std::string status{"ok"};
};

void do_study(const RunContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const TrainingDataset main_ds = TrainingDataset::load(ctx.out / "dataset.bin");
    const auto main_points = read_points_csv(ctx.out / "observation_points.csv");
    const ObservationVector main_ref =
        read_reference_clean(ctx.out / "reference_observation.csv", cfg.freqs, main_points.size());

    struct Key {
        std::size_t n_sim, n_pos;
        double snr;
        auto operator<=>(const Key&) const = default;
    };
    std::map<Key, StudyRow> done;
    std::map<std::size_t, std::pair<TrainingDataset, ObservationVector>> by_npos;
    by_npos.emplace(main_points.size(), std::make_pair(main_ds, main_ref));

    const auto evaluate = [&](const std::string& axis, double value, Key key) {
        StudyRow row;
        row.axis = axis;
        row.value = value;
        row.n_sim = key.n_sim;
        row.n_pos = key.n_pos;
        row.snr = key.snr;
        if (const auto it = done.find(key); it != done.end()) {
            StudyRow r = it->second;
            r.axis = axis;
            r.value = value;
            return r;
        }
        say(ctx, "  study point " + axis + " = " + format_double(value));
        try {
            auto it = by_npos.find(key.n_pos);
            if (it == by_npos.end()) {
                RunConfig c = cfg;
                c.observation.n = key.n_pos;
                const auto obs = select_observation_points(c.room, observation_options(c, key.n_pos));
                const Simulator sim(c.room, training_mesh(c), obs.points, c.freqs);
                GenerationOptions g;
                g.n_sim = c.n_sim;
                g.seed = c.seeds.dataset;
                g.workers = ctx.workers;
                g.max_skip_fraction = c.max_skip_fraction;
                g.mesh = c.mesh;
                TrainingDataset ds = generate_training_set(sim, c.prior, g);
                ObservationVector ref = reference_observation(c, obs.points, c.snr_db).clean;
                it = by_npos.emplace(key.n_pos, std::make_pair(std::move(ds), std::move(ref))).first;
            }
            const auto& [ds, ref_clean] = it->second;
            RunConfig c = cfg;
            c.snr_db = key.snr;
            c.n_sim = key.n_sim;
            const bool is_main = key.n_sim == cfg.n_sim && key.snr == cfg.snr_db && key.n_pos == cfg.observation.n;
            const Flow model =
                is_main ? Flow::load(ctx.out / "model.flow")
                        : train_model(c, ds.head(static_cast<Eigen::Index>(key.n_sim)), true, ctx);
            const ObservationVector obs = add_noise(ref_clean, key.snr, cfg.seeds.observation_noise);
            const PosteriorEnsemble e = infer_posterior(model, obs.values, cfg.study.n_samples, cfg.seeds.posterior,
                                                        cfg.freqs, cfg.hdi_mass, ctx.workers);
            row.eps = surface_errors(e, cfg.reference);
            row.mean_eps = 0;
            for (double v : row.eps) row.mean_eps += v / kNumSurfaces;
            row.band_width = mean_band_width(e);
            say(ctx, "    mean relative L2 " + format_double(row.mean_eps));
        } catch (const Error& e) {
            row.status = std::string(e.category()) + ": " + e.what();
            row.eps.fill(std::nan(""));
            say(ctx, "    failed: " + row.status);
        }
        done.emplace(key, row);
        return row;
    };

    std::vector<StudyRow> rows;
    for (double v : cfg.study.snr_db) rows.push_back(evaluate("snr_db", v, {cfg.n_sim, cfg.observation.n, v}));
    for (auto v : cfg.study.n_sim)
        rows.push_back(evaluate("n_sim", static_cast<double>(v), {v, cfg.observation.n, cfg.snr_db}));
    for (auto v : cfg.study.n_pos) rows.push_back(evaluate("n_pos", static_cast<double>(v), {cfg.n_sim, v, cfg.snr_db}));

    std::ostringstream csv;
    csv << "axis,value,n_sim,n_pos,snr_db";
    for (int s = 1; s <= kNumSurfaces; ++s) csv << ",relative_l2_" << s;
    csv << ",mean_relative_l2,mean_hdi_width,status\n";
    json summary = json::array();
    for (const auto& r : rows) {
        csv << r.axis << ',' << format_double(r.value) << ',' << r.n_sim << ',' << r.n_pos << ','
            << format_double(r.snr);
        for (double v : r.eps) csv << ',' << format_double(v);
        std::string status = r.status;
        std::replace(status.begin(), status.end(), ',', ';');
        std::replace(status.begin(), status.end(), '\n', ' ');
        csv << ',' << format_double(r.mean_eps) << ',' << format_double(r.band_width) << ',' << status << '\n';
        summary.push_back({{"axis", r.axis},
                           {"value", r.value},
                           {"mean_relative_l2", std::isnan(r.mean_eps) ? json(nullptr) : json(r.mean_eps)},
                           {"status", r.status}});
    }
    write_text_file(ctx.out / "study.csv", csv.str());
    write_json(ctx.out / "study_summary.json", {{"rows", summary}});
}

// ---------------------------------------------------------------------------
// Staleness

std::optional<Stage> producer_of(const std::string& file) {
    for (Stage s : kAllStages) {
        const auto outs = stage_outputs(s);
        if (std::find(outs.begin(), outs.end(), file) != outs.end()) return s;
    }
    return std::nullopt;
}

class Checker {
public:
    Checker(const RunContext& ctx, const Manifest& m) : ctx_(ctx), m_(m) {}

    std::string sha(const std::string& file) {
        auto it = sha_.find(file);
        if (it == sha_.end()) it = sha_.emplace(file, sha256_file(ctx_.out / file)).first;
        return it->second;
    }

    /// Reason the stage's recorded outputs are not current, or nullopt.
    std::optional<std::string> stale(Stage s) {
        if (const auto it = memo_.find(s); it != memo_.end()) return it->second;
        const auto r = compute(s);
        memo_[s] = r;
        return r;
    }

private:
    std::optional<std::string> compute(Stage s) {
        if (!m_.has(s)) return "has not run";
        const json& rec = m_.record(s);
        if (rec.value("config_digest", "") != digest(stage_config(s, ctx_.cfg))) return "config changed since it ran";
        for (const auto& f : stage_outputs(s)) {
            if (!fs::exists(ctx_.out / f)) return "output " + f + " is missing";
            if (!rec["outputs"].contains(f) || rec["outputs"][f] != sha(f)) return "output " + f + " was modified";
        }
        for (const auto& f : stage_inputs(s)) {
            if (!fs::exists(ctx_.out / f)) return "input " + f + " is missing";
            if (const auto p = producer_of(f))
                if (const auto why = stale(*p)) return "input " + f + " is out of date";
            if (!rec["inputs"].contains(f) || rec["inputs"][f] != sha(f)) return "input " + f + " changed since it ran";
        }
        return std::nullopt;
    }

    const RunContext& ctx_;
    const Manifest& m_;
    std::map<std::string, std::string> sha_;
    std::map<Stage, std::optional<std::string>> memo_;
};

} // namespace

const char* stage_name(Stage s) {
    switch (s) {
    case Stage::Generate: return "generate";
    case Stage::Train: return "train";
    case Stage::Infer: return "infer";
    case Stage::Ppc: return "ppc";
    case Stage::C2st: return "c2st";
    case Stage::Metrics: return "metrics";
    case Stage::Study: return "study";
    }
    return "?";
}

std::optional<Stage> parse_stage(const std::string& name) {
    for (Stage s : kAllStages)
        if (name == stage_name(s)) return s;
    return std::nullopt;
}

std::vector<std::string> stage_inputs(Stage s) {
    switch (s) {
    case Stage::Generate: return {};
    case Stage::Train: return {"dataset.bin"};
    case Stage::Infer: return {"model.flow", "observation_points.csv"};
    case Stage::Ppc: return {"posterior_samples.csv", "observation_points.csv"};
    case Stage::C2st: return {"model.flow", "observation_points.csv"};
    case Stage::Metrics: {
        std::vector<std::string> v;
        for (int k = 0; k < kNumSurfaces; ++k) v.push_back(surface_file(k));
        v.push_back("ppc.csv");
        return v;
    }
    case Stage::Study: return {"dataset.bin", "observation_points.csv", "reference_observation.csv", "model.flow"};
    }
    return {};
}

std::vector<std::string> stage_outputs(Stage s) {
    switch (s) {
    case Stage::Generate: return {"observation_points.csv", "dataset.bin"};
    case Stage::Train: return {"model.flow", "training_log.csv"};
    case Stage::Infer: {
        std::vector<std::string> v{"reference_observation.csv", "posterior_samples.csv"};
        for (int k = 0; k < kNumSurfaces; ++k) v.push_back(surface_file(k));
        return v;
    }
    case Stage::Ppc: return {"validation_points.csv", "ppc.csv", "ppc_summary.json"};
    case Stage::C2st: return {"c2st_flow.csv", "c2st_corrupted.csv", "c2st_summary.json"};
    case Stage::Metrics: return {"metrics_surfaces.csv", "metrics_mac.csv", "metrics.json"};
    case Stage::Study: return {"study.csv", "study_summary.json"};
    }
    return {};
}

json stage_config(Stage s, const RunConfig& cfg) {
    const json j = to_json(cfg);
    const json& seeds = j.at("seeds");
    json out;
    switch (s) {
    case Stage::Generate:
        out = pick(j, {"room", "mesh", "frequencies", "observation", "prior", "dataset"});
        out["mesh"].erase("observation_refinement");
        out["seeds"] = pick(seeds, {"observation_points", "dataset"});
        break;
    case Stage::Train:
        out = pick(j, {"noise", "flow", "training", "prior"});
        out["seeds"] = pick(seeds, {"training_noise", "training"});
        break;
    case Stage::Infer:
        out = pick(j, {"room", "mesh", "frequencies", "reference", "noise", "posterior"});
        out["seeds"] = pick(seeds, {"observation_noise", "posterior"});
        break;
    case Stage::Ppc:
        out = pick(j, {"room", "mesh", "frequencies", "reference", "posterior"});
        out["diagnostics"] = pick(j.at("diagnostics"), {"n_ppc", "validation_cap", "validation_exclusion"});
        out["seeds"] = pick(seeds, {"validation_nodes", "ppc"});
        break;
    case Stage::C2st:
        out = pick(j, {"room", "mesh", "frequencies", "prior", "noise"});
        out["diagnostics"] = pick(j.at("diagnostics"), {"n_cal", "n_null", "n_eval", "n_observations", "level",
                                                        "corruption_fraction", "classifier"});
        out["seeds"] = pick(seeds, {"calibration", "lc2st"});
        break;
    case Stage::Metrics:
        out = pick(j, {"reference"});
        break;
    case Stage::Study:
        out = j;
        out.erase("output_dir");
        out.erase("diagnostics");
        break;
    }
    return out;
}

Manifest Manifest::load(const fs::path& out) {
    Manifest m;
    const fs::path p = out / kManifestFile;
    if (!fs::exists(p)) {
        m.doc_ = {{"format", kManifestFormat}, {"version", kVersion}, {"stages", json::object()}};
        return m;
    }
    std::ifstream in(p);
    try {
        m.doc_ = json::parse(in);
    } catch (const json::exception& e) {
        throw ArtifactError(p.string() + ": unreadable manifest: " + e.what());
    }
    if (m.doc_.value("format", "") != kManifestFormat || m.doc_.value("version", 0) != kVersion)
        throw ArtifactError(p.string() + ": not a version " + std::to_string(kVersion) + " manifest");
    if (!m.doc_.contains("stages")) m.doc_["stages"] = json::object();
    return m;
}

void Manifest::save(const fs::path& out) const { write_text_file(out / kManifestFile, doc_.dump(2) + "\n"); }

bool Manifest::has(Stage s) const { return doc_.at("stages").contains(stage_name(s)); }

const json& Manifest::record(Stage s) const { return doc_.at("stages").at(stage_name(s)); }

void Manifest::set_record(Stage s, json rec) { doc_["stages"][stage_name(s)] = std::move(rec); }

bool stage_up_to_date(Stage s, const RunContext& ctx) {
    const Manifest m = Manifest::load(ctx.out);
    return !Checker(ctx, m).stale(s).has_value();
}

void run_stage(Stage s, const RunContext& ctx) {
    ctx.cfg.validate();
    fs::create_directories(ctx.out);
    Manifest m = Manifest::load(ctx.out);
    json inputs = json::object();
    {
        Checker check(ctx, m);
        for (const auto& f : stage_inputs(s)) {
            const auto p = producer_of(f);
            const std::string cmd = p ? stage_name(*p) : "?";
            if (!fs::exists(ctx.out / f))
                throw ArtifactError(std::string(stage_name(s)) + ": missing " + (ctx.out / f).string() +
                                    "; run `roomsbi " + cmd + "` first");
            if (p)
                if (const auto why = check.stale(*p))
                    throw ArtifactError(std::string(stage_name(s)) + ": " + f + " is out of date (`" + cmd + "` " +
                                        *why + "); rerun `roomsbi " + cmd + "`");
            inputs[f] = check.sha(f);
        }
    }
    say(ctx, std::string("[") + stage_name(s) + "]");
    try {
        switch (s) {
        case Stage::Generate: do_generate(ctx); break;
        case Stage::Train: do_train(ctx); break;
        case Stage::Infer: do_infer(ctx); break;
        case Stage::Ppc: do_ppc(ctx); break;
        case Stage::C2st: do_c2st(ctx); break;
        case Stage::Metrics: do_metrics(ctx); break;
        case Stage::Study: do_study(ctx); break;
        }
    } catch (const Error& e) {
        rethrow_prefixed(e, std::string(stage_name(s)) + ": ");
    }
    json outputs = json::object();
    for (const auto& f : stage_outputs(s)) outputs[f] = sha256_file(ctx.out / f);
    const json slice = stage_config(s, ctx.cfg);
    m.set_record(s, {{"config_digest", digest(slice)}, {"config", slice}, {"inputs", inputs}, {"outputs", outputs}});
    json full = to_json(ctx.cfg);
    full.erase("output_dir");
    m.set_config(std::move(full));
    m.save(ctx.out);
}

std::vector<StageOutcome> run_all(const RunContext& ctx) {
    std::vector<StageOutcome> out;
    for (Stage s : kAllStages) {
        if (stage_up_to_date(s, ctx)) {
            say(ctx, std::string("[") + stage_name(s) + "] up to date");
            out.push_back({s, false});
            continue;
        }
        run_stage(s, ctx);
        out.push_back({s, true});
    }
    return out;
}

} // namespace roomsbi
