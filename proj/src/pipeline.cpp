#include "roomsbi/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>

#include "roomsbi/io.hpp"
#include "roomsbi/parallel.hpp"
#include "roomsbi/random.hpp"

namespace roomsbi {

std::pair<double, double> hdi(std::span<const double> samples, double mass) {
    if (!(mass > 0 && mass < 1)) throw ValidationError("hdi: mass must lie in (0, 1)");
    const std::size_t n = samples.size();
    if (n < 100) throw ValidationError("hdi: need at least 100 samples, got " + std::to_string(n));
    std::vector<double> s(samples.begin(), samples.end());
    for (double v : s)
        if (std::isnan(v)) throw ValidationError("hdi: NaN sample");
    std::sort(s.begin(), s.end());
    // Smallest k with k / n >= mass, robust to mass * n landing just above an integer.
    auto k = static_cast<std::size_t>(std::ceil(mass * static_cast<double>(n)));
    if (k > 1 && static_cast<double>(k - 1) / static_cast<double>(n) >= mass) --k;
    k = std::clamp<std::size_t>(k, 1, n);
    std::size_t best = 0;
    double width = s[k - 1] - s[0];
    for (std::size_t i = 1; i + k <= n; ++i) {
        const double w = s[i + k - 1] - s[i];
        if (w < width) {
            width = w;
            best = i;
        }
    }
    return {s[best], s[best + k - 1]};
}

std::vector<std::string> theta_names() {
    std::vector<std::string> names;
    for (int s = 1; s <= kNumSurfaces; ++s)
        for (const char* p : {"R_", "K_", "G_", "gamma_"}) names.push_back(p + std::to_string(s));
    return names;
}

// ---------------------------------------------------------------------------
// Dataset container: "roomsbi-dataset <version>\n" + one JSON header line +
// raw doubles (theta column-major, then data column-major).

namespace {

constexpr int kDatasetVersion = 1;
constexpr const char* kOrdering = "frequency-major, then point, then (re, im)";

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

} // namespace

TrainingDataset TrainingDataset::head(Eigen::Index n) const {
    if (n < 0 || n > size())
        throw ValidationError("dataset holds " + std::to_string(size()) + " records, requested " + std::to_string(n));
    TrainingDataset out = *this;
    out.theta = theta.leftCols(n);
    out.data = data.leftCols(n);
    out.record_index.resize(static_cast<std::size_t>(n));
    const std::size_t last = n ? record_index[static_cast<std::size_t>(n) - 1] : 0;
    out.skipped.clear();
    for (const auto& s : skipped)
        if (s.index < last) out.skipped.push_back(s);
    out.n_requested = n ? last + 1 : 0;
    return out;
}

void TrainingDataset::save(const std::filesystem::path& path) const {
    nlohmann::json h;
    h["records"] = size();
    h["theta_dim"] = theta.rows();
    h["data_dim"] = data.rows();
    h["ordering"] = kOrdering;
    h["n_requested"] = n_requested;
    h["seed"] = seed;
    h["freqs"] = freqs;
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points) pts.push_back({p.x(), p.y(), p.z()});
    h["points"] = pts;
    h["mesh"] = {{"elements_per_wavelength", mesh.elements_per_wavelength},
                 {"f_max", mesh.f_max},
                 {"refinement", mesh.refinement}};
    h["prior"] = {{"lower", vec_json(prior.lower)}, {"upper", vec_json(prior.upper)}};
    h["record_index"] = record_index;
    nlohmann::json sk = nlohmann::json::array();
    for (const auto& s : skipped) sk.push_back({{"index", s.index}, {"reason", s.reason}});
    h["skipped"] = sk;

    std::string out = "roomsbi-dataset " + std::to_string(kDatasetVersion) + "\n" + h.dump() + "\n";
    const auto append = [&](const Eigen::MatrixXd& m) {
        out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    };
    append(theta);
    append(data);
    write_text_file(path, out);
}

TrainingDataset TrainingDataset::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot open dataset " + path.string() + " (produced by `generate`)");
    std::string magic, header;
    std::getline(in, magic);
    if (magic != "roomsbi-dataset " + std::to_string(kDatasetVersion))
        throw ArtifactError(path.string() + ": not a version " + std::to_string(kDatasetVersion) + " dataset");
    std::getline(in, header);
    TrainingDataset ds;
    try {
        const auto h = nlohmann::json::parse(header);
        const auto n = h.at("records").get<Eigen::Index>();
        const auto td = h.at("theta_dim").get<Eigen::Index>();
        const auto dd = h.at("data_dim").get<Eigen::Index>();
        if (h.at("ordering").get<std::string>() != kOrdering) throw ArtifactError("unknown data ordering");
        ds.n_requested = h.at("n_requested").get<std::size_t>();
        ds.seed = h.at("seed").get<std::uint64_t>();
        ds.freqs = h.at("freqs").get<std::vector<double>>();
        for (const auto& p : h.at("points")) ds.points.emplace_back(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
        ds.mesh.elements_per_wavelength = h.at("mesh").at("elements_per_wavelength").get<double>();
        ds.mesh.f_max = h.at("mesh").at("f_max").get<double>();
        ds.mesh.refinement = h.at("mesh").at("refinement").get<int>();
        const auto lo = h.at("prior").at("lower").get<std::vector<double>>();
        const auto hi = h.at("prior").at("upper").get<std::vector<double>>();
        if (lo.size() != kThetaDim || hi.size() != kThetaDim) throw ArtifactError("prior bounds have the wrong size");
        ds.prior.lower = Eigen::Map<const ThetaVector>(lo.data());
        ds.prior.upper = Eigen::Map<const ThetaVector>(hi.data());
        ds.record_index = h.at("record_index").get<std::vector<std::size_t>>();
        for (const auto& s : h.at("skipped")) ds.skipped.push_back({s.at("index").get<std::size_t>(), s.at("reason").get<std::string>()});
        ds.theta.resize(td, n);
        ds.data.resize(dd, n);
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(path.string() + ": bad header: " + e.what());
    }
    in.read(reinterpret_cast<char*>(ds.theta.data()), static_cast<std::streamsize>(ds.theta.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(ds.data.data()), static_cast<std::streamsize>(ds.data.size() * sizeof(double)));
    if (!in) throw ArtifactError(path.string() + ": truncated payload");
    if (static_cast<Eigen::Index>(ds.record_index.size()) != ds.size())
        throw ArtifactError(path.string() + ": record index length mismatch");
    return ds;
}

TrainingDataset generate_training_set(const Simulator& sim, const PriorSpec& prior, const GenerationOptions& opts) {
    prior.validate();
    if (!(opts.max_skip_fraction >= 0 && opts.max_skip_fraction < 1))
        throw ValidationError("generate: max_skip_fraction must lie in [0, 1)");
    const std::size_t n = opts.n_sim;
    const auto D = static_cast<Eigen::Index>(sim.output_size());
    Eigen::MatrixXd theta(kThetaDim, static_cast<Eigen::Index>(n));
    Eigen::MatrixXd data(D, static_cast<Eigen::Index>(n));
    std::vector<std::string> failure(n);
    std::mutex progress_lock;
    std::size_t done = 0;
    parallel_for(n, opts.workers, [&](std::size_t i) {
        const ThetaVector t = sample_prior(prior, mix_seed(opts.seed, i));
        theta.col(static_cast<Eigen::Index>(i)) = t;
        try {
            data.col(static_cast<Eigen::Index>(i)) = sim.simulate(t).values;
        } catch (const SolverError& e) {
            failure[i] = e.what();
        } catch (const ValidationError& e) {
            failure[i] = e.what();
        }
        if (opts.progress) {
            std::lock_guard lock(progress_lock);
            opts.progress(++done, n);
        }
    });

    TrainingDataset ds;
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < n; ++i) {
        if (failure[i].empty()) {
            keep.push_back(static_cast<Eigen::Index>(i));
            ds.record_index.push_back(i);
        } else {
            ds.skipped.push_back({i, failure[i]});
        }
    }
    if (static_cast<double>(ds.skipped.size()) > opts.max_skip_fraction * static_cast<double>(n))
        throw SolverError("generate: " + std::to_string(ds.skipped.size()) + " of " + std::to_string(n) +
                          " simulations failed, above the " + std::to_string(100 * opts.max_skip_fraction) +
                          "% limit; first failure (record " + std::to_string(ds.skipped.front().index) +
                          "): " + ds.skipped.front().reason);
    ds.theta = theta(Eigen::all, keep);
    ds.data = data(Eigen::all, keep);
    ds.n_requested = n;
    ds.seed = opts.seed;
    ds.freqs = sim.freqs;
    for (const auto& loc : sim.locations) ds.points.push_back(map_to_global(*sim.mats.mesh, loc));
    ds.mesh = opts.mesh;
    ds.prior = prior;
    return ds;
}

Eigen::MatrixXd noisy_training_data(const TrainingDataset& ds, double snr_db, std::uint64_t seed) {
    Eigen::MatrixXd out(ds.data.rows(), ds.data.cols());
    ObservationVector obs;
    obs.freqs = ds.freqs;
    obs.n_points = ds.points.size();
    if (static_cast<Eigen::Index>(2 * obs.n_points * obs.freqs.size()) != ds.data.rows())
        throw ValidationError("dataset data dimension does not match its frequency and point lists");
    for (Eigen::Index j = 0; j < ds.size(); ++j) {
        obs.values = ds.data.col(j);
        out.col(j) = add_noise(obs, snr_db, mix_seed(seed, ds.record_index[static_cast<std::size_t>(j)])).values;
    }
    return out;
}

ThetaBijection prior_bijection(const PriorSpec& prior) {
    return ThetaBijection::logit(prior.lower, prior.upper);
}

// ---------------------------------------------------------------------------

Eigen::VectorXcd PosteriorEnsemble::mean_impedance(int surface) const {
    const auto& b = bands.at(static_cast<std::size_t>(surface));
    Eigen::VectorXcd z(b.re.mean.size());
    for (Eigen::Index f = 0; f < z.size(); ++f) z[f] = {b.re.mean[f], b.im.mean[f]};
    return z;
}

std::array<SurfaceBands, kNumSurfaces> impedance_bands(const Eigen::MatrixXd& samples, std::span<const double> freqs,
                                                       double mass, unsigned workers) {
    if (samples.rows() != kThetaDim) throw ValidationError("posterior samples must have 24 rows");
    const auto nf = static_cast<Eigen::Index>(freqs.size());
    std::array<SurfaceBands, kNumSurfaces> out;
    for (auto& s : out)
        for (BandStats* b : {&s.re, &s.im}) {
            b->mean.resize(nf);
            b->lower.resize(nf);
            b->upper.resize(nf);
        }
    const auto n = static_cast<std::size_t>(samples.cols());
    parallel_for(static_cast<std::size_t>(kNumSurfaces) * freqs.size(), workers, [&](std::size_t task) {
        const int s = static_cast<int>(task / freqs.size());
        const auto f = static_cast<Eigen::Index>(task % freqs.size());
        std::vector<double> re(n), im(n);
        double sum_re = 0, sum_im = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const ThetaVector t = samples.col(static_cast<Eigen::Index>(j));
            const Complex z = eval_impedance(surface_params(t, s), freqs[static_cast<std::size_t>(f)]);
            re[j] = z.real();
            im[j] = z.imag();
            sum_re += re[j];
            sum_im += im[j];
        }
        auto& b = out[static_cast<std::size_t>(s)];
        b.re.mean[f] = sum_re / static_cast<double>(n);
        b.im.mean[f] = sum_im / static_cast<double>(n);
        std::tie(b.re.lower[f], b.re.upper[f]) = hdi(re, mass);
        std::tie(b.im.lower[f], b.im.upper[f]) = hdi(im, mass);
    });
    return out;
}

PosteriorEnsemble infer_posterior(const Flow& model, const Eigen::VectorXd& observation, Eigen::Index n_samples,
                                  std::uint64_t seed, std::span<const double> freqs, double mass, unsigned workers) {
    if (observation.size() != model.config().data_dim)
        throw ValidationError("infer: observation has " + std::to_string(observation.size()) +
                              " entries, the model expects " + std::to_string(model.config().data_dim));
    if (model.config().theta_dim != kThetaDim) throw ValidationError("infer: model is not a 24-parameter model");
    PosteriorEnsemble e;
    e.samples = model.sample(observation, n_samples, seed, workers);
    e.freqs.assign(freqs.begin(), freqs.end());
    e.mass = mass;
    e.bands = impedance_bands(e.samples, freqs, mass, workers);
    return e;
}

void write_posterior_samples_csv(const std::filesystem::path& path, const Eigen::MatrixXd& samples) {
    write_csv(path, theta_names(), samples.transpose());
}

Eigen::MatrixXd read_posterior_samples_csv(const std::filesystem::path& path) {
    const CsvTable t = read_csv(path);
    if (t.header != theta_names()) throw ArtifactError(path.string() + ": unexpected posterior sample columns");
    return t.rows.transpose();
}

void write_band_csv(const std::filesystem::path& path, std::span<const double> freqs, const SurfaceBands& b) {
    const auto nf = static_cast<Eigen::Index>(freqs.size());
    Eigen::MatrixXd rows(nf, 7);
    for (Eigen::Index f = 0; f < nf; ++f)
        rows.row(f) << freqs[static_cast<std::size_t>(f)], b.re.mean[f], b.re.lower[f], b.re.upper[f], b.im.mean[f],
            b.im.lower[f], b.im.upper[f];
    write_csv(path, {"frequency_hz", "mean_re", "hdi_lo_re", "hdi_hi_re", "mean_im", "hdi_lo_im", "hdi_hi_im"}, rows);
}

} // namespace roomsbi
