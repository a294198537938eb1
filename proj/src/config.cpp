#include "roomsbi/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "roomsbi/errors.hpp"
#include "roomsbi/random.hpp"

namespace roomsbi {

using nlohmann::json;

namespace {

/// Reads one JSON object, tracking which keys were consumed.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ValidationError(label() + ": expected an object");
    }

    void number(const char* key, double& out) {
        if (const json* v = find(key)) {
            if (!v->is_number()) type_error(key, "a number");
            out = v->get<double>();
        }
    }
    template <typename Int>
    void integer(const char* key, Int& out) {
        if (const json* v = find(key)) out = as_integer<Int>(*v, key);
    }
    void boolean(const char* key, bool& out) {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) type_error(key, "a boolean");
            out = v->get<bool>();
        }
    }
    void string(const char* key, std::string& out) {
        if (const json* v = find(key)) {
            if (!v->is_string()) type_error(key, "a string");
            out = v->get<std::string>();
        }
    }
    void numbers(const char* key, std::vector<double>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) type_error(key, "an array of numbers");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number()) type_error(key, "an array of numbers");
                out.push_back(e.get<double>());
            }
        }
    }
    template <typename Int>
    void integers(const char* key, std::vector<Int>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) type_error(key, "an array of integers");
            out.clear();
            for (const auto& e : *v) out.push_back(as_integer<Int>(e, key));
        }
    }
    void vec3(const char* key, Vector3& out) {
        std::vector<double> v(out.data(), out.data() + 3);
        numbers(key, v);
        if (v.size() != 3) type_error(key, "an array of 3 numbers");
        out = Vector3(v[0], v[1], v[2]);
    }
    template <typename Fn>
    void object(const char* key, Fn&& fn) {
        if (const json* v = find(key)) {
            Reader sub(*v, child(key));
            fn(sub);
            sub.finish();
        }
    }
    /// Array of objects, one callback per element.
    template <typename Fn>
    void objects(const char* key, std::size_t expected, Fn&& fn) {
        if (const json* v = find(key)) {
            if (!v->is_array() || v->size() != expected)
                type_error(key, "an array of " + std::to_string(expected) + " objects");
            for (std::size_t i = 0; i < expected; ++i) {
                Reader sub((*v)[i], child(key) + "[" + std::to_string(i) + "]");
                fn(sub, i);
                sub.finish();
            }
        }
    }
    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ValidationError("unknown config key '" + child(k.c_str()) + "'");
    }

private:
    const json* find(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    template <typename Int>
    Int as_integer(const json& v, const char* key) const {
        if (!v.is_number_integer()) type_error(key, "an integer");
        if constexpr (std::is_unsigned_v<Int>) {
            if (v.is_number_unsigned()) return static_cast<Int>(v.get<std::uint64_t>());
            if (v.get<std::int64_t>() < 0) type_error(key, "a non-negative integer");
        }
        return static_cast<Int>(v.get<std::int64_t>());
    }
    [[noreturn]] void type_error(const char* key, const std::string& what) const {
        throw ValidationError("config key '" + child(key) + "': expected " + what);
    }
    std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string label() const { return path_.empty() ? "config" : "config key '" + path_ + "'"; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

constexpr const char* kParamNames[4] = {"R", "K", "G", "gamma"};

void read_seeds(Reader& r, SeedConfig& s) {
    r.integer("observation_points", s.observation_points);
    r.integer("dataset", s.dataset);
    r.integer("training_noise", s.training_noise);
    r.integer("training", s.training);
    r.integer("observation_noise", s.observation_noise);
    r.integer("posterior", s.posterior);
    r.integer("validation_nodes", s.validation_nodes);
    r.integer("ppc", s.ppc);
    r.integer("calibration", s.calibration);
    r.integer("lc2st", s.lc2st);
}

json seeds_json(const SeedConfig& s) {
    return {{"observation_points", s.observation_points},
            {"dataset", s.dataset},
            {"training_noise", s.training_noise},
            {"training", s.training},
            {"observation_noise", s.observation_noise},
            {"posterior", s.posterior},
            {"validation_nodes", s.validation_nodes},
            {"ppc", s.ppc},
            {"calibration", s.calibration},
            {"lc2st", s.lc2st}};
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ValidationError("config: " + what);
}

} // namespace

RunConfig parse_config_text(const std::string& text) {
    json j;
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
        j = json::object();
    } else {
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ValidationError(std::string("config is not valid JSON: ") + e.what());
        }
    }
    RunConfig c;
    Reader r(j, "");
    r.object("room", [&](Reader& o) {
        o.number("Lx", c.room.Lx);
        o.number("Ly", c.room.Ly);
        o.number("Lz", c.room.Lz);
        o.number("c", c.room.c);
        o.number("rho0", c.room.rho0);
        o.vec3("source_position", c.room.source_position);
        o.number("source_volume_flow", c.room.source_volume_flow);
    });
    r.object("mesh", [&](Reader& o) {
        o.number("elements_per_wavelength", c.mesh.elements_per_wavelength);
        o.number("f_max", c.mesh.f_max);
        o.integer("observation_refinement", c.observation_refinement);
        o.integer("node_budget", c.mesh.node_budget);
    });
    r.numbers("frequencies", c.freqs);
    r.object("observation", [&](Reader& o) {
        o.integer("n", c.observation.n);
        o.number("min_dist", c.observation.min_dist);
        o.number("margin", c.observation.margin);
    });
    r.object("prior", [&](Reader& o) {
        o.objects("surfaces", kNumSurfaces, [&](Reader& s, std::size_t k) {
            for (int p = 0; p < 4; ++p) {
                const auto idx = static_cast<Eigen::Index>(4 * k + static_cast<std::size_t>(p));
                std::vector<double> b{c.prior.lower[idx], c.prior.upper[idx]};
                s.numbers(kParamNames[p], b);
                require(b.size() == 2, std::string("prior bounds need [lower, upper] for ") + kParamNames[p]);
                c.prior.lower[idx] = b[0];
                c.prior.upper[idx] = b[1];
            }
        });
    });
    r.object("reference", [&](Reader& o) {
        o.objects("surfaces", kNumSurfaces, [&](Reader& s, std::size_t k) {
            auto& p = c.reference.surfaces[k];
            s.number("R", p.R);
            s.number("K", p.K);
            s.number("G", p.G);
            s.number("gamma", p.gamma);
        });
    });
    r.object("noise", [&](Reader& o) { o.number("snr_db", c.snr_db); });
    r.object("dataset", [&](Reader& o) {
        o.integer("n_sim", c.n_sim);
        o.number("max_skip_fraction", c.max_skip_fraction);
    });
    r.object("flow", [&](Reader& o) {
        o.integer("transforms", c.flow.transforms);
        o.integer("bins", c.flow.spline.bins);
        o.number("tail", c.flow.spline.tail);
        o.integer("hidden", c.flow.hidden);
        o.integer("hidden_layers", c.flow.hidden_layers);
        o.boolean("embedding", c.flow.embedding);
        o.integers("embedding_hidden", c.flow.embedding_hidden);
        o.integer("embedding_dim", c.flow.embedding_dim);
    });
    r.object("training", [&](Reader& o) {
        o.integer("batch_size", c.training.batch_size);
        o.number("learning_rate", c.training.learning_rate);
        o.number("validation_fraction", c.training.validation_fraction);
        o.integer("patience", c.training.patience);
        o.integer("max_epochs", c.training.max_epochs);
        o.number("clip_norm", c.training.clip_norm);
    });
    r.object("posterior", [&](Reader& o) {
        o.integer("n_samples", c.n_samples);
        o.number("hdi_mass", c.hdi_mass);
    });
    r.object("diagnostics", [&](Reader& o) {
        auto& d = c.diagnostics;
        o.integer("n_ppc", d.n_ppc);
        o.integer("validation_cap", d.validation_cap);
        o.number("validation_exclusion", d.validation_exclusion);
        o.integer("n_cal", d.n_cal);
        o.integer("n_null", d.n_null);
        o.integer("n_eval", d.n_eval);
        o.integer("n_observations", d.n_observations);
        o.number("level", d.level);
        o.number("corruption_fraction", d.corruption_fraction);
        o.object("classifier", [&](Reader& k) {
            k.integers("hidden", d.classifier.hidden);
            k.integer("epochs", d.classifier.epochs);
            k.integer("batch_size", d.classifier.batch_size);
            k.number("learning_rate", d.classifier.learning_rate);
            k.number("validation_fraction", d.classifier.validation_fraction);
            k.integer("patience", d.classifier.patience);
        });
    });
    r.object("study", [&](Reader& o) {
        o.numbers("snr_db", c.study.snr_db);
        o.integers("n_sim", c.study.n_sim);
        o.integers("n_pos", c.study.n_pos);
        o.integer("n_samples", c.study.n_samples);
    });
    r.object("seeds", [&](Reader& o) { read_seeds(o, c.seeds); });
    r.string("output_dir", c.output_dir);
    r.finish();
    c.flow.theta_dim = kThetaDim;
    c.flow.data_dim = static_cast<int>(2 * c.observation.n * c.freqs.size());
    c.validate();
    return c;
}

RunConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config_text(ss.str());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

json to_json(const RunConfig& c) {
    json prior = json::array(), reference = json::array();
    for (int k = 0; k < kNumSurfaces; ++k) {
        json s;
        for (int p = 0; p < 4; ++p) s[kParamNames[p]] = {c.prior.lower[4 * k + p], c.prior.upper[4 * k + p]};
        prior.push_back(s);
        const auto& r = c.reference.surfaces[static_cast<std::size_t>(k)];
        reference.push_back({{"R", r.R}, {"K", r.K}, {"G", r.G}, {"gamma", r.gamma}});
    }
    const auto& d = c.diagnostics;
    return {
        {"room",
         {{"Lx", c.room.Lx},
          {"Ly", c.room.Ly},
          {"Lz", c.room.Lz},
          {"c", c.room.c},
          {"rho0", c.room.rho0},
          {"source_position", {c.room.source_position.x(), c.room.source_position.y(), c.room.source_position.z()}},
          {"source_volume_flow", c.room.source_volume_flow}}},
        {"mesh",
         {{"elements_per_wavelength", c.mesh.elements_per_wavelength},
          {"f_max", c.mesh.f_max},
          {"observation_refinement", c.observation_refinement},
          {"node_budget", c.mesh.node_budget}}},
        {"frequencies", c.freqs},
        {"observation", {{"n", c.observation.n}, {"min_dist", c.observation.min_dist}, {"margin", c.observation.margin}}},
        {"prior", {{"surfaces", prior}}},
        {"reference", {{"surfaces", reference}}},
        {"noise", {{"snr_db", c.snr_db}}},
        {"dataset", {{"n_sim", c.n_sim}, {"max_skip_fraction", c.max_skip_fraction}}},
        {"flow",
         {{"transforms", c.flow.transforms},
          {"bins", c.flow.spline.bins},
          {"tail", c.flow.spline.tail},
          {"hidden", c.flow.hidden},
          {"hidden_layers", c.flow.hidden_layers},
          {"embedding", c.flow.embedding},
          {"embedding_hidden", c.flow.embedding_hidden},
          {"embedding_dim", c.flow.embedding_dim}}},
        {"training",
         {{"batch_size", c.training.batch_size},
          {"learning_rate", c.training.learning_rate},
          {"validation_fraction", c.training.validation_fraction},
          {"patience", c.training.patience},
          {"max_epochs", c.training.max_epochs},
          {"clip_norm", c.training.clip_norm}}},
        {"posterior", {{"n_samples", c.n_samples}, {"hdi_mass", c.hdi_mass}}},
        {"diagnostics",
         {{"n_ppc", d.n_ppc},
          {"validation_cap", d.validation_cap},
          {"validation_exclusion", d.validation_exclusion},
          {"n_cal", d.n_cal},
          {"n_null", d.n_null},
          {"n_eval", d.n_eval},
          {"n_observations", d.n_observations},
          {"level", d.level},
          {"corruption_fraction", d.corruption_fraction},
          {"classifier",
           {{"hidden", d.classifier.hidden},
            {"epochs", d.classifier.epochs},
            {"batch_size", d.classifier.batch_size},
            {"learning_rate", d.classifier.learning_rate},
            {"validation_fraction", d.classifier.validation_fraction},
            {"patience", d.classifier.patience}}}}},
        {"study",
         {{"snr_db", c.study.snr_db},
          {"n_sim", c.study.n_sim},
          {"n_pos", c.study.n_pos},
          {"n_samples", c.study.n_samples}}},
        {"seeds", seeds_json(c.seeds)},
        {"output_dir", c.output_dir},
    };
}

std::string serialize_config(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void RunConfig::validate() const {
    try {
        room.validate();
        prior.validate();
    } catch (const Error& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    require(mesh.elements_per_wavelength > 0, "mesh.elements_per_wavelength must be positive");
    require(mesh.f_max > 0, "mesh.f_max must be positive");
    require(observation_refinement >= 2, "mesh.observation_refinement must be at least 2 (inverse-crime split)");
    require(!freqs.empty(), "frequencies must not be empty");
    for (double f : freqs) require(f > 0 && f <= mesh.f_max, "frequencies must lie in (0, mesh.f_max]");
    require(observation.n >= 1, "observation.n must be at least 1");
    require(observation.min_dist > 0, "observation.min_dist must be positive");
    require(observation.margin >= 0, "observation.margin must be non-negative");
    require(prior.contains(reference.theta()), "reference parameters must lie inside the prior");
    require(std::isfinite(snr_db) && snr_db > 0, "noise.snr_db must be positive and finite");
    require(n_sim >= 2, "dataset.n_sim must be at least 2");
    require(max_skip_fraction >= 0 && max_skip_fraction < 1, "dataset.max_skip_fraction must lie in [0, 1)");
    flow.validate();
    require(flow.theta_dim == kThetaDim && flow.data_dim == static_cast<int>(2 * observation.n * freqs.size()),
            "flow dimensions must match 24 parameters and 2 x observation.n x frequencies");
    require(training.batch_size >= 1, "training.batch_size must be positive");
    require(training.learning_rate > 0, "training.learning_rate must be positive");
    require(training.validation_fraction > 0 && training.validation_fraction < 1,
            "training.validation_fraction must lie in (0, 1)");
    require(training.patience >= 1 && training.max_epochs >= 1, "training.patience and max_epochs must be positive");
    require(n_samples >= 100, "posterior.n_samples must be at least 100");
    require(hdi_mass > 0 && hdi_mass < 1, "posterior.hdi_mass must lie in (0, 1)");
    const auto& d = diagnostics;
    require(d.n_ppc >= 100 && static_cast<Eigen::Index>(d.n_ppc) <= n_samples,
            "diagnostics.n_ppc must lie in [100, posterior.n_samples]");
    require(d.validation_cap >= 1, "diagnostics.validation_cap must be positive");
    require(d.validation_exclusion >= 0, "diagnostics.validation_exclusion must be non-negative");
    require(d.n_cal >= 200, "diagnostics.n_cal must be at least 200");
    require(d.n_null >= 100, "diagnostics.n_null must be at least 100");
    require(d.n_eval >= 1 && d.n_observations >= 1, "diagnostics.n_eval and n_observations must be positive");
    require(d.level > 0 && d.level < 1, "diagnostics.level must lie in (0, 1)");
    require(d.corruption_fraction > 0 && d.corruption_fraction < 1, "diagnostics.corruption_fraction must lie in (0, 1)");
    require(d.classifier.epochs >= 1 && d.classifier.batch_size >= 1 && d.classifier.learning_rate > 0 &&
                d.classifier.patience >= 1,
            "diagnostics.classifier needs positive epochs, batch_size, learning_rate and patience");
    require(d.classifier.validation_fraction >= 0 && d.classifier.validation_fraction < 1,
            "diagnostics.classifier.validation_fraction must lie in [0, 1)");
    for (int h : d.classifier.hidden) require(h >= 1, "diagnostics.classifier.hidden widths must be positive");
    require(study.snr_db.empty() || study.snr_db.size() >= 2, "study axes need at least 2 values");
    require(study.n_sim.empty() || study.n_sim.size() >= 2, "study axes need at least 2 values");
    require(study.n_pos.empty() || study.n_pos.size() >= 2, "study axes need at least 2 values");
    for (double s : study.snr_db) require(std::isfinite(s) && s > 0, "study.snr_db values must be positive");
    for (auto n : study.n_sim) require(n >= 2 && n <= n_sim, "study.n_sim values must lie in [2, dataset.n_sim]");
    for (auto n : study.n_pos) require(n >= 1, "study.n_pos values must be positive");
    require(study.n_samples >= 100, "study.n_samples must be at least 100");
    require(!output_dir.empty(), "output_dir must not be empty");
}

void RunConfig::override_seeds(std::uint64_t base) {
    std::uint64_t* fields[] = {&seeds.observation_points, &seeds.dataset, &seeds.training_noise,
                               &seeds.training,           &seeds.observation_noise, &seeds.posterior,
                               &seeds.validation_nodes,   &seeds.ppc, &seeds.calibration, &seeds.lc2st};
    std::uint64_t k = 0;
    for (auto* f : fields) *f = mix_seed(base, k++);
}

} // namespace roomsbi
