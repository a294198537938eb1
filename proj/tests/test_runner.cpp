#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "roomsbi/io.hpp"
#include "roomsbi/runner.hpp"

using namespace roomsbi;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "mesh": {"f_max": 150},
  "frequencies": [63, 80, 100, 125],
  "observation": {"n": 6},
  "dataset": {"n_sim": 200},
  "flow": {"transforms": 2, "hidden": 12, "hidden_layers": 1, "embedding": true, "embedding_hidden": [16], "embedding_dim": 6},
  "training": {"batch_size": 20, "max_epochs": 3},
  "posterior": {"n_samples": 600},
  "diagnostics": {"n_ppc": 100, "validation_cap": 100, "n_cal": 200, "n_eval": 100,
                  "classifier": {"hidden": [8], "epochs": 2}},
  "study": {"snr_db": [20, 20], "n_sim": [100, 200], "n_samples": 300}
})";

RunContext tiny(const std::string& name, unsigned workers = 1) {
    RunContext ctx;
    ctx.cfg = parse_config_text(kTinyConfig);
    ctx.out = fs::temp_directory_path() / ("roomsbi_test_runner_" + name);
    ctx.workers = workers;
    return ctx;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string artifact_error(Stage s, const RunContext& ctx) {
    try {
        run_stage(s, ctx);
    } catch (const ArtifactError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_CASE("stage wiring") {
    std::set<std::string> produced;
    for (Stage s : kAllStages) {
        CHECK(parse_stage(stage_name(s)) == s);
        for (const auto& f : stage_inputs(s)) CHECK_MESSAGE(produced.count(f), stage_name(s) << " reads " << f);
        for (const auto& f : stage_outputs(s)) CHECK(produced.insert(f).second);
    }
    CHECK_FALSE(parse_stage("run-all").has_value());
}

TEST_CASE("run-all bundle") {
    const RunContext a = tiny("a", 1);
    fs::remove_all(a.out);
    const auto first = run_all(a);
    for (const auto& o : first) CHECK(o.ran);

    const Manifest m = Manifest::load(a.out);
    CHECK(m.document()["version"] == Manifest::kVersion);
    CHECK(m.document()["config"]["seeds"]["ppc"] == a.cfg.seeds.ppc);
    for (Stage s : kAllStages) {
        REQUIRE(m.has(s));
        for (const auto& f : stage_outputs(s)) CHECK(m.record(s)["outputs"][f] == sha256_file(a.out / f));
        for (const auto& f : stage_inputs(s)) CHECK(m.record(s)["inputs"].contains(f));
    }

    SUBCASE("second run skips every stage") {
        for (const auto& o : run_all(a)) CHECK_FALSE(o.ran);
    }
    SUBCASE("byte-identical across runs and worker counts") {
        const RunContext b = tiny("b", 3);
        fs::remove_all(b.out);
        run_all(b);
        for (const auto& entry : fs::directory_iterator(a.out))
            CHECK_MESSAGE(slurp(entry.path()) == slurp(b.out / entry.path().filename()), entry.path().filename());
    }
    SUBCASE("rerunning train reproduces the checkpoint") {
        const std::string before = sha256_file(a.out / "model.flow");
        run_stage(Stage::Train, a);
        CHECK(sha256_file(a.out / "model.flow") == before);
        CHECK(stage_up_to_date(Stage::Study, a));
    }
    SUBCASE("repeated study value gives identical rows") {
        std::ifstream in(a.out / "study.csv");
        std::string header, r1, r2;
        std::getline(in, header);
        std::getline(in, r1);
        std::getline(in, r2);
        CHECK(r1 == r2);
        CHECK(r1.find(",ok") != std::string::npos);
    }
    SUBCASE("a modified artifact makes its consumers refuse") {
        std::ofstream(a.out / "posterior_samples.csv", std::ios::app) << "\n";
        CHECK_FALSE(stage_up_to_date(Stage::Infer, a));
        CHECK_FALSE(stage_up_to_date(Stage::Metrics, a));
        const std::string msg = artifact_error(Stage::Ppc, a);
        CHECK(msg.find("posterior_samples.csv is out of date") != std::string::npos);
        CHECK(msg.find("rerun `roomsbi infer`") != std::string::npos);
        run_stage(Stage::Infer, a);
        CHECK(stage_up_to_date(Stage::Ppc, a));
    }
    SUBCASE("a config change upstream makes consumers refuse") {
        RunContext c = a;
        c.cfg.snr_db = 25;
        CHECK(artifact_error(Stage::Infer, c).find("rerun `roomsbi train`") != std::string::npos);
        CHECK(stage_up_to_date(Stage::Generate, c));
        RunContext d = a;
        d.cfg.diagnostics.n_ppc = 101;
        CHECK(stage_up_to_date(Stage::C2st, d));
        CHECK_FALSE(stage_up_to_date(Stage::Ppc, d));
        CHECK_FALSE(stage_up_to_date(Stage::Metrics, d));
    }
    SUBCASE("missing artifacts name the producing command") {
        fs::remove(a.out / "ppc.csv");
        const std::string msg = artifact_error(Stage::Metrics, a);
        CHECK(msg.find("missing") != std::string::npos);
        CHECK(msg.find("run `roomsbi ppc` first") != std::string::npos);
    }
}

TEST_CASE("stage failures carry the stage name and category") {
    RunContext ctx = tiny("fail");
    fs::remove_all(ctx.out);
    run_stage(Stage::Generate, ctx);
    ctx.cfg.training.batch_size = 50;  // 200 records < 10 x 50
    try {
        run_stage(Stage::Train, ctx);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).rfind("train: ", 0) == 0);
    }
    CHECK_FALSE(Manifest::load(ctx.out).has(Stage::Train));
}
