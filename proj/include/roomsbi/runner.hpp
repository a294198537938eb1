#ifndef ROOMSBI_RUNNER_HPP
#define ROOMSBI_RUNNER_HPP

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roomsbi/config.hpp"

namespace roomsbi {

enum class Stage { Generate, Train, Infer, Ppc, C2st, Metrics, Study };

inline constexpr Stage kAllStages[] = {Stage::Generate, Stage::Train,   Stage::Infer, Stage::Ppc,
                                       Stage::C2st,     Stage::Metrics, Stage::Study};

const char* stage_name(Stage s);
std::optional<Stage> parse_stage(const std::string& name);

/// Files a stage reads and writes, relative to the output directory.
std::vector<std::string> stage_inputs(Stage s);
std::vector<std::string> stage_outputs(Stage s);

/// The part of the config a stage's outputs depend on, beyond its inputs.
nlohmann::json stage_config(Stage s, const RunConfig& cfg);

struct RunContext {
    RunConfig cfg;
    std::filesystem::path out;
    unsigned workers{1};
    std::function<void(const std::string&)> log;
};

/// out/manifest.json: format version, the effective config of the last
/// command, and per stage the config digest plus input and output checksums.
class Manifest {
public:
    static constexpr int kVersion = 1;

    static Manifest load(const std::filesystem::path& out);
    void save(const std::filesystem::path& out) const;

    bool has(Stage s) const;
    const nlohmann::json& record(Stage s) const;
    void set_record(Stage s, nlohmann::json rec);
    void set_config(nlohmann::json cfg) { doc_["config"] = std::move(cfg); }
    const nlohmann::json& document() const { return doc_; }

private:
    nlohmann::json doc_;
};

/// True when the stage's record matches the current config, its inputs are
/// current and its outputs still carry the recorded checksums.
bool stage_up_to_date(Stage s, const RunContext& ctx);

/// Runs one stage after the staleness guard: every input must exist and be
/// the up-to-date output of its producing stage, otherwise ArtifactError
/// names the command to run.
void run_stage(Stage s, const RunContext& ctx);

struct StageOutcome {
    Stage stage;
    bool ran{false};
};

/// All stages in order, skipping those already up to date. A failure is
/// rethrown with the stage name prefixed; outputs of earlier stages stay.
std::vector<StageOutcome> run_all(const RunContext& ctx);

} // namespace roomsbi

#endif // ROOMSBI_RUNNER_HPP
