#pragma once

// Continual-learning runs: configuration, the train/evaluate loop for every
// method, sweeps, run checkpoints, and CSV/report output.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "color/checkpoint.hpp"
#include "color/experts.hpp"
#include "color/metrics.hpp"
#include "color/scenarios.hpp"
#include "color/vit.hpp"

namespace color {

enum class Method { color, colorpp, oracle, ftseq, joint };

std::string to_string(Method method);
Method parse_method(const std::string& text);

enum class JointMode { lora, full };

struct RunConfig {
    ScenarioKind scenario = ScenarioKind::dil;
    Method method = Method::color;
    ModelConfig model;
    TrainConfig train = TrainConfig::toy();  // train.rank is the LoRA rank r
    std::size_t clusters = 0;                // 0 selects the scenario default

    // Data.
    std::size_t num_classes = 10;
    std::size_t num_domains = 6;         // dil
    std::size_t classes_per_update = 4;  // cil / til
    std::size_t train_per_class = 100;
    std::size_t test_per_class = 50;
    double margin = 1.0;

    // Pretraining of the frozen backbone.
    std::size_t pretrain_epochs = 20;
    double pretrain_learning_rate = 4e-3;
    double pretrain_min_accuracy = 0.8;
    std::string backbone_path;  // load instead of pretraining when set

    // Seeds. Repeat i uses init_seed + i and kmeans_seed + i; data is fixed.
    std::uint64_t data_seed = 0;
    std::uint64_t init_seed = 0;
    std::uint64_t kmeans_seed = 0;
    std::size_t repeats = 3;

    JointMode joint_mode = JointMode::lora;
    AverageMode average_mode = AverageMode::pooled;
    bool record_wall_time = false;
    bool save_checkpoints = true;
    std::string output_dir;

    static RunConfig defaults(ScenarioKind scenario);

    // k = 5 for dil, 2 x classes per update otherwise, unless overridden.
    std::size_t effective_clusters() const;
    std::size_t num_updates() const;
    // Throws ConfigError naming the offending field.
    void validate() const;

    // Flat key=value view; apply_setting accepts exactly these keys.
    std::map<std::string, std::string> settings() const;
    void apply_setting(const std::string& key, const std::string& value);
};

using Settings = std::map<std::string, std::string>;

// Parses a key=value file; '#' starts a comment. Keys are not checked here.
Settings read_config_file(const std::string& path);
// Starts from RunConfig::defaults of the "scenario" entry (dil when absent) and
// applies every other entry. Throws ConfigError for unknown keys or bad values.
RunConfig config_from_settings(const Settings& settings);
std::vector<std::string> config_keys();

// Output root for runs without an explicit output_dir: $COLOR_OUTPUT_ROOT or "color_runs".
std::string default_output_root();

struct UpdateMetrics {
    std::size_t update_index = 0;
    double avg_acc = 0.0;
    std::optional<double> forgetting;
    std::optional<double> routing_acc;
    std::optional<double> wall_ms;
};

struct RepeatResult {
    std::uint64_t init_seed = 0;
    std::uint64_t kmeans_seed = 0;
    AccuracyMatrix matrix;
    std::vector<UpdateMetrics> updates;
    // routed[t][tau] = test instances of tau routed to tau after update t (routing methods only).
    std::vector<std::vector<std::size_t>> routed;
    std::string checkpoint_path;

    const UpdateMetrics& final_update() const { return updates.back(); }
};

struct Summary {
    double mean = 0.0;
    std::optional<double> std;  // only for two or more values
};

Summary summarize(const std::vector<double>& values);

struct RunRecord {
    std::string run_id;
    RunConfig config;
    std::size_t params_trainable = 0;
    std::vector<RepeatResult> repeats;

    Summary final_avg_acc() const;
    std::optional<Summary> final_forgetting() const;
    std::optional<Summary> final_routing_acc() const;
};

std::string make_run_id(const RunConfig& config);

// Caches sequences, backbones, experts and per-expert predictions across runs
// that share settings, so methods and sweeps reuse trained experts.
class Workspace {
public:
    struct Impl;

    Workspace();
    ~Workspace();
    Workspace(const Workspace&) = delete;
    Workspace& operator=(const Workspace&) = delete;

    const DatasetSequence& sequence(const RunConfig& config);
    const ViTParams& backbone(const RunConfig& config);
    const Expert& expert(const RunConfig& config, std::size_t update, std::uint64_t init_seed);
    std::size_t experts_trained() const;
    Impl& impl() { return *impl_; }

private:
    std::unique_ptr<Impl> impl_;
};

DatasetSequence build_sequence(const RunConfig& config);
// Pretrains a backbone on the pool derived from config.data_seed.
PretrainResult pretrain_for_config(const RunConfig& config);
std::uint64_t expert_seed(std::uint64_t init_seed, std::size_t update);

// Dispatches on config.method.
RunRecord run_continual(const RunConfig& config, Workspace& workspace);
RunRecord run_continual(const RunConfig& config);
RunRecord run_ftseq_baseline(const RunConfig& config, Workspace& workspace);
RunRecord run_joint_upper_bound(const RunConfig& config, Workspace& workspace);

enum class SweepAxis { rank, clusters };
std::string to_string(SweepAxis axis);
SweepAxis parse_sweep_axis(const std::string& text);

struct SweepResult {
    SweepAxis axis = SweepAxis::rank;
    std::vector<std::size_t> values;
    std::vector<RunRecord> records;  // one per value
    std::vector<std::string> errors; // per value, empty when the run succeeded
};

// Values must be non-empty and strictly increasing. A failing value is
// recorded in `errors` and the remaining values still run.
SweepResult sweep(const RunConfig& config, SweepAxis axis, const std::vector<std::size_t>& values,
                  Workspace& workspace);

// Rebuilds the models stored in a run checkpoint, regenerates the data from the
// stored configuration and re-evaluates. Returns the recomputed result.
RepeatResult replay_checkpoint(const Checkpoint& checkpoint);
// True when the replayed accuracy matrix and metrics equal the stored ones.
bool replay_matches(const Checkpoint& checkpoint);

// Output.
extern const std::vector<std::string> kResultsColumns;
void write_results_csv(const std::vector<RunRecord>& records, std::ostream& out);
void write_summary_csv(const std::vector<RunRecord>& records, std::ostream& out);
void write_sweep_csv(const SweepResult& result, std::ostream& out);
// Parameter-efficiency table for the ViT-B/16 dimensions and the given toy config.
std::string parameter_table(const ModelConfig& toy, std::size_t toy_rank, std::size_t toy_classes);
// Writes results.csv, summary.csv and report.txt into `directory`.
void write_report(const std::vector<RunRecord>& records, const std::string& directory);
std::string format_value(std::optional<double> value);

// Raw float32 image files plus manifest.json describing every split.
void export_sequence(const DatasetSequence& sequence, const std::string& directory);

}  // namespace color
