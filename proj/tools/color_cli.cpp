#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "color/checkpoint.hpp"
#include "color/error.hpp"
#include "color/harness.hpp"
#include "color/lora.hpp"

namespace fs = std::filesystem;
using namespace color;

namespace {

struct ConfigFlags {
    std::string config_file;
    std::map<std::string, std::string> values;
    std::vector<std::string> sets;
};

// Every RunConfig key becomes a --key flag; --config and --set feed the same table.
void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
    cmd->add_option("--config", flags.config_file, "key = value configuration file");
    cmd->add_option("--set", flags.sets, "extra key=value overrides");
    for (const std::string& key : config_keys())
        cmd->add_option("--" + key, flags.values[key])->group("Run settings");
}

RunConfig resolve_config(CLI::App* cmd, const ConfigFlags& flags) {
    Settings settings;
    if (!flags.config_file.empty()) settings = read_config_file(flags.config_file);
    for (const std::string& s : flags.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        settings[s.substr(0, eq)] = s.substr(eq + 1);
    }
    for (const auto& [key, value] : flags.values)
        if (cmd->count("--" + key) > 0) settings[key] = value;
    RunConfig c = config_from_settings(settings);
    c.validate();
    return c;
}

std::vector<std::size_t> parse_values(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoul(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("sweep value '" + item + "' is not a non-negative integer");
        }
    }
    return out;
}

void print_summary(const std::vector<RunRecord>& records) {
    for (const RunRecord& r : records) {
        if (r.repeats.empty()) continue;
        const Summary acc = r.final_avg_acc();
        const auto forget = r.final_forgetting();
        const auto routing = r.final_routing_acc();
        std::printf("%s  avg_acc %s", r.run_id.c_str(), format_value(acc.mean).c_str());
        if (acc.std) std::printf(" +- %s", format_value(acc.std).c_str());
        std::printf("  forgetting %s", forget ? format_value(forget->mean).c_str() : "N/A");
        std::printf("  routing %s", routing ? format_value(routing->mean).c_str() : "N/A");
        std::printf("  params %zu\n", r.params_trainable);
    }
}

// Run checkpoints land in <output_dir>/<run_id>/, next to the report files.
std::string output_dir_for(RunConfig& c, const std::string& name) {
    if (c.output_dir.empty()) c.output_dir = default_output_root();
    return (fs::path(c.output_dir) / name).string();
}

int cmd_pretrain(CLI::App* cmd, const ConfigFlags& flags, const std::string& out) {
    const RunConfig c = resolve_config(cmd, flags);
    const PretrainResult r = pretrain_for_config(c);
    const std::string path = out.empty() ? (fs::path(default_output_root()) / "backbone.ckpt").string() : out;
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    save_checkpoint(backbone_checkpoint(r.backbone), path);
    std::printf("pretraining accuracy %.4f\nbackbone written to %s\n", r.test_accuracy, path.c_str());
    return 0;
}

int cmd_run(CLI::App* cmd, const ConfigFlags& flags) {
    RunConfig c = resolve_config(cmd, flags);
    const std::string dir = output_dir_for(c, make_run_id(c));
    const RunRecord r = run_continual(c);
    write_report({r}, dir);
    print_summary({r});
    std::printf("results written to %s\n", dir.c_str());
    return 0;
}

int cmd_sweep(CLI::App* cmd, const ConfigFlags& flags, const std::string& axis_text, const std::string& values_text) {
    RunConfig c = resolve_config(cmd, flags);
    const SweepAxis axis = parse_sweep_axis(axis_text);
    const std::vector<std::size_t> values = parse_values(values_text);
    const std::string dir = output_dir_for(c, "sweep-" + to_string(axis) + "-" + make_run_id(c));
    Workspace ws;
    const SweepResult result = sweep(c, axis, values, ws);
    std::vector<RunRecord> done;
    for (std::size_t i = 0; i < result.records.size(); ++i) {
        if (result.errors[i].empty())
            done.push_back(result.records[i]);
        else
            std::fprintf(stderr, "%s=%zu failed: %s\n", to_string(axis).c_str(), result.values[i],
                         result.errors[i].c_str());
    }
    if (!done.empty()) write_report(done, dir);
    fs::create_directories(dir);
    const fs::path csv = fs::path(dir) / "sweep.csv";
    std::ofstream out(csv);
    if (!out) throw IoError("cannot open '" + csv.string() + "' for writing");
    write_sweep_csv(result, out);
    print_summary(done);
    std::printf("sweep written to %s\n", csv.string().c_str());
    return done.size() == result.records.size() ? 0 : 3;
}

int cmd_report(CLI::App* cmd, const ConfigFlags& flags) {
    const RunConfig c = resolve_config(cmd, flags);
    const std::size_t classes = c.scenario == ScenarioKind::dil ? c.num_classes : c.classes_per_update;
    std::printf("%s", parameter_table(c.model, c.train.rank, classes).c_str());
    return 0;
}

int cmd_inspect(const std::string& path, bool replay) {
    const nlohmann::json manifest = read_manifest(path);
    const nlohmann::json& meta = manifest["metadata"];
    std::printf("format version %u\n", kCheckpointVersion);
    std::printf("kind %s\n", meta.value("kind", std::string("?")).c_str());
    if (meta.contains("run_id")) std::printf("run_id %s\n", meta["run_id"].get<std::string>().c_str());
    std::size_t scalars = 0;
    for (const auto& t : manifest["tensors"]) {
        std::size_t n = 1;
        std::string shape;
        for (const auto& d : t["shape"]) {
            n *= d.get<std::size_t>();
            shape += (shape.empty() ? "" : "x") + std::to_string(d.get<std::size_t>());
        }
        scalars += n;
        std::printf("  %-40s %-14s offset %llu\n", t["name"].get<std::string>().c_str(), shape.c_str(),
                    static_cast<unsigned long long>(t["offset"].get<std::uint64_t>()));
    }
    std::printf("%zu tensors, %zu values\n", manifest["tensors"].size(), scalars);
    if (meta.contains("updates")) {
        for (const auto& u : meta["updates"]) {
            auto show = [](const nlohmann::json& v) { return v.is_null() ? std::string("N/A") : format_value(v.get<double>()); };
            std::printf("update %zu  avg_acc %s  forgetting %s  routing %s\n", u["update_index"].get<std::size_t>(),
                        show(u["avg_acc"]).c_str(), show(u["forgetting"]).c_str(), show(u["routing_acc"]).c_str());
        }
    }
    if (replay) {
        const bool ok = replay_matches(load_checkpoint(path));
        std::printf("replay %s\n", ok ? "matches" : "DIFFERS");
        return ok ? 0 : 3;
    }
    return 0;
}

int cmd_export(CLI::App* cmd, const ConfigFlags& flags, const std::string& out) {
    const RunConfig c = resolve_config(cmd, flags);
    const DatasetSequence seq = build_sequence(c);
    const std::string dir = out.empty() ? (fs::path(default_output_root()) / "data").string() : out;
    export_sequence(seq, dir);
    std::printf("%zu updates written to %s\n", seq.updates.size(), dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual learning with per-dataset low-rank experts"};
    app.require_subcommand(1);

    ConfigFlags pre_flags, run_flags, sweep_flags, report_flags, export_flags;
    std::string pre_out, export_out, axis = "rank", values, ckpt_path;
    bool replay = false;

    CLI::App* pre = app.add_subcommand("pretrain", "pretrain and save a frozen backbone");
    add_config_flags(pre, pre_flags);
    pre->add_option("--out", pre_out, "backbone checkpoint path");

    CLI::App* run = app.add_subcommand("run", "run one continual-learning configuration");
    add_config_flags(run, run_flags);

    CLI::App* sw = app.add_subcommand("sweep", "run a configuration for several ranks or cluster counts");
    add_config_flags(sw, sweep_flags);
    sw->add_option("--axis", axis, "rank or clusters");
    sw->add_option("--values", values, "comma-separated, strictly increasing")->required();

    CLI::App* rep = app.add_subcommand("report", "print the trainable-parameter table");
    add_config_flags(rep, report_flags);

    CLI::App* inspect = app.add_subcommand("inspect-checkpoint", "print a checkpoint manifest");
    inspect->add_option("path", ckpt_path)->required();
    inspect->add_flag("--replay", replay, "re-evaluate a run checkpoint and compare the stored metrics");

    CLI::App* exp = app.add_subcommand("export-data", "write the generated datasets as raw float32 files");
    add_config_flags(exp, export_flags);
    exp->add_option("--out", export_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::config);
    }

    try {
        if (pre->parsed()) return cmd_pretrain(pre, pre_flags, pre_out);
        if (run->parsed()) return cmd_run(run, run_flags);
        if (sw->parsed()) return cmd_sweep(sw, sweep_flags, axis, values);
        if (rep->parsed()) return cmd_report(rep, report_flags);
        if (inspect->parsed()) return cmd_inspect(ckpt_path, replay);
        if (exp->parsed()) return cmd_export(exp, export_flags, export_out);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(e.exit_code());
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(ExitCode::io);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(ExitCode::numeric);
    }
    return 0;
}
