#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "color/error.hpp"
#include "color/harness.hpp"
#include "color/lora.hpp"

namespace color {

namespace fs = std::filesystem;

const std::vector<std::string> kResultsColumns = {"run_id",   "method",     "scenario",    "update_index",
                                                  "rank",     "clusters",   "seed",        "avg_acc",
                                                  "forgetting", "routing_acc", "params_trainable", "wall_ms"};

std::string format_value(std::optional<double> value) {
    if (!value) return "N/A";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", *value);
    return buf;
}

namespace {

void write_header(std::ostream& out, const std::vector<std::string>& columns) {
    for (std::size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << columns[i];
    out << '\n';
}

std::string with_commas(std::size_t n) {
    std::string digits = std::to_string(n);
    std::string out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
        out += digits[i];
    }
    return out;
}

bool has_routing(const RunRecord& r) {
    return (r.config.method == Method::color || r.config.method == Method::colorpp) &&
           r.config.scenario != ScenarioKind::til;
}

std::string clusters_field(const RunRecord& r) {
    return has_routing(r) ? std::to_string(r.config.effective_clusters()) : "N/A";
}

std::string rank_field(const RunRecord& r) {
    if (r.config.method == Method::ftseq) return "N/A";
    if (r.config.method == Method::joint && r.config.joint_mode == JointMode::full) return "N/A";
    return std::to_string(r.config.train.rank);
}

void write_rows(const RunRecord& r, std::ostream& out) {
    for (const RepeatResult& rep : r.repeats) {
        for (const UpdateMetrics& u : rep.updates) {
            out << r.run_id << ',' << to_string(r.config.method) << ',' << to_string(r.config.scenario) << ','
                << u.update_index << ',' << rank_field(r) << ',' << clusters_field(r) << ',' << rep.init_seed << ','
                << format_value(u.avg_acc) << ',' << format_value(u.forgetting) << ','
                << format_value(u.routing_acc) << ',' << r.params_trainable << ',' << format_value(u.wall_ms)
                << '\n';
        }
    }
}

std::string std_field(const std::optional<Summary>& s) { return s ? format_value(s->std) : "N/A"; }
std::string mean_field(const std::optional<Summary>& s) {
    return s ? format_value(s->mean) : "N/A";
}

std::ofstream open_output(const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    return out;
}

void check_written(std::ofstream& out, const fs::path& path) {
    out.flush();
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace

void write_results_csv(const std::vector<RunRecord>& records, std::ostream& out) {
    write_header(out, kResultsColumns);
    for (const RunRecord& r : records) write_rows(r, out);
}

void write_summary_csv(const std::vector<RunRecord>& records, std::ostream& out) {
    write_header(out, {"run_id", "method", "scenario", "rank", "clusters", "repeats", "avg_acc_mean", "avg_acc_std",
                       "forgetting_mean", "forgetting_std", "routing_acc_mean", "params_trainable"});
    for (const RunRecord& r : records) {
        if (r.repeats.empty()) continue;
        const Summary acc = r.final_avg_acc();
        const auto forget = r.final_forgetting();
        const auto routing = r.final_routing_acc();
        out << r.run_id << ',' << to_string(r.config.method) << ',' << to_string(r.config.scenario) << ','
            << rank_field(r) << ',' << clusters_field(r) << ',' << r.repeats.size() << ',' << format_value(acc.mean)
            << ',' << format_value(acc.std) << ',' << mean_field(forget) << ',' << std_field(forget) << ','
            << mean_field(routing) << ',' << r.params_trainable << '\n';
    }
}

void write_sweep_csv(const SweepResult& result, std::ostream& out) {
    write_header(out, {"axis", "value", "run_id", "method", "scenario", "seed", "avg_acc", "forgetting",
                       "routing_acc", "params_trainable", "status"});
    for (std::size_t i = 0; i < result.records.size(); ++i) {
        const RunRecord& r = result.records[i];
        const std::string prefix = to_string(result.axis) + "," + std::to_string(result.values[i]) + "," + r.run_id +
                                   "," + to_string(r.config.method) + "," + to_string(r.config.scenario) + ",";
        if (!result.errors[i].empty()) {
            out << prefix << "N/A,N/A,N/A,N/A,N/A,failed\n";
            continue;
        }
        for (const RepeatResult& rep : r.repeats) {
            const UpdateMetrics& u = rep.final_update();
            out << prefix << rep.init_seed << ',' << format_value(u.avg_acc) << ',' << format_value(u.forgetting)
                << ',' << format_value(u.routing_acc) << ',' << r.params_trainable << ",ok\n";
        }
    }
}

std::string parameter_table(const ModelConfig& toy, std::size_t toy_rank, std::size_t toy_classes) {
    struct Row {
        std::string name;
        ModelConfig model;
        std::size_t rank, classes;
    };
    const std::vector<Row> rows = {
        {"ViT-B/16", ModelConfig::vit_base(), 1, 2},
        {"ViT-B/16", ModelConfig::vit_base(), 64, 2},
        {"ViT-B/16", ModelConfig::vit_base(), 64, 345},
        {"toy", toy, toy_rank, toy_classes},
    };
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %6s %6s %6s %8s %14s %16s %9s\n", "backbone", "layers", "dim", "rank",
                  "classes", "trainable", "backbone_params", "share");
    out << line;
    for (const Row& r : rows) {
        const std::size_t trainable = count_trainable_params(r.model, r.rank, r.classes);
        const std::size_t frozen = count_backbone_params(r.model);
        std::snprintf(line, sizeof line, "%-10s %6zu %6zu %6zu %8zu %14s %16s %8.3f%%\n", r.name.c_str(),
                      r.model.num_layers, r.model.embed_dim, r.rank, r.classes, with_commas(trainable).c_str(),
                      with_commas(frozen).c_str(), 100.0 * static_cast<double>(trainable) / static_cast<double>(frozen));
        out << line;
    }
    return out.str();
}

void write_report(const std::vector<RunRecord>& records, const std::string& directory) {
    if (records.empty()) throw ContractError("report needs at least one run record");
    const fs::path dir(directory);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

    const fs::path results = dir / "results.csv", summary = dir / "summary.csv", text = dir / "report.txt";
    {
        std::ofstream out = open_output(results);
        write_results_csv(records, out);
        check_written(out, results);
    }
    {
        std::ofstream out = open_output(summary);
        write_summary_csv(records, out);
        check_written(out, summary);
    }
    std::ofstream out = open_output(text);
    const RunRecord& first = records.front();
    const std::size_t toy_classes =
        first.config.scenario == ScenarioKind::dil ? first.config.num_classes : first.config.classes_per_update;
    out << "Trainable parameters per expert\n\n"
        << parameter_table(first.config.model, first.config.train.rank, toy_classes) << '\n';
    out << "Final metrics (mean, std over repeats)\n\n";
    char line[200];
    std::snprintf(line, sizeof line, "%-44s %8s %8s %10s %8s %8s %12s\n", "run", "acc", "std", "forgetting", "std",
                  "routing", "params");
    out << line;
    for (const RunRecord& r : records) {
        if (r.repeats.empty()) continue;
        const Summary acc = r.final_avg_acc();
        const auto forget = r.final_forgetting();
        const auto routing = r.final_routing_acc();
        std::snprintf(line, sizeof line, "%-44s %8s %8s %10s %8s %8s %12s\n", r.run_id.c_str(),
                      format_value(acc.mean).c_str(), format_value(acc.std).c_str(), mean_field(forget).c_str(),
                      std_field(forget).c_str(), mean_field(routing).c_str(),
                      with_commas(r.params_trainable).c_str());
        out << line;
    }
    check_written(out, text);
}

void export_sequence(const DatasetSequence& sequence, const std::string& directory) {
    const fs::path dir(directory);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    nlohmann::json manifest = {{"scenario", to_string(sequence.scenario)},
                               {"format", "float32 little-endian, row-major [n x height x width x channels]"},
                               {"updates", nlohmann::json::array()}};
    for (std::size_t t = 0; t < sequence.updates.size(); ++t) {
        const DatasetUpdate& u = sequence.updates[t];
        nlohmann::json entry = {{"dataset_id", u.dataset_id}, {"domain_id", u.domain_id}, {"label_map", u.label_map}};
        for (const auto& [split, data] : {std::pair<const char*, const Dataset*>{"train", &u.train},
                                          std::pair<const char*, const Dataset*>{"test", &u.test}}) {
            const std::string file = "update" + std::to_string(t) + "_" + split + ".f32";
            const fs::path path = dir / file;
            std::ofstream out(path, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
            for (double v : data->images.data()) {
                const float f = static_cast<float>(v);
                char bytes[4];
                std::memcpy(bytes, &f, 4);
                if constexpr (std::endian::native == std::endian::big) {
                    std::swap(bytes[0], bytes[3]);
                    std::swap(bytes[1], bytes[2]);
                }
                out.write(bytes, 4);
            }
            check_written(out, path);
            entry[split] = {{"file", file},
                            {"shape", data->images.shape()},
                            {"labels", data->labels},
                            {"domains", data->domains}};
        }
        manifest["updates"].push_back(entry);
    }
    const fs::path mpath = dir / "manifest.json";
    std::ofstream out = open_output(mpath);
    out << manifest.dump(2) << '\n';
    check_written(out, mpath);
}

}  // namespace color
