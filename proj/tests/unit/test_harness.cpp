#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "color/checkpoint.hpp"
#include "color/error.hpp"
#include "color/harness.hpp"
#include "support.hpp"

using namespace color;
namespace fs = std::filesystem;

namespace {

// A random frozen tiny backbone on disk and a run config that uses it.
struct TinySetup {
    testing::TempDir dir;
    RunConfig config;

    explicit TinySetup(const std::string& name, ScenarioKind scenario = ScenarioKind::dil) : dir(name) {
        ViTParams p = ViTParams::initialize(testing::tiny_model(), 1);
        p.freeze();
        save_checkpoint(backbone_checkpoint(p), dir.file("backbone.ckpt"));
        config = RunConfig::defaults(scenario);
        config.model = testing::tiny_model();
        config.backbone_path = dir.file("backbone.ckpt");
        config.train.rank = 2;
        config.train.epochs = 2;
        config.train.batch_size = 8;
        config.train_per_class = 6;
        config.test_per_class = 4;
        config.repeats = 2;
        config.clusters = 2;
        config.save_checkpoints = false;
        if (scenario == ScenarioKind::dil) {
            config.num_classes = 3;
            config.num_domains = 2;
        } else {
            config.num_classes = 4;
            config.classes_per_update = 2;
        }
    }
};

std::string results_csv(const std::vector<RunRecord>& records) {
    std::ostringstream out;
    write_results_csv(records, out);
    return out.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

}  // namespace

TEST_CASE("method and axis names") {
    for (Method m : {Method::color, Method::colorpp, Method::oracle, Method::ftseq, Method::joint})
        CHECK(parse_method(to_string(m)) == m);
    CHECK_THROWS_AS(parse_method("lwf"), ConfigError);
    CHECK(parse_sweep_axis("clusters") == SweepAxis::clusters);
    CHECK_THROWS_AS(parse_sweep_axis("epochs"), ConfigError);
}

TEST_CASE("configuration defaults") {
    const RunConfig dil = RunConfig::defaults(ScenarioKind::dil);
    CHECK(dil.effective_clusters() == 5);
    CHECK(dil.num_updates() == 6);
    CHECK_NOTHROW(dil.validate());
    const RunConfig cil = RunConfig::defaults(ScenarioKind::cil);
    CHECK(cil.effective_clusters() == 8);
    CHECK(cil.num_updates() == 10);
    CHECK_NOTHROW(cil.validate());
}

TEST_CASE("settings round trip") {
    RunConfig c = RunConfig::defaults(ScenarioKind::cil);
    c.train.rank = 4;
    c.train.learning_rate = 0.00123;
    c.joint_mode = JointMode::full;
    c.average_mode = AverageMode::task_mean;
    c.output_dir = "/tmp/x";
    const RunConfig back = config_from_settings(c.settings());
    CHECK(back.settings() == c.settings());
    CHECK(back.train.learning_rate == 0.00123);
    CHECK(back.scenario == ScenarioKind::cil);
    CHECK(config_keys().size() == c.settings().size());
}

TEST_CASE("configuration errors") {
    CHECK_THROWS_AS(config_from_settings({{"bogus", "1"}}), ConfigError);
    CHECK_THROWS_AS(config_from_settings({{"rank", "-1"}}), ConfigError);
    CHECK_THROWS_AS(config_from_settings({{"rank", "4x"}}), ConfigError);
    CHECK_THROWS_AS(config_from_settings({{"learning_rate", "fast"}}), ConfigError);
    CHECK_THROWS_AS(config_from_settings({{"record_wall_time", "maybe"}}), ConfigError);
    CHECK_THROWS_AS(config_from_settings({{"scenario", "nil"}}), ConfigError);

    RunConfig c = RunConfig::defaults(ScenarioKind::cil);
    c.classes_per_update = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RunConfig::defaults(ScenarioKind::dil);
    c.train.rank = 64;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RunConfig::defaults(ScenarioKind::dil);
    c.repeats = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config files") {
    const testing::TempDir dir("config_file");
    {
        std::ofstream f(dir.file("run.cfg"));
        f << "# comment\nscenario = cil\n\nrank = 4   # trailing\nmethod=ftseq\n";
    }
    const RunConfig c = config_from_settings(read_config_file(dir.file("run.cfg")));
    CHECK(c.scenario == ScenarioKind::cil);
    CHECK(c.train.rank == 4);
    CHECK(c.method == Method::ftseq);
    {
        std::ofstream f(dir.file("bad.cfg"));
        f << "rank 4\n";
    }
    CHECK_THROWS_AS(read_config_file(dir.file("bad.cfg")), ConfigError);
    CHECK_THROWS_AS(read_config_file(dir.file("absent.cfg")), IoError);
}

TEST_CASE("run ids and summaries") {
    RunConfig c = RunConfig::defaults(ScenarioKind::cil);
    c.train.rank = 8;
    c.data_seed = 3;
    c.init_seed = 4;
    CHECK(make_run_id(c) == "color-cil-r8-k8-d3-s4");
    const Summary one = summarize({0.5});
    CHECK(one.mean == 0.5);
    CHECK_FALSE(one.std.has_value());
    const Summary two = summarize({1.0, 3.0});
    CHECK(two.mean == 2.0);
    CHECK(*two.std == doctest::Approx(std::sqrt(2.0)));
    CHECK(format_value(std::nullopt) == "N/A");
    CHECK(format_value(0.25) == "0.250000");
}

TEST_CASE("parameter table") {
    const std::string table = parameter_table(ModelConfig{}, 8, 10);
    CHECK(table.find("38,402") != std::string::npos);
    CHECK(table.find("85,759,488") != std::string::npos);
    CHECK(lines(table).size() == 5);
}

TEST_CASE("domain-incremental run") {
    TinySetup s("harness_dil");
    Workspace ws;
    const RunRecord r = run_continual(s.config, ws);
    CHECK(r.run_id == make_run_id(s.config));
    REQUIRE(r.repeats.size() == 2);
    CHECK(r.params_trainable == count_trainable_params(s.config.model, 2, 3));
    for (const RepeatResult& rep : r.repeats) {
        REQUIRE(rep.updates.size() == 2);
        CHECK_FALSE(rep.updates[0].forgetting.has_value());
        CHECK(rep.updates[1].forgetting.has_value());
        CHECK(rep.updates[1].routing_acc.has_value());
        CHECK(*rep.updates[1].routing_acc >= 0.0);
        CHECK(*rep.updates[1].routing_acc <= 1.0);
        CHECK_FALSE(rep.updates[1].wall_ms.has_value());
    }
    CHECK(r.repeats[1].init_seed == r.repeats[0].init_seed + 1);
    CHECK(ws.experts_trained() == 4);

    SUBCASE("results csv") {
        const std::vector<std::string> rows = lines(results_csv({r}));
        REQUIRE(rows.size() == 1 + 2 * 2);
        CHECK(rows[0] ==
              "run_id,method,scenario,update_index,rank,clusters,seed,avg_acc,forgetting,routing_acc,params_trainable,"
              "wall_ms");
        CHECK(rows[1].find(",N/A,") != std::string::npos);
        CHECK(rows[1].substr(rows[1].size() - 4) == ",N/A");
    }
    SUBCASE("summary std needs two repeats") {
        std::ostringstream out;
        write_summary_csv({r}, out);
        const std::vector<std::string> rows = lines(out.str());
        REQUIRE(rows.size() == 2);
        CHECK(rows[1].find("N/A") == std::string::npos);
        RunRecord single = r;
        single.repeats.resize(1);
        std::ostringstream out1;
        write_summary_csv({single}, out1);
        CHECK(lines(out1.str())[1].find(",N/A,") != std::string::npos);
    }
    SUBCASE("oracle shares the experts") {
        RunConfig oc = s.config;
        oc.method = Method::oracle;
        const RunRecord o = run_continual(oc, ws);
        CHECK(ws.experts_trained() == 4);
        CHECK_FALSE(o.repeats[0].final_update().routing_acc.has_value());
        for (std::size_t i = 0; i < 2; ++i)
            CHECK(o.repeats[i].final_update().avg_acc >= r.repeats[i].final_update().avg_acc);
        CHECK(*o.repeats[0].final_update().forgetting == 0.0);
    }
    SUBCASE("reports") {
        write_report({r}, s.dir.file("report"));
        for (const char* f : {"results.csv", "summary.csv", "report.txt"})
            CHECK(fs::exists(fs::path(s.dir.file("report")) / f));
    }
}

TEST_CASE("runs are deterministic across workspaces") {
    TinySetup s("harness_det", ScenarioKind::cil);
    s.config.repeats = 1;
    for (Method m : {Method::color, Method::colorpp, Method::ftseq, Method::joint}) {
        s.config.method = m;
        Workspace a, b;
        CHECK(results_csv({run_continual(s.config, a)}) == results_csv({run_continual(s.config, b)}));
    }
}

TEST_CASE("with a single update the expert methods agree") {
    TinySetup s("harness_single");
    s.config.num_domains = 1;
    s.config.repeats = 1;
    Workspace ws;
    std::vector<double> acc;
    for (Method m : {Method::color, Method::colorpp, Method::oracle}) {
        s.config.method = m;
        acc.push_back(run_continual(s.config, ws).repeats[0].final_update().avg_acc);
    }
    CHECK(acc[0] == acc[2]);
    CHECK(acc[1] == acc[2]);
}

TEST_CASE("class-incremental baselines") {
    TinySetup s("harness_cil", ScenarioKind::cil);
    s.config.repeats = 1;
    Workspace ws;
    SUBCASE("sequential fine-tuning") {
        s.config.method = Method::ftseq;
        const RunRecord r = run_continual(s.config, ws);
        CHECK(r.repeats[0].updates.size() == 2);
        CHECK(r.repeats[0].final_update().forgetting.has_value());
        CHECK_FALSE(r.repeats[0].final_update().routing_acc.has_value());
        CHECK(results_csv({r}).find("ftseq,cil,0,N/A,N/A,") != std::string::npos);
    }
    SUBCASE("joint training records only the final update") {
        s.config.method = Method::joint;
        const RunRecord r = run_continual(s.config, ws);
        REQUIRE(r.repeats[0].updates.size() == 1);
        CHECK(r.repeats[0].updates[0].update_index == 1);
        CHECK(r.params_trainable == count_trainable_params(s.config.model, 2, 4));
        s.config.joint_mode = JointMode::full;
        const RunRecord full = run_continual(s.config, ws);
        CHECK(results_csv({full}).find("joint,cil,1,N/A,N/A,") != std::string::npos);
    }
    SUBCASE("task-incremental uses the given task id") {
        s.config.scenario = ScenarioKind::til;
        const RunRecord r = run_continual(s.config, ws);
        CHECK_FALSE(r.repeats[0].final_update().routing_acc.has_value());
    }
}

TEST_CASE("sweeps") {
    TinySetup s("harness_sweep", ScenarioKind::cil);
    s.config.repeats = 1;
    Workspace ws;
    CHECK_THROWS_AS(sweep(s.config, SweepAxis::rank, {}, ws), ConfigError);
    CHECK_THROWS_AS(sweep(s.config, SweepAxis::rank, {2, 2}, ws), ConfigError);
    CHECK_THROWS_AS(sweep(s.config, SweepAxis::clusters, {4, 1}, ws), ConfigError);

    const SweepResult one = sweep(s.config, SweepAxis::clusters, {1}, ws);
    REQUIRE(one.records.size() == 1);
    CHECK(one.errors[0].empty());
    CHECK(one.records[0].config.clusters == 1);

    const SweepResult mixed = sweep(s.config, SweepAxis::rank, {1, 9}, ws);
    CHECK(mixed.errors[0].empty());
    CHECK_FALSE(mixed.errors[1].empty());
    std::ostringstream out;
    write_sweep_csv(mixed, out);
    const std::vector<std::string> rows = lines(out.str());
    REQUIRE(rows.size() == 3);
    CHECK(rows[1].substr(rows[1].size() - 3) == ",ok");
    CHECK(rows[2].substr(rows[2].size() - 7) == ",failed");
}

TEST_CASE("run checkpoints replay") {
    TinySetup s("harness_replay");
    s.config.repeats = 1;
    s.config.save_checkpoints = true;
    s.config.output_dir = s.dir.file("out");
    for (Method m : {Method::color, Method::colorpp, Method::ftseq}) {
        s.config.method = m;
        Workspace ws;
        const RunRecord r = run_continual(s.config, ws);
        const std::string path = r.repeats[0].checkpoint_path;
        REQUIRE(fs::exists(path));
        const nlohmann::json manifest = read_manifest(path);
        CHECK(manifest["metadata"]["run_id"] == r.run_id);
        const Checkpoint ck = load_checkpoint(path);
        CHECK(replay_matches(ck));
        const RepeatResult again = replay_checkpoint(ck);
        CHECK(again.final_update().avg_acc == r.repeats[0].final_update().avg_acc);
    }
}

TEST_CASE("failures name the update and phase") {
    TinySetup s("harness_fail");
    s.config.repeats = 1;
    s.config.train.learning_rate = 1e30;
    s.config.train.epochs = 4;
    Workspace ws;
    try {
        run_continual(s.config, ws);
        FAIL("expected a numeric failure");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).rfind("update 0 (expert training): ", 0) == 0);
    }
}

TEST_CASE("mismatched backbone checkpoints are rejected") {
    TinySetup s("harness_mismatch");
    s.config.model.embed_dim = 16;
    s.config.model.num_heads = 2;
    Workspace ws;
    CHECK_THROWS_AS(ws.backbone(s.config), ConfigError);
}

TEST_CASE("data export") {
    TinySetup s("harness_export", ScenarioKind::cil);
    const DatasetSequence seq = build_sequence(s.config);
    export_sequence(seq, s.dir.file("data"));
    std::ifstream in(s.dir.file("data/manifest.json"));
    const nlohmann::json m = nlohmann::json::parse(in);
    REQUIRE(m["updates"].size() == 2);
    CHECK(m["scenario"] == "cil");
    const std::string file = s.dir.file("data/" + m["updates"][0]["train"]["file"].get<std::string>());
    CHECK(fs::file_size(file) == 4 * seq.updates[0].train.images.numel());
}
