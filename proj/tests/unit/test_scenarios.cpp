#include <doctest.h>

#include <set>

#include "color/error.hpp"
#include "color/scenarios.hpp"
#include "support.hpp"

using namespace color;

namespace {

SyntheticImageSpec small_spec(std::size_t classes) {
    SyntheticImageSpec s;
    s.num_classes = classes;
    s.train_per_class = 6;
    s.test_per_class = 4;
    s.image_size = 8;
    s.seed = 3;
    return s;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("scenario names") {
    CHECK(parse_scenario("dil") == ScenarioKind::dil);
    CHECK(to_string(ScenarioKind::til) == "til");
    CHECK_THROWS_AS(parse_scenario("xil"), ConfigError);
}

TEST_CASE("domain-incremental sequence") {
    const DatasetSequence seq = generate_dil_sequence(small_spec(3), 4);
    REQUIRE(seq.updates.size() == 4);
    CHECK(seq.total_classes() == 3);
    CHECK_FALSE(seq.full_scale);
    std::set<std::string> ids;
    for (std::size_t t = 0; t < 4; ++t) {
        const DatasetUpdate& u = seq.updates[t];
        ids.insert(u.dataset_id);
        CHECK(u.label_map == std::vector<int>{0, 1, 2});
        CHECK(u.train.size() == 18);
        CHECK(u.test.size() == 12);
        CHECK(u.train.images.shape() == Shape{18, 8, 8, 3});
        for (int d : u.train.domains) CHECK(d == u.domain_id);
    }
    CHECK(ids.size() == 4);
}

TEST_CASE("class-incremental sequence") {
    const DatasetSequence seq = generate_cil_sequence(small_spec(6), 3, 2);
    REQUIRE(seq.updates.size() == 3);
    CHECK(seq.total_classes() == 6);
    for (std::size_t t = 0; t < 3; ++t) {
        const DatasetUpdate& u = seq.updates[t];
        CHECK(u.label_map == std::vector<int>{static_cast<int>(2 * t), static_cast<int>(2 * t + 1)});
        for (int l : u.test.labels) CHECK((l == u.label_map[0] || l == u.label_map[1]));
    }
    const DatasetSequence til = generate_cil_sequence(small_spec(6), 3, 2, ScenarioKind::til);
    CHECK(til.scenario == ScenarioKind::til);
    CHECK(til.updates[1].dataset_id == "til-1");
}

TEST_CASE("large class counts are full scale") {
    SyntheticImageSpec s = small_spec(100);
    s.train_per_class = 1;
    s.test_per_class = 1;
    CHECK(generate_cil_sequence(s, 10, 10).full_scale);
}

TEST_CASE("sequence contracts") {
    CHECK_THROWS_AS(generate_cil_sequence(small_spec(5), 2, 2), ContractError);
    CHECK_THROWS_AS(generate_cil_sequence(small_spec(4), 2, 2, ScenarioKind::dil), ContractError);
    CHECK_THROWS_AS(generate_dil_sequence(small_spec(3), 0), ContractError);
    SyntheticImageSpec bad = small_spec(3);
    bad.margin = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sequence validation") {
    DatasetSequence seq = generate_cil_sequence(small_spec(4), 2, 2);
    SUBCASE("overlapping class-incremental label maps") {
        seq.updates[1].label_map = {1, 2};
        CHECK_THROWS_AS(seq.validate(), DataError);
    }
    SUBCASE("duplicate ids") {
        seq.updates[1].dataset_id = seq.updates[0].dataset_id;
        CHECK_THROWS_AS(seq.validate(), DataError);
    }
    SUBCASE("label outside the map") {
        seq.updates[0].train.labels[0] = 3;
        CHECK_THROWS_AS(seq.validate(), DataError);
    }
    SUBCASE("domain-incremental maps must agree") {
        DatasetSequence dil = generate_dil_sequence(small_spec(2), 2);
        dil.updates[1].label_map = {0};
        dil.updates[1].train.labels.assign(dil.updates[1].train.size(), 0);
        dil.updates[1].test.labels.assign(dil.updates[1].test.size(), 0);
        CHECK_THROWS_AS(dil.validate(), DataError);
    }
}

TEST_CASE("generation is deterministic and splits differ") {
    const DatasetSequence a = generate_dil_sequence(small_spec(3), 2);
    const DatasetSequence b = generate_dil_sequence(small_spec(3), 2);
    for (std::size_t t = 0; t < 2; ++t) {
        CHECK(values(a.updates[t].train.images) == values(b.updates[t].train.images));
        CHECK(a.updates[t].train.labels == b.updates[t].train.labels);
    }
    const std::vector<double> train = values(a.updates[0].train.images), test = values(a.updates[0].test.images);
    const std::size_t pixels = 8 * 8 * 3;
    for (std::size_t i = 0; i < a.updates[0].train.size(); ++i)
        for (std::size_t j = 0; j < a.updates[0].test.size(); ++j)
            CHECK(std::vector<double>(train.begin() + i * pixels, train.begin() + (i + 1) * pixels) !=
                  std::vector<double>(test.begin() + j * pixels, test.begin() + (j + 1) * pixels));

    SyntheticImageSpec other = small_spec(3);
    other.seed = 4;
    CHECK(values(generate_dil_sequence(other, 1).updates[0].train.images) != values(a.updates[0].train.images));
}

TEST_CASE("domains") {
    const std::vector<Domain> d = default_domains(8, 1.0);
    REQUIRE(d.size() == 8);
    CHECK(d[0].id == 0);
    CHECK(std::holds_alternative<Identity>(d[0].transforms.at(0)));
    std::set<std::string> names;
    for (const Domain& dom : d) names.insert(describe(dom));
    CHECK(names.size() == 8);

    const SyntheticImageSpec s = small_spec(2);
    const Dataset plain = generate_images(s, {0, 1}, d[0], Split::train);
    const Dataset rotated = generate_images(s, {0, 1}, d[1], Split::train);
    CHECK(values(plain.images) != values(rotated.images));
    CHECK(plain.labels == rotated.labels);
}

TEST_CASE("pretraining pool") {
    const SyntheticImageSpec spec = default_pool_spec(9);
    CHECK(spec.signature_offset >= 1000);
    SyntheticImageSpec small = spec;
    small.num_classes = 4;
    small.train_per_class = 3;
    small.test_per_class = 2;
    small.image_size = 8;
    const PretrainPool pool = make_pretraining_pool(small);
    CHECK(pool.num_classes == 4);
    CHECK(pool.train.size() == 12);
    CHECK(pool.test.size() == 8);
    small.signature_offset = 10;
    CHECK_THROWS_AS(make_pretraining_pool(small), ContractError);
}

TEST_CASE("small pretraining runs are deterministic and freeze the backbone") {
    SyntheticImageSpec spec = default_pool_spec(1);
    spec.num_classes = 3;
    spec.train_per_class = 8;
    spec.test_per_class = 4;
    spec.image_size = 8;
    const PretrainPool pool = make_pretraining_pool(spec);
    TrainConfig cfg = default_pretrain_config(2);
    cfg.epochs = 3;
    cfg.batch_size = 8;
    const ModelConfig model = testing::tiny_model();
    const PretrainResult a = pretrain_backbone(pool, model, cfg, 0.0);
    const PretrainResult b = pretrain_backbone(pool, model, cfg, 0.0);
    CHECK(a.backbone.frozen);
    CHECK(a.test_accuracy == b.test_accuracy);
    CHECK(a.log.size() == 3);
    const NamedTensors ta = a.backbone.named_tensors(), tb = b.backbone.named_tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) {
        CHECK(values(ta[i].second) == values(tb[i].second));
        CHECK_FALSE(ta[i].second.requires_grad());
    }
    CHECK_THROWS_AS(pretrain_backbone(pool, model, cfg, 1.01), NumericError);
}
