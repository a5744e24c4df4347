#include <doctest.h>

#include <cstring>

#include "color/checkpoint.hpp"
#include "color/error.hpp"
#include "support.hpp"

using namespace color;

namespace {

Tensor single(Shape shape, std::uint64_t seed) {
    Tensor t = testing::random_tensor(std::move(shape), seed);
    round_to_single(t);
    return t;
}

Checkpoint sample() {
    Checkpoint c;
    c.metadata = {{"kind", "test"}, {"note", "two tensors"}};
    c.tensors = {{"a", single({2, 3}, 1)}, {"b.c", single({4}, 2)}};
    return c;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::uint64_t format_offset(const std::vector<std::uint8_t>& bytes) {
    try {
        parse_checkpoint(bytes);
    } catch (const FormatError& e) {
        return e.offset();
    }
    FAIL("expected a format error");
    return 0;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
    const Checkpoint c = sample();
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(c);
    const Checkpoint back = parse_checkpoint(bytes);
    CHECK(back.metadata["kind"] == "test");
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.tensor("a").shape() == Shape{2, 3});
    CHECK(values(back.tensor("a")) == values(c.tensor("a")));
    CHECK(values(back.tensor("b.c")) == values(c.tensor("b.c")));
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK(fingerprint(serialize_checkpoint(back)) == fingerprint(bytes));
    CHECK_THROWS_AS(back.tensor("missing"), DataError);
}

TEST_CASE("header layout") {
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(sample());
    CHECK(std::memcmp(bytes.data(), "CLRCKPT\0", 8) == 0);
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 8, 4);
    CHECK(version == kCheckpointVersion);
    std::uint64_t manifest = 0;
    std::memcpy(&manifest, bytes.data() + 12, 8);
    CHECK(bytes.size() == 20 + manifest + 4 * (6 + 4));
}

TEST_CASE("files and manifests") {
    const testing::TempDir dir("checkpoint");
    const std::string path = dir.file("x.ckpt");
    save_checkpoint(sample(), path);
    const nlohmann::json m = read_manifest(path);
    CHECK(m["tensors"].size() == 2);
    CHECK(m["metadata"]["note"] == "two tensors");
    CHECK(m["tensors"][1]["offset"] == 24);
    const Checkpoint loaded = load_checkpoint(path);
    CHECK(values(loaded.tensor("a")) == values(sample().tensor("a")));
    CHECK_THROWS_AS(load_checkpoint(dir.file("missing.ckpt")), IoError);
}

TEST_CASE("corrupted files are rejected with offsets") {
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(sample());
    SUBCASE("bad magic") {
        std::vector<std::uint8_t> b = bytes;
        b[0] = 'X';
        CHECK(format_offset(b) == 0);
    }
    SUBCASE("truncated payload") {
        std::vector<std::uint8_t> b(bytes.begin(), bytes.end() - 3);
        CHECK(format_offset(b) == b.size());
    }
    SUBCASE("truncated header") {
        std::vector<std::uint8_t> b(bytes.begin(), bytes.begin() + 10);
        CHECK(format_offset(b) == 10);
    }
    SUBCASE("trailing bytes") {
        std::vector<std::uint8_t> b = bytes;
        b.push_back(0);
        CHECK(format_offset(b) == bytes.size());
    }
    SUBCASE("unsupported version") {
        std::vector<std::uint8_t> b = bytes;
        b[8] = 9;
        CHECK_THROWS_AS(parse_checkpoint(b), VersionError);
    }
    SUBCASE("broken manifest json") {
        std::vector<std::uint8_t> b = bytes;
        b[20] = '#';
        CHECK(format_offset(b) >= 20);
    }
}

TEST_CASE("serialization contracts") {
    Checkpoint dup = sample();
    dup.tensors.push_back({"a", single({1}, 3)});
    CHECK_THROWS_AS(serialize_checkpoint(dup), ContractError);
    Checkpoint off_grid;
    off_grid.tensors = {{"x", Tensor(Shape{1}, std::vector<double>{0.1})}};
    CHECK_THROWS_AS(serialize_checkpoint(off_grid), ContractError);
}

TEST_CASE("backbone checkpoints") {
    const ViTParams p = ViTParams::initialize(testing::tiny_model(), 5);
    const ViTParams back = backbone_from_checkpoint(parse_checkpoint(serialize_checkpoint(backbone_checkpoint(p))));
    CHECK(back.frozen);
    CHECK(back.config.embed_dim == 8);
    const NamedTensors a = p.named_tensors(), b = back.named_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(values(a[i].second) == values(b[i].second));
    }
    const ModelConfig cfg = model_config_from_json(to_json(p.config));
    CHECK(cfg.num_heads == p.config.num_heads);
    CHECK(cfg.layer_norm_eps == p.config.layer_norm_eps);
}

TEST_CASE("expert checkpoints") {
    const ModelConfig model = testing::tiny_model();
    Expert e;
    e.dataset_id = "d3";
    e.adapters = new_adapter_set(model, 2, 7, "d3");
    for (LoraAdapter& ad : e.adapters.adapters) {
        ad.b = single({8, 2}, 8);
        ad.b.set_requires_grad(true);
    }
    e.head = ClassifierHead::create(8, {4, 9}, 1);
    e.seal();
    const Checkpoint c = parse_checkpoint(serialize_checkpoint(expert_checkpoint(e, model)));
    const Expert back = expert_from_checkpoint(c, "expert.", expert_info(e), model);
    CHECK(back.trained);
    CHECK(back.dataset_id == "d3");
    CHECK(back.head.label_map == std::vector<int>{4, 9});
    const NamedTensors a = e.named_tensors(), b = back.named_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(values(a[i].second) == values(b[i].second));
}
