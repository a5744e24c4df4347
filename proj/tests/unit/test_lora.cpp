#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "color/error.hpp"
#include "color/lora.hpp"
#include "support.hpp"

using namespace color;
using testing::random_tensor;

namespace {

// Singular values of an m x n matrix from the eigenvalues of M^T M (cyclic Jacobi).
std::vector<double> singular_values(const Tensor& m) {
    const std::size_t rows = m.dim(0), n = m.dim(1);
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t r = 0; r < rows; ++r) a[i * n + j] += m.at(r, i) * m.at(r, j);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a[p * n + q]) < 1e-300) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> sv(n);
    for (std::size_t i = 0; i < n; ++i) sv[i] = std::sqrt(std::max(0.0, a[i * n + i]));
    std::sort(sv.rbegin(), sv.rend());
    return sv;
}

LoraAdapter random_adapter(std::size_t d, std::size_t k, std::size_t r, std::uint64_t seed) {
    LoraAdapter ad;
    ad.a = random_tensor({r, k}, seed);
    ad.b = random_tensor({d, r}, seed + 1);
    return ad;
}

void randomize_b(AdapterSet& set, std::uint64_t seed) {
    Rng rng(seed);
    for (LoraAdapter& ad : set.adapters)
        for (double& v : ad.b.mutable_data()) v = 0.05 * rng.normal();
}

}  // namespace

TEST_CASE("adapter set construction") {
    const ModelConfig c;
    const AdapterSet set = new_adapter_set(c, 3, 7, "d0");
    CHECK(set.adapters.size() == 4);
    CHECK(set.rank == 3);
    CHECK(set.dataset_id == "d0");
    for (const LoraAdapter& ad : set.adapters) {
        CHECK(ad.a.shape() == Shape{3, 32});
        CHECK(ad.b.shape() == Shape{32, 3});
        for (double v : ad.b.data()) CHECK(v == 0.0);
        CHECK(ad.a.requires_grad());
    }
    CHECK(set.find(1, AdapterTarget::value) != nullptr);
    CHECK(set.num_scalars() == 4 * 3 * 64);
}

TEST_CASE("equal seeds give identical A matrices") {
    const AdapterSet x = new_adapter_set(ModelConfig{}, 4, 11), y = new_adapter_set(ModelConfig{}, 4, 11);
    const AdapterSet z = new_adapter_set(ModelConfig{}, 4, 12);
    for (std::size_t i = 0; i < x.adapters.size(); ++i) {
        for (std::size_t j = 0; j < x.adapters[i].a.numel(); ++j)
            CHECK(x.adapters[i].a.data()[j] == y.adapters[i].a.data()[j]);
    }
    CHECK(x.adapters[0].a.data()[0] != z.adapters[0].a.data()[0]);
}

TEST_CASE("rank outside 1..D is rejected") {
    CHECK_THROWS_AS(new_adapter_set(ModelConfig{}, 0, 1), ContractError);
    CHECK_THROWS_AS(new_adapter_set(ModelConfig{}, 33, 1), ContractError);
    CHECK_NOTHROW(new_adapter_set(ModelConfig{}, 32, 1));
}

TEST_CASE("mismatched adapters raise adapter errors") {
    const ModelConfig c;
    AdapterSet set = new_adapter_set(c, 2, 1);
    set.adapters.pop_back();
    CHECK_THROWS_AS(set.validate(c), AdapterError);
    const AdapterSet other = new_adapter_set(testing::tiny_model(), 2, 1);
    CHECK_THROWS_AS(other.validate(c), AdapterError);
    const ViTParams p = ViTParams::initialize(c, 0);
    CHECK_THROWS_AS(encode(testing::random_tensor({1, 16, 16, 3}, 1), p, &other), AdapterError);
}

TEST_CASE("delta") {
    SUBCASE("zero B") {
        LoraAdapter ad = random_adapter(4, 5, 2, 1);
        ad.b = Tensor({4, 2});
        const Tensor dw = delta(ad);
        for (double v : dw.data()) CHECK(v == 0.0);
    }
    SUBCASE("hand product") {
        LoraAdapter ad;
        ad.b = Tensor({2, 1}, {1, 0});
        ad.a = Tensor({1, 2}, {0, 1});
        const Tensor dw = delta(ad);
        CHECK(dw.shape() == Shape{2, 2});
        CHECK(dw.data()[0] == 0.0);
        CHECK(dw.data()[1] == 1.0);
        CHECK(dw.data()[2] == 0.0);
        CHECK(dw.data()[3] == 0.0);
    }
    SUBCASE("rank never exceeds r") {
        for (std::size_t r : {1, 2, 3}) {
            const std::vector<double> sv = singular_values(delta(random_adapter(7, 6, r, 10 + r)));
            CHECK(sv[r - 1] > 1e-3);
            for (std::size_t i = r; i < sv.size(); ++i) CHECK(sv[i] <= 1e-5 * sv[0]);
        }
    }
}

TEST_CASE("merge") {
    const Tensor base = random_tensor({4, 5}, 20);
    SUBCASE("zero B is bitwise identity") {
        LoraAdapter ad = random_adapter(4, 5, 2, 21);
        ad.b = Tensor({4, 2});
        const Tensor m = merge(base, ad);
        for (std::size_t i = 0; i < base.numel(); ++i) CHECK(m.data()[i] == base.data()[i]);
    }
    SUBCASE("merge minus delta recovers the base") {
        const LoraAdapter ad = random_adapter(4, 5, 2, 22);
        const Tensor back = sub(merge(base, ad), delta(ad));
        for (std::size_t i = 0; i < base.numel(); ++i) CHECK(std::abs(back.data()[i] - base.data()[i]) < 1e-6);
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(merge(base, random_adapter(5, 4, 2, 23)), ShapeError);
    }
}

TEST_CASE("fresh adapters leave the backbone output unchanged") {
    const ViTParams p = ViTParams::initialize(ModelConfig{}, 30);
    const AdapterSet set = new_adapter_set(p.config, 8, 31);
    const ViTParams merged = merge_adapters(p, set);
    const Tensor images = random_tensor({3, 16, 16, 3}, 32);
    const Tensor a = encode(images, p), b = encode(images, p, &set), c = encode(images, merged);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(a.data()[i] == b.data()[i]);
        CHECK(a.data()[i] == c.data()[i]);
    }
}

TEST_CASE("merged and unmerged adapters agree") {
    const ViTParams p = ViTParams::initialize(ModelConfig{}, 33);
    for (std::size_t r : {1, 4, 8}) {
        AdapterSet set = new_adapter_set(p.config, r, 34 + r);
        randomize_b(set, 40 + r);
        const ViTParams merged = merge_adapters(p, set);
        const Tensor images = random_tensor({10, 16, 16, 3}, 50 + r);
        const Tensor a = encode(images, p, &set), b = encode(images, merged);
        double worst = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
        CHECK(worst <= 1e-5);
        CHECK(merged.frozen);
    }
}

TEST_CASE("adapter parameter gradients") {
    const ModelConfig c = testing::tiny_model();
    const ViTParams p = ViTParams::initialize(c, 60);
    AdapterSet set = new_adapter_set(c, 2, 61);
    randomize_b(set, 62);
    const Tensor images = random_tensor({2, 8, 8, 3}, 63);
    const Tensor w = random_tensor({2, 8}, 64);
    auto loss = [&] { return sum(mul(encode(images, p, &set), w)); };
    for (const auto& [name, t] : set.named_tensors()) {
        INFO(name);
        CHECK(testing::gradient_check(loss, t, testing::all_coords(t)) <= 1e-3);
    }
}

TEST_CASE("trainable parameter accounting") {
    CHECK(count_trainable_params(ModelConfig::vit_base(), 1, 2) == 38402);
    CHECK(count_trainable_params(ModelConfig::vit_base(), 1, 2) == 12 * 2 * 1 * 1536 + 768 * 2 + 2);

    ModelConfig toy;
    CHECK(count_trainable_params(toy, 2, 10) == 842);
    const AdapterSet set = new_adapter_set(toy, 2, 0);
    const std::size_t head = 32 * 10 + 10;
    CHECK(set.num_scalars() + head == 842);

    const std::size_t head_b = 768 * 2 + 2;
    CHECK(count_trainable_params(ModelConfig::vit_base(), 2, 2) - head_b ==
          2 * (count_trainable_params(ModelConfig::vit_base(), 1, 2) - head_b));
}
