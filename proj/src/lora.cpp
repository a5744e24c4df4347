#include "color/lora.hpp"

#include "color/error.hpp"
#include "color/rng.hpp"

namespace color {

namespace {

Tensor detached(const Tensor& t) { return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end())); }

}  // namespace

std::string to_string(AdapterTarget target) { return target == AdapterTarget::query ? "query" : "value"; }

const LoraAdapter* AdapterSet::find(std::size_t layer, AdapterTarget target) const {
    for (const LoraAdapter& a : adapters)
        if (a.layer == layer && a.target == target) return &a;
    return nullptr;
}

void AdapterSet::validate(const ModelConfig& config) const {
    if (adapters.size() != 2 * config.num_layers)
        throw AdapterError("adapter set has " + std::to_string(adapters.size()) + " adapters, expected " +
                           std::to_string(2 * config.num_layers));
    const std::size_t d = config.embed_dim;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        for (AdapterTarget t : {AdapterTarget::query, AdapterTarget::value}) {
            const LoraAdapter* a = find(l, t);
            if (a == nullptr)
                throw AdapterError("adapter set misses layer " + std::to_string(l) + " " + to_string(t));
            if (a->a.shape() != Shape{rank, d} || a->b.shape() != Shape{d, rank})
                throw AdapterError("adapter layer " + std::to_string(l) + " " + to_string(t) + " has A " +
                                   shape_to_string(a->a.shape()) + ", B " + shape_to_string(a->b.shape()) +
                                   " for rank " + std::to_string(rank) + " and width " + std::to_string(d));
        }
    }
}

AdapterSet AdapterSet::clone() const {
    AdapterSet out = *this;
    for (LoraAdapter& a : out.adapters) {
        a.a = a.a.clone();
        a.b = a.b.clone();
    }
    return out;
}

NamedTensors AdapterSet::named_tensors() const {
    NamedTensors out;
    for (const LoraAdapter& a : adapters) {
        const std::string prefix = "layers." + std::to_string(a.layer) + "." + to_string(a.target) + ".";
        out.emplace_back(prefix + "A", a.a);
        out.emplace_back(prefix + "B", a.b);
    }
    return out;
}

std::size_t AdapterSet::num_scalars() const {
    std::size_t n = 0;
    for (const LoraAdapter& a : adapters) n += a.a.numel() + a.b.numel();
    return n;
}

AdapterSet new_adapter_set(const ModelConfig& config, std::size_t rank, std::uint64_t seed, std::string dataset_id) {
    config.validate();
    if (rank < 1 || rank > config.embed_dim)
        throw ContractError("adapter rank " + std::to_string(rank) + " outside [1, " +
                            std::to_string(config.embed_dim) + "]");
    Rng rng(derive_seed(seed, {0x4C6F5241}));
    const std::size_t d = config.embed_dim;
    AdapterSet set;
    set.dataset_id = std::move(dataset_id);
    set.rank = rank;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        for (AdapterTarget t : {AdapterTarget::query, AdapterTarget::value}) {
            LoraAdapter a;
            a.layer = l;
            a.target = t;
            a.a = Tensor({rank, d}, true);
            for (double& v : a.a.mutable_data()) v = rng.truncated_normal(0.02);
            round_to_single(a.a);
            a.b = Tensor({d, rank}, true);
            set.adapters.push_back(std::move(a));
        }
    }
    return set;
}

Tensor delta(const LoraAdapter& adapter) {
    if (adapter.b.rank() != 2 || adapter.a.rank() != 2 || adapter.b.dim(1) != adapter.a.dim(0))
        throw AdapterError("adapter factors B " + shape_to_string(adapter.b.shape()) + " and A " +
                           shape_to_string(adapter.a.shape()) + " do not compose");
    return matmul(detached(adapter.b), detached(adapter.a));
}

Tensor merge(const Tensor& base, const LoraAdapter& adapter) {
    const Tensor d = delta(adapter);
    if (base.shape() != d.shape())
        throw ShapeError("merge: base " + shape_to_string(base.shape()) + " vs delta " + shape_to_string(d.shape()));
    Tensor out = base.clone();
    auto ov = out.mutable_data();
    auto dv = d.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += dv[i];
    return out;
}

ViTParams merge_adapters(const ViTParams& backbone, const AdapterSet& adapters) {
    adapters.validate(backbone.config);
    ViTParams merged = backbone.clone();
    for (std::size_t l = 0; l < merged.layers.size(); ++l) {
        merged.layers[l].w_query = merge(backbone.layers[l].w_query, *adapters.find(l, AdapterTarget::query));
        merged.layers[l].w_value = merge(backbone.layers[l].w_value, *adapters.find(l, AdapterTarget::value));
    }
    merged.freeze();
    return merged;
}

std::size_t count_trainable_params(const ModelConfig& config, std::size_t rank, std::size_t num_classes) {
    const std::size_t d = config.embed_dim, k = config.embed_dim;
    const std::size_t adapters = 2 * config.num_layers * rank * (d + k);
    const std::size_t head = config.embed_dim * num_classes + num_classes;
    return adapters + head;
}

}  // namespace color
