#pragma once

// Low-rank adapters on the query and value projections.
//
// For a base weight W (d x k, applied as X W) the adapter stores B (d x r) and
// A (r x k) and contributes delta W = B A. No alpha/r scaling is applied.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "color/tensor.hpp"
#include "color/vit.hpp"

namespace color {

enum class AdapterTarget { query, value };

std::string to_string(AdapterTarget target);

struct LoraAdapter {
    std::size_t layer = 0;  // zero-based layer index
    AdapterTarget target = AdapterTarget::query;
    Tensor a;  // r x k
    Tensor b;  // d x r

    std::size_t rank() const { return a.dim(0); }
};

// All adapters of one expert: exactly one per (layer, target).
struct AdapterSet {
    std::string dataset_id;
    std::size_t rank = 0;
    std::vector<LoraAdapter> adapters;  // ordered (layer 0 query, layer 0 value, layer 1 query, ...)

    const LoraAdapter* find(std::size_t layer, AdapterTarget target) const;
    // Throws AdapterError unless the set covers every layer with well-shaped adapters.
    void validate(const ModelConfig& config) const;

    AdapterSet clone() const;
    NamedTensors named_tensors() const;
    std::size_t num_scalars() const;
};

// A ~ truncated normal(0.02), B = 0, so a fresh set leaves the backbone output unchanged.
AdapterSet new_adapter_set(const ModelConfig& config, std::size_t rank, std::uint64_t seed,
                           std::string dataset_id = {});

// B A as a d x k matrix.
Tensor delta(const LoraAdapter& adapter);

// base + B A.
Tensor merge(const Tensor& base, const LoraAdapter& adapter);

// Backbone copy with every adapter folded into W_Q / W_V.
ViTParams merge_adapters(const ViTParams& backbone, const AdapterSet& adapters);

// 2 L r (d + k) adapter scalars plus the classifier head D C + C.
std::size_t count_trainable_params(const ModelConfig& config, std::size_t rank, std::size_t num_classes);

}  // namespace color
