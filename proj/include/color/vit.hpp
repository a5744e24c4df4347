#pragma once

// Toy vision transformer backbone.
//
// Pre-norm blocks with an attention output projection:
//   X_a = X + MHSA(LN1(X)) W_O
//   X'  = X_a + GeLU(GeLU(LN2(X_a) W_1 + b_1) W_2 + b_2)
// The backbone output is the final [CLS] row.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "color/tensor.hpp"

namespace color {

struct LoraAdapter;
struct AdapterSet;

struct ModelConfig {
    std::size_t image_size = 16;
    std::size_t channels = 3;
    std::size_t patch_size = 4;
    std::size_t embed_dim = 32;
    std::size_t num_layers = 2;
    std::size_t num_heads = 4;
    std::size_t ffn_hidden = 64;
    double layer_norm_eps = 1e-6;

    std::size_t patches_per_side() const { return image_size / patch_size; }
    std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t num_tokens() const { return num_patches() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t head_dim() const { return embed_dim / num_heads; }

    // Throws ConfigError when the shape hyperparameters are inconsistent.
    void validate() const;

    // Dimensions of the ViT-B/16 backbone, used for parameter accounting only.
    static ModelConfig vit_base();

    bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor w_query, w_key, w_value, w_out;  // D x D, applied as X W
    Tensor ln2_gamma, ln2_beta;
    Tensor w1, b1;  // D x ffn_hidden, ffn_hidden
    Tensor w2, b2;  // ffn_hidden x D, D
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct ViTParams {
    ModelConfig config;
    Tensor patch_embed;  // patch_dim x D
    Tensor pos_embed;    // N x D
    Tensor cls_token;    // 1 x D
    std::vector<LayerParams> layers;
    bool frozen = false;

    // Truncated-normal(0.02) weights, zero biases, unit layer-norm gains.
    static ViTParams initialize(const ModelConfig& config, std::uint64_t seed);
    static ViTParams zeros(const ModelConfig& config);

    // Stable, fully-qualified names ("layers.0.w_query", ...) in a fixed order.
    NamedTensors named_tensors() const;

    ViTParams clone() const;
    // Deep copy whose tensors all require grad; used by full fine-tuning.
    ViTParams trainable_copy() const;
    // Marks every tensor as not requiring grad; optimizers refuse frozen tensors.
    void freeze();
};

// Scalars in a backbone of this shape, computed without allocating it.
std::size_t count_backbone_params(const ModelConfig& config);

// Per-layer attention probabilities, each laid out as [batch][head][query][key].
struct AttentionTrace {
    std::vector<std::vector<double>> layers;
};

// images: [batch x H x W x C] -> [(batch * num_patches) x patch_dim], row-major patches.
Tensor extract_patches(const Tensor& images, const ModelConfig& config);

// [CLS] row followed by the embedded patches, plus position embeddings,
// for every image: [(batch * N) x D].
Tensor embed_patches(const Tensor& images, const ViTParams& params);

// X W, or X W + (X B) A when an adapter is supplied.
Tensor project(const Tensor& x, const Tensor& weight, const LoraAdapter* adapter);

Tensor attention_block(const Tensor& x, const LayerParams& layer, const ModelConfig& config,
                       const LoraAdapter* query_adapter = nullptr, const LoraAdapter* value_adapter = nullptr,
                       std::vector<double>* attention_weights = nullptr);

Tensor ffn_block(const Tensor& x, const LayerParams& layer, const ModelConfig& config);

// Batched backbone: images [batch x H x W x C] (or a single [H x W x C]) -> [batch x D].
Tensor encode(const Tensor& images, const ViTParams& params, const AdapterSet* adapters = nullptr,
              AttentionTrace* trace = nullptr);

// Single image [H x W x C] -> [CLS] representation of length D.
Tensor forward(const Tensor& image, const ViTParams& params, const AdapterSet* adapters = nullptr);

}  // namespace color
