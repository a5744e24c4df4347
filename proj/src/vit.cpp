#include "color/vit.hpp"

#include <algorithm>

#include "color/error.hpp"
#include "color/lora.hpp"
#include "color/rng.hpp"

namespace color {

void ModelConfig::validate() const {
    if (image_size == 0 || channels == 0 || patch_size == 0 || embed_dim == 0 || num_layers == 0 ||
        num_heads == 0 || ffn_hidden == 0)
        throw ConfigError("model config: every dimension must be positive");
    if (image_size % patch_size != 0)
        throw ConfigError("model config: patch_size " + std::to_string(patch_size) + " does not divide image_size " +
                          std::to_string(image_size));
    if (embed_dim % num_heads != 0)
        throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                          std::to_string(num_heads));
    if (!(layer_norm_eps > 0.0)) throw ConfigError("model config: layer_norm_eps must be positive");
}

ModelConfig ModelConfig::vit_base() {
    ModelConfig c;
    c.image_size = 224;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.num_layers = 12;
    c.num_heads = 12;
    c.ffn_hidden = 3072;
    return c;
}

namespace {

Tensor trunc_normal(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.truncated_normal(0.02);
    round_to_single(t);
    return t;
}

Tensor filled(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
    return t;
}

template <typename Fn>
void for_each_tensor(ViTParams& p, Fn fn) {
    fn(p.patch_embed);
    fn(p.pos_embed);
    fn(p.cls_token);
    for (LayerParams& l : p.layers) {
        for (Tensor* t : {&l.ln1_gamma, &l.ln1_beta, &l.w_query, &l.w_key, &l.w_value, &l.w_out, &l.ln2_gamma,
                          &l.ln2_beta, &l.w1, &l.b1, &l.w2, &l.b2})
            fn(*t);
    }
}

}  // namespace

ViTParams ViTParams::initialize(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(derive_seed(seed, {0x56495421}));
    const std::size_t d = config.embed_dim, f = config.ffn_hidden;
    ViTParams p;
    p.config = config;
    p.patch_embed = trunc_normal({config.patch_dim(), d}, rng);
    p.pos_embed = trunc_normal({config.num_tokens(), d}, rng);
    p.cls_token = trunc_normal({1, d}, rng);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerParams layer;
        layer.ln1_gamma = filled({d}, 1.0);
        layer.ln1_beta = filled({d}, 0.0);
        layer.w_query = trunc_normal({d, d}, rng);
        layer.w_key = trunc_normal({d, d}, rng);
        layer.w_value = trunc_normal({d, d}, rng);
        layer.w_out = trunc_normal({d, d}, rng);
        layer.ln2_gamma = filled({d}, 1.0);
        layer.ln2_beta = filled({d}, 0.0);
        layer.w1 = trunc_normal({d, f}, rng);
        layer.b1 = filled({f}, 0.0);
        layer.w2 = trunc_normal({f, d}, rng);
        layer.b2 = filled({d}, 0.0);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

ViTParams ViTParams::zeros(const ModelConfig& config) {
    ViTParams p = initialize(config, 0);
    for_each_tensor(p, [](Tensor& t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); });
    return p;
}

NamedTensors ViTParams::named_tensors() const {
    NamedTensors out;
    out.emplace_back("patch_embed", patch_embed);
    out.emplace_back("pos_embed", pos_embed);
    out.emplace_back("cls_token", cls_token);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const LayerParams& p = layers[l];
        const std::string prefix = "layers." + std::to_string(l) + ".";
        out.emplace_back(prefix + "ln1_gamma", p.ln1_gamma);
        out.emplace_back(prefix + "ln1_beta", p.ln1_beta);
        out.emplace_back(prefix + "w_query", p.w_query);
        out.emplace_back(prefix + "w_key", p.w_key);
        out.emplace_back(prefix + "w_value", p.w_value);
        out.emplace_back(prefix + "w_out", p.w_out);
        out.emplace_back(prefix + "ln2_gamma", p.ln2_gamma);
        out.emplace_back(prefix + "ln2_beta", p.ln2_beta);
        out.emplace_back(prefix + "w1", p.w1);
        out.emplace_back(prefix + "b1", p.b1);
        out.emplace_back(prefix + "w2", p.w2);
        out.emplace_back(prefix + "b2", p.b2);
    }
    return out;
}

ViTParams ViTParams::clone() const {
    ViTParams p = *this;
    for_each_tensor(p, [](Tensor& t) { t = t.clone(); });
    return p;
}

ViTParams ViTParams::trainable_copy() const {
    ViTParams p = clone();
    p.frozen = false;
    for_each_tensor(p, [](Tensor& t) { t.set_requires_grad(true); });
    return p;
}

void ViTParams::freeze() {
    frozen = true;
    for_each_tensor(*this, [](Tensor& t) {
        t.set_requires_grad(false);
        t.clear_grad();
    });
}

std::size_t count_backbone_params(const ModelConfig& c) {
    const std::size_t d = c.embed_dim, f = c.ffn_hidden;
    const std::size_t per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d;
    return c.patch_dim() * d + c.num_tokens() * d + d + c.num_layers * per_layer;
}

// ---------------------------------------------------------------------------

namespace {

Tensor as_batch(const Tensor& images, const ModelConfig& config) {
    const Shape expected{config.image_size, config.image_size, config.channels};
    if (images.rank() == 3) {
        if (images.shape() != expected)
            throw ShapeError("image shape " + shape_to_string(images.shape()) + " does not match model input " +
                             shape_to_string(expected));
        Shape s{1};
        s.insert(s.end(), expected.begin(), expected.end());
        return Tensor(s, std::vector<double>(images.data().begin(), images.data().end()));
    }
    if (images.rank() != 4 || Shape(images.shape().begin() + 1, images.shape().end()) != expected)
        throw ShapeError("image batch shape " + shape_to_string(images.shape()) + " does not match model input " +
                         shape_to_string(expected));
    return images;
}

}  // namespace

Tensor extract_patches(const Tensor& images, const ModelConfig& config) {
    const Tensor batch = as_batch(images, config);
    const std::size_t n = batch.dim(0), size = config.image_size, c = config.channels, p = config.patch_size;
    const std::size_t side = config.patches_per_side(), pd = config.patch_dim();
    Tensor out({n * config.num_patches(), pd});
    auto in = batch.data();
    auto dst = out.mutable_data();
    std::size_t row = 0;
    for (std::size_t b = 0; b < n; ++b) {
        const double* img = in.data() + b * size * size * c;
        for (std::size_t py = 0; py < side; ++py) {
            for (std::size_t px = 0; px < side; ++px, ++row) {
                double* out_row = dst.data() + row * pd;
                for (std::size_t y = 0; y < p; ++y) {
                    const double* src = img + ((py * p + y) * size + px * p) * c;
                    std::copy_n(src, p * c, out_row + y * p * c);
                }
            }
        }
    }
    return out;
}

Tensor embed_patches(const Tensor& images, const ViTParams& params) {
    const ModelConfig& cfg = params.config;
    const Tensor patches = extract_patches(images, cfg);
    const std::size_t np = cfg.num_patches(), tokens = cfg.num_tokens();
    const std::size_t batch = patches.dim(0) / np;

    const Tensor embedded = matmul(patches, params.patch_embed);
    const Tensor stacked = concat_rows(params.cls_token, embedded);
    std::vector<std::size_t> token_rows(batch * tokens), pos_rows(batch * tokens);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < tokens; ++t) {
            token_rows[b * tokens + t] = t == 0 ? 0 : 1 + b * np + (t - 1);
            pos_rows[b * tokens + t] = t;
        }
    }
    return add(gather_rows(stacked, token_rows), gather_rows(params.pos_embed, pos_rows));
}

Tensor project(const Tensor& x, const Tensor& weight, const LoraAdapter* adapter) {
    Tensor base = matmul(x, weight);
    if (adapter == nullptr) return base;
    if (adapter->b.rank() != 2 || adapter->a.rank() != 2 || adapter->b.dim(0) != weight.dim(0) ||
        adapter->a.dim(1) != weight.dim(1) || adapter->b.dim(1) != adapter->a.dim(0))
        throw AdapterError("adapter B " + shape_to_string(adapter->b.shape()) + " / A " +
                           shape_to_string(adapter->a.shape()) + " incompatible with weight " +
                           shape_to_string(weight.shape()));
    return add(base, matmul(matmul(x, adapter->b), adapter->a));
}

Tensor attention_block(const Tensor& x, const LayerParams& layer, const ModelConfig& config,
                       const LoraAdapter* query_adapter, const LoraAdapter* value_adapter,
                       std::vector<double>* attention_weights) {
    if (x.rank() != 2 || x.dim(1) != config.embed_dim || x.dim(0) % config.num_tokens() != 0)
        throw ShapeError("attention block input " + shape_to_string(x.shape()) + " is not a stack of " +
                         std::to_string(config.num_tokens()) + " x " + std::to_string(config.embed_dim) +
                         " token matrices");
    const Tensor h = layer_norm(x, layer.ln1_gamma, layer.ln1_beta, config.layer_norm_eps);
    const Tensor q = project(h, layer.w_query, query_adapter);
    const Tensor k = matmul(h, layer.w_key);
    const Tensor v = project(h, layer.w_value, value_adapter);
    const Tensor attended = multi_head_attention(q, k, v, config.num_tokens(), config.num_heads, attention_weights);
    return add(x, matmul(attended, layer.w_out));
}

Tensor ffn_block(const Tensor& x, const LayerParams& layer, const ModelConfig& config) {
    if (x.rank() != 2 || x.dim(1) != config.embed_dim)
        throw ShapeError("ffn block input " + shape_to_string(x.shape()) + " does not have width " +
                         std::to_string(config.embed_dim));
    const Tensor h = layer_norm(x, layer.ln2_gamma, layer.ln2_beta, config.layer_norm_eps);
    const Tensor hidden = gelu(add_bias(matmul(h, layer.w1), layer.b1));
    return add(x, gelu(add_bias(matmul(hidden, layer.w2), layer.b2)));
}

Tensor encode(const Tensor& images, const ViTParams& params, const AdapterSet* adapters, AttentionTrace* trace) {
    const ModelConfig& cfg = params.config;
    if (adapters) adapters->validate(cfg);
    Tensor x = embed_patches(images, params);
    if (trace) trace->layers.assign(params.layers.size(), {});
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const LoraAdapter* qa = adapters ? adapters->find(l, AdapterTarget::query) : nullptr;
        const LoraAdapter* va = adapters ? adapters->find(l, AdapterTarget::value) : nullptr;
        x = attention_block(x, params.layers[l], cfg, qa, va, trace ? &trace->layers[l] : nullptr);
        x = ffn_block(x, params.layers[l], cfg);
    }
    const std::size_t batch = x.dim(0) / cfg.num_tokens();
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * cfg.num_tokens();
    return gather_rows(x, cls_rows);
}

Tensor forward(const Tensor& image, const ViTParams& params, const AdapterSet* adapters) {
    if (image.rank() != 3) throw ShapeError("forward() expects a single [H x W x C] image");
    return reshape(encode(image, params, adapters), {params.config.embed_dim});
}

}  // namespace color
