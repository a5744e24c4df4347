#include "color/experts.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "color/error.hpp"
#include "color/rng.hpp"

namespace color {

TrainConfig TrainConfig::toy() {
    TrainConfig c;
    c.batch_size = 8;
    c.epochs = 8;
    c.learning_rate = 5e-3;
    c.rank = 8;
    return c;
}

void TrainConfig::validate() const {
    if (batch_size == 0 || epochs == 0 || rank == 0) throw ConfigError("train config: batch_size, epochs and rank must be positive");
    if (!(learning_rate > 0.0) || !(weight_decay >= 0.0))
        throw ConfigError("train config: learning_rate must be positive and weight_decay non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0))
        throw ConfigError("train config: invalid Adam moments");
}

double cosine_multiplier(std::size_t step, std::size_t total_steps) {
    if (total_steps <= 1) return 1.0;
    const double t = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
    return 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(const TrainConfig& config, std::size_t total_steps) : config_(config), total_steps_(total_steps) {
    config_.validate();
    if (total_steps == 0) throw ContractError("optimizer needs at least one step");
}

void AdamW::add_parameter(std::string name, Tensor param) {
    if (!param.requires_grad())
        throw ContractError("parameter '" + name + "' is frozen and cannot be optimised");
    for (const Slot& s : slots_)
        if (s.param.shares_storage(param)) throw ContractError("parameter '" + name + "' registered twice");
    const std::size_t n = param.numel();
    slots_.push_back(Slot{std::move(name), std::move(param), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
}

double AdamW::learning_rate(std::size_t step_index) const {
    return config_.learning_rate * cosine_multiplier(step_index, total_steps_);
}

std::size_t AdamW::num_scalars() const {
    std::size_t n = 0;
    for (const Slot& s : slots_) n += s.param.numel();
    return n;
}

void AdamW::zero_grad() {
    for (Slot& s : slots_) s.param.clear_grad();
}

void AdamW::step(std::size_t step_index) {
    if (step_index >= total_steps_)
        throw ContractError("optimizer step " + std::to_string(step_index) + " beyond schedule of " +
                            std::to_string(total_steps_) + " steps");
    for (const Slot& s : slots_) {
        if (!s.param.requires_grad()) throw ContractError("parameter '" + s.name + "' became frozen");
        if (!s.param.has_grad()) continue;
        for (double g : s.param.grad())
            if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter '" + s.name + "'");
    }
    const double lr = learning_rate(step_index);
    const double t = static_cast<double>(step_index + 1);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    for (Slot& s : slots_) {
        auto p = s.param.mutable_data();
        const bool has_grad = s.param.has_grad();
        std::span<const double> g = has_grad ? s.param.grad() : std::span<const double>{};
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = has_grad ? g[i] : 0.0;
            s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * gi;
            s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * gi * gi;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + config_.adam_eps) + config_.weight_decay * p[i]);
        }
        round_to_single(s.param);
        s.param.clear_grad();
    }
}

// ---------------------------------------------------------------------------

ClassifierHead ClassifierHead::create(std::size_t embed_dim, std::vector<int> label_map, std::uint64_t seed) {
    if (label_map.empty()) throw ContractError("classifier head needs at least one class");
    std::vector<int> sorted = label_map;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ContractError("classifier head label_map has duplicate entries");
    Rng rng(derive_seed(seed, {0x48454144}));
    ClassifierHead head;
    head.w = Tensor({embed_dim, label_map.size()}, true);
    for (double& v : head.w.mutable_data()) v = rng.truncated_normal(0.02);
    round_to_single(head.w);
    head.b = Tensor({label_map.size()}, true);
    head.label_map = std::move(label_map);
    return head;
}

Tensor ClassifierHead::logits(const Tensor& features) const { return add_bias(matmul(features, w), b); }

int ClassifierHead::index_of(int label) const {
    auto it = std::find(label_map.begin(), label_map.end(), label);
    return it == label_map.end() ? -1 : static_cast<int>(it - label_map.begin());
}

void Expert::seal() {
    for (auto& [name, t] : named_tensors()) {
        Tensor handle = t;
        handle.set_requires_grad(false);
        handle.clear_grad();
    }
    trained = true;
}

NamedTensors Expert::named_tensors() const {
    NamedTensors out;
    for (auto& [name, t] : adapters.named_tensors()) out.emplace_back("adapters." + name, t);
    out.emplace_back("head.w", head.w);
    out.emplace_back("head.b", head.b);
    return out;
}

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

// ---------------------------------------------------------------------------

namespace {

void augment(Tensor& batch, Rng& rng, bool flip, bool crop) {
    const std::size_t n = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
    auto data = batch.mutable_data();
    std::vector<double> tmp(h * w * c);
    constexpr std::ptrdiff_t pad = 2;
    for (std::size_t b = 0; b < n; ++b) {
        double* img = data.data() + b * h * w * c;
        std::copy_n(img, tmp.size(), tmp.begin());
        const bool mirror = flip && rng.uniform() < 0.5;
        std::ptrdiff_t dy = 0, dx = 0;
        if (crop) {
            dy = static_cast<std::ptrdiff_t>(rng.uniform_index(2 * pad + 1)) - pad;
            dx = static_cast<std::ptrdiff_t>(rng.uniform_index(2 * pad + 1)) - pad;
        }
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
                std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(mirror ? w - 1 - x : x) + dx;
                const bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 &&
                                    sx < static_cast<std::ptrdiff_t>(w);
                for (std::size_t ch = 0; ch < c; ++ch)
                    img[(y * w + x) * c + ch] =
                        inside ? tmp[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c + ch] : 0.0;
            }
        }
    }
}

std::vector<int> targets_for(const Dataset& data, const ClassifierHead& head) {
    std::vector<int> targets;
    targets.reserve(data.size());
    for (int label : data.labels) {
        const int idx = head.index_of(label);
        if (idx < 0) throw DataError("label " + std::to_string(label) + " is not in the expert's label map");
        targets.push_back(idx);
    }
    return targets;
}

}  // namespace

std::vector<EpochLog> fit_classifier(const Dataset& data, std::span<const int> targets, const TrainConfig& cfg,
                                     AdamW& optimizer, const LogitsFn& logits, const std::vector<bool>* allowed) {
    if (data.empty()) throw ContractError("cannot train on an empty dataset");
    if (targets.size() != data.size()) throw ContractError("one target per training instance is required");
    const std::size_t n = data.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    if (optimizer.total_steps() != steps_per_epoch * cfg.epochs)
        throw ContractError("optimizer schedule does not match the training loop");

    std::vector<std::size_t> order(n);
    std::vector<EpochLog> log;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, {0x4F524452, epoch}));
        rng.shuffle(order);
        double loss_total = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            Tensor images = data.batch(idx);
            if (cfg.augment_flip || cfg.augment_crop) augment(images, rng, cfg.augment_flip, cfg.augment_crop);
            std::vector<int> batch_targets;
            for (std::size_t i : idx) batch_targets.push_back(targets[i]);

            Tape tape;
            Tensor loss;
            std::vector<double> probs;
            {
                TapeGuard guard(tape);
                const Tensor out = logits(images);
                loss = cross_entropy(out, batch_targets, allowed, &probs);
            }
            const std::size_t classes = probs.size() / idx.size();
            for (std::size_t i = 0; i < idx.size(); ++i)
                if (argmax(std::span<const double>(probs.data() + i * classes, classes)) ==
                    static_cast<std::size_t>(batch_targets[i]))
                    ++correct;
            loss_total += loss.item() * static_cast<double>(idx.size());
            tape.backward(loss);
            optimizer.step(step++);
        }
        log.push_back(EpochLog{epoch, loss_total / static_cast<double>(n),
                               static_cast<double>(correct) / static_cast<double>(n)});
    }
    return log;
}

std::vector<double> batched_logits(const Dataset& data, const LogitsFn& logits, std::size_t& num_classes,
                                   std::size_t chunk) {
    std::vector<double> out;
    num_classes = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const std::size_t end = std::min(data.size(), start + chunk);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor values = logits(data.batch(idx));
        num_classes = values.dim(1);
        out.insert(out.end(), values.data().begin(), values.data().end());
    }
    return out;
}

Expert train_expert(const ViTParams& backbone, const Dataset& data, std::vector<int> label_map,
                    const TrainConfig& cfg, std::string dataset_id) {
    cfg.validate();
    if (!backbone.frozen) throw ContractError("experts must be trained on a frozen backbone");
    if (data.empty()) throw ContractError("cannot train an expert on an empty dataset");

    Expert expert;
    expert.dataset_id = dataset_id;
    expert.adapters = new_adapter_set(backbone.config, cfg.rank, derive_seed(cfg.seed, {1}), dataset_id);
    expert.head = ClassifierHead::create(backbone.config.embed_dim, std::move(label_map), derive_seed(cfg.seed, {2}));
    const std::vector<int> targets = targets_for(data, expert.head);

    const std::size_t steps = cfg.epochs * ((data.size() + cfg.batch_size - 1) / cfg.batch_size);
    AdamW optimizer(cfg, steps);
    for (auto& [name, t] : expert.named_tensors()) optimizer.add_parameter(name, t);

    const LogitsFn logits = [&](const Tensor& images) {
        return expert.head.logits(encode(images, backbone, &expert.adapters));
    };
    TrainConfig loop_cfg = cfg;
    loop_cfg.seed = derive_seed(cfg.seed, {3});
    expert.training_log = fit_classifier(data, targets, loop_cfg, optimizer, logits);
    expert.seal();
    return expert;
}

namespace {

Prediction to_prediction(const ClassifierHead& head, std::span<const double> logits) {
    Prediction p;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    p.probabilities.resize(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c) {
        p.probabilities[c] = std::exp(logits[c] - mx);
        z += p.probabilities[c];
    }
    for (double& v : p.probabilities) v /= z;
    p.head_index = argmax(logits);
    p.class_id = head.label_map[p.head_index];
    return p;
}

}  // namespace

Prediction predict_with_expert(const Expert& expert, const Tensor& image, const ViTParams& backbone) {
    if (!expert.trained) throw ContractError("expert '" + expert.dataset_id + "' has not been trained");
    const Tensor logits = expert.head.logits(encode(image, backbone, &expert.adapters));
    return to_prediction(expert.head, logits.data());
}

std::vector<Prediction> predict_dataset(const Expert& expert, const Dataset& data, const ViTParams& backbone) {
    if (!expert.trained) throw ContractError("expert '" + expert.dataset_id + "' has not been trained");
    std::size_t classes = 0;
    const std::vector<double> logits = batched_logits(
        data, [&](const Tensor& images) { return expert.head.logits(encode(images, backbone, &expert.adapters)); },
        classes);
    std::vector<Prediction> out;
    out.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
        out.push_back(to_prediction(expert.head, std::span<const double>(logits.data() + i * classes, classes)));
    return out;
}

}  // namespace color
