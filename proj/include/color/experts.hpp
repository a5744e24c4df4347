#pragma once

// Per-dataset experts: a LoRA adapter set on the frozen backbone plus a
// dataset-specific softmax classifier head.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "color/dataset.hpp"
#include "color/lora.hpp"
#include "color/tensor.hpp"
#include "color/vit.hpp"

namespace color {

struct TrainConfig {
    std::size_t batch_size = 128;
    double weight_decay = 2e-4;
    std::size_t epochs = 50;
    double learning_rate = 1e-3;
    std::size_t rank = 64;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    bool augment_flip = false;
    bool augment_crop = false;

    // Desk-scale defaults for the toy backbone.
    static TrainConfig toy();
    void validate() const;
};

// Cosine annealing from 1 at step 0 to 0 at the final step.
double cosine_multiplier(std::size_t step, std::size_t total_steps);

// Adam with decoupled weight decay and a cosine-annealed learning rate.
// Parameters are kept on the binary32 grid after every update.
class AdamW {
public:
    AdamW(const TrainConfig& config, std::size_t total_steps);

    // Throws ContractError for tensors that do not require grad (frozen).
    void add_parameter(std::string name, Tensor param);
    void step(std::size_t step_index);
    void zero_grad();

    std::size_t total_steps() const noexcept { return total_steps_; }
    std::size_t num_scalars() const;
    double learning_rate(std::size_t step_index) const;

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
    };
    TrainConfig config_;
    std::size_t total_steps_;
    std::vector<Slot> slots_;
};

struct ClassifierHead {
    Tensor w;  // D x C
    Tensor b;  // C
    std::vector<int> label_map;  // head index -> global class id

    static ClassifierHead create(std::size_t embed_dim, std::vector<int> label_map, std::uint64_t seed);
    std::size_t num_classes() const { return label_map.size(); }
    Tensor logits(const Tensor& features) const;
    // Head index for a global label; -1 when the label is not covered.
    int index_of(int label) const;
};

struct EpochLog {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double accuracy = 0.0;
};

struct Expert {
    std::string dataset_id;
    AdapterSet adapters;
    ClassifierHead head;
    std::vector<EpochLog> training_log;
    bool trained = false;

    // Marks the expert trained and its tensors read-only.
    void seal();
    NamedTensors named_tensors() const;
};

struct Prediction {
    int class_id = -1;
    std::size_t head_index = 0;
    std::vector<double> probabilities;
};

// Row-wise argmax with lowest-index tie breaking.
std::size_t argmax(std::span<const double> values);

using LogitsFn = std::function<Tensor(const Tensor& images)>;

// Shared minibatch loop: shuffles with cfg.seed, optimises mean cross-entropy
// of `logits` against `targets` (head indices) and returns per-epoch logs.
// `allowed` masks classes whose logits are treated as -inf during training.
std::vector<EpochLog> fit_classifier(const Dataset& data, std::span<const int> targets, const TrainConfig& cfg,
                                     AdamW& optimizer, const LogitsFn& logits,
                                     const std::vector<bool>* allowed = nullptr);

// Evaluates `logits` on all images of `data` in fixed-size chunks; returns [n x C] values.
std::vector<double> batched_logits(const Dataset& data, const LogitsFn& logits, std::size_t& num_classes,
                                   std::size_t chunk = 256);

Expert train_expert(const ViTParams& backbone, const Dataset& data, std::vector<int> label_map,
                    const TrainConfig& cfg, std::string dataset_id);

Prediction predict_with_expert(const Expert& expert, const Tensor& image, const ViTParams& backbone);
std::vector<Prediction> predict_dataset(const Expert& expert, const Dataset& data, const ViTParams& backbone);

}  // namespace color
