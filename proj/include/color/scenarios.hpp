#pragma once

// Procedural desk-scale image datasets and the continual-learning sequences
// built from them.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "color/dataset.hpp"
#include "color/experts.hpp"
#include "color/vit.hpp"

namespace color {

enum class ScenarioKind { dil, cil, til };

std::string to_string(ScenarioKind kind);
ScenarioKind parse_scenario(const std::string& text);

// Label-preserving domain shifts.
struct Identity {};
struct Rotate {
    int quarter_turns = 1;
};
struct ColorShift {
    std::array<double, 3> delta{};
};
struct Noise {
    double sigma = 0.0;
};
struct Blur {};

using DomainTransform = std::variant<Identity, Rotate, ColorShift, Noise, Blur>;

struct Domain {
    int id = 0;
    std::vector<DomainTransform> transforms;
};

std::string describe(const Domain& domain);

struct SyntheticImageSpec {
    std::size_t num_classes = 10;
    std::size_t train_per_class = 100;
    std::size_t test_per_class = 50;
    std::size_t image_size = 16;
    // Separability dial in [0, 1]: scales class-pattern contrast and domain shift
    // strength against a fixed pixel noise floor. 1 is the maximum margin.
    double margin = 1.0;
    // Pattern family id of label 0; classes with different ids never share a pattern.
    int signature_offset = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class Split { train, test };

// One (domain, class list) cell of images; labels are the given class ids.
Dataset generate_images(const SyntheticImageSpec& spec, const std::vector<int>& classes, const Domain& domain,
                        Split split);

// The first six are fixed (identity, rotation, colour, noise, blur, rotation);
// further domains get procedural colour shifts.
std::vector<Domain> default_domains(std::size_t count, double margin, std::uint64_t seed = 0);

struct DatasetUpdate {
    std::string dataset_id;
    Dataset train;
    Dataset test;
    std::vector<int> label_map;
    int domain_id = 0;
};

struct DatasetSequence {
    ScenarioKind scenario = ScenarioKind::dil;
    std::vector<DatasetUpdate> updates;
    bool full_scale = false;

    // Throws DataError when label maps violate the scenario's invariant.
    void validate() const;
    std::size_t total_classes() const;
};

DatasetSequence generate_dil_sequence(const SyntheticImageSpec& spec, std::size_t num_domains);
DatasetSequence generate_cil_sequence(const SyntheticImageSpec& spec, std::size_t num_updates,
                                      std::size_t classes_per_update, ScenarioKind kind = ScenarioKind::cil);

// Classes disjoint from every sequence (signature ids from 1000 upwards).
struct PretrainPool {
    Dataset train;
    Dataset test;
    std::size_t num_classes = 0;
};

SyntheticImageSpec default_pool_spec(std::uint64_t seed);
PretrainPool make_pretraining_pool(const SyntheticImageSpec& spec);

struct PretrainResult {
    ViTParams backbone;  // frozen
    double test_accuracy = 0.0;
    std::vector<EpochLog> log;
};

TrainConfig default_pretrain_config(std::uint64_t seed);

// Trains backbone and a throwaway head on the pool, then freezes the backbone.
// Throws NumericError reporting the accuracy when held-out accuracy < min_accuracy.
PretrainResult pretrain_backbone(const PretrainPool& pool, const ModelConfig& config, const TrainConfig& cfg,
                                 double min_accuracy = 0.8);

}  // namespace color
