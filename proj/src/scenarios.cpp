#include "color/scenarios.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "color/error.hpp"
#include "color/rng.hpp"

namespace color {

std::string to_string(ScenarioKind kind) {
    switch (kind) {
        case ScenarioKind::dil: return "dil";
        case ScenarioKind::cil: return "cil";
        case ScenarioKind::til: return "til";
    }
    return "?";
}

ScenarioKind parse_scenario(const std::string& text) {
    if (text == "dil") return ScenarioKind::dil;
    if (text == "cil") return ScenarioKind::cil;
    if (text == "til") return ScenarioKind::til;
    throw ConfigError("unknown scenario '" + text + "' (expected dil, cil or til)");
}

std::string describe(const Domain& domain) {
    std::ostringstream out;
    out << "domain " << domain.id << ':';
    for (const DomainTransform& t : domain.transforms) {
        std::visit(
            [&](const auto& tr) {
                using T = std::decay_t<decltype(tr)>;
                if constexpr (std::is_same_v<T, Identity>) out << " identity";
                if constexpr (std::is_same_v<T, Rotate>) out << " rotate(" << tr.quarter_turns * 90 << ")";
                if constexpr (std::is_same_v<T, ColorShift>)
                    out << " color_shift(" << tr.delta[0] << ',' << tr.delta[1] << ',' << tr.delta[2] << ')';
                if constexpr (std::is_same_v<T, Noise>) out << " noise(" << tr.sigma << ")";
                if constexpr (std::is_same_v<T, Blur>) out << " blur";
            },
            t);
    }
    return out.str();
}

void SyntheticImageSpec::validate() const {
    if (num_classes == 0 || train_per_class == 0 || test_per_class == 0)
        throw ConfigError("synthetic spec: class and sample counts must be positive");
    if (image_size < 4) throw ConfigError("synthetic spec: image_size must be at least 4");
    if (!(margin >= 0.0 && margin <= 1.0)) throw ConfigError("synthetic spec: margin must lie in [0, 1]");
}

namespace {

constexpr std::size_t kChannels = 3;
constexpr double kPixelNoise = 0.2;

struct ClassSignature {
    double angle;
    double frequency;
    double phase;
    std::array<double, 3> stripe_color;
    std::array<double, 3> blob_color;
    double blob_x, blob_y, blob_radius;
};

ClassSignature signature_for(std::uint64_t seed, int signature_id, std::size_t size) {
    Rng rng(derive_seed(seed, {0x5349474E, static_cast<std::uint64_t>(signature_id)}));
    ClassSignature s{};
    s.angle = rng.uniform(0.0, std::numbers::pi);
    s.frequency = 1.0 + static_cast<double>(rng.uniform_index(3));
    s.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (double& c : s.stripe_color) c = rng.uniform(-1.0, 1.0);
    for (double& c : s.blob_color) c = rng.uniform(-1.0, 1.0);
    const double sz = static_cast<double>(size);
    s.blob_x = rng.uniform(0.2 * sz, 0.8 * sz);
    s.blob_y = rng.uniform(0.2 * sz, 0.8 * sz);
    s.blob_radius = rng.uniform(0.12 * sz, 0.25 * sz);
    return s;
}

using Image = std::vector<double>;  // size x size x 3

void rotate(Image& img, std::size_t size, int quarter_turns) {
    const int turns = ((quarter_turns % 4) + 4) % 4;
    for (int t = 0; t < turns; ++t) {
        Image out(img.size());
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x)
                for (std::size_t c = 0; c < kChannels; ++c)
                    out[(x * size + (size - 1 - y)) * kChannels + c] = img[(y * size + x) * kChannels + c];
        img = std::move(out);
    }
}

void blur(Image& img, std::size_t size) {
    Image out(img.size());
    const auto s = static_cast<std::ptrdiff_t>(size);
    for (std::ptrdiff_t y = 0; y < s; ++y) {
        for (std::ptrdiff_t x = 0; x < s; ++x) {
            for (std::size_t c = 0; c < kChannels; ++c) {
                double total = 0.0;
                int count = 0;
                for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
                    for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                        const std::ptrdiff_t yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= s || xx < 0 || xx >= s) continue;
                        total += img[static_cast<std::size_t>(yy * s + xx) * kChannels + c];
                        ++count;
                    }
                }
                out[static_cast<std::size_t>(y * s + x) * kChannels + c] = total / count;
            }
        }
    }
    img = std::move(out);
}

Image render(const ClassSignature& sig, const SyntheticImageSpec& spec, const Domain& domain, Rng& rng) {
    const std::size_t size = spec.image_size;
    const double sz = static_cast<double>(size);
    const double contrast = 0.35 + 0.65 * spec.margin;
    const double phase = sig.phase + rng.uniform(-0.6, 0.6);
    const double amp = rng.uniform(0.8, 1.2);
    const double bx = sig.blob_x + rng.uniform(-1.5, 1.5);
    const double by = sig.blob_y + rng.uniform(-1.5, 1.5);
    const double kx = std::cos(sig.angle) * 2.0 * std::numbers::pi * sig.frequency / sz;
    const double ky = std::sin(sig.angle) * 2.0 * std::numbers::pi * sig.frequency / sz;

    Image img(size * size * kChannels);
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = static_cast<double>(x), fy = static_cast<double>(y);
            const double stripe = std::cos(kx * fx + ky * fy + phase);
            const double r2 = (fx - bx) * (fx - bx) + (fy - by) * (fy - by);
            const double blob = std::exp(-r2 / (2.0 * sig.blob_radius * sig.blob_radius));
            for (std::size_t c = 0; c < kChannels; ++c)
                img[(y * size + x) * kChannels + c] =
                    contrast * amp * (0.5 * stripe * sig.stripe_color[c] + blob * sig.blob_color[c]);
        }
    }
    double extra_noise = 0.0;
    for (const DomainTransform& t : domain.transforms) {
        if (const auto* r = std::get_if<Rotate>(&t)) rotate(img, size, r->quarter_turns);
        if (std::holds_alternative<Blur>(t)) blur(img, size);
        if (const auto* n = std::get_if<Noise>(&t)) extra_noise += n->sigma;
    }
    for (const DomainTransform& t : domain.transforms) {
        if (const auto* cs = std::get_if<ColorShift>(&t)) {
            for (std::size_t i = 0; i < img.size(); ++i) img[i] += cs->delta[i % kChannels];
        }
    }
    const double sigma = kPixelNoise + extra_noise;
    for (double& v : img) v = static_cast<double>(static_cast<float>(v + sigma * rng.normal()));
    return img;
}

}  // namespace

Dataset generate_images(const SyntheticImageSpec& spec, const std::vector<int>& classes, const Domain& domain,
                        Split split) {
    spec.validate();
    const std::size_t per_class = split == Split::train ? spec.train_per_class : spec.test_per_class;
    const std::size_t size = spec.image_size;
    const std::size_t stride = size * size * kChannels;
    std::vector<double> values;
    values.reserve(classes.size() * per_class * stride);
    Dataset out;
    const std::uint64_t split_tag = split == Split::train ? 0x545241494EULL : 0x54455354ULL;
    for (int label : classes) {
        const int signature_id = spec.signature_offset + label;
        const ClassSignature sig = signature_for(spec.seed, signature_id, size);
        for (std::size_t i = 0; i < per_class; ++i) {
            Rng rng(derive_seed(spec.seed, {split_tag, static_cast<std::uint64_t>(domain.id),
                                            static_cast<std::uint64_t>(signature_id), i}));
            const Image img = render(sig, spec, domain, rng);
            values.insert(values.end(), img.begin(), img.end());
            out.labels.push_back(label);
            out.domains.push_back(domain.id);
        }
    }
    out.images = Tensor({out.labels.size(), size, size, kChannels}, std::move(values));
    return out;
}

std::vector<Domain> default_domains(std::size_t count, double margin, std::uint64_t seed) {
    const double s = 1.4 * (0.35 + 0.65 * margin);
    std::vector<Domain> fixed = {
        Domain{0, {Identity{}}},
        Domain{1, {Rotate{1}, ColorShift{{s, -s, 0.0}}}},
        Domain{2, {ColorShift{{0.0, s, s}}}},
        Domain{3, {Noise{0.15}, ColorShift{{-s, 0.0, s}}}},
        Domain{4, {Blur{}, ColorShift{{s, s, s}}}},
        Domain{5, {Rotate{2}, ColorShift{{-s, -s, 0.0}}}},
    };
    std::vector<Domain> out;
    for (std::size_t i = 0; i < count; ++i) {
        if (i < fixed.size()) {
            out.push_back(fixed[i]);
            continue;
        }
        Rng rng(derive_seed(seed, {0x444F4D, i}));
        std::array<double, 3> dir{rng.normal(), rng.normal(), rng.normal()};
        const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
        for (double& v : dir) v = v / norm * s * 1.4;
        out.push_back(Domain{static_cast<int>(i), {Rotate{static_cast<int>(i % 4)}, ColorShift{dir}}});
    }
    return out;
}

void DatasetSequence::validate() const {
    if (updates.empty()) throw DataError("dataset sequence has no updates");
    std::set<std::string> ids;
    for (const DatasetUpdate& u : updates) {
        if (!ids.insert(u.dataset_id).second) throw DataError("duplicate dataset id '" + u.dataset_id + "'");
        if (u.train.empty() || u.test.empty()) throw DataError("dataset '" + u.dataset_id + "' has an empty split");
        std::set<int> labels(u.label_map.begin(), u.label_map.end());
        if (labels.size() != u.label_map.size()) throw DataError("dataset '" + u.dataset_id + "' repeats a label");
        for (const Dataset* d : {&u.train, &u.test})
            for (int l : d->labels)
                if (!labels.count(l))
                    throw DataError("dataset '" + u.dataset_id + "' has label " + std::to_string(l) +
                                    " outside its label map");
    }
    if (scenario == ScenarioKind::dil) {
        for (const DatasetUpdate& u : updates)
            if (u.label_map != updates.front().label_map)
                throw DataError("domain-incremental updates must share one label map");
    } else {
        std::set<int> seen;
        for (const DatasetUpdate& u : updates)
            for (int l : u.label_map)
                if (!seen.insert(l).second)
                    throw DataError("class-incremental label maps must be disjoint (label " + std::to_string(l) + ")");
    }
}

std::size_t DatasetSequence::total_classes() const {
    std::set<int> labels;
    for (const DatasetUpdate& u : updates) labels.insert(u.label_map.begin(), u.label_map.end());
    return labels.size();
}

DatasetSequence generate_dil_sequence(const SyntheticImageSpec& spec, std::size_t num_domains) {
    spec.validate();
    if (num_domains == 0) throw ContractError("a domain-incremental sequence needs at least one domain");
    std::vector<int> classes(spec.num_classes);
    for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<int>(c);
    DatasetSequence seq;
    seq.scenario = ScenarioKind::dil;
    for (const Domain& domain : default_domains(num_domains, spec.margin, spec.seed)) {
        DatasetUpdate u;
        u.dataset_id = "dil-" + std::to_string(domain.id);
        u.domain_id = domain.id;
        u.label_map = classes;
        u.train = generate_images(spec, classes, domain, Split::train);
        u.test = generate_images(spec, classes, domain, Split::test);
        seq.updates.push_back(std::move(u));
    }
    seq.validate();
    return seq;
}

DatasetSequence generate_cil_sequence(const SyntheticImageSpec& spec, std::size_t num_updates,
                                      std::size_t classes_per_update, ScenarioKind kind) {
    spec.validate();
    if (kind == ScenarioKind::dil) throw ContractError("generate_cil_sequence builds class- or task-incremental sequences");
    if (num_updates == 0 || classes_per_update == 0 || num_updates * classes_per_update != spec.num_classes)
        throw ContractError(std::to_string(num_updates) + " updates x " + std::to_string(classes_per_update) +
                            " classes does not partition " + std::to_string(spec.num_classes) + " classes");
    const Domain identity{0, {Identity{}}};
    DatasetSequence seq;
    seq.scenario = kind;
    seq.full_scale = spec.num_classes >= 100;
    for (std::size_t t = 0; t < num_updates; ++t) {
        DatasetUpdate u;
        u.dataset_id = to_string(kind) + "-" + std::to_string(t);
        for (std::size_t c = 0; c < classes_per_update; ++c)
            u.label_map.push_back(static_cast<int>(t * classes_per_update + c));
        u.train = generate_images(spec, u.label_map, identity, Split::train);
        u.test = generate_images(spec, u.label_map, identity, Split::test);
        seq.updates.push_back(std::move(u));
    }
    seq.validate();
    return seq;
}

SyntheticImageSpec default_pool_spec(std::uint64_t seed) {
    SyntheticImageSpec s;
    s.num_classes = 150;
    s.train_per_class = 24;
    s.test_per_class = 20;
    s.signature_offset = 1000;
    s.seed = seed;
    return s;
}

PretrainPool make_pretraining_pool(const SyntheticImageSpec& spec) {
    if (spec.signature_offset < 1000)
        throw ContractError("pretraining pool signatures must not overlap sequence classes (offset >= 1000)");
    std::vector<int> classes(spec.num_classes);
    for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<int>(c);
    const Domain identity{0, {Identity{}}};
    PretrainPool pool;
    pool.num_classes = spec.num_classes;
    pool.train = generate_images(spec, classes, identity, Split::train);
    pool.test = generate_images(spec, classes, identity, Split::test);
    return pool;
}

TrainConfig default_pretrain_config(std::uint64_t seed) {
    TrainConfig c;
    c.batch_size = 32;
    c.epochs = 20;
    c.learning_rate = 4e-3;
    c.seed = seed;
    return c;
}

PretrainResult pretrain_backbone(const PretrainPool& pool, const ModelConfig& config, const TrainConfig& cfg,
                                 double min_accuracy) {
    cfg.validate();
    config.validate();
    if (pool.train.empty() || pool.test.empty()) throw ContractError("pretraining pool is empty");
    ViTParams model = ViTParams::initialize(config, derive_seed(cfg.seed, {0x50524554})).trainable_copy();
    std::vector<int> classes(pool.num_classes);
    for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<int>(c);
    ClassifierHead head = ClassifierHead::create(config.embed_dim, classes, derive_seed(cfg.seed, {0x48454144}));

    const std::size_t steps = cfg.epochs * ((pool.train.size() + cfg.batch_size - 1) / cfg.batch_size);
    AdamW optimizer(cfg, steps);
    for (auto& [name, t] : model.named_tensors()) optimizer.add_parameter("backbone." + name, t);
    optimizer.add_parameter("head.w", head.w);
    optimizer.add_parameter("head.b", head.b);

    const LogitsFn logits = [&](const Tensor& images) { return head.logits(encode(images, model)); };
    PretrainResult result;
    result.log = fit_classifier(pool.train, pool.train.labels, cfg, optimizer, logits);

    std::size_t classes_out = 0;
    const std::vector<double> test_logits = batched_logits(pool.test, logits, classes_out);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pool.test.size(); ++i)
        if (static_cast<int>(argmax(std::span<const double>(test_logits.data() + i * classes_out, classes_out))) ==
            pool.test.labels[i])
            ++correct;
    result.test_accuracy = static_cast<double>(correct) / static_cast<double>(pool.test.size());
    if (result.test_accuracy < min_accuracy)
        throw NumericError("pretraining reached held-out accuracy " + std::to_string(result.test_accuracy) +
                           ", below the required " + std::to_string(min_accuracy));
    model.freeze();
    result.backbone = std::move(model);
    return result;
}

}  // namespace color
