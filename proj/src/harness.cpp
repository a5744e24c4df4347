#include "color/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "color/error.hpp"
#include "color/lora.hpp"
#include "color/rng.hpp"
#include "color/router.hpp"

namespace color {

namespace fs = std::filesystem;

Summary summarize(const std::vector<double>& values) {
    Summary s;
    if (values.empty()) return s;
    double total = 0.0;
    for (double v : values) total += v;
    s.mean = total / static_cast<double>(values.size());
    if (values.size() >= 2) {
        double sq = 0.0;
        for (double v : values) sq += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
    }
    return s;
}

Summary RunRecord::final_avg_acc() const {
    std::vector<double> v;
    for (const RepeatResult& r : repeats) v.push_back(r.final_update().avg_acc);
    return summarize(v);
}

std::optional<Summary> RunRecord::final_forgetting() const {
    std::vector<double> v;
    for (const RepeatResult& r : repeats) {
        if (!r.final_update().forgetting) return std::nullopt;
        v.push_back(*r.final_update().forgetting);
    }
    if (v.empty()) return std::nullopt;
    return summarize(v);
}

std::optional<Summary> RunRecord::final_routing_acc() const {
    std::vector<double> v;
    for (const RepeatResult& r : repeats) {
        if (!r.final_update().routing_acc) return std::nullopt;
        v.push_back(*r.final_update().routing_acc);
    }
    if (v.empty()) return std::nullopt;
    return summarize(v);
}

std::string make_run_id(const RunConfig& c) {
    std::ostringstream id;
    id << to_string(c.method) << '-' << to_string(c.scenario) << "-r" << c.train.rank << "-k" << c.effective_clusters()
       << "-d" << c.data_seed << "-s" << c.init_seed;
    return id.str();
}

std::uint64_t expert_seed(std::uint64_t init_seed, std::size_t update) {
    return derive_seed(init_seed, {0x45585054, update});
}

DatasetSequence build_sequence(const RunConfig& c) {
    SyntheticImageSpec spec;
    spec.num_classes = c.num_classes;
    spec.train_per_class = c.train_per_class;
    spec.test_per_class = c.test_per_class;
    spec.image_size = c.model.image_size;
    spec.margin = c.margin;
    spec.seed = c.data_seed;
    if (c.scenario == ScenarioKind::dil) return generate_dil_sequence(spec, c.num_domains);
    return generate_cil_sequence(spec, c.num_classes / c.classes_per_update, c.classes_per_update, c.scenario);
}

PretrainResult pretrain_for_config(const RunConfig& c) {
    SyntheticImageSpec spec = default_pool_spec(c.data_seed);
    spec.image_size = c.model.image_size;
    const PretrainPool pool = make_pretraining_pool(spec);
    TrainConfig tc = default_pretrain_config(c.data_seed);
    tc.epochs = c.pretrain_epochs;
    tc.learning_rate = c.pretrain_learning_rate;
    return pretrain_backbone(pool, c.model, tc, c.pretrain_min_accuracy);
}

// ---------------------------------------------------------------------------
// Workspace

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string data_key(const RunConfig& c) {
    std::ostringstream k;
    k << to_string(c.scenario) << '/' << c.num_classes << '/' << c.num_domains << '/' << c.classes_per_update << '/'
      << c.train_per_class << '/' << c.test_per_class << '/' << fmt(c.margin) << '/' << c.model.image_size << '/'
      << c.data_seed;
    return k.str();
}

std::string backbone_key(const RunConfig& c) {
    if (!c.backbone_path.empty()) return "file:" + c.backbone_path;
    const ModelConfig& m = c.model;
    std::ostringstream k;
    k << m.image_size << '/' << m.patch_size << '/' << m.embed_dim << '/' << m.num_layers << '/' << m.num_heads << '/'
      << m.ffn_hidden << '/' << fmt(m.layer_norm_eps) << '/' << c.pretrain_epochs << '/'
      << fmt(c.pretrain_learning_rate) << '/' << c.data_seed;
    return k.str();
}

std::string train_key(const TrainConfig& t) {
    std::ostringstream k;
    k << t.batch_size << '/' << fmt(t.weight_decay) << '/' << t.epochs << '/' << fmt(t.learning_rate) << '/' << t.rank
      << '/' << fmt(t.beta1) << '/' << fmt(t.beta2) << '/' << fmt(t.adam_eps) << '/' << t.augment_flip
      << t.augment_crop;
    return k.str();
}

std::string expert_key(const RunConfig& c, std::size_t update, std::uint64_t init_seed) {
    return backbone_key(c) + "|" + data_key(c) + "|" + train_key(c.train) + "|" + std::to_string(update) + "|" +
           std::to_string(init_seed);
}

template <typename F>
auto in_phase(const std::string& where, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const AdapterError& e) {
        throw AdapterError(where + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(where + ": " + e.what());
    } catch (const ContractError& e) {
        throw ContractError(where + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError(where + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(where + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(where + ": " + e.what(), e.offset());
    } catch (const VersionError& e) {
        throw VersionError(where + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError(where + ": " + e.what());
    }
}

std::string phase(std::size_t update, const char* what) {
    return "update " + std::to_string(update) + " (" + what + ")";
}

}  // namespace

struct Workspace::Impl {
    std::map<std::string, DatasetSequence> sequences;
    std::map<std::string, ViTParams> backbones;
    std::map<std::string, Expert> experts;
    std::map<std::string, std::vector<Prediction>> predictions;  // expert key | test update
    std::map<std::string, Tensor> features;                      // extractor | split | update
    std::size_t trained = 0;

    const std::vector<Prediction>& predict(const std::string& ekey, const Expert& e, const Dataset& test,
                                           std::size_t test_update, const ViTParams& backbone) {
        const std::string key = ekey + "#" + std::to_string(test_update);
        auto it = predictions.find(key);
        if (it == predictions.end()) it = predictions.emplace(key, predict_dataset(e, test, backbone)).first;
        return it->second;
    }

    const Tensor& feature(const std::string& extractor_key, const char* split, std::size_t update,
                          const Dataset& data, const ViTParams& backbone, const AdapterSet* adapters) {
        const std::string key = extractor_key + "#" + split + "#" + std::to_string(update);
        auto it = features.find(key);
        if (it == features.end()) it = features.emplace(key, extract_features(data, backbone, adapters)).first;
        return it->second;
    }
};

Workspace::Workspace() : impl_(std::make_unique<Impl>()) {}
Workspace::~Workspace() = default;

const DatasetSequence& Workspace::sequence(const RunConfig& c) {
    const std::string key = data_key(c);
    auto it = impl_->sequences.find(key);
    if (it == impl_->sequences.end()) it = impl_->sequences.emplace(key, build_sequence(c)).first;
    return it->second;
}

const ViTParams& Workspace::backbone(const RunConfig& c) {
    const std::string key = backbone_key(c);
    auto it = impl_->backbones.find(key);
    if (it != impl_->backbones.end()) return it->second;
    ViTParams p;
    if (!c.backbone_path.empty()) {
        p = backbone_from_checkpoint(load_checkpoint(c.backbone_path));
        if (!(p.config == c.model))
            throw ConfigError("backbone checkpoint '" + c.backbone_path + "' does not match the run's model settings");
    } else {
        p = in_phase("pretraining", [&] { return pretrain_for_config(c).backbone; });
    }
    return impl_->backbones.emplace(key, std::move(p)).first->second;
}

const Expert& Workspace::expert(const RunConfig& c, std::size_t update, std::uint64_t init_seed) {
    const std::string key = expert_key(c, update, init_seed);
    auto it = impl_->experts.find(key);
    if (it != impl_->experts.end()) return it->second;
    const DatasetSequence& seq = sequence(c);
    const ViTParams& bb = backbone(c);
    if (update >= seq.updates.size()) throw ContractError("no update " + std::to_string(update) + " in the sequence");
    const DatasetUpdate& u = seq.updates[update];
    TrainConfig tc = c.train;
    tc.seed = expert_seed(init_seed, update);
    Expert e = in_phase(phase(update, "expert training"),
                        [&] { return train_expert(bb, u.train, u.label_map, tc, u.dataset_id); });
    ++impl_->trained;
    return impl_->experts.emplace(key, std::move(e)).first->second;
}

std::size_t Workspace::experts_trained() const { return impl_->trained; }

// ---------------------------------------------------------------------------
// Evaluation helpers

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::size_t> test_sizes(const DatasetSequence& seq) {
    std::vector<std::size_t> sizes;
    for (const DatasetUpdate& u : seq.updates) sizes.push_back(u.test.size());
    return sizes;
}

// Index of the most probable class among `allowed` labels (head order, lowest index on ties).
int restricted_class(const Prediction& p, const std::vector<int>& head_labels, const std::set<int>& allowed) {
    int best = -1;
    double best_p = -1.0;
    for (std::size_t c = 0; c < head_labels.size(); ++c) {
        if (!allowed.count(head_labels[c])) continue;
        if (p.probabilities[c] > best_p) {
            best_p = p.probabilities[c];
            best = head_labels[c];
        }
    }
    return best;
}

UpdateMetrics metrics_for(const AccuracyMatrix& m, std::size_t t, AverageMode mode) {
    UpdateMetrics u;
    u.update_index = t;
    u.avg_acc = average_accuracy(m, t, mode);
    if (t >= 1) u.forgetting = forgetting(m, t);
    return u;
}

double elapsed_ms(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

bool routes(const RunConfig& c) {
    return (c.method == Method::color || c.method == Method::colorpp) && c.scenario != ScenarioKind::til;
}

struct ExpertRunState {
    std::vector<const Expert*> experts;
    std::vector<PrototypeSet> prototypes;
};

nlohmann::json matrix_json(const AccuracyMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t t = 0; t < m.num_datasets(); ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t tau = 0; tau <= t; ++tau)
            row.push_back(m.has(t, tau) ? nlohmann::json(m.correct(t, tau)) : nlohmann::json());
        rows.push_back(row);
    }
    return rows;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json updates_json(const std::vector<UpdateMetrics>& updates) {
    nlohmann::json out = nlohmann::json::array();
    for (const UpdateMetrics& u : updates)
        out.push_back({{"update_index", u.update_index},
                       {"avg_acc", u.avg_acc},
                       {"forgetting", optional_json(u.forgetting)},
                       {"routing_acc", optional_json(u.routing_acc)}});
    return out;
}

Checkpoint run_checkpoint_base(const RunConfig& c, const std::string& run_id, const RepeatResult& r,
                               const DatasetSequence& seq, const ViTParams& backbone) {
    Checkpoint ck;
    nlohmann::json ids = nlohmann::json::array(), maps = nlohmann::json::array();
    for (const DatasetUpdate& u : seq.updates) {
        ids.push_back(u.dataset_id);
        maps.push_back(u.label_map);
    }
    RunConfig stored = c;
    stored.init_seed = r.init_seed;
    stored.kmeans_seed = r.kmeans_seed;
    stored.repeats = 1;
    ck.metadata = {{"kind", "run"},
                   {"run_id", run_id},
                   {"method", to_string(c.method)},
                   {"scenario", to_string(c.scenario)},
                   {"config", stored.settings()},
                   {"model", to_json(c.model)},
                   {"init_seed", r.init_seed},
                   {"kmeans_seed", r.kmeans_seed},
                   {"dataset_ids", ids},
                   {"label_maps", maps},
                   {"test_sizes", test_sizes(seq)},
                   {"correct", matrix_json(r.matrix)},
                   {"updates", updates_json(r.updates)}};
    append_tensors(ck, backbone.named_tensors(), "backbone.");
    return ck;
}

std::string checkpoint_path_for(const RunConfig& c, const std::string& run_id, std::size_t repeat) {
    const fs::path dir = fs::path(c.output_dir) / run_id;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    return (dir / ("repeat" + std::to_string(repeat) + ".ckpt")).string();
}

bool wants_checkpoint(const RunConfig& c) { return c.save_checkpoints && !c.output_dir.empty(); }

// Evaluates experts 0..t on every test set 0..t with the method's routing rule.
void evaluate_expert_update(const RunConfig& c, Workspace& ws, const DatasetSequence& seq, const ViTParams& backbone,
                            std::size_t t, const ExpertRunState& state, const std::vector<std::string>& ekeys,
                            const std::string& extractor_key, const AdapterSet* extractor, RepeatResult& r) {
    Workspace::Impl& impl = ws.impl();
    const bool routing = routes(c);
    Router router(state.prototypes.empty() ? FeatureExtractor::frozen : state.prototypes.front().extractor);
    if (routing)
        for (std::size_t j = 0; j <= t; ++j) router.add(state.prototypes[j]);
    std::size_t routed_total = 0, seen = 0;
    r.routed.emplace_back();
    for (std::size_t tau = 0; tau <= t; ++tau) {
        const Dataset& test = seq.updates[tau].test;
        std::size_t correct = 0, routed_ok = 0;
        if (!routing) {
            const auto& preds = impl.predict(ekeys[tau], *state.experts[tau], test, tau, backbone);
            for (std::size_t i = 0; i < test.size(); ++i) correct += preds[i].class_id == test.labels[i];
            routed_ok = test.size();
        } else {
            const Tensor& feats = impl.feature(extractor_key, "test", tau, test, backbone, extractor);
            const std::size_t d = feats.dim(1);
            for (std::size_t i = 0; i < test.size(); ++i) {
                const std::size_t j = router.nearest(feats.data().subspan(i * d, d));
                const auto& preds = impl.predict(ekeys[j], *state.experts[j], test, tau, backbone);
                correct += preds[i].class_id == test.labels[i];
                routed_ok += j == tau;
            }
        }
        r.matrix.record(t, tau, correct);
        r.routed.back().push_back(routed_ok);
        routed_total += routed_ok;
        seen += test.size();
    }
    UpdateMetrics u = metrics_for(r.matrix, t, c.average_mode);
    if (routing) u.routing_acc = static_cast<double>(routed_total) / static_cast<double>(seen);
    r.updates.push_back(u);
}

RepeatResult run_expert_repeat(const RunConfig& c, Workspace& ws, std::size_t repeat, const std::string& run_id) {
    const DatasetSequence& seq = ws.sequence(c);
    const ViTParams& backbone = ws.backbone(c);
    RepeatResult r;
    r.init_seed = c.init_seed + repeat;
    r.kmeans_seed = c.kmeans_seed + repeat;
    r.matrix = AccuracyMatrix(test_sizes(seq));
    const std::size_t k = c.effective_clusters();
    const bool routing = routes(c);
    const FeatureExtractor extractor_kind =
        c.method == Method::colorpp ? FeatureExtractor::first_expert : FeatureExtractor::frozen;

    ExpertRunState state;
    std::vector<std::string> ekeys;
    std::string extractor_key = backbone_key(c) + "|" + data_key(c) + "|frozen";
    const AdapterSet* extractor = nullptr;

    for (std::size_t t = 0; t < seq.updates.size(); ++t) {
        const auto start = Clock::now();
        state.experts.push_back(&ws.expert(c, t, r.init_seed));
        ekeys.push_back(expert_key(c, t, r.init_seed));
        if (t == 0 && extractor_kind == FeatureExtractor::first_expert) {
            extractor = &state.experts.front()->adapters;
            extractor_key = ekeys.front() + "|theta1";
        }
        if (routing) {
            in_phase(phase(t, "prototype fitting"), [&] {
                const Tensor& feats =
                    ws.impl().feature(extractor_key, "train", t, seq.updates[t].train, backbone, extractor);
                KMeansResult km = kmeans(feats, k, derive_seed(r.kmeans_seed, {0x50524F54, t}));
                round_to_single(km.centroids);
                state.prototypes.push_back(
                    PrototypeSet{seq.updates[t].dataset_id, std::move(km.centroids), extractor_kind});
            });
        }
        in_phase(phase(t, "evaluation"), [&] {
            evaluate_expert_update(c, ws, seq, backbone, t, state, ekeys, extractor_key, extractor, r);
        });
        if (c.record_wall_time) r.updates.back().wall_ms = elapsed_ms(start);
    }

    if (wants_checkpoint(c)) {
        Checkpoint ck = run_checkpoint_base(c, run_id, r, seq, backbone);
        nlohmann::json experts = nlohmann::json::array();
        for (std::size_t t = 0; t < state.experts.size(); ++t) {
            experts.push_back(expert_info(*state.experts[t]));
            append_tensors(ck, state.experts[t]->named_tensors(), "experts." + std::to_string(t) + ".");
        }
        ck.metadata["experts"] = experts;
        ck.metadata["extractor"] = to_string(extractor_kind);
        ck.metadata["routing"] = routing;
        for (std::size_t t = 0; t < state.prototypes.size(); ++t)
            ck.tensors.emplace_back("prototypes." + std::to_string(t) + ".centroids", state.prototypes[t].centroids);
        r.checkpoint_path = checkpoint_path_for(c, run_id, repeat);
        save_checkpoint(ck, r.checkpoint_path);
    }
    return r;
}

std::vector<int> all_labels(const DatasetSequence& seq) {
    std::set<int> labels;
    for (const DatasetUpdate& u : seq.updates) labels.insert(u.label_map.begin(), u.label_map.end());
    return {labels.begin(), labels.end()};
}

std::size_t count_scalars(const NamedTensors& tensors) {
    std::size_t n = 0;
    for (const auto& entry : tensors) n += entry.second.numel();
    return n;
}

// Correct predictions of a full-label-set classifier on one test set. In TIL the
// task's classes are given, so the argmax is restricted to them.
std::size_t count_correct(const std::vector<Prediction>& preds, const std::vector<int>& head_labels,
                          const DatasetUpdate& u, ScenarioKind scenario) {
    std::size_t correct = 0;
    const std::set<int> task(u.label_map.begin(), u.label_map.end());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int cls = scenario == ScenarioKind::til ? restricted_class(preds[i], head_labels, task) : preds[i].class_id;
        correct += cls == u.test.labels[i];
    }
    return correct;
}

// Predictions of a (fully trainable) model plus head, batched.
std::vector<Prediction> predict_full(const ViTParams& model, const ClassifierHead& head, const Dataset& data) {
    std::size_t classes = 0;
    const std::vector<double> logits = batched_logits(
        data, [&](const Tensor& images) { return head.logits(encode(images, model)); }, classes);
    std::vector<Prediction> out;
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::span<const double> row(logits.data() + i * classes, classes);
        Prediction p;
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) {
            p.probabilities.push_back(std::exp(v - mx));
            z += p.probabilities.back();
        }
        for (double& v : p.probabilities) v /= z;
        p.head_index = argmax(row);
        p.class_id = head.label_map[p.head_index];
        out.push_back(std::move(p));
    }
    return out;
}

// Trains model + head on `data`; classes outside `present` are masked when given.
void fine_tune(ViTParams& model, ClassifierHead& head, const Dataset& data, const TrainConfig& tc,
               const std::vector<bool>* allowed) {
    std::vector<int> targets;
    for (int label : data.labels) {
        const int idx = head.index_of(label);
        if (idx < 0) throw DataError("label " + std::to_string(label) + " is not covered by the classifier head");
        targets.push_back(idx);
    }
    const std::size_t steps = tc.epochs * ((data.size() + tc.batch_size - 1) / tc.batch_size);
    AdamW optimizer(tc, steps);
    for (auto& [name, t] : model.named_tensors()) optimizer.add_parameter("model." + name, t);
    optimizer.add_parameter("head.w", head.w);
    optimizer.add_parameter("head.b", head.b);
    const LogitsFn logits = [&](const Tensor& images) { return head.logits(encode(images, model)); };
    fit_classifier(data, targets, tc, optimizer, logits, allowed);
}

void store_full_model(Checkpoint& ck, const ViTParams& model, const ClassifierHead& head) {
    append_tensors(ck, model.named_tensors(), "model.");
    ck.tensors.emplace_back("head.w", head.w);
    ck.tensors.emplace_back("head.b", head.b);
    ck.metadata["head_labels"] = head.label_map;
}

RepeatResult run_ftseq_repeat(const RunConfig& c, Workspace& ws, std::size_t repeat, const std::string& run_id,
                              std::size_t& params) {
    const DatasetSequence& seq = ws.sequence(c);
    const ViTParams& backbone = ws.backbone(c);
    RepeatResult r;
    r.init_seed = c.init_seed + repeat;
    r.kmeans_seed = c.kmeans_seed + repeat;
    r.matrix = AccuracyMatrix(test_sizes(seq));

    ViTParams model = backbone.trainable_copy();
    ClassifierHead head =
        ClassifierHead::create(c.model.embed_dim, all_labels(seq), derive_seed(r.init_seed, {0x46545351}));
    params = count_scalars(model.named_tensors()) + head.w.numel() + head.b.numel();

    for (std::size_t t = 0; t < seq.updates.size(); ++t) {
        const auto start = Clock::now();
        const DatasetUpdate& u = seq.updates[t];
        TrainConfig tc = c.train;
        tc.seed = expert_seed(r.init_seed, t);
        std::vector<bool> allowed(head.num_classes(), false);
        for (int label : u.label_map) allowed[static_cast<std::size_t>(head.index_of(label))] = true;
        const bool mask = c.scenario != ScenarioKind::dil;
        in_phase(phase(t, "sequential fine-tuning"),
                 [&] { fine_tune(model, head, u.train, tc, mask ? &allowed : nullptr); });
        in_phase(phase(t, "evaluation"), [&] {
            for (std::size_t tau = 0; tau <= t; ++tau)
                r.matrix.record(
                    t, tau,
                    count_correct(predict_full(model, head, seq.updates[tau].test), head.label_map, seq.updates[tau],
                                  c.scenario));
        });
        r.updates.push_back(metrics_for(r.matrix, t, c.average_mode));
        if (c.record_wall_time) r.updates.back().wall_ms = elapsed_ms(start);
    }
    if (wants_checkpoint(c)) {
        Checkpoint ck = run_checkpoint_base(c, run_id, r, seq, backbone);
        store_full_model(ck, model, head);
        r.checkpoint_path = checkpoint_path_for(c, run_id, repeat);
        save_checkpoint(ck, r.checkpoint_path);
    }
    return r;
}

RepeatResult run_joint_repeat(const RunConfig& c, Workspace& ws, std::size_t repeat, const std::string& run_id,
                              std::size_t& params) {
    const DatasetSequence& seq = ws.sequence(c);
    const ViTParams& backbone = ws.backbone(c);
    RepeatResult r;
    r.init_seed = c.init_seed + repeat;
    r.kmeans_seed = c.kmeans_seed + repeat;
    r.matrix = AccuracyMatrix(test_sizes(seq));
    const auto start = Clock::now();

    std::vector<const Dataset*> parts;
    for (const DatasetUpdate& u : seq.updates) parts.push_back(&u.train);
    const Dataset all = Dataset::concatenate(parts);
    const std::vector<int> labels = all_labels(seq);
    const std::size_t last = seq.updates.size() - 1;
    TrainConfig tc = c.train;
    tc.seed = expert_seed(r.init_seed, 0);

    Checkpoint ck;
    if (wants_checkpoint(c)) ck = run_checkpoint_base(c, run_id, r, seq, backbone);
    if (c.joint_mode == JointMode::lora) {
        const Expert e = in_phase("joint training", [&] { return train_expert(backbone, all, labels, tc, "joint"); });
        params = count_trainable_params(c.model, c.train.rank, labels.size());
        in_phase("joint evaluation", [&] {
            for (std::size_t tau = 0; tau <= last; ++tau)
                r.matrix.record(last, tau,
                                count_correct(predict_dataset(e, seq.updates[tau].test, backbone), labels,
                                              seq.updates[tau], c.scenario));
        });
        if (wants_checkpoint(c)) {
            ck.metadata["experts"] = nlohmann::json::array({expert_info(e)});
            append_tensors(ck, e.named_tensors(), "experts.0.");
        }
    } else {
        ViTParams model = backbone.trainable_copy();
        ClassifierHead head = ClassifierHead::create(c.model.embed_dim, labels, derive_seed(r.init_seed, {0x4A4F494E}));
        params = count_scalars(model.named_tensors()) + head.w.numel() + head.b.numel();
        in_phase("joint training", [&] { fine_tune(model, head, all, tc, nullptr); });
        in_phase("joint evaluation", [&] {
            for (std::size_t tau = 0; tau <= last; ++tau)
                r.matrix.record(last, tau,
                                count_correct(predict_full(model, head, seq.updates[tau].test), head.label_map,
                                              seq.updates[tau], c.scenario));
        });
        if (wants_checkpoint(c)) store_full_model(ck, model, head);
    }
    UpdateMetrics u;
    u.update_index = last;
    u.avg_acc = average_accuracy(r.matrix, last, c.average_mode);
    if (c.record_wall_time) u.wall_ms = elapsed_ms(start);
    r.updates.push_back(u);
    if (wants_checkpoint(c)) {
        ck.metadata["correct"] = matrix_json(r.matrix);
        ck.metadata["updates"] = updates_json(r.updates);
        r.checkpoint_path = checkpoint_path_for(c, run_id, repeat);
        save_checkpoint(ck, r.checkpoint_path);
    }
    return r;
}

RunRecord start_record(const RunConfig& c) {
    c.validate();
    RunRecord rec;
    rec.config = c;
    rec.run_id = make_run_id(c);
    return rec;
}

}  // namespace

RunRecord run_ftseq_baseline(const RunConfig& config, Workspace& ws) {
    RunConfig c = config;
    c.method = Method::ftseq;
    RunRecord rec = start_record(c);
    for (std::size_t i = 0; i < c.repeats; ++i)
        rec.repeats.push_back(run_ftseq_repeat(c, ws, i, rec.run_id, rec.params_trainable));
    return rec;
}

RunRecord run_joint_upper_bound(const RunConfig& config, Workspace& ws) {
    RunConfig c = config;
    c.method = Method::joint;
    RunRecord rec = start_record(c);
    for (std::size_t i = 0; i < c.repeats; ++i)
        rec.repeats.push_back(run_joint_repeat(c, ws, i, rec.run_id, rec.params_trainable));
    return rec;
}

RunRecord run_continual(const RunConfig& c, Workspace& ws) {
    if (c.method == Method::ftseq) return run_ftseq_baseline(c, ws);
    if (c.method == Method::joint) return run_joint_upper_bound(c, ws);
    RunRecord rec = start_record(c);
    const std::size_t classes = c.scenario == ScenarioKind::dil ? c.num_classes : c.classes_per_update;
    rec.params_trainable = count_trainable_params(c.model, c.train.rank, classes);
    for (std::size_t i = 0; i < c.repeats; ++i) rec.repeats.push_back(run_expert_repeat(c, ws, i, rec.run_id));
    return rec;
}

RunRecord run_continual(const RunConfig& c) {
    Workspace ws;
    return run_continual(c, ws);
}

// ---------------------------------------------------------------------------
// Sweeps

std::string to_string(SweepAxis axis) { return axis == SweepAxis::rank ? "rank" : "clusters"; }

SweepAxis parse_sweep_axis(const std::string& text) {
    if (text == "rank") return SweepAxis::rank;
    if (text == "clusters") return SweepAxis::clusters;
    throw ConfigError("unknown sweep axis '" + text + "' (expected rank or clusters)");
}

SweepResult sweep(const RunConfig& config, SweepAxis axis, const std::vector<std::size_t>& values, Workspace& ws) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] <= values[i - 1]) throw ConfigError("sweep values must be strictly increasing");
    SweepResult out;
    out.axis = axis;
    for (std::size_t v : values) {
        RunConfig c = config;
        if (axis == SweepAxis::rank)
            c.train.rank = v;
        else
            c.clusters = v;
        try {
            out.records.push_back(run_continual(c, ws));
            out.values.push_back(v);
            out.errors.emplace_back();
        } catch (const Error& e) {
            RunRecord failed;
            failed.config = c;
            failed.run_id = make_run_id(c);
            out.records.push_back(std::move(failed));
            out.values.push_back(v);
            out.errors.emplace_back(e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Replay

namespace {

std::size_t replay_expert_row(const DatasetSequence& seq,
                              const ViTParams& backbone, const std::vector<Expert>& experts, std::size_t t,
                              std::size_t tau, bool routing, const Router& router, const AdapterSet* extractor,
                              std::map<std::pair<std::size_t, std::size_t>, std::vector<Prediction>>& cache,
                              std::map<std::size_t, Tensor>& feats) {
    const Dataset& test = seq.updates[tau].test;
    auto preds = [&](std::size_t j) -> const std::vector<Prediction>& {
        auto key = std::make_pair(j, tau);
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, predict_dataset(experts[j], test, backbone)).first;
        return it->second;
    };
    std::size_t correct = 0;
    if (!routing) {
        const auto& p = preds(tau);
        for (std::size_t i = 0; i < test.size(); ++i) correct += p[i].class_id == test.labels[i];
        return correct;
    }
    auto fit = feats.find(tau);
    if (fit == feats.end()) fit = feats.emplace(tau, extract_features(test, backbone, extractor)).first;
    const std::size_t d = fit->second.dim(1);
    for (std::size_t i = 0; i < test.size(); ++i) {
        const std::size_t j = router.nearest(fit->second.data().subspan(i * d, d));
        if (j > t) throw ContractError("replay routed to an expert that did not exist yet");
        correct += preds(j)[i].class_id == test.labels[i];
    }
    return correct;
}

}  // namespace

RepeatResult replay_checkpoint(const Checkpoint& ck) {
    const nlohmann::json& meta = ck.metadata;
    if (meta.value("kind", "") != "run") throw DataError("not a run checkpoint");
    Settings settings;
    try {
        settings = meta.at("config").get<Settings>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("run checkpoint has no readable config: ") + e.what());
    }
    const RunConfig c = config_from_settings(settings);
    const DatasetSequence seq = build_sequence(c);
    const ViTParams backbone = backbone_from_checkpoint(ck, "backbone.");
    const std::size_t T = seq.updates.size();

    RepeatResult r;
    r.init_seed = c.init_seed;
    r.kmeans_seed = c.kmeans_seed;
    r.matrix = AccuracyMatrix(test_sizes(seq));
    r.checkpoint_path.clear();

    if (c.method == Method::ftseq || (c.method == Method::joint && c.joint_mode == JointMode::full)) {
        ViTParams model = backbone_from_checkpoint(ck, "model.");
        ClassifierHead head = ClassifierHead::create(c.model.embed_dim, meta.at("head_labels").get<std::vector<int>>(), 0);
        fill_tensors(ck, {{"head.w", head.w}, {"head.b", head.b}}, "");
        for (std::size_t tau = 0; tau < T; ++tau)
            r.matrix.record(T - 1, tau,
                            count_correct(predict_full(model, head, seq.updates[tau].test), head.label_map,
                                          seq.updates[tau], c.scenario));
        UpdateMetrics u;
        u.update_index = T - 1;
        u.avg_acc = average_accuracy(r.matrix, T - 1, c.average_mode);
        r.updates.push_back(u);
        return r;
    }

    std::vector<Expert> experts;
    const nlohmann::json& infos = meta.at("experts");
    for (std::size_t t = 0; t < infos.size(); ++t)
        experts.push_back(expert_from_checkpoint(ck, "experts." + std::to_string(t) + ".", infos[t], c.model));

    if (c.method == Method::joint) {
        const std::vector<int> labels = experts.front().head.label_map;
        for (std::size_t tau = 0; tau < T; ++tau)
            r.matrix.record(T - 1, tau,
                            count_correct(predict_dataset(experts.front(), seq.updates[tau].test, backbone), labels,
                                          seq.updates[tau], c.scenario));
        UpdateMetrics u;
        u.update_index = T - 1;
        u.avg_acc = average_accuracy(r.matrix, T - 1, c.average_mode);
        r.updates.push_back(u);
        return r;
    }

    const bool routing = meta.value("routing", false);
    const FeatureExtractor kind =
        meta.value("extractor", "frozen") == "first_expert" ? FeatureExtractor::first_expert : FeatureExtractor::frozen;
    const AdapterSet* extractor = kind == FeatureExtractor::first_expert ? &experts.front().adapters : nullptr;
    std::map<std::pair<std::size_t, std::size_t>, std::vector<Prediction>> cache;
    std::map<std::size_t, Tensor> feats;
    Router router(kind);
    for (std::size_t t = 0; t < T; ++t) {
        if (routing) {
            PrototypeSet set;
            set.dataset_id = experts[t].dataset_id;
            set.centroids = ck.tensor("prototypes." + std::to_string(t) + ".centroids");
            set.extractor = kind;
            router.add(std::move(set));
        }
        std::size_t routed_total = 0, seen = 0;
        for (std::size_t tau = 0; tau <= t; ++tau) {
            r.matrix.record(t, tau,
                            replay_expert_row(seq, backbone, experts, t, tau, routing, router, extractor, cache,
                                              feats));
            seen += seq.updates[tau].test.size();
        }
        UpdateMetrics u = metrics_for(r.matrix, t, c.average_mode);
        if (routing) {
            for (std::size_t tau = 0; tau <= t; ++tau) {
                const Tensor& f = feats.at(tau);
                const std::size_t d = f.dim(1);
                for (std::size_t i = 0; i < f.dim(0); ++i) routed_total += router.nearest(f.data().subspan(i * d, d)) == tau;
            }
            u.routing_acc = static_cast<double>(routed_total) / static_cast<double>(seen);
        }
        r.updates.push_back(u);
    }
    return r;
}

bool replay_matches(const Checkpoint& ck) {
    const RepeatResult replayed = replay_checkpoint(ck);
    const nlohmann::json& stored = ck.metadata.at("correct");
    const AccuracyMatrix& m = replayed.matrix;
    for (std::size_t t = 0; t < m.num_datasets(); ++t) {
        for (std::size_t tau = 0; tau <= t; ++tau) {
            if (!m.has(t, tau)) continue;
            const nlohmann::json& s = stored.at(t).at(tau);
            if (s.is_null() || s.get<std::size_t>() != m.correct(t, tau)) return false;
        }
    }
    // Metrics of every replayed update must be identical to the stored ones.
    const nlohmann::json& updates = ck.metadata.at("updates");
    for (const UpdateMetrics& u : replayed.updates) {
        bool found = false;
        for (const nlohmann::json& s : updates) {
            if (s.at("update_index").get<std::size_t>() != u.update_index) continue;
            found = true;
            if (s.at("avg_acc").get<double>() != u.avg_acc) return false;
            const bool full_row = replayed.updates.size() == updates.size();
            if (full_row && optional_json(u.forgetting) != s.at("forgetting")) return false;
            if (full_row && optional_json(u.routing_acc) != s.at("routing_acc")) return false;
        }
        if (!found) return false;
    }
    return true;
}

}  // namespace color
