#include "color/router.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "color/error.hpp"
#include "color/rng.hpp"

namespace color {

namespace {

double squared_distance(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

std::size_t nearest_centroid(const double* point, const std::vector<double>& centroids, std::size_t k, std::size_t d,
                             double* best_distance = nullptr) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
        const double dist = squared_distance(point, centroids.data() + c * d, d);
        if (dist < best_d) {
            best_d = dist;
            best = c;
        }
    }
    if (best_distance) *best_distance = best_d;
    return best;
}

}  // namespace

double within_cluster_ss(const Tensor& points, const Tensor& centroids, std::span<const std::size_t> assignment) {
    const std::size_t n = points.dim(0), d = points.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        total += squared_distance(points.data().data() + i * d, centroids.data().data() + assignment[i] * d, d);
    return total;
}

KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iters) {
    if (points.rank() != 2) throw ShapeError("kmeans expects an [n x D] point matrix");
    const std::size_t n = points.dim(0), d = points.dim(1);
    if (k == 0) throw ContractError("kmeans needs k >= 1");
    if (n < k)
        throw ContractError("kmeans needs at least k points (" + std::to_string(n) + " < " + std::to_string(k) + ")");
    if (max_iters == 0) throw ContractError("kmeans needs max_iters >= 1");
    const double* pts = points.data().data();

    // k-means++ seeding.
    Rng rng(derive_seed(seed, {0x4B4D4E53}));
    std::vector<double> centroids(k * d);
    std::vector<bool> chosen(n, false);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t first = rng.uniform_index(n);
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t pick = first;
        if (c > 0) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
            if (total > 0.0) {
                double r = rng.uniform() * total;
                pick = n;
                for (std::size_t i = 0; i < n; ++i) {
                    if (chosen[i] || d2[i] <= 0.0) continue;
                    pick = i;
                    r -= d2[i];
                    if (r < 0.0) break;
                }
            } else {
                pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
            }
        }
        chosen[pick] = true;
        std::copy_n(pts + pick * d, d, centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
        for (std::size_t i = 0; i < n; ++i)
            d2[i] = std::min(d2[i], squared_distance(pts + i * d, centroids.data() + c * d, d));
    }

    KMeansResult result;
    std::vector<std::size_t> assign(n);
    for (std::size_t i = 0; i < n; ++i) assign[i] = nearest_centroid(pts + i * d, centroids, k, d);

    std::vector<std::size_t> counts(k);
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Update step, repairing empty clusters with the point farthest from its centroid.
        while (true) {
            std::fill(counts.begin(), counts.end(), 0);
            for (std::size_t a : assign) ++counts[a];
            auto empty = std::find(counts.begin(), counts.end(), std::size_t{0});
            if (empty == counts.end()) break;
            std::size_t far = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[assign[i]] < 2) continue;
                const double dist = squared_distance(pts + i * d, centroids.data() + assign[i] * d, d);
                if (dist > far_d) {
                    far_d = dist;
                    far = i;
                }
            }
            const std::size_t c = static_cast<std::size_t>(empty - counts.begin());
            assign[far] = c;
            std::copy_n(pts + far * d, d, centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
        }
        std::fill(centroids.begin(), centroids.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) centroids[assign[i] * d + j] += pts[i * d + j];
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t j = 0; j < d; ++j) centroids[c * d + j] /= static_cast<double>(counts[c]);

        double objective = 0.0;
        for (std::size_t i = 0; i < n; ++i) objective += squared_distance(pts + i * d, centroids.data() + assign[i] * d, d);
        result.objective_history.push_back(objective);
        ++result.iterations;

        // Assignment step; keep the current cluster on exact ties so the objective never rises.
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            double best_d = 0.0;
            std::size_t best = nearest_centroid(pts + i * d, centroids, k, d, &best_d);
            if (best != assign[i] && squared_distance(pts + i * d, centroids.data() + assign[i] * d, d) > best_d) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed) {
            result.converged = true;
            break;
        }
    }
    result.centroids = Tensor({k, d}, std::move(centroids));
    result.assignment = std::move(assign);
    return result;
}

// ---------------------------------------------------------------------------

std::string to_string(FeatureExtractor extractor) {
    return extractor == FeatureExtractor::frozen ? "frozen" : "first_expert";
}

void Router::add(PrototypeSet prototypes) {
    if (prototypes.extractor != extractor_)
        throw ContractError("prototype set '" + prototypes.dataset_id + "' uses the " + to_string(prototypes.extractor) +
                            " extractor but the router uses " + to_string(extractor_));
    if (!sets_.empty() && prototypes.centroids.dim(1) != sets_.front().centroids.dim(1))
        throw ShapeError("prototype dimension mismatch");
    for (const PrototypeSet& s : sets_)
        if (s.dataset_id == prototypes.dataset_id)
            throw ContractError("dataset '" + prototypes.dataset_id + "' already has prototypes");
    sets_.push_back(std::move(prototypes));
}

std::size_t Router::nearest(std::span<const double> feature) const {
    if (sets_.empty()) throw ContractError("cannot identify a dataset with an empty router");
    const std::size_t d = sets_.front().centroids.dim(1);
    if (feature.size() != d) throw ShapeError("feature length does not match prototype dimension");
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < sets_.size(); ++s) {
        const double* c = sets_[s].centroids.data().data();
        for (std::size_t j = 0; j < sets_[s].k(); ++j) {
            const double dist = squared_distance(feature.data(), c + j * d, d);
            if (dist < best_d) {
                best_d = dist;
                best = s;
            }
        }
    }
    return best;
}

const std::string& Router::identify(std::span<const double> feature) const { return sets_[nearest(feature)].dataset_id; }

Tensor extract_features(const Dataset& data, const ViTParams& backbone, const AdapterSet* adapters) {
    std::size_t width = 0;
    std::vector<double> values =
        batched_logits(data, [&](const Tensor& images) { return encode(images, backbone, adapters); }, width);
    return Tensor({data.size(), width}, std::move(values));
}

PrototypeSet fit_prototypes(const Dataset& data, const ViTParams& backbone, const Expert* first_expert,
                            std::size_t k, std::uint64_t seed, std::string dataset_id) {
    if (first_expert && !first_expert->trained)
        throw ContractError("prototype extraction needs the first expert to be trained");
    const Tensor features = extract_features(data, backbone, first_expert ? &first_expert->adapters : nullptr);
    KMeansResult km = kmeans(features, k, seed);
    round_to_single(km.centroids);
    PrototypeSet set;
    set.dataset_id = std::move(dataset_id);
    set.centroids = std::move(km.centroids);
    set.extractor = first_expert ? FeatureExtractor::first_expert : FeatureExtractor::frozen;
    return set;
}

std::string identify_dataset(const Tensor& image, const Router& router, const ViTParams& backbone,
                             const Expert* first_expert) {
    if (router.empty()) throw ContractError("cannot identify a dataset with an empty router");
    const bool needs_expert = router.extractor() == FeatureExtractor::first_expert;
    if (needs_expert && first_expert == nullptr)
        throw ContractError("router uses first-expert features but no first expert was supplied");
    const Tensor feature = encode(image, backbone, needs_expert ? &first_expert->adapters : nullptr);
    return router.identify(feature.data());
}

RoutedPrediction route_and_predict(const Tensor& image, const Router& router, std::span<const Expert> experts,
                                   const ViTParams& backbone, const std::string& oracle_dataset) {
    if (experts.empty()) throw ContractError("route_and_predict needs at least one expert");
    RoutedPrediction out;
    if (!oracle_dataset.empty()) {
        out.dataset_id = oracle_dataset;
    } else {
        out.dataset_id = identify_dataset(image, router, backbone, &experts.front());
    }
    for (const Expert& e : experts) {
        if (e.dataset_id == out.dataset_id) {
            out.class_id = predict_with_expert(e, image, backbone).class_id;
            return out;
        }
    }
    throw ContractError("no expert for dataset '" + out.dataset_id + "'");
}

}  // namespace color
