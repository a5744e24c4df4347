#pragma once

// Inference-time dataset identification with k-means prototypes.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "color/dataset.hpp"
#include "color/experts.hpp"
#include "color/tensor.hpp"
#include "color/vit.hpp"

namespace color {

struct KMeansResult {
    Tensor centroids;                      // k x D
    std::vector<std::size_t> assignment;   // cluster of each point
    std::vector<double> objective_history; // within-cluster sum of squares after each Lloyd iteration
    std::size_t iterations = 0;
    bool converged = false;
};

// Lloyd's algorithm with k-means++ seeding. points is [n x D].
KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iters = 100);

double within_cluster_ss(const Tensor& points, const Tensor& centroids, std::span<const std::size_t> assignment);

// Which representation prototypes are computed in.
enum class FeatureExtractor {
    frozen,        // h(x), the backbone without adapters
    first_expert,  // h(x; adapters of the first dataset)
};

std::string to_string(FeatureExtractor extractor);

struct PrototypeSet {
    std::string dataset_id;
    Tensor centroids;  // k x D, kept on the binary32 grid
    FeatureExtractor extractor = FeatureExtractor::frozen;

    std::size_t k() const { return centroids.dim(0); }
};

class Router {
public:
    explicit Router(FeatureExtractor extractor = FeatureExtractor::frozen) : extractor_(extractor) {}

    FeatureExtractor extractor() const noexcept { return extractor_; }
    // Rejects duplicate dataset ids and prototype sets built with another extractor.
    void add(PrototypeSet prototypes);
    std::size_t size() const noexcept { return sets_.size(); }
    bool empty() const noexcept { return sets_.empty(); }
    const std::vector<PrototypeSet>& prototype_sets() const noexcept { return sets_; }

    // Index (in insertion order) of the set owning the globally nearest centroid.
    // Ties go to the earliest registered set.
    std::size_t nearest(std::span<const double> feature) const;
    const std::string& identify(std::span<const double> feature) const;

private:
    FeatureExtractor extractor_;
    std::vector<PrototypeSet> sets_;
};

// Features of every image in `data` ([n x D]); adapters select h(x; Theta) over h(x).
Tensor extract_features(const Dataset& data, const ViTParams& backbone, const AdapterSet* adapters = nullptr);

PrototypeSet fit_prototypes(const Dataset& data, const ViTParams& backbone, const Expert* first_expert,
                            std::size_t k, std::uint64_t seed, std::string dataset_id);

std::string identify_dataset(const Tensor& image, const Router& router, const ViTParams& backbone,
                             const Expert* first_expert = nullptr);

struct RoutedPrediction {
    int class_id = -1;
    std::string dataset_id;
};

// Identifies the dataset, then predicts with that dataset's expert. When
// `oracle_dataset` is non-empty identification is skipped. experts are in
// router insertion order; experts[0] is the feature extractor for first_expert routers.
RoutedPrediction route_and_predict(const Tensor& image, const Router& router, std::span<const Expert> experts,
                                   const ViTParams& backbone, const std::string& oracle_dataset = {});

}  // namespace color
