#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace color {

// Correct-prediction counts a[t][tau] for test set tau after update t (tau <= t).
// Updates and datasets are zero-based.
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(std::vector<std::size_t> test_sizes);

    std::size_t num_datasets() const noexcept { return sizes_.size(); }
    std::size_t test_size(std::size_t dataset) const { return sizes_.at(dataset); }

    void record(std::size_t update, std::size_t dataset, std::size_t correct);
    bool has(std::size_t update, std::size_t dataset) const;
    std::size_t correct(std::size_t update, std::size_t dataset) const;
    double accuracy(std::size_t update, std::size_t dataset) const;

private:
    std::vector<std::size_t> sizes_;
    std::vector<std::vector<std::optional<std::size_t>>> correct_;
};

enum class AverageMode {
    pooled,     // correct instances / all instances over test sets 0..t (default)
    task_mean,  // arithmetic mean of per-dataset accuracies (cross-check only)
};

double average_accuracy(const AccuracyMatrix& matrix, std::size_t update, AverageMode mode = AverageMode::pooled);

// Mean over datasets tau < last of (best accuracy on tau after updates tau..last-1)
// minus the accuracy on tau after `last`. Requires last >= 1.
double forgetting(const AccuracyMatrix& matrix, std::size_t last);

}  // namespace color
