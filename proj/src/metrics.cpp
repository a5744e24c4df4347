#include "color/metrics.hpp"

#include <algorithm>
#include <string>

#include "color/error.hpp"

namespace color {

AccuracyMatrix::AccuracyMatrix(std::vector<std::size_t> test_sizes) : sizes_(std::move(test_sizes)) {
    for (std::size_t s : sizes_)
        if (s == 0) throw ContractError("accuracy matrix: empty test set");
    correct_.assign(sizes_.size(), std::vector<std::optional<std::size_t>>(sizes_.size()));
}

void AccuracyMatrix::record(std::size_t update, std::size_t dataset, std::size_t correct) {
    if (update >= sizes_.size() || dataset > update)
        throw ContractError("accuracy matrix: entry (" + std::to_string(update) + ", " + std::to_string(dataset) +
                            ") outside the lower triangle");
    if (correct > sizes_[dataset]) throw ContractError("accuracy matrix: more correct predictions than test instances");
    correct_[update][dataset] = correct;
}

bool AccuracyMatrix::has(std::size_t update, std::size_t dataset) const {
    return update < correct_.size() && dataset <= update && correct_[update][dataset].has_value();
}

std::size_t AccuracyMatrix::correct(std::size_t update, std::size_t dataset) const {
    if (!has(update, dataset))
        throw ContractError("accuracy matrix: missing entry (" + std::to_string(update) + ", " +
                            std::to_string(dataset) + ")");
    return *correct_[update][dataset];
}

double AccuracyMatrix::accuracy(std::size_t update, std::size_t dataset) const {
    return static_cast<double>(correct(update, dataset)) / static_cast<double>(sizes_[dataset]);
}

double average_accuracy(const AccuracyMatrix& matrix, std::size_t update, AverageMode mode) {
    if (update >= matrix.num_datasets()) throw ContractError("average_accuracy: update index out of range");
    if (mode == AverageMode::task_mean) {
        double total = 0.0;
        for (std::size_t tau = 0; tau <= update; ++tau) total += matrix.accuracy(update, tau);
        return total / static_cast<double>(update + 1);
    }
    std::size_t correct = 0, seen = 0;
    for (std::size_t tau = 0; tau <= update; ++tau) {
        correct += matrix.correct(update, tau);
        seen += matrix.test_size(tau);
    }
    return static_cast<double>(correct) / static_cast<double>(seen);
}

double forgetting(const AccuracyMatrix& matrix, std::size_t last) {
    if (last < 1) throw ContractError("forgetting needs at least two updates");
    if (last >= matrix.num_datasets()) throw ContractError("forgetting: update index out of range");
    double total = 0.0;
    for (std::size_t tau = 0; tau < last; ++tau) {
        double best = matrix.accuracy(tau, tau);
        for (std::size_t t = tau + 1; t < last; ++t) best = std::max(best, matrix.accuracy(t, tau));
        total += best - matrix.accuracy(last, tau);
    }
    return total / static_cast<double>(last);
}

}  // namespace color
