#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "color/tensor.hpp"

namespace color {

// A labelled image collection. images is [n x height x width x channels].
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    std::vector<int> domains;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }

    // Stacks the selected images into a [k x height x width x channels] batch.
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

    static Dataset concatenate(std::span<const Dataset* const> parts);
};

}  // namespace color
