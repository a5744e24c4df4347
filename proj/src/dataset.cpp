#include "color/dataset.hpp"

#include <algorithm>

#include "color/error.hpp"

namespace color {

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ContractError("empty batch");
    const Shape& s = images.shape();
    const std::size_t stride = images.numel() / s[0];
    Shape out_shape = s;
    out_shape[0] = indices.size();
    std::vector<double> values(indices.size() * stride);
    auto src = images.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= s[0]) throw ContractError("batch index out of range");
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride), stride,
                    values.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    return Tensor(std::move(out_shape), std::move(values));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels.at(i));
    return out;
}

Dataset Dataset::concatenate(std::span<const Dataset* const> parts) {
    if (parts.empty()) throw ContractError("concatenate: no datasets");
    Shape shape = parts.front()->images.shape();
    std::size_t total = 0;
    for (const Dataset* p : parts) {
        if (Shape(p->images.shape().begin() + 1, p->images.shape().end()) != Shape(shape.begin() + 1, shape.end()))
            throw ShapeError("concatenate: image shapes differ");
        total += p->size();
    }
    shape[0] = total;
    std::vector<double> values;
    values.reserve(shape_numel(shape));
    Dataset out;
    for (const Dataset* p : parts) {
        values.insert(values.end(), p->images.data().begin(), p->images.data().end());
        out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
        out.domains.insert(out.domains.end(), p->domains.begin(), p->domains.end());
    }
    out.images = Tensor(std::move(shape), std::move(values));
    return out;
}

}  // namespace color
