#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "color/rng.hpp"
#include "color/tensor.hpp"
#include "color/vit.hpp"

namespace testing {

using color::Tensor;

inline Tensor random_tensor(color::Shape shape, std::uint64_t seed, double scale = 1.0, bool requires_grad = false) {
    color::Rng rng(seed);
    std::vector<double> values(color::shape_numel(shape));
    for (double& v : values) v = scale * rng.normal();
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

// |a - n| / max(|a|, |n|, 1e-3)
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

// Backpropagates loss_fn() and compares the gradient of `param` at `coords`
// with central differences. Returns the largest relative error.
inline double gradient_check(const std::function<Tensor()>& loss_fn, const Tensor& param,
                             const std::vector<std::size_t>& coords, double eps = 1e-3) {
    Tensor p = param;
    p.clear_grad();
    color::Tape tape;
    Tensor loss;
    {
        color::TapeGuard guard(tape);
        loss = loss_fn();
    }
    tape.backward(loss);
    std::vector<double> analytic(param.numel(), 0.0);
    if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());
    double worst = 0.0;
    for (std::size_t i : coords) {
        auto data = p.mutable_data();
        const double saved = data[i];
        data[i] = saved + eps;
        const double up = loss_fn().item();
        data[i] = saved - eps;
        const double down = loss_fn().item();
        data[i] = saved;
        worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    return worst;
}

inline std::vector<std::size_t> all_coords(const Tensor& t) {
    std::vector<std::size_t> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
}

inline color::ModelConfig tiny_model() {
    color::ModelConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.num_layers = 2;
    c.num_heads = 2;
    c.ffn_hidden = 16;
    return c;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& name)
        : path_(std::filesystem::temp_directory_path() / ("color_test_" + name)) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

}  // namespace testing
