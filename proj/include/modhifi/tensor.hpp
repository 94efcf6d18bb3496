#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "modhifi/error.hpp"

namespace modhifi {

/// Per-sample activation shape. Images are C x H x W. Token matrices T x d
/// are held channel-major as C = d, H = T, W = 1 so that "channel" always
/// means the component axis a layer mixes over.
struct Shape {
    std::size_t c = 0;
    std::size_t h = 1;
    std::size_t w = 1;

    std::size_t spatial() const noexcept { return h * w; }
    std::size_t size() const noexcept { return c * h * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }
};

enum class Layout { Image, Tokens };

struct InputLayout {
    Layout kind = Layout::Image;
    Shape shape;
    bool operator==(const InputLayout&) const = default;
};

/// Batch of activations, N x C x (H*W), contiguous.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t n, Shape shape, double fill = 0.0)
        : n_(n), shape_(shape), data_(n * shape.size(), fill) {}
    Tensor(std::size_t n, Shape shape, std::vector<double> data)
        : n_(n), shape_(shape), data_(std::move(data)) {
        if (data_.size() != n_ * shape_.size()) throw ShapeMismatch("tensor data length mismatch");
    }

    std::size_t batch() const noexcept { return n_; }
    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& at(std::size_t n, std::size_t c, std::size_t s) {
        return data_[(n * shape_.c + c) * shape_.spatial() + s];
    }
    double at(std::size_t n, std::size_t c, std::size_t s) const {
        return data_[(n * shape_.c + c) * shape_.spatial() + s];
    }

    std::span<double> sample(std::size_t n) { return {data_.data() + n * shape_.size(), shape_.size()}; }
    std::span<const double> sample(std::size_t n) const {
        return {data_.data() + n * shape_.size(), shape_.size()};
    }
    std::span<double> channel(std::size_t n, std::size_t c) {
        return {data_.data() + (n * shape_.c + c) * shape_.spatial(), shape_.spatial()};
    }
    std::span<const double> channel(std::size_t n, std::size_t c) const {
        return {data_.data() + (n * shape_.c + c) * shape_.spatial(), shape_.spatial()};
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Copies samples [first, first + count).
    Tensor slice(std::size_t first, std::size_t count) const {
        Tensor out(count, shape_);
        const std::size_t stride = shape_.size();
        std::copy(data_.begin() + static_cast<std::ptrdiff_t>(first * stride),
                  data_.begin() + static_cast<std::ptrdiff_t>((first + count) * stride), out.data_.begin());
        return out;
    }

    bool operator==(const Tensor&) const = default;

private:
    std::size_t n_ = 0;
    Shape shape_;
    std::vector<double> data_;
};

} // namespace modhifi
