#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sumnet {

// Contract violations: bad shapes, malformed files, invalid configuration.
struct validation_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values where the contract demands finite ones.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TensorShape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const TensorShape&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

namespace detail {

struct TensorImpl {
    TensorShape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until a backward pass needs it
    bool requires_grad = false;
};

}  // namespace detail

// Dense 4-D array (batch, channel, rows, cols) of doubles, row-major.
// Copies are shallow: both handles refer to the same storage, which is how
// the tape identifies a tensor across operations. Values are treated as
// immutable once produced by an op; mutable_data() exists for parameter
// construction and optimizer updates, which require exclusive access.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(TensorShape s) {
        check_shape(s);
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = s;
        impl->values.assign(static_cast<std::size_t>(s.numel()), 0.0);
        return Tensor(std::move(impl));
    }

    static Tensor full(TensorShape s, double v) {
        Tensor t = zeros(s);
        for (double& x : t.impl_->values) x = v;
        return t;
    }

    static Tensor scalar(double v) { return full({1, 1, 1, 1}, v); }

    static Tensor from_data(TensorShape s, std::vector<double> data) {
        check_shape(s);
        if (static_cast<std::int64_t>(data.size()) != s.numel())
            throw validation_error("Tensor::from_data: " + std::to_string(data.size()) +
                                   " values for shape " + s.str());
        for (double v : data)
            if (!std::isfinite(v))
                throw numeric_error("Tensor::from_data: non-finite element");
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = s;
        impl->values = std::move(data);
        return Tensor(std::move(impl));
    }

    bool defined() const { return impl_ != nullptr; }

    const TensorShape& shape() const { return impl_->shape; }
    std::int64_t numel() const { return impl_->shape.numel(); }

    std::span<const double> data() const { return impl_->values; }
    std::span<double> mutable_data() { return impl_->values; }

    double at(int n, int c, int h, int w) const { return impl_->values[offset(n, c, h, w)]; }
    double& at(int n, int c, int h, int w) { return impl_->values[offset(n, c, h, w)]; }

    double item() const {
        if (numel() != 1)
            throw validation_error("Tensor::item: tensor has " + std::to_string(numel()) +
                                   " elements");
        return impl_->values[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    // Empty span until a backward pass has populated it.
    std::span<const double> grad() const { return impl_->grad; }

    bool all_finite() const {
        for (double v : impl_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Identity of the underlying storage; keys tape bookkeeping.
    detail::TensorImpl* impl() const { return impl_.get(); }

    Tensor clone() const {
        Tensor t = zeros(impl_->shape);
        t.impl_->values = impl_->values;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

    static void check_shape(const TensorShape& s) {
        if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
            throw validation_error("Tensor: non-positive dimension in shape " + s.str());
    }

    std::size_t offset(int n, int c, int h, int w) const {
        const TensorShape& s = impl_->shape;
        return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
    }

    std::shared_ptr<detail::TensorImpl> impl_;
};

// Per-window argmax offsets recorded by 2x2 max-pooling. Each element is the
// row-major position (0..3) of the selected maximum inside its window; the
// shape matches the pooled output.
struct PoolIndices {
    TensorShape shape;
    std::vector<std::uint8_t> offsets;
};

inline void ensure_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw numeric_error(std::string(what) + ": non-finite values");
}

}  // namespace sumnet
