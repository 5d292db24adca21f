#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gmoe {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles. Every dimension is strictly positive.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_dims();
        data_.assign(shape_size(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("tensor of shape " + to_string(shape_) + " needs " +
                             std::to_string(shape_size(shape_)) + " values, got " +
                             std::to_string(data_.size()));
        }
    }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // H x W x C indexing for feature maps.
    double& at(std::size_t y, std::size_t x, std::size_t c) noexcept {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }
    double at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }

    void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    std::size_t argmax() const {
        return static_cast<std::size_t>(std::max_element(data_.begin(), data_.end()) - data_.begin());
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    void require_same_shape(const Tensor& other, const char* what) const {
        if (shape_ != other.shape_) {
            throw ShapeError(std::string(what) + ": shape mismatch " + to_string(shape_) + " vs " +
                             to_string(other.shape_));
        }
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_dims() const {
        for (std::size_t d : shape_) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator*(Tensor a, double s) { return a *= s; }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    a.require_same_shape(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// 64-bit FNV-1a over the raw bytes of a sequence of tensors (shapes included).
class TensorHasher {
public:
    void add(const Tensor& t) {
        for (std::size_t d : t.shape()) add_bytes(&d, sizeof d);
        add_bytes(t.data().data(), t.size() * sizeof(double));
    }
    void add_bytes(const void* p, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= bytes[i];
            hash_ *= 1099511628211ULL;
        }
    }
    std::uint64_t value() const noexcept { return hash_; }

private:
    std::uint64_t hash_ = 14695981039346656037ULL;
};

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return s;
}

}  // namespace gmoe
