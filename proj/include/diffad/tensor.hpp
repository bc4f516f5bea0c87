#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace diffad {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class ValueError : public Error {
  public:
    using Error::Error;
};

class NumericError : public Error {
  public:
    using Error::Error;
};

class DataError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

// Checked mode validates finiteness on tensor creation and zero divisors.
inline std::atomic<bool>& checked_mode_flag() {
    static std::atomic<bool> flag{true};
    return flag;
}

inline bool checked_mode() { return checked_mode_flag().load(std::memory_order_relaxed); }
inline void set_checked_mode(bool on) { checked_mode_flag().store(on, std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
inline std::uint64_t next_tensor_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// BasicTensor
// ---------------------------------------------------------------------------

/// Immutable dense row-major array. Copies share storage and identity; every
/// freshly constructed tensor gets a new identity used by the gradient tape.
template <class T>
class BasicTensor {
  public:
    using value_type = T;

    BasicTensor() : data_(std::make_shared<const std::vector<T>>()), id_(detail::next_tensor_id()) {}

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : shape_(std::move(shape)), requires_grad_(requires_grad), id_(detail::next_tensor_id()) {
        for (auto e : shape_) {
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
        }
        if (numel(shape_) != data.size()) {
            throw ShapeError("shape " + to_string(shape_) + " does not match " +
                             std::to_string(data.size()) + " values");
        }
        if (checked_mode()) {
            for (const T& v : data) {
                if (!std::isfinite(v)) throw NumericError("non-finite value in tensor data");
            }
        }
        data_ = std::make_shared<const std::vector<T>>(std::move(data));
    }

    static BasicTensor zeros(Shape shape) {
        auto n = numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, T(0)));
    }

    static BasicTensor full(Shape shape, T value) {
        auto n = numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, value));
    }

    static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

    template <class Rng>
    static BasicTensor randn(Shape shape, Rng& rng) {
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<T> v(numel(shape));
        for (auto& x : v) x = static_cast<T>(dist(rng));
        return BasicTensor(std::move(shape), std::move(v));
    }

    template <class Rng>
    static BasicTensor uniform(Shape shape, T lo, T hi, Rng& rng) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<T> v(numel(shape));
        for (auto& x : v) x = static_cast<T>(dist(rng));
        return BasicTensor(std::move(shape), std::move(v));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_->size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const noexcept { return data_->empty(); }
    bool is_scalar() const noexcept { return data_->size() == 1 && shape_.size() <= 1; }

    std::span<const T> data() const& noexcept { return {data_->data(), data_->size()}; }
    std::span<const T> data() const&& = delete;  // would dangle
    const std::vector<T>& values() const& noexcept { return *data_; }
    std::vector<T> values() const&& { return *data_; }
    T operator[](std::size_t i) const { return (*data_)[i]; }

    T item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
        return (*data_)[0];
    }

    bool requires_grad() const noexcept { return requires_grad_; }
    std::uint64_t id() const noexcept { return id_; }

    /// Same values, fresh identity, detached from any gradient history.
    BasicTensor detach() const {
        BasicTensor t = *this;
        t.requires_grad_ = false;
        t.id_ = detail::next_tensor_id();
        return t;
    }

    /// Fresh leaf with the same values and the requested grad flag.
    BasicTensor as_leaf(bool requires_grad) const {
        BasicTensor t = *this;
        t.requires_grad_ = requires_grad;
        t.id_ = detail::next_tensor_id();
        return t;
    }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> v(data_->begin(), data_->end());
        return BasicTensor<U>(shape_, std::move(v), requires_grad_);
    }

    bool same_values(const BasicTensor& other) const {
        return shape_ == other.shape_ && *data_ == *other.data_;
    }

  private:
    // Internal constructor for op outputs: skips validation already done by the op.
    struct Unchecked {};
    BasicTensor(Unchecked, Shape shape, std::vector<T> data, bool requires_grad)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<T>>(std::move(data))),
          requires_grad_(requires_grad),
          id_(detail::next_tensor_id()) {}

    template <class U>
    friend BasicTensor<U> make_op_result(Shape shape, std::vector<U> data, bool requires_grad);

    Shape shape_;
    std::shared_ptr<const std::vector<T>> data_;
    bool requires_grad_ = false;
    std::uint64_t id_ = 0;
};

/// Result constructor used by ops: validates finiteness in checked mode but
/// otherwise trusts the caller on shape consistency.
template <class T>
BasicTensor<T> make_op_result(Shape shape, std::vector<T> data, bool requires_grad) {
    if (checked_mode()) {
        for (const T& v : data) {
            if (!std::isfinite(v)) throw NumericError("non-finite value produced by tensor op");
        }
    }
    return BasicTensor<T>(typename BasicTensor<T>::Unchecked{}, std::move(shape), std::move(data),
                          requires_grad);
}

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

using Rng = std::mt19937_64;

/// FNV-1a over raw float bytes; used to assert frozen or unchanged weights.
template <class T>
std::uint64_t hash_values(const BasicTensor<T>& t, std::uint64_t h = 1469598103934665603ULL) {
    auto bytes = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    for (auto e : t.shape()) {
        h ^= static_cast<std::uint64_t>(e);
        h *= 1099511628211ULL;
    }
    return h;
}

template <class T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Stacks equally shaped items into one tensor with a new leading axis.
inline Tensor stack_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw ValueError("stack_batch: empty batch");
    const Shape& s = items.front().shape();
    std::vector<float> data;
    data.reserve(items.size() * items.front().size());
    for (const auto& t : items) {
        if (t.shape() != s) throw ShapeError("stack_batch: mixed sample shapes " + to_string(s) + " vs " + to_string(t.shape()));
        data.insert(data.end(), t.data().begin(), t.data().end());
    }
    Shape out{items.size()};
    out.insert(out.end(), s.begin(), s.end());
    return Tensor(std::move(out), std::move(data));
}

}  // namespace diffad
