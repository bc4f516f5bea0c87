#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tensor.hpp"

namespace diffad {

/// Gradients produced by one backward pass, keyed by tensor identity.
template <class T>
class BasicGradMap {
  public:
    bool contains(const BasicTensor<T>& t) const { return grads_.count(t.id()) != 0; }

    /// Gradient of `t`; zeros of t's shape when the loss does not depend on it.
    BasicTensor<T> operator[](const BasicTensor<T>& t) const {
        auto it = grads_.find(t.id());
        if (it == grads_.end()) return BasicTensor<T>::zeros(t.shape());
        return BasicTensor<T>(t.shape(), it->second);
    }

    std::span<const T> raw(const BasicTensor<T>& t) const {
        auto it = grads_.find(t.id());
        if (it == grads_.end()) return {};
        return it->second;
    }

    /// Indices of tape entries in the order backward visited them.
    const std::vector<std::size_t>& visit_order() const { return visit_order_; }

  private:
    template <class>
    friend class BasicTape;
    std::unordered_map<std::uint64_t, std::vector<T>> grads_;
    std::vector<std::size_t> visit_order_;
};

/// Records differentiable ops executed in training mode. Single-threaded; one
/// tape per training thread. A tape is consumed by backward().
template <class T>
class BasicTape {
  public:
    // Returns one gradient vector per recorded input; an empty vector means
    // "no contribution" for that input.
    using BackwardFn = std::function<std::vector<std::vector<T>>(std::span<const T> grad_out)>;

    struct Entry {
        std::string op;
        std::vector<BasicTensor<T>> inputs;
        std::uint64_t output_id;
        std::size_t output_size;
        BackwardFn backward;
    };

    BasicTape() = default;
    BasicTape(const BasicTape&) = delete;
    BasicTape& operator=(const BasicTape&) = delete;
    BasicTape(BasicTape&&) = default;
    BasicTape& operator=(BasicTape&&) = default;

    void record(std::string op, std::vector<BasicTensor<T>> inputs, const BasicTensor<T>& output,
                BackwardFn fn) {
        if (consumed_) throw Error("tape already consumed by backward()");
        for (const auto& in : inputs) {
            if (in.requires_grad()) tracked_.insert(in.id());
        }
        entries_.push_back(Entry{std::move(op), std::move(inputs), output.id(), output.size(), std::move(fn)});
    }

    std::size_t size() const noexcept { return entries_.size(); }
    bool consumed() const noexcept { return consumed_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    /// True when `t` was recorded as a differentiable input of some op.
    bool tracks(const BasicTensor<T>& t) const { return tracked_.count(t.id()) != 0; }

    BasicGradMap<T> backward(const BasicTensor<T>& loss) {
        if (consumed_) throw Error("backward() called twice on the same tape");
        if (!loss.is_scalar()) throw ShapeError("backward() requires a scalar loss, got " + to_string(loss.shape()));
        if (entries_.empty()) throw Error("backward() on an empty tape");

        BasicGradMap<T> out;
        auto& grads = out.grads_;
        grads[loss.id()] = std::vector<T>{T(1)};

        for (std::size_t k = entries_.size(); k-- > 0;) {
            Entry& e = entries_[k];
            auto it = grads.find(e.output_id);
            if (it == grads.end()) continue;
            out.visit_order_.push_back(k);
            auto input_grads = e.backward(std::span<const T>(it->second));
            grads.erase(it);
            for (std::size_t i = 0; i < e.inputs.size() && i < input_grads.size(); ++i) {
                const auto& in = e.inputs[i];
                auto& g = input_grads[i];
                if (!in.requires_grad() || g.empty()) continue;
                auto [slot, inserted] = grads.try_emplace(in.id());
                if (inserted) {
                    slot->second = std::move(g);
                } else {
                    for (std::size_t j = 0; j < g.size(); ++j) slot->second[j] += g[j];
                }
            }
        }
        entries_.clear();
        tracked_.clear();
        consumed_ = true;
        return out;
    }

  private:
    std::vector<Entry> entries_;
    std::unordered_set<std::uint64_t> tracked_;
    bool consumed_ = false;
};

using Tape = BasicTape<float>;
using GradMap = BasicGradMap<float>;

}  // namespace diffad
