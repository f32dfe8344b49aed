#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spider/errors.hpp"

namespace spider {

// Dense row-major tensor with optional reverse-mode gradient storage.
// TensorT is a cheap shared handle; TapeT records backward closures in
// forward order and replays them reversed. A tensor/tape pair is
// single-threaded; independent model instances may run on distinct threads.
//
// The production scalar type is float (see core.hpp). Finite-difference
// tests instantiate the same templates at double.

template <typename T>
struct TensorStorage {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dims must be positive");
        n *= d;
    }
    return n;
}

template <typename T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
        auto s = std::make_shared<TensorStorage<T>>();
        s->data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
        s->shape = std::move(shape);
        s->requires_grad = requires_grad;
        return TensorT(std::move(s));
    }

    static TensorT full(std::vector<int> shape, T value) {
        TensorT t = zeros(std::move(shape));
        for (auto& v : t.storage_->data) v = value;
        return t;
    }

    static TensorT from_data(std::vector<int> shape, std::vector<T> data,
                             bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("data length does not match shape");
        auto s = std::make_shared<TensorStorage<T>>();
        s->shape = std::move(shape);
        s->data = std::move(data);
        s->requires_grad = requires_grad;
        return TensorT(std::move(s));
    }

    bool defined() const { return storage_ != nullptr; }
    const std::vector<int>& shape() const { return storage_->shape; }
    int dim(int i) const { return storage_->shape.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(storage_->data.size()); }

    std::span<const T> data() const { return storage_->data; }
    std::span<T> data_mut() { return storage_->data; }
    T item() const {
        if (numel() != 1) throw UsageError("item() on non-scalar tensor");
        return storage_->data[0];
    }

    bool requires_grad() const { return storage_->requires_grad; }
    void set_requires_grad(bool v) { storage_->requires_grad = v; }

    bool has_grad() const { return !storage_->grad.empty(); }
    // Gradients of leaves that never received accumulation read as zeros.
    std::span<const T> grad() const {
        if (storage_->grad.empty()) {
            static const std::vector<T> kEmpty;
            return kEmpty;
        }
        return storage_->grad;
    }

    void accumulate_grad(int64_t i, T v) {
        ensure_grad();
        storage_->grad[static_cast<size_t>(i)] += v;
    }
    void ensure_grad() {
        if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), T(0));
    }
    std::span<T> grad_mut() {
        ensure_grad();
        return storage_->grad;
    }
    void clear_grad() { storage_->grad.clear(); }

    // Deep copy of values; gradient storage is not copied.
    TensorT clone() const {
        auto s = std::make_shared<TensorStorage<T>>();
        s->shape = storage_->shape;
        s->data = storage_->data;
        s->requires_grad = storage_->requires_grad;
        return TensorT(std::move(s));
    }

    bool same_storage(const TensorT& other) const { return storage_ == other.storage_; }

    void check_finite(const char* what) const {
        for (T v : storage_->data)
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError(std::string("non-finite value in ") + what);
    }

private:
    explicit TensorT(std::shared_ptr<TensorStorage<T>> s) : storage_(std::move(s)) {}
    std::shared_ptr<TensorStorage<T>> storage_;
};

template <typename T>
class TapeT {
public:
    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    // Reverse-mode accumulation from a scalar root. A tape can be consumed
    // once; re-running without a fresh forward is a usage error.
    void backward(TensorT<T> root) {
        if (!root.defined() || root.numel() != 1)
            throw UsageError("backward root must be a scalar tensor");
        if (consumed_) throw UsageError("tape already consumed; run a new forward pass");
        consumed_ = true;
        root.ensure_grad();
        root.grad_mut()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void add_activations(int64_t n) { activation_elems_ += n; }
    int64_t activation_elems() const { return activation_elems_; }

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<std::function<void()>> nodes_;
    int64_t activation_elems_ = 0;
    bool consumed_ = false;
};

}  // namespace spider
