#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "acdc/tensor.hpp"

namespace acdc {

/// Backing storage for one (possibly shared) parameter tensor. Parameters in
/// the same sharing group alias a single ParamStorage, so their gradients
/// accumulate jointly and the optimizer sees one accumulator.
template <typename T>
struct ParamStorage {
    Tensor<T> value;
    Tensor<T> grad;
    std::string group;     // empty = unshared
    bool trainable = true; // false for buffers such as batch-norm running moments
};

template <typename T>
struct Parameter {
    std::string name; // unique path string, e.g. "unet1.enc3.weight"
    std::shared_ptr<ParamStorage<T>> storage;

    Tensor<T>& value() { return storage->value; }
    const Tensor<T>& value() const { return storage->value; }
    Tensor<T>& grad() { return storage->grad; }
    const Shape& shape() const { return storage->value.shape; }
};

/// Named parameter tensors in insertion order. Two create() calls with the
/// same non-empty sharing-group tag alias the same storage.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& create(const std::string& name, Shape shape, const std::string& group = "",
                         bool trainable = true) {
        ACDC_REQUIRE(!index_.count(name), "duplicate parameter name '", name, "'");
        std::shared_ptr<ParamStorage<T>> storage;
        if (!group.empty()) {
            auto it = groups_.find(group);
            if (it != groups_.end()) {
                storage = it->second;
                ACDC_REQUIRE(storage->value.shape == shape,
                             "sharing group '", group, "' holds shape ", shape_str(storage->value.shape),
                             " but '", name, "' wants ", shape_str(shape));
            }
        }
        if (!storage) {
            storage = std::make_shared<ParamStorage<T>>();
            storage->value = Tensor<T>(shape);
            storage->grad = Tensor<T>(std::move(shape));
            storage->group = group;
            storage->trainable = trainable;
            if (!group.empty()) groups_.emplace(group, storage);
        }
        params_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{name, storage}));
        index_.emplace(name, params_.size() - 1);
        return *params_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<T>& get(const std::string& name) {
        auto it = index_.find(name);
        ACDC_REQUIRE(it != index_.end(), "missing parameter '", name, "'");
        return *params_[it->second];
    }

    const Parameter<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        ACDC_REQUIRE(it != index_.end(), "missing parameter '", name, "'");
        return *params_[it->second];
    }

    std::vector<Parameter<T>*> all() {
        std::vector<Parameter<T>*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    /// Unique storages in first-appearance order (shared params listed once).
    std::vector<ParamStorage<T>*> unique_storages() const {
        std::vector<ParamStorage<T>*> out;
        std::unordered_map<const ParamStorage<T>*, bool> seen;
        for (const auto& p : params_) {
            if (!seen.count(p->storage.get())) {
                seen.emplace(p->storage.get(), true);
                out.push_back(p->storage.get());
            }
        }
        return out;
    }

    void zero_grads() {
        for (auto* s : unique_storages()) s->grad.fill(T(0));
    }

    /// Scalar count over unique trainable storages.
    int64_t trainable_count() const {
        int64_t n = 0;
        for (auto* s : unique_storages())
            if (s->trainable) n += s->value.size();
        return n;
    }

    size_t size() const { return params_.size(); }

private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::unordered_map<std::string, size_t> index_;
    std::unordered_map<std::string, std::shared_ptr<ParamStorage<T>>> groups_;
};

} // namespace acdc
