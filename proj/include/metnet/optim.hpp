#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "metnet/errors.hpp"
#include "metnet/rng.hpp"
#include "metnet/tensor.hpp"

namespace metnet {

enum class Init { Zeros, Ones, TruncNormalFanIn };

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Named parameter map plus Adam moment state. Parameter init depends only on
// (store seed, parameter name, shape), so creation order does not affect the
// values and checkpoints are reproducible.
template <class S>
class ParameterStoreT {
public:
    explicit ParameterStoreT(std::uint64_t seed) : seed_(seed) {}

    TensorT<S>& param(const std::string& name, Shape shape, Init init, std::int64_t fan_in = 0) {
        auto it = params_.find(name);
        if (it != params_.end()) {
            if (it->second.shape() != shape) {
                throw ShapeError("parameter " + name + " redefined with shape " + shape_str(shape) +
                                 ", previously " + shape_str(it->second.shape()));
            }
            return it->second;
        }
        TensorT<S> t(shape);
        switch (init) {
            case Init::Zeros:
                break;
            case Init::Ones:
                for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = S(1);
                break;
            case Init::TruncNormalFanIn: {
                if (fan_in <= 0) throw ConfigError("parameter " + name + ": fan_in required for init");
                Rng rng(mix_seed(seed_, name));
                const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
                for (std::int64_t i = 0; i < t.numel(); ++i) {
                    t.at(i) = static_cast<S>(rng.truncated_normal(0.0, std_dev));
                }
                break;
            }
        }
        t.set_requires_grad(true);
        names_.push_back(name);
        auto res = params_.emplace(name, std::move(t));
        return res.first->second;
    }

    TensorT<S>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }

    std::int64_t total_parameters() const {
        std::int64_t n = 0;
        for (const auto& name : names_) n += params_.at(name).numel();
        return n;
    }

    void zero_grads() {
        for (const auto& name : names_) params_.at(name).zero_grad();
    }

    std::int64_t step_count() const { return step_; }
    void set_step_count(std::int64_t s) { step_ = s; }
    std::uint64_t seed() const { return seed_; }

    // Standard Adam with bias correction, applied from each parameter's
    // accumulated gradient buffer. Deterministic given inputs.
    void adam_step(const AdamConfig& cfg) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
        for (const auto& name : names_) {
            TensorT<S>& p = params_.at(name);
            const S* g = p.grad();
            if (g == nullptr) throw ConfigError("adam_step: parameter " + name + " has no gradient buffer");
            auto& m = moment1_[name];
            auto& v = moment2_[name];
            if (m.empty()) m.assign(static_cast<std::size_t>(p.numel()), S(0));
            if (v.empty()) v.assign(static_cast<std::size_t>(p.numel()), S(0));
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                const double gi = static_cast<double>(g[i]);
                const double mi = cfg.beta1 * static_cast<double>(m[static_cast<std::size_t>(i)]) +
                                  (1.0 - cfg.beta1) * gi;
                const double vi = cfg.beta2 * static_cast<double>(v[static_cast<std::size_t>(i)]) +
                                  (1.0 - cfg.beta2) * gi * gi;
                m[static_cast<std::size_t>(i)] = static_cast<S>(mi);
                v[static_cast<std::size_t>(i)] = static_cast<S>(vi);
                const double update = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
                p.at(i) = static_cast<S>(static_cast<double>(p.at(i)) - update);
            }
        }
    }

private:
    std::uint64_t seed_;
    std::vector<std::string> names_;
    std::unordered_map<std::string, TensorT<S>> params_;
    std::unordered_map<std::string, std::vector<S>> moment1_, moment2_;
    std::int64_t step_ = 0;
};

using ParameterStore = ParameterStoreT<float>;

}  // namespace metnet
