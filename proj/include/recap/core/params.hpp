// Named parameter store, Adam optimizer with global-norm clipping, and the
// finite-difference gradient checker used as the verification oracle.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "recap/core/rng.hpp"
#include "recap/core/tensor.hpp"

namespace recap {

template <typename S>
class ParameterStore {
   public:
    using Snapshot = std::map<std::string, std::vector<S>>;

    TensorPtr<S> create(const std::string& name, std::vector<int> shape) {
        if (locked_) throw ConfigError("parameter store is locked; cannot add '" + name + "'");
        if (params_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
        auto t = ag::zeros<S>(std::move(shape), true);
        params_[name] = t;
        return t;
    }

    TensorPtr<S> create_randn(const std::string& name, std::vector<int> shape, SeededRng& rng, double stddev) {
        auto t = create(name, std::move(shape));
        for (auto& v : t->data) v = static_cast<S>(rng.normal() * stddev);
        return t;
    }

    void lock() { locked_ = true; }

    TensorPtr<S> at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    std::vector<std::string> keys() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : params_) out.push_back(k);
        return out;
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& [k, v] : params_) n += v->numel();
        return n;
    }

    void zero_grad() {
        for (auto& [k, v] : params_) v->zero_grad();
    }

    // Freezing flips requires_grad on the leaf, so frozen subgraphs are pruned
    // from backward and their grads stay exactly zero.
    void set_trainable(const std::string& name, bool trainable) { at(name)->requires_grad = trainable; }
    void set_trainable_prefix(const std::string& prefix, bool trainable) {
        for (auto& [k, v] : params_) {
            if (k.rfind(prefix, 0) == 0) v->requires_grad = trainable;
        }
    }
    void set_all_trainable(bool trainable) {
        for (auto& [k, v] : params_) v->requires_grad = trainable;
    }
    bool trainable(const std::string& name) const { return at(name)->requires_grad; }

    Snapshot snapshot() const {
        Snapshot s;
        for (const auto& [k, v] : params_) s[k] = v->data;
        return s;
    }
    void restore(const Snapshot& s) {
        for (const auto& [k, data] : s) {
            auto t = at(k);
            if (t->data.size() != data.size()) throw DimensionError("restore: size mismatch for '" + k + "'");
            t->data = data;
        }
    }

    int64_t step_count() const { return step_; }
    void set_step_count(int64_t s) { step_ = s; }
    void bump_step() { ++step_; }

    const std::map<std::string, TensorPtr<S>>& entries() const { return params_; }

   private:
    std::map<std::string, TensorPtr<S>> params_;
    bool locked_ = false;
    int64_t step_ = 0;
};

// Adam with optional global-norm gradient clipping (clip_norm <= 0 disables).
template <typename S>
class AdamOptimizer {
   public:
    AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double clip_norm = 1.0)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), clip_norm_(clip_norm) {}

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

    // Applies one update to every trainable parameter; returns the pre-clip
    // global gradient norm.
    double step(ParameterStore<S>& store) {
        double sq = 0.0;
        for (const auto& [k, t] : store.entries()) {
            if (!t->requires_grad || t->grad.empty()) continue;
            for (S g : t->grad) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        double scale = 1.0;
        if (clip_norm_ > 0.0 && norm > clip_norm_) scale = clip_norm_ / norm;

        store.bump_step();
        const int64_t t_step = store.step_count();
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_step));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_step));
        for (const auto& [k, t] : store.entries()) {
            if (!t->requires_grad || t->grad.empty()) continue;
            auto& m = m_[k];
            auto& v = v_[k];
            if (m.size() != t->data.size()) m.assign(t->data.size(), 0.0);
            if (v.size() != t->data.size()) v.assign(t->data.size(), 0.0);
            for (size_t i = 0; i < t->data.size(); ++i) {
                const double g = static_cast<double>(t->grad[i]) * scale;
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                t->data[i] = static_cast<S>(static_cast<double>(t->data[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
        return norm;
    }

    // Moments keyed like the store, for checkpointing.
    const std::map<std::string, std::vector<double>>& first_moments() const { return m_; }
    const std::map<std::string, std::vector<double>>& second_moments() const { return v_; }
    void load_moments(std::map<std::string, std::vector<double>> m, std::map<std::string, std::vector<double>> v) {
        m_ = std::move(m);
        v_ = std::move(v);
    }

   private:
    double lr_, beta1_, beta2_, eps_, clip_norm_;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

// Compares reverse-mode gradients against central finite differences.
// loss_fn must be deterministic; this is verified by evaluating twice.
// max_entries_per_tensor <= 0 checks every entry, otherwise a seeded
// subsample of that many entries per tensor.
template <typename S>
double grad_check(const std::function<TensorPtr<S>(ParameterStore<S>&)>& loss_fn, ParameterStore<S>& params,
                  double epsilon, int max_entries_per_tensor = 0, uint64_t seed = 0) {
    double base1, base2;
    {
        ag::NoGradGuard ng;
        base1 = static_cast<double>(loss_fn(params)->data[0]);
        base2 = static_cast<double>(loss_fn(params)->data[0]);
    }
    if (base1 != base2) throw ConfigError("grad_check: loss_fn is not deterministic; check invalid");

    params.zero_grad();
    auto loss = loss_fn(params);
    ag::backward(loss);

    SeededRng rng(seed);
    double max_rel = 0.0;
    for (const auto& [name, t] : params.entries()) {
        if (!t->requires_grad) continue;
        t->ensure_grad();
        std::vector<int64_t> idx;
        if (max_entries_per_tensor > 0 && t->numel() > max_entries_per_tensor) {
            for (int i = 0; i < max_entries_per_tensor; ++i)
                idx.push_back(static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(t->numel()))));
        } else {
            for (int64_t i = 0; i < t->numel(); ++i) idx.push_back(i);
        }
        for (int64_t i : idx) {
            const S saved = t->data[i];
            double lp, lm;
            {
                ag::NoGradGuard ng;
                t->data[i] = static_cast<S>(static_cast<double>(saved) + epsilon);
                lp = static_cast<double>(loss_fn(params)->data[0]);
                t->data[i] = static_cast<S>(static_cast<double>(saved) - epsilon);
                lm = static_cast<double>(loss_fn(params)->data[0]);
                t->data[i] = saved;
            }
            const double fd = (lp - lm) / (2.0 * epsilon);
            const double ad = static_cast<double>(t->grad[i]);
            // the 1e-3 floor keeps FD truncation noise on near-zero entries
            // from swamping the relative measure
            const double rel = std::abs(ad - fd) / std::max(1e-3, std::abs(ad) + std::abs(fd));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace recap
