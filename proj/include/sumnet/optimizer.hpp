#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sumnet/model.hpp"
#include "sumnet/tensor.hpp"

namespace sumnet {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update on raw buffers; t is the step count
// including this step (t >= 1).
inline void adam_update(std::span<double> theta, std::span<const double> g,
                        std::span<double> m, std::span<double> v, std::int64_t t,
                        const AdamConfig& cfg) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        theta[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

// First/second moment buffers matching the model's parameter tensors, in
// wiring order (kernel then bias per layer), plus the shared step counter.
class AdamState {
  public:
    AdamState() = default;

    explicit AdamState(const ModelParams& params) {
        for (const LayerParam& l : params.layers()) {
            m_.push_back(Tensor::zeros(l.kernel.shape()));
            v_.push_back(Tensor::zeros(l.kernel.shape()));
            m_.push_back(Tensor::zeros(l.bias.shape()));
            v_.push_back(Tensor::zeros(l.bias.shape()));
        }
    }

    std::int64_t step_count() const { return t_; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }
    void set_step_count(std::int64_t t) { t_ = t; }

    // Applies one step from the gradients stored on the parameter tensors.
    // A missing gradient is a usage error; a non-finite one is a numeric
    // failure named after the offending parameter.
    void step(ModelParams& params, const AdamConfig& cfg) {
        ++t_;
        std::size_t slot = 0;
        for (LayerParam& l : params.layers()) {
            apply(l.kernel, l.name + ".kernel", slot, cfg);
            apply(l.bias, l.name + ".bias", slot, cfg);
        }
    }

  private:
    void apply(Tensor& param, const std::string& name, std::size_t& slot,
               const AdamConfig& cfg) {
        std::span<const double> g = param.grad();
        if (g.size() != static_cast<std::size_t>(param.numel()))
            throw validation_error("adam_step: no gradient for " + name);
        for (double x : g)
            if (!std::isfinite(x))
                throw numeric_error("adam_step: non-finite gradient in " + name);
        adam_update(param.mutable_data(), g, m_[slot].mutable_data(),
                    v_[slot].mutable_data(), t_, cfg);
        ++slot;  // one slot per tensor: kernel, then bias
    }

    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::int64_t t_ = 0;
};

inline void adam_step(ModelParams& params, AdamState& state, const AdamConfig& cfg) {
    state.step(params, cfg);
}

}  // namespace sumnet
