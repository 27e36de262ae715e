#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sumnet/checkpoint.hpp"
#include "sumnet/ops.hpp"
#include "sumnet/rng.hpp"
#include "sumnet/tape.hpp"
#include "sumnet/tensor.hpp"

namespace sumnet {

// Encoder-decoder wiring. The encoder follows the VGG11 feature stack behind
// a 1->3 stem; the decoder mirrors it with index unpooling and skip
// concatenation; a single-channel sigmoid head closes it. Channel widths per
// encoder stage are fixed by the architecture; the decoder widths are the
// mirror image, constrained so each unpooling sees exactly the channel count
// its pooling recorded.
struct SumNetConfig {
    int input_h = 256;
    int input_w = 384;
    int stem_channels = 3;
    std::vector<std::vector<int>> encoder_stages{{64}, {128}, {256, 256}, {512, 512}, {512, 512}};
    int out_channels = 1;

    void validate() const {
        if (encoder_stages.size() != 5)
            throw validation_error("SumNetConfig: exactly 5 encoder stages required");
        for (const auto& stage : encoder_stages)
            if (stage.empty())
                throw validation_error("SumNetConfig: empty encoder stage");
        if (stem_channels <= 0 || out_channels <= 0)
            throw validation_error("SumNetConfig: channel counts must be positive");
        if (input_h % 32 != 0 || input_w % 32 != 0)
            throw validation_error("SumNetConfig: input " + std::to_string(input_h) + "x" +
                                   std::to_string(input_w) +
                                   " not divisible by 32 (5 pooling stages)");
    }
};

struct ConvSpec {
    std::string name;
    int c_in = 0;
    int c_out = 0;
};

// Flat list of convolution layers in execution order, plus the stage
// boundaries the forward pass walks.
struct WiringPlan {
    std::vector<ConvSpec> convs;                  // all layers, execution order
    std::vector<std::vector<int>> encoder_stage;  // conv indices per stage
    std::vector<std::vector<int>> decoder_stage;  // conv indices per stage, deepest first
    int stem = -1;
    int head = -1;
};

inline WiringPlan make_wiring(const SumNetConfig& cfg) {
    cfg.validate();
    WiringPlan plan;
    auto add = [&](const std::string& name, int c_in, int c_out) {
        plan.convs.push_back({name, c_in, c_out});
        return static_cast<int>(plan.convs.size()) - 1;
    };

    plan.stem = add("stem.conv", 1, cfg.stem_channels);

    // stage_out[s] = channel width leaving encoder stage s (1-based)
    std::vector<int> stage_out(6, 0);
    int prev = cfg.stem_channels;
    plan.encoder_stage.resize(5);
    for (int s = 1; s <= 5; ++s) {
        const auto& widths = cfg.encoder_stages[s - 1];
        for (std::size_t j = 0; j < widths.size(); ++j) {
            plan.encoder_stage[s - 1].push_back(add(
                "enc" + std::to_string(s) + ".conv" + std::to_string(j + 1), prev, widths[j]));
            prev = widths[j];
        }
        stage_out[s] = prev;
    }

    // Decoder stage s consumes the unpooled map (stage_out[s] channels)
    // concatenated with the matched skip (another stage_out[s]), and must
    // hand the next unpooling stage_out[s-1] channels.
    plan.decoder_stage.resize(5);
    for (int s = 5; s >= 1; --s) {
        const int convs_here = static_cast<int>(cfg.encoder_stages[s - 1].size());
        const int target = s > 1 ? stage_out[s - 1] : stage_out[1];
        int c_in = 2 * stage_out[s];
        for (int j = 0; j < convs_here; ++j) {
            const int c_out = (j + 1 < convs_here) ? stage_out[s] : target;
            plan.decoder_stage[5 - s].push_back(add(
                "dec" + std::to_string(s) + ".conv" + std::to_string(j + 1), c_in, c_out));
            c_in = c_out;
        }
    }

    plan.head = add("head.conv", stage_out[1], cfg.out_channels);
    return plan;
}

struct LayerParam {
    std::string name;
    Tensor kernel;  // (Cout, Cin, 3, 3)
    Tensor bias;    // (1, Cout, 1, 1)
};

// Learnable state, iterated in wiring order.
class ModelParams {
  public:
    ModelParams() = default;
    ModelParams(SumNetConfig cfg, std::vector<LayerParam> layers)
        : config_(std::move(cfg)), layers_(std::move(layers)) {}

    const SumNetConfig& config() const { return config_; }
    std::vector<LayerParam>& layers() { return layers_; }
    const std::vector<LayerParam>& layers() const { return layers_; }

    const LayerParam& layer(const std::string& name) const {
        for (const LayerParam& l : layers_)
            if (l.name == name) return l;
        throw validation_error("ModelParams: no layer named " + name);
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const LayerParam& l : layers_) n += l.kernel.numel() + l.bias.numel();
        return n;
    }

  private:
    SumNetConfig config_;
    std::vector<LayerParam> layers_;
};

// Kaiming fan-in initialization for the kernels, zero biases. The same seed
// yields bit-identical parameters.
inline ModelParams build(const SumNetConfig& cfg, std::uint64_t seed) {
    const WiringPlan plan = make_wiring(cfg);
    Rng rng(seed);
    std::vector<LayerParam> layers;
    layers.reserve(plan.convs.size());
    for (const ConvSpec& spec : plan.convs) {
        const int fan_in = spec.c_in * 9;
        const double stddev = std::sqrt(2.0 / fan_in);
        LayerParam p;
        p.name = spec.name;
        p.kernel = rng.normal_tensor({spec.c_out, spec.c_in, 3, 3}, stddev);
        p.kernel.set_requires_grad(true);
        p.bias = Tensor::zeros({1, spec.c_out, 1, 1});
        p.bias.set_requires_grad(true);
        layers.push_back(std::move(p));
    }
    return ModelParams(cfg, std::move(layers));
}

// Wiring events observed during one forward pass; lets tests verify the
// index-transfer and skip-concatenation structure by object identity rather
// than trust the wiring code. Entries are in production/consumption order.
struct ForwardTrace {
    std::vector<const void*> pool_indices_ids;     // per encoder stage 1..5
    std::vector<const void*> skip_ids;             // pre-pool activation per stage 1..5
    std::vector<const void*> unpool_consumed_ids;  // per decoder step, execution order
    std::vector<const void*> concat_skip_ids;      // per decoder step
    std::vector<int> unpooled_channels;            // per decoder step
    std::vector<int> skip_channels;                // per decoder step
    std::vector<int> first_conv_in_channels;       // per decoder step
};

// Full SUMNet forward pass: (N,1,H,W) -> (N,1,H,W) foreground probabilities,
// strictly inside (0,1). H and W must be divisible by 32. Records onto the
// tape when one is given.
inline Tensor forward(const ModelParams& params, const Tensor& batch, Tape* tape = nullptr,
                      ForwardTrace* trace = nullptr) {
    const TensorShape s = batch.shape();
    if (s.c != 1)
        throw validation_error("forward: expected single-channel input, got " + s.str());
    if (s.h % 32 != 0 || s.w % 32 != 0)
        throw validation_error("forward: input " + s.str() + " not divisible by 32");
    ensure_finite(batch, "forward input");

    const WiringPlan plan = make_wiring(params.config());
    const auto& layers = params.layers();
    auto conv_relu = [&](const Tensor& x, int idx) {
        return relu(conv2d(x, layers[idx].kernel, layers[idx].bias, 1, tape), tape);
    };

    Tensor x = conv_relu(batch, plan.stem);

    std::vector<Tensor> skips;          // pre-pooling activation per stage
    std::vector<PoolIndices> indices;   // pooling indices per stage
    for (int s_idx = 0; s_idx < 5; ++s_idx) {
        for (int conv_idx : plan.encoder_stage[s_idx]) x = conv_relu(x, conv_idx);
        skips.push_back(x);
        auto [pooled, idx] = maxpool2x2(x, tape);
        indices.push_back(std::move(idx));
        x = pooled;
        if (trace) {
            trace->pool_indices_ids.push_back(indices.back().offsets.data());
            trace->skip_ids.push_back(skips.back().impl());
        }
    }

    for (int d = 0; d < 5; ++d) {
        const int stage = 5 - d;  // encoder-numbered stage being undone
        const PoolIndices& idx = indices[stage - 1];
        const Tensor& skip = skips[stage - 1];
        x = maxunpool2x2(x, idx, tape);
        if (trace) {
            trace->unpool_consumed_ids.push_back(idx.offsets.data());
            trace->concat_skip_ids.push_back(skip.impl());
            trace->unpooled_channels.push_back(x.shape().c);
            trace->skip_channels.push_back(skip.shape().c);
            trace->first_conv_in_channels.push_back(
                layers[plan.decoder_stage[d].front()].kernel.shape().c);
        }
        x = concat_channels(x, skip, tape);
        for (int conv_idx : plan.decoder_stage[d]) x = conv_relu(x, conv_idx);
    }

    x = conv2d(x, layers[plan.head].kernel, layers[plan.head].bias, 1, tape);
    return sigmoid(x, tape);
}

namespace detail {

inline std::vector<std::uint32_t> kernel_dims(const Tensor& k) {
    const TensorShape s = k.shape();
    return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
            static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
}

}  // namespace detail

inline std::vector<CheckpointEntry> params_to_entries(const ModelParams& params) {
    std::vector<CheckpointEntry> entries;
    for (const LayerParam& l : params.layers()) {
        entries.push_back({l.name + ".kernel", detail::kernel_dims(l.kernel),
                           {l.kernel.data().begin(), l.kernel.data().end()}});
        entries.push_back({l.name + ".bias",
                           {static_cast<std::uint32_t>(l.bias.shape().c)},
                           {l.bias.data().begin(), l.bias.data().end()}});
    }
    return entries;
}

inline void save_weights(const ModelParams& params, const std::filesystem::path& path) {
    write_checkpoint(path, params_to_entries(params));
}

namespace detail {

inline void load_params_from_entries(ModelParams& params,
                                     const std::vector<CheckpointEntry>& entries) {
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const CheckpointEntry& e : entries) by_name[e.name] = &e;
    for (LayerParam& l : params.layers()) {
        auto k_it = by_name.find(l.name + ".kernel");
        auto b_it = by_name.find(l.name + ".bias");
        if (k_it == by_name.end() || b_it == by_name.end())
            throw validation_error("checkpoint: missing entries for layer " + l.name);
        const CheckpointEntry& ke = *k_it->second;
        if (ke.dims != kernel_dims(l.kernel))
            throw validation_error("checkpoint: shape mismatch for " + ke.name + ", expected " +
                                   l.kernel.shape().str());
        const CheckpointEntry& be = *b_it->second;
        if (be.dims.size() != 1 || be.dims[0] != static_cast<std::uint32_t>(l.bias.shape().c))
            throw validation_error("checkpoint: shape mismatch for " + be.name);
        std::copy(ke.values.begin(), ke.values.end(), l.kernel.mutable_data().begin());
        std::copy(be.values.begin(), be.values.end(), l.bias.mutable_data().begin());
    }
}

}  // namespace detail

// Parameter tensors with the right shapes but zero values; cheaper than
// build() when the values are about to be overwritten.
inline ModelParams build_shell(const SumNetConfig& cfg) {
    const WiringPlan plan = make_wiring(cfg);
    std::vector<LayerParam> layers;
    layers.reserve(plan.convs.size());
    for (const ConvSpec& spec : plan.convs) {
        LayerParam p;
        p.name = spec.name;
        p.kernel = Tensor::zeros({spec.c_out, spec.c_in, 3, 3});
        p.kernel.set_requires_grad(true);
        p.bias = Tensor::zeros({1, spec.c_out, 1, 1});
        p.bias.set_requires_grad(true);
        layers.push_back(std::move(p));
    }
    return ModelParams(cfg, std::move(layers));
}

inline ModelParams load_weights(const std::filesystem::path& path,
                                const SumNetConfig& cfg = SumNetConfig{}) {
    ModelParams params = build_shell(cfg);
    detail::load_params_from_entries(params, read_checkpoint(path));
    return params;
}

// Replaces encoder kernels/biases ("enc*" layers) with matching entries from
// an external checkpoint; the stem and decoder are untouched. Returns the
// layer names replaced.
inline std::vector<std::string> import_encoder_weights(ModelParams& params,
                                                       const std::filesystem::path& path) {
    const std::vector<CheckpointEntry> entries = read_checkpoint(path);
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const CheckpointEntry& e : entries) by_name[e.name] = &e;

    std::vector<std::string> replaced;
    for (LayerParam& l : params.layers()) {
        if (l.name.rfind("enc", 0) != 0) continue;
        auto k_it = by_name.find(l.name + ".kernel");
        auto b_it = by_name.find(l.name + ".bias");
        if (k_it == by_name.end() && b_it == by_name.end()) continue;
        if (k_it != by_name.end()) {
            const CheckpointEntry& ke = *k_it->second;
            if (ke.dims != detail::kernel_dims(l.kernel))
                throw validation_error("import_encoder_weights: shape conflict for " + ke.name);
            std::copy(ke.values.begin(), ke.values.end(), l.kernel.mutable_data().begin());
        }
        if (b_it != by_name.end()) {
            const CheckpointEntry& be = *b_it->second;
            if (be.dims.size() != 1 ||
                be.dims[0] != static_cast<std::uint32_t>(l.bias.shape().c))
                throw validation_error("import_encoder_weights: shape conflict for " + be.name);
            std::copy(be.values.begin(), be.values.end(), l.bias.mutable_data().begin());
        }
        replaced.push_back(l.name);
    }
    if (replaced.empty())
        throw validation_error("import_encoder_weights: no matching entries in " + path.string());
    return replaced;
}

}  // namespace sumnet
