// The decoder's velocity network: an MLP over (z_t, sinusoidal t-embedding,
// condition) with a learned null condition for classifier-free guidance, and
// the pluggable latent codec (identity by default: pixel-space flow).
#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "recap/core/hash.hpp"
#include "recap/core/params.hpp"
#include "recap/core/rng.hpp"
#include "recap/core/tensor.hpp"
#include "recap/scene/render.hpp"

namespace recap {

struct DecoderConfig {
    int latent_dim = kImageSize * kImageSize * kChannels;  // 3072 for the identity codec
    int cond_dim = 64;
    int time_dim = 16;
    int width = 256;
    int hidden_layers = 3;

    uint64_t arch_hash() const {
        std::string s = "decoder:" + std::to_string(latent_dim) + ":" + std::to_string(cond_dim) + ":" +
                        std::to_string(time_dim) + ":" + std::to_string(width) + ":" + std::to_string(hidden_layers);
        return fnv1a64_str(s);
    }
};

// Pluggable analog of a VAE latent space. Identity keeps the flow in pixel
// space; decode clamps to [0,1].
template <typename S>
class LatentCodec {
   public:
    virtual ~LatentCodec() = default;
    virtual int latent_dim() const = 0;
    virtual std::vector<S> encode(const RasterImage& img) const = 0;
    virtual RasterImage decode(const std::vector<S>& latent) const = 0;
};

template <typename S>
class IdentityCodec : public LatentCodec<S> {
   public:
    int latent_dim() const override { return kImageSize * kImageSize * kChannels; }
    std::vector<S> encode(const RasterImage& img) const override {
        return std::vector<S>(img.values.begin(), img.values.end());
    }
    RasterImage decode(const std::vector<S>& latent) const override {
        if (static_cast<int>(latent.size()) != latent_dim()) throw DimensionError("codec decode: bad latent size");
        RasterImage img;
        for (size_t i = 0; i < latent.size(); ++i)
            img.values[i] = std::min(1.0f, std::max(0.0f, static_cast<float>(latent[i])));
        return img;
    }
};

inline std::vector<double> sinusoidal_time_embedding(double t, int dim) {
    std::vector<double> emb(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = 3.14159265358979323846 * std::ldexp(1.0, i);  // pi * 2^i
        emb[2 * i] = std::sin(t * freq);
        emb[2 * i + 1] = std::cos(t * freq);
    }
    return emb;
}

template <typename S>
class VelocityNet {
   public:
    VelocityNet(ParameterStore<S>& store, const DecoderConfig& cfg, SeededRng& rng) : store_(&store), cfg_(cfg) {
        // first layer split over the three input blocks; identical to one
        // fused matrix over their concatenation
        w_z_ = store.create_randn("vnet.in_z", {cfg.latent_dim, cfg.width}, rng, std::sqrt(2.0 / cfg.latent_dim));
        w_t_ = store.create_randn("vnet.in_t", {cfg.time_dim, cfg.width}, rng, std::sqrt(2.0 / cfg.time_dim));
        w_c_ = store.create_randn("vnet.in_c", {cfg.cond_dim, cfg.width}, rng, std::sqrt(2.0 / cfg.cond_dim));
        b_in_ = store.create("vnet.in_b", {cfg.width});
        for (int i = 0; i + 1 < cfg.hidden_layers; ++i) {
            const std::string p = "vnet.h" + std::to_string(i) + ".";
            hidden_w_.push_back(store.create_randn(p + "w", {cfg.width, cfg.width}, rng, std::sqrt(2.0 / cfg.width)));
            hidden_b_.push_back(store.create(p + "b", {cfg.width}));
        }
        w_out_ = store.create_randn("vnet.out_w", {cfg.width, cfg.latent_dim}, rng, 1e-3);
        b_out_ = store.create("vnet.out_b", {cfg.latent_dim});
        c_null_ = store.create_randn("c_null", {cfg.cond_dim}, rng, 0.01);
    }

    const DecoderConfig& config() const { return cfg_; }
    ParameterStore<S>& store() const { return *store_; }
    TensorPtr<S> null_condition() const { return c_null_; }

    // Batched forward: one row per sample. times.size() == rows of z.
    TensorPtr<S> forward(const TensorPtr<S>& z, const std::vector<double>& times, const TensorPtr<S>& cond) const {
        const int b = z->rows();
        if (static_cast<int>(times.size()) != b || cond->rows() != b)
            throw DimensionError("velocity forward: batch size mismatch");
        if (z->cols() != cfg_.latent_dim || cond->cols() != cfg_.cond_dim)
            throw DimensionError("velocity forward: latent/condition width mismatch");
        std::vector<S> temb(static_cast<size_t>(b) * cfg_.time_dim);
        for (int i = 0; i < b; ++i) {
            auto e = sinusoidal_time_embedding(times[i], cfg_.time_dim);
            for (int j = 0; j < cfg_.time_dim; ++j) temb[static_cast<size_t>(i) * cfg_.time_dim + j] = static_cast<S>(e[j]);
        }
        auto temb_leaf = ag::leaf<S>({b, cfg_.time_dim}, std::move(temb));
        auto pre = ag::add_rowvec(
            ag::add(ag::add(ag::matmul(z, w_z_), ag::matmul(temb_leaf, w_t_)), ag::matmul(cond, w_c_)), b_in_);
        auto h = ag::silu(pre);
        for (size_t i = 0; i < hidden_w_.size(); ++i)
            h = ag::silu(ag::add_rowvec(ag::matmul(h, hidden_w_[i]), hidden_b_[i]));
        return ag::add_rowvec(ag::matmul(h, w_out_), b_out_);
    }

    // Single-sample convenience: z and cond as plain vectors, result as vector.
    std::vector<S> forward_plain(const std::vector<S>& z, double t, const std::vector<S>& cond) const {
        ag::NoGradGuard ng;
        auto zl = ag::leaf<S>({1, cfg_.latent_dim}, std::vector<S>(z));
        auto cl = ag::leaf<S>({1, cfg_.cond_dim}, std::vector<S>(cond));
        return forward(zl, {t}, cl)->data;
    }

   private:
    ParameterStore<S>* store_;
    DecoderConfig cfg_;
    TensorPtr<S> w_z_, w_t_, w_c_, b_in_, w_out_, b_out_, c_null_;
    std::vector<TensorPtr<S>> hidden_w_, hidden_b_;
};

}  // namespace recap
