// The encoder policy: a small causal transformer over caption tokens with an
// optional 16-patch visual prefix, plus the two-layer projector that turns
// its last hidden state into the decoder condition.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "recap/core/gaussian.hpp"
#include "recap/core/hash.hpp"
#include "recap/core/params.hpp"
#include "recap/core/rng.hpp"
#include "recap/core/tensor.hpp"
#include "recap/scene/grammar.hpp"
#include "recap/scene/render.hpp"

namespace recap {

struct CaptionerConfig {
    int dim = 64;
    int layers = 2;
    int max_len = 32;  // token budget per caption, BOS included
    int mlp_mult = 4;

    static constexpr int patches = 16;                  // 4x4 grid of 8x8 patches
    static constexpr int patch_dim = kCellPixels * kCellPixels * kChannels;  // 192
    int positions() const { return patches + max_len; }

    uint64_t arch_hash() const {
        std::string s = "captioner:" + std::to_string(dim) + ":" + std::to_string(layers) + ":" +
                        std::to_string(max_len) + ":" + std::to_string(mlp_mult) + ":" + std::to_string(kVocabSize);
        return fnv1a64_str(s);
    }
};

template <typename S>
struct CaptionTrajectory {
    CaptionTokens tokens;        // starts with BOS
    std::vector<double> logps;   // per emitted token under the sampling policy
    std::vector<S> h_last;       // hidden state at the final emitted position
    bool truncated = false;      // hit max_len before EOS

    int emitted() const { return static_cast<int>(tokens.size()) - 1; }
};

// Two affine layers with a nonlinearity between; parameters live in the
// decoder's store (trained during stage-1, frozen afterwards).
template <typename S>
class Projector {
   public:
    Projector() = default;
    Projector(ParameterStore<S>& store, int in_dim, int out_dim, SeededRng& rng) : out_dim_(out_dim) {
        w1_ = store.create_randn("proj.w1", {in_dim, in_dim}, rng, 0.08);
        b1_ = store.create("proj.b1", {in_dim});
        w2_ = store.create_randn("proj.w2", {in_dim, out_dim}, rng, 0.08);
        b2_ = store.create("proj.b2", {out_dim});
    }

    int out_dim() const { return out_dim_; }

    // h: [1, d] row; returns [cond] vector node
    TensorPtr<S> apply(const TensorPtr<S>& h) const {
        auto z = ag::silu(ag::add_rowvec(ag::matmul(h, w1_), b1_));
        return ag::flatten(ag::add_rowvec(ag::matmul(z, w2_), b2_));
    }

   private:
    TensorPtr<S> w1_, b1_, w2_, b2_;
    int out_dim_ = 0;
};

template <typename S>
class CaptionerModel {
   public:
    CaptionerModel(ParameterStore<S>& store, const CaptionerConfig& cfg, SeededRng& rng) : store_(&store), cfg_(cfg) {
        const int d = cfg.dim;
        patch_w_ = store.create_randn("patch.w", {CaptionerConfig::patch_dim, d}, rng, 0.02);
        patch_b_ = store.create("patch.b", {d});
        tok_emb_ = store.create_randn("tok_emb", {kVocabSize, d}, rng, 0.02);
        pos_emb_ = store.create_randn("pos_emb", {cfg.positions(), d}, rng, 0.01);
        layers_.resize(cfg.layers);
        // residual-branch projections scaled down by 1/sqrt(2*layers)
        const double res_std = 0.02 / std::sqrt(2.0 * cfg.layers);
        for (int i = 0; i < cfg.layers; ++i) {
            const std::string p = "l" + std::to_string(i) + ".";
            auto& L = layers_[i];
            L.ln1_g = store.create(p + "ln1.g", {d});
            L.ln1_b = store.create(p + "ln1.b", {d});
            L.wq = store.create_randn(p + "attn.wq", {d, d}, rng, 0.05);
            L.wk = store.create_randn(p + "attn.wk", {d, d}, rng, 0.05);
            L.wv = store.create_randn(p + "attn.wv", {d, d}, rng, 0.02);
            L.wo = store.create_randn(p + "attn.wo", {d, d}, rng, res_std);
            L.ln2_g = store.create(p + "ln2.g", {d});
            L.ln2_b = store.create(p + "ln2.b", {d});
            L.mlp_w1 = store.create_randn(p + "mlp.w1", {d, d * cfg.mlp_mult}, rng, 0.02);
            L.mlp_b1 = store.create(p + "mlp.b1", {d * cfg.mlp_mult});
            L.mlp_w2 = store.create_randn(p + "mlp.w2", {d * cfg.mlp_mult, d}, rng, res_std);
            L.mlp_b2 = store.create(p + "mlp.b2", {d});
            for (auto g : {L.ln1_g, L.ln2_g}) std::fill(g->data.begin(), g->data.end(), S(1));
        }
        lnf_g_ = store.create("lnf.g", {d});
        lnf_b_ = store.create("lnf.b", {d});
        std::fill(lnf_g_->data.begin(), lnf_g_->data.end(), S(1));
        head_w_ = store.create_randn("head.w", {d, kVocabSize}, rng, 0.02);
        head_b_ = store.create("head.b", {kVocabSize});
    }

    const CaptionerConfig& config() const { return cfg_; }
    ParameterStore<S>& store() const { return *store_; }

    // The paper-side freeze contract: the visual patch embedder never trains
    // during RL.
    void freeze_visual_encoder() {
        store_->set_trainable("patch.w", false);
        store_->set_trainable("patch.b", false);
    }

    static TensorPtr<S> patch_matrix(const RasterImage& img) {
        std::vector<S> data(CaptionerConfig::patches * CaptionerConfig::patch_dim);
        int r = 0;
        for (int pr = 0; pr < kGridSize; ++pr)
            for (int pc = 0; pc < kGridSize; ++pc, ++r) {
                S* row = data.data() + static_cast<int64_t>(r) * CaptionerConfig::patch_dim;
                int k = 0;
                for (int y = 0; y < kCellPixels; ++y)
                    for (int x = 0; x < kCellPixels; ++x)
                        for (int c = 0; c < kChannels; ++c)
                            row[k++] = static_cast<S>(img.at(pr * kCellPixels + y, pc * kCellPixels + x, c));
            }
        return ag::leaf<S>({CaptionerConfig::patches, CaptionerConfig::patch_dim}, std::move(data));
    }

    // Post-norm hidden states for the full sequence: [prefix + L, dim].
    // Token j sits at position `patches + j` in both modes so text-only and
    // image-prefixed forwards share one positional frame.
    TensorPtr<S> forward_hidden(const RasterImage* img, const CaptionTokens& toks) const {
        const int L = static_cast<int>(toks.size());
        if (L == 0) throw InputError("captioner forward: empty token sequence");
        if (L > cfg_.max_len) throw InputError("captioner forward: sequence exceeds max_len");
        for (int t : toks)
            if (t < 0 || t >= kVocabSize) throw InputError("captioner forward: token id out of vocabulary");

        auto tok_rows = ag::gather_rows(tok_emb_, toks);
        auto tok_pos = ag::slice_rows(pos_emb_, CaptionerConfig::patches, CaptionerConfig::patches + L);
        auto x = ag::add(tok_rows, tok_pos);
        if (img) {
            auto patches = patch_matrix(*img);
            auto emb = ag::add_rowvec(ag::matmul(patches, patch_w_), patch_b_);
            auto pat_pos = ag::slice_rows(pos_emb_, 0, CaptionerConfig::patches);
            x = ag::concat_rows<S>({ag::add(emb, pat_pos), x});
        }
        const S inv_sqrt_d = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg_.dim)));
        for (const auto& L_ : layers_) {
            auto y = ag::layer_norm_rows(x, L_.ln1_g, L_.ln1_b);
            auto q = ag::matmul(y, L_.wq);
            auto k = ag::matmul(y, L_.wk);
            auto v = ag::matmul(y, L_.wv);
            auto scores = ag::scale(ag::matmul(q, ag::transpose(k)), inv_sqrt_d);
            auto probs = ag::causal_softmax_rows(scores);
            auto attn = ag::matmul(ag::matmul(probs, v), L_.wo);
            x = ag::add(x, attn);
            auto z = ag::layer_norm_rows(x, L_.ln2_g, L_.ln2_b);
            auto h1 = ag::silu(ag::add_rowvec(ag::matmul(z, L_.mlp_w1), L_.mlp_b1));
            auto h2 = ag::add_rowvec(ag::matmul(h1, L_.mlp_w2), L_.mlp_b2);
            x = ag::add(x, h2);
        }
        return ag::layer_norm_rows(x, lnf_g_, lnf_b_);
    }

    // Next-token logits at every text position: [L, vocab]. The visual prefix
    // is attended but receives no predictions.
    TensorPtr<S> forward_logits(const RasterImage* img, const CaptionTokens& toks) const {
        if (toks.empty() || toks[0] != kTokBos) throw InputError("caption prefix must begin with BOS");
        auto h = forward_hidden(img, toks);
        const int P = img ? CaptionerConfig::patches : 0;
        auto text = ag::slice_rows(h, P, P + static_cast<int>(toks.size()));
        return ag::add_rowvec(ag::matmul(text, head_w_), head_b_);
    }

    // Teacher-forced per-token log-probabilities for tokens[1..] under the
    // (temperature-scaled) policy; the same op the sampler's logps come from.
    TensorPtr<S> caption_logprob(const RasterImage* img, const CaptionTokens& toks, S temperature = S(1)) const {
        if (toks.size() < 2) throw InputError("caption_logprob: need BOS plus at least one token");
        auto logits = forward_logits(img, toks);
        auto pred = ag::slice_rows(logits, 0, static_cast<int>(toks.size()) - 1);
        std::vector<int> targets(toks.begin() + 1, toks.end());
        return ag::token_logprobs(pred, targets, temperature);
    }

    CaptionTrajectory<S> sample_caption(const RasterImage& img, double temperature, int max_len, SeededRng& rng) const {
        if (!(temperature > 0)) throw DomainError("sample_caption: temperature must be positive");
        if (max_len < 2) throw InputError("sample_caption: max_len must be >= 2");
        max_len = std::min(max_len, cfg_.max_len);
        ag::NoGradGuard ng;
        CaptionTrajectory<S> traj;
        traj.tokens = {kTokBos};
        while (static_cast<int>(traj.tokens.size()) < max_len) {
            auto logits = forward_logits(&img, traj.tokens);
            const int last = static_cast<int>(traj.tokens.size()) - 1;
            std::vector<S> row(logits->data.begin() + static_cast<int64_t>(last) * kVocabSize,
                               logits->data.begin() + static_cast<int64_t>(last + 1) * kVocabSize);
            auto probs = softmax(row, static_cast<S>(temperature));
            const double u = rng.uniform();
            int pick = kVocabSize - 1;
            double cum = 0.0;
            for (int i = 0; i < kVocabSize; ++i) {
                cum += static_cast<double>(probs[i]);
                if (u < cum) {
                    pick = i;
                    break;
                }
            }
            traj.tokens.push_back(pick);
            traj.logps.push_back(std::log(static_cast<double>(probs[pick])));
            if (pick == kTokEos) break;
        }
        traj.truncated = traj.tokens.back() != kTokEos;
        auto h = forward_hidden(&img, traj.tokens);
        const int rowi = (CaptionerConfig::patches + static_cast<int>(traj.tokens.size())) - 1;
        traj.h_last.assign(h->data.begin() + static_cast<int64_t>(rowi) * cfg_.dim,
                           h->data.begin() + static_cast<int64_t>(rowi + 1) * cfg_.dim);
        return traj;
    }

    CaptionTokens greedy_caption(const RasterImage& img, int max_len) const {
        ag::NoGradGuard ng;
        max_len = std::min(max_len, cfg_.max_len);
        CaptionTokens toks = {kTokBos};
        while (static_cast<int>(toks.size()) < max_len) {
            auto logits = forward_logits(&img, toks);
            const int last = static_cast<int>(toks.size()) - 1;
            const S* row = logits->data.data() + static_cast<int64_t>(last) * kVocabSize;
            int best = 0;
            for (int i = 1; i < kVocabSize; ++i)
                if (row[i] > row[best]) best = i;
            toks.push_back(best);
            if (best == kTokEos) break;
        }
        return toks;
    }

    // Text-only hidden at the final position, through the projector.
    TensorPtr<S> condition_from_text(const Projector<S>& proj, const CaptionTokens& toks) const {
        if (toks.empty()) throw InputError("condition_from_text: empty token sequence");
        auto h = forward_hidden(nullptr, toks);
        auto last = ag::slice_rows(h, static_cast<int>(toks.size()) - 1, static_cast<int>(toks.size()));
        return proj.apply(last);
    }

    // Hidden row (as [1, d]) for an explicit token sequence in image mode;
    // used to re-derive the trajectory's h_T through the same code path.
    TensorPtr<S> hidden_last(const RasterImage* img, const CaptionTokens& toks) const {
        auto h = forward_hidden(img, toks);
        const int P = img ? CaptionerConfig::patches : 0;
        const int rowi = P + static_cast<int>(toks.size()) - 1;
        return ag::slice_rows(h, rowi, rowi + 1);
    }

   private:
    struct Layer {
        TensorPtr<S> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    ParameterStore<S>* store_;
    CaptionerConfig cfg_;
    TensorPtr<S> patch_w_, patch_b_, tok_emb_, pos_emb_, lnf_g_, lnf_b_, head_w_, head_b_;
    std::vector<Layer> layers_;
};

// One supervised step: mean next-token cross-entropy with teacher forcing,
// averaged over every predicted token in the batch.
template <typename S, typename RecordIt>
double captioner_pretrain_step(CaptionerModel<S>& model, RecordIt begin, RecordIt end, AdamOptimizer<S>& opt) {
    if (begin == end) throw InputError("pretrain step: empty batch");
    model.store().zero_grad();
    std::vector<TensorPtr<S>> parts;
    int64_t total_tokens = 0;
    for (auto it = begin; it != end; ++it) {
        const auto& rec = **it;
        auto lp = model.caption_logprob(&rec.image, rec.caption);
        total_tokens += lp->numel();
        parts.push_back(ag::sum_all(lp));
    }
    auto total = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) total = ag::add(total, parts[i]);
    auto loss = ag::scale(ag::neg(total), static_cast<S>(1.0 / static_cast<double>(total_tokens)));
    const double loss_val = static_cast<double>(loss->data[0]);
    if (!std::isfinite(loss_val)) throw NumericError("pretrain step: non-finite loss");
    ag::backward(loss);
    opt.step(model.store());
    return loss_val;
}

}  // namespace recap
