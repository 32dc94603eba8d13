// Reconstruction scoring (100 x cosine per backbone, overall mean), the
// scene-grounded caption judge, and pairwise win rates.
#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "recap/bench/backbones.hpp"
#include "recap/scene/grammar.hpp"
#include "recap/scene/render.hpp"

namespace recap {

struct UnifiedScoreReport {
    std::array<double, kNumBackbones> per_backbone{};
    double overall = 0.0;

    double operator[](Backbone b) const { return per_backbone[static_cast<int>(b)]; }
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0;
    for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot;  // inputs are unit-norm
}

inline double backbone_score(const RasterImage& source, const RasterImage& recon, Backbone b) {
    if (source.values.size() != recon.values.size()) throw InputError("unified_score: image dimension mismatch");
    return 100.0 * cosine(embed(source, b), embed(recon, b));
}

inline UnifiedScoreReport unified_score(const RasterImage& source, const RasterImage& recon) {
    UnifiedScoreReport rep;
    double acc = 0.0;
    for (int b = 0; b < kNumBackbones; ++b) {
        rep.per_backbone[b] = backbone_score(source, recon, static_cast<Backbone>(b));
        acc += rep.per_backbone[b];
    }
    rep.overall = acc / kNumBackbones;
    return rep;
}

// The RL reward: unified score rescaled to [-1, 1] (divide by 100), either
// the full four-backbone overall or one cheaper backbone.
struct RewardSpec {
    bool use_overall = true;
    Backbone backbone = Backbone::CellHist;

    double operator()(const RasterImage& source, const RasterImage& recon) const {
        return (use_overall ? unified_score(source, recon).overall : backbone_score(source, recon, backbone)) / 100.0;
    }
    // the matching 0-100 eval metric
    double score(const RasterImage& source, const RasterImage& recon) const {
        return use_overall ? unified_score(source, recon).overall : backbone_score(source, recon, backbone);
    }
};

struct CaptionQualityReport {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    int skipped_clauses = 0;  // skipped spans reported by the parser
};

// Tuple-based judging: each object asserts 4 tuples (position, shape, color,
// size at its cell); precision/recall over correct tuples against the truth.
inline CaptionQualityReport judge_caption(const CaptionTokens& caption, const Scene& truth) {
    CaptionQualityReport rep;
    auto parsed = parse_caption(caption);
    rep.skipped_clauses = static_cast<int>(parsed.skipped.size());

    const int truth_tuples = 4 * static_cast<int>(truth.objects.size());
    const int asserted_tuples = 4 * static_cast<int>(parsed.scene.objects.size());
    int correct = 0;
    for (const auto& got : parsed.scene.objects) {
        for (const auto& want : truth.objects) {
            if (want.cell() != got.cell()) continue;
            correct += 1;  // position itself
            correct += (got.shape == want.shape);
            correct += (got.color == want.color);
            correct += (got.size == want.size);
            break;
        }
    }
    if (asserted_tuples > 0) rep.precision = static_cast<double>(correct) / asserted_tuples;
    if (truth_tuples > 0) rep.recall = static_cast<double>(correct) / truth_tuples;
    if (rep.precision + rep.recall > 0)
        rep.f1 = 2.0 * rep.precision * rep.recall / (rep.precision + rep.recall);
    return rep;
}

// Percentage of scenes where model A's F1 beats model B's; ties count half.
inline double pairwise_win_rate(const std::vector<double>& f1_a, const std::vector<double>& f1_b) {
    if (f1_a.size() != f1_b.size() || f1_a.empty()) throw InputError("pairwise_win_rate: mismatched eval sets");
    double wins = 0.0;
    for (size_t i = 0; i < f1_a.size(); ++i) {
        if (f1_a[i] > f1_b[i])
            wins += 1.0;
        else if (f1_a[i] == f1_b[i])
            wins += 0.5;
    }
    return 100.0 * wins / static_cast<double>(f1_a.size());
}

}  // namespace recap
