#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "recap/rl/grpo.hpp"

using namespace recap;

TEST_CASE("advantages: frozen example, zero-variance, and normalization property") {
    auto a = advantages({1.0, 2.0, 3.0}, 1e-8);
    // population std of {1,2,3} is sqrt(2/3); (3-2)/sqrt(2/3) = 1.2247
    CHECK(a[0] == Catch::Approx(-1.2247).margin(5e-5));
    CHECK(a[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(a[2] == Catch::Approx(1.2247).margin(5e-5));

    auto z = advantages({5.0, 5.0, 5.0, 5.0}, 1e-8);
    for (double v : z) CHECK(v == 0.0);

    SeededRng rng(42);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> rewards(2 + rng.uniform_int(14));
        for (auto& r : rewards) r = rng.normal() * 3.0 + 1.0;
        auto adv = advantages(rewards, 1e-8);
        double mean = 0.0, var = 0.0;
        for (double v : adv) mean += v;
        mean /= adv.size();
        for (double v : adv) var += (v - mean) * (v - mean);
        var /= adv.size();
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
    }

    CHECK_THROWS_AS(advantages({1.0}, 1e-8), InputError);
    CHECK_THROWS_AS(advantages({1.0, std::numeric_limits<double>::infinity()}, 1e-8), InputError);
}

TEST_CASE("clipped surrogate: frozen examples and clipping geometry") {
    CHECK(clipped_surrogate({1.0}, 1.0, 0.2)[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK(clipped_surrogate({2.0}, 1.0, 0.2)[0] == Catch::Approx(1.2).margin(1e-12));
    // negative advantage clips on the lower band: min(-0.5, -0.8) = -0.8
    CHECK(clipped_surrogate({0.5}, -1.0, 0.2)[0] == Catch::Approx(-0.8).margin(1e-12));
    CHECK_THROWS_AS(clipped_surrogate({0.0}, 1.0, 0.2), InputError);
    CHECK_THROWS_AS(clipped_surrogate({-0.5}, 1.0, 0.2), InputError);

    // finite-difference slope in r: 0 in clipped regimes, A inside the band
    const double eps = 0.2, h = 1e-6;
    auto slope = [&](double r, double adv) {
        const double up = clipped_surrogate({r + h}, adv, eps)[0];
        const double dn = clipped_surrogate({r - h}, adv, eps)[0];
        return (up - dn) / (2 * h);
    };
    CHECK(slope(1.5, 1.0) == Catch::Approx(0.0).margin(1e-6));    // A>0, r>1+eps
    CHECK(slope(0.5, -1.0) == Catch::Approx(0.0).margin(1e-6));   // A<0, r<1-eps
    CHECK(slope(1.0, 1.0) == Catch::Approx(1.0).margin(1e-6));    // in band
    CHECK(slope(0.9, -2.0) == Catch::Approx(-2.0).margin(1e-6));  // in band
}

TEST_CASE("kl penalty: identities, positivity, and the ln2 case") {
    CHECK(kl_penalty({-1.0, -2.0}, {-1.0, -2.0}) == 0.0);
    CHECK(kl_penalty({}, {}) == 0.0);

    // logp_ref - logp_policy = ln 2 per step -> 2 - ln2 - 1 = 1 - ln2
    const double ln2 = std::log(2.0);
    CHECK(kl_penalty({-2.0 - ln2}, {-2.0}) == Catch::Approx(1.0 - ln2).margin(1e-12));

    SeededRng rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> p(1 + rng.uniform_int(12)), q(p.size());
        for (size_t i = 0; i < p.size(); ++i) {
            p[i] = -rng.uniform() * 4.0;
            q[i] = -rng.uniform() * 4.0;
        }
        CHECK(kl_penalty(p, q) >= 0.0);
    }
    CHECK_THROWS_AS(kl_penalty({-1.0}, {-1.0, -2.0}), InputError);
}

TEST_CASE("graph surrogate and k3 agree with the plain formulas") {
    std::vector<double> ratios = {0.4, 0.9, 1.0, 1.15, 2.3};
    for (double adv : {1.3, -0.7}) {
        auto plain = clipped_surrogate(ratios, adv, 0.2);
        auto node = recap::detail::surrogate_node(ag::leaf<double>({5}, std::vector<double>(ratios)), adv, 0.2);
        for (int i = 0; i < 5; ++i) CHECK(node->data[i] == Catch::Approx(plain[i]).margin(1e-12));
    }

    std::vector<double> lp_new = {-1.0, -2.5, -0.3};
    std::vector<double> lp_ref = {-1.2, -2.0, -0.4};
    auto k3 = recap::detail::k3_node(ag::leaf<double>({3}, std::vector<double>(lp_new)), lp_ref);
    double mean = (k3->data[0] + k3->data[1] + k3->data[2]) / 3.0;
    CHECK(mean == Catch::Approx(kl_penalty(lp_new, lp_ref)).margin(1e-12));
}

namespace {

struct Stage2Fixture {
    ParameterStore<float> cap_store, dec_store;
    CaptionerConfig ccfg;
    DecoderConfig dcfg;
    std::unique_ptr<CaptionerModel<float>> captioner;
    std::unique_ptr<Projector<float>> projector;
    std::unique_ptr<VelocityNet<float>> decoder;
    IdentityCodec<float> codec;
    std::vector<DatasetRecord> train;

    Stage2Fixture() {
        ccfg.dim = 32;
        ccfg.layers = 1;
        ccfg.max_len = 16;
        dcfg.cond_dim = 24;
        dcfg.width = 32;
        dcfg.hidden_layers = 2;
        SeededRng rng(55);
        captioner = std::make_unique<CaptionerModel<float>>(cap_store, ccfg, rng);
        cap_store.lock();
        decoder = std::make_unique<VelocityNet<float>>(dec_store, dcfg, rng);
        projector = std::make_unique<Projector<float>>(dec_store, ccfg.dim, dcfg.cond_dim, rng);
        dec_store.lock();
        auto ds = build_dataset(6, 9, 2);
        train = ds.train;
    }
};

}  // namespace

TEST_CASE("stage-2 step: identity ratios at snapshot, frozen environment") {
    Stage2Fixture f;
    GrpoConfig cfg;
    cfg.group = 4;
    cfg.temperature = 1.0;
    SamplerConfig rs;
    rs.steps = 4;
    rs.cfg_scale = 1.0;
    rs.mode = SamplerMode::Ode;
    RewardSpec reward;
    AdamOptimizer<float> opt(1e-3, 0.9, 0.999, 1e-8, 1.0);

    const auto dec_before = f.dec_store.snapshot();
    Stage2Trainer<float> trainer(*f.captioner, opt, *f.decoder, f.codec, *f.projector, f.train, reward, cfg, rs, 77);

    auto m0 = trainer.step(0);
    CHECK_FALSE(m0.aborted);
    // on-policy first step: every ratio is exactly 1, so no token is clipped
    // and the surrogate collapses to the zero group-mean advantage
    CHECK(m0.clip_fraction == 0.0);
    CHECK(std::abs(m0.objective) < 1e-5);
    CHECK(std::isfinite(m0.kl));
    CHECK(m0.mean_caption_len > 0.0);

    for (int s = 1; s < 3; ++s) {
        auto m = trainer.step(s);
        CHECK_FALSE(m.aborted);
        CHECK(std::isfinite(m.mean_reward));
    }

    // frozen reward environment: decoder and projector blobs bit-identical
    auto dec_after = f.dec_store.snapshot();
    for (const auto& [k, v] : dec_before) CHECK(dec_after.at(k) == v);

    // frozen visual encoder: zero grad
    auto pw = f.cap_store.at("patch.w");
    if (!pw->grad.empty())
        for (float g : pw->grad) CHECK(g == 0.0f);
}

TEST_CASE("stage-3 step: config validation, identity ratios, frozen projector") {
    ParameterStore<float> store;
    DecoderConfig dcfg;
    dcfg.cond_dim = 8;
    dcfg.width = 24;
    dcfg.hidden_layers = 2;
    SeededRng rng(66);
    VelocityNet<float> net(store, dcfg, rng);
    Projector<float> proj(store, 16, 8, rng);
    store.lock();
    IdentityCodec<float> codec;

    SeededRng srng(4);
    auto scene = sample_scene(srng, 2);
    auto img = render(scene);
    std::vector<const RasterImage*> sources = {&img};
    std::vector<std::vector<float>> conds = {std::vector<float>(8, 0.1f)};
    RewardSpec reward;
    GrpoConfig cfg;
    cfg.group = 4;
    cfg.kl_beta = 0.01;
    AdamOptimizer<float> opt(1e-4, 0.9, 0.999, 1e-8, 1.0);

    SamplerConfig bad;
    bad.mode = SamplerMode::Sde;
    bad.noise_level = 0.0;
    bad.steps = 6;
    CHECK_THROWS_AS(Stage3Trainer<float>(net, opt, codec, sources, conds, reward, cfg, bad, 3), ConfigError);

    SamplerConfig rollout;
    rollout.mode = SamplerMode::Sde;
    rollout.noise_level = 0.7;
    rollout.steps = 6;
    rollout.cfg_scale = 1.5;
    const auto proj_w_before = store.at("proj.w1")->data;
    Stage3Trainer<float> trainer(net, opt, codec, sources, conds, reward, cfg, rollout, 3);

    auto m0 = trainer.step(0);
    CHECK_FALSE(m0.aborted);
    CHECK(m0.clip_fraction == 0.0);  // identity ratios right after the snapshot
    CHECK(std::isfinite(m0.kl));
    CHECK(m0.kl >= 0.0);

    bool moved = false;
    for (int s = 1; s < 3; ++s) {
        auto m = trainer.step(s);
        CHECK_FALSE(m.aborted);
    }
    // projector frozen, net trainable
    CHECK(store.at("proj.w1")->data == proj_w_before);
    for (float g : store.at("vnet.out_b")->grad)
        if (g != 0.0f) moved = true;
    CHECK(moved);
}
