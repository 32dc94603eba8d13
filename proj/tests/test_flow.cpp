#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "recap/flow/rectified_flow.hpp"
#include "recap/model/velocity_net.hpp"

using namespace recap;

namespace {

double gauss_logpdf_oracle(const std::vector<float>& x, const std::vector<float>& mu, double var) {
    long double acc = 0.0L;
    for (size_t i = 0; i < x.size(); ++i) {
        const long double d = (long double)x[i] - (long double)mu[i];
        acc += -d * d / (2.0L * (long double)var);
    }
    acc += -0.5L * (long double)x.size() * (std::log(2.0L * 3.141592653589793238L) + std::log((long double)var));
    return (double)acc;
}

template <typename S>
void zero_params(ParameterStore<S>& store) {
    for (auto& [k, t] : store.entries()) std::fill(t->data.begin(), t->data.end(), S(0));
}

}  // namespace

TEST_CASE("rf_loss is exactly zero for a perfectly fitting constant field") {
    ParameterStore<double> store;
    DecoderConfig cfg;
    cfg.latent_dim = 1;
    cfg.cond_dim = 2;
    cfg.width = 4;
    SeededRng rng(1);
    VelocityNet<double> net(store, cfg, rng);
    store.lock();
    zero_params(store);
    store.at("vnet.out_b")->data[0] = 1.0;  // v == 1 everywhere

    // z0 = 0, z1 = 1: the constant unit velocity is an exact fit
    auto cond = ag::zeros<double>({2});
    auto loss = rf_loss_at<double>(net, {{1.0}}, {cond}, {{0.0}}, {0.37});
    CHECK(loss->data[0] == 0.0);
}

TEST_CASE("rf_loss with zero velocity estimates the latent dimension") {
    ParameterStore<float> store;
    DecoderConfig cfg;
    cfg.latent_dim = 8;
    cfg.cond_dim = 4;
    cfg.width = 8;
    cfg.hidden_layers = 2;
    SeededRng rng(2);
    VelocityNet<float> net(store, cfg, rng);
    store.lock();
    zero_params(store);  // v == 0

    // Monte-Carlo oracle: E || z1 - z0 ||^2 with z1 = 0 equals latent dim
    SeededRng draw(77);
    auto cond = ag::zeros<float>({4});
    double acc = 0.0;
    const int reps = 100, batch = 100;
    ag::NoGradGuard ng;
    for (int r = 0; r < reps; ++r) {
        std::vector<std::vector<float>> latents(batch, std::vector<float>(8, 0.0f));
        std::vector<TensorPtr<float>> conds(batch, cond);
        acc += static_cast<double>(rf_loss(net, latents, conds, draw)->data[0]);
    }
    CHECK(acc / reps == Catch::Approx(8.0).margin(0.2));
}

TEST_CASE("rf_loss gradients match finite differences") {
    ParameterStore<double> store;
    DecoderConfig cfg;
    cfg.latent_dim = 6;
    cfg.cond_dim = 4;
    cfg.width = 8;
    cfg.hidden_layers = 3;
    SeededRng rng(3);
    VelocityNet<double> net(store, cfg, rng);
    store.create_randn("cond.a", {4}, rng, 0.5);
    store.create_randn("cond.b", {4}, rng, 0.5);
    store.lock();

    auto loss_fn = [&net](ParameterStore<double>& p) {
        SeededRng draw(11);  // fixed seed: deterministic loss
        std::vector<std::vector<double>> latents = {{0.2, -0.4, 0.8, 0.1, -0.9, 0.5},
                                                    {-0.3, 0.6, -0.2, 0.7, 0.0, -0.5}};
        std::vector<TensorPtr<double>> conds = {p.at("cond.a"), p.at("cond.b")};
        return rf_loss(net, latents, conds, draw, 0.5);
    };
    CHECK(grad_check<double>(loss_fn, store, 1e-3) < 1e-4);
}

TEST_CASE("cfg_velocity identities") {
    ParameterStore<float> store;
    DecoderConfig cfg;
    cfg.latent_dim = 5;
    cfg.cond_dim = 3;
    cfg.width = 8;
    SeededRng rng(4);
    VelocityNet<float> net(store, cfg, rng);
    store.lock();

    std::vector<float> z = {0.1f, -0.2f, 0.3f, 0.4f, -0.5f};
    std::vector<float> c = {0.7f, -0.1f, 0.2f};
    auto vc = net.forward_plain(z, 0.3, c);
    auto vn = net.forward_plain(z, 0.3, store.at("c_null")->data);

    CHECK(cfg_velocity(net, z, 0.3, c, 1.0) == vc);  // w=1 -> exactly v_c
    CHECK(cfg_velocity(net, z, 0.3, c, 0.0) == vn);  // w=0 -> exactly v_null

    // v_c == v_null (same condition) -> output equals v_c for any w
    auto out = cfg_velocity(net, z, 0.3, store.at("c_null")->data, 5.0);
    CHECK(out == vn);

    CHECK_THROWS_AS(cfg_velocity(net, z, 0.3, c, -0.1), ConfigError);
}

TEST_CASE("score_from_velocity identities and oracle") {
    std::vector<double> x = {0.4, -1.2, 0.9};
    std::vector<double> v = {1.0, 0.5, -0.3};

    // t = 0 reduces to the pure Gaussian score -x
    auto s0 = score_from_velocity(x, 0.0, v);
    for (size_t i = 0; i < x.size(); ++i) CHECK(s0[i] == Catch::Approx(-x[i]).margin(1e-12));

    // single-datum oracle: with the exact velocity for dataset {mu}, the score
    // matches the analytic posterior score of N(t*mu, (1-t)^2 I)
    const double t = 0.6;
    std::vector<double> mu = {0.3, -0.8, 1.1};
    std::vector<double> v_exact(3), s_oracle(3);
    for (int i = 0; i < 3; ++i) {
        v_exact[i] = (mu[i] - x[i]) / (1.0 - t);
        s_oracle[i] = -(x[i] - t * mu[i]) / ((1.0 - t) * (1.0 - t));
    }
    auto s = score_from_velocity(x, t, v_exact);
    for (int i = 0; i < 3; ++i) CHECK(s[i] == Catch::Approx(s_oracle[i]).margin(1e-9));

    // linearity: s(x,t,v1+v2) - s(x,t,v1) = t*v2/(1-t)
    std::vector<double> v2 = {-0.2, 0.9, 0.1}, v12(3);
    for (int i = 0; i < 3; ++i) v12[i] = v[i] + v2[i];
    auto sa = score_from_velocity(x, t, v12);
    auto sb = score_from_velocity(x, t, v);
    for (int i = 0; i < 3; ++i) CHECK(sa[i] - sb[i] == Catch::Approx(t * v2[i] / (1.0 - t)).margin(1e-9));

    CHECK_THROWS_AS(score_from_velocity(x, 1.0 - 1e-5, v), DomainError);
}

TEST_CASE("euler integration is exact for a constant field") {
    ParameterStore<double> store;
    DecoderConfig cfg;
    cfg.latent_dim = 3;
    cfg.cond_dim = 2;
    cfg.width = 4;
    SeededRng rng(5);
    VelocityNet<double> net(store, cfg, rng);
    store.lock();
    zero_params(store);
    store.at("vnet.out_b")->data = {0.5, -0.25, 1.5};  // v == u everywhere

    SamplerConfig sc;
    sc.steps = 7;
    sc.cfg_scale = 1.0;
    sc.mode = SamplerMode::Sde;
    sc.noise_level = 0.0;
    auto traj = sde_sample(net, std::vector<double>{0.0, 0.0}, sc, SeededRng(99));
    const auto& x0 = traj.states.front();
    const auto& xK = traj.states.back();
    CHECK(xK[0] == Catch::Approx(x0[0] + 0.5).margin(1e-9));
    CHECK(xK[1] == Catch::Approx(x0[1] - 0.25).margin(1e-9));
    CHECK(xK[2] == Catch::Approx(x0[2] + 1.5).margin(1e-9));
}

TEST_CASE("ode sampling is deterministic and sde with a=0 collapses to it") {
    ParameterStore<float> store;
    DecoderConfig cfg;
    cfg.latent_dim = 12;
    cfg.cond_dim = 4;
    cfg.width = 16;
    SeededRng rng(6);
    VelocityNet<float> net(store, cfg, rng);
    store.lock();

    std::vector<float> cond = {0.3f, -0.2f, 0.5f, 0.1f};
    SamplerConfig ode_cfg;
    ode_cfg.steps = 9;
    ode_cfg.cfg_scale = 2.0;
    ode_cfg.mode = SamplerMode::Ode;

    std::vector<std::vector<float>> conds = {cond};
    std::vector<SeededRng> r1 = {SeededRng(42)}, r2 = {SeededRng(42)};
    auto t1 = recap::detail::sample_group_with_net(net, conds, ode_cfg, r1);
    auto t2 = recap::detail::sample_group_with_net(net, conds, ode_cfg, r2);
    for (size_t k = 0; k < t1[0].states.size(); ++k) CHECK(t1[0].states[k] == t2[0].states[k]);

    SamplerConfig sde_cfg = ode_cfg;
    sde_cfg.mode = SamplerMode::Sde;
    sde_cfg.noise_level = 0.0;
    auto t3 = sde_sample(net, cond, sde_cfg, SeededRng(42));
    REQUIRE(t3.states.size() == t1[0].states.size());
    for (size_t k = 0; k < t3.states.size(); ++k) CHECK(t3.states[k] == t1[0].states[k]);
    CHECK(t3.stochastic_steps() == 0);
    CHECK(t3.logps.empty());
}

TEST_CASE("sde records exact gaussian transition densities") {
    ParameterStore<float> store;
    DecoderConfig cfg;
    cfg.latent_dim = 10;
    cfg.cond_dim = 4;
    cfg.width = 16;
    SeededRng rng(7);
    VelocityNet<float> net(store, cfg, rng);
    store.lock();

    SamplerConfig sc;
    sc.steps = 12;
    sc.cfg_scale = 1.5;
    sc.mode = SamplerMode::Sde;
    sc.noise_level = 0.7;
    std::vector<float> cond = {0.1f, 0.2f, -0.3f, 0.4f};
    auto traj = sde_sample(net, cond, sc, SeededRng(31));

    REQUIRE(traj.variances.size() == 12);
    CHECK(traj.stochastic_steps() == 11);  // final step deterministic
    CHECK(traj.logps.size() == 11);        // steps - 1
    CHECK(traj.variances.back() == 0.0);
    int li = 0;
    for (int k = 0; k < 12; ++k) {
        if (traj.variances[k] > 0.0) {
            const double oracle = gauss_logpdf_oracle(traj.states[k + 1], traj.means[k], traj.variances[k]);
            CHECK(traj.logps[li++] == Catch::Approx(oracle).margin(1e-6));
        }
    }
    // determinism of the full stochastic chain
    auto traj2 = sde_sample(net, cond, sc, SeededRng(31));
    CHECK(traj2.states.back() == traj.states.back());
    CHECK(traj2.logps == traj.logps);
}

TEST_CASE("sde marginals match the affine-recursion oracle on a linear field") {
    // v(x) = alpha x + gamma; the Euler-Maruyama chain then has exactly
    // computable per-step mean/variance.
    const int d = 8, K = 20, trials = 1000;
    const double alpha = -0.8, gamma = 0.3, a = 0.7;
    SamplerConfig sc;
    sc.steps = K;
    sc.cfg_scale = 1.0;
    sc.mode = SamplerMode::Sde;
    sc.noise_level = a;

    auto vel = [&](const TensorPtr<double>& z, const std::vector<double>&) {
        return ag::add_const(ag::scale(z, alpha), gamma);
    };
    double sum = 0.0, sumsq = 0.0;
    int count = 0;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<std::vector<double>> conds = {{}};
        std::vector<SeededRng> rngs = {SeededRng(9000 + trial)};
        auto trajs = recap::detail::integrate_group<double>(d, vel, conds, sc, rngs);
        const auto& mid = trajs[0].states[K / 2];  // t = 0.5
        for (double v : mid) {
            sum += v;
            sumsq += v * v;
            ++count;
        }
    }
    const double mc_mean = sum / count;
    const double mc_var = sumsq / count - mc_mean * mc_mean;

    // independent oracle: propagate mean/var through the same affine recursion
    double m = 0.0, var = 1.0;
    const double dt = 1.0 / K;
    for (int k = 0; k < K / 2; ++k) {
        const double t = static_cast<double>(k) / K;
        const double sigma = (k == K - 1) ? 0.0 : a * (1.0 - t);
        const double half = 0.5 * sigma * sigma;
        const double A = alpha + half * (t * alpha - 1.0) / (1.0 - t);
        const double B = gamma + half * (t * gamma) / (1.0 - t);
        m = (1.0 + dt * A) * m + dt * B;
        var = (1.0 + dt * A) * (1.0 + dt * A) * var + sigma * sigma * dt;
    }
    CHECK(mc_mean == Catch::Approx(m).margin(std::abs(m) * 0.05 + 0.01));
    CHECK(mc_var == Catch::Approx(var).epsilon(0.05));
}

TEST_CASE("trajectory_logprob: identity ratio, length, and config checks") {
    ParameterStore<float> store;
    DecoderConfig cfg;
    cfg.latent_dim = 10;
    cfg.cond_dim = 4;
    cfg.width = 16;
    SeededRng rng(8);
    VelocityNet<float> net(store, cfg, rng);
    store.lock();

    SamplerConfig sc;
    sc.steps = 8;
    sc.cfg_scale = 1.5;
    sc.mode = SamplerMode::Sde;
    sc.noise_level = 0.5;
    std::vector<float> cond = {0.4f, -0.1f, 0.0f, 0.2f};
    auto traj = sde_sample(net, cond, sc, SeededRng(17));

    ag::NoGradGuard ng;
    auto lp_old = trajectory_logprob(net, traj, sc);
    auto lp_new = trajectory_logprob(net, traj, sc);
    REQUIRE(lp_old->numel() == sc.steps - 1);
    for (int64_t i = 0; i < lp_old->numel(); ++i)
        CHECK(std::exp(static_cast<double>(lp_new->data[i] - lp_old->data[i])) == Catch::Approx(1.0).margin(1e-5));

    // graph-path densities stay close to the sampler's own recorded densities
    for (int64_t i = 0; i < lp_old->numel(); ++i)
        CHECK(static_cast<double>(lp_old->data[i]) == Catch::Approx(traj.logps[i]).margin(1e-2));

    SamplerConfig other = sc;
    other.steps = 10;
    CHECK_THROWS_AS(trajectory_logprob(net, traj, other), InputError);
    other = sc;
    other.noise_level = 0.9;
    CHECK_THROWS_AS(trajectory_logprob(net, traj, other), InputError);
}

TEST_CASE("trajectory_logprob gradients match finite differences") {
    ParameterStore<double> store;
    DecoderConfig cfg;
    cfg.latent_dim = 6;
    cfg.cond_dim = 3;
    cfg.width = 8;
    cfg.hidden_layers = 2;
    SeededRng rng(9);
    VelocityNet<double> net(store, cfg, rng);
    store.lock();

    SamplerConfig sc;
    sc.steps = 5;
    sc.cfg_scale = 2.0;
    sc.mode = SamplerMode::Sde;
    sc.noise_level = 0.6;
    auto traj = sde_sample(net, std::vector<double>{0.2, -0.3, 0.5}, sc, SeededRng(23));

    auto loss_fn = [&](ParameterStore<double>&) { return ag::mean_all(trajectory_logprob(net, traj, sc)); };
    CHECK(grad_check<double>(loss_fn, store, 1e-3) < 1e-4);
}
