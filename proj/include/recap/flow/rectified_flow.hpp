// Rectified-flow training and sampling: the velocity regression loss, CFG
// mixing, the marginal-score identity, Euler ODE sampling, SDE sampling with
// recorded per-step Gaussian transitions, and the per-step log-density
// recomputation that powers the decoder-as-policy likelihood ratios.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "recap/core/checkpoint.hpp"
#include "recap/core/gaussian.hpp"
#include "recap/core/params.hpp"
#include "recap/core/rng.hpp"
#include "recap/core/tensor.hpp"
#include "recap/model/velocity_net.hpp"

namespace recap {

enum class SamplerMode { Ode, Sde };

struct SamplerConfig {
    int steps = 40;
    double cfg_scale = 5.0;
    SamplerMode mode = SamplerMode::Ode;
    double noise_level = 0.0;  // a in sigma_t = a * (1 - t); 0 collapses SDE to ODE

    void validate() const {
        if (steps < 1) throw ConfigError("sampler steps must be >= 1");
        if (cfg_scale < 0.0) throw ConfigError("cfg scale must be >= 0");
        if (noise_level < 0.0) throw ConfigError("noise level must be >= 0");
    }
};

// Reverse-time chain with the Gaussian transition parameters recorded at
// sampling time. Time runs 0 (noise) -> 1 (data); K = steps transitions over
// K+1 states. The final step is always deterministic (sigma forced to 0).
template <typename S>
struct DenoiseTrajectory {
    SamplerConfig config;
    std::vector<S> condition;
    std::vector<double> times;           // K+1 grid points
    std::vector<std::vector<S>> states;  // K+1 states
    std::vector<std::vector<S>> means;   // K per-step means mu_k
    std::vector<double> variances;       // K per-step sigma_k^2 * dt (0 = deterministic)
    std::vector<double> logps;           // own-transition log densities, stochastic steps only

    int stochastic_steps() const {
        int n = 0;
        for (double v : variances) n += (v > 0.0);
        return n;
    }
};

// v_null + w * (v_cond - v_null), batched over rows. w = 1 and w = 0 short-
// circuit to the exact single-branch forward.
template <typename S>
TensorPtr<S> cfg_velocity_rows(const VelocityNet<S>& net, const TensorPtr<S>& z, const std::vector<double>& times,
                               const TensorPtr<S>& cond_rows, double cfg_scale) {
    if (cfg_scale < 0.0) throw ConfigError("cfg scale must be >= 0");
    if (cfg_scale == 1.0) return net.forward(z, times, cond_rows);
    const int b = z->rows();
    auto null_rows = ag::broadcast_rows(net.null_condition(), b);
    if (cfg_scale == 0.0) return net.forward(z, times, null_rows);
    auto z2 = ag::concat_rows<S>({z, z});
    std::vector<double> t2(times);
    t2.insert(t2.end(), times.begin(), times.end());
    auto c2 = ag::concat_rows<S>({cond_rows, null_rows});
    auto v2 = net.forward(z2, t2, c2);
    auto vc = ag::slice_rows(v2, 0, b);
    auto vn = ag::slice_rows(v2, b, 2 * b);
    return ag::add(vn, ag::scale(ag::sub(vc, vn), static_cast<S>(cfg_scale)));
}

template <typename S>
std::vector<S> cfg_velocity(const VelocityNet<S>& net, const std::vector<S>& z, double t, const std::vector<S>& cond,
                            double cfg_scale) {
    ag::NoGradGuard ng;
    auto zl = ag::leaf<S>({1, static_cast<int>(z.size())}, std::vector<S>(z));
    auto cl = ag::leaf<S>({1, static_cast<int>(cond.size())}, std::vector<S>(cond));
    return cfg_velocity_rows(net, zl, {t}, cl, cfg_scale)->data;
}

// Marginal score implied by the RF path with a Gaussian source:
// s(x, t) = (t * v - x) / (1 - t).
template <typename S>
std::vector<S> score_from_velocity(const std::vector<S>& x, double t, const std::vector<S>& v) {
    if (t >= 1.0 - 1e-4) throw DomainError("score_from_velocity: t too close to 1");
    if (x.size() != v.size()) throw DimensionError("score_from_velocity: size mismatch");
    std::vector<S> s(x.size());
    const double inv = 1.0 / (1.0 - t);
    for (size_t i = 0; i < x.size(); ++i)
        s[i] = static_cast<S>((t * static_cast<double>(v[i]) - static_cast<double>(x[i])) * inv);
    return s;
}

// Velocity regression at explicit (z0, t) draws: mean over the batch of the
// squared L2 error between v(z_t, t, c) and (z_1 - z_0). Conditions are graph
// nodes so stage-1 gradients reach the projector.
template <typename S>
TensorPtr<S> rf_loss_at(const VelocityNet<S>& net, const std::vector<std::vector<S>>& latents,
                        const std::vector<TensorPtr<S>>& conditions, const std::vector<std::vector<S>>& z0s,
                        const std::vector<double>& times) {
    const int b = static_cast<int>(latents.size());
    if (b == 0) throw InputError("rf_loss: empty batch");
    if (conditions.size() != latents.size() || z0s.size() != latents.size() || times.size() != latents.size())
        throw DimensionError("rf_loss: batch size mismatch");
    const int d = net.config().latent_dim;
    std::vector<S> zt(static_cast<size_t>(b) * d);
    std::vector<S> target(static_cast<size_t>(b) * d);
    std::vector<TensorPtr<S>> cond_parts;
    for (int i = 0; i < b; ++i) {
        if (static_cast<int>(latents[i].size()) != d || static_cast<int>(z0s[i].size()) != d)
            throw DimensionError("rf_loss: latent width mismatch");
        if (conditions[i]->numel() != net.config().cond_dim) throw DimensionError("rf_loss: condition width mismatch");
        const double t = times[i];
        for (int j = 0; j < d; ++j) {
            const double z0 = static_cast<double>(z0s[i][j]);
            const double z1 = static_cast<double>(latents[i][j]);
            target[static_cast<size_t>(i) * d + j] = static_cast<S>(z1 - z0);
            zt[static_cast<size_t>(i) * d + j] = static_cast<S>((1.0 - t) * z0 + t * z1);
        }
        cond_parts.push_back(ag::reshape(conditions[i], {1, net.config().cond_dim}));
    }
    auto z_leaf = ag::leaf<S>({b, d}, std::move(zt));
    auto tgt_leaf = ag::leaf<S>({b, d}, std::move(target));
    auto cond_rows = ag::concat_rows(cond_parts);
    auto v = net.forward(z_leaf, times, cond_rows);
    auto diff = ag::sub(v, tgt_leaf);
    return ag::scale(ag::sum_all(ag::square(diff)), static_cast<S>(1.0 / b));
}

// Training form: z0 ~ N(0,I), t ~ U[0,1] per sample, and conditions dropped
// to the learned null with probability p_drop (CFG training).
template <typename S>
TensorPtr<S> rf_loss(const VelocityNet<S>& net, const std::vector<std::vector<S>>& latents,
                     const std::vector<TensorPtr<S>>& conditions, SeededRng& rng, double p_drop = 0.0) {
    const int b = static_cast<int>(latents.size());
    if (b == 0) throw InputError("rf_loss: empty batch");
    if (conditions.size() != latents.size()) throw DimensionError("rf_loss: batch size mismatch");
    const int d = net.config().latent_dim;
    std::vector<std::vector<S>> z0s(b, std::vector<S>(d));
    std::vector<double> times(b);
    std::vector<TensorPtr<S>> conds = conditions;
    for (int i = 0; i < b; ++i) {
        // per-sample draw order: z0 normals, then t, then the drop coin
        for (int j = 0; j < d; ++j) z0s[i][j] = static_cast<S>(rng.normal());
        times[i] = rng.uniform();
        if (rng.uniform() < p_drop) conds[i] = net.null_condition();
    }
    return rf_loss_at(net, latents, conds, z0s, times);
}

namespace detail {

// Shared Euler/Euler-Maruyama integrator over the uniform grid. Each group
// member owns a pre-split rng stream; velocity evaluations are batched across
// the group through `vel(z_rows, times) -> v_rows`. sigma_k = a*(1-t_k),
// forced to 0 on the final step (and everywhere in ODE mode).
template <typename S, typename VelFn>
std::vector<DenoiseTrajectory<S>> integrate_group(int latent_dim, VelFn&& vel,
                                                  const std::vector<std::vector<S>>& conds,
                                                  const SamplerConfig& cfg, std::vector<SeededRng>& rngs) {
    cfg.validate();
    const int g = static_cast<int>(conds.size());
    if (static_cast<int>(rngs.size()) != g) throw DimensionError("integrate_group: one rng per member required");
    const int d = latent_dim;
    const int K = cfg.steps;
    const double dt = 1.0 / K;
    const double a = (cfg.mode == SamplerMode::Sde) ? cfg.noise_level : 0.0;

    std::vector<DenoiseTrajectory<S>> trajs(g);
    std::vector<std::vector<S>> x(g);
    for (int i = 0; i < g; ++i) {
        trajs[i].config = cfg;
        trajs[i].condition = conds[i];
        trajs[i].times.push_back(0.0);
        x[i].resize(d);
        for (int j = 0; j < d; ++j) x[i][j] = static_cast<S>(rngs[i].normal());
        trajs[i].states.push_back(x[i]);
    }

    ag::NoGradGuard ng;
    for (int k = 0; k < K; ++k) {
        const double t = static_cast<double>(k) / K;
        const double sigma = (k == K - 1) ? 0.0 : a * (1.0 - t);
        std::vector<S> zdata(static_cast<size_t>(g) * d);
        for (int i = 0; i < g; ++i) std::copy(x[i].begin(), x[i].end(), zdata.begin() + static_cast<size_t>(i) * d);
        auto z = ag::leaf<S>({g, d}, std::move(zdata));
        auto v = vel(z, std::vector<double>(g, t));
        if (v->rows() != g || v->cols() != d) throw DimensionError("integrate_group: velocity shape mismatch");
        for (int i = 0; i < g; ++i) {
            const S* vrow = v->data.data() + static_cast<size_t>(i) * d;
            std::vector<S> mu(d);
            if (sigma > 0.0) {
                const double half_s2 = 0.5 * sigma * sigma;
                const double inv1mt = 1.0 / (1.0 - t);
                for (int j = 0; j < d; ++j) {
                    const double vj = static_cast<double>(vrow[j]);
                    const double sj = (t * vj - static_cast<double>(x[i][j])) * inv1mt;
                    mu[j] = static_cast<S>(static_cast<double>(x[i][j]) + dt * (vj + half_s2 * sj));
                }
            } else {
                for (int j = 0; j < d; ++j)
                    mu[j] = static_cast<S>(static_cast<double>(x[i][j]) + dt * static_cast<double>(vrow[j]));
            }
            const double var = sigma * sigma * dt;
            if (sigma > 0.0) {
                const double sd = sigma * std::sqrt(dt);
                for (int j = 0; j < d; ++j)
                    x[i][j] = static_cast<S>(static_cast<double>(mu[j]) + sd * rngs[i].normal());
                trajs[i].logps.push_back(gaussian_log_density(x[i], mu, var));
            } else {
                x[i] = mu;
            }
            for (S vj : x[i])
                if (!std::isfinite(static_cast<double>(vj))) throw NumericError("sampler produced non-finite state");
            trajs[i].means.push_back(std::move(mu));
            trajs[i].variances.push_back(var);
            trajs[i].times.push_back(static_cast<double>(k + 1) / K);
            trajs[i].states.push_back(x[i]);
        }
    }
    return trajs;
}

// Velocity functor binding a net, the group's conditions, and a CFG scale.
template <typename S>
auto net_velocity_fn(const VelocityNet<S>& net, const std::vector<std::vector<S>>& conds) {
    std::vector<S> cdata;
    for (const auto& c : conds) {
        if (static_cast<int>(c.size()) != net.config().cond_dim)
            throw DimensionError("sampler: condition width mismatch");
        cdata.insert(cdata.end(), c.begin(), c.end());
    }
    const int g = static_cast<int>(conds.size());
    const int cd = net.config().cond_dim;
    return [&net, cdata, g, cd](const TensorPtr<S>& z, const std::vector<double>& times, double cfg_scale) {
        auto c = ag::leaf<S>({g, cd}, std::vector<S>(cdata));
        return cfg_velocity_rows(net, z, times, c, cfg_scale);
    };
}

template <typename S>
std::vector<DenoiseTrajectory<S>> sample_group_with_net(const VelocityNet<S>& net,
                                                        const std::vector<std::vector<S>>& conds,
                                                        const SamplerConfig& cfg, std::vector<SeededRng>& rngs) {
    auto bound = net_velocity_fn(net, conds);
    auto vel = [&bound, &cfg](const TensorPtr<S>& z, const std::vector<double>& times) {
        return bound(z, times, cfg.cfg_scale);
    };
    return integrate_group<S>(net.config().latent_dim, vel, conds, cfg, rngs);
}

}  // namespace detail

// Deterministic probability-flow sampling; decodes and clamps the final state.
template <typename S>
RasterImage ode_sample(const VelocityNet<S>& net, const LatentCodec<S>& codec, const std::vector<S>& cond,
                       const SamplerConfig& cfg, SeededRng rng) {
    if (cfg.mode != SamplerMode::Ode) throw ConfigError("ode_sample: config mode must be ode");
    std::vector<std::vector<S>> conds = {cond};
    std::vector<SeededRng> rngs = {rng};
    auto trajs = detail::sample_group_with_net(net, conds, cfg, rngs);
    return codec.decode(trajs[0].states.back());
}

// Batched variant used by evaluation sweeps: one deterministic sample per
// condition, all advanced in lockstep.
template <typename S>
std::vector<RasterImage> ode_sample_batch(const VelocityNet<S>& net, const LatentCodec<S>& codec,
                                          const std::vector<std::vector<S>>& conds, const SamplerConfig& cfg,
                                          const std::vector<SeededRng>& member_rngs) {
    if (cfg.mode != SamplerMode::Ode) throw ConfigError("ode_sample_batch: config mode must be ode");
    std::vector<SeededRng> rngs = member_rngs;
    auto trajs = detail::sample_group_with_net(net, conds, cfg, rngs);
    std::vector<RasterImage> out;
    out.reserve(trajs.size());
    for (auto& t : trajs) out.push_back(codec.decode(t.states.back()));
    return out;
}

template <typename S>
DenoiseTrajectory<S> sde_sample(const VelocityNet<S>& net, const std::vector<S>& cond, const SamplerConfig& cfg,
                                SeededRng rng) {
    if (cfg.mode != SamplerMode::Sde) throw ConfigError("sde_sample: config mode must be sde");
    std::vector<std::vector<S>> conds = {cond};
    std::vector<SeededRng> rngs = {rng};
    return std::move(detail::sample_group_with_net(net, conds, cfg, rngs)[0]);
}

template <typename S>
std::vector<DenoiseTrajectory<S>> sde_sample_group(const VelocityNet<S>& net, const std::vector<S>& cond, int group,
                                                   const SamplerConfig& cfg, const SeededRng& base_rng) {
    if (cfg.mode != SamplerMode::Sde) throw ConfigError("sde_sample_group: config mode must be sde");
    std::vector<std::vector<S>> conds(group, cond);
    std::vector<SeededRng> rngs;
    for (int i = 0; i < group; ++i) rngs.push_back(base_rng.split(static_cast<uint64_t>(i) + 1));
    return detail::sample_group_with_net(net, conds, cfg, rngs);
}

// Recomputes the per-step transition log densities of a recorded trajectory
// under the net's *current* parameters, as a graph node (one entry per
// stochastic step, the deterministic final step excluded).
template <typename S>
TensorPtr<S> trajectory_logprob(const VelocityNet<S>& net, const DenoiseTrajectory<S>& traj,
                                const SamplerConfig& expected) {
    if (traj.config.steps != expected.steps || traj.config.cfg_scale != expected.cfg_scale ||
        traj.config.noise_level != expected.noise_level || traj.config.mode != expected.mode)
        throw InputError("trajectory_logprob: sampler config mismatch with trajectory");
    const int d = net.config().latent_dim;
    const int K = traj.config.steps;
    const double dt = 1.0 / K;
    std::vector<int> steps;
    for (int k = 0; k < K; ++k)
        if (traj.variances[k] > 0.0) steps.push_back(k);
    if (steps.empty()) throw InputError("trajectory_logprob: trajectory has no stochastic steps");
    const int b = static_cast<int>(steps.size());

    std::vector<S> zdata(static_cast<size_t>(b) * d);
    std::vector<double> times(b);
    std::vector<S> alpha(b);               // v coefficient inside mu
    std::vector<S> xconst(static_cast<size_t>(b) * d);  // x_k carry term inside mu
    for (int r = 0; r < b; ++r) {
        const int k = steps[r];
        const double t = traj.times[k];
        const double sigma2 = traj.variances[k] / dt;
        const double half_s2 = 0.5 * sigma2;
        const double inv1mt = 1.0 / (1.0 - t);
        times[r] = t;
        // mu = x*(1 - dt*half_s2/(1-t)) + v*dt*(1 + half_s2*t/(1-t))
        alpha[r] = static_cast<S>(dt * (1.0 + half_s2 * t * inv1mt));
        const double beta = 1.0 - dt * half_s2 * inv1mt;
        for (int j = 0; j < d; ++j) {
            zdata[static_cast<size_t>(r) * d + j] = traj.states[k][j];
            xconst[static_cast<size_t>(r) * d + j] = static_cast<S>(beta * static_cast<double>(traj.states[k][j]));
        }
    }
    auto z = ag::leaf<S>({b, d}, std::move(zdata));
    auto cdata = std::vector<S>();
    cdata.reserve(static_cast<size_t>(b) * net.config().cond_dim);
    for (int r = 0; r < b; ++r) cdata.insert(cdata.end(), traj.condition.begin(), traj.condition.end());
    auto c = ag::leaf<S>({b, net.config().cond_dim}, std::move(cdata));
    auto v = cfg_velocity_rows(net, z, times, c, traj.config.cfg_scale);
    auto mu = ag::add(ag::scale_rows(v, alpha), ag::leaf<S>({b, d}, std::move(xconst)));

    std::vector<S> xnext(static_cast<size_t>(b) * d);
    for (int r = 0; r < b; ++r)
        for (int j = 0; j < d; ++j) xnext[static_cast<size_t>(r) * d + j] = traj.states[steps[r] + 1][j];
    auto diff = ag::sub(ag::leaf<S>({b, d}, std::move(xnext)), mu);
    auto sq = ag::row_sums(ag::square(diff));  // [b]
    std::vector<S> inv2var(b), consts(b);
    for (int r = 0; r < b; ++r) {
        const double var = traj.variances[steps[r]];
        inv2var[r] = static_cast<S>(-0.5 / var);
        consts[r] = static_cast<S>(-0.5 * d * (kLog2Pi + std::log(var)));
    }
    auto quad = ag::mul(sq, ag::leaf<S>({b}, std::move(inv2var)));
    return ag::add(quad, ag::leaf<S>({b}, std::move(consts)));
}

// Debug export of a trajectory in the shared manifest+blob format.
template <typename S>
void save_trajectory(const std::string& path, const DenoiseTrajectory<S>& traj) {
    NamedBlobs blobs;
    auto put = [&blobs](const std::string& key, const std::vector<double>& v) {
        std::vector<float> f(v.begin(), v.end());
        blobs[key] = {{static_cast<int>(f.size())}, std::move(f)};
    };
    put("times", traj.times);
    put("variances", traj.variances);
    put("logps", traj.logps);
    blobs["condition"] = {{static_cast<int>(traj.condition.size())},
                          std::vector<float>(traj.condition.begin(), traj.condition.end())};
    char key[32];
    for (size_t k = 0; k < traj.states.size(); ++k) {
        std::snprintf(key, sizeof(key), "state.%04zu", k);
        blobs[key] = {{static_cast<int>(traj.states[k].size())},
                      std::vector<float>(traj.states[k].begin(), traj.states[k].end())};
    }
    for (size_t k = 0; k < traj.means.size(); ++k) {
        std::snprintf(key, sizeof(key), "mean.%04zu", k);
        blobs[key] = {{static_cast<int>(traj.means[k].size())},
                      std::vector<float>(traj.means[k].begin(), traj.means[k].end())};
    }
    save_checkpoint(path, "trajectory", static_cast<int64_t>(traj.config.steps), 0, blobs);
}

}  // namespace recap
