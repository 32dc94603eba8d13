#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "recap/core/checkpoint.hpp"
#include "recap/core/gaussian.hpp"
#include "recap/core/params.hpp"
#include "recap/core/rng.hpp"
#include "recap/core/tensor.hpp"

using namespace recap;

namespace {

// Independent density oracle: per-dimension terms, long double accumulation.
double gaussian_logpdf_oracle(const std::vector<double>& x, const std::vector<double>& mu, double var) {
    long double acc = 0.0L;
    const long double sigma = std::sqrt((long double)var);
    for (size_t i = 0; i < x.size(); ++i) {
        const long double z = ((long double)x[i] - (long double)mu[i]) / sigma;
        acc += -0.5L * z * z - std::log(sigma) - 0.5L * std::log(2.0L * 3.14159265358979323846264338L);
    }
    return (double)acc;
}

}  // namespace

TEST_CASE("matmul matches hand oracles") {
    auto eye = ag::leaf<float>({2, 2}, {1, 0, 0, 1});
    auto c = ag::matmul(eye, eye);
    CHECK(c->data == std::vector<float>{1, 0, 0, 1});

    auto a = ag::leaf<float>({2, 2}, {1, 2, 3, 4});
    auto z = ag::leaf<float>({2, 1}, {0, 0});
    CHECK(ag::matmul(a, z)->data == std::vector<float>{0, 0});

    auto b = ag::leaf<float>({2, 1}, {5, 6});
    auto ab = ag::matmul(a, b);
    // 1*5+2*6 = 17, 3*5+4*6 = 39
    CHECK(ab->data == std::vector<float>{17, 39});

    auto bad = ag::leaf<float>({3, 1}, {1, 2, 3});
    CHECK_THROWS_AS(ag::matmul(a, bad), DimensionError);
}

TEST_CASE("matmul backward accumulates into both inputs") {
    ParameterStore<double> ps;
    SeededRng rng(11);
    ps.create_randn("a", {3, 4}, rng, 0.5);
    ps.create_randn("b", {4, 2}, rng, 0.5);
    ps.lock();
    auto loss_fn = [](ParameterStore<double>& p) {
        return ag::sum_all(ag::square(ag::matmul(p.at("a"), p.at("b"))));
    };
    CHECK(grad_check<double>(loss_fn, ps, 1e-3) < 1e-6);
}

TEST_CASE("softmax identities") {
    auto s = softmax<float>({0, 0, 0}, 1.0f);
    for (float v : s) CHECK(v == Catch::Approx(1.0f / 3.0f).margin(1e-7));

    auto t = softmax<float>({10, 0}, 1e-3f);
    CHECK(t[0] == Catch::Approx(1.0f).margin(1e-6));
    CHECK(t[1] == Catch::Approx(0.0f).margin(1e-6));

    auto u = softmax<double>({1, 2}, 1.0);
    CHECK(u[0] == Catch::Approx(0.26894142137).margin(1e-5));
    CHECK(u[1] == Catch::Approx(0.73105857863).margin(1e-5));

    CHECK_THROWS_AS(softmax<float>({1.0f, std::numeric_limits<float>::infinity()}, 1.0f), NumericError);
    CHECK_THROWS_AS(softmax<float>({1.0f, 2.0f}, 0.0f), DomainError);
}

TEST_CASE("softmax outputs a probability vector for random logits") {
    SeededRng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> logits(1 + rng.uniform_int(30));
        for (auto& v : logits) v = static_cast<float>(rng.normal() * 5.0);
        auto p = softmax(logits, 0.25f + static_cast<float>(rng.uniform()) * 4.0f);
        double sum = 0.0;
        for (float v : p) {
            CHECK(v >= 0.0f);
            sum += v;
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("gaussian_log_density closed forms") {
    // x == mean, d=1, var=1 -> -0.5 log(2 pi)
    CHECK(gaussian_log_density<float>({0.5f}, {0.5f}, 1.0) == Catch::Approx(-0.9189385332).margin(1e-9));
    // |x - mean| = 1, var=1 -> -0.5 - 0.5 log(2 pi)
    CHECK(gaussian_log_density<float>({1.0f}, {0.0f}, 1.0) == Catch::Approx(-0.5 - 0.9189385332).margin(1e-9));
    // additivity over dimensions at x == mean
    const double d1 = gaussian_log_density<float>({0.f}, {0.f}, 2.5);
    const double d2 = gaussian_log_density<float>({0.f, 0.f}, {0.f, 0.f}, 2.5);
    CHECK(d2 == Catch::Approx(2.0 * d1).margin(1e-12));

    CHECK_THROWS_AS(gaussian_log_density<float>({1.f}, {0.f}, 0.0), DomainError);
    CHECK_THROWS_AS(gaussian_log_density<float>({1.f}, {0.f}, -1.0), DomainError);
}

TEST_CASE("gaussian_log_density agrees with independent oracle") {
    SeededRng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const size_t d = 1 + rng.uniform_int(16);
        std::vector<double> x(d), mu(d);
        for (auto& v : x) v = rng.normal() * 3.0;
        for (auto& v : mu) v = rng.normal() * 3.0;
        const double var = 0.05 + rng.uniform() * 4.0;
        CHECK(gaussian_log_density(x, mu, var) == Catch::Approx(gaussian_logpdf_oracle(x, mu, var)).margin(1e-6));
    }
}

TEST_CASE("seeded rng determinism and splitting") {
    SeededRng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    SeededRng r1(9), r2(9);
    auto g1 = sample_gaussian<float>(r1, {4, 4});
    auto g2 = sample_gaussian<float>(r2, {4, 4});
    CHECK(g1->data == g2->data);

    // moment oracle on 1e5 samples
    SeededRng r3(123);
    double sum = 0.0, sumsq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double v = r3.normal();
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.05);

    // split-stream correlation oracle
    SeededRng parent(2024);
    SeededRng c1 = parent.split(1), c2 = parent.split(2);
    double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
    const int m = 100000;
    for (int i = 0; i < m; ++i) {
        const double x = c1.normal(), y = c2.normal();
        sx += x;
        sy += y;
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
    }
    const double cov = sxy / m - (sx / m) * (sy / m);
    const double corr = cov / std::sqrt((sxx / m - sx / m * (sx / m)) * (syy / m - sy / m * (sy / m)));
    CHECK(std::abs(corr) < 0.02);
}

TEST_CASE("sample_gaussian same seed twice is identical") {
    SeededRng r1(7), r2(7);
    auto a = sample_gaussian<double>(r1, {32});
    auto b = sample_gaussian<double>(r2, {32});
    CHECK(a->data == b->data);
}

TEST_CASE("grad_check quadratic and constant cases") {
    ParameterStore<double> ps;
    SeededRng rng(3);
    ps.create_randn("w", {8}, rng, 1.0);
    ps.create_randn("unused", {4}, rng, 1.0);
    ps.lock();

    auto loss_fn = [](ParameterStore<double>& p) {
        return ag::scale(ag::sum_all(ag::square(p.at("w"))), 0.5);
    };
    CHECK(grad_check<double>(loss_fn, ps, 1e-3) < 1e-6);

    // analytic gradient is w itself
    ps.zero_grad();
    auto loss = loss_fn(ps);
    ag::backward(loss);
    auto w = ps.at("w");
    for (int i = 0; i < 8; ++i) CHECK(w->grad[i] == Catch::Approx(w->data[i]).margin(1e-12));
    // loss constant in "unused" -> zero grad
    auto u = ps.at("unused");
    if (!u->grad.empty())
        for (double g : u->grad) CHECK(g == 0.0);
}

TEST_CASE("grad_check rejects non-deterministic loss") {
    ParameterStore<double> ps;
    SeededRng rng(3);
    ps.create_randn("w", {2}, rng, 1.0);
    ps.lock();
    int calls = 0;
    auto loss_fn = [&calls](ParameterStore<double>& p) {
        ++calls;
        return ag::scale(ag::sum_all(ag::square(p.at("w"))), 0.5 + 0.001 * calls);
    };
    CHECK_THROWS_AS(grad_check<double>(loss_fn, ps, 1e-3), ConfigError);
}

TEST_CASE("every differentiable op passes finite-difference checks") {
    ParameterStore<double> ps;
    SeededRng rng(17);
    ps.create_randn("a", {4, 6}, rng, 0.6);
    ps.create_randn("b", {4, 6}, rng, 0.6);
    ps.create_randn("v", {6}, rng, 0.6);
    ps.create_randn("emb", {10, 6}, rng, 0.6);
    ps.create_randn("gain", {6}, rng, 0.2);
    ps.create_randn("bias", {6}, rng, 0.2);
    ps.lock();

    using Fn = std::function<TensorPtr<double>(ParameterStore<double>&)>;
    std::vector<std::pair<const char*, Fn>> cases = {
        {"add", [](auto& p) { return ag::sum_all(ag::square(ag::add(p.at("a"), p.at("b")))); }},
        {"sub", [](auto& p) { return ag::sum_all(ag::square(ag::sub(p.at("a"), p.at("b")))); }},
        {"mul", [](auto& p) { return ag::sum_all(ag::square(ag::mul(p.at("a"), p.at("b")))); }},
        {"add_rowvec", [](auto& p) { return ag::sum_all(ag::square(ag::add_rowvec(p.at("a"), p.at("v")))); }},
        {"scale", [](auto& p) { return ag::sum_all(ag::scale(ag::square(p.at("a")), 1.7)); }},
        {"silu", [](auto& p) { return ag::sum_all(ag::square(ag::silu(p.at("a")))); }},
        {"exp", [](auto& p) { return ag::sum_all(ag::exp(ag::scale(p.at("a"), 0.3))); }},
        {"transpose", [](auto& p) { return ag::sum_all(ag::square(ag::matmul(p.at("a"), ag::transpose(p.at("b"))))); }},
        {"mean_all", [](auto& p) { return ag::mean_all(ag::square(p.at("a"))); }},
        {"gather", [](auto& p) { return ag::sum_all(ag::square(ag::gather_rows(p.at("emb"), {1, 3, 3, 7}))); }},
        {"layer_norm",
         [](auto& p) { return ag::sum_all(ag::square(ag::layer_norm_rows(p.at("a"), p.at("gain"), p.at("bias")))); }},
        {"causal_softmax",
         [](auto& p) {
             auto scores = ag::matmul(p.at("a"), ag::transpose(p.at("b")));
             return ag::sum_all(ag::square(ag::causal_softmax_rows(scores)));
         }},
        {"token_logprobs",
         [](auto& p) {
             auto lp = ag::token_logprobs(ag::matmul(p.at("a"), ag::transpose(p.at("emb"))), {0, 4, 2, 9}, 1.0);
             return ag::neg(ag::mean_all(lp));
         }},
        {"slice_concat",
         [](auto& p) {
             auto c = ag::concat_rows<double>({p.at("a"), p.at("b")});
             return ag::sum_all(ag::square(ag::slice_rows(c, 2, 6)));
         }},
        {"min_clamp",
         [](auto& p) {
             auto m = ag::min_elem(p.at("a"), p.at("b"));
             return ag::sum_all(ag::square(ag::clamp(m, -0.45, 0.45)));
         }},
        {"broadcast_rows", [](auto& p) { return ag::sum_all(ag::square(ag::broadcast_rows(p.at("v"), 5))); }},
        {"scale_rows",
         [](auto& p) { return ag::sum_all(ag::square(ag::scale_rows(p.at("a"), {0.5, -1.5, 2.0, 0.1}))); }},
        {"row_sums", [](auto& p) { return ag::sum_all(ag::square(ag::row_sums(p.at("a")))); }},
    };
    for (auto& [name, fn] : cases) {
        INFO(name);
        CHECK(grad_check<double>(fn, ps, 1e-3) < 1e-4);
    }
}

TEST_CASE("non-finite forward aborts with a numeric error") {
    auto big = ag::leaf<float>({2}, {3e38f, 3e38f});
    CHECK_THROWS_AS(ag::add(big, big), NumericError);
    auto x = ag::leaf<float>({1}, {900.0f});
    CHECK_THROWS_AS(ag::exp(x), NumericError);
}

TEST_CASE("adam descends a quadratic and respects freezing") {
    ParameterStore<float> ps;
    SeededRng rng(5);
    ps.create_randn("w", {16}, rng, 1.0);
    ps.create_randn("frozen", {4}, rng, 1.0);
    ps.lock();
    ps.set_trainable("frozen", false);
    const auto frozen_before = ps.at("frozen")->data;

    AdamOptimizer<float> opt(0.05, 0.9, 0.999, 1e-8, 0.0);
    auto loss_val = [&]() {
        auto w = ps.at("w");
        double s = 0;
        for (float v : w->data) s += 0.5 * v * v;
        return s;
    };
    const double initial = loss_val();
    for (int i = 0; i < 200; ++i) {
        ps.zero_grad();
        auto loss = ag::scale(ag::sum_all(ag::square(ps.at("w"))), 0.5f);
        ag::backward(loss);
        opt.step(ps);
    }
    CHECK(loss_val() < 0.01 * initial);
    CHECK(ps.at("frozen")->data == frozen_before);
}

TEST_CASE("checkpoint round-trip is bit-exact and hash-checked") {
    ParameterStore<float> ps;
    SeededRng rng(31);
    ps.create_randn("layer.w", {8, 4}, rng, 0.3);
    ps.create_randn("layer.b", {4}, rng, 0.3);
    ps.lock();

    const std::string p1 = "ckpt_test_a.bin";
    save_store(p1, "demo", 7, 0xabcdefULL, ps);

    ParameterStore<float> ps2;
    ps2.create("layer.w", {8, 4});
    ps2.create("layer.b", {4});
    ps2.lock();
    auto man = load_store(p1, "demo", 0xabcdefULL, ps2);
    CHECK(man.step == 7);
    CHECK(ps2.at("layer.w")->data == ps.at("layer.w")->data);
    CHECK(ps2.at("layer.b")->data == ps.at("layer.b")->data);

    // save -> load -> save must produce identical bytes
    save_store("ckpt_test_c.bin", "demo", 7, 0xabcdefULL, ps2);
    CHECK(hash_file(p1) == hash_file("ckpt_test_c.bin"));

    CHECK_THROWS_AS(load_store(p1, "demo", 0x1234ULL, ps2), DependencyError);
    CHECK_THROWS_AS(load_store(p1, "other", 0xabcdefULL, ps2), DependencyError);
    CHECK_THROWS_AS(load_store("no_such_file.bin", "demo", 0xabcdefULL, ps2), DependencyError);

    std::remove(p1.c_str());
    std::remove("ckpt_test_c.bin");
}

TEST_CASE("parameter store snapshot restores bit-exactly") {
    ParameterStore<float> ps;
    SeededRng rng(2);
    ps.create_randn("x", {32}, rng, 1.0);
    ps.lock();
    auto snap = ps.snapshot();
    auto orig = ps.at("x")->data;
    for (auto& v : ps.at("x")->data) v += 1.0f;
    ps.restore(snap);
    CHECK(ps.at("x")->data == orig);
    CHECK_THROWS_AS(ps.create("late", {1}), ConfigError);
}
