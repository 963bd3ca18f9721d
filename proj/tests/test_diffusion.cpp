#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace dosediff;
using namespace dosediff::testing;

namespace {

double f_cos(double u, int T)
{
    const double c = std::cos((u / T + 0.008) / 1.008 * std::numbers::pi / 2);
    return c * c;
}

Tensor<double> filled(double v, int n = 8) { return Tensor<double>({1, n, n, n}, v); }

} // namespace

TEST(Schedule, CosineMatchesClosedForm)
{
    const auto s = cosine_schedule(10);
    ASSERT_EQ(s.steps(), 10);
    // Unclipped steps telescope: alpha_bar_t = f(t+1) / f(0).
    for (int t = 0; t < 9; ++t) {
        EXPECT_NEAR(s.alpha_bar[t], f_cos(t + 1, 10) / f_cos(0, 10), 1e-12) << t;
        EXPECT_NEAR(s.beta[t], 1 - f_cos(t + 1, 10) / f_cos(t, 10), 1e-12) << t;
    }
    EXPECT_DOUBLE_EQ(s.beta[9], 0.999);
    EXPECT_NEAR(s.alpha_bar[9], s.alpha_bar[8] * 0.001, 1e-15);
}

TEST(Schedule, Invariants)
{
    for (int T : {10, 100, 1000}) {
        const auto s = cosine_schedule(T);
        EXPECT_LT(s.alpha_bar[0], 1.0);
        EXPECT_EQ(s.posterior_variance[0], 0.0);
        for (int t = 0; t < T; ++t) {
            EXPECT_GT(s.beta[t], 0.0);
            EXPECT_LE(s.beta[t], 0.999);
            EXPECT_LE(s.posterior_variance[t], s.beta[t] * (1 + 1e-12));
            if (t > 0) {
                EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
                const double tilde = s.beta[t] * (1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t]);
                EXPECT_NEAR(s.posterior_variance[t], tilde, 1e-15);
            }
        }
    }
    EXPECT_THROW(cosine_schedule(1), std::invalid_argument);
}

TEST(Respace, EndpointsAndRounding)
{
    EXPECT_EQ(respaced_timesteps(10, 3), (std::vector<int>{0, 5, 9}));
    EXPECT_EQ(respaced_timesteps(10, 1), (std::vector<int>{0}));
    EXPECT_EQ(respaced_timesteps(1000, 2), (std::vector<int>{0, 999}));
    const auto ts = respaced_timesteps(1000, 50);
    ASSERT_EQ(ts.size(), 50u);
    EXPECT_EQ(ts.front(), 0);
    EXPECT_EQ(ts.back(), 999);
    for (std::size_t i = 1; i < ts.size(); ++i) {
        EXPECT_GT(ts[i], ts[i - 1]);
        EXPECT_EQ(ts[i], static_cast<int>(std::floor(i * 999.0 / 49.0 + 0.5)));
    }
    EXPECT_THROW(respaced_timesteps(10, 11), std::invalid_argument);
    EXPECT_THROW(respaced_timesteps(10, 0), std::invalid_argument);
}

TEST(Respace, FullKeepRecoversBase)
{
    const auto base = cosine_schedule(100);
    const auto r = respace(base, 100);
    for (int t = 0; t < 100; ++t) {
        EXPECT_EQ(r.timesteps[t], t);
        EXPECT_NEAR(r.schedule.beta[t], base.beta[t], 1e-12);
    }
}

TEST(Respace, PreservesMarginals)
{
    const auto base = cosine_schedule(1000);
    const auto r = respace(base, 50);
    Rng rng(3);
    const auto x0 = rng.normal_tensor<double>({1, 8, 8, 8});
    const auto eps = rng.normal_tensor<double>({1, 8, 8, 8});
    for (int i = 0; i < r.steps(); ++i) {
        EXPECT_EQ(r.schedule.alpha_bar[i], base.alpha_bar[r.timesteps[i]]);
        EXPECT_EQ(q_sample(x0, i, eps, r.schedule), q_sample(x0, r.timesteps[i], eps, base));
    }
}

TEST(LearnedVariance, EndpointsAndInterpolation)
{
    const auto s = cosine_schedule(1000);
    for (int t : {1, 10, 500, 999}) {
        EXPECT_NEAR(learned_variance(filled(1.0), t, s)[0] / s.beta[t], 1.0, 1e-12);
        EXPECT_NEAR(learned_variance(filled(0.0), t, s)[0] / s.posterior_variance[t], 1.0, 1e-12);
        const double mid = learned_variance(filled(0.5), t, s)[0];
        EXPECT_NEAR(mid / std::sqrt(s.beta[t] * s.posterior_variance[t]), 1.0, 1e-12);
        double prev = 0;
        for (double v = 0; v <= 1.0; v += 0.125) {
            const double cur = learned_variance(filled(v), t, s)[0];
            EXPECT_GE(cur, prev);
            prev = cur;
        }
    }
    EXPECT_NEAR(learned_variance(filled(0.3), 0, s)[0], s.beta[0], 1e-15);
    EXPECT_THROW(learned_variance(filled(1.5), 5, s), std::invalid_argument);
    EXPECT_THROW(learned_variance(filled(0.5), 1000, s), std::invalid_argument);
}

TEST(LearnedVariance, GeometricMeanOfHandPickedSchedule)
{
    // beta_1 = 0.02; alpha_bar_0 = 1 / (1 + beta_1) makes beta~_1 = beta_1 / 2.
    const double b1 = 0.02;
    const double a = 1.0 / (1.0 + b1);
    const auto s = NoiseSchedule::from_beta_and_alpha_bar({1 - a, b1}, {a, a * (1 - b1)});
    EXPECT_NEAR(s.posterior_variance[1], 0.01, 1e-15);
    EXPECT_NEAR(learned_variance(filled(0.5), 1, s)[0], std::sqrt(0.0002), 1e-15);
}

TEST(Kl, KnownValue)
{
    EXPECT_NEAR(normal_kl(0, std::log(0.01), 0, std::log(0.02)), 0.5 * (std::log(2.0) - 0.5), 1e-12);
    EXPECT_NEAR(normal_kl(0, std::log(0.01), 0, std::log(0.02)), 0.09657, 1e-5);
    EXPECT_EQ(normal_kl(0.3, -1.0, 0.3, -1.0), 0.0);
    EXPECT_NEAR(normal_kl(1.0, 0.0, 0.0, 0.0), 0.5, 1e-15);
}

TEST(Kl, DiscretizedLikelihoodSumsToOne)
{
    for (double mean : {-0.5, 0.0, 0.9}) {
        double total = 0;
        for (int i = 0; i < 256; ++i)
            total += std::exp(discretized_gaussian_log_likelihood(-1.0 + 2.0 * i / 255.0, mean, std::log(0.01)));
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(Posterior, ExactNoiseGivesPosteriorMean)
{
    const auto s = cosine_schedule(1000);
    Rng rng(5);
    const auto x0 = rng.normal_tensor<double>({1, 8, 8, 8});
    const auto eps = rng.normal_tensor<double>({1, 8, 8, 8});
    for (int t : {1, 50, 500, 999}) {
        const auto xt = q_sample(x0, t, eps, s);
        EXPECT_LT(max_abs_diff(p_mean(eps, xt, t, s), q_posterior_mean(x0, xt, t, s)), 1e-9) << t;
    }
    const auto xt0 = q_sample(x0, 0, eps, s);
    EXPECT_LT(max_abs_diff(p_mean(eps, xt0, 0, s), x0), 1e-9);
}

TEST(Posterior, PredictX0InvertsQSample)
{
    const auto s = cosine_schedule(1000);
    Rng rng(6);
    const auto x0 = rng.uniform_tensor<double>({1, 8, 8, 8}, -1, 1);
    const auto eps = rng.normal_tensor<double>({1, 8, 8, 8});
    for (int t : {0, 300, 900})
        EXPECT_LT(max_abs_diff(predict_x0(eps, q_sample(x0, t, eps, s), t, s), x0), 1e-9) << t;
}

TEST(Posterior, ClippedStepMatchesUnclippedInRange)
{
    const auto s = respace(cosine_schedule(1000), 50).schedule;
    Rng rng(8);
    const auto x0 = rng.uniform_tensor<double>({1, 8, 8, 8}, -0.9, 0.9);
    const auto eps = rng.normal_tensor<double>({1, 8, 8, 8});
    for (int t : {0, 10, 48}) {
        const auto xt = q_sample(x0, t, eps, s);
        const ModelOut<double> out{eps, Tensor<double>(x0.shape(), 0.3)};
        Rng a(1), b(1);
        EXPECT_LT(max_abs_diff(p_step(out, xt, t, s, a, 1.0), p_step(out, xt, t, s, b)), 1e-9) << t;
    }
}

TEST(Sampler, ClipBoundsNoisyPredictor)
{
    // A 10% eps error is amplified by 1/sqrt(alpha) ~ 630 at the first
    // respaced step unless the x0 estimate is clipped.
    const auto base = cosine_schedule(1000);
    const auto r = respace(base, 50);
    Rng noise(3);
    const auto x0 = noise.uniform_tensor<double>({1, 8, 8, 8}, 0, 0.8);
    NoisePredictor<double> model = [&](const Tensor<double>& x, const Tensor<double>&, const Tensor<double>&, int t,
                                       const DoseLevel&) {
        Tensor<double> e = x;
        const double a = std::sqrt(base.alpha_bar[t]), b = std::sqrt(1 - base.alpha_bar[t]);
        for (std::size_t i = 0; i < e.size(); ++i)
            e[i] = (x[i] - a * x0[i]) / b + 0.1 * noise.normal();
        return ModelOut<double>{e, Tensor<double>(x.shape(), 0.0)};
    };
    Rng rng(4);
    const auto y = sample(x0, x0, DoseLevel::from_fraction(0.02), model, r, rng);
    EXPECT_LT(max_abs(y), 1.5);
    double mse = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        mse += (y[i] - x0[i]) * (y[i] - x0[i]);
    EXPECT_LT(mse / y.size(), 0.05);
}

TEST(QSample, MonteCarloMoments)
{
    const auto s = cosine_schedule(1000);
    Rng rng(7);
    const int n = 20000;
    const double x0v = 0.6;
    for (int t : {10, 500, 990}) {
        const auto x0 = Tensor<double>({n}, x0v);
        const auto eps = rng.normal_tensor<double>({n});
        const auto xt = q_sample(x0, t, eps, s);
        double m = 0, m2 = 0;
        for (double v : xt.values())
            m += v;
        m /= n;
        for (double v : xt.values())
            m2 += (v - m) * (v - m);
        m2 /= n - 1;
        const double mean = std::sqrt(s.alpha_bar[t]) * x0v, var = 1 - s.alpha_bar[t];
        EXPECT_NEAR(m, mean, 4 * std::sqrt(var / n)) << t;
        EXPECT_NEAR(m2, var, 4 * var * std::sqrt(2.0 / (n - 1))) << t;
    }
}

TEST(HybridLoss, ZeroWeightIsMse)
{
    const auto s = cosine_schedule(100);
    Rng rng(9);
    const auto x0 = rng.normal_tensor<double>({1, 8, 8, 8});
    const auto eps = rng.normal_tensor<double>({1, 8, 8, 8});
    const auto xt = q_sample(x0, 40, eps, s);
    Var<double> ep(rng.normal_tensor<double>({1, 8, 8, 8}), true);
    Var<double> v(Tensor<double>({1, 8, 8, 8}, 0.5), true);
    const auto l = hybrid_loss(ep, v, x0, xt, 40, eps, s, 0.0);
    double mse = 0;
    for (std::size_t i = 0; i < eps.size(); ++i)
        mse += (ep.value()[i] - eps[i]) * (ep.value()[i] - eps[i]);
    EXPECT_NEAR(l.total.value()[0], mse / eps.size(), 1e-12);
    EXPECT_EQ(l.vlb, 0.0);
}

TEST(HybridLoss, ExactPredictionHasZeroLoss)
{
    const auto s = cosine_schedule(100);
    Rng rng(10);
    const auto x0 = rng.normal_tensor<double>({1, 8, 8, 8});
    const auto eps = rng.normal_tensor<double>({1, 8, 8, 8});
    const auto xt = q_sample(x0, 30, eps, s);
    Var<double> ep(eps, true);
    Var<double> v(Tensor<double>({1, 8, 8, 8}, 0.0), true);
    const auto l = hybrid_loss(ep, v, x0, xt, 30, eps, s);
    EXPECT_NEAR(l.total.value()[0], 0.0, 1e-12);
    EXPECT_NEAR(l.vlb, 0.0, 1e-12);
}

TEST(HybridLoss, VlbUsesBitsAndWeight)
{
    const auto s = cosine_schedule(100);
    Rng rng(11);
    const auto x0 = rng.normal_tensor<double>({1, 4, 4, 4});
    const auto eps = rng.normal_tensor<double>({1, 4, 4, 4});
    const int t = 20;
    const auto xt = q_sample(x0, t, eps, s);
    const auto epv = rng.normal_tensor<double>({1, 4, 4, 4});
    const auto vv = rng.uniform_tensor<double>({1, 4, 4, 4}, 0, 1);
    const auto mu = p_mean(epv, xt, t, s), mq = q_posterior_mean(x0, xt, t, s);
    double kl = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        const double lv = vv[i] * std::log(s.beta[t]) + (1 - vv[i]) * std::log(s.posterior_variance[t]);
        kl += normal_kl(mq[i], std::log(s.posterior_variance[t]), mu[i], lv);
    }
    const double bits = kl / x0.size() / std::log(2.0);
    Var<double> ep(epv, true), v(vv, true);
    const auto l = hybrid_loss(ep, v, x0, xt, t, eps, s);
    EXPECT_NEAR(l.vlb, bits, 1e-12);
    EXPECT_NEAR(l.total.value()[0], l.simple + 0.001 * bits, 1e-12);
}

TEST(HybridLoss, VlbGradientReachesOnlyVariance)
{
    const auto s = cosine_schedule(100);
    Rng rng(12);
    const auto x0 = rng.normal_tensor<double>({1, 4, 4, 4});
    const auto eps = rng.normal_tensor<double>({1, 4, 4, 4});
    const int t = 25;
    const auto xt = q_sample(x0, t, eps, s);
    Var<double> ep(rng.normal_tensor<double>({1, 4, 4, 4}), true);
    Var<double> v(rng.uniform_tensor<double>({1, 4, 4, 4}, 0.1, 0.9), true);
    auto loss = [&] { return hybrid_loss(ep, v, x0, xt, t, eps, s, 1.0).total; };
    EXPECT_LT(check_gradient(loss, v, 1e-6).rel_error, 1e-6);

    // Gradient w.r.t. eps_pred is that of the MSE term alone.
    ep.zero_grad();
    loss().backward();
    const auto g_total = ep.grad();
    ep.zero_grad();
    hybrid_loss(ep, v, x0, xt, t, eps, s, 0.0).total.backward();
    EXPECT_LT(max_abs_diff(g_total, ep.grad()), 1e-15);
}

TEST(HybridLoss, FirstStepIsDiscretizedLikelihood)
{
    const auto s = cosine_schedule(100);
    Rng rng(13);
    const auto x0 = rng.uniform_tensor<double>({1, 4, 4, 4}, -1, 1);
    const auto eps = rng.normal_tensor<double>({1, 4, 4, 4});
    const auto xt = q_sample(x0, 0, eps, s);
    Var<double> ep(eps, true), v(Tensor<double>({1, 4, 4, 4}, 0.5), true);
    const auto l = hybrid_loss(ep, v, x0, xt, 0, eps, s, 1.0);
    double nll = 0;
    const auto mu = p_mean(eps, xt, 0, s);
    for (std::size_t i = 0; i < x0.size(); ++i)
        nll -= discretized_gaussian_log_likelihood(x0[i], mu[i], std::log(s.beta[0]));
    EXPECT_NEAR(l.vlb, nll / x0.size() / std::log(2.0), 1e-12);
    Var<double> total = l.total;
    total.backward();
    EXPECT_EQ(max_abs(v.grad()), 0.0);
}

TEST(Sampler, CallsModelOncePerStepAndIsDeterministic)
{
    const auto r = respace(cosine_schedule(1000), 20);
    int calls = 0;
    std::vector<int> seen;
    NoisePredictor<double> model = [&](const Tensor<double>& x, const Tensor<double>&, const Tensor<double>&, int t,
                                       const DoseLevel&) {
        ++calls;
        seen.push_back(t);
        return ModelOut<double>{Tensor<double>(x.shape()), Tensor<double>(x.shape(), 0.5)};
    };
    const Tensor<double> lpet({1, 8, 8, 8}, 0.1), ct({1, 8, 8, 8}, 0.2);
    Rng a(42), b(42), c(43);
    const auto ya = sample(lpet, ct, DoseLevel::from_fraction(0.1), model, r, a);
    EXPECT_EQ(calls, 20);
    EXPECT_EQ(seen.front(), 999);
    EXPECT_EQ(seen.back(), 0);
    EXPECT_EQ(ya, sample(lpet, ct, DoseLevel::from_fraction(0.1), model, r, b));
    EXPECT_GT(max_abs_diff(ya, sample(lpet, ct, DoseLevel::from_fraction(0.1), model, r, c)), 0.0);
}

TEST(Sampler, OracleNetworkRecoversTarget)
{
    const auto base = cosine_schedule(1000);
    const auto r = respace(base, 50);
    Rng rng(17);
    const auto x0 = rng.uniform_tensor<double>({1, 8, 8, 8}, -1, 1);
    // Exact noise for the original timestep given the known clean volume.
    NoisePredictor<double> oracle = [&](const Tensor<double>& x, const Tensor<double>&, const Tensor<double>&, int t,
                                        const DoseLevel&) {
        Tensor<double> e = x;
        const double a = std::sqrt(base.alpha_bar[t]), b = std::sqrt(1 - base.alpha_bar[t]);
        for (std::size_t i = 0; i < e.size(); ++i)
            e[i] = (x[i] - a * x0[i]) / b;
        return ModelOut<double>{e, Tensor<double>(x.shape(), 0.0)};
    };
    const auto y = sample(x0, x0, DoseLevel::from_fraction(0.5), oracle, r, rng);
    double mse = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        mse += (y[i] - x0[i]) * (y[i] - x0[i]);
    mse /= y.size();
    EXPECT_LT(mse, r.schedule.beta[0]);
}

TEST(Sampler, RejectsNonFiniteModelOutput)
{
    const auto r = respace(cosine_schedule(100), 5);
    NoisePredictor<double> bad = [](const Tensor<double>& x, const Tensor<double>&, const Tensor<double>&, int,
                                    const DoseLevel&) {
        return ModelOut<double>{Tensor<double>(x.shape(), NAN), Tensor<double>(x.shape(), 0.5)};
    };
    Rng rng(1);
    const Tensor<double> v({1, 8, 8, 8});
    EXPECT_THROW(sample(v, v, DoseLevel::from_fraction(0.1), bad, r, rng), std::invalid_argument);
}
