#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "support.hpp"

using namespace dosediff;
using namespace dosediff::testing;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(const fs::path& data)
{
    RunConfig c;
    c.dataset = data.string();
    c.data.phantom.shape = {16, 16, 16};
    c.data.n_phantoms = 10;
    c.denoiser.base_channels = 8;
    c.denoiser.channel_mult = {1, 2};
    c.denoiser.norm_groups = 4;
    c.denoiser.time_dim = 16;
    c.denoiser.dose_dim = 16;
    c.diffusion_steps = 100;
    c.sample_steps = 3;
    c.batch_size = 2;
    c.train_steps = 3;
    c.crop = 16;
    c.log_every = 0;
    c.ablation_seeds = {0};
    c.eval_limit = 2;
    return c;
}

class HarnessData : public ::testing::Test {
protected:
    static void SetUpTestSuite()
    {
        root_ = fs::temp_directory_path() / "dosediff_test_harness";
        fs::remove_all(root_);
        RunConfig c = tiny_config(root_ / "data");
        c.data.master_seed = 3;
        build_dataset(c.data, root_ / "data");
    }

    static fs::path root_;
};

fs::path HarnessData::root_;

} // namespace

TEST(RunConfigJson, RoundTripAndUnknownKeys)
{
    RunConfig c = tiny_config("somewhere");
    c.variant = Variant::iddpm_hwa;
    c.seed = 1234567890123ull;
    c.denoiser.daa_order = DaaOrder::spatial_first;
    c.data.protocol.kappa = 80;
    c.data.splits = {0.6, 0.2, 0.2};
    const RunConfig back = run_config_from_json(run_config_to_json(c));
    EXPECT_EQ(run_config_to_json(back), run_config_to_json(c));
    EXPECT_EQ(back.variant, Variant::iddpm_hwa);
    EXPECT_EQ(back.seed, 1234567890123ull);

    json j = run_config_to_json(c);
    j["learning_rate"] = 0.1;
    EXPECT_THROW(run_config_from_json(j), std::invalid_argument);
    json partial{{"train_steps", 5}};
    EXPECT_EQ(run_config_from_json(partial).train_steps, 5);
    EXPECT_EQ(run_config_from_json(partial).sample_steps, 50);
    EXPECT_THROW(run_config_from_json(json{{"sample_steps", 2000}}), std::invalid_argument);
    EXPECT_THROW(run_config_from_json(json{{"variant", "unet"}}), std::invalid_argument);
}

TEST(RunConfigJson, FileErrorsNamePath)
{
    const fs::path p = fs::temp_directory_path() / "dosediff_test_bad_config.json";
    write_text_file(p, "{ \"lr\": ");
    try {
        load_run_config(p);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("dosediff_test_bad_config.json"), std::string::npos);
    }
}

TEST(Optim, CosineLr)
{
    EXPECT_DOUBLE_EQ(cosine_lr(0, 20000, 1e-4, 1e-6), 1e-4);
    EXPECT_NEAR(cosine_lr(19999, 20000, 1e-4, 1e-6), 1e-6, 1e-18);
    EXPECT_NEAR(cosine_lr(50, 101, 1.0, 0.0), 0.5, 1e-12);
    double prev = 1;
    for (int s = 0; s < 100; ++s) {
        const double v = cosine_lr(s, 100, 1.0, 0.1);
        EXPECT_LE(v, prev);
        prev = v;
    }
    EXPECT_THROW(cosine_lr(100, 100, 1.0, 0.0), std::invalid_argument);
}

TEST(Optim, AdamWFirstStepOracle)
{
    ParamStore<double> store;
    auto w = store.add("w", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}));
    AdamW<double> opt(store, AdamWOptions{0.9, 0.999, 1e-8, 0.1});
    ag::sum(ag::mul(w, ag::constant(Tensor<double>({3}, std::vector<double>{4.0, -1.0, 0.0})))).backward();
    opt.step(0.01, 0.5);
    // Bias-corrected first step: update = g / (|g| + eps) elementwise.
    const double expect[] = {1.0 - 0.01 * (2.0 / (2.0 + 1e-8) + 0.1 * 1.0),
                             -2.0 - 0.01 * (-0.5 / (0.5 + 1e-8) + 0.1 * -2.0), 0.5 - 0.01 * (0.1 * 0.5)};
    for (int i = 0; i < 3; ++i)
        EXPECT_NEAR(w.value()[i], expect[i], 1e-12);
}

TEST(Training, FixedExampleLossDecreases)
{
    RunConfig cfg = tiny_config("unused");
    Denoiser<float> net(cfg.effective_denoiser());
    const auto s = cosine_schedule(100);
    Rng rng(4);
    const auto p = generate_phantom(PhantomSpec{.shape = {16, 16, 16}, .seed = 9});
    const auto x0 = normalize_pet<float>(p.spet, 10.0);
    const auto lpet = normalize_pet<float>(simulate_dose(p.spet, DoseLevel::from_fraction(0.1), 50, 1), 10.0);
    const auto ct = normalize_ct<float>(p.ct, 1000.0);
    const auto eps = rng.normal_tensor<float>(x0.shape());
    const auto xt = q_sample(x0, 60, eps, s);
    AdamW<float> opt(net.params());
    std::vector<double> losses;
    for (int k = 0; k < 30; ++k) {
        const auto out = net.forward(xt, lpet, ct, 60, DoseLevel::from_fraction(0.1));
        auto l = hybrid_loss(out.eps_pred, out.v_pred, x0, xt, 60, eps, s);
        losses.push_back(l.total.value()[0]);
        l.total.backward();
        opt.step(1e-3);
        net.params().zero_grad();
    }
    EXPECT_LT(losses.back(), 0.5 * losses.front());
}

TEST(Training, BatchStreamDependsOnlyOnSeed)
{
    BatchStream a(5, 7, {32, 32, 32}, 16, 4, 1000), b(5, 7, {32, 32, 32}, 16, 4, 1000);
    BatchStream c(6, 7, {32, 32, 32}, 16, 4, 1000);
    bool differs = false;
    for (int i = 0; i < 50; ++i) {
        const auto ea = a.next(), eb = b.next(), ec = c.next();
        EXPECT_EQ(ea.record, eb.record);
        EXPECT_EQ(ea.t, eb.t);
        EXPECT_EQ(ea.z, eb.z);
        EXPECT_EQ(ea.eps, eb.eps);
        EXPECT_LT(ea.record, 7u);
        EXPECT_EQ(ea.z % 4, 0);
        EXPECT_LE(ea.z + 16, 32);
        differs |= ea.t != ec.t;
    }
    EXPECT_TRUE(differs);
    EXPECT_THROW(BatchStream(1, 1, {8, 8, 8}, 16, 4, 10), std::invalid_argument);
}

TEST_F(HarnessData, TrainWritesCheckpointAndSchedule)
{
    RunConfig cfg = tiny_config(root_ / "data");
    cfg.lr = 1e-3;
    cfg.lr_min = 1e-5;
    Dataset data(cfg.dataset);
    Denoiser<float> net(cfg.effective_denoiser());
    const fs::path out = root_ / "ckpt";
    const auto r = train_model(net, cfg, data, out);
    ASSERT_EQ(r.steps, 3);
    EXPECT_DOUBLE_EQ(r.lrs.front(), 1e-3);
    EXPECT_NEAR(r.lrs.back(), 1e-5, 1e-15);
    for (double l : r.losses)
        EXPECT_TRUE(std::isfinite(l));
    CheckpointInfo info;
    const auto loaded = load_checkpoint<float>(out, &info);
    EXPECT_EQ(info.train_steps, 3);
    EXPECT_EQ(info.variant, "full");
    EXPECT_EQ(info.diffusion_steps, 100);
    EXPECT_EQ(loaded.params().element_count(), net.params().element_count());
}

TEST_F(HarnessData, EvaluationAccounting)
{
    RunConfig cfg = tiny_config(root_ / "data");
    Dataset data(cfg.dataset);
    const auto test = data.split(Split::test);
    ASSERT_EQ(test.size(), 10u);
    const auto sched = cosine_schedule(100);
    // Oracle that knows the clean target of the current record.
    const Tensor<float>* target = nullptr;
    NoisePredictor<float> oracle = [&](const Tensor<float>& x, const Tensor<float>&, const Tensor<float>&, int t,
                                       const DoseLevel&) {
        const auto x0 = normalize_pet<float>(*target, 10.0);
        Tensor<float> e(x.shape());
        for (std::size_t i = 0; i < e.size(); ++i)
            e[i] = static_cast<float>((x[i] - std::sqrt(sched.alpha_bar[t]) * x0[i]) /
                                      std::sqrt(1 - sched.alpha_bar[t]));
        return ModelOut<float>{e, Tensor<float>(x.shape(), 0.0f)};
    };
    EvalOptions eo;
    eo.sample_steps = 5;
    MetricsReport report;
    for (const auto& rec : test) {
        target = data.load(rec).spet;
        const auto one = evaluate_records(oracle, sched, {rec}, data, eo);
        report.rows.push_back(one.rows.at(0));
    }
    ASSERT_EQ(report.rows.size(), test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& row = report.rows[i];
        const auto v = data.load(test[i]);
        ASSERT_TRUE(row.error.empty()) << row.error;
        EXPECT_EQ(row.id, test[i].id);
        EXPECT_DOUBLE_EQ(row.psnr_lpet, psnr(*v.lpet, *v.spet, reference_range(*v.spet)));
        EXPECT_DOUBLE_EQ(row.ssim_lpet, ssim(*v.lpet, *v.spet, reference_range(*v.spet)));
        EXPECT_GT(row.psnr_pred, 60.0);
        EXPECT_GT(row.ssim_pred, 0.999);
    }
    const auto aggs = report.aggregates();
    ASSERT_EQ(aggs.size(), 5u);
    for (const auto& a : aggs) {
        double sum = 0;
        int n = 0;
        for (const auto& r : report.rows)
            if (r.dose_fraction == a.dose_fraction) {
                sum += r.psnr_lpet;
                ++n;
            }
        EXPECT_EQ(a.count, n);
        EXPECT_NEAR(a.psnr_lpet, sum / n, 1e-9);
    }
    std::istringstream csv(report.to_csv());
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "id,dose_fraction,psnr_lpet,ssim_lpet,psnr_pred,ssim_pred");
    int lines = 0;
    while (std::getline(csv, line))
        ++lines;
    EXPECT_EQ(lines, 10);
}

TEST_F(HarnessData, EvaluationFiltersAndErrorRows)
{
    RunConfig cfg = tiny_config(root_ / "data");
    Dataset data(cfg.dataset);
    NoisePredictor<float> zero = [](const Tensor<float>& x, const Tensor<float>&, const Tensor<float>&, int,
                                    const DoseLevel&) {
        return ModelOut<float>{Tensor<float>(x.shape()), Tensor<float>(x.shape(), 0.5f)};
    };
    EvalOptions eo;
    eo.sample_steps = 2;
    eo.dose_fraction = 0.05;
    const auto r = evaluate_records(zero, cosine_schedule(100), data.split(Split::test), data, eo);
    ASSERT_EQ(r.rows.size(), 2u);
    for (const auto& row : r.rows)
        EXPECT_DOUBLE_EQ(row.dose_fraction, 0.05);

    auto recs = data.split(Split::test);
    recs[0].lpet_path = "missing.vol";
    eo.dose_fraction.reset();
    eo.limit = 2;
    const auto e = evaluate_records(zero, cosine_schedule(100), recs, data, eo);
    ASSERT_EQ(e.rows.size(), 2u);
    EXPECT_FALSE(e.rows[0].error.empty());
    EXPECT_TRUE(e.rows[1].error.empty());
    EXPECT_NE(e.to_csv().find(recs[0].id + ",0.02,nan,nan,nan,nan"), std::string::npos);
    EXPECT_EQ(e.aggregates().size(), 1u);
}

TEST_F(HarnessData, AblationShapeAndDeterminism)
{
    RunConfig cfg = tiny_config(root_ / "data");
    cfg.train_steps = 2;
    cfg.batch_size = 1;
    cfg.sample_steps = 2;
    cfg.eval_limit = 5;
    Dataset data(cfg.dataset);
    const auto a = ablate(cfg, data, root_ / "abl_a");
    const auto b = ablate(cfg, data, root_ / "abl_b");
    EXPECT_EQ(a.to_csv(), b.to_csv());
    EXPECT_EQ(read_text_file(root_ / "abl_a" / "full_seed0" / "metrics.csv"),
              read_text_file(root_ / "abl_b" / "full_seed0" / "metrics.csv"));
    ASSERT_EQ(a.table.size(), 3u);
    EXPECT_EQ(a.fractions, DoseProtocol{}.fractions);
    for (const auto& [v, doses] : a.table) {
        EXPECT_EQ(doses.size(), 5u);
        for (const auto& [d, c] : doses)
            EXPECT_EQ(c.seeds, 1);
    }
    // LPET columns come from the same records for every variant.
    EXPECT_EQ(a.table.at(Variant::iddpm).at(0.02).psnr_lpet, a.table.at(Variant::full).at(0.02).psnr_lpet);
    const std::string md = read_text_file(root_ / "abl_a" / "ablation.md");
    EXPECT_NE(md.find("| LPET |"), std::string::npos);
    EXPECT_NE(md.find("| iddpm+hwa |"), std::string::npos);
    EXPECT_TRUE(fs::exists(root_ / "abl_a" / "ablation.csv"));
}
