// dosediff command line: phantom-gen | train | sample | eval | ablate
#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "dosediff/dosediff.hpp"

namespace {

using namespace dosediff;

void log_line(const std::string& s) { std::cerr << s << '\n'; }

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> steps;
    std::optional<double> dose;
};

void add_config(CLI::App* cmd, Common& c)
{
    cmd->add_option("--config", c.config, "Run configuration JSON")->required()->check(CLI::ExistingFile);
}

int run_phantom_gen(const Common& c)
{
    RunConfig cfg = load_run_config(c.config);
    DatasetSpec spec = cfg.data;
    spec.master_seed = c.seed.value_or(cfg.seed);
    if (c.steps)
        spec.n_phantoms = *c.steps;
    const fs::path out = c.out.empty() ? fs::path(cfg.dataset) : fs::path(c.out);
    const auto records = build_dataset(spec, out);
    std::cout << "wrote " << records.size() << " records for " << spec.n_phantoms << " phantoms to " << out.string()
              << '\n';
    return 0;
}

int run_train(const Common& c, const std::string& variant, const std::string& dataset)
{
    RunConfig cfg = load_run_config(c.config);
    if (c.seed)
        cfg.seed = *c.seed;
    if (c.steps)
        cfg.train_steps = *c.steps;
    if (!variant.empty())
        cfg.variant = variant_from_string(variant);
    if (!dataset.empty())
        cfg.dataset = dataset;
    cfg.validate();
    const fs::path out = c.out.empty() ? fs::path("checkpoint") : fs::path(c.out);
    Dataset data(cfg.dataset);
    Denoiser<float> net(cfg.effective_denoiser());
    log_line("training " + to_string(cfg.variant) + " (" + std::to_string(net.params().element_count()) +
             " parameters) for " + std::to_string(cfg.train_steps) + " steps");
    const TrainResult r = train_model(net, cfg, data, out, log_line);
    save_run_config(out / "run_config.json", cfg);
    std::cout << "checkpoint " << out.string() << " after " << r.steps << " steps, final loss " << r.losses.back()
              << '\n';
    return 0;
}

int run_sample(const Common& c, const std::string& checkpoint, const std::string& lpet_path,
               const std::string& ct_path)
{
    RunConfig cfg = load_run_config(c.config);
    if (c.steps)
        cfg.sample_steps = *c.steps;
    const std::uint64_t seed = c.seed.value_or(cfg.seed);
    CheckpointInfo info;
    const Denoiser<float> net = load_checkpoint<float>(checkpoint, &info);
    require(cfg.sample_steps <= info.diffusion_steps, "--steps exceeds the checkpoint's diffusion steps");
    VolumeMeta meta;
    const Tensor<float> lpet = read_volume<float>(lpet_path, &meta);
    const Tensor<float> ct = read_volume<float>(ct_path);
    const DoseLevel dose = DoseLevel::from_fraction(*c.dose);
    Rng rng(derive_seed(seed, {RunConfig::kSampleStream}));
    const auto sched = respace(cosine_schedule(info.diffusion_steps), cfg.sample_steps);
    const Tensor<float> pred = denormalize_pet(
        sample(normalize_pet<float>(lpet, cfg.pet_scale), normalize_ct<float>(ct, cfg.ct_scale), dose, net.predictor(),
               sched, rng),
        cfg.pet_scale);
    meta.modality = Modality::PET;
    meta.dose_fraction = dose.fraction;
    meta.seed = seed;
    write_volume(c.out, pred, meta);
    std::cout << "wrote " << c.out << '\n';
    return 0;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& dataset)
{
    RunConfig cfg = load_run_config(c.config);
    if (c.steps)
        cfg.sample_steps = *c.steps;
    if (!dataset.empty())
        cfg.dataset = dataset;
    CheckpointInfo info;
    const Denoiser<float> net = load_checkpoint<float>(checkpoint, &info);
    require(cfg.sample_steps <= info.diffusion_steps, "--steps exceeds the checkpoint's diffusion steps");
    Dataset data(cfg.dataset);
    EvalOptions eo;
    eo.sample_steps = cfg.sample_steps;
    eo.seed = c.seed.value_or(cfg.seed);
    eo.pet_scale = cfg.pet_scale;
    eo.ct_scale = cfg.ct_scale;
    eo.limit = cfg.eval_limit;
    eo.dose_fraction = c.dose;
    MetricsReport report =
        evaluate_records<float>(net.predictor(), cosine_schedule(info.diffusion_steps), data.split(Split::test), data,
                                eo, log_line);
    report.metadata["checkpoint"] = checkpoint;
    report.metadata["variant"] = info.variant;
    report.metadata["dataset"] = cfg.dataset;
    const fs::path out = c.out.empty() ? fs::path("eval") : fs::path(c.out);
    write_report(out, report);
    for (const auto& a : report.aggregates())
        std::printf("dose %.2f  n=%d  LPET %.3f dB / %.4f  pred %.3f dB / %.4f\n", a.dose_fraction, a.count,
                    a.psnr_lpet, a.ssim_lpet, a.psnr_pred, a.ssim_pred);
    std::cout << "wrote " << (out / "metrics.csv").string() << '\n';
    return 0;
}

int run_ablate(const Common& c, const std::string& dataset)
{
    RunConfig cfg = load_run_config(c.config);
    if (c.seed)
        cfg.ablation_seeds = {*c.seed};
    if (c.steps)
        cfg.train_steps = *c.steps;
    if (!dataset.empty())
        cfg.dataset = dataset;
    cfg.validate();
    Dataset data(cfg.dataset);
    const fs::path out = c.out.empty() ? fs::path("ablation") : fs::path(c.out);
    const AblationReport rep = ablate(cfg, data, out, log_line);
    std::cout << rep.to_table();
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Dose-conditioned diffusion denoiser for synthetic PET/CT"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Print help for every subcommand");

    Common c;
    std::string variant, dataset, checkpoint, lpet, ct;

    auto* gen = app.add_subcommand("phantom-gen", "Generate a synthetic multi-dose PET/CT dataset");
    add_config(gen, c);
    gen->add_option("--seed", c.seed, "Master seed (default: config seed)");
    gen->add_option("--out", c.out, "Dataset directory (default: config dataset)");
    gen->add_option("--steps", c.steps, "Number of phantoms (default: config data.n_phantoms)")->check(CLI::PositiveNumber);

    auto* train = app.add_subcommand("train", "Train a denoiser and write a checkpoint");
    add_config(train, c);
    train->add_option("--seed", c.seed, "Master seed for initialization and data order");
    train->add_option("--out", c.out, "Checkpoint directory (default: checkpoint)");
    train->add_option("--steps", c.steps, "Optimizer steps")->check(CLI::PositiveNumber);
    train->add_option("--variant", variant, "iddpm | iddpm+hwa | full")->check(CLI::IsMember({"iddpm", "iddpm+hwa", "full"}));
    train->add_option("--dataset", dataset, "Dataset directory (default: config dataset)");

    auto* smp = app.add_subcommand("sample", "Denoise one LPET volume");
    add_config(smp, c);
    smp->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    smp->add_option("--lpet", lpet, "Low-dose PET .vol")->required()->check(CLI::ExistingFile);
    smp->add_option("--ct", ct, "CT .vol")->required()->check(CLI::ExistingFile);
    smp->add_option("--dose", c.dose, "Dose fraction in (0, 1]")->required()->check(CLI::Range(1e-9, 1.0));
    smp->add_option("--out", c.out, "Output .vol path")->required();
    smp->add_option("--steps", c.steps, "Sampling steps K")->check(CLI::PositiveNumber);
    smp->add_option("--seed", c.seed, "Sampling seed");

    auto* ev = app.add_subcommand("eval", "Score a checkpoint on the test split");
    add_config(ev, c);
    ev->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    ev->add_option("--out", c.out, "Report directory for metrics.csv / metrics.json (default: eval)");
    ev->add_option("--steps", c.steps, "Sampling steps K")->check(CLI::PositiveNumber);
    ev->add_option("--seed", c.seed, "Sampling seed");
    ev->add_option("--dose", c.dose, "Only evaluate records at this dose fraction")->check(CLI::Range(1e-9, 1.0));
    ev->add_option("--dataset", dataset, "Dataset directory (default: config dataset)");

    auto* abl = app.add_subcommand("ablate", "Train and evaluate iddpm, iddpm+hwa and full");
    add_config(abl, c);
    abl->add_option("--seed", c.seed, "Run a single seed instead of config ablation_seeds");
    abl->add_option("--out", c.out, "Output directory (default: ablation)");
    abl->add_option("--steps", c.steps, "Optimizer steps per run")->check(CLI::PositiveNumber);
    abl->add_option("--dataset", dataset, "Dataset directory (default: config dataset)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed())
            return run_phantom_gen(c);
        if (train->parsed())
            return run_train(c, variant, dataset);
        if (smp->parsed())
            return run_sample(c, checkpoint, lpet, ct);
        if (ev->parsed())
            return run_eval(c, checkpoint, dataset);
        if (abl->parsed())
            return run_ablate(c, dataset);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
