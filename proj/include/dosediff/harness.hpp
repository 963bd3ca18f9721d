#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "metrics.hpp"
#include "optim.hpp"
#include "phantom.hpp"

namespace dosediff {

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
    std::string dataset = "data";
    DatasetSpec data; // used by phantom-gen; master_seed mirrors `seed`
    DenoiserConfig denoiser;
    Variant variant = Variant::full;
    int diffusion_steps = 1000;
    int sample_steps = 50;
    double lr = 1e-4;
    double lr_min = 1e-6;
    double weight_decay = 0.01;
    double vlb_weight = kVlbWeight;
    int batch_size = 4;
    int train_steps = 20000;
    int crop = 32;
    double pet_scale = 10.0;
    double ct_scale = 1000.0;
    int log_every = 100;
    int checkpoint_every = 1000;
    int eval_limit = 0; // 0 = every test record
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> ablation_seeds{0, 1, 2};

    /// Denoiser config with the variant's gating applied.
    DenoiserConfig effective_denoiser() const
    {
        DenoiserConfig c = denoiser;
        c.use_hwa = variant != Variant::iddpm;
        c.use_daa = variant == Variant::full;
        c.init_seed = derive_seed(seed, {kInitStream});
        return c;
    }

    void validate() const
    {
        denoiser.validate();
        require(diffusion_steps >= 1, "config: diffusion_steps must be positive");
        require(sample_steps >= 1 && sample_steps <= diffusion_steps, "config: sample_steps must lie in [1, diffusion_steps]");
        require(lr > 0 && lr_min >= 0 && lr_min <= lr, "config: need 0 <= lr_min <= lr, lr > 0");
        require(weight_decay >= 0, "config: weight_decay must be non-negative");
        require(vlb_weight >= 0, "config: vlb_weight must be non-negative");
        require(batch_size >= 1 && train_steps >= 1, "config: batch_size and train_steps must be positive");
        require(crop > 0 && crop % (1 << denoiser.levels()) == 0,
                "config: crop must be divisible by " + std::to_string(1 << denoiser.levels()));
        require(pet_scale > 0 && ct_scale > 0, "config: scales must be positive");
        require(log_every >= 0 && checkpoint_every >= 0 && eval_limit >= 0, "config: negative interval");
        require(!ablation_seeds.empty(), "config: ablation_seeds is empty");
    }

    static constexpr std::uint64_t kInitStream = 11;
    static constexpr std::uint64_t kDataStream = 12;
    static constexpr std::uint64_t kSampleStream = 13;
};

inline json dataset_spec_to_json(const DatasetSpec& d)
{
    const PhantomSpec& p = d.phantom;
    auto range = [](const Range& r) { return json::array({r.lo, r.hi}); };
    return json{{"n_phantoms", d.n_phantoms},
                {"fractions", d.protocol.fractions},
                {"kappa", d.protocol.kappa},
                {"splits", {{"train", d.splits.train}, {"val", d.splits.val}, {"test", d.splits.test}}},
                {"phantom",
                 {{"shape", p.shape},
                  {"organs", {p.organs_min, p.organs_max}},
                  {"lesions", {p.lesions_min, p.lesions_max}},
                  {"bone_shell_voxels", p.bone_shell_voxels},
                  {"voxel_size_mm", p.voxel_size_mm},
                  {"ct_air", p.ct_air},
                  {"ct_soft", range(p.ct_soft)},
                  {"ct_bone", range(p.ct_bone)},
                  {"pet_background", range(p.pet_background)},
                  {"pet_organ", range(p.pet_organ)},
                  {"pet_lesion", range(p.pet_lesion)},
                  {"modulation", p.modulation}}}};
}

inline DatasetSpec dataset_spec_from_json(const json& j)
{
    DatasetSpec d;
    auto range = [](const json& a) { return Range{a.at(0).get<double>(), a.at(1).get<double>()}; };
    for (const auto& [key, val] : j.items()) {
        if (key == "n_phantoms")
            d.n_phantoms = val.get<int>();
        else if (key == "fractions")
            d.protocol.fractions = val.get<std::vector<double>>();
        else if (key == "kappa")
            d.protocol.kappa = val.get<double>();
        else if (key == "splits") {
            d.splits.train = val.at("train").get<double>();
            d.splits.val = val.at("val").get<double>();
            d.splits.test = val.at("test").get<double>();
        } else if (key == "phantom") {
            PhantomSpec& p = d.phantom;
            for (const auto& [k, v] : val.items()) {
                if (k == "shape")
                    p.shape = v.get<Shape>();
                else if (k == "organs") {
                    p.organs_min = v.at(0).get<int>();
                    p.organs_max = v.at(1).get<int>();
                } else if (k == "lesions") {
                    p.lesions_min = v.at(0).get<int>();
                    p.lesions_max = v.at(1).get<int>();
                } else if (k == "bone_shell_voxels")
                    p.bone_shell_voxels = v.get<double>();
                else if (k == "voxel_size_mm")
                    p.voxel_size_mm = v.get<std::array<double, 3>>();
                else if (k == "ct_air")
                    p.ct_air = v.get<double>();
                else if (k == "ct_soft")
                    p.ct_soft = range(v);
                else if (k == "ct_bone")
                    p.ct_bone = range(v);
                else if (k == "pet_background")
                    p.pet_background = range(v);
                else if (k == "pet_organ")
                    p.pet_organ = range(v);
                else if (k == "pet_lesion")
                    p.pet_lesion = range(v);
                else if (k == "modulation")
                    p.modulation = v.get<double>();
                else
                    throw std::invalid_argument("unknown phantom key '" + k + "'");
            }
        } else
            throw std::invalid_argument("unknown data key '" + key + "'");
    }
    return d;
}

inline json run_config_to_json(const RunConfig& c)
{
    return json{{"dataset", c.dataset},
                {"data", dataset_spec_to_json(c.data)},
                {"denoiser", denoiser_config_to_json(c.denoiser)},
                {"variant", to_string(c.variant)},
                {"diffusion_steps", c.diffusion_steps},
                {"sample_steps", c.sample_steps},
                {"lr", c.lr},
                {"lr_min", c.lr_min},
                {"weight_decay", c.weight_decay},
                {"vlb_weight", c.vlb_weight},
                {"batch_size", c.batch_size},
                {"train_steps", c.train_steps},
                {"crop", c.crop},
                {"pet_scale", c.pet_scale},
                {"ct_scale", c.ct_scale},
                {"log_every", c.log_every},
                {"checkpoint_every", c.checkpoint_every},
                {"eval_limit", c.eval_limit},
                {"seed", c.seed},
                {"ablation_seeds", c.ablation_seeds}};
}

/// Keys absent from j keep their defaults; unknown keys are an error so
/// typos do not silently fall back.
inline RunConfig run_config_from_json(const json& j)
{
    require(j.is_object(), "config must be a JSON object");
    RunConfig c;
    for (const auto& [key, val] : j.items()) {
        if (key == "dataset")
            c.dataset = val.get<std::string>();
        else if (key == "data")
            c.data = dataset_spec_from_json(val);
        else if (key == "denoiser")
            c.denoiser = denoiser_config_from_json(val);
        else if (key == "variant")
            c.variant = variant_from_string(val.get<std::string>());
        else if (key == "diffusion_steps")
            c.diffusion_steps = val.get<int>();
        else if (key == "sample_steps")
            c.sample_steps = val.get<int>();
        else if (key == "lr")
            c.lr = val.get<double>();
        else if (key == "lr_min")
            c.lr_min = val.get<double>();
        else if (key == "weight_decay")
            c.weight_decay = val.get<double>();
        else if (key == "vlb_weight")
            c.vlb_weight = val.get<double>();
        else if (key == "batch_size")
            c.batch_size = val.get<int>();
        else if (key == "train_steps")
            c.train_steps = val.get<int>();
        else if (key == "crop")
            c.crop = val.get<int>();
        else if (key == "pet_scale")
            c.pet_scale = val.get<double>();
        else if (key == "ct_scale")
            c.ct_scale = val.get<double>();
        else if (key == "log_every")
            c.log_every = val.get<int>();
        else if (key == "checkpoint_every")
            c.checkpoint_every = val.get<int>();
        else if (key == "eval_limit")
            c.eval_limit = val.get<int>();
        else if (key == "seed")
            c.seed = val.get<std::uint64_t>();
        else if (key == "ablation_seeds")
            c.ablation_seeds = val.get<std::vector<std::uint64_t>>();
        else
            throw std::invalid_argument("unknown config key '" + key + "'");
    }
    c.validate();
    return c;
}

inline RunConfig load_run_config(const fs::path& path)
{
    try {
        return run_config_from_json(json::parse(read_text_file(path)));
    } catch (const json::exception& e) {
        throw IoError(path, std::string("malformed config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw IoError(path, e.what());
    }
}

inline void save_run_config(const fs::path& path, const RunConfig& c)
{
    write_text_file(path, run_config_to_json(c).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Data access

/// PET activity [0, s] -> [-1, 1]; CT in HU divided by ct_scale.
template <class T>
Tensor<T> normalize_pet(const Tensor<float>& v, double scale)
{
    Tensor<T> out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<T>(2.0 * v[i] / scale - 1.0);
    return out;
}

template <class T>
Tensor<float> denormalize_pet(const Tensor<T>& v, double scale)
{
    Tensor<float> out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<float>((static_cast<double>(v[i]) + 1.0) * 0.5 * scale);
    return out;
}

template <class T>
Tensor<T> normalize_ct(const Tensor<float>& v, double scale)
{
    Tensor<T> out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<T>(v[i] / scale);
    return out;
}

/// Crop of extent `size` per axis starting at (z, y, x).
template <class T>
Tensor<T> crop_volume(const Tensor<T>& v, int z, int y, int x, int size)
{
    require_volume(v, "crop_volume");
    require(z >= 0 && y >= 0 && x >= 0 && z + size <= v.depth() && y + size <= v.height() && x + size <= v.width(),
            "crop_volume: window outside volume " + to_string(v.shape()));
    const int C = v.channels();
    Tensor<T> out({C, size, size, size});
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < size; ++k)
            for (int j = 0; j < size; ++j)
                for (int i = 0; i < size; ++i)
                    out.at(c, k, j, i) = v.at(c, z + k, y + j, x + i);
    return out;
}

/// Manifest plus an in-memory cache of every volume it references.
class Dataset {
public:
    explicit Dataset(fs::path root)
        : root_(std::move(root))
        , records_(read_manifest(root_ / "manifest.json"))
    {
        require(!records_.empty(), "dataset " + root_.string() + " has no records");
    }

    const fs::path& root() const noexcept { return root_; }
    const std::vector<SampleRecord>& records() const noexcept { return records_; }

    std::vector<SampleRecord> split(Split s) const
    {
        std::vector<SampleRecord> out;
        for (const auto& r : records_)
            if (r.split == s)
                out.push_back(r);
        return out;
    }

    const Tensor<float>& volume(const std::string& rel)
    {
        auto it = cache_.find(rel);
        if (it == cache_.end())
            it = cache_.emplace(rel, read_volume<float>(root_ / rel)).first;
        return it->second;
    }

    struct Triple {
        const Tensor<float>* lpet;
        const Tensor<float>* spet;
        const Tensor<float>* ct;
    };

    Triple load(const SampleRecord& r)
    {
        Triple t{&volume(r.lpet_path), &volume(r.spet_path), &volume(r.ct_path)};
        if (t.lpet->shape() != t.spet->shape() || t.lpet->shape() != t.ct->shape())
            throw IoError(root_ / r.lpet_path, "record " + r.id + " references volumes of differing shape");
        return t;
    }

private:
    fs::path root_;
    std::vector<SampleRecord> records_;
    std::map<std::string, Tensor<float>> cache_;
};

// ---------------------------------------------------------------------------
// Training

using Logger = std::function<void(const std::string&)>;

struct TrainExample {
    std::size_t record = 0;
    int z = 0, y = 0, x = 0;
    int t = 0;
    Tensor<float> eps;
};

/// Deterministic stream of training examples. Depends only on the data
/// seed, the training records and the crop/schedule sizes, never on the
/// model, so every ablation variant sees the same batches.
class BatchStream {
public:
    BatchStream(std::uint64_t seed, std::size_t n_records, Shape volume_shape, int crop, int align, int diffusion_steps)
        : rng_(seed)
        , n_records_(n_records)
        , shape_(std::move(volume_shape))
        , crop_(crop)
        , align_(align)
        , steps_(diffusion_steps)
    {
        require(n_records_ > 0, "no training records");
        for (int d : shape_)
            require(d >= crop_, "crop " + std::to_string(crop_) + " exceeds volume extent " + to_string(shape_));
    }

    TrainExample next()
    {
        TrainExample e;
        e.record = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(n_records_) - 1));
        auto offset = [&](int extent) { return align_ * rng_.uniform_int(0, (extent - crop_) / align_); };
        e.z = offset(shape_[0]);
        e.y = offset(shape_[1]);
        e.x = offset(shape_[2]);
        e.t = rng_.uniform_int(0, steps_ - 1);
        e.eps = rng_.normal_tensor<float>({1, crop_, crop_, crop_});
        return e;
    }

private:
    Rng rng_;
    std::size_t n_records_;
    Shape shape_;
    int crop_, align_, steps_;
};

struct TrainResult {
    std::vector<double> losses; // mean total loss per optimizer step
    std::vector<double> lrs;
    long steps = 0;
};

/// Runs the training loop in place on `net`. Checkpoints are written to
/// out_dir (if non-empty) every checkpoint_every steps and at the end.
template <class T>
TrainResult train_model(Denoiser<T>& net, const RunConfig& cfg, Dataset& data, const fs::path& out_dir = {},
                        const Logger& log = {})
{
    cfg.validate();
    const auto train = data.split(Split::train);
    require(!train.empty(), "dataset has no train records");
    const NoiseSchedule sched = cosine_schedule(cfg.diffusion_steps);
    const Shape vol_shape = data.load(train.front()).spet->spatial_shape();
    BatchStream stream(derive_seed(cfg.seed, {RunConfig::kDataStream}), train.size(), vol_shape, cfg.crop,
                       1 << net.config().levels(), cfg.diffusion_steps);
    AdamW<T> opt(net.params(), AdamWOptions{0.9, 0.999, 1e-8, cfg.weight_decay});

    CheckpointInfo info;
    info.diffusion_steps = cfg.diffusion_steps;
    info.variant = to_string(cfg.variant);

    TrainResult result;
    for (int step = 0; step < cfg.train_steps; ++step) {
        const double lr = cosine_lr(step, cfg.train_steps, cfg.lr, cfg.lr_min);
        double loss_sum = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const TrainExample ex = stream.next();
            const SampleRecord& rec = train[ex.record];
            const auto vols = data.load(rec);
            const Tensor<T> x0 = normalize_pet<T>(crop_volume(*vols.spet, ex.z, ex.y, ex.x, cfg.crop), cfg.pet_scale);
            const Tensor<T> lpet = normalize_pet<T>(crop_volume(*vols.lpet, ex.z, ex.y, ex.x, cfg.crop), cfg.pet_scale);
            const Tensor<T> ct = normalize_ct<T>(crop_volume(*vols.ct, ex.z, ex.y, ex.x, cfg.crop), cfg.ct_scale);
            const Tensor<T> eps = ex.eps.template cast<T>();
            const Tensor<T> x_t = q_sample(x0, ex.t, eps, sched);
            const auto out = net.forward(x_t, lpet, ct, ex.t, rec.dose);
            const auto loss = hybrid_loss(out.eps_pred, out.v_pred, x0, x_t, ex.t, eps, sched, cfg.vlb_weight);
            const double value = loss.total.value()[0];
            if (!std::isfinite(value))
                throw std::runtime_error("non-finite loss at step " + std::to_string(step) + " (record " + rec.id +
                                         ", t=" + std::to_string(ex.t) + ")");
            loss_sum += value;
            Var<T> total = loss.total;
            total.backward();
        }
        opt.step(lr, 1.0 / cfg.batch_size);
        net.params().zero_grad();
        result.losses.push_back(loss_sum / cfg.batch_size);
        result.lrs.push_back(lr);
        result.steps = step + 1;
        if (log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.train_steps)) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "step %d/%d loss %.6f lr %.3e", step + 1, cfg.train_steps,
                          result.losses.back(), lr);
            log(buf);
        }
        if (!out_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            step + 1 < cfg.train_steps) {
            info.train_steps = step + 1;
            save_checkpoint(out_dir, net, info);
        }
    }
    if (!out_dir.empty()) {
        info.train_steps = result.steps;
        save_checkpoint(out_dir, net, info);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct MetricsRow {
    std::string id;
    double dose_fraction = 0;
    double psnr_lpet = 0;
    double ssim_lpet = 0;
    double psnr_pred = 0;
    double ssim_pred = 0;
    std::string error; // non-empty when the record failed
};

struct DoseAggregate {
    double dose_fraction = 0;
    int count = 0;
    double psnr_lpet = 0;
    double ssim_lpet = 0;
    double psnr_pred = 0;
    double ssim_pred = 0;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    json metadata = json::object();

    /// Per-dose means over rows without errors, ascending dose.
    std::vector<DoseAggregate> aggregates() const
    {
        std::map<double, DoseAggregate> by;
        for (const auto& r : rows) {
            if (!r.error.empty())
                continue;
            auto& a = by[r.dose_fraction];
            a.dose_fraction = r.dose_fraction;
            ++a.count;
            a.psnr_lpet += r.psnr_lpet;
            a.ssim_lpet += r.ssim_lpet;
            a.psnr_pred += r.psnr_pred;
            a.ssim_pred += r.ssim_pred;
        }
        std::vector<DoseAggregate> out;
        for (auto& [_, a] : by) {
            a.psnr_lpet /= a.count;
            a.ssim_lpet /= a.count;
            a.psnr_pred /= a.count;
            a.ssim_pred /= a.count;
            out.push_back(a);
        }
        return out;
    }

    std::string to_csv() const
    {
        std::ostringstream os;
        os << "id,dose_fraction,psnr_lpet,ssim_lpet,psnr_pred,ssim_pred\n";
        char buf[256];
        for (const auto& r : rows) {
            if (!r.error.empty()) {
                os << r.id << ',' << format_number(r.dose_fraction) << ",nan,nan,nan,nan\n";
                continue;
            }
            std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g,%.9g,%.9g\n", r.id.c_str(),
                          format_number(r.dose_fraction).c_str(), r.psnr_lpet, r.ssim_lpet, r.psnr_pred, r.ssim_pred);
            os << buf;
        }
        return os.str();
    }

    json to_json() const
    {
        json rows_j = json::array();
        for (const auto& r : rows) {
            json j{{"id", r.id}, {"dose_fraction", r.dose_fraction}};
            if (r.error.empty()) {
                j["psnr_lpet"] = r.psnr_lpet;
                j["ssim_lpet"] = r.ssim_lpet;
                j["psnr_pred"] = r.psnr_pred;
                j["ssim_pred"] = r.ssim_pred;
            } else {
                j["error"] = r.error;
            }
            rows_j.push_back(j);
        }
        json agg = json::array();
        for (const auto& a : aggregates())
            agg.push_back(json{{"dose_fraction", a.dose_fraction},
                               {"count", a.count},
                               {"psnr_lpet", a.psnr_lpet},
                               {"ssim_lpet", a.ssim_lpet},
                               {"psnr_pred", a.psnr_pred},
                               {"ssim_pred", a.ssim_pred}});
        return json{{"metadata", metadata}, {"rows", rows_j}, {"per_dose", agg}};
    }

    static std::string format_number(double v)
    {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return buf;
    }
};

struct EvalOptions {
    int sample_steps = 50;
    std::uint64_t seed = 0;
    double pet_scale = 10.0;
    double ct_scale = 1000.0;
    int limit = 0;                      // 0 = all records
    std::optional<double> dose_fraction; // restrict to one dose
};

/// Denoises every record with K respaced steps and scores LPET and the
/// prediction against SPET. Sampling noise is keyed on the record seed, so
/// rows do not depend on evaluation order. Failing records become error
/// rows.
template <class T>
MetricsReport evaluate_records(const NoisePredictor<T>& model, const NoiseSchedule& base,
                               const std::vector<SampleRecord>& records, Dataset& data, const EvalOptions& opt,
                               const Logger& log = {})
{
    const RespacedSchedule sched = respace(base, opt.sample_steps);
    MetricsReport report;
    int done = 0;
    for (const auto& rec : records) {
        if (opt.dose_fraction && std::abs(rec.dose.fraction - *opt.dose_fraction) > 1e-9)
            continue;
        if (opt.limit > 0 && done >= opt.limit)
            break;
        ++done;
        MetricsRow row;
        row.id = rec.id;
        row.dose_fraction = rec.dose.fraction;
        try {
            const auto vols = data.load(rec);
            const Tensor<T> lpet = normalize_pet<T>(*vols.lpet, opt.pet_scale);
            const Tensor<T> ct = normalize_ct<T>(*vols.ct, opt.ct_scale);
            Rng rng(derive_seed(opt.seed, {RunConfig::kSampleStream, rec.seed}));
            const Tensor<float> pred = denormalize_pet(sample(lpet, ct, rec.dose, model, sched, rng), opt.pet_scale);
            const double range = reference_range(*vols.spet);
            row.psnr_lpet = psnr(*vols.lpet, *vols.spet, range);
            row.ssim_lpet = ssim(*vols.lpet, *vols.spet, range);
            row.psnr_pred = psnr(pred, *vols.spet, range);
            row.ssim_pred = ssim(pred, *vols.spet, range);
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        if (log) {
            char buf[200];
            if (row.error.empty())
                std::snprintf(buf, sizeof buf, "%s dose %.2f psnr %.3f -> %.3f ssim %.4f -> %.4f", row.id.c_str(),
                              row.dose_fraction, row.psnr_lpet, row.psnr_pred, row.ssim_lpet, row.ssim_pred);
            else
                std::snprintf(buf, sizeof buf, "%s failed: %s", row.id.c_str(), row.error.c_str());
            log(buf);
        }
        report.rows.push_back(std::move(row));
    }
    report.metadata = json{{"sample_steps", opt.sample_steps}, {"seed", opt.seed}, {"records", report.rows.size()}};
    return report;
}

inline void write_report(const fs::path& dir, const MetricsReport& r)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw IoError(dir, "cannot create output directory: " + ec.message());
    write_text_file(dir / "metrics.csv", r.to_csv());
    write_text_file(dir / "metrics.json", r.to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationCell {
    double psnr_pred = 0;
    double ssim_pred = 0;
    double psnr_lpet = 0;
    double ssim_lpet = 0;
    int seeds = 0;
};

struct AblationReport {
    std::vector<double> fractions;
    // variant -> dose -> mean over seeds
    std::map<Variant, std::map<double, AblationCell>> table;
    // variant -> seed -> per-dose aggregates
    std::map<Variant, std::map<std::uint64_t, std::vector<DoseAggregate>>> per_seed;

    std::string to_csv() const
    {
        std::ostringstream os;
        os << "variant,dose_fraction,psnr_pred,ssim_pred,psnr_lpet,ssim_lpet,seeds\n";
        char buf[256];
        for (Variant v : all_variants()) {
            const auto it = table.find(v);
            if (it == table.end())
                continue;
            for (const auto& [d, c] : it->second) {
                std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g,%.9g,%.9g,%d\n", to_string(v).c_str(),
                              MetricsReport::format_number(d).c_str(), c.psnr_pred, c.ssim_pred, c.psnr_lpet,
                              c.ssim_lpet, c.seeds);
                os << buf;
            }
        }
        return os.str();
    }

    /// Side-by-side table: one row per variant, PSNR/SSIM per dose.
    std::string to_table() const
    {
        std::ostringstream os;
        char buf[64];
        os << "| variant |";
        for (double d : fractions) {
            std::snprintf(buf, sizeof buf, " %g%% PSNR | %g%% SSIM |", d * 100, d * 100);
            os << buf;
        }
        os << "\n|---|";
        for (std::size_t i = 0; i < fractions.size(); ++i)
            os << "---|---|";
        os << "\n";
        auto row = [&](const std::string& name, auto&& cell) {
            os << "| " << name << " |";
            for (double d : fractions) {
                const auto [p, s] = cell(d);
                std::snprintf(buf, sizeof buf, " %.3f | %.4f |", p, s);
                os << buf;
            }
            os << "\n";
        };
        if (!table.empty()) {
            const auto& any = table.begin()->second;
            row("LPET", [&](double d) {
                const auto& c = any.at(d);
                return std::pair{c.psnr_lpet, c.ssim_lpet};
            });
        }
        for (Variant v : all_variants()) {
            const auto it = table.find(v);
            if (it != table.end())
                row(to_string(v), [&](double d) {
                    const auto& c = it->second.at(d);
                    return std::pair{c.psnr_pred, c.ssim_pred};
                });
        }
        return os.str();
    }
};

struct AblationOptions {
    std::vector<Variant> variants = all_variants();
};

/// Trains and evaluates every variant for every ablation seed on one
/// dataset; batches and sampling noise are shared across variants.
inline AblationReport ablate(const RunConfig& base, Dataset& data, const fs::path& out_dir, const Logger& log = {},
                             const AblationOptions& opt = {})
{
    base.validate();
    AblationReport rep;
    std::vector<SampleRecord> test = data.split(Split::test);
    require(!test.empty(), "dataset has no test records");
    for (Variant v : opt.variants) {
        for (std::uint64_t seed : base.ablation_seeds) {
            RunConfig cfg = base;
            cfg.variant = v;
            cfg.seed = seed;
            Denoiser<float> net(cfg.effective_denoiser());
            const fs::path run_dir =
                out_dir.empty() ? fs::path{} : out_dir / (to_string(v) + "_seed" + std::to_string(seed));
            if (log)
                log("ablation: training " + to_string(v) + " seed " + std::to_string(seed));
            train_model(net, cfg, data, run_dir.empty() ? fs::path{} : run_dir / "checkpoint", log);
            EvalOptions eo;
            eo.sample_steps = cfg.sample_steps;
            eo.seed = seed;
            eo.pet_scale = cfg.pet_scale;
            eo.ct_scale = cfg.ct_scale;
            eo.limit = cfg.eval_limit;
            const MetricsReport mr = evaluate_records<float>(net.predictor(), cosine_schedule(cfg.diffusion_steps), test,
                                                             data, eo, log);
            if (!run_dir.empty())
                write_report(run_dir, mr);
            const auto aggs = mr.aggregates();
            rep.per_seed[v][seed] = aggs;
            for (const auto& a : aggs) {
                auto& c = rep.table[v][a.dose_fraction];
                c.psnr_pred += a.psnr_pred;
                c.ssim_pred += a.ssim_pred;
                c.psnr_lpet += a.psnr_lpet;
                c.ssim_lpet += a.ssim_lpet;
                ++c.seeds;
            }
        }
    }
    for (auto& [_, doses] : rep.table)
        for (auto& [d, c] : doses) {
            c.psnr_pred /= c.seeds;
            c.ssim_pred /= c.seeds;
            c.psnr_lpet /= c.seeds;
            c.ssim_lpet /= c.seeds;
        }
    if (!rep.table.empty())
        for (const auto& [d, _] : rep.table.begin()->second)
            rep.fractions.push_back(d);
    if (!out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        write_text_file(out_dir / "ablation.csv", rep.to_csv());
        write_text_file(out_dir / "ablation.md", rep.to_table());
    }
    return rep;
}

} // namespace dosediff
