#pragma once

#include <string>

#include "denoiser.hpp"
#include "volume_io.hpp"

namespace dosediff {

inline std::string to_string(DaaOrder o) { return o == DaaOrder::channel_first ? "channel_first" : "spatial_first"; }

inline DaaOrder daa_order_from_string(const std::string& s)
{
    if (s == "channel_first")
        return DaaOrder::channel_first;
    if (s == "spatial_first")
        return DaaOrder::spatial_first;
    throw std::invalid_argument("unknown daa_order '" + s + "'");
}

inline json denoiser_config_to_json(const DenoiserConfig& c)
{
    return json{{"base_channels", c.base_channels},
                {"channel_mult", c.channel_mult},
                {"time_dim", c.time_dim},
                {"dose_dim", c.dose_dim},
                {"se_reduction", c.se_reduction},
                {"norm_groups", c.norm_groups},
                {"use_hwa", c.use_hwa},
                {"use_daa", c.use_daa},
                {"daa_bottleneck", c.daa_bottleneck},
                {"daa_decoder", c.daa_decoder},
                {"daa_order", to_string(c.daa_order)},
                {"zero_init_head", c.zero_init_head},
                {"init_seed", c.init_seed}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline DenoiserConfig denoiser_config_from_json(const json& j)
{
    DenoiserConfig c;
    for (const auto& [key, val] : j.items()) {
        if (key == "base_channels")
            c.base_channels = val.get<int>();
        else if (key == "channel_mult")
            c.channel_mult = val.get<std::vector<int>>();
        else if (key == "time_dim")
            c.time_dim = val.get<int>();
        else if (key == "dose_dim")
            c.dose_dim = val.get<int>();
        else if (key == "se_reduction")
            c.se_reduction = val.get<int>();
        else if (key == "norm_groups")
            c.norm_groups = val.get<int>();
        else if (key == "use_hwa")
            c.use_hwa = val.get<bool>();
        else if (key == "use_daa")
            c.use_daa = val.get<bool>();
        else if (key == "daa_bottleneck")
            c.daa_bottleneck = val.get<bool>();
        else if (key == "daa_decoder")
            c.daa_decoder = val.get<bool>();
        else if (key == "daa_order")
            c.daa_order = daa_order_from_string(val.get<std::string>());
        else if (key == "zero_init_head")
            c.zero_init_head = val.get<bool>();
        else if (key == "init_seed")
            c.init_seed = val.get<std::uint64_t>();
        else
            throw std::invalid_argument("unknown denoiser config key '" + key + "'");
    }
    c.validate();
    return c;
}

struct CheckpointInfo {
    DenoiserConfig config;
    int diffusion_steps = 1000;
    std::string schedule = "cosine";
    std::string variant = "full";
    long train_steps = 0;
};

inline constexpr int kCheckpointFormat = 1;

/// Writes <dir>/checkpoint.json and one <name>.vol per parameter tensor.
template <class T>
void save_checkpoint(const fs::path& dir, const Denoiser<T>& net, CheckpointInfo info)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw IoError(dir, "cannot create checkpoint directory: " + ec.message());
    info.config = net.config();
    json tensors = json::array();
    for (const auto& [name, p] : net.params()) {
        const std::string file = name + ".vol";
        VolumeMeta meta;
        meta.shape = p.value().shape();
        write_volume(dir / file, p.value(), meta);
        tensors.push_back(json{{"name", name}, {"file", file}, {"shape", p.value().shape()}});
    }
    const json j{{"format", kCheckpointFormat},
                 {"config", denoiser_config_to_json(info.config)},
                 {"schedule", {{"kind", info.schedule}, {"steps", info.diffusion_steps}}},
                 {"variant", info.variant},
                 {"train_steps", info.train_steps},
                 {"parameter_count", net.params().element_count()},
                 {"tensors", tensors}};
    write_text_file(dir / "checkpoint.json", j.dump(2) + "\n");
}

inline CheckpointInfo read_checkpoint_info(const fs::path& dir)
{
    const fs::path path = dir / "checkpoint.json";
    try {
        const json j = json::parse(read_text_file(path));
        if (j.at("format").get<int>() != kCheckpointFormat)
            throw IoError(path, "unsupported checkpoint format");
        CheckpointInfo info;
        info.config = denoiser_config_from_json(j.at("config"));
        info.schedule = j.at("schedule").at("kind").get<std::string>();
        info.diffusion_steps = j.at("schedule").at("steps").get<int>();
        info.variant = j.at("variant").get<std::string>();
        info.train_steps = j.value("train_steps", 0L);
        return info;
    } catch (const json::exception& e) {
        throw IoError(path, std::string("malformed checkpoint: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw IoError(path, e.what());
    }
}

/// Rebuilds the network from the stored config and overwrites every
/// parameter; the stored tensor set must match the architecture exactly.
template <class T>
Denoiser<T> load_checkpoint(const fs::path& dir, CheckpointInfo* info_out = nullptr)
{
    const CheckpointInfo info = read_checkpoint_info(dir);
    Denoiser<T> net(info.config);
    const fs::path path = dir / "checkpoint.json";
    const json j = json::parse(read_text_file(path));
    const auto& tensors = j.at("tensors");
    if (tensors.size() != net.params().size())
        throw IoError(path, "checkpoint lists " + std::to_string(tensors.size()) + " tensors, network has " +
                                std::to_string(net.params().size()));
    for (const auto& t : tensors) {
        const std::string name = t.at("name").get<std::string>();
        if (!net.params().contains(name))
            throw IoError(path, "unexpected tensor '" + name + "'");
        Var<T> p = net.params().get(name);
        Tensor<float> stored = read_volume<float>(dir / t.at("file").get<std::string>());
        if (stored.shape() != p.value().shape())
            throw IoError(dir / t.at("file").get<std::string>(), "shape " + to_string(stored.shape()) +
                                                                     " does not match " + to_string(p.value().shape()));
        p.mutable_value() = stored.template cast<T>();
    }
    if (info_out)
        *info_out = info;
    return net;
}

} // namespace dosediff
