#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "records.hpp"
#include "tensor.hpp"

namespace dosediff {

namespace fs = std::filesystem;
using json = nlohmann::json;

class IoError : public std::runtime_error {
public:
    IoError(const fs::path& path, const std::string& what)
        : std::runtime_error(path.string() + ": " + what)
    {
    }
};

inline fs::path sidecar_path(const fs::path& vol_path)
{
    return fs::path(vol_path.string() + ".json");
}

inline json meta_to_json(const VolumeMeta& m)
{
    json j;
    j["shape"] = m.shape;
    j["dtype"] = "f32le";
    j["voxel_size_mm"] = m.voxel_size_mm;
    j["modality"] = m.modality ? json(*m.modality == Modality::PET ? "PET" : "CT") : json(nullptr);
    j["dose_fraction"] = m.dose_fraction ? json(*m.dose_fraction) : json(nullptr);
    j["seed"] = m.seed ? json(*m.seed) : json(nullptr);
    return j;
}

inline VolumeMeta meta_from_json(const json& j)
{
    VolumeMeta m;
    m.shape = j.at("shape").get<Shape>();
    const auto dtype = j.at("dtype").get<std::string>();
    require(dtype == "f32le", "unsupported dtype '" + dtype + "'");
    if (j.contains("voxel_size_mm"))
        m.voxel_size_mm = j["voxel_size_mm"].get<std::array<double, 3>>();
    if (j.contains("modality") && !j["modality"].is_null()) {
        const auto s = j["modality"].get<std::string>();
        require(s == "PET" || s == "CT", "unknown modality '" + s + "'");
        m.modality = s == "PET" ? Modality::PET : Modality::CT;
    }
    if (j.contains("dose_fraction") && !j["dose_fraction"].is_null())
        m.dose_fraction = j["dose_fraction"].get<double>();
    if (j.contains("seed") && !j["seed"].is_null())
        m.seed = j["seed"].get<std::uint64_t>();
    return m;
}

inline void write_text_file(const fs::path& path, const std::string& text)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError(path, "cannot open for writing");
    os << text;
    if (!os)
        throw IoError(path, "write failed");
}

inline std::string read_text_file(const fs::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError(path, "cannot open for reading");
    return std::string(std::istreambuf_iterator<char>(is), {});
}

/// Writes raw little-endian float32 voxels (C-order) plus the JSON sidecar.
template <class T>
void write_volume(const fs::path& path, const Tensor<T>& v, VolumeMeta meta = {})
{
    static_assert(std::endian::native == std::endian::little, "f32le writer assumes a little-endian host");
    meta.shape = v.shape();
    std::vector<float> buf(v.values().begin(), v.values().end());
    {
        std::ofstream os(path, std::ios::binary);
        if (!os)
            throw IoError(path, "cannot open for writing");
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!os)
            throw IoError(path, "write failed");
    }
    write_text_file(sidecar_path(path), meta_to_json(meta).dump(2) + "\n");
}

inline VolumeMeta read_volume_meta(const fs::path& path)
{
    const auto side = sidecar_path(path);
    try {
        return meta_from_json(json::parse(read_text_file(side)));
    } catch (const json::exception& e) {
        throw IoError(side, std::string("malformed sidecar: ") + e.what());
    }
}

template <class T = float>
Tensor<T> read_volume(const fs::path& path, VolumeMeta* meta_out = nullptr)
{
    VolumeMeta meta = read_volume_meta(path);
    const std::size_t n = element_count(meta.shape);
    std::vector<float> buf(n);
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError(path, "cannot open for reading");
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<std::size_t>(is.gcount()) != n * sizeof(float))
        throw IoError(path, "truncated voxel data, expected " + std::to_string(n) + " floats");
    if (is.peek() != std::char_traits<char>::eof())
        throw IoError(path, "trailing bytes after voxel data");
    if (meta_out)
        *meta_out = meta;
    return Tensor<T>(meta.shape, std::vector<T>(buf.begin(), buf.end()));
}

inline json record_to_json(const SampleRecord& r)
{
    return json{{"id", r.id},
                {"lpet_path", r.lpet_path},
                {"spet_path", r.spet_path},
                {"ct_path", r.ct_path},
                {"dose", {{"fraction", r.dose.fraction}, {"seconds", r.dose.seconds()}}},
                {"seed", r.seed},
                {"split", to_string(r.split)},
                {"phantom_id", r.phantom_id}};
}

inline SampleRecord record_from_json(const json& j)
{
    SampleRecord r;
    r.id = j.at("id").get<std::string>();
    r.lpet_path = j.at("lpet_path").get<std::string>();
    r.spet_path = j.at("spet_path").get<std::string>();
    r.ct_path = j.at("ct_path").get<std::string>();
    r.dose = DoseLevel::from_fraction(j.at("dose").at("fraction").get<double>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.split = split_from_string(j.at("split").get<std::string>());
    r.phantom_id = j.value("phantom_id", 0);
    return r;
}

inline void write_manifest(const fs::path& path, const std::vector<SampleRecord>& records)
{
    json arr = json::array();
    for (const auto& r : records)
        arr.push_back(record_to_json(r));
    write_text_file(path, arr.dump(2) + "\n");
}

inline std::vector<SampleRecord> read_manifest(const fs::path& path)
{
    json arr;
    try {
        arr = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw IoError(path, std::string("malformed manifest: ") + e.what());
    }
    if (!arr.is_array())
        throw IoError(path, "manifest must be a JSON array");
    std::vector<SampleRecord> out;
    for (const auto& j : arr) {
        try {
            out.push_back(record_from_json(j));
        } catch (const std::exception& e) {
            throw IoError(path, std::string("invalid record: ") + e.what());
        }
    }
    return out;
}

} // namespace dosediff
