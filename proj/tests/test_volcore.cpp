#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace dosediff;
namespace fs = std::filesystem;

namespace {

double oracle_psnr(const Tensor<double>& a, const Tensor<double>& b, double range)
{
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += (a[i] - b[i]) * (a[i] - b[i]);
    return 10 * std::log10(range * range / (s / a.size()));
}

// Direct windowed SSIM: explicit 7^3 Gaussian weights at every valid
// window position, no separable filtering.
double oracle_ssim(const Tensor<double>& a, const Tensor<double>& b, double range)
{
    const int win = 7;
    const double sigma = 1.5;
    double w1[win], wsum = 0;
    for (int i = 0; i < win; ++i) {
        w1[i] = std::exp(-((i - 3) * (i - 3)) / (2 * sigma * sigma));
        wsum += w1[i];
    }
    for (double& v : w1)
        v /= wsum;
    const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
    const int D = a.depth(), H = a.height(), W = a.width();
    double total = 0;
    int count = 0;
    for (int z = 0; z + win <= D; ++z)
        for (int y = 0; y + win <= H; ++y)
            for (int x = 0; x + win <= W; ++x) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int k = 0; k < win; ++k)
                    for (int j = 0; j < win; ++j)
                        for (int i = 0; i < win; ++i) {
                            const double w = w1[k] * w1[j] * w1[i];
                            const double p = a.at(0, z + k, y + j, x + i), q = b.at(0, z + k, y + j, x + i);
                            mx += w * p;
                            my += w * q;
                            sxx += w * p * p;
                            syy += w * q * q;
                            sxy += w * p * q;
                        }
                const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
                total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
    return total / count;
}

fs::path temp_dir(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("dosediff_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST(Tensor, ShapeAndIndexing)
{
    Tensor<float> t({2, 8, 8, 8}, 1.5f);
    EXPECT_EQ(t.size(), 2u * 512u);
    EXPECT_EQ(t.channels(), 2);
    t.at(1, 2, 3, 4) = 7;
    EXPECT_EQ(t[512 + 2 * 64 + 3 * 8 + 4], 7);
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), std::invalid_argument);
}

TEST(Tensor, VolumeInvariants)
{
    Tensor<float> ok({1, 16, 16, 16});
    EXPECT_NO_THROW(require_valid_volume(ok, 3, "v"));
    EXPECT_THROW(require_valid_volume(Tensor<float>({1, 12, 16, 16}), 3, "v"), std::invalid_argument);
    EXPECT_THROW(require_valid_volume(Tensor<float>({1, 4, 4, 4}), 1, "v"), std::invalid_argument);
    Tensor<float> bad({1, 8, 8, 8});
    bad[3] = std::nanf("");
    EXPECT_THROW(require_valid_volume(bad, 1, "v"), std::invalid_argument);
}

TEST(Psnr, IdenticalIsCapped)
{
    Rng rng(1);
    const auto a = rng.normal_tensor<double>({1, 8, 8, 8});
    EXPECT_DOUBLE_EQ(psnr(a, a, 1.0), 100.0);
}

TEST(Psnr, ConstantOffset)
{
    Tensor<double> ref({1, 8, 8, 8}, 0.3);
    Tensor<double> pred({1, 8, 8, 8}, 0.4);
    EXPECT_NEAR(psnr(pred, ref, 1.0), 20.0, 1e-9);
}

TEST(Psnr, MatchesOracle)
{
    Rng rng(7);
    const auto a = rng.normal_tensor<double>({1, 16, 16, 16});
    const auto b = rng.normal_tensor<double>({1, 16, 16, 16});
    EXPECT_NEAR(psnr(a, b, 4.0), oracle_psnr(a, b, 4.0), 1e-6);
}

TEST(Psnr, SymmetricAndShiftInvariant)
{
    Rng rng(3);
    auto a = rng.normal_tensor<double>({1, 8, 8, 8});
    auto b = rng.normal_tensor<double>({1, 8, 8, 8});
    EXPECT_DOUBLE_EQ(psnr(a, b, 2.0), psnr(b, a, 2.0));
    Tensor<double> a2 = a, b2 = b;
    for (std::size_t i = 0; i < a.size(); ++i) {
        a2[i] += 5.0;
        b2[i] += 5.0;
    }
    EXPECT_NEAR(psnr(a2, b2, 2.0), psnr(a, b, 2.0), 1e-9);
}

TEST(Psnr, DecreasesWithNoise)
{
    Rng rng(4);
    const auto ref = rng.uniform_tensor<double>({1, 16, 16, 16}, 0, 1);
    const auto noise = rng.normal_tensor<double>(ref.shape());
    double prev = 1e9;
    for (double amp : {0.01, 0.1, 1.0}) {
        Tensor<double> p = ref;
        for (std::size_t i = 0; i < p.size(); ++i)
            p[i] += amp * noise[i];
        const double v = psnr(p, ref);
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST(Psnr, Errors)
{
    Tensor<double> a({1, 8, 8, 8}), b({1, 8, 8, 16});
    EXPECT_THROW(psnr(a, b, 1.0), std::invalid_argument);
    EXPECT_THROW(psnr(a, a, 0.0), std::invalid_argument);
    Tensor<double> c = a;
    c[0] = INFINITY;
    EXPECT_THROW(psnr(c, a, 1.0), std::invalid_argument);
}

TEST(Ssim, IdentityIsOne)
{
    Rng rng(5);
    const auto a = rng.normal_tensor<double>({1, 12, 12, 12});
    EXPECT_NEAR(ssim(a, a, 3.0), 1.0, 1e-12);
}

TEST(Ssim, ConstantLuminanceOnly)
{
    const double c1v = 0.3, c2v = 0.7;
    Tensor<double> a({1, 8, 8, 8}, c1v), b({1, 8, 8, 8}, c2v);
    const double C1 = std::pow(0.01, 2);
    EXPECT_NEAR(ssim(a, b, 1.0), (2 * c1v * c2v + C1) / (c1v * c1v + c2v * c2v + C1), 1e-12);
}

TEST(Ssim, MatchesDirectOracle)
{
    Rng rng(11);
    const auto a = rng.normal_tensor<double>({1, 16, 16, 16});
    auto b = a;
    const auto n = rng.normal_tensor<double>(a.shape());
    for (std::size_t i = 0; i < b.size(); ++i)
        b[i] += 0.5 * n[i];
    EXPECT_NEAR(ssim(a, b, 6.0), oracle_ssim(a, b, 6.0), 1e-5);
    const auto c = rng.normal_tensor<double>(a.shape());
    EXPECT_NEAR(ssim(a, c, 6.0), oracle_ssim(a, c, 6.0), 1e-5);
}

TEST(Ssim, BoundedAboveByOne)
{
    Rng rng(12);
    for (int k = 0; k < 5; ++k) {
        const auto a = rng.normal_tensor<double>({1, 8, 8, 8});
        const auto b = rng.normal_tensor<double>({1, 8, 8, 8});
        EXPECT_LE(ssim(a, b, 1.0), 1.0);
    }
}

TEST(Ssim, RejectsSmallVolume)
{
    Tensor<double> a({1, 6, 8, 8});
    EXPECT_THROW(ssim(a, a, 1.0), std::invalid_argument);
}

TEST(DoseLevel, FractionAndSeconds)
{
    EXPECT_DOUBLE_EQ(DoseLevel::from_fraction(0.02).seconds(), 6.0);
    EXPECT_DOUBLE_EQ(DoseLevel::from_fraction(0.5).seconds(), 150.0);
    EXPECT_THROW(DoseLevel::from_fraction(0.0), std::invalid_argument);
    EXPECT_THROW(DoseLevel::from_fraction(1.5), std::invalid_argument);
    EXPECT_TRUE(is_protocol_fraction(0.10));
    EXPECT_FALSE(is_protocol_fraction(0.3));
}

TEST(VolumeIo, RoundTripWithSidecar)
{
    const auto dir = temp_dir("io");
    Rng rng(2);
    const auto v = rng.normal_tensor<float>({1, 8, 8, 8});
    VolumeMeta meta;
    meta.voxel_size_mm = {2, 2, 3};
    meta.modality = Modality::PET;
    meta.dose_fraction = 0.05;
    meta.seed = 42;
    write_volume(dir / "a.vol", v, meta);
    EXPECT_EQ(fs::file_size(dir / "a.vol"), 512u * 4u);
    VolumeMeta back;
    const auto r = read_volume<float>(dir / "a.vol", &back);
    EXPECT_EQ(r, v);
    EXPECT_EQ(back.shape, (Shape{1, 8, 8, 8}));
    EXPECT_EQ(back.modality, Modality::PET);
    EXPECT_DOUBLE_EQ(*back.dose_fraction, 0.05);
    EXPECT_EQ(*back.seed, 42u);

    const json side = json::parse(read_text_file(dir / "a.vol.json"));
    EXPECT_EQ(side.at("dtype"), "f32le");
    EXPECT_EQ(side.at("modality"), "PET");
    EXPECT_EQ(side.at("shape"), json::array({1, 8, 8, 8}));
}

TEST(VolumeIo, NullMetadataFields)
{
    const auto dir = temp_dir("io_null");
    write_volume(dir / "b.vol", Tensor<float>({1, 8, 8, 8}));
    const json side = json::parse(read_text_file(dir / "b.vol.json"));
    EXPECT_TRUE(side.at("dose_fraction").is_null());
    EXPECT_TRUE(side.at("seed").is_null());
}

TEST(VolumeIo, TruncatedFileReportsPath)
{
    const auto dir = temp_dir("io_trunc");
    write_volume(dir / "c.vol", Tensor<float>({1, 8, 8, 8}));
    fs::resize_file(dir / "c.vol", 100);
    try {
        read_volume<float>(dir / "c.vol");
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("c.vol"), std::string::npos);
    }
    EXPECT_THROW(read_volume<float>(dir / "missing.vol"), IoError);
}

TEST(Manifest, RoundTrip)
{
    const auto dir = temp_dir("manifest");
    SampleRecord r;
    r.id = "p0001_d002";
    r.lpet_path = "p0001_lpet_002.vol";
    r.spet_path = "p0001_spet.vol";
    r.ct_path = "p0001_ct.vol";
    r.dose = DoseLevel::from_fraction(0.02);
    r.seed = 99;
    r.split = Split::val;
    r.phantom_id = 1;
    write_manifest(dir / "manifest.json", {r, r});
    const auto back = read_manifest(dir / "manifest.json");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].id, r.id);
    EXPECT_EQ(back[0].split, Split::val);
    EXPECT_DOUBLE_EQ(back[0].dose.fraction, 0.02);
    EXPECT_EQ(back[0].seed, 99u);
    const json j = json::parse(read_text_file(dir / "manifest.json"));
    EXPECT_DOUBLE_EQ(j[0]["dose"]["seconds"].get<double>(), 6.0);
}
