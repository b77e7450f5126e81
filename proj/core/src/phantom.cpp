#include "fbn/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fbn/rng.hpp"

namespace fbn {

namespace {

double sample(Rng& rng, const Range& r) { return r.lo >= r.hi ? r.lo : rng.uniform(r.lo, r.hi); }

// One pass of a 3-tap box filter along each axis, edges clamped. Two passes
// give the wildtype core its smooth heterogeneous texture.
void box_blur3(std::vector<double>& buf, const std::array<std::int64_t, 3>& dims) {
    const std::int64_t D = dims[0], H = dims[1], W = dims[2];
    std::vector<double> tmp(buf.size());
    auto idx = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        return static_cast<std::size_t>((z * H + y) * W + x);
    };
    auto clampi = [](std::int64_t i, std::int64_t n) { return std::clamp<std::int64_t>(i, 0, n - 1); };
    for (int axis = 0; axis < 3; ++axis) {
        for (std::int64_t z = 0; z < D; ++z)
            for (std::int64_t y = 0; y < H; ++y)
                for (std::int64_t x = 0; x < W; ++x) {
                    double acc = 0.0;
                    for (int o = -1; o <= 1; ++o) {
                        std::int64_t zz = z, yy = y, xx = x;
                        if (axis == 0) zz = clampi(z + o, D);
                        if (axis == 1) yy = clampi(y + o, H);
                        if (axis == 2) xx = clampi(x + o, W);
                        acc += buf[idx(zz, yy, xx)];
                    }
                    tmp[idx(z, y, x)] = acc / 3.0;
                }
        buf.swap(tmp);
    }
}

struct RegionOffsets {
    double core, rim, edema;
};

// Tumor signal offsets per sequence, in units of mismatch_contrast.
struct SignalModel {
    RegionOffsets t1, t1c, t2, flair;
};

SignalModel mutant_model() {
    return SignalModel{
        /*t1=*/{-0.4, -0.2, -0.1},
        /*t1c=*/{-0.2, 0.8, 0.0},
        /*t2=*/{1.0, 0.6, 0.35},     // homogeneous bright core
        /*flair=*/{-1.0, 0.9, 0.35}, // suppressed core, hyperintense rim
    };
}

SignalModel wildtype_model() {
    // T2 and FLAIR share one distribution; heterogeneity is added separately.
    return SignalModel{
        /*t1=*/{-0.3, -0.15, -0.05},
        /*t1c=*/{0.1, 0.6, 0.0},
        /*t2=*/{0.5, 0.4, 0.25},
        /*flair=*/{0.5, 0.4, 0.25},
    };
}

double region_offset(const RegionOffsets& r, int label) {
    switch (label) {
        case 1: return r.core;
        case 2: return r.rim;
        default: return r.edema;
    }
}

}  // namespace

Case generate_phantom(const PhantomSpec& spec) {
    const auto& dims = spec.dims;
    for (auto d : dims)
        if (d < 8) raise(ErrorCode::ConfigError, "phantom dims must be >= 8 voxels");
    for (double r : spec.tumor_radii)
        if (r < 2.0) raise(ErrorCode::ConfigError, "tumor radii must be >= 2 voxels");
    if (spec.mismatch && spec.mismatch_contrast <= 0.0)
        raise(ErrorCode::ConfigError, "mismatch_contrast must be > 0 for mismatch phantoms");
    if (spec.noise_sigma < 0.0) raise(ErrorCode::ConfigError, "noise_sigma must be >= 0");
    for (int a = 0; a < 3; ++a) {
        if (spec.tumor_center[a] - spec.tumor_radii[a] < 0.0 ||
            spec.tumor_center[a] + spec.tumor_radii[a] > static_cast<double>(dims[a] - 1))
            raise(ErrorCode::TumorOutOfBounds, "tumor ellipsoid extends outside the volume");
    }

    const std::int64_t D = dims[0], H = dims[1], W = dims[2];
    const std::int64_t n = D * H * W;

    Rng rng(spec.seed);

    // Shared low-frequency gain field (same for all sequences, as a scanner
    // bias field would be for one acquisition).
    const double gz = rng.uniform(-0.2, 0.2);
    const double gy = rng.uniform(-0.2, 0.2);
    const double gx = rng.uniform(-0.2, 0.2);
    const double gs = rng.uniform(0.0, 0.1);
    const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);

    // Heterogeneous core texture for mismatch-negative phantoms: smoothed
    // white noise, one independent field per sequence.
    std::array<std::vector<double>, 4> texture;
    if (!spec.mismatch) {
        for (int s = 0; s < kNumSequences; ++s) {
            texture[s].resize(static_cast<std::size_t>(n));
            for (auto& t : texture[s]) t = rng.uniform(-1.0, 1.0);
            box_blur3(texture[s], dims);
            box_blur3(texture[s], dims);
            // Smoothing shrinks the amplitude; rescale to unit max-abs.
            double mx = 0.0;
            for (double t : texture[s]) mx = std::max(mx, std::abs(t));
            if (mx > 0)
                for (auto& t : texture[s]) t /= mx;
        }
    }

    const SignalModel model = spec.mismatch ? mutant_model() : wildtype_model();
    const std::array<const RegionOffsets*, 4> offsets{&model.t1, &model.t1c, &model.t2,
                                                      &model.flair};

    // Region radii in normalized ellipsoid units.
    const double mean_radius =
        (spec.tumor_radii[0] + spec.tumor_radii[1] + spec.tumor_radii[2]) / 3.0;
    const double rho_rim = 0.8;
    const double rho_core = std::max(0.2, rho_rim - spec.rim_thickness / mean_radius);
    const double k = spec.boundary_sharpness;
    // Falloff is exactly 1 through the core so core statistics stay analytic;
    // beyond it a logistic tail (renormalized to be continuous at rho_core)
    // fades the tumor signal into tissue.
    const double falloff_norm = 1.0 + std::exp(k * (rho_core - 1.0));

    const std::array<double, 3> brain_center{(D - 1) / 2.0, (H - 1) / 2.0, (W - 1) / 2.0};
    const std::array<double, 3> brain_radii{0.45 * D, 0.45 * H, 0.45 * W};

    Case c;
    c.id = "phantom";
    c.idh_label = spec.mismatch ? 1 : 0;
    for (int s = 0; s < kNumSequences; ++s) c.sequences[s] = Volume(D, H, W);
    Volume mask(D, H, W);

    // Deterministic noise: one stream per sequence, consumed in voxel order.
    std::array<Rng, 4> noise_rngs{Rng(Rng::derive(spec.seed, 101)), Rng(Rng::derive(spec.seed, 102)),
                                  Rng(Rng::derive(spec.seed, 103)), Rng(Rng::derive(spec.seed, 104))};

    for (std::int64_t z = 0; z < D; ++z) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const std::size_t i = static_cast<std::size_t>((z * H + y) * W + x);

                const double bz = (z - brain_center[0]) / brain_radii[0];
                const double by = (y - brain_center[1]) / brain_radii[1];
                const double bx = (x - brain_center[2]) / brain_radii[2];
                const bool in_brain = bz * bz + by * by + bx * bx <= 1.0;
                if (!in_brain) continue;  // background stays exactly zero

                const double tz = (z - spec.tumor_center[0]) / spec.tumor_radii[0];
                const double ty = (y - spec.tumor_center[1]) / spec.tumor_radii[1];
                const double tx = (x - spec.tumor_center[2]) / spec.tumor_radii[2];
                const double rho = std::sqrt(tz * tz + ty * ty + tx * tx);

                int label = 0;
                if (rho <= rho_core)
                    label = 1;
                else if (rho <= rho_rim)
                    label = 2;
                else if (rho <= 1.0)
                    label = 3;
                mask.voxels[i] = static_cast<float>(label);

                double weight;
                if (rho <= rho_core)
                    weight = 1.0;
                else
                    weight = falloff_norm / (1.0 + std::exp(k * (rho - 1.0)));

                const double gain = 1.0 + gz * (z / double(D) - 0.5) + gy * (y / double(H) - 0.5) +
                                    gx * (x / double(W) - 0.5) +
                                    gs * std::sin(2.0 * 3.14159265358979323846 *
                                                      (z + y + x) / double(D + H + W) +
                                                  phase);

                for (int s = 0; s < kNumSequences; ++s) {
                    double value = gain;
                    if (weight > 1e-6) {
                        int region = label != 0 ? label : 3;  // beyond-mask tail uses edema offset
                        double off = region_offset(*offsets[s], region) * spec.mismatch_contrast;
                        if (!spec.mismatch && label != 0 &&
                            (s == int(Sequence::T2) || s == int(Sequence::Flair)))
                            off += 0.6 * spec.mismatch_contrast * texture[s][i];
                        value += weight * off;
                    }
                    if (spec.noise_sigma > 0.0) value += noise_rngs[s].normal(0.0, spec.noise_sigma);
                    c.sequences[s].voxels[i] = static_cast<float>(value);
                }
            }
        }
    }

    c.mask = std::move(mask);
    validate_case(c);
    return c;
}

Manifest generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.n_cases < 2)
        raise(ErrorCode::ConfigError, "dataset needs >= 2 cases (one per class)");
    if (cfg.mutant_fraction <= 0.0 || cfg.mutant_fraction >= 1.0)
        raise(ErrorCode::ConfigError, "mutant_fraction must be in (0,1)");

    const int n = cfg.n_cases;
    int n_mut = static_cast<int>(std::lround(cfg.mutant_fraction * n));
    n_mut = std::clamp(n_mut, 1, n - 1);

    // Deterministic shuffled label vector.
    std::vector<int> labels(static_cast<std::size_t>(n), 0);
    std::fill(labels.begin(), labels.begin() + n_mut, 1);
    Rng shuffle_rng(Rng::derive(cfg.master_seed, 0));
    for (int i = n - 1; i > 0; --i) {
        const auto j = static_cast<int>(shuffle_rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
        std::swap(labels[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)]);
    }

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) raise(ErrorCode::WriteError, "cannot create " + out_dir.string());

    Manifest manifest;
    for (int i = 0; i < n; ++i) {
        const bool mismatch = labels[static_cast<std::size_t>(i)] == 1;
        Rng rng(Rng::derive(cfg.master_seed, static_cast<std::uint64_t>(i) + 1));

        PhantomSpec spec;
        spec.dims = cfg.dims;
        spec.mismatch = mismatch;
        spec.mismatch_contrast = sample(rng, cfg.mismatch_contrast);
        spec.noise_sigma = cfg.noise_sigma;
        spec.boundary_sharpness =
            sample(rng, mismatch ? cfg.sharpness_mutant : cfg.sharpness_wildtype);
        spec.rim_thickness = cfg.rim_thickness;
        spec.seed = Rng::derive(cfg.master_seed, 0x70000000ull + static_cast<std::uint64_t>(i));

        for (int a = 0; a < 3; ++a) {
            spec.tumor_radii[a] = sample(rng, cfg.tumor_radius);
            const double jitter = rng.uniform(-cfg.center_jitter, cfg.center_jitter);
            spec.tumor_center[a] = (cfg.dims[a] - 1) / 2.0 + jitter;
            // Keep the ellipsoid inside the brain: clamp the radius to the
            // room the jittered center leaves (with a 2-voxel margin).
            const double room = std::min(spec.tumor_center[a],
                                         (cfg.dims[a] - 1) - spec.tumor_center[a]) -
                                2.0;
            spec.tumor_radii[a] = std::max(2.0, std::min(spec.tumor_radii[a], room));
        }

        Case c = generate_phantom(spec);
        char buf[16];
        std::snprintf(buf, sizeof(buf), "p%04d", i);
        c.id = buf;
        write_case(c, out_dir / c.id);

        ManifestRow row;
        row.case_id = c.id;
        row.bundle_path = c.id;  // relative to the manifest directory
        row.idh_label = c.idh_label;
        row.split_tag = "unassigned";
        manifest.rows.push_back(std::move(row));
    }

    write_manifest(manifest, out_dir / "manifest.csv");
    return manifest;
}

double mismatch_oracle(const Case& c) {
    if (!c.mask) raise(ErrorCode::EmptyRegion, "case has no mask");
    const Volume t2 = zscore_normalize(c.seq(Sequence::T2), NormalizeRegion::NonzeroVoxels);
    const Volume flair = zscore_normalize(c.seq(Sequence::Flair), NormalizeRegion::NonzeroVoxels);

    double sum = 0.0;
    std::int64_t count = 0;
    for (std::size_t i = 0; i < c.mask->voxels.size(); ++i) {
        if (c.mask->voxels[i] == 1.0f) {
            sum += static_cast<double>(t2.voxels[i]) - static_cast<double>(flair.voxels[i]);
            ++count;
        }
    }
    if (count == 0) raise(ErrorCode::EmptyRegion, "mask has no core voxels");
    return sum / static_cast<double>(count);
}

}  // namespace fbn
