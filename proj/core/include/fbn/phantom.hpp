#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "fbn/volume.hpp"

namespace fbn {

// Closed interval sampled uniformly; lo == hi pins the parameter.
struct Range {
    double lo = 0.0;
    double hi = 0.0;
    Range() = default;
    Range(double l, double h) : lo(l), hi(h) {}
};

// Parameters of one synthetic case. Mismatch-positive phantoms mimic the
// T2-FLAIR mismatch sign (homogeneous bright core on T2, suppressed core with
// a hyperintense rim on FLAIR, sharp margins); mismatch-negative phantoms get
// heterogeneous T2/FLAIR cores drawn from the same distribution and a blurred
// boundary.
struct PhantomSpec {
    std::array<std::int64_t, 3> dims{32, 32, 32};
    std::array<double, 3> tumor_center{16, 16, 16};  // voxel coordinates (z,y,x)
    std::array<double, 3> tumor_radii{7, 7, 7};      // ellipsoid semi-axes, voxels
    bool mismatch = false;
    double mismatch_contrast = 1.5;  // delta: signal gap in base-signal units
    double noise_sigma = 0.0;
    double boundary_sharpness = 12.0;  // edge falloff steepness (higher = sharper)
    double rim_thickness = 2.0;        // voxels
    std::uint64_t seed = 0;
};

struct DatasetConfig {
    int n_cases = 20;
    double mutant_fraction = 0.3;
    std::array<std::int64_t, 3> dims{32, 32, 32};
    Range tumor_radius{5.0, 8.0};
    double center_jitter = 3.0;  // voxels, per axis
    Range mismatch_contrast{1.5, 1.5};
    double noise_sigma = 0.5;
    Range sharpness_mutant{10.0, 14.0};
    Range sharpness_wildtype{2.0, 4.0};
    double rim_thickness = 2.0;
    std::uint64_t master_seed = 0;
};

// Deterministic per spec.seed. Throws TumorOutOfBounds when the ellipsoid does
// not fit inside the volume and ConfigError on invalid parameters.
Case generate_phantom(const PhantomSpec& spec);

// Writes n_cases bundles plus manifest.csv under out_dir; class counts follow
// round(mutant_fraction * n). Bundle paths in the manifest are relative to
// out_dir.
Manifest generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir);

// Independent check of the signal the cross-modality stream must detect:
// mean(T2|core) - mean(FLAIR|core) after z-scoring each sequence over its
// nonzero voxels. Throws EmptyRegion when the mask has no core voxels.
double mismatch_oracle(const Case& c);

}  // namespace fbn
