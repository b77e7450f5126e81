#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fbn/errors.hpp"

namespace fbn {

// One scalar volume. Voxels are stored as 32-bit floats in [z][y][x] order,
// matching the on-disk raw format exactly so write/load round-trips are
// bitwise.
struct Volume {
    std::array<std::int64_t, 3> dims{0, 0, 0};   // (D, H, W)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm, informational
    std::vector<float> voxels;

    Volume() = default;
    Volume(std::int64_t d, std::int64_t h, std::int64_t w)
        : dims{d, h, w}, voxels(static_cast<std::size_t>(d * h * w), 0.0f) {}

    std::int64_t numel() const { return dims[0] * dims[1] * dims[2]; }

    float& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return voxels[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
    }
    float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return voxels[static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x)];
    }
};

enum class Sequence : int { T1 = 0, T1C = 1, T2 = 2, Flair = 3 };
inline constexpr std::array<const char*, 4> kSequenceNames{"t1", "t1c", "t2", "flair"};
inline constexpr int kNumSequences = 4;

// One subject: the four co-registered sequences plus optional tumor mask
// (labels 0 background, 1 core, 2 rim, 3 edema) and optional IDH label
// (1 mutant, 0 wildtype).
struct Case {
    std::string id;
    std::array<Volume, 4> sequences;
    std::optional<Volume> mask;
    std::optional<int> idh_label;

    const Volume& seq(Sequence s) const { return sequences[static_cast<int>(s)]; }
    Volume& seq(Sequence s) { return sequences[static_cast<int>(s)]; }
    std::array<std::int64_t, 3> dims() const { return sequences[0].dims; }
};

// Throws InvalidMask / ShapeError when the Case invariants do not hold.
void validate_case(const Case& c);

struct ManifestRow {
    std::string case_id;
    std::string bundle_path;
    std::optional<int> idh_label;
    std::string split_tag = "unassigned";
};

struct Manifest {
    std::vector<ManifestRow> rows;
    std::size_t size() const { return rows.size(); }
};

enum class NormalizeRegion { AllVoxels, NonzeroVoxels };

// --- case bundles -----------------------------------------------------------
//
// A bundle is a directory holding header.json plus one little-endian float32
// raw file per sequence (t1.raw, t1c.raw, t2.raw, flair.raw) and an optional
// uint8 mask.raw.

Case load_case(const std::filesystem::path& bundle_dir);
void write_case(const Case& c, const std::filesystem::path& bundle_dir);

// --- preprocessing ----------------------------------------------------------

// (v - mean) / std over the chosen region using the population standard
// deviation; degenerate inputs (std < 1e-8 or empty region) yield all zeros.
Volume zscore_normalize(const Volume& v, NormalizeRegion region);

// Fixed-size crop centered on the mask centroid (volume center when no
// nonempty mask), clamped inside the volume; axes smaller than the request are
// symmetrically zero-padded first. The same window is applied to every
// sequence and the mask.
Case crop_fixed(const Case& c, const std::array<std::int64_t, 3>& size);

// --- manifests --------------------------------------------------------------

Manifest load_manifest(const std::filesystem::path& csv_path);
void write_manifest(const Manifest& m, const std::filesystem::path& csv_path);

}  // namespace fbn
