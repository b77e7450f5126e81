#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "fbn/model.hpp"
#include "fbn/volume.hpp"

namespace fbn {

enum class FillPolicy { Zero, VolumeMean };

// Occlusion sensitivity: slide a box over the volume, blank it out in every
// sequence, and watch the predicted probability of the true class move.
struct OcclusionConfig {
    std::array<std::int64_t, 3> mask_size{16, 16, 16};
    double overlap = 0.5;  // fraction shared by neighbouring placements
    FillPolicy fill = FillPolicy::Zero;
    double smooth_sigma = 1.0;           // voxels; 0 disables smoothing
    std::optional<int> target;           // class to track; default ground truth

    std::array<std::int64_t, 3> stride() const;
    void validate(const std::array<std::int64_t, 3>& dims) const;
};

// Placement offsets along one axis: 0, stride, 2*stride, ... with the final
// offset clamped so the mask ends exactly at the boundary. Covers every voxel
// whenever stride <= mask.
std::vector<std::int64_t> occlusion_grid(std::int64_t dim, std::int64_t mask,
                                         std::int64_t stride);

// Unoccluded probability of class `cls` for a single case.
double case_probability(Model& model, const Case& c, int cls);

// Occluded target-class probability accumulated per voxel as the mean over
// every placement covering that voxel. Placements are independent; jobs > 1
// evaluates them on parallel model replicas.
Volume occlusion_raw(Model& model, const Case& c, const OcclusionConfig& cfg,
                     int jobs = 1);

// Separable Gaussian blur with kernel radius ceil(3*sigma); taps falling
// outside the volume are dropped and the kernel renormalized. sigma <= 0 is
// the identity.
Volume gaussian_blur3(const Volume& v, double sigma);

// Blur, invert (low occluded probability -> high saliency), min-max normalize
// to [0,1]. A constant map has nothing to rank and comes back all zeros.
Volume occlusion_postprocess(const Volume& raw, const OcclusionConfig& cfg,
                             double baseline_prob);

// Grayscale anatomical slice with the saliency alpha-blended on top through a
// hot colormap (zero saliency stays fully transparent). Writes an 8-bit RGB
// PNG plus the full saliency volume (saliency.raw + saliency.json) next to it.
void export_overlay(const Volume& saliency, const Case& c, Sequence seq,
                    std::int64_t slice_index, double alpha,
                    const std::filesystem::path& out_png);

}  // namespace fbn
