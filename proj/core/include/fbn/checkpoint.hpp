#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fbn/nn.hpp"

namespace fbn {

// Checkpoints are single files: magic "FBNCKPT1", format version, an FNV-1a
// digest of the architecture signature, then each tensor as
// name / dims / little-endian float32 payload.

std::uint64_t fnv1a64(const std::string& s);

void save_checkpoint(const std::filesystem::path& path, const ParamRefs& params,
                     const std::string& signature);

struct LoadReport {
    std::vector<std::string> missing;     // wanted by the model, absent in the file
    std::vector<std::string> unexpected;  // present in the file, unknown to the model
    std::vector<std::string> mismatched;  // name matches, shape does not; kept init
    bool clean() const { return missing.empty() && unexpected.empty() && mismatched.empty(); }
};

// strict: signature digest and the full tensor set (names + shapes) must match
// exactly, or CheckpointMismatch is thrown. Non-strict loads the intersection
// and reports the rest; unmatched parameters keep their current values.
LoadReport load_checkpoint(const std::filesystem::path& path, const ParamRefs& params,
                           const std::string& signature, bool strict = true);

}  // namespace fbn
