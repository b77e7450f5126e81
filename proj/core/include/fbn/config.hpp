#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fbn/interpret.hpp"
#include "fbn/model.hpp"
#include "fbn/phantom.hpp"
#include "fbn/trainer.hpp"

namespace fbn {

// Everything a run needs, declared in one JSON document with sections
// data / backbone / tafe / cmd / loss / train / metrics / occlusion.
struct RunConfig {
    // data
    std::string manifest;
    NormalizeRegion normalize = NormalizeRegion::NonzeroVoxels;
    DatasetConfig phantom;

    ModelConfig model;

    TrainConfig train;
    int folds = 5;
    int ablation_seeds = 5;

    // metrics
    double ci_level = 0.95;
    double threshold = 0.5;

    OcclusionConfig occlusion;
    Sequence overlay_sequence = Sequence::Flair;
    std::int64_t overlay_slice = -1;  // -1 picks the middle slice
    double overlay_alpha = 0.5;
};

// Full materialization, defaults and all; also the schema the parser checks
// documents against.
nlohmann::json config_to_json(const RunConfig& cfg);

// Merge doc and `key=value` overrides over the defaults. Unknown keys and
// type mismatches raise ConfigError naming the dotted path.
RunConfig config_from_json(const nlohmann::json& doc,
                           const std::vector<std::string>& overrides = {});

// Same, reading the document from disk. An empty path means defaults only.
RunConfig parse_config(const std::filesystem::path& path,
                       const std::vector<std::string>& overrides = {});

}  // namespace fbn
