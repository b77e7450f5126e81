#include "fbn/config.hpp"

#include <fstream>

namespace fbn {

using nlohmann::json;

namespace {

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

std::string type_name(const json& v) {
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
    if (v.is_number_float()) return "number";
    if (v.is_string()) return "string";
    if (v.is_array()) return "array";
    if (v.is_object()) return "object";
    return "null";
}

void type_error(const std::string& path, const json& expect, const json& got) {
    raise(ErrorCode::ConfigError, "config key " + path + " expects " +
                                      type_name(expect) + ", got " + type_name(got));
}

// Overlay `patch` onto `base`; the default tree defines which keys exist and
// what type each leaf takes.
void merge_into(json& base, const json& patch, const std::string& prefix) {
    for (const auto& [key, val] : patch.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key))
            raise(ErrorCode::ConfigError, "unknown config key: " + path);
        json& slot = base[key];
        if (slot.is_object()) {
            if (!val.is_object()) type_error(path, slot, val);
            merge_into(slot, val, path);
        } else if (slot.is_boolean()) {
            if (!val.is_boolean()) type_error(path, slot, val);
            slot = val;
        } else if (slot.is_string()) {
            if (!val.is_string()) type_error(path, slot, val);
            slot = val;
        } else if (slot.is_number_integer() || slot.is_number_unsigned()) {
            if (!(val.is_number_integer() || val.is_number_unsigned()))
                type_error(path, slot, val);
            slot = val;
        } else if (slot.is_number_float()) {
            if (!val.is_number()) type_error(path, slot, val);
            slot = val.get<double>();
        } else if (slot.is_array()) {
            if (!val.is_array()) type_error(path, slot, val);
            slot = val;
        } else {
            slot = val;
        }
    }
}

// --set values are JSON when they parse as JSON, bare strings otherwise
json parse_override_value(const std::string& text) {
    json v = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (v.is_discarded()) return json(text);
    return v;
}

json override_to_doc(const std::string& ov) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0)
        raise(ErrorCode::ConfigError, "override must look like key=value: " + ov);
    const std::string path = ov.substr(0, eq);
    const json value = parse_override_value(ov.substr(eq + 1));
    json doc = json::object();
    json* slot = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string part = path.substr(start, dot - start);
        if (part.empty())
            raise(ErrorCode::ConfigError, "bad override key: " + path);
        if (dot == std::string::npos) {
            (*slot)[part] = value;
            break;
        }
        (*slot)[part] = json::object();
        slot = &(*slot)[part];
        start = dot + 1;
    }
    return doc;
}

// --- decoding helpers: merge guarantees types, these add range/shape checks --

double get_num(const json& v) { return v.get<double>(); }

int get_int(const json& v, const std::string& path) {
    const auto x = v.get<std::int64_t>();
    if (x < INT32_MIN || x > INT32_MAX)
        raise(ErrorCode::ConfigError, "config key " + path + " out of range");
    return static_cast<int>(x);
}

template <std::size_t N, typename T>
std::array<T, N> get_array(const json& v, const std::string& path) {
    if (!v.is_array() || v.size() != N)
        raise(ErrorCode::ConfigError,
              "config key " + path + " needs exactly " + std::to_string(N) +
                  " entries");
    std::array<T, N> out{};
    for (std::size_t i = 0; i < N; ++i) {
        if (!v[i].is_number())
            raise(ErrorCode::ConfigError, "config key " + path + " needs numbers");
        out[i] = static_cast<T>(v[i].get<double>());
    }
    return out;
}

Range get_range(const json& v, const std::string& path) {
    const auto a = get_array<2, double>(v, path);
    return Range(a[0], a[1]);
}

Sequence sequence_from_name(const std::string& name, const std::string& path) {
    for (int i = 0; i < kNumSequences; ++i)
        if (name == kSequenceNames[static_cast<std::size_t>(i)])
            return static_cast<Sequence>(i);
    raise(ErrorCode::ConfigError,
          "config key " + path + " must be one of t1, t1c, t2, flair");
}

}  // namespace

json config_to_json(const RunConfig& cfg) {
    const auto& m = cfg.model;
    json j;
    j["data"] = {
        {"manifest", cfg.manifest},
        {"normalize",
         cfg.normalize == NormalizeRegion::NonzeroVoxels ? "nonzero" : "all"},
        {"phantom",
         {{"count", cfg.phantom.n_cases},
          {"mutant_fraction", cfg.phantom.mutant_fraction},
          {"dims", cfg.phantom.dims},
          {"tumor_radius", range_json(cfg.phantom.tumor_radius)},
          {"center_jitter", cfg.phantom.center_jitter},
          {"mismatch_contrast", range_json(cfg.phantom.mismatch_contrast)},
          {"noise_sigma", cfg.phantom.noise_sigma},
          {"sharpness_mutant", range_json(cfg.phantom.sharpness_mutant)},
          {"sharpness_wildtype", range_json(cfg.phantom.sharpness_wildtype)},
          {"rim_thickness", cfg.phantom.rim_thickness}}}};
    j["backbone"] = {
        {"in_channels", m.backbone.in_channels},
        {"embed_dim", m.backbone.embed_dim},
        {"depths", m.backbone.depths},
        {"num_heads", m.backbone.num_heads},
        {"window", m.backbone.window},
        {"input_size", m.backbone.input_size},
        {"block", m.backbone.block_kind == BlockKind::Attention ? "attention"
                                                                : "conv"}};
    j["tafe"] = {{"enabled", m.tafe_on},
                 {"depth", m.tafe.depth},
                 {"head_hidden", m.tafe.head_hidden},
                 {"dropout", m.tafe.dropout_rate}};
    j["cmd"] = {{"enabled", m.cmd_on},
                {"gamma", m.cmd.gamma},
                {"floor", m.cmd.floor},
                {"conv_channels", m.cmd.conv_channels},
                {"reduction", m.cmd.reduction},
                {"spatial_kernel", m.cmd.spatial_kernel},
                {"head_hidden", m.cmd.head_hidden}};
    j["loss"] = {{"alpha", m.loss.alpha},
                 {"beta", m.loss.beta},
                 {"dice_smooth", m.loss.dice_smooth},
                 {"class_weights", m.loss.class_weights},
                 {"classes", m.tafe.n_cls},
                 {"fusion_hidden", m.fusion_hidden}};
    j["train"] = {{"max_epochs", cfg.train.max_epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"learning_rate", cfg.train.learning_rate},
                  {"patience", cfg.train.patience},
                  {"seed", cfg.train.seed},
                  {"folds", cfg.folds},
                  {"ablation_seeds", cfg.ablation_seeds},
                  {"oversample_minority", cfg.train.oversample_minority},
                  {"augment",
                   {{"flip", cfg.train.augment.flip},
                    {"rotate", cfg.train.augment.rotate},
                    {"intensity_scale", cfg.train.augment.intensity_scale},
                    {"scale_lo", cfg.train.augment.scale_lo},
                    {"scale_hi", cfg.train.augment.scale_hi}}}};
    j["metrics"] = {{"ci_level", cfg.ci_level}, {"threshold", cfg.threshold}};
    j["occlusion"] = {
        {"mask_size", cfg.occlusion.mask_size},
        {"overlap", cfg.occlusion.overlap},
        {"fill", cfg.occlusion.fill == FillPolicy::Zero ? "zero" : "volume-mean"},
        {"smooth_sigma", cfg.occlusion.smooth_sigma},
        {"target", cfg.occlusion.target ? *cfg.occlusion.target : -1},
        {"sequence", kSequenceNames[static_cast<std::size_t>(cfg.overlay_sequence)]},
        {"slice_index", cfg.overlay_slice},
        {"alpha", cfg.overlay_alpha}};
    return j;
}

RunConfig config_from_json(const json& doc,
                           const std::vector<std::string>& overrides) {
    if (!doc.is_object())
        raise(ErrorCode::ConfigError, "config document must be a JSON object");

    json tree = config_to_json(RunConfig{});
    merge_into(tree, doc, "");
    for (const auto& ov : overrides) {
        try {
            merge_into(tree, override_to_doc(ov), "");
        } catch (const Error& e) {
            std::string msg = e.what();
            const std::string prefix = std::string(to_string(e.code())) + ": ";
            if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
            raise(e.code(), msg + " (override " + ov + ")");
        }
    }

    RunConfig cfg;
    const json& data = tree["data"];
    cfg.manifest = data["manifest"].get<std::string>();
    const std::string norm = data["normalize"].get<std::string>();
    if (norm == "nonzero")
        cfg.normalize = NormalizeRegion::NonzeroVoxels;
    else if (norm == "all")
        cfg.normalize = NormalizeRegion::AllVoxels;
    else
        raise(ErrorCode::ConfigError,
              "config key data.normalize must be \"nonzero\" or \"all\"");
    const json& ph = data["phantom"];
    cfg.phantom.n_cases = get_int(ph["count"], "data.phantom.count");
    cfg.phantom.mutant_fraction = get_num(ph["mutant_fraction"]);
    cfg.phantom.dims = get_array<3, std::int64_t>(ph["dims"], "data.phantom.dims");
    cfg.phantom.tumor_radius = get_range(ph["tumor_radius"], "data.phantom.tumor_radius");
    cfg.phantom.center_jitter = get_num(ph["center_jitter"]);
    cfg.phantom.mismatch_contrast =
        get_range(ph["mismatch_contrast"], "data.phantom.mismatch_contrast");
    cfg.phantom.noise_sigma = get_num(ph["noise_sigma"]);
    cfg.phantom.sharpness_mutant =
        get_range(ph["sharpness_mutant"], "data.phantom.sharpness_mutant");
    cfg.phantom.sharpness_wildtype =
        get_range(ph["sharpness_wildtype"], "data.phantom.sharpness_wildtype");
    cfg.phantom.rim_thickness = get_num(ph["rim_thickness"]);

    const json& bb = tree["backbone"];
    auto& mb = cfg.model.backbone;
    mb.in_channels = get_int(bb["in_channels"], "backbone.in_channels");
    mb.embed_dim = get_int(bb["embed_dim"], "backbone.embed_dim");
    mb.depths = get_array<4, int>(bb["depths"], "backbone.depths");
    mb.num_heads = get_array<4, int>(bb["num_heads"], "backbone.num_heads");
    mb.window = get_int(bb["window"], "backbone.window");
    mb.input_size = get_array<3, std::int64_t>(bb["input_size"], "backbone.input_size");
    const std::string block = bb["block"].get<std::string>();
    if (block == "attention")
        mb.block_kind = BlockKind::Attention;
    else if (block == "conv")
        mb.block_kind = BlockKind::ConvResidual;
    else
        raise(ErrorCode::ConfigError,
              "config key backbone.block must be \"attention\" or \"conv\"");

    const json& tf = tree["tafe"];
    cfg.model.tafe_on = tf["enabled"].get<bool>();
    cfg.model.tafe.depth = get_int(tf["depth"], "tafe.depth");
    cfg.model.tafe.head_hidden = get_int(tf["head_hidden"], "tafe.head_hidden");
    cfg.model.tafe.dropout_rate = get_num(tf["dropout"]);

    const json& cm = tree["cmd"];
    cfg.model.cmd_on = cm["enabled"].get<bool>();
    cfg.model.cmd.gamma = get_num(cm["gamma"]);
    cfg.model.cmd.floor = get_num(cm["floor"]);
    cfg.model.cmd.conv_channels = get_int(cm["conv_channels"], "cmd.conv_channels");
    cfg.model.cmd.reduction = get_int(cm["reduction"], "cmd.reduction");
    cfg.model.cmd.spatial_kernel = get_int(cm["spatial_kernel"], "cmd.spatial_kernel");
    cfg.model.cmd.head_hidden = get_int(cm["head_hidden"], "cmd.head_hidden");

    const json& ls = tree["loss"];
    cfg.model.loss.alpha = get_num(ls["alpha"]);
    cfg.model.loss.beta = get_num(ls["beta"]);
    cfg.model.loss.dice_smooth = get_num(ls["dice_smooth"]);
    if (!ls["class_weights"].is_array())
        raise(ErrorCode::ConfigError, "config key loss.class_weights must be an array");
    cfg.model.loss.class_weights.clear();
    for (const auto& w : ls["class_weights"]) {
        if (!w.is_number())
            raise(ErrorCode::ConfigError,
                  "config key loss.class_weights needs numbers");
        cfg.model.loss.class_weights.push_back(w.get<double>());
    }
    const int classes = get_int(ls["classes"], "loss.classes");
    cfg.model.tafe.n_cls = classes;
    cfg.model.cmd.n_cls = classes;
    cfg.model.fusion_hidden = get_int(ls["fusion_hidden"], "loss.fusion_hidden");

    const json& tr = tree["train"];
    cfg.train.max_epochs = get_int(tr["max_epochs"], "train.max_epochs");
    cfg.train.batch_size = get_int(tr["batch_size"], "train.batch_size");
    cfg.train.learning_rate = get_num(tr["learning_rate"]);
    cfg.train.patience = get_int(tr["patience"], "train.patience");
    if (tr["seed"].get<std::int64_t>() < 0)
        raise(ErrorCode::ConfigError, "config key train.seed must be >= 0");
    cfg.train.seed = tr["seed"].get<std::uint64_t>();
    cfg.folds = get_int(tr["folds"], "train.folds");
    cfg.ablation_seeds = get_int(tr["ablation_seeds"], "train.ablation_seeds");
    cfg.train.oversample_minority = tr["oversample_minority"].get<bool>();
    const json& au = tr["augment"];
    cfg.train.augment.flip = au["flip"].get<bool>();
    cfg.train.augment.rotate = au["rotate"].get<bool>();
    cfg.train.augment.intensity_scale = au["intensity_scale"].get<bool>();
    cfg.train.augment.scale_lo = get_num(au["scale_lo"]);
    cfg.train.augment.scale_hi = get_num(au["scale_hi"]);

    cfg.ci_level = get_num(tree["metrics"]["ci_level"]);
    cfg.threshold = get_num(tree["metrics"]["threshold"]);

    const json& oc = tree["occlusion"];
    cfg.occlusion.mask_size =
        get_array<3, std::int64_t>(oc["mask_size"], "occlusion.mask_size");
    cfg.occlusion.overlap = get_num(oc["overlap"]);
    const std::string fill = oc["fill"].get<std::string>();
    if (fill == "zero")
        cfg.occlusion.fill = FillPolicy::Zero;
    else if (fill == "volume-mean")
        cfg.occlusion.fill = FillPolicy::VolumeMean;
    else
        raise(ErrorCode::ConfigError,
              "config key occlusion.fill must be \"zero\" or \"volume-mean\"");
    cfg.occlusion.smooth_sigma = get_num(oc["smooth_sigma"]);
    const int target = get_int(oc["target"], "occlusion.target");
    cfg.occlusion.target = target < 0 ? std::nullopt : std::optional<int>(target);
    cfg.overlay_sequence =
        sequence_from_name(oc["sequence"].get<std::string>(), "occlusion.sequence");
    cfg.overlay_slice = oc["slice_index"].get<std::int64_t>();
    cfg.overlay_alpha = get_num(oc["alpha"]);

    return cfg;
}

RunConfig parse_config(const std::filesystem::path& path,
                       const std::vector<std::string>& overrides) {
    if (path.empty()) return config_from_json(json::object(), overrides);
    std::ifstream f(path);
    if (!f)
        raise(ErrorCode::ConfigError, "cannot read config file " + path.string());
    json doc = json::parse(f, nullptr, /*allow_exceptions=*/false);
    if (doc.is_discarded())
        raise(ErrorCode::ConfigError, "config file is not valid JSON: " + path.string());
    return config_from_json(doc, overrides);
}

}  // namespace fbn
