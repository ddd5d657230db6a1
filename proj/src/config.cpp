#include "dsfwsi/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>

namespace dsfwsi {

JsonReader::JsonReader(const json& j, std::string prefix, std::vector<std::string>& errors)
    : object_(j.is_object() ? j : json::object()), prefix_(std::move(prefix)), errors_(errors) {
    if (!j.is_object() && !j.is_null())
        errors_.push_back((prefix_.empty() ? std::string("<root>") : prefix_) + ": expected an object");
}

std::string JsonReader::path(const char* key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

bool JsonReader::has(const char* key) const { return object_.contains(key); }

const json* JsonReader::find(const char* key) {
    seen_.emplace_back(key);
    auto it = object_.find(key);
    return it == object_.end() ? nullptr : &*it;
}

void JsonReader::get(const char* key, int& out) {
    if (const auto* v = find(key)) {
        if (v->is_number_integer())
            out = v->get<int>();
        else
            errors_.push_back(path(key) + ": expected an integer");
    }
}

void JsonReader::get(const char* key, std::uint64_t& out) {
    if (const auto* v = find(key)) {
        if (v->is_number_unsigned() || (v->is_number_integer() && v->get<std::int64_t>() >= 0))
            out = v->get<std::uint64_t>();
        else
            errors_.push_back(path(key) + ": expected a non-negative integer");
    }
}

void JsonReader::get(const char* key, double& out) {
    if (const auto* v = find(key)) {
        if (v->is_number())
            out = v->get<double>();
        else
            errors_.push_back(path(key) + ": expected a number");
    }
}

void JsonReader::get(const char* key, bool& out) {
    if (const auto* v = find(key)) {
        if (v->is_boolean())
            out = v->get<bool>();
        else
            errors_.push_back(path(key) + ": expected a boolean");
    }
}

void JsonReader::get(const char* key, std::string& out) {
    if (const auto* v = find(key)) {
        if (v->is_string())
            out = v->get<std::string>();
        else
            errors_.push_back(path(key) + ": expected a string");
    }
}

void JsonReader::get(const char* key, std::vector<double>& out) {
    if (const auto* v = find(key)) {
        if (v->is_array() && std::all_of(v->begin(), v->end(), [](const json& e) { return e.is_number(); }))
            out = v->get<std::vector<double>>();
        else
            errors_.push_back(path(key) + ": expected an array of numbers");
    }
}

void JsonReader::get(const char* key, std::array<double, 3>& out) {
    if (const auto* v = find(key)) {
        if (v->is_array() && v->size() == 3 &&
            std::all_of(v->begin(), v->end(), [](const json& e) { return e.is_number(); }))
            out = {(*v)[0].get<double>(), (*v)[1].get<double>(), (*v)[2].get<double>()};
        else
            errors_.push_back(path(key) + ": expected an array of 3 numbers");
    }
}

JsonReader JsonReader::child(const char* key) {
    const auto* v = find(key);
    return JsonReader(v ? *v : json(), path(key), errors_);
}

void JsonReader::finish() {
    for (auto it = object_.begin(); it != object_.end(); ++it)
        if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
            errors_.push_back(path(it.key().c_str()) + ": unknown key");
}

void raise_config_errors(const std::string& what, const std::vector<std::string>& errors) {
    if (errors.empty()) return;
    std::string msg = what + ": ";
    for (std::size_t i = 0; i < errors.size(); ++i) msg += (i ? "; " : "") + errors[i];
    throw ConfigError(msg);
}

json load_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

// ---------------------------------------------------------------------------

json to_json(const TilingConfig& c) {
    return {{"context_window", c.context_window}, {"context_step", c.context_step},
            {"target_window", c.target_window},   {"target_step", c.target_step},
            {"output_size", c.output_size},       {"min_tissue_fraction", c.min_tissue_fraction}};
}

void read_into(JsonReader r, TilingConfig& c) {
    r.get("context_window", c.context_window);
    r.get("context_step", c.context_step);
    r.get("target_window", c.target_window);
    r.get("target_step", c.target_step);
    r.get("output_size", c.output_size);
    r.get("min_tissue_fraction", c.min_tissue_fraction);
    r.finish();
}

json to_json(const AugmentationConfig& c) {
    return {{"enabled", c.enabled},
            {"crop_scale_min", c.crop_scale_min},
            {"crop_scale_max", c.crop_scale_max},
            {"crop_ratio_min", c.crop_ratio_min},
            {"crop_ratio_max", c.crop_ratio_max},
            {"flip_p", c.flip_p},
            {"jitter_p", c.jitter_p},
            {"brightness", c.brightness},
            {"contrast", c.contrast},
            {"saturation", c.saturation},
            {"hue", c.hue},
            {"grayscale_p", c.grayscale_p},
            {"blur_p", c.blur_p},
            {"blur_sigma_min", c.blur_sigma_min},
            {"blur_sigma_max", c.blur_sigma_max},
            {"mean", c.mean},
            {"std", c.std}};
}

void read_into(JsonReader r, AugmentationConfig& c) {
    r.get("enabled", c.enabled);
    r.get("crop_scale_min", c.crop_scale_min);
    r.get("crop_scale_max", c.crop_scale_max);
    r.get("crop_ratio_min", c.crop_ratio_min);
    r.get("crop_ratio_max", c.crop_ratio_max);
    r.get("flip_p", c.flip_p);
    r.get("jitter_p", c.jitter_p);
    r.get("brightness", c.brightness);
    r.get("contrast", c.contrast);
    r.get("saturation", c.saturation);
    r.get("hue", c.hue);
    r.get("grayscale_p", c.grayscale_p);
    r.get("blur_p", c.blur_p);
    r.get("blur_sigma_min", c.blur_sigma_min);
    r.get("blur_sigma_max", c.blur_sigma_max);
    r.get("mean", c.mean);
    r.get("std", c.std);
    r.finish();
}

json to_json(const EncoderConfig& c) { return {{"base_width", c.base_width}, {"bn_momentum", c.bn_momentum}}; }

void read_into(JsonReader r, EncoderConfig& c) {
    r.get("base_width", c.base_width);
    r.get("bn_momentum", c.bn_momentum);
    r.finish();
}

json to_json(const SyntheticConfig& c) {
    return {{"slides", c.slides}, {"low_size", c.low_size},
            {"classes", c.classes}, {"ratio", c.ratio},
            {"class_fractions", c.class_fractions}, {"seed", c.seed}};
}

void read_into(JsonReader r, SyntheticConfig& c, bool allow_tiling) {
    r.get("slides", c.slides);
    r.get("low_size", c.low_size);
    r.get("classes", c.classes);
    r.get("ratio", c.ratio);
    r.get("class_fractions", c.class_fractions);
    r.get("seed", c.seed);
    if (allow_tiling) r.child("tiling");
    r.finish();
}

SynthFile parse_synth_config(const json& j) {
    std::vector<std::string> errors;
    SynthFile f;
    JsonReader root(j, "", errors);
    read_into(root, f.synthetic, true);
    read_into(root.child("tiling"), f.tiling);
    for (auto check : {std::function<void()>([&] { f.synthetic.validate(); }),
                       std::function<void()>([&] { f.tiling.validate(); })}) {
        try {
            check();
        } catch (const ConfigError& e) {
            errors.push_back(e.what());
        }
    }
    raise_config_errors("invalid synthetic config", errors);
    return f;
}

// ---------------------------------------------------------------------------
// Pretraining and fine-tuning records

namespace {

json dsl_json(const PretrainConfig& c) {
    return {{"stage_weights", std::vector<double>(c.weights.w.begin(), c.weights.w.end())},
            {"dsl_enabled", c.dsl_enabled},
            {"ctfm_enabled", c.ctfm_enabled},
            {"jigsaw_only", !c.ctfm.mask},
            {"mask_only", !c.ctfm.shuffle},
            {"identity_heads", c.identity_heads}};
}

json ctfm_json(const PretrainConfig& c, int m) {
    return {{"mask_ratio", c.ctfm.mask_ratio}, {"share_plan_across_views", c.ctfm.share_plan_across_views}, {"m", m}};
}

json pretrain_section(const PretrainConfig& c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"targets_per_group", c.targets_per_group},
            {"checkpoint_every", c.checkpoint_every}};
}

void read_pretrain_section(JsonReader r, PretrainConfig& c) {
    r.get("epochs", c.epochs);
    r.get("learning_rate", c.learning_rate);
    r.get("batch_size", c.batch_size);
    r.get("beta1", c.beta1);
    r.get("beta2", c.beta2);
    r.get("adam_eps", c.adam_eps);
    r.get("targets_per_group", c.targets_per_group);
    r.get("checkpoint_every", c.checkpoint_every);
    r.finish();
}

void read_ctfm(JsonReader r, PretrainConfig& c, int& m) {
    r.get("mask_ratio", c.ctfm.mask_ratio);
    r.get("share_plan_across_views", c.ctfm.share_plan_across_views);
    r.get("m", m);
    r.finish();
}

void read_dsl(JsonReader r, PretrainConfig& c) {
    std::vector<double> w(c.weights.w.begin(), c.weights.w.end());
    r.get("stage_weights", w);
    if (w.size() == 4)
        std::copy(w.begin(), w.end(), c.weights.w.begin());
    else
        r.errors().push_back(r.prefix() + ".stage_weights: expected exactly 4 weights, got " +
                             std::to_string(w.size()));
    r.get("dsl_enabled", c.dsl_enabled);
    r.get("ctfm_enabled", c.ctfm_enabled);
    bool jigsaw_only = !c.ctfm.mask, mask_only = !c.ctfm.shuffle;
    r.get("jigsaw_only", jigsaw_only);
    r.get("mask_only", mask_only);
    if (jigsaw_only && mask_only)
        r.errors().push_back(r.prefix() + ".jigsaw_only/mask_only: at most one may be set");
    c.ctfm.mask = !jigsaw_only;
    c.ctfm.shuffle = !mask_only;
    r.get("identity_heads", c.identity_heads);
    r.finish();
}

json finetune_section(const FinetuneConfig& c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"fraction", c.fraction},
            {"fold", c.fold},
            {"folds", c.folds},
            {"split_seed", c.split_seed},
            {"lambda", c.lambda},
            {"ignore_index", c.ignore_index},
            {"classes", c.classes},
            {"hook_depth", c.hook_depth},
            {"hook_crop", to_string(c.hook_crop)},
            {"hooking", c.hooking}};
}

void read_finetune_section(JsonReader r, FinetuneConfig& c) {
    r.get("epochs", c.epochs);
    r.get("learning_rate", c.learning_rate);
    r.get("batch_size", c.batch_size);
    r.get("beta1", c.beta1);
    r.get("beta2", c.beta2);
    r.get("adam_eps", c.adam_eps);
    r.get("fraction", c.fraction);
    r.get("fold", c.fold);
    r.get("folds", c.folds);
    r.get("split_seed", c.split_seed);
    r.get("lambda", c.lambda);
    r.get("ignore_index", c.ignore_index);
    r.get("classes", c.classes);
    r.get("hook_depth", c.hook_depth);
    std::string crop = to_string(c.hook_crop);
    r.get("hook_crop", crop);
    try {
        c.hook_crop = parse_hook_crop(crop);
    } catch (const ConfigError& e) {
        r.errors().push_back(r.prefix() + ".hook_crop: " + e.what());
    }
    r.get("hooking", c.hooking);
    r.finish();
}

void collect(std::vector<std::string>& errors, const std::function<void()>& check) {
    try {
        check();
    } catch (const ConfigError& e) {
        errors.push_back(e.what());
    }
}

}  // namespace

json PretrainConfig::to_json() const {
    return {{"seed", seed},
            {"encoder", dsfwsi::to_json(encoder)},
            {"augmentation", dsfwsi::to_json(augmentation)},
            {"ctfm", ctfm_json(*this, 0)},
            {"dsl", dsl_json(*this)},
            {"pretrain", pretrain_section(*this)}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
    std::vector<std::string> errors;
    PretrainConfig c;
    JsonReader root(j, "", errors);
    root.get("seed", c.seed);
    read_into(root.child("encoder"), c.encoder);
    read_into(root.child("augmentation"), c.augmentation);
    int m = 0;
    read_ctfm(root.child("ctfm"), c, m);
    read_dsl(root.child("dsl"), c);
    read_pretrain_section(root.child("pretrain"), c);
    root.finish();
    raise_config_errors("invalid pretraining config", errors);
    return c;
}

json FinetuneConfig::to_json() const {
    return {{"seed", seed},
            {"encoder", dsfwsi::to_json(encoder)},
            {"augmentation", dsfwsi::to_json(augmentation)},
            {"finetune", finetune_section(*this)}};
}

FinetuneConfig FinetuneConfig::from_json(const json& j) {
    std::vector<std::string> errors;
    FinetuneConfig c;
    JsonReader root(j, "", errors);
    root.get("seed", c.seed);
    read_into(root.child("encoder"), c.encoder);
    read_into(root.child("augmentation"), c.augmentation);
    read_finetune_section(root.child("finetune"), c);
    root.finish();
    raise_config_errors("invalid fine-tuning config", errors);
    return c;
}

// ---------------------------------------------------------------------------

void ExperimentConfig::set_seed(std::uint64_t s) {
    seed = s;
    pretrain.seed = s;
    finetune.seed = s;
}

json ExperimentConfig::to_json() const {
    return {{"seed", seed},
            {"paths", {{"slides", slides_path}, {"manifest", manifest_path}, {"output", output_dir}}},
            {"tiling", dsfwsi::to_json(tiling)},
            {"encoder", dsfwsi::to_json(pretrain.encoder)},
            {"augmentation", dsfwsi::to_json(pretrain.augmentation)},
            {"ctfm", ctfm_json(pretrain, m)},
            {"dsl", dsl_json(pretrain)},
            {"pretrain", pretrain_section(pretrain)},
            {"finetune", finetune_section(finetune)}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    std::vector<std::string> errors;
    ExperimentConfig c;
    JsonReader root(j, "", errors);
    std::uint64_t seed = 0;
    root.get("seed", seed);
    {
        auto paths = root.child("paths");
        paths.get("slides", c.slides_path);
        paths.get("manifest", c.manifest_path);
        paths.get("output", c.output_dir);
        paths.finish();
    }
    read_into(root.child("tiling"), c.tiling);
    read_into(root.child("encoder"), c.pretrain.encoder);
    read_into(root.child("augmentation"), c.pretrain.augmentation);
    read_ctfm(root.child("ctfm"), c.pretrain, c.m);
    read_dsl(root.child("dsl"), c.pretrain);
    read_pretrain_section(root.child("pretrain"), c.pretrain);
    read_finetune_section(root.child("finetune"), c.finetune);
    root.finish();
    c.finetune.encoder = c.pretrain.encoder;
    c.finetune.augmentation = c.pretrain.augmentation;
    c.set_seed(seed);

    if (errors.empty()) {
        collect(errors, [&] { c.tiling.validate(); });
        collect(errors, [&] { c.pretrain.validate(); });
        collect(errors, [&] { c.finetune.validate(); });
        if (c.pretrain.encoder.base_width < 1) errors.push_back("encoder.base_width: must be >= 1");
        if (c.m < 0) errors.push_back("ctfm.m: must be >= 0");
    }
    raise_config_errors("invalid config", errors);
    return c;
}

}  // namespace dsfwsi
