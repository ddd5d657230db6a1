#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsfwsi/data_pipeline.hpp"
#include "dsfwsi/hooknet.hpp"
#include "dsfwsi/pretrainer.hpp"

namespace dsfwsi {

using nlohmann::json;

/// Strict reader for one JSON object: records type errors and unknown keys
/// instead of throwing so that every offending key can be reported at once.
class JsonReader {
public:
    JsonReader(const json& j, std::string prefix, std::vector<std::string>& errors);

    void get(const char* key, int& out);
    void get(const char* key, std::uint64_t& out);
    void get(const char* key, double& out);
    void get(const char* key, bool& out);
    void get(const char* key, std::string& out);
    void get(const char* key, std::vector<double>& out);
    void get(const char* key, std::array<double, 3>& out);

    /// Object-valued key; an absent key yields an empty object.
    JsonReader child(const char* key);
    bool has(const char* key) const;
    /// Reports keys never requested via get/child/has.
    void finish();

    const std::string& prefix() const { return prefix_; }
    std::vector<std::string>& errors() { return errors_; }

private:
    const json* find(const char* key);
    std::string path(const char* key) const;

    json object_;
    std::string prefix_;
    std::vector<std::string>& errors_;
    std::vector<std::string> seen_;
};

json to_json(const TilingConfig& c);
json to_json(const AugmentationConfig& c);
json to_json(const EncoderConfig& c);
json to_json(const SyntheticConfig& c);

void read_into(JsonReader r, TilingConfig& c);
void read_into(JsonReader r, AugmentationConfig& c);
void read_into(JsonReader r, EncoderConfig& c);
void read_into(JsonReader r, SyntheticConfig& c, bool allow_tiling = false);

/// Throws ConfigError listing every entry of `errors` (no-op when empty).
void raise_config_errors(const std::string& what, const std::vector<std::string>& errors);

/// Parses a synthetic-dataset file: keys slides, low_size, classes, ratio,
/// class_fractions, seed and an optional "tiling" section.
struct SynthFile {
    SyntheticConfig synthetic;
    TilingConfig tiling;
};
SynthFile parse_synth_config(const json& j);

/// The full experiment file. Sections: seed, paths, tiling, augmentation,
/// encoder, ctfm, dsl, pretrain, finetune. Unknown keys are rejected.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string slides_path;
    std::string manifest_path;
    std::string output_dir;
    int m = 0;  // 0 = derived from the manifest
    TilingConfig tiling;
    PretrainConfig pretrain;
    FinetuneConfig finetune;

    json to_json() const;
    static ExperimentConfig from_json(const json& j);
    /// Applies the top-level seed to pretrain and finetune.
    void set_seed(std::uint64_t s);
};

json load_json_file(const fs::path& path);

}  // namespace dsfwsi
