#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "dsfwsi/data_pipeline.hpp"
#include "dsfwsi/pretrainer.hpp"

namespace dsfwsi::testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                ("dsfwsi_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Tiny labelled dataset: 512^2 low level, ratio 2, 256/256 context tiles,
/// 128/128 targets (m = 4), 32 px patches.
struct TinyDataset {
    SyntheticConfig synthetic;
    TilingConfig tiling;
    std::vector<ContextGroup> groups;
    fs::path dir;
    fs::path manifest;
};

inline TinyDataset make_tiny_dataset(const fs::path& dir, int slides = 2, int output_size = 32,
                                     std::uint64_t seed = 3) {
    TinyDataset d;
    d.synthetic.slides = slides;
    d.synthetic.low_size = 512;
    d.synthetic.classes = 3;
    d.synthetic.ratio = 2;
    d.synthetic.seed = seed;
    d.tiling.context_window = 256;
    d.tiling.context_step = 256;
    d.tiling.target_window = 128;
    d.tiling.target_step = 128;
    d.tiling.output_size = output_size;
    d.dir = dir;
    generate_synthetic_dataset(d.synthetic, dir);
    d.groups = tile_dataset(dir / "slides.csv", d.tiling, dir);
    d.manifest = dir / "manifest.csv";
    return d;
}

inline PretrainConfig tiny_pretrain_config() {
    PretrainConfig c;
    c.epochs = 2;
    c.batch_size = 2;
    c.seed = 0;
    c.encoder.base_width = 4;
    c.checkpoint_every = 1;
    return c;
}

}  // namespace dsfwsi::testing
