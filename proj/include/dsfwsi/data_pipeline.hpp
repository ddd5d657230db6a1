#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "dsfwsi/errors.hpp"
#include "dsfwsi/rng.hpp"

namespace dsfwsi {

namespace fs = std::filesystem;

/// A slide exported as two pyramid levels. Rasters are 8-bit RGB (channel
/// order R,G,B); `label_high`, when present, is CV_8UC1 class indices aligned
/// to `image_high`.
struct SlideSource {
    std::string slide_id;
    cv::Mat image_low;
    cv::Mat image_high;
    cv::Mat label_high;
    double magnification_low = 10.0;
    double magnification_high = 40.0;

    /// Integer linear magnification ratio (high / low).
    int ratio() const;
    /// Throws PreconditionError when the level dimensions disagree with the
    /// magnification ratio or the label map is misaligned.
    void validate() const;
};

enum class PatchRole { Context, Target };

std::string to_string(PatchRole role);
PatchRole parse_role(const std::string& s);

/// Metadata for one tiled patch. `origin_*` and `window` are in pixels of the
/// patch's source level (low level for context patches, high level for
/// target patches).
struct PatchRecord {
    std::string patch_id;
    std::string slide_id;
    PatchRole role = PatchRole::Context;
    int origin_x = 0;
    int origin_y = 0;
    int window = 0;
    int output_size = 224;
    double tissue_fraction = 0.0;
    std::string group_id;
    int slot_index = -1;  // -1 for the context patch, 0..m-1 row-major for targets
    std::string label_path;  // relative to the manifest directory, may be empty

    bool operator==(const PatchRecord&) const = default;
};

/// One context patch and the m target patches covering its field of view.
struct ContextGroup {
    PatchRecord context;
    std::vector<PatchRecord> targets;

    int m() const { return static_cast<int>(targets.size()); }
    const std::string& group_id() const { return context.patch_id; }
    const std::string& slide_id() const { return context.slide_id; }

    bool operator==(const ContextGroup&) const = default;
};

/// Window geometry. Context windows are measured on the low level; target
/// window/step are measured in low-level field-of-view pixels and read from
/// the high level at `ratio` times that size.
struct TilingConfig {
    int context_window = 1024;
    int context_step = 512;
    int target_window = 256;
    int target_step = 256;
    int output_size = 224;
    double min_tissue_fraction = 0.1;

    /// Targets per context patch implied by the geometry.
    int targets_per_context() const;
    void validate() const;
};

/// Pixel is tissue iff R <= 235 and G <= 210 and B <= 235. Returns CV_8UC1
/// with 1 for tissue and 0 for background. Input must be CV_8UC3 (R,G,B).
cv::Mat compute_tissue_mask(const cv::Mat& rgb);

/// Fraction of tissue pixels inside `roi` of a precomputed mask.
double tissue_fraction(const cv::Mat& mask, const cv::Rect& roi);

/// Enumerates context windows on the low level and the m target windows of
/// each on the high level. Groups whose context tissue fraction falls below
/// `cfg.min_tissue_fraction` are dropped. Pure: no pixels are resampled here.
std::vector<ContextGroup> tile_slide(const SlideSource& slide, const TilingConfig& cfg);

/// Integer rectangle of a patch's field of view expressed in low-level pixels.
cv::Rect low_level_fov(const PatchRecord& rec, int ratio);

// ---------------------------------------------------------------------------
// Cross-validation folds and semi-supervised fractions

struct FoldSpec {
    int k = 5;
    std::uint64_t seed = 0;
    std::map<std::string, int> slide_fold;
    std::map<std::string, int> assignments;  // group_id -> fold index

    std::vector<std::string> validation_slides(int fold) const;
    bool is_validation(const ContextGroup& g, int fold) const;
};

/// Slide-level k-fold split: all groups of a slide share a fold. Throws
/// ConfigError when there are fewer distinct slides than folds.
FoldSpec split_folds(std::span<const ContextGroup> groups, int k, std::uint64_t seed);

/// Splits `groups` into (train, validation) for one fold.
std::pair<std::vector<ContextGroup>, std::vector<ContextGroup>> fold_partition(
    std::span<const ContextGroup> groups, const FoldSpec& folds, int fold);

/// Indices of a seeded subsample of size round(fraction * n). The subset is
/// the prefix of one seeded shuffle, so smaller fractions nest inside larger
/// ones for the same seed. Returned indices are ascending.
std::vector<std::size_t> subsample_indices(std::size_t n, double fraction, std::uint64_t seed);

template <class T>
std::vector<T> subsample_fraction(std::span<const T> items, double fraction, std::uint64_t seed) {
    std::vector<T> out;
    for (auto i : subsample_indices(items.size(), fraction, seed)) out.push_back(items[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Manifest

inline constexpr const char* kManifestHeader =
    "patch_id,slide_id,role,origin_x,origin_y,window,output_size,tissue_fraction,group_id,"
    "slot_index,label_path";

/// Writes atomically (temporary file + rename).
void write_manifest(std::span<const ContextGroup> groups, const fs::path& path);
std::vector<ContextGroup> read_manifest(const fs::path& path);

/// Where tiled pixels live relative to a manifest.
fs::path patch_image_path(const fs::path& manifest_dir, const PatchRecord& rec);

/// Resamples and writes every patch of `groups` (RGB PNG plus, when the slide
/// carries labels, a class-index PNG). Fills `label_path` on each record.
void export_patches(const SlideSource& slide, std::vector<ContextGroup>& groups,
                    const TilingConfig& cfg, const fs::path& dataset_dir);

cv::Mat read_rgb(const fs::path& path);
void write_rgb(const cv::Mat& rgb, const fs::path& path);
cv::Mat read_label(const fs::path& path);
void write_label(const cv::Mat& label, const fs::path& path);

// ---------------------------------------------------------------------------
// Synthetic slides

struct SyntheticConfig {
    int slides = 8;
    int low_size = 2048;
    int classes = 3;
    int ratio = 4;
    std::vector<double> class_fractions;  // empty -> uniform
    std::uint64_t seed = 0;

    /// Fractions normalized to sum to one (uniform when unspecified).
    std::vector<double> resolved_fractions() const;
    void validate() const;
};

/// Renders one synthetic slide: smooth class regions whose areas follow the
/// requested fractions, each filled with a class-specific stain colour,
/// nucleus size/density and fibre texture. The low level is an area
/// downsample of the high level.
SlideSource render_synthetic_slide(const SyntheticConfig& cfg, int index);

struct SlideIndexEntry {
    std::string slide_id;
    fs::path low_path;
    fs::path high_path;
    fs::path label_path;
    double magnification_low = 10.0;
    double magnification_high = 40.0;
};

/// Writes `slides/<id>/{low,high,label_high}.png` plus `slides.csv` under
/// `out_dir`. Byte-identical output for identical configs.
std::vector<SlideIndexEntry> generate_synthetic_dataset(const SyntheticConfig& cfg,
                                                        const fs::path& out_dir);

void write_slide_index(std::span<const SlideIndexEntry> entries, const fs::path& path);
std::vector<SlideIndexEntry> read_slide_index(const fs::path& path);
SlideSource load_slide(const SlideIndexEntry& entry, const fs::path& base_dir);

/// Tiles every slide of a slide index and exports patches plus `manifest.csv`
/// into `dataset_dir`. Returns the groups that were written.
std::vector<ContextGroup> tile_dataset(const fs::path& slide_index, const TilingConfig& cfg,
                                       const fs::path& dataset_dir);

/// Writes `text` to `path` via a temporary sibling and rename.
void atomic_write_text(const fs::path& path, const std::string& text);

}  // namespace dsfwsi
