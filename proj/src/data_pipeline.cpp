#include "dsfwsi/data_pipeline.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace dsfwsi {

namespace {

bool is_integer_ratio(double hi, double lo, int& out) {
    if (lo <= 0.0 || hi <= 0.0) return false;
    double q = hi / lo;
    long r = std::lround(q);
    if (r < 1 || std::abs(q - static_cast<double>(r)) > 1e-9) return false;
    out = static_cast<int>(r);
    return true;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void require_clean_id(const std::string& s, const char* what) {
    if (s.find_first_of(",\n\r") != std::string::npos)
        throw ArgumentError(std::string(what) + " must not contain commas or newlines: '" + s + "'");
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

template <class T>
T parse_number(const std::string& text, std::size_t line, const char* field) {
    T value{};
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto res = std::from_chars(first, last, value);
    if (text.empty() || res.ec != std::errc() || res.ptr != last)
        throw ParseError("line " + std::to_string(line) + ": field '" + field + "': invalid value '" +
                         text + "'");
    return value;
}

}  // namespace

// ---------------------------------------------------------------------------

int SlideSource::ratio() const {
    int r = 0;
    if (!is_integer_ratio(magnification_high, magnification_low, r))
        throw PreconditionError("slide " + slide_id +
                                ": magnification ratio must be a positive integer");
    return r;
}

void SlideSource::validate() const {
    const int r = ratio();
    if (image_low.empty() || image_high.empty())
        throw PreconditionError("slide " + slide_id + ": missing level raster");
    if (image_low.type() != CV_8UC3 || image_high.type() != CV_8UC3)
        throw FormatError("slide " + slide_id + ": levels must be 8-bit RGB");
    if (image_high.cols != image_low.cols * r || image_high.rows != image_low.rows * r)
        throw PreconditionError("slide " + slide_id + ": high level " +
                                std::to_string(image_high.cols) + "x" +
                                std::to_string(image_high.rows) + " is not " + std::to_string(r) +
                                "x the low level " + std::to_string(image_low.cols) + "x" +
                                std::to_string(image_low.rows));
    if (!label_high.empty() &&
        (label_high.size() != image_high.size() || label_high.type() != CV_8UC1))
        throw PreconditionError("slide " + slide_id + ": label map must be 8-bit and match the high level");
}

std::string to_string(PatchRole role) { return role == PatchRole::Context ? "context" : "target"; }

PatchRole parse_role(const std::string& s) {
    if (s == "context") return PatchRole::Context;
    if (s == "target") return PatchRole::Target;
    throw ParseError("unknown patch role '" + s + "'");
}

int TilingConfig::targets_per_context() const {
    const int g = context_window / target_step;
    return g * g;
}

void TilingConfig::validate() const {
    if (context_window <= 0 || context_step <= 0 || target_window <= 0 || target_step <= 0 ||
        output_size <= 0)
        throw ConfigError("tiling: windows, steps and output_size must be positive");
    if (target_window != target_step || context_window % target_step != 0)
        throw ConfigError("tiling: target windows must exactly partition the context window "
                          "(target_window == target_step dividing context_window)");
    if (min_tissue_fraction < 0.0 || min_tissue_fraction > 1.0)
        throw ConfigError("tiling: min_tissue_fraction must lie in [0, 1]");
}

// ---------------------------------------------------------------------------

cv::Mat compute_tissue_mask(const cv::Mat& rgb) {
    if (rgb.empty() || rgb.type() != CV_8UC3)
        throw FormatError("tissue mask requires an 8-bit 3-channel RGB raster");
    cv::Mat mask;
    cv::inRange(rgb, cv::Scalar(0, 0, 0), cv::Scalar(235, 210, 235), mask);
    mask.setTo(1, mask);
    return mask;
}

double tissue_fraction(const cv::Mat& mask, const cv::Rect& roi) {
    if (roi.area() == 0) return 0.0;
    return static_cast<double>(cv::countNonZero(mask(roi))) / static_cast<double>(roi.area());
}

std::vector<ContextGroup> tile_slide(const SlideSource& slide, const TilingConfig& cfg) {
    slide.validate();
    cfg.validate();
    const int r = slide.ratio();
    if (cfg.context_window != cfg.target_window * r)
        throw PreconditionError("tiling: context window " + std::to_string(cfg.context_window) +
                                " must equal target window " + std::to_string(cfg.target_window) +
                                " times the magnification ratio " + std::to_string(r));
    require_clean_id(slide.slide_id, "slide_id");

    std::vector<ContextGroup> groups;
    const int width = slide.image_low.cols;
    const int height = slide.image_low.rows;
    if (width < cfg.context_window || height < cfg.context_window) return groups;

    const cv::Mat mask_low = compute_tissue_mask(slide.image_low);
    const cv::Mat mask_high = compute_tissue_mask(slide.image_high);
    const int grid = cfg.context_window / cfg.target_step;

    for (int y = 0; y + cfg.context_window <= height; y += cfg.context_step) {
        for (int x = 0; x + cfg.context_window <= width; x += cfg.context_step) {
            const cv::Rect ctx_rect(x, y, cfg.context_window, cfg.context_window);
            ContextGroup group;
            PatchRecord& ctx = group.context;
            ctx.patch_id = slide.slide_id + "_x" + std::to_string(x) + "_y" + std::to_string(y);
            ctx.slide_id = slide.slide_id;
            ctx.role = PatchRole::Context;
            ctx.origin_x = x;
            ctx.origin_y = y;
            ctx.window = cfg.context_window;
            ctx.output_size = cfg.output_size;
            ctx.tissue_fraction = tissue_fraction(mask_low, ctx_rect);
            ctx.group_id = ctx.patch_id;
            ctx.slot_index = -1;
            if (ctx.tissue_fraction < cfg.min_tissue_fraction) continue;

            for (int j = 0; j < grid; ++j) {
                for (int i = 0; i < grid; ++i) {
                    PatchRecord t;
                    t.slot_index = j * grid + i;
                    t.patch_id = ctx.patch_id + "_t" + std::to_string(t.slot_index);
                    t.slide_id = slide.slide_id;
                    t.role = PatchRole::Target;
                    t.origin_x = (x + i * cfg.target_step) * r;
                    t.origin_y = (y + j * cfg.target_step) * r;
                    t.window = cfg.target_window * r;
                    t.output_size = cfg.output_size;
                    t.tissue_fraction =
                        tissue_fraction(mask_high, cv::Rect(t.origin_x, t.origin_y, t.window, t.window));
                    t.group_id = ctx.patch_id;
                    group.targets.push_back(std::move(t));
                }
            }
            groups.push_back(std::move(group));
        }
    }
    return groups;
}

cv::Rect low_level_fov(const PatchRecord& rec, int ratio) {
    if (rec.role == PatchRole::Context) return {rec.origin_x, rec.origin_y, rec.window, rec.window};
    return {rec.origin_x / ratio, rec.origin_y / ratio, rec.window / ratio, rec.window / ratio};
}

// ---------------------------------------------------------------------------

std::vector<std::string> FoldSpec::validation_slides(int fold) const {
    std::vector<std::string> out;
    for (const auto& [slide, f] : slide_fold)
        if (f == fold) out.push_back(slide);
    return out;
}

bool FoldSpec::is_validation(const ContextGroup& g, int fold) const {
    auto it = slide_fold.find(g.slide_id());
    if (it == slide_fold.end())
        throw ValidationError("group " + g.group_id() + " belongs to slide '" + g.slide_id() +
                              "' which has no fold assignment");
    return it->second == fold;
}

FoldSpec split_folds(std::span<const ContextGroup> groups, int k, std::uint64_t seed) {
    if (k < 1) throw ConfigError("folds: k must be >= 1");
    std::set<std::string> unique;
    for (const auto& g : groups) unique.insert(g.slide_id());
    if (static_cast<int>(unique.size()) < k)
        throw ConfigError("folds: " + std::to_string(unique.size()) + " slides cannot fill " +
                          std::to_string(k) + " folds");
    std::vector<std::string> slides(unique.begin(), unique.end());
    Rng rng(seed);
    std::shuffle(slides.begin(), slides.end(), rng);

    FoldSpec spec;
    spec.k = k;
    spec.seed = seed;
    for (std::size_t i = 0; i < slides.size(); ++i) spec.slide_fold[slides[i]] = static_cast<int>(i % k);
    for (const auto& g : groups) spec.assignments[g.group_id()] = spec.slide_fold.at(g.slide_id());
    return spec;
}

std::pair<std::vector<ContextGroup>, std::vector<ContextGroup>> fold_partition(
    std::span<const ContextGroup> groups, const FoldSpec& folds, int fold) {
    if (fold < 0 || fold >= folds.k)
        throw ArgumentError("fold " + std::to_string(fold) + " outside [0, " + std::to_string(folds.k) + ")");
    std::pair<std::vector<ContextGroup>, std::vector<ContextGroup>> out;
    for (const auto& g : groups) (folds.is_validation(g, fold) ? out.second : out.first).push_back(g);
    return out;
}

std::vector<std::size_t> subsample_indices(std::size_t n, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ArgumentError("fraction must lie in (0, 1], got " + format_double(fraction));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    order.resize(std::min(keep, n));
    std::sort(order.begin(), order.end());
    return order;
}

// ---------------------------------------------------------------------------

void atomic_write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out << text;
        if (!out) throw IoError("failed writing '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

namespace {

void append_row(std::string& out, const PatchRecord& r) {
    require_clean_id(r.patch_id, "patch_id");
    require_clean_id(r.slide_id, "slide_id");
    require_clean_id(r.group_id, "group_id");
    require_clean_id(r.label_path, "label_path");
    out += r.patch_id;
    out += ',';
    out += r.slide_id;
    out += ',';
    out += to_string(r.role);
    out += ',' + std::to_string(r.origin_x) + ',' + std::to_string(r.origin_y) + ',' +
           std::to_string(r.window) + ',' + std::to_string(r.output_size) + ',' +
           format_double(r.tissue_fraction) + ',';
    out += r.group_id;
    out += ',' + std::to_string(r.slot_index) + ',';
    out += r.label_path;
    out += '\n';
}

}  // namespace

void write_manifest(std::span<const ContextGroup> groups, const fs::path& path) {
    std::string out = kManifestHeader;
    out += '\n';
    for (const auto& g : groups) {
        append_row(out, g.context);
        for (const auto& t : g.targets) append_row(out, t);
    }
    atomic_write_text(path, out);
}

std::vector<ContextGroup> read_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest '" + path.string() + "'");

    std::string line;
    if (!std::getline(in, line)) throw ParseError("line 1: manifest is empty (missing header)");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader) throw ParseError("line 1: unexpected header '" + line + "'");

    static constexpr std::array<const char*, 11> fields = {
        "patch_id", "slide_id",        "role",     "origin_x",   "origin_y",  "window",
        "output_size", "tissue_fraction", "group_id", "slot_index", "label_path"};

    std::vector<ContextGroup> groups;
    std::unordered_map<std::string, std::size_t> group_index;
    std::vector<std::pair<PatchRecord, std::size_t>> targets;  // record, line
    std::set<std::string> seen_ids;

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto cols = split_csv_line(line);
        if (cols.size() != fields.size())
            throw ParseError("line " + std::to_string(lineno) + ": expected " +
                             std::to_string(fields.size()) + " fields, found " +
                             std::to_string(cols.size()));
        PatchRecord r;
        r.patch_id = cols[0];
        r.slide_id = cols[1];
        try {
            r.role = parse_role(cols[2]);
        } catch (const ParseError&) {
            throw ParseError("line " + std::to_string(lineno) + ": field 'role': invalid value '" +
                             cols[2] + "'");
        }
        r.origin_x = parse_number<int>(cols[3], lineno, fields[3]);
        r.origin_y = parse_number<int>(cols[4], lineno, fields[4]);
        r.window = parse_number<int>(cols[5], lineno, fields[5]);
        r.output_size = parse_number<int>(cols[6], lineno, fields[6]);
        r.tissue_fraction = parse_number<double>(cols[7], lineno, fields[7]);
        r.group_id = cols[8];
        r.slot_index = parse_number<int>(cols[9], lineno, fields[9]);
        r.label_path = cols[10];
        if (r.patch_id.empty())
            throw ParseError("line " + std::to_string(lineno) + ": field 'patch_id': empty");
        if (!seen_ids.insert(r.patch_id).second)
            throw ValidationError("line " + std::to_string(lineno) + ": duplicate patch_id '" +
                                  r.patch_id + "'");

        if (r.role == PatchRole::Context) {
            if (r.slot_index != -1 || r.group_id != r.patch_id)
                throw ValidationError("line " + std::to_string(lineno) +
                                      ": context rows need slot_index -1 and group_id == patch_id");
            group_index[r.patch_id] = groups.size();
            groups.push_back(ContextGroup{r, {}});
        } else {
            if (r.slot_index < 0)
                throw ValidationError("line " + std::to_string(lineno) + ": target slot_index must be >= 0");
            targets.emplace_back(std::move(r), lineno);
        }
    }

    for (auto& [t, ln] : targets) {
        auto it = group_index.find(t.group_id);
        if (it == group_index.end())
            throw ValidationError("line " + std::to_string(ln) + ": group references unknown patch '" +
                                  t.group_id + "'");
        groups[it->second].targets.push_back(std::move(t));
    }

    int m = 0;
    for (const auto& g : groups)
        for (const auto& t : g.targets) m = std::max(m, t.slot_index + 1);
    for (auto& g : groups) {
        std::sort(g.targets.begin(), g.targets.end(),
                  [](const PatchRecord& a, const PatchRecord& b) { return a.slot_index < b.slot_index; });
        for (int s = 0; s < m; ++s) {
            if (s >= g.m() || g.targets[s].slot_index != s)
                throw ValidationError("group references unknown patch: " + g.group_id() +
                                      " has no row for target slot " + std::to_string(s));
        }
        if (g.m() != m)
            throw ValidationError("group " + g.group_id() + " has duplicate target slots");
    }
    return groups;
}

fs::path patch_image_path(const fs::path& manifest_dir, const PatchRecord& rec) {
    return manifest_dir / "patches" / (rec.patch_id + ".png");
}

cv::Mat read_rgb(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("cannot read image '" + path.string() + "'");
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return rgb;
}

void write_rgb(const cv::Mat& rgb, const fs::path& path) {
    if (rgb.type() != CV_8UC3) throw FormatError("write_rgb expects an 8-bit RGB raster");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    const int level = rgb.total() > (1u << 22) ? 1 : 3;
    if (!cv::imwrite(path.string(), bgr, {cv::IMWRITE_PNG_COMPRESSION, level}))
        throw IoError("cannot write image '" + path.string() + "'");
}

cv::Mat read_label(const fs::path& path) {
    cv::Mat label = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (label.empty()) throw IoError("cannot read label map '" + path.string() + "'");
    return label;
}

void write_label(const cv::Mat& label, const fs::path& path) {
    if (label.type() != CV_8UC1) throw FormatError("write_label expects a single-channel 8-bit map");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), label, {cv::IMWRITE_PNG_COMPRESSION, 3}))
        throw IoError("cannot write label map '" + path.string() + "'");
}

void export_patches(const SlideSource& slide, std::vector<ContextGroup>& groups,
                    const TilingConfig& cfg, const fs::path& dataset_dir) {
    const int r = slide.ratio();
    const cv::Size out(cfg.output_size, cfg.output_size);
    const bool labelled = !slide.label_high.empty();

    auto emit = [&](PatchRecord& rec) {
        cv::Mat img;
        cv::Mat lab;
        if (rec.role == PatchRole::Context) {
            const cv::Rect roi(rec.origin_x, rec.origin_y, rec.window, rec.window);
            cv::resize(slide.image_low(roi), img, out, 0, 0, cv::INTER_LINEAR);
            if (labelled)
                cv::resize(slide.label_high(cv::Rect(roi.x * r, roi.y * r, roi.width * r, roi.height * r)),
                           lab, out, 0, 0, cv::INTER_NEAREST);
        } else {
            const cv::Rect roi(rec.origin_x, rec.origin_y, rec.window, rec.window);
            cv::resize(slide.image_high(roi), img, out, 0, 0, cv::INTER_LINEAR);
            if (labelled) cv::resize(slide.label_high(roi), lab, out, 0, 0, cv::INTER_NEAREST);
        }
        write_rgb(img, patch_image_path(dataset_dir, rec));
        if (labelled) {
            rec.label_path = "labels/" + rec.patch_id + ".png";
            write_label(lab, dataset_dir / rec.label_path);
        }
    };
    for (auto& g : groups) {
        emit(g.context);
        for (auto& t : g.targets) emit(t);
    }
}

// ---------------------------------------------------------------------------
// Synthetic slides

std::vector<double> SyntheticConfig::resolved_fractions() const {
    if (class_fractions.empty()) return std::vector<double>(classes, 1.0 / classes);
    double total = std::accumulate(class_fractions.begin(), class_fractions.end(), 0.0);
    std::vector<double> out;
    for (double f : class_fractions) out.push_back(f / total);
    return out;
}

void SyntheticConfig::validate() const {
    if (slides < 1) throw ConfigError("synthetic: slides must be >= 1");
    if (low_size < 16) throw ConfigError("synthetic: low_size must be >= 16");
    if (classes < 1 || classes > 250) throw ConfigError("synthetic: classes must lie in [1, 250]");
    if (ratio < 1) throw ConfigError("synthetic: ratio must be >= 1");
    if (!class_fractions.empty()) {
        if (static_cast<int>(class_fractions.size()) != classes)
            throw ConfigError("synthetic: class_fractions must have one entry per class");
        for (double f : class_fractions)
            if (!(f >= 0.0)) throw ConfigError("synthetic: class_fractions must be non-negative");
        if (std::accumulate(class_fractions.begin(), class_fractions.end(), 0.0) <= 0.0)
            throw ConfigError("synthetic: class_fractions must not all be zero");
    }
}

namespace {

struct ClassStyle {
    cv::Vec3f stroma;         // background stain, RGB
    cv::Vec3f nucleus;        // nucleus stain, RGB
    float nucleus_radius;     // low-level pixels
    float nucleus_density;    // nuclei per 16x16 low-level pixels
    float fibre_amplitude;    // intensity of oriented fibres
};

ClassStyle class_style(int c) {
    // H&E-like palette; classes differ mostly in nuclear morphology and fibre
    // texture, with only moderate colour shifts.
    static const std::array<ClassStyle, 6> base = {{
        {{222, 150, 196}, {120, 60, 150}, 1.2f, 0.35f, 26.f},  // stroma-like
        {{200, 130, 190}, {90, 40, 130}, 3.0f, 1.30f, 0.f},   // tumour-like
        {{214, 152, 200}, {60, 30, 110}, 0.9f, 2.60f, 0.f},   // lymphocyte-like
        {{226, 176, 206}, {150, 100, 160}, 2.0f, 0.20f, 8.f},  // necrosis-like
        {{206, 140, 180}, {100, 50, 140}, 1.8f, 0.80f, 14.f},
        {{218, 160, 210}, {80, 45, 120}, 2.4f, 0.50f, 4.f},
    }};
    ClassStyle s = base[static_cast<std::size_t>(c) % base.size()];
    const int cycle = c / static_cast<int>(base.size());
    if (cycle > 0) {
        s.stroma -= cv::Vec3f(6.f * cycle, 4.f * cycle, 0.f);
        s.nucleus_radius += 0.4f * cycle;
    }
    return s;
}

}  // namespace

SlideSource render_synthetic_slide(const SyntheticConfig& cfg, int index) {
    cfg.validate();
    const std::uint64_t seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(index)});
    Rng rng(seed);
    const int low = cfg.low_size;
    const int r = cfg.ratio;
    const int high = low * r;

    // Smooth random field -> class regions by quantile thresholds.
    const int grid = std::max(4, low / 128) + 1;
    cv::Mat coarse(grid, grid, CV_32F);
    for (int y = 0; y < grid; ++y)
        for (int x = 0; x < grid; ++x) coarse.at<float>(y, x) = static_cast<float>(uniform(rng, 0.0, 1.0));
    cv::Mat field;
    cv::resize(coarse, field, cv::Size(low, low), 0, 0, cv::INTER_CUBIC);

    const auto fractions = cfg.resolved_fractions();
    std::vector<float> thresholds;
    {
        std::vector<float> values(field.begin<float>(), field.end<float>());
        double cum = 0.0;
        for (int c = 0; c + 1 < cfg.classes; ++c) {
            cum += fractions[c];
            auto k = static_cast<std::size_t>(std::clamp(cum, 0.0, 1.0) * static_cast<double>(values.size()));
            if (k >= values.size()) {
                thresholds.push_back(std::numeric_limits<float>::infinity());
                continue;
            }
            std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
            thresholds.push_back(values[k]);
        }
    }
    cv::Mat label_low(low, low, CV_8UC1);
    for (int y = 0; y < low; ++y) {
        const float* f = field.ptr<float>(y);
        auto* out = label_low.ptr<std::uint8_t>(y);
        for (int x = 0; x < low; ++x) {
            int c = 0;
            while (c < static_cast<int>(thresholds.size()) && f[x] >= thresholds[c]) ++c;
            out[x] = static_cast<std::uint8_t>(c);
        }
    }

    SlideSource slide;
    slide.slide_id = "slide" + std::to_string(index);
    slide.magnification_low = 10.0;
    slide.magnification_high = 10.0 * r;
    cv::resize(label_low, slide.label_high, cv::Size(high, high), 0, 0, cv::INTER_NEAREST);

    std::vector<ClassStyle> styles;
    for (int c = 0; c < cfg.classes; ++c) styles.push_back(class_style(c));

    // Stain background with oriented fibres.
    const double theta = uniform(rng, 0.0, CV_PI);
    const double period = 6.0 * r;
    const double kx = 2.0 * CV_PI * std::cos(theta) / period;
    const double ky = 2.0 * CV_PI * std::sin(theta) / period;
    cv::Mat img(high, high, CV_8UC3);
    for (int y = 0; y < high; ++y) {
        const auto* lab = slide.label_high.ptr<std::uint8_t>(y);
        auto* px = img.ptr<cv::Vec3b>(y);
        for (int x = 0; x < high; ++x) {
            const ClassStyle& s = styles[lab[x]];
            float shade = 0.f;
            if (s.fibre_amplitude > 0.f)
                shade = s.fibre_amplitude * static_cast<float>(std::sin(kx * x + ky * y));
            px[x] = cv::Vec3b(cv::saturate_cast<std::uint8_t>(s.stroma[0] + shade),
                              cv::saturate_cast<std::uint8_t>(s.stroma[1] + shade),
                              cv::saturate_cast<std::uint8_t>(s.stroma[2] + 0.5f * shade));
        }
    }

    // Nuclei: thinned Poisson process, acceptance by the class under the centre.
    float max_density = 0.f;
    for (const auto& s : styles) max_density = std::max(max_density, s.nucleus_density);
    if (max_density > 0.f) {
        const double cell = 16.0 * r;
        const auto count = static_cast<long>(max_density * (static_cast<double>(high) / cell) *
                                             (static_cast<double>(high) / cell));
        std::uniform_int_distribution<int> pos(0, high - 1);
        for (long n = 0; n < count; ++n) {
            const int cx = pos(rng);
            const int cy = pos(rng);
            const double accept = uniform(rng, 0.0, 1.0);
            const double size_jitter = uniform(rng, 0.75, 1.25);
            const double tone = uniform(rng, -12.0, 12.0);
            const ClassStyle& s = styles[slide.label_high.at<std::uint8_t>(cy, cx)];
            if (accept >= s.nucleus_density / max_density) continue;
            const int radius = std::max(1, static_cast<int>(std::lround(s.nucleus_radius * r * size_jitter)));
            const cv::Scalar colour(s.nucleus[0] + tone, s.nucleus[1] + tone, s.nucleus[2] + tone);
            cv::circle(img, {cx, cy}, radius, colour, cv::FILLED, cv::LINE_8);
        }
    }

    // Sensor noise, generated in row bands to bound memory.
    cv::RNG noise_rng(static_cast<std::uint64_t>(mix64(seed ^ 0x5eedULL)));
    const int band = 256;
    for (int y0 = 0; y0 < high; y0 += band) {
        const int rows = std::min(band, high - y0);
        cv::Mat noise(rows, high, CV_16SC3);
        noise_rng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(5));
        cv::Mat roi = img.rowRange(y0, y0 + rows);
        cv::Mat wide;
        roi.convertTo(wide, CV_16SC3);
        wide += noise;
        wide.convertTo(roi, CV_8UC3);
    }

    slide.image_high = img;
    cv::resize(img, slide.image_low, cv::Size(low, low), 0, 0, cv::INTER_AREA);
    return slide;
}

void write_slide_index(std::span<const SlideIndexEntry> entries, const fs::path& path) {
    std::string out = "slide_id,low_path,high_path,label_path,magnification_low,magnification_high\n";
    for (const auto& e : entries) {
        out += e.slide_id + ',' + e.low_path.generic_string() + ',' + e.high_path.generic_string() + ',' +
               e.label_path.generic_string() + ',' + format_double(e.magnification_low) + ',' +
               format_double(e.magnification_high) + '\n';
    }
    atomic_write_text(path, out);
}

std::vector<SlideIndexEntry> read_slide_index(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open slide index '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("line 1: slide index is empty");
    std::vector<SlideIndexEntry> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto cols = split_csv_line(line);
        if (cols.size() != 6)
            throw ParseError("line " + std::to_string(lineno) + ": expected 6 fields, found " +
                             std::to_string(cols.size()));
        SlideIndexEntry e;
        e.slide_id = cols[0];
        e.low_path = cols[1];
        e.high_path = cols[2];
        e.label_path = cols[3];
        e.magnification_low = parse_number<double>(cols[4], lineno, "magnification_low");
        e.magnification_high = parse_number<double>(cols[5], lineno, "magnification_high");
        out.push_back(std::move(e));
    }
    return out;
}

SlideSource load_slide(const SlideIndexEntry& entry, const fs::path& base_dir) {
    SlideSource s;
    s.slide_id = entry.slide_id;
    s.magnification_low = entry.magnification_low;
    s.magnification_high = entry.magnification_high;
    s.image_low = read_rgb(base_dir / entry.low_path);
    s.image_high = read_rgb(base_dir / entry.high_path);
    if (!entry.label_path.empty()) s.label_high = read_label(base_dir / entry.label_path);
    s.validate();
    return s;
}

std::vector<SlideIndexEntry> generate_synthetic_dataset(const SyntheticConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw IoError("cannot create output directory '" + out_dir.string() + "'");

    std::vector<SlideIndexEntry> entries;
    for (int i = 0; i < cfg.slides; ++i) {
        SlideSource slide = render_synthetic_slide(cfg, i);
        SlideIndexEntry e;
        e.slide_id = slide.slide_id;
        const fs::path rel = fs::path("slides") / slide.slide_id;
        e.low_path = rel / "low.png";
        e.high_path = rel / "high.png";
        e.label_path = rel / "label_high.png";
        e.magnification_low = slide.magnification_low;
        e.magnification_high = slide.magnification_high;
        write_rgb(slide.image_low, out_dir / e.low_path);
        write_rgb(slide.image_high, out_dir / e.high_path);
        write_label(slide.label_high, out_dir / e.label_path);
        entries.push_back(std::move(e));
    }
    write_slide_index(entries, out_dir / "slides.csv");
    return entries;
}

std::vector<ContextGroup> tile_dataset(const fs::path& slide_index, const TilingConfig& cfg,
                                       const fs::path& dataset_dir) {
    const auto entries = read_slide_index(slide_index);
    const fs::path base = slide_index.parent_path();
    std::vector<ContextGroup> all;
    for (const auto& e : entries) {
        SlideSource slide = load_slide(e, base);
        auto groups = tile_slide(slide, cfg);
        export_patches(slide, groups, cfg, dataset_dir);
        for (auto& g : groups) all.push_back(std::move(g));
    }
    write_manifest(all, dataset_dir / "manifest.csv");
    return all;
}

}  // namespace dsfwsi
