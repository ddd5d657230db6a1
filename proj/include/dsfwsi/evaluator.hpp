#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsfwsi/errors.hpp"

namespace dsfwsi {

/// C x C pixel tally; `at(l, p)` counts pixels labelled l and predicted p.
class ConfusionCounts {
public:
    ConfusionCounts() = default;
    explicit ConfusionCounts(int classes)
        : classes_(classes), cells_(static_cast<std::size_t>(classes) * classes, 0) {}

    int classes() const { return classes_; }
    std::int64_t at(int label, int pred) const { return cells_[index(label, pred)]; }
    std::int64_t& at(int label, int pred) { return cells_[index(label, pred)]; }

    std::int64_t total() const;
    std::int64_t tp(int c) const { return at(c, c); }
    std::int64_t fp(int c) const;  // predicted c, labelled otherwise
    std::int64_t fn(int c) const;  // labelled c, predicted otherwise
    std::int64_t tn(int c) const { return total() - tp(c) - fp(c) - fn(c); }
    std::int64_t support(int c) const { return tp(c) + fn(c); }

    /// Counts are additive over disjoint pixel sets.
    ConfusionCounts& operator+=(const ConfusionCounts& other);
    bool operator==(const ConfusionCounts&) const = default;

private:
    std::size_t index(int label, int pred) const {
        return static_cast<std::size_t>(label) * classes_ + pred;
    }
    int classes_ = 0;
    std::vector<std::int64_t> cells_;
};

/// Tallies `pred` against `label`. Pixels whose label equals `ignore_index`
/// are skipped. Any other value >= `classes` is an ArgumentError; a length
/// mismatch is a PreconditionError.
ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                                 int classes, std::optional<int> ignore_index = std::nullopt);
ConfusionCounts confusion_counts(std::span<const std::int64_t> pred, std::span<const std::int64_t> label,
                                 int classes, std::optional<int> ignore_index = std::nullopt);

struct F1Report {
    std::vector<double> per_class;   // TP / (TP + (FP + FN) / 2); 0 when undefined
    std::vector<bool> present;       // class appears in labels or predictions
    double macro = 0.0;              // unweighted mean over present classes
    double micro = 0.0;              // pooled TP / (TP + (FP + FN) / 2)
    int undefined = 0;               // classes whose F1 was 0/0
};

F1Report f1_score(const ConfusionCounts& counts);

/// trace / total. Throws UndefinedMetricError on an empty tally.
double pixel_accuracy(const ConfusionCounts& counts);

struct Metrics {
    int fold = -1;
    std::vector<double> per_class_f1;
    std::vector<std::int64_t> support;
    double mean_f1 = 0.0;
    double micro_f1 = 0.0;
    double accuracy = 0.0;
    std::int64_t pixels = 0;
    std::int64_t train_groups = 0;
    std::int64_t val_groups = 0;
};

Metrics make_metrics(const ConfusionCounts& counts, int fold = -1);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Mean and standard deviation; sample (n-1) by default, population on
/// request. A single value has std 0 either way.
MeanStd aggregate(std::span<const double> values, bool population = false);

struct CvSummary {
    MeanStd f1;
    MeanStd micro_f1;
    MeanStd accuracy;
    std::size_t folds = 0;
    std::string macro_or_micro = "macro";
};

CvSummary aggregate_cv(std::span<const Metrics> folds, bool population = false);

/// CSV `fold,class,f1,accuracy,support` (one row per fold and class).
std::string report_csv(std::span<const Metrics> folds);
/// JSON `{mean_f1, std_f1, mean_acc, std_acc, macro_or_micro, ...}`.
std::string report_json(const CvSummary& summary);

}  // namespace dsfwsi
