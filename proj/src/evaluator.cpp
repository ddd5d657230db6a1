#include "dsfwsi/evaluator.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dsfwsi {

std::int64_t ConfusionCounts::total() const {
    return std::accumulate(cells_.begin(), cells_.end(), std::int64_t{0});
}

std::int64_t ConfusionCounts::fp(int c) const {
    std::int64_t s = 0;
    for (int l = 0; l < classes_; ++l)
        if (l != c) s += at(l, c);
    return s;
}

std::int64_t ConfusionCounts::fn(int c) const {
    std::int64_t s = 0;
    for (int p = 0; p < classes_; ++p)
        if (p != c) s += at(c, p);
    return s;
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
    if (classes_ == 0 && cells_.empty()) {
        *this = other;
        return *this;
    }
    if (other.classes_ != classes_)
        throw PreconditionError("cannot add confusion counts over different class counts");
    for (std::size_t i = 0; i < cells_.size(); ++i) cells_[i] += other.cells_[i];
    return *this;
}

namespace {

template <class T>
ConfusionCounts tally(std::span<const T> pred, std::span<const T> label, int classes,
                      std::optional<int> ignore_index) {
    if (classes < 1) throw ArgumentError("confusion counts need at least one class");
    if (pred.size() != label.size())
        throw PreconditionError("prediction has " + std::to_string(pred.size()) + " pixels, label has " +
                                std::to_string(label.size()));
    ConfusionCounts counts(classes);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto l = static_cast<std::int64_t>(label[i]);
        if (ignore_index && l == *ignore_index) continue;
        const auto p = static_cast<std::int64_t>(pred[i]);
        if (l < 0 || l >= classes)
            throw ArgumentError("label value " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
        if (p < 0 || p >= classes)
            throw ArgumentError("prediction value " + std::to_string(p) + " outside [0, " +
                                std::to_string(classes) + ")");
        ++counts.at(static_cast<int>(l), static_cast<int>(p));
    }
    return counts;
}

}  // namespace

ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                                 int classes, std::optional<int> ignore_index) {
    return tally(pred, label, classes, ignore_index);
}

ConfusionCounts confusion_counts(std::span<const std::int64_t> pred, std::span<const std::int64_t> label,
                                 int classes, std::optional<int> ignore_index) {
    return tally(pred, label, classes, ignore_index);
}

F1Report f1_score(const ConfusionCounts& counts) {
    F1Report r;
    const int n = counts.classes();
    std::int64_t tp_sum = 0, err_sum = 0;
    double macro_sum = 0.0;
    int present = 0;
    for (int c = 0; c < n; ++c) {
        const double tp = static_cast<double>(counts.tp(c));
        const double err = static_cast<double>(counts.fp(c) + counts.fn(c));
        const double denom = tp + 0.5 * err;
        const double f1 = denom > 0.0 ? tp / denom : 0.0;
        r.per_class.push_back(f1);
        r.present.push_back(denom > 0.0);
        if (denom > 0.0) {
            macro_sum += f1;
            ++present;
        } else {
            ++r.undefined;
        }
        tp_sum += counts.tp(c);
        err_sum += counts.fp(c) + counts.fn(c);
    }
    r.macro = present > 0 ? macro_sum / present : 0.0;
    const double micro_denom = static_cast<double>(tp_sum) + 0.5 * static_cast<double>(err_sum);
    r.micro = micro_denom > 0.0 ? static_cast<double>(tp_sum) / micro_denom : 0.0;
    return r;
}

double pixel_accuracy(const ConfusionCounts& counts) {
    const auto total = counts.total();
    if (total == 0) throw UndefinedMetricError("pixel accuracy is undefined with zero evaluated pixels");
    std::int64_t trace = 0;
    for (int c = 0; c < counts.classes(); ++c) trace += counts.tp(c);
    return static_cast<double>(trace) / static_cast<double>(total);
}

Metrics make_metrics(const ConfusionCounts& counts, int fold) {
    Metrics m;
    m.fold = fold;
    const auto f1 = f1_score(counts);
    m.per_class_f1 = f1.per_class;
    m.mean_f1 = f1.macro;
    m.micro_f1 = f1.micro;
    m.pixels = counts.total();
    m.accuracy = m.pixels > 0 ? pixel_accuracy(counts) : 0.0;
    for (int c = 0; c < counts.classes(); ++c) m.support.push_back(counts.support(c));
    return m;
}

MeanStd aggregate(std::span<const double> values, bool population) {
    MeanStd out;
    if (values.empty()) return out;
    const double n = static_cast<double>(values.size());
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() < 2) return out;
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / (population ? n : n - 1.0));
    return out;
}

CvSummary aggregate_cv(std::span<const Metrics> folds, bool population) {
    if (folds.empty()) throw ArgumentError("aggregate_cv needs at least one fold");
    std::vector<double> f1, micro, acc;
    for (const auto& m : folds) {
        f1.push_back(m.mean_f1);
        micro.push_back(m.micro_f1);
        acc.push_back(m.accuracy);
    }
    CvSummary s;
    s.f1 = aggregate(f1, population);
    s.micro_f1 = aggregate(micro, population);
    s.accuracy = aggregate(acc, population);
    s.folds = folds.size();
    return s;
}

std::string report_csv(std::span<const Metrics> folds) {
    std::ostringstream out;
    out.precision(10);
    out << "fold,class,f1,accuracy,support\n";
    for (const auto& m : folds) {
        for (std::size_t c = 0; c < m.per_class_f1.size(); ++c)
            out << m.fold << ',' << c << ',' << m.per_class_f1[c] << ',' << m.accuracy << ','
                << (c < m.support.size() ? m.support[c] : 0) << '\n';
        out << m.fold << ",mean," << m.mean_f1 << ',' << m.accuracy << ',' << m.pixels << '\n';
    }
    return out.str();
}

std::string report_json(const CvSummary& s) {
    nlohmann::json j = {
        {"mean_f1", s.f1.mean},
        {"std_f1", s.f1.std},
        {"mean_micro_f1", s.micro_f1.mean},
        {"std_micro_f1", s.micro_f1.std},
        {"mean_acc", s.accuracy.mean},
        {"std_acc", s.accuracy.std},
        {"macro_or_micro", s.macro_or_micro},
        {"folds", s.folds},
    };
    return j.dump(2) + "\n";
}

}  // namespace dsfwsi
