#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sumnet/tensor.hpp"
#include "sumnet/weighting.hpp"

namespace sumnet {

// Physical pixel size, mm per pixel.
struct Spacing {
    double sy = 1.0;
    double sx = 1.0;
};

struct ConfusionCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t tn = 0;
    std::int64_t fn = 0;
};

inline ConfusionCounts confusion(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape())
        throw validation_error("confusion: shape mismatch " + pred.shape().str() + " vs " +
                               gt.shape().str());
    detail::check_binary(pred, "confusion");
    detail::check_binary(gt, "confusion");
    ConfusionCounts c;
    std::span<const double> p = pred.data(), g = gt.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 1.0)
            (g[i] == 1.0 ? c.tp : c.fp)++;
        else
            (g[i] == 1.0 ? c.fn : c.tn)++;
    }
    return c;
}

// Two empty masks agree perfectly: 1.0 by convention.
inline double dice(const ConfusionCounts& c) {
    const std::int64_t denom = 2 * c.tp + c.fp + c.fn;
    return denom == 0 ? 1.0 : 2.0 * c.tp / denom;
}

inline double jaccard(const ConfusionCounts& c) {
    const std::int64_t denom = c.tp + c.fp + c.fn;
    return denom == 0 ? 1.0 : static_cast<double>(c.tp) / denom;
}

inline std::optional<double> sensitivity(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) return std::nullopt;
    return static_cast<double>(c.tp) / (c.tp + c.fn);
}

inline std::optional<double> specificity(const ConfusionCounts& c) {
    if (c.tn + c.fp == 0) return std::nullopt;
    return static_cast<double>(c.tn) / (c.tn + c.fp);
}

inline std::optional<double> ppv(const ConfusionCounts& c) {
    if (c.tp + c.fp == 0) return std::nullopt;
    return static_cast<double>(c.tp) / (c.tp + c.fp);
}

// Symmetric Hausdorff distance between two contour point sets, in pixels, or
// in mm when spacing is given. Missing (not an error) when either contour is
// empty. Contours stay small, so the all-pairs scan is the production path.
inline std::optional<double> hausdorff(std::span<const Pixel> a, std::span<const Pixel> b,
                                       std::optional<Spacing> spacing = std::nullopt) {
    if (a.empty() || b.empty()) return std::nullopt;
    const double sy = spacing ? spacing->sy : 1.0;
    const double sx = spacing ? spacing->sx : 1.0;
    auto directed = [&](std::span<const Pixel> from, std::span<const Pixel> to) {
        double worst = 0.0;
        for (const Pixel& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const Pixel& q : to) {
                const double dy = (p.y - q.y) * sy;
                const double dx = (p.x - q.x) * sx;
                best = std::min(best, dy * dy + dx * dx);
            }
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::sqrt(std::max(directed(a, b), directed(b, a)));
}

// Percentage area difference |area(pred) - area(gt)| / area(gt); missing when
// the ground truth is empty.
inline std::optional<double> pad(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape())
        throw validation_error("pad: shape mismatch " + pred.shape().str() + " vs " +
                               gt.shape().str());
    detail::check_binary(pred, "pad");
    detail::check_binary(gt, "pad");
    std::int64_t ap = 0, ag = 0;
    for (double v : pred.data()) ap += v == 1.0;
    for (double v : gt.data()) ag += v == 1.0;
    if (ag == 0) return std::nullopt;
    return std::abs(static_cast<double>(ap - ag)) / ag;
}

// One evaluated frame. Missing values stay missing and are excluded from
// aggregation (with the exclusion counted).
struct FrameMetrics {
    int fold = -1;
    std::string patient;
    int frame = 0;
    double dice = 0.0;
    double jaccard = 0.0;
    std::optional<double> hausdorff_px;
    std::optional<double> hausdorff_mm;
    std::optional<double> pad;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
    std::optional<double> ppv;
};

inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{
        "dice", "jaccard", "hausdorff_px", "hausdorff_mm", "pad",
        "sensitivity", "specificity", "ppv"};
    return names;
}

inline std::optional<double> metric_value(const FrameMetrics& f, const std::string& name) {
    if (name == "dice") return f.dice;
    if (name == "jaccard") return f.jaccard;
    if (name == "hausdorff_px") return f.hausdorff_px;
    if (name == "hausdorff_mm") return f.hausdorff_mm;
    if (name == "pad") return f.pad;
    if (name == "sensitivity") return f.sensitivity;
    if (name == "specificity") return f.specificity;
    if (name == "ppv") return f.ppv;
    throw validation_error("unknown metric: " + name);
}

// Full per-frame evaluation of a predicted mask against ground truth.
inline FrameMetrics frame_metrics(const Tensor& pred, const Tensor& gt,
                                  std::optional<Spacing> spacing = std::nullopt) {
    const ConfusionCounts c = confusion(pred, gt);
    FrameMetrics m;
    m.dice = dice(c);
    m.jaccard = jaccard(c);
    m.sensitivity = sensitivity(c);
    m.specificity = specificity(c);
    m.ppv = ppv(c);
    m.pad = pad(pred, gt);
    const std::vector<Pixel> pc = extract_contour(pred);
    const std::vector<Pixel> gc = extract_contour(gt);
    m.hausdorff_px = hausdorff(pc, gc);
    if (spacing) m.hausdorff_mm = hausdorff(pc, gc, spacing);
    return m;
}

struct MetricAggregate {
    double mean = 0.0;
    double stddev = 0.0;  // population
    int n = 0;
    int excluded = 0;
};

struct AggregateRow {
    std::string scope;  // "fold_3", patient id, or "all"
    int n_frames = 0;
    std::vector<MetricAggregate> metrics;  // aligned with metric_names()
};

enum class GroupBy { Fold, Patient, All };

// Arithmetic mean and population standard deviation per metric; missing
// values drop out with a per-metric exclusion count.
inline std::vector<AggregateRow> aggregate(const std::vector<FrameMetrics>& records,
                                           GroupBy group_by) {
    if (records.empty()) throw validation_error("aggregate: no records");

    auto key_of = [&](const FrameMetrics& f) -> std::string {
        switch (group_by) {
            case GroupBy::Fold: return "fold_" + std::to_string(f.fold);
            case GroupBy::Patient: return f.patient;
            case GroupBy::All: return "all";
        }
        return "all";
    };

    std::vector<std::string> keys;
    for (const FrameMetrics& f : records) {
        const std::string k = key_of(f);
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }

    std::vector<AggregateRow> rows;
    for (const std::string& key : keys) {
        AggregateRow row;
        row.scope = key;
        for (const std::string& name : metric_names()) {
            std::vector<double> vals;
            int excluded = 0;
            for (const FrameMetrics& f : records) {
                if (key_of(f) != key) continue;
                if (auto v = metric_value(f, name))
                    vals.push_back(*v);
                else
                    ++excluded;
            }
            MetricAggregate agg;
            agg.n = static_cast<int>(vals.size());
            agg.excluded = excluded;
            if (!vals.empty()) {
                double s = 0.0;
                for (double v : vals) s += v;
                agg.mean = s / vals.size();
                double ss = 0.0;
                for (double v : vals) ss += (v - agg.mean) * (v - agg.mean);
                agg.stddev = std::sqrt(ss / vals.size());
            }
            row.metrics.push_back(agg);
        }
        for (const FrameMetrics& f : records) row.n_frames += key_of(f) == key;
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace detail {

inline std::string csv_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline std::string csv_opt(const std::optional<double>& v) {
    return v ? csv_num(*v) : std::string();
}

}  // namespace detail

// One row per frame: fold, patient, frame index, then every metric.
inline void write_frame_csv(const std::filesystem::path& path,
                            const std::vector<FrameMetrics>& records) {
    std::ofstream out(path);
    if (!out) throw validation_error("write_frame_csv: cannot open " + path.string());
    out << "fold,patient,frame";
    for (const std::string& name : metric_names()) out << "," << name;
    out << "\n";
    for (const FrameMetrics& f : records) {
        out << f.fold << "," << f.patient << "," << f.frame;
        for (const std::string& name : metric_names())
            out << "," << detail::csv_opt(metric_value(f, name));
        out << "\n";
    }
}

// Per-scope mean +/- std table (fold rows plus a pooled "all" row, typically).
inline void write_aggregate_csv(const std::filesystem::path& path,
                                const std::vector<AggregateRow>& rows) {
    std::ofstream out(path);
    if (!out) throw validation_error("write_aggregate_csv: cannot open " + path.string());
    out << "scope,n_frames";
    for (const std::string& name : metric_names())
        out << "," << name << "_mean," << name << "_std," << name << "_excluded";
    out << "\n";
    for (const AggregateRow& row : rows) {
        out << row.scope << "," << row.n_frames;
        for (const MetricAggregate& m : row.metrics) {
            if (m.n > 0)
                out << "," << detail::csv_num(m.mean) << "," << detail::csv_num(m.stddev);
            else
                out << ",,";
            out << "," << m.excluded;
        }
        out << "\n";
    }
}

// Human-readable "0.95 +/- 0.03" style summary.
inline std::string format_aggregate(const AggregateRow& row) {
    std::string s = row.scope + " (" + std::to_string(row.n_frames) + " frames):";
    for (std::size_t i = 0; i < metric_names().size(); ++i) {
        const MetricAggregate& m = row.metrics[i];
        if (m.n == 0) continue;
        char buf[96];
        std::snprintf(buf, sizeof(buf), " %s %.4f ± %.4f", metric_names()[i].c_str(), m.mean,
                      m.stddev);
        s += buf;
        if (m.excluded > 0) s += " (excl " + std::to_string(m.excluded) + ")";
    }
    return s;
}

}  // namespace sumnet
