#pragma once

// Classification and localization metrics with the aggregation rules used in
// the result tables: per-class values, macro means over present classes only,
// half-up display rounding, and percentile bootstrap intervals. Metrics that
// are undefined on a sample propagate as absent values, never as zeros.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maebench/dataset.hpp"
#include "maebench/errors.hpp"
#include "maebench/rng.hpp"

namespace maebench {

namespace detail {

inline void check_scores_labels(const std::vector<double>& scores,
                                const std::vector<int>& labels, const char* who) {
    if (scores.size() != labels.size())
        throw dim_error(std::string(who) + ": " + std::to_string(scores.size()) +
                        " scores vs " + std::to_string(labels.size()) + " labels");
    if (scores.empty()) throw dim_error(std::string(who) + ": empty input");
    for (int l : labels)
        if (l != 0 && l != 1)
            throw validation_error(std::string(who) + ": labels must be 0/1, got " +
                                   std::to_string(l));
}

}  // namespace detail

// Rank-based (Mann-Whitney) AUROC; tied scores contribute half. Equals the
// fraction of positive/negative pairs ordered correctly.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    detail::check_scores_labels(scores, labels, "auroc");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int l : labels) n_pos += static_cast<std::size_t>(l);
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw undefined_metric_error("auroc: needs both classes, got " +
                                     std::to_string(n_pos) + " positives of " +
                                     std::to_string(n));

    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks across tie groups, then the rank-sum statistic.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k)
            if (labels[idx[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Area under the precision-recall curve as the all-thresholds step integral:
// one (recall, precision) point per distinct score, summed as dR * P.
inline double aupr(const std::vector<double>& scores, const std::vector<int>& labels) {
    detail::check_scores_labels(scores, labels, "aupr");
    std::size_t n_pos = 0;
    for (int l : labels) n_pos += static_cast<std::size_t>(l);
    if (n_pos == 0) throw undefined_metric_error("aupr: no positive labels");

    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double area = 0.0;
    double prev_recall = 0.0;
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        for (std::size_t k = i; k < j; ++k) {
            if (labels[idx[k]] == 1)
                ++tp;
            else
                ++fp;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return area;
}

// F1 and accuracy at a fixed threshold (score >= threshold predicts positive).
// When neither predictions nor labels contain a positive, F1 is 0 by
// convention; a note goes to stderr so silent zeros are visible in logs.
inline std::pair<double, double> f1_and_acc(const std::vector<double>& scores,
                                            const std::vector<int>& labels,
                                            double threshold = 0.5) {
    detail::check_scores_labels(scores, labels, "f1_and_acc");
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= threshold;
        if (pred && labels[i] == 1) ++tp;
        else if (pred) ++fp;
        else if (labels[i] == 1) ++fn;
        else ++tn;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    double f1 = 0.0;
    if (denom == 0)
        std::cerr << "f1_and_acc: no positives predicted or present, f1 set to 0\n";
    else
        f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    const double acc = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
    return {f1, acc};
}

// Arithmetic mean over the classes where the metric exists. Absent classes
// are excluded rather than counted as zero.
inline double macro_average(const std::vector<std::optional<double>>& per_class) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& v : per_class)
        if (v) {
            sum += *v;
            ++count;
        }
    if (count == 0) throw undefined_metric_error("macro_average: no class has a value");
    return sum / static_cast<double>(count);
}

// Display rounding used by the result tables: half away from zero, one
// decimal place.
inline double round_display(double v) {
    return std::floor(v * 10.0 + 0.5) / 10.0;
}

// Percentile bootstrap over resampled (score, label) pairs. Each resample
// draws its own seed from (seed, resample index), so evaluation order or
// parallel execution cannot change the interval. Resamples on which the
// metric is undefined are redrawn up to 10 times.
inline std::pair<double, double> bootstrap_ci(
    const std::function<double(const std::vector<double>&, const std::vector<int>&)>& metric_fn,
    const std::vector<double>& scores, const std::vector<int>& labels,
    std::size_t n_resamples = 1000, double level = 0.95, std::uint64_t seed = 0) {
    if (scores.size() != labels.size() || scores.empty())
        throw dim_error("bootstrap_ci: bad input sizes");
    if (level <= 0.0 || level >= 1.0)
        throw config_error("bootstrap_ci: level must be in (0,1), got " + std::to_string(level));
    if (n_resamples < 2) throw config_error("bootstrap_ci: need at least 2 resamples");

    const std::size_t n = scores.size();
    std::vector<double> stats(n_resamples);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t rep = 0; rep < n_resamples; ++rep) {
        bool done = false;
        for (int attempt = 0; attempt < 10 && !done; ++attempt) {
            rng r(mix_seed(mix_seed(seed, rep), static_cast<std::uint64_t>(attempt)));
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = static_cast<std::size_t>(r.uniform_int(n));
                s[i] = scores[k];
                l[i] = labels[k];
            }
            try {
                stats[rep] = metric_fn(s, l);
                done = true;
            } catch (const undefined_metric_error&) {
            }
        }
        if (!done)
            throw degenerate_sample_error(
                "bootstrap_ci: metric undefined after 10 redraws of resample " +
                std::to_string(rep));
    }
    std::sort(stats.begin(), stats.end());

    // Linear interpolation between order statistics.
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(n_resamples - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, n_resamples - 1);
        const double frac = pos - static_cast<double>(lo);
        return stats[lo] + frac * (stats[hi] - stats[lo]);
    };
    const double alpha = 1.0 - level;
    return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

inline double iou(const box& a, const box& b) {
    auto check = [](const box& x, const char* name) {
        if (!(x.x_min < x.x_max) || !(x.y_min < x.y_max))
            throw validation_error(std::string("iou: degenerate box ") + name);
    };
    check(a, "a");
    check(b, "b");
    const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = ix * iy;
    const double area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
    const double area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
    return inter / (area_a + area_b - inter);
}

struct detection {
    box b;
    double score = 0.0;
};

// Average precision at IoU >= 0.5 for one class. Predictions are taken in
// descending score order and greedily matched to the unmatched ground truth
// with the highest IoU; the PR curve is integrated under its monotone
// precision envelope. A class with no ground truth has no defined value.
namespace detail {

// PR-curve integration shared by both ap50 overloads: precision envelope
// over the ranked true-positive flags, then the step integral.
inline double ap_from_flags(const std::vector<bool>& is_tp, double n_gt) {
    std::vector<double> precision(is_tp.size()), recall(is_tp.size());
    std::size_t tp = 0;
    for (std::size_t i = 0; i < is_tp.size(); ++i) {
        if (is_tp[i]) ++tp;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / n_gt;
    }
    for (std::size_t i = is_tp.size() - 1; i-- > 0;)
        precision[i] = std::max(precision[i], precision[i + 1]);

    double area = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < is_tp.size(); ++i) {
        area += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return area;
}

}  // namespace detail

inline std::optional<double> ap50(const std::vector<detection>& predictions,
                                  const std::vector<box>& ground_truths,
                                  std::size_t class_id) {
    std::vector<const box*> gts;
    for (const box& g : ground_truths)
        if (g.class_id == class_id) gts.push_back(&g);
    if (gts.empty()) return std::nullopt;

    std::vector<const detection*> preds;
    for (const detection& p : predictions)
        if (p.b.class_id == class_id) preds.push_back(&p);
    if (preds.empty()) return 0.0;
    std::stable_sort(preds.begin(), preds.end(),
                     [](const detection* a, const detection* b) { return a->score > b->score; });

    std::vector<bool> gt_used(gts.size(), false);
    std::vector<bool> is_tp(preds.size(), false);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        double best = 0.0;
        std::size_t best_j = gts.size();
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (gt_used[j]) continue;
            const double v = iou(preds[i]->b, *gts[j]);
            if (v > best) {
                best = v;
                best_j = j;
            }
        }
        if (best >= 0.5 && best_j < gts.size()) {
            gt_used[best_j] = true;
            is_tp[i] = true;
        }
    }

    return detail::ap_from_flags(is_tp, static_cast<double>(gts.size()));
}

// Dataset-level AP50: one prediction list and one ground-truth list per
// image. Ranking is global across images but a prediction can only match
// ground truth from its own image; pooling everything into a single list
// would let a box claim a same-class target in a different image.
inline std::optional<double> ap50(const std::vector<std::vector<detection>>& predictions,
                                  const std::vector<std::vector<box>>& ground_truths,
                                  std::size_t class_id) {
    if (predictions.size() != ground_truths.size())
        throw dim_error("ap50: " + std::to_string(predictions.size()) + " prediction lists vs " +
                        std::to_string(ground_truths.size()) + " ground-truth lists");

    std::vector<std::vector<const box*>> gts(ground_truths.size());
    std::size_t n_gt = 0;
    for (std::size_t i = 0; i < ground_truths.size(); ++i)
        for (const box& g : ground_truths[i])
            if (g.class_id == class_id) {
                gts[i].push_back(&g);
                ++n_gt;
            }
    if (n_gt == 0) return std::nullopt;

    struct ranked {
        const detection* p;
        std::size_t img;
    };
    std::vector<ranked> preds;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        for (const detection& p : predictions[i])
            if (p.b.class_id == class_id) preds.push_back({&p, i});
    if (preds.empty()) return 0.0;
    std::stable_sort(preds.begin(), preds.end(),
                     [](const ranked& a, const ranked& b) { return a.p->score > b.p->score; });

    std::vector<std::vector<bool>> gt_used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) gt_used[i].assign(gts[i].size(), false);

    std::vector<bool> is_tp(preds.size(), false);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto& own_gts = gts[preds[i].img];
        auto& own_used = gt_used[preds[i].img];
        double best = 0.0;
        std::size_t best_j = own_gts.size();
        for (std::size_t j = 0; j < own_gts.size(); ++j) {
            if (own_used[j]) continue;
            const double v = iou(preds[i].p->b, *own_gts[j]);
            if (v > best) {
                best = v;
                best_j = j;
            }
        }
        if (best >= 0.5 && best_j < own_gts.size()) {
            own_used[best_j] = true;
            is_tp[i] = true;
        }
    }

    return detail::ap_from_flags(is_tp, static_cast<double>(n_gt));
}

// Per-class classification metrics over the rows where the class is actually
// annotated; unannotated rows are excluded the way "/" columns are. Metrics
// undefined on the remaining rows come back absent.
struct metric_values {
    std::optional<double> auc, aupr, f1, acc, ap50;
};

inline metric_values classification_metrics(const std::vector<double>& scores,
                                            const std::vector<label_state>& labels,
                                            double threshold = 0.5) {
    if (scores.size() != labels.size())
        throw dim_error("classification_metrics: " + std::to_string(scores.size()) +
                        " scores vs " + std::to_string(labels.size()) + " labels");
    std::vector<double> s;
    std::vector<int> l;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == label_state::unannotated) continue;
        s.push_back(scores[i]);
        l.push_back(labels[i] == label_state::positive ? 1 : 0);
    }
    metric_values out;
    if (s.empty()) return out;
    try {
        out.auc = auroc(s, l);
    } catch (const undefined_metric_error&) {
    }
    try {
        out.aupr = aupr(s, l);
    } catch (const undefined_metric_error&) {
    }
    const auto [f1, acc] = f1_and_acc(s, l, threshold);
    out.f1 = f1;
    out.acc = acc;
    return out;
}

struct metric_report {
    std::string dataset;               // row label in rendered tables
    std::vector<std::string> classes;  // column order
    std::vector<metric_values> per_class;
    metric_values macro;
    std::map<std::string, std::pair<double, double>> ci;  // metric name -> interval
    std::size_t n_samples = 0;
    std::uint64_t seed = 0;
};

// Fills the macro fields from the per-class columns; a metric absent from
// every class stays absent in the macro row too.
inline void fill_macro(metric_report& rep) {
    auto mean_of = [&](std::optional<double> metric_values::* field) -> std::optional<double> {
        std::vector<std::optional<double>> column;
        for (const auto& pc : rep.per_class) column.push_back(pc.*field);
        try {
            return macro_average(column);
        } catch (const undefined_metric_error&) {
            return std::nullopt;
        }
    };
    rep.macro.auc = mean_of(&metric_values::auc);
    rep.macro.aupr = mean_of(&metric_values::aupr);
    rep.macro.f1 = mean_of(&metric_values::f1);
    rep.macro.acc = mean_of(&metric_values::acc);
    rep.macro.ap50 = mean_of(&metric_values::ap50);
}

inline nlohmann::json metric_values_to_json(const metric_values& v) {
    nlohmann::json j;
    auto put = [&](const char* name, const std::optional<double>& x) {
        if (x)
            j[name] = *x;
        else
            j[name] = nullptr;
    };
    put("auc", v.auc);
    put("aupr", v.aupr);
    put("f1", v.f1);
    put("acc", v.acc);
    put("ap50", v.ap50);
    return j;
}

inline nlohmann::json report_to_json(const metric_report& rep) {
    nlohmann::json j;
    j["dataset"] = rep.dataset;
    j["classes"] = rep.classes;
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t i = 0; i < rep.classes.size(); ++i)
        per[rep.classes[i]] = metric_values_to_json(
            i < rep.per_class.size() ? rep.per_class[i] : metric_values{});
    j["per_class"] = std::move(per);
    j["macro"] = metric_values_to_json(rep.macro);
    nlohmann::json ci = nlohmann::json::object();
    for (const auto& [name, interval] : rep.ci)
        ci[name] = {interval.first, interval.second};
    j["ci"] = std::move(ci);
    j["n_samples"] = rep.n_samples;
    j["seed"] = rep.seed;
    return j;
}

inline metric_values metric_values_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) throw schema_error(where + ": expected an object of metric values");
    metric_values v;
    auto get = [&](const char* name, std::optional<double>& out) {
        if (!j.contains(name))
            throw schema_error(where + ": missing metric field '" + name + "'");
        const nlohmann::json& x = j.at(name);
        if (x.is_null()) out.reset();
        else if (x.is_number()) out = x.get<double>();
        else throw schema_error(where + ": field '" + name + "' must be a number or null");
    };
    get("auc", v.auc);
    get("aupr", v.aupr);
    get("f1", v.f1);
    get("acc", v.acc);
    get("ap50", v.ap50);
    return v;
}

// Strict inverse of report_to_json: every field present and typed, per_class
// keyed exactly by the class list. Reports travel between the evaluate and
// report commands as files, so silent tolerance here would let a truncated
// or foreign JSON masquerade as results.
inline metric_report report_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw schema_error("metric report: expected a JSON object");
    for (const char* key : {"dataset", "classes", "per_class", "macro", "ci", "n_samples", "seed"})
        if (!j.contains(key)) throw schema_error(std::string("metric report: missing '") + key + "'");

    metric_report rep;
    rep.dataset = j.at("dataset").get<std::string>();
    rep.classes = j.at("classes").get<std::vector<std::string>>();
    const nlohmann::json& per = j.at("per_class");
    if (!per.is_object() || per.size() != rep.classes.size())
        throw schema_error("metric report: per_class must hold exactly the declared classes");
    for (const std::string& c : rep.classes) {
        if (!per.contains(c))
            throw schema_error("metric report: per_class is missing class '" + c + "'");
        rep.per_class.push_back(metric_values_from_json(per.at(c), "class '" + c + "'"));
    }
    rep.macro = metric_values_from_json(j.at("macro"), "macro");
    const nlohmann::json& ci = j.at("ci");
    if (!ci.is_object()) throw schema_error("metric report: ci must be an object");
    for (const auto& [name, interval] : ci.items()) {
        if (!interval.is_array() || interval.size() != 2)
            throw schema_error("metric report: ci '" + name + "' must be a [lo, hi] pair");
        rep.ci[name] = {interval[0].get<double>(), interval[1].get<double>()};
    }
    rep.n_samples = j.at("n_samples").get<std::size_t>();
    rep.seed = j.at("seed").get<std::uint64_t>();
    return rep;
}

}  // namespace maebench
