#pragma once
// Ranking and classification metrics. Single-class inputs yield an explicit
// undefined signal (nullopt), never a silent zero. Computation favours
// exactness over speed; the acceptance oracles compare against O(n^2)
// enumeration.

#include "evseq/common.hpp"

#include <algorithm>
#include <optional>
#include <vector>

namespace evseq {

// P(random positive outranks random negative), ties get half credit.
inline std::optional<double> roc_auc(const std::vector<double>& scores,
                                     const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw InvariantError("roc_auc: size mismatch");
    int64_t n_pos = 0, n_neg = 0;
    for (int l : labels) (l ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    // rank-sum formulation with midranks for ties
    std::vector<size_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        double midrank = 0.5 * static_cast<double>(i + j - 1) + 1.0;  // 1-based
        for (size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum_pos += midrank;
        i = j;
    }
    double n_pos_d = static_cast<double>(n_pos);
    double auc = (rank_sum_pos - n_pos_d * (n_pos_d + 1.0) / 2.0) /
                 (n_pos_d * static_cast<double>(n_neg));
    return auc;
}

// Average precision: mean of precision-at-hit over positives (step function).
inline std::optional<double> pr_auc(const std::vector<double>& scores,
                                    const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw InvariantError("pr_auc: size mismatch");
    int64_t n_pos = 0;
    for (int l : labels) n_pos += l;
    if (n_pos == 0 || n_pos == static_cast<int64_t>(labels.size())) return std::nullopt;

    std::vector<size_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    // descending score; ties broken by original index for determinism
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    double ap = 0.0;
    int64_t hits = 0;
    for (size_t k = 0; k < order.size(); ++k) {
        if (labels[order[k]]) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    }
    return ap / static_cast<double>(n_pos);
}

// Unweighted mean of per-class F1 over the classes present in labels or preds.
inline std::optional<double> f1_macro(const std::vector<int>& preds,
                                      const std::vector<int>& labels) {
    if (preds.size() != labels.size()) throw InvariantError("f1_macro: size mismatch");
    if (labels.empty()) return std::nullopt;
    std::vector<int> classes;
    for (int v : labels) classes.push_back(v);
    for (int v : preds) classes.push_back(v);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.size() < 2) return std::nullopt;
    double f1_sum = 0.0;
    for (int c : classes) {
        int64_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            if (preds[i] == c && labels[i] == c) ++tp;
            else if (preds[i] == c) ++fp;
            else if (labels[i] == c) ++fn;
        }
        double denom = 2.0 * tp + fp + fn;
        f1_sum += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
    }
    return f1_sum / static_cast<double>(classes.size());
}

// Mean average precision over labels (columns) with at least one positive.
inline std::optional<double> mean_ap(const std::vector<std::vector<double>>& score_matrix,
                                     const std::vector<std::vector<int>>& label_matrix) {
    if (score_matrix.size() != label_matrix.size()) throw InvariantError("mAP: size mismatch");
    if (score_matrix.empty()) return std::nullopt;
    size_t n_labels = score_matrix[0].size();
    double ap_sum = 0.0;
    int64_t counted = 0;
    for (size_t k = 0; k < n_labels; ++k) {
        std::vector<double> s(score_matrix.size());
        std::vector<int> y(score_matrix.size());
        int64_t pos = 0;
        for (size_t i = 0; i < score_matrix.size(); ++i) {
            s[i] = score_matrix[i][k];
            y[i] = label_matrix[i][k];
            pos += y[i];
        }
        if (pos == 0) continue;  // labels without positives are skipped
        std::vector<size_t> order(s.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t a, size_t b) { return s[a] > s[b]; });
        double ap = 0.0;
        int64_t hits = 0;
        for (size_t r = 0; r < order.size(); ++r)
            if (y[order[r]]) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(r + 1);
            }
        ap_sum += ap / static_cast<double>(pos);
        ++counted;
    }
    if (counted == 0) return std::nullopt;
    return ap_sum / static_cast<double>(counted);
}

inline double precision_at(const std::vector<int>& preds, const std::vector<int>& labels) {
    int64_t tp = 0, fp = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] && labels[i]) ++tp;
        else if (preds[i]) ++fp;
    }
    return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

inline double recall_at(const std::vector<int>& preds, const std::vector<int>& labels) {
    int64_t tp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] && labels[i]) ++tp;
        else if (labels[i]) ++fn;
    }
    return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

// (x / baseline - 1), the report convention for relative performance
inline double relative_to_baseline(double x, double baseline) { return x / baseline - 1.0; }

} // namespace evseq
