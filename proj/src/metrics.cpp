#include "bevmt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bevmt {

namespace {

struct RankedPred {
    double score;
    size_t sample, idx;
    double cx, cy;
};

// AP for one (class, threshold): greedy nearest-center matching in score
// order, then the all-point precision-recall area.
double average_precision(const std::vector<RankedPred>& ranked, const std::vector<std::vector<Box>>& gt, int cls,
                         double thresh, int64_t n_gt_cls) {
    if (n_gt_cls == 0) return -1.0;  // caller skips classes without ground truth
    std::vector<std::vector<char>> used(gt.size());
    for (size_t s = 0; s < gt.size(); ++s) used[s].assign(gt[s].size(), 0);

    double ap = 0.0, prev_recall = 0.0;
    int64_t tp = 0;
    for (size_t r = 0; r < ranked.size(); ++r) {
        const RankedPred& p = ranked[r];
        int64_t best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        const auto& boxes = gt[p.sample];
        for (size_t g = 0; g < boxes.size(); ++g) {
            if (boxes[g].cls != cls || used[p.sample][g]) continue;
            const double d = std::hypot(boxes[g].cx - p.cx, boxes[g].cy - p.cy);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int64_t>(g);
            }
        }
        if (best >= 0 && best_d <= thresh) {
            used[p.sample][static_cast<size_t>(best)] = 1;
            ++tp;
            const double recall = static_cast<double>(tp) / static_cast<double>(n_gt_cls);
            const double precision = static_cast<double>(tp) / static_cast<double>(r + 1);
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    return ap;
}

}  // namespace

double simplified_map(const std::vector<std::vector<DecodedBox>>& pred, const std::vector<std::vector<Box>>& gt,
                      int64_t n_classes) {
    if (pred.size() != gt.size()) throw ContractViolation("simplified_map: one prediction list per sample");
    const double thresholds[3] = {0.5, 1.0, 2.0};
    double total = 0.0;
    int64_t counted = 0;
    for (int cls = 0; cls < n_classes; ++cls) {
        int64_t n_gt_cls = 0;
        for (const auto& boxes : gt)
            for (const Box& b : boxes)
                if (b.cls == cls) ++n_gt_cls;
        if (n_gt_cls == 0) continue;

        std::vector<RankedPred> ranked;
        for (size_t s = 0; s < pred.size(); ++s)
            for (size_t i = 0; i < pred[s].size(); ++i)
                if (pred[s][i].box.cls == cls)
                    ranked.push_back({pred[s][i].score, s, i, pred[s][i].box.cx, pred[s][i].box.cy});
        std::stable_sort(ranked.begin(), ranked.end(), [](const RankedPred& a, const RankedPred& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.sample != b.sample) return a.sample < b.sample;
            return a.idx < b.idx;
        });
        for (double t : thresholds) {
            total += average_precision(ranked, gt, cls, t, n_gt_cls);
            ++counted;
        }
    }
    return counted > 0 ? total / static_cast<double>(counted) : 0.0;
}

double seg_mean_iou(const std::vector<Tensor>& logits, const std::vector<Tensor>& masks,
                    std::vector<double>* per_class) {
    if (logits.size() != masks.size() || logits.empty())
        throw ContractViolation("seg_mean_iou: need matching, non-empty prediction and mask lists");
    const int64_t k = logits[0].cols;
    std::vector<int64_t> inter(static_cast<size_t>(k), 0), uni(static_cast<size_t>(k), 0);
    for (size_t s = 0; s < logits.size(); ++s) {
        require_same_shape(logits[s], masks[s], "seg_mean_iou");
        for (int64_t r = 0; r < logits[s].rows; ++r)
            for (int64_t j = 0; j < k; ++j) {
                const bool p = logits[s](r, j) > 0.0;
                const bool g = masks[s](r, j) > 0.5;
                inter[static_cast<size_t>(j)] += (p && g) ? 1 : 0;
                uni[static_cast<size_t>(j)] += (p || g) ? 1 : 0;
            }
    }
    if (per_class) per_class->assign(static_cast<size_t>(k), -1.0);
    double total = 0.0;
    int64_t counted = 0;
    for (int64_t j = 0; j < k; ++j) {
        if (uni[static_cast<size_t>(j)] == 0) continue;
        const double iou =
            static_cast<double>(inter[static_cast<size_t>(j)]) / static_cast<double>(uni[static_cast<size_t>(j)]);
        if (per_class) (*per_class)[static_cast<size_t>(j)] = iou;
        total += iou;
        ++counted;
    }
    return counted > 0 ? total / static_cast<double>(counted) : 1.0;
}

double occ_mean_iou(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& gt,
                    int64_t m_classes, std::vector<double>* per_class) {
    if (pred.size() != gt.size() || pred.empty())
        throw ContractViolation("occ_mean_iou: need matching, non-empty label lists");
    std::vector<int64_t> inter(static_cast<size_t>(m_classes), 0), uni(static_cast<size_t>(m_classes), 0);
    for (size_t s = 0; s < pred.size(); ++s) {
        if (pred[s].size() != gt[s].size()) throw ContractViolation("occ_mean_iou: label size mismatch");
        for (size_t v = 0; v < pred[s].size(); ++v) {
            const int p = pred[s][v], g = gt[s][v];
            if (p < 0 || p > m_classes || g < 0 || g > m_classes)
                throw ContractViolation("occ_mean_iou: label outside [0, M]");
            for (int64_t kk = 0; kk < m_classes; ++kk) {
                const bool pp = p == kk, gg = g == kk;
                inter[static_cast<size_t>(kk)] += (pp && gg) ? 1 : 0;
                uni[static_cast<size_t>(kk)] += (pp || gg) ? 1 : 0;
            }
        }
    }
    if (per_class) per_class->assign(static_cast<size_t>(m_classes), -1.0);
    double total = 0.0;
    int64_t counted = 0;
    for (int64_t kk = 0; kk < m_classes; ++kk) {
        if (uni[static_cast<size_t>(kk)] == 0) continue;
        const double iou =
            static_cast<double>(inter[static_cast<size_t>(kk)]) / static_cast<double>(uni[static_cast<size_t>(kk)]);
        if (per_class) (*per_class)[static_cast<size_t>(kk)] = iou;
        total += iou;
        ++counted;
    }
    return counted > 0 ? total / static_cast<double>(counted) : 1.0;
}

std::vector<int> occ_argmax(const Tensor& logits) {
    std::vector<int> out(static_cast<size_t>(logits.rows));
    for (int64_t r = 0; r < logits.rows; ++r) {
        int64_t best = 0;
        for (int64_t j = 1; j < logits.cols; ++j)
            if (logits(r, j) > logits(r, best)) best = j;
        out[static_cast<size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

}  // namespace bevmt
