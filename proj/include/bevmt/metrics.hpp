#pragma once

#include <vector>

#include "bevmt/heads.hpp"
#include "bevmt/scene.hpp"

namespace bevmt {

// Simplified detection AP: predictions are greedily matched to the nearest
// unmatched same-class ground-truth center within a distance threshold, in
// descending score order; AP is the all-point area under the resulting
// precision-recall curve. The reported value is the mean over the classes
// that occur in the ground truth and the thresholds {0.5, 1, 2} m.
double simplified_map(const std::vector<std::vector<DecodedBox>>& pred, const std::vector<std::vector<Box>>& gt,
                      int64_t n_classes);

// Dataset-aggregated per-class IoU of thresholded mask probabilities
// (logit > 0 i.e. probability > 0.5). Classes absent from both prediction
// and truth are skipped (their per_class slot is -1); the mean is over the
// rest, or 1 when nothing is countable.
double seg_mean_iou(const std::vector<Tensor>& logits, const std::vector<Tensor>& masks,
                    std::vector<double>* per_class = nullptr);

// Occupancy mIoU over the M semantic classes (empty excluded from the
// mean), aggregated over the dataset. Labels in [0, M].
double occ_mean_iou(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& gt,
                    int64_t m_classes, std::vector<double>* per_class = nullptr);

// Per-voxel argmax labels from [N, M+1] logits; ties go to the smaller id.
std::vector<int> occ_argmax(const Tensor& logits);

}  // namespace bevmt
