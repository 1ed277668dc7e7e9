#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pimae/diff.hpp"
#include "pimae/geometry.hpp"
#include "pimae/tokenizer.hpp"

namespace pimae::losses {

using diff::Tensor;
using geometry::Point3;

struct LossReport {
    double loss_pc = 0.0;
    double loss_img = 0.0;
    double loss_cross = 0.0;
    double loss_total = 0.0;
};

/// Symmetric squared-distance Chamfer distance with mean reduction in each
/// direction. Throws EmptySet if either set is empty.
double chamfer_l2(std::span<const Point3> a, std::span<const Point3> b);

/// Mean over clusters of chamfer_l2(predicted offsets, ground-truth offsets).
/// `offsets` holds one row of group_size*3 values per entry of `clusters`;
/// the ground truth is each group's points minus its center.
Tensor point_loss(const Tensor& offsets, const tokenizer::PointTokenSet& tokens, std::span<const Point3> cloud,
                  std::span<const std::size_t> clusters);

/// Mean squared error over every value of the listed patches.
Tensor image_loss(const Tensor& pixels, const tokenizer::ImagePatchSet& patches,
                  std::span<const std::size_t> patch_indices);

/// Bilinear sample of a rows x cols feature grid ([rows*cols, d]) at a pixel
/// position, with features located at patch centers. Throws OutOfBounds
/// outside the image.
Tensor upsample_feature(const Tensor& grid_features, const geometry::PatchGrid& grid, const geometry::Projected2& p);

struct CrossModalTerm {
    Tensor loss;
    Tensor targets;  // sampled features, one row per in-bounds token
    std::vector<std::size_t> used_rows;
    std::size_t excluded = 0;
};

struct CrossTargetOptions {
    bool detach = true;
    /// When defined, used as the targets instead of sampling image features.
    Tensor frozen_targets;
};

/// Regresses each masked cluster's prediction onto the image feature found
/// at its center's projection. Clusters projecting outside the image are
/// excluded and counted; with none left the loss is 0.
CrossModalTerm cross_modal_loss(const Tensor& predictions, const Tensor& image_features,
                                const tokenizer::PointTokenSet& tokens, std::span<const std::size_t> clusters,
                                const geometry::CameraModel& cam, const geometry::PatchGrid& grid,
                                const CrossTargetOptions& options = {});

/// Unweighted sum; a disabled cross term contributes zero.
LossReport total_loss(double loss_pc, double loss_img, double loss_cross, bool cross_enabled = true);

}  // namespace pimae::losses
