#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "pimae/geometry.hpp"
#include "pimae/image.hpp"

namespace pimae::tokenizer {

using geometry::CameraModel;
using geometry::PatchGrid;
using geometry::Point3;
using Rng = std::mt19937_64;

enum class MaskStrategy { Random, Uniform, Complement };

std::string_view to_string(MaskStrategy strategy);
MaskStrategy parse_strategy(std::string_view name);

/// Number of masked tokens out of `count` for a masking ratio in [0,1).
std::size_t masked_count(double ratio, std::size_t count);

struct PointTokenSet {
    std::vector<std::size_t> center_indices;
    std::vector<Point3> centers;
    std::size_t group_size = 0;
    std::vector<std::size_t> groups;  // cluster-major, group_size indices each
    std::vector<std::uint8_t> visible;  // empty until a mask is sampled

    std::size_t cluster_count() const { return centers.size(); }
    std::span<const std::size_t> group(std::size_t cluster) const {
        return {groups.data() + cluster * group_size, group_size};
    }
    std::vector<std::size_t> visible_indices() const;
    std::vector<std::size_t> masked_indices() const;
};

struct ImagePatchSet {
    PatchGrid grid;
    std::size_t patch_dim = 0;   // S*S*3
    std::vector<double> values;  // patch-major, patch_dim values each
    std::vector<std::uint8_t> visible;

    std::size_t patch_count() const { return static_cast<std::size_t>(grid.patch_count()); }
    std::span<const double> patch(std::size_t index) const {
        return {values.data() + index * patch_dim, patch_dim};
    }
    std::vector<std::size_t> visible_indices() const;
    std::vector<std::size_t> masked_indices() const;
};

struct MaskAlignment {
    MaskStrategy strategy = MaskStrategy::Random;
    std::vector<int> hit_visible;  // sorted, unique
    std::vector<int> hit_masked;   // sorted, unique
    std::size_t dropped = 0;
};

/// FPS centers (seeded at seed_index) and a KNN group per center.
PointTokenSet cluster_points(std::span<const Point3> points, std::size_t m, std::size_t k,
                             std::size_t seed_index = 0);

/// Masks exactly floor(ratio * m) clusters chosen uniformly without replacement.
void sample_point_mask(PointTokenSet& tokens, double ratio, Rng& rng);

/// Splits an image into row-major S x S patches; each patch is flattened as
/// (row, col, channel). Throws ShapeMismatch if the grid does not tile it.
ImagePatchSet patchify_image(const Image& image, const PatchGrid& grid);

/// Visible-center hits, masked-center hits and out-of-bounds count for the
/// current point mask.
MaskAlignment project_hits(const PointTokenSet& tokens, const CameraModel& cam, const PatchGrid& grid);

/// Sets patches.visible according to the strategy and returns the alignment
/// used. Patches hit by visible centers are the primary constraint (masked
/// under complement, visible under uniform); patches hit only by masked
/// centers get the opposite status where the count allows it.
MaskAlignment build_image_mask(const PointTokenSet& tokens, const CameraModel& cam, ImagePatchSet& patches,
                               MaskStrategy strategy, double ratio, Rng& rng);

}  // namespace pimae::tokenizer
