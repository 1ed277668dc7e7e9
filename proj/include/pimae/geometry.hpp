#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace pimae::geometry {

struct Point3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    friend bool operator==(const Point3&, const Point3&) = default;
};

inline double squared_distance(const Point3& a, const Point3& b) {
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    const double dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
}

/// Pinhole camera: 3x4 intrinsics and 4x4 world-to-camera extrinsics, both
/// row-major, plus the image size in pixels.
struct CameraModel {
    std::array<double, 12> intrinsics{};
    std::array<double, 16> extrinsics{};
    int height = 0;
    int width = 0;

    /// Throws InvalidArgument on non-finite entries, non-positive size or a
    /// size that the patch size does not divide.
    void validate(int patch_size) const;
};

struct Projected2 {
    double u = 0.0;
    double v = 0.0;
    double z = 0.0;
};

class PatchGrid {
   public:
    PatchGrid(int patch_size, int height, int width);

    int patch_size() const { return patch_size_; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int height() const { return rows_ * patch_size_; }
    int width() const { return cols_ * patch_size_; }
    int patch_count() const { return rows_ * cols_; }

   private:
    int patch_size_;
    int rows_;
    int cols_;
};

/// h = K * Rt * [x y z 1]^T followed by perspective division. Throws
/// DepthNonPositive when h2 <= 1e-9.
Projected2 project_point(const Point3& p, const CameraModel& cam);

/// Same as project_point but reports a non-positive depth as nullopt.
std::optional<Projected2> try_project_point(const Point3& p, const CameraModel& cam);

/// Row-major patch index of the pixel (floor(u), floor(v)); nullopt when the
/// projection falls outside [0,W) x [0,H).
std::optional<int> patch_index(const Projected2& p, const PatchGrid& grid);

/// Greedy farthest point sampling over squared distances, lowest index wins
/// ties. Throws TooFewPoints if m exceeds the point count.
std::vector<std::size_t> farthest_point_sampling(std::span<const Point3> points, std::size_t m,
                                                 std::size_t seed_index = 0);

/// Indices of the k nearest points to points[center_index], sorted by
/// (squared distance, index). The center itself is included.
std::vector<std::size_t> knn_group(std::span<const Point3> points, std::size_t center_index,
                                   std::size_t k);

}  // namespace pimae::geometry
