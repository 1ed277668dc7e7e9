#include "pimae/losses.hpp"

#include <limits>
#include <string>

#include "pimae/error.hpp"

namespace pimae::losses {

using namespace diff;

namespace {

struct ChamferParts {
    double value = 0.0;
    std::vector<std::size_t> nearest_ab;  // for each a, its nearest b
    std::vector<std::size_t> nearest_ba;  // for each b, its nearest a
};

ChamferParts chamfer_parts(std::span<const Point3> a, std::span<const Point3> b) {
    if (a.empty() || b.empty()) fail(ErrorKind::EmptySet, "chamfer distance of an empty set");
    ChamferParts out;
    out.nearest_ab.resize(a.size());
    out.nearest_ba.resize(b.size());
    double ab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < b.size(); ++j) {
            const double d = geometry::squared_distance(a[i], b[j]);
            if (d < best) {
                best = d;
                out.nearest_ab[i] = j;
            }
        }
        ab += best;
    }
    double ba = 0.0;
    for (std::size_t j = 0; j < b.size(); ++j) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = geometry::squared_distance(b[j], a[i]);
            if (d < best) {
                best = d;
                out.nearest_ba[j] = i;
            }
        }
        ba += best;
    }
    out.value = ab / static_cast<double>(a.size()) + ba / static_cast<double>(b.size());
    return out;
}

}  // namespace

double chamfer_l2(std::span<const Point3> a, std::span<const Point3> b) { return chamfer_parts(a, b).value; }

Tensor point_loss(const Tensor& offsets, const tokenizer::PointTokenSet& tokens, std::span<const Point3> cloud,
                  std::span<const std::size_t> clusters) {
    const std::size_t k = tokens.group_size;
    if (offsets.rank() != 2 || offsets.rows() != clusters.size() || offsets.cols() != k * 3) {
        fail(ErrorKind::ShapeMismatch, "point predictions " + shape_string(offsets.shape()) + " for " +
                                           std::to_string(clusters.size()) + " clusters of " + std::to_string(k));
    }
    if (clusters.empty()) fail(ErrorKind::EmptySet, "point loss over no clusters");
    const auto pv = offsets.values();
    std::vector<std::vector<Point3>> preds(clusters.size()), truths(clusters.size());
    std::vector<ChamferParts> parts;
    double total = 0.0;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
        const auto& center = tokens.centers[clusters[c]];
        for (std::size_t i = 0; i < k; ++i) {
            const double* row = pv.data() + c * k * 3 + i * 3;
            preds[c].push_back({row[0], row[1], row[2]});
        }
        for (auto idx : tokens.group(clusters[c])) {
            const auto& p = cloud[idx];
            truths[c].push_back({p.x - center.x, p.y - center.y, p.z - center.z});
        }
        parts.push_back(chamfer_parts(preds[c], truths[c]));
        total += parts.back().value;
    }
    const double n = static_cast<double>(clusters.size());
    return make_result("point_loss", {1}, {total / n}, {offsets},
                       [offsets, preds = std::move(preds), truths = std::move(truths), parts = std::move(parts), k,
                        n](std::span<const double> g) {
                           auto go = accumulate_into(offsets);
                           const double kk = static_cast<double>(k);
                           for (std::size_t c = 0; c < preds.size(); ++c) {
                               double* grow = go.data() + c * k * 3;
                               const auto& P = preds[c];
                               const auto& T = truths[c];
                               for (std::size_t i = 0; i < P.size(); ++i) {
                                   const auto& t = T[parts[c].nearest_ab[i]];
                                   const double f = g[0] * 2.0 / (n * kk);
                                   grow[i * 3 + 0] += f * (P[i].x - t.x);
                                   grow[i * 3 + 1] += f * (P[i].y - t.y);
                                   grow[i * 3 + 2] += f * (P[i].z - t.z);
                               }
                               for (std::size_t j = 0; j < T.size(); ++j) {
                                   const std::size_t i = parts[c].nearest_ba[j];
                                   const double f = g[0] * 2.0 / (n * kk);
                                   grow[i * 3 + 0] += f * (P[i].x - T[j].x);
                                   grow[i * 3 + 1] += f * (P[i].y - T[j].y);
                                   grow[i * 3 + 2] += f * (P[i].z - T[j].z);
                               }
                           }
                       });
}

Tensor image_loss(const Tensor& pixels, const tokenizer::ImagePatchSet& patches,
                  std::span<const std::size_t> patch_indices) {
    if (pixels.rank() != 2 || pixels.rows() != patch_indices.size() || pixels.cols() != patches.patch_dim) {
        fail(ErrorKind::ShapeMismatch, "pixel predictions " + shape_string(pixels.shape()) + " for " +
                                           std::to_string(patch_indices.size()) + " patches");
    }
    if (patch_indices.empty()) fail(ErrorKind::EmptySet, "image loss over no patches");
    std::vector<double> target;
    target.reserve(pixels.size());
    for (auto p : patch_indices) {
        auto patch = patches.patch(p);
        target.insert(target.end(), patch.begin(), patch.end());
    }
    auto diff = sub(pixels, Tensor::constant(pixels.shape(), std::move(target)));
    return mean(mul(diff, diff));
}

Tensor upsample_feature(const Tensor& grid_features, const geometry::PatchGrid& grid, const geometry::Projected2& p) {
    if (!(p.u >= 0.0 && p.v >= 0.0 && p.u < grid.width() && p.v < grid.height())) {
        fail(ErrorKind::OutOfBounds, "sample at (" + std::to_string(p.u) + ", " + std::to_string(p.v) +
                                         ") outside the image");
    }
    const double s = grid.patch_size();
    const std::array<double, 2> cell{p.u / s - 0.5, p.v / s - 0.5};
    return bilinear_sample_2d(grid_features, static_cast<std::size_t>(grid.rows()),
                              static_cast<std::size_t>(grid.cols()), std::span(&cell, 1));
}

CrossModalTerm cross_modal_loss(const Tensor& predictions, const Tensor& image_features,
                                const tokenizer::PointTokenSet& tokens, std::span<const std::size_t> clusters,
                                const geometry::CameraModel& cam, const geometry::PatchGrid& grid,
                                const CrossTargetOptions& options) {
    CrossModalTerm term;
    std::vector<std::array<double, 2>> samples;
    const double s = grid.patch_size();
    for (std::size_t row = 0; row < clusters.size(); ++row) {
        auto projected = geometry::try_project_point(tokens.centers[clusters[row]], cam);
        if (!projected || !geometry::patch_index(*projected, grid)) {
            ++term.excluded;
            continue;
        }
        term.used_rows.push_back(row);
        samples.push_back({projected->u / s - 0.5, projected->v / s - 0.5});
    }
    if (term.used_rows.empty()) {
        term.loss = Tensor::scalar(0.0);
        return term;
    }
    if (options.frozen_targets.defined()) {
        term.targets = options.frozen_targets;
    } else {
        const Tensor source = options.detach ? image_features.detach() : image_features;
        term.targets = bilinear_sample_2d(source, static_cast<std::size_t>(grid.rows()),
                                          static_cast<std::size_t>(grid.cols()), samples);
    }
    auto diff = sub(gather_rows(predictions, term.used_rows), term.targets);
    term.loss = mean(mul(diff, diff));
    return term;
}

LossReport total_loss(double loss_pc, double loss_img, double loss_cross, bool cross_enabled) {
    LossReport r;
    r.loss_pc = loss_pc;
    r.loss_img = loss_img;
    r.loss_cross = cross_enabled ? loss_cross : 0.0;
    r.loss_total = r.loss_pc + r.loss_img + r.loss_cross;
    return r;
}

}  // namespace pimae::losses
