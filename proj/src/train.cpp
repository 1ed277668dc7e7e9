#include "pimae/train.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <thread>

#include <Eigen/Dense>

#include "pimae/error.hpp"

namespace pimae::train {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Profile profile) {
    switch (profile) {
        case Profile::Paper: return "paper";
        case Profile::Desk: return "desk";
        case Profile::Tiny: return "tiny";
    }
    return "desk";
}

Profile parse_profile(std::string_view name) {
    if (name == "paper") return Profile::Paper;
    if (name == "desk") return Profile::Desk;
    if (name == "tiny") return Profile::Tiny;
    fail(ErrorKind::TypeError, "unknown profile '" + std::string(name) + "'");
}

ModelConfig model_config_for(Profile profile) {
    switch (profile) {
        case Profile::Paper: return ModelConfig::paper();
        case Profile::Desk: return ModelConfig::desk();
        case Profile::Tiny: return ModelConfig::tiny();
    }
    return ModelConfig::desk();
}

void TrainConfig::validate() const {
    if (!(base_lr > 0.0)) fail(ErrorKind::InvalidArgument, "base_lr must be positive");
    if (weight_decay < 0.0) fail(ErrorKind::InvalidArgument, "weight_decay must be non-negative");
    if (batch_size == 0) fail(ErrorKind::InvalidArgument, "batch_size must be positive");
    if (total_steps == 0) fail(ErrorKind::InvalidArgument, "total steps must be positive");
    if (warmup_steps >= total_steps) fail(ErrorKind::InvalidArgument, "warmup must be shorter than the run");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        fail(ErrorKind::InvalidArgument, "Adam betas must lie in [0,1)");
    }
    tokenizer::masked_count(point_mask_ratio, 1);
    tokenizer::masked_count(image_mask_ratio, 1);
}

// ---------------------------------------------------------------- config json

namespace {

template <typename T>
T typed(const json& value, const std::string& key) {
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!value.is_boolean()) throw std::invalid_argument("a boolean");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!value.is_string()) throw std::invalid_argument("a string");
        } else if constexpr (std::is_integral_v<T>) {
            if (!value.is_number_integer() || (std::is_unsigned_v<T> && value.get<long long>() < 0)) {
                throw std::invalid_argument("an integer");
            }
        } else {
            if (!value.is_number()) throw std::invalid_argument("a number");
        }
        return value.get<T>();
    } catch (const std::exception& e) {
        fail(ErrorKind::TypeError, "key '" + key + "' expects " + e.what() + ", got " + value.dump());
    }
}

}  // namespace

ordered_json to_json(const ModelConfig& c) {
    return ordered_json{{"enc_dim", c.enc_dim},
                        {"enc_heads", c.enc_heads},
                        {"dec_dim", c.dec_dim},
                        {"dec_heads", c.dec_heads},
                        {"specific_enc_depth", c.specific_enc_depth},
                        {"shared_enc_depth", c.shared_enc_depth},
                        {"shared_dec_depth", c.shared_dec_depth},
                        {"specific_dec_depth", c.specific_dec_depth},
                        {"patch_size", c.patch_size},
                        {"image_height", c.image_height},
                        {"image_width", c.image_width},
                        {"num_points", c.num_points},
                        {"num_clusters", c.num_clusters},
                        {"group_size", c.group_size},
                        {"point_hidden", c.point_hidden},
                        {"branches", std::string(model::to_string(c.branches))},
                        {"cross_modal", c.cross_modal}};
}

ordered_json to_json(const TrainConfig& c) {
    return ordered_json{{"base_lr", c.base_lr},
                        {"weight_decay", c.weight_decay},
                        {"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"adam_eps", c.adam_eps},
                        {"batch_size", c.batch_size},
                        {"steps", c.total_steps},
                        {"warmup_steps", c.warmup_steps},
                        {"seed", c.seed},
                        {"profile", std::string(to_string(c.profile))},
                        {"strategy", std::string(tokenizer::to_string(c.strategy))},
                        {"point_mask_ratio", c.point_mask_ratio},
                        {"image_mask_ratio", c.image_mask_ratio},
                        {"resample_masks", c.resample_masks}};
}

void update_from_json(ModelConfig& c, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (key == "enc_dim") c.enc_dim = typed<std::size_t>(value, key);
        else if (key == "enc_heads") c.enc_heads = typed<std::size_t>(value, key);
        else if (key == "dec_dim") c.dec_dim = typed<std::size_t>(value, key);
        else if (key == "dec_heads") c.dec_heads = typed<std::size_t>(value, key);
        else if (key == "specific_enc_depth") c.specific_enc_depth = typed<std::size_t>(value, key);
        else if (key == "shared_enc_depth") c.shared_enc_depth = typed<std::size_t>(value, key);
        else if (key == "shared_dec_depth") c.shared_dec_depth = typed<std::size_t>(value, key);
        else if (key == "specific_dec_depth") c.specific_dec_depth = typed<std::size_t>(value, key);
        else if (key == "patch_size") c.patch_size = typed<int>(value, key);
        else if (key == "image_height") c.image_height = typed<int>(value, key);
        else if (key == "image_width") c.image_width = typed<int>(value, key);
        else if (key == "num_points") c.num_points = typed<std::size_t>(value, key);
        else if (key == "num_clusters") c.num_clusters = typed<std::size_t>(value, key);
        else if (key == "group_size") c.group_size = typed<std::size_t>(value, key);
        else if (key == "point_hidden") c.point_hidden = typed<std::size_t>(value, key);
        else if (key == "branches") c.branches = model::parse_branches(typed<std::string>(value, key));
        else if (key == "cross_modal") c.cross_modal = typed<bool>(value, key);
        else fail(ErrorKind::UnknownKey, "unknown model key '" + key + "'");
    }
}

void update_from_json(TrainConfig& c, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (key == "base_lr") c.base_lr = typed<double>(value, key);
        else if (key == "weight_decay") c.weight_decay = typed<double>(value, key);
        else if (key == "beta1") c.beta1 = typed<double>(value, key);
        else if (key == "beta2") c.beta2 = typed<double>(value, key);
        else if (key == "adam_eps") c.adam_eps = typed<double>(value, key);
        else if (key == "batch_size") c.batch_size = typed<std::size_t>(value, key);
        else if (key == "steps") c.total_steps = typed<std::size_t>(value, key);
        else if (key == "warmup_steps") c.warmup_steps = typed<std::size_t>(value, key);
        else if (key == "seed") c.seed = typed<std::uint64_t>(value, key);
        else if (key == "profile") c.profile = parse_profile(typed<std::string>(value, key));
        else if (key == "strategy") c.strategy = tokenizer::parse_strategy(typed<std::string>(value, key));
        else if (key == "point_mask_ratio") c.point_mask_ratio = typed<double>(value, key);
        else if (key == "image_mask_ratio") c.image_mask_ratio = typed<double>(value, key);
        else if (key == "resample_masks") c.resample_masks = typed<bool>(value, key);
        else fail(ErrorKind::UnknownKey, "unknown training key '" + key + "'");
    }
}

// ------------------------------------------------------------------ optimizer

double lr_at(std::size_t step, const TrainConfig& cfg) {
    if (step >= cfg.total_steps) return 0.0;
    if (step < cfg.warmup_steps) {
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    const double t = static_cast<double>(step - cfg.warmup_steps) /
                     static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return std::max(0.0, cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

AdamState AdamState::zeros_like(const ModelWeights& weights) {
    AdamState s;
    for (const auto& [name, t] : weights.params()) {
        s.first[name].assign(t.size(), 0.0);
        s.second[name].assign(t.size(), 0.0);
    }
    return s;
}

void adamw_update(std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v,
                  std::size_t t, double lr, const TrainConfig& cfg) {
    if (w.size() != g.size() || w.size() != m.size() || w.size() != v.size()) {
        fail(ErrorKind::ShapeMismatch, "AdamW buffers disagree in size");
    }
    const double decay = 1.0 - lr * cfg.weight_decay;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        w[i] = w[i] * decay;
        w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
}

void adamw_step(ModelWeights& weights, AdamState& state, double lr, const TrainConfig& cfg) {
    const std::size_t t = ++state.step;
    for (auto& [name, tensor] : weights.params()) {
        auto& m = state.first[name];
        auto& v = state.second[name];
        if (m.size() != tensor.size()) m.assign(tensor.size(), 0.0);
        if (v.size() != tensor.size()) v.assign(tensor.size(), 0.0);
        adamw_update(tensor.mutable_values(), tensor.grad(), m, v, t, lr, cfg);
    }
}

// ------------------------------------------------------------- scene synthesis

namespace {

using Vec3 = std::array<double, 3>;

struct Box {
    Vec3 lo;
    Vec3 hi;
    Vec3 color;
};

struct SlabHit {
    double t_near = -std::numeric_limits<double>::infinity();
    double t_far = std::numeric_limits<double>::infinity();
    int far_face = -1;
};

std::optional<SlabHit> intersect(const Vec3& origin, const Vec3& dir, const Box& box) {
    SlabHit h;
    for (int a = 0; a < 3; ++a) {
        if (std::abs(dir[a]) < 1e-15) {
            if (origin[a] < box.lo[a] || origin[a] > box.hi[a]) return std::nullopt;
            continue;
        }
        double t1 = (box.lo[a] - origin[a]) / dir[a];
        double t2 = (box.hi[a] - origin[a]) / dir[a];
        if (t1 > t2) std::swap(t1, t2);
        h.t_near = std::max(h.t_near, t1);
        if (t2 < h.t_far) {
            h.t_far = t2;
            h.far_face = a * 2 + (dir[a] > 0 ? 1 : 0);
        }
    }
    if (h.t_near > h.t_far) return std::nullopt;
    return h;
}

struct SceneLayout {
    Vec3 eye;
    std::array<double, 9> rotation;  // world to camera, row-major
    double focal, cx, cy;
    Box room;
    std::array<Vec3, 6> wall_colors;
    std::vector<Box> objects;
};

struct RayHit {
    Vec3 point;
    Vec3 color;
};

RayHit cast(const SceneLayout& s, double u, double v) {
    const Vec3 local{(u - s.cx) / s.focal, (v - s.cy) / s.focal, 1.0};
    const auto& r = s.rotation;
    // Camera to world is the transpose of the rotation.
    const Vec3 dir{r[0] * local[0] + r[3] * local[1] + r[6] * local[2],
                   r[1] * local[0] + r[4] * local[1] + r[7] * local[2],
                   r[2] * local[0] + r[5] * local[1] + r[8] * local[2]};
    auto room = intersect(s.eye, dir, s.room);
    double best_t = room->t_far;
    Vec3 color = s.wall_colors[static_cast<std::size_t>(room->far_face)];
    for (const auto& obj : s.objects) {
        auto hit = intersect(s.eye, dir, obj);
        if (hit && hit->t_near > 1e-6 && hit->t_near < best_t) {
            best_t = hit->t_near;
            color = obj.color;
        }
    }
    return {{s.eye[0] + best_t * dir[0], s.eye[1] + best_t * dir[1], s.eye[2] + best_t * dir[2]}, color};
}

Vec3 cross3(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalized(const Vec3& a) {
    const double n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    return {a[0] / n, a[1] / n, a[2] / n};
}

// World frame: x right, y down, z forward; the floor is at y = 1.2.
SceneLayout random_layout(std::mt19937_64& rng, const ModelConfig& cfg) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    SceneLayout s;
    constexpr double floor_y = 1.2;
    s.room = {{-3.0, -1.5, -1.0}, {3.0, floor_y, 7.0}, {0, 0, 0}};
    for (auto& c : s.wall_colors) c = {range(0.25, 0.75), range(0.25, 0.75), range(0.25, 0.75)};
    const int count = 3 + static_cast<int>(rng() % 4);
    for (int i = 0; i < count; ++i) {
        const double sx = range(0.4, 1.2), sy = range(0.3, 1.2), sz = range(0.4, 1.2);
        const double x = range(-2.2, 2.2), z = range(1.5, 5.5);
        s.objects.push_back({{x - sx / 2, floor_y - sy, z - sz / 2},
                             {x + sx / 2, floor_y, z + sz / 2},
                             {range(0.05, 0.95), range(0.05, 0.95), range(0.05, 0.95)}});
    }
    s.eye = {range(-0.5, 0.5), range(-0.2, 0.2), range(-0.5, 0.0)};
    const double yaw = range(-0.25, 0.25), pitch = range(0.05, 0.2);
    const Vec3 forward{std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch)};
    const Vec3 right = normalized(cross3({0, 1, 0}, forward));
    const Vec3 down = cross3(forward, right);
    s.rotation = {right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1], forward[2]};
    s.focal = 0.8 * cfg.image_width;
    s.cx = cfg.image_width / 2.0;
    s.cy = cfg.image_height / 2.0;
    return s;
}

CameraModel camera_of(const SceneLayout& s, const ModelConfig& cfg) {
    CameraModel cam;
    cam.intrinsics = {s.focal, 0, s.cx, 0, 0, s.focal, s.cy, 0, 0, 0, 1, 0};
    const auto& r = s.rotation;
    std::array<double, 3> t{};
    for (int i = 0; i < 3; ++i) t[i] = -(r[i * 3] * s.eye[0] + r[i * 3 + 1] * s.eye[1] + r[i * 3 + 2] * s.eye[2]);
    cam.extrinsics = {r[0], r[1], r[2], t[0], r[3], r[4], r[5], t[1], r[6], r[7], r[8], t[2], 0, 0, 0, 1};
    cam.height = cfg.image_height;
    cam.width = cfg.image_width;
    return cam;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const ModelConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const auto layout = random_layout(rng, cfg);
    Scene scene;
    scene.cam = camera_of(layout, cfg);
    scene.provenance = "synthetic:" + std::to_string(seed);
    scene.image = Image(cfg.image_height, cfg.image_width);
    for (int r = 0; r < cfg.image_height; ++r) {
        for (int c = 0; c < cfg.image_width; ++c) {
            const auto hit = cast(layout, c + 0.5, r + 0.5);
            for (int ch = 0; ch < 3; ++ch) scene.image.at(r, c, ch) = hit.color[ch];
        }
    }
    const std::size_t pixels = static_cast<std::size_t>(cfg.image_height) * cfg.image_width;
    if (cfg.num_points > pixels) fail(ErrorKind::InvalidArgument, "more points requested than pixels");
    std::vector<std::size_t> order(pixels);
    for (std::size_t i = 0; i < pixels; ++i) order[i] = i;
    for (std::size_t i = 0; i < cfg.num_points; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pixels - 1);
        std::swap(order[i], order[pick(rng)]);
    }
    for (std::size_t i = 0; i < cfg.num_points; ++i) {
        const int r = static_cast<int>(order[i] / cfg.image_width);
        const int c = static_cast<int>(order[i] % cfg.image_width);
        const auto hit = cast(layout, c + 0.5, r + 0.5);
        scene.points.push_back({hit.point[0], hit.point[1], hit.point[2]});
        scene.point_colors.push_back(hit.color);
    }
    return scene;
}

std::vector<Scene> generate_scenes(std::uint64_t first, std::size_t count, const ModelConfig& cfg) {
    std::vector<Scene> out(count);
    parallel_for(count, [&](std::size_t i) { out[i] = generate_scene(first + i, cfg); });
    return out;
}

// ------------------------------------------------------------------- pipeline

TokenizedScene tokenize_scene(const Scene& scene, const ModelConfig& cfg, MaskStrategy strategy, double point_ratio,
                              double image_ratio, std::uint64_t seed) {
    scene.cam.validate(cfg.patch_size);
    if (scene.cam.height != cfg.image_height || scene.cam.width != cfg.image_width) {
        fail(ErrorKind::DimensionMismatch, "scene image " + std::to_string(scene.cam.height) + "x" +
                                               std::to_string(scene.cam.width) + " does not match the model");
    }
    TokenizedScene t{&scene, tokenizer::cluster_points(scene.points, cfg.num_clusters, cfg.group_size, 0),
                     tokenizer::patchify_image(scene.image, cfg.grid()), {}};
    tokenizer::Rng rng(seed);
    tokenizer::sample_point_mask(t.tokens, point_ratio, rng);
    t.alignment = tokenizer::build_image_mask(t.tokens, scene.cam, t.patches, strategy, image_ratio, rng);
    return t;
}

SceneForward evaluate_scene(const ModelConfig& cfg, const ModelWeights& weights, const TokenizedScene& scene,
                            const losses::CrossTargetOptions& cross_options, bool record_attention) {
    SceneForward f;
    f.latents = model::forward(cfg, weights, scene.tokens, scene.scene->points, scene.patches, record_attention);
    f.recon = model::heads(cfg, weights, f.latents);
    f.loss_pc = f.recon.offsets.defined()
                    ? losses::point_loss(f.recon.offsets, scene.tokens, scene.scene->points, f.latents.pc_masked)
                    : diff::Tensor::scalar(0.0);
    f.loss_img = f.recon.pixels.defined() ? losses::image_loss(f.recon.pixels, scene.patches, f.latents.img_masked)
                                          : diff::Tensor::scalar(0.0);
    if (f.recon.cross.defined()) {
        f.cross = losses::cross_modal_loss(f.recon.cross, f.latents.img_l3, scene.tokens, f.latents.pc_masked,
                                           scene.scene->cam, scene.patches.grid, cross_options);
        f.loss_cross = f.cross.loss;
    } else {
        f.loss_cross = diff::Tensor::scalar(0.0);
    }
    f.total = diff::add(diff::add(f.loss_pc, f.loss_img), f.loss_cross);
    f.report = losses::total_loss(f.loss_pc.item(), f.loss_img.item(), f.loss_cross.item(), cfg.cross_active());
    return f;
}

std::uint64_t mask_seed(const TrainConfig& cfg, std::size_t step, std::size_t scene_index) {
    // splitmix64 over the three inputs
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    const std::uint64_t s = cfg.resample_masks ? step : 0;
    return mix(mix(mix(cfg.seed) ^ s) ^ (scene_index * 0x632be59bd9b4e019ULL));
}

LossReport train_step(std::span<const TokenizedScene> batch, ModelWeights& weights, AdamState& state,
                      const ModelConfig& mcfg, const TrainConfig& tcfg, std::size_t step) {
    if (batch.empty()) fail(ErrorKind::InvalidArgument, "empty batch");
    for (const auto& [name, t] : weights.params()) {
        for (double v : t.values()) {
            if (!std::isfinite(v)) fail(ErrorKind::NonFinite, "parameter '" + name + "' is not finite");
        }
    }
    weights.zero_grad();
    const double share = 1.0 / static_cast<double>(batch.size());
    double pc = 0.0, img = 0.0, cross = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto f = evaluate_scene(mcfg, weights, batch[i]);
        if (!std::isfinite(f.report.loss_total)) {
            fail(ErrorKind::NonFinite, "loss of batch scene " + std::to_string(i) + " is not finite");
        }
        diff::scale(f.total, share).backward();
        pc += f.report.loss_pc * share;
        img += f.report.loss_img * share;
        cross += f.report.loss_cross * share;
    }
    for (const auto& [name, t] : weights.params()) {
        for (double g : t.grad()) {
            if (!std::isfinite(g)) fail(ErrorKind::NonFinite, "gradient of '" + name + "' is not finite");
        }
    }
    adamw_step(weights, state, lr_at(step, tcfg), tcfg);
    return losses::total_loss(pc, img, cross, mcfg.cross_active());
}

namespace {

// Writes the minimum-norm solution of [H 1] W = T into a head's weight
// (input-major) and bias.
void solve_head(const Eigen::MatrixXd& h, const Eigen::MatrixXd& targets, diff::Tensor& weight, diff::Tensor& bias) {
    Eigen::MatrixXd a(h.rows(), h.cols() + 1);
    a << h, Eigen::VectorXd::Ones(h.rows());
    const Eigen::MatrixXd w = a.completeOrthogonalDecomposition().solve(targets);
    auto wv = weight.mutable_values();
    auto bv = bias.mutable_values();
    const auto d = static_cast<Eigen::Index>(h.cols());
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
        for (Eigen::Index j = 0; j < d; ++j) wv[static_cast<std::size_t>(j * w.cols() + c)] = w(j, c);
        bv[static_cast<std::size_t>(c)] = w(d, c);
    }
}

// Puts every term a small generic residual away from its minimum.
// head_pc predicts the true offsets moved by 0.03 of the group's closest-pair
// distance, so each prediction keeps a unique nearest target. Masked patch
// values and cross targets become the current predictions plus 0.03 noise,
// which leaves head_img and head_cross at their small initial gain.
losses::CrossTargetOptions place_near_minimum(const ModelConfig& cfg, ModelWeights& weights, TokenizedScene& scene,
                                              std::mt19937_64& rng) {
    constexpr double kResidual = 0.03;
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto& cloud = scene.scene->points;
    const std::size_t k = cfg.group_size;
    {
        const auto f = evaluate_scene(cfg, weights, scene);
        const auto& masked = f.latents.pc_masked;
        Eigen::MatrixXd h(masked.size(), cfg.dec_dim), offsets(masked.size(), 3 * k);
        for (std::size_t r = 0; r < masked.size(); ++r) {
            for (std::size_t j = 0; j < cfg.dec_dim; ++j) h(r, j) = f.latents.pc_dec.at(masked[r], j);
            const auto group = scene.tokens.group(masked[r]);
            double closest = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < k; ++i) {
                for (std::size_t j = i + 1; j < k; ++j) {
                    closest = std::min(closest, geometry::squared_distance(cloud[group[i]], cloud[group[j]]));
                }
            }
            closest = std::sqrt(closest);
            const auto& center = scene.tokens.centers[masked[r]];
            for (std::size_t i = 0; i < k; ++i) {
                const Eigen::Vector3d dir = Eigen::Vector3d(normal(rng), normal(rng), normal(rng)).normalized();
                const auto& p = cloud[group[i]];
                const Eigen::Vector3d base(p.x - center.x, p.y - center.y, p.z - center.z);
                offsets.block<1, 3>(r, 3 * i) = (base + kResidual * closest * dir).transpose();
            }
        }
        solve_head(h, offsets, weights["head_pc.w"], weights["head_pc.b"]);
    }

    const auto f = evaluate_scene(cfg, weights, scene);
    const std::size_t pd = scene.patches.patch_dim;
    for (std::size_t r = 0; r < f.latents.img_masked.size(); ++r) {
        double* patch = scene.patches.values.data() + f.latents.img_masked[r] * pd;
        for (std::size_t j = 0; j < pd; ++j) patch[j] = f.recon.pixels.at(r, j) + kResidual * normal(rng);
    }
    losses::CrossTargetOptions options;
    const auto& used = f.cross.used_rows;
    if (!used.empty()) {
        const std::size_t o = f.recon.cross.cols();
        std::vector<double> targets(used.size() * o);
        for (std::size_t i = 0; i < used.size(); ++i) {
            for (std::size_t j = 0; j < o; ++j) targets[i * o + j] = f.recon.cross.at(used[i], j) + kResidual * normal(rng);
        }
        options.frozen_targets = diff::Tensor::constant({used.size(), o}, std::move(targets));
    }
    return options;
}

}  // namespace

diff::GradCheckResult end_to_end_grad_check(std::uint64_t seed, double eps) {
    const auto cfg = ModelConfig::tiny();
    const auto scene = generate_scene(seed, cfg);
    auto tokenized = tokenize_scene(scene, cfg, MaskStrategy::Complement, 0.6, 0.6, seed);
    auto weights = ModelWeights::initialize(cfg, seed);
    // Roundoff in a central difference scales with the loss, truncation with
    // the curvature, and the smallest gradients with the residual. The check
    // point therefore has unit-scale generic activations, a small residual in
    // every term and low-gain heads. Training toward such a point instead
    // settles on max-pool and Chamfer ties.
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& [name, t] : weights.params()) {
        if (name.starts_with("head_")) continue;
        const bool matrix = t.rank() == 2 && name.ends_with(".w");
        const double spread = matrix ? 0.5 / std::sqrt(static_cast<double>(t.rows())) : 0.05;
        for (double& v : t.mutable_values()) v += spread * normal(rng);
    }
    const auto options = place_near_minimum(cfg, weights, tokenized, rng);
    const auto params = weights.tensors();
    return diff::grad_check([&] { return evaluate_scene(cfg, weights, tokenized, options).total; }, params, eps);
}

// ----------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'P', 'I', 'M', 'A', 'E', 'C', 'K', '1'};
constexpr int kFormatVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t offset) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    ordered_json header;
    header["version"] = kFormatVersion;
    header["model"] = to_json(ckpt.model);
    header["train"] = to_json(ckpt.train);
    header["step"] = ckpt.step;
    header["optimizer_step"] = ckpt.optimizer.step;
    header["tensors"] = ordered_json::array();
    std::string data;
    auto add_tensor = [&](const std::string& name, const diff::Shape& shape, std::span<const double> values) {
        header["tensors"].push_back({{"name", name}, {"shape", shape}, {"offset", data.size()}});
        for (double v : values) put_u64(data, std::bit_cast<std::uint64_t>(v));
    };
    for (const auto& [name, t] : ckpt.weights.params()) {
        add_tensor("param/" + name, t.shape(), t.values());
        add_tensor("adam_m/" + name, t.shape(), ckpt.optimizer.first.at(name));
        add_tensor("adam_v/" + name, t.shape(), ckpt.optimizer.second.at(name));
    }
    const std::string header_text = header.dump();
    std::string out(kMagic, kMagic + 8);
    put_u64(out, header_text.size());
    out += header_text;
    out += data;
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) fail(ErrorKind::IoError, "cannot write " + path.string());
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) fail(ErrorKind::IoError, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) fail(ErrorKind::IoError, "cannot read " + path.string());
    const std::string in((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    if (in.size() < 8) fail(ErrorKind::Truncated, path.string() + " is shorter than the magic");
    if (!std::equal(kMagic, kMagic + 8, in.begin())) fail(ErrorKind::BadMagic, path.string() + " is not a checkpoint");
    if (in.size() < 16) fail(ErrorKind::Truncated, path.string() + " has no header length");
    const std::uint64_t header_len = get_u64(in, 8);
    if (header_len > in.size() - 16) fail(ErrorKind::Truncated, path.string() + " header is cut short");
    json header;
    try {
        header = json::parse(in.substr(16, header_len));
    } catch (const json::exception& e) {
        fail(ErrorKind::ParseError, path.string() + " header: " + e.what());
    }
    const std::size_t data_start = 16 + header_len;
    const std::size_t data_size = in.size() - data_start;

    Checkpoint ckpt;
    try {
        if (header.at("version").get<int>() != kFormatVersion) {
            fail(ErrorKind::ParseError, "unsupported checkpoint version " + header.at("version").dump());
        }
        update_from_json(ckpt.model, header.at("model"));
        update_from_json(ckpt.train, header.at("train"));
        ckpt.step = header.at("step").get<std::size_t>();
        ckpt.optimizer.step = header.at("optimizer_step").get<std::size_t>();
    } catch (const json::exception& e) {
        fail(ErrorKind::ParseError, path.string() + " header: " + e.what());
    }
    const auto layout = ModelWeights::layout(ckpt.model);
    ckpt.weights = ModelWeights::initialize(ckpt.model, 0);
    std::map<std::string, bool> seen;
    for (const auto& entry : header.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<diff::Shape>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto slash = name.find('/');
        const std::string kind = name.substr(0, slash);
        const std::string param = slash == std::string::npos ? name : name.substr(slash + 1);
        auto it = layout.find(param);
        if (it == layout.end() || (kind != "param" && kind != "adam_m" && kind != "adam_v")) {
            fail(ErrorKind::ShapeMismatch, "unexpected tensor '" + name + "'");
        }
        if (shape != it->second) {
            fail(ErrorKind::ShapeMismatch, "tensor '" + name + "' has shape " + diff::shape_string(shape) +
                                               ", expected " + diff::shape_string(it->second));
        }
        const std::size_t count = diff::element_count(shape);
        if (offset > data_size || count * 8 > data_size - offset) {
            fail(ErrorKind::Truncated, "tensor '" + name + "' runs past the end of " + path.string());
        }
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) {
            values[i] = std::bit_cast<double>(get_u64(in, data_start + offset + i * 8));
        }
        if (kind == "param") {
            auto dst = ckpt.weights[param].mutable_values();
            std::copy(values.begin(), values.end(), dst.begin());
        } else {
            (kind == "adam_m" ? ckpt.optimizer.first : ckpt.optimizer.second)[param] = std::move(values);
        }
        seen[name] = true;
    }
    for (const auto& [param, _] : layout) {
        for (const char* kind : {"param/", "adam_m/", "adam_v/"}) {
            if (!seen.count(kind + param)) fail(ErrorKind::ShapeMismatch, "missing tensor '" + (kind + param) + "'");
        }
    }
    return ckpt;
}

// -------------------------------------------------------------------- trainer

Trainer::Trainer(ModelConfig mcfg, TrainConfig tcfg, std::vector<Scene> dataset)
    : mcfg_(mcfg), tcfg_(tcfg), dataset_(std::move(dataset)) {
    mcfg_.validate();
    tcfg_.validate();
    if (dataset_.empty()) fail(ErrorKind::InvalidArgument, "training needs at least one scene");
    weights_ = ModelWeights::initialize(mcfg_, tcfg_.seed);
    adam_ = AdamState::zeros_like(weights_);
}

Trainer::Trainer(Checkpoint ckpt, std::vector<Scene> dataset)
    : mcfg_(ckpt.model),
      tcfg_(ckpt.train),
      dataset_(std::move(dataset)),
      weights_(std::move(ckpt.weights)),
      adam_(std::move(ckpt.optimizer)),
      step_(ckpt.step) {
    if (dataset_.empty()) fail(ErrorKind::InvalidArgument, "training needs at least one scene");
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tcfg_.batch_size; ++i) {
        out.push_back(((step - 1) * tcfg_.batch_size + i) % dataset_.size());
    }
    return out;
}

TokenizedScene Trainer::tokenize(std::size_t scene_index, std::size_t step) const {
    return tokenize_scene(dataset_.at(scene_index), mcfg_, tcfg_.strategy, tcfg_.point_mask_ratio,
                          tcfg_.image_mask_ratio, mask_seed(tcfg_, step, scene_index));
}

StepMetrics Trainer::step() {
    const auto start = std::chrono::steady_clock::now();
    const std::size_t s = step_ + 1;
    const auto indices = batch_indices(s);
    std::vector<std::optional<TokenizedScene>> slots(indices.size());
    parallel_for(indices.size(), [&](std::size_t i) { slots[i] = tokenize(indices[i], s); });
    std::vector<TokenizedScene> batch;
    for (auto& slot : slots) batch.push_back(std::move(*slot));
    StepMetrics m;
    m.step = s;
    m.lr = lr_at(s, tcfg_);
    m.losses = train_step(batch, weights_, adam_, mcfg_, tcfg_, s);
    step_ = s;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return m;
}

Checkpoint Trainer::checkpoint() const { return {mcfg_, tcfg_, step_, weights_.clone(), adam_}; }

std::string metrics_line(const StepMetrics& m) {
    ordered_json j{{"step", m.step},
                   {"lr", m.lr},
                   {"loss_pc", m.losses.loss_pc},
                   {"loss_img", m.losses.loss_img},
                   {"loss_cross", m.losses.loss_cross},
                   {"loss_total", m.losses.loss_total},
                   {"wall_ms", m.wall_ms}};
    return j.dump();
}

// -------------------------------------------------------------------- workers

std::size_t worker_count() {
    if (const char* env = std::getenv("PIMAE_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v > 0) return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace pimae::train
