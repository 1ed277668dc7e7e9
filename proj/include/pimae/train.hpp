#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pimae/geometry.hpp"
#include "pimae/image.hpp"
#include "pimae/losses.hpp"
#include "pimae/model.hpp"
#include "pimae/tokenizer.hpp"

namespace pimae::train {

using geometry::CameraModel;
using geometry::Point3;
using losses::LossReport;
using model::ModelConfig;
using model::ModelWeights;
using tokenizer::MaskStrategy;

enum class Profile { Paper, Desk, Tiny };

std::string_view to_string(Profile profile);
Profile parse_profile(std::string_view name);
ModelConfig model_config_for(Profile profile);

struct TrainConfig {
    double base_lr = 1e-3;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    std::size_t batch_size = 4;
    std::size_t total_steps = 500;
    std::size_t warmup_steps = 25;
    std::uint64_t seed = 0;
    Profile profile = Profile::Desk;
    MaskStrategy strategy = MaskStrategy::Complement;
    double point_mask_ratio = 0.6;
    double image_mask_ratio = 0.6;
    /// Draw fresh masks every step; otherwise each dataset scene keeps one mask.
    bool resample_masks = true;

    void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
nlohmann::ordered_json to_json(const TrainConfig& cfg);
/// Keys absent from `j` keep the values already in `cfg`. Unknown keys throw UnknownKey.
void update_from_json(ModelConfig& cfg, const nlohmann::json& j);
void update_from_json(TrainConfig& cfg, const nlohmann::json& j);

/// Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct AdamState {
    std::size_t step = 0;
    std::map<std::string, std::vector<double>> first;
    std::map<std::string, std::vector<double>> second;

    static AdamState zeros_like(const ModelWeights& weights);
};

/// One AdamW update of a flat parameter block: w <- w (1 - lr wd), then the
/// bias-corrected Adam step. `t` is the 1-based update count.
void adamw_update(std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v,
                  std::size_t t, double lr, const TrainConfig& cfg);

/// Applies adamw_update to every parameter using its accumulated gradient.
void adamw_step(ModelWeights& weights, AdamState& state, double lr, const TrainConfig& cfg);

struct Scene {
    std::vector<Point3> points;
    Image image;
    CameraModel cam;
    std::string provenance;
    std::vector<std::array<double, 3>> point_colors;  // synthetic scenes only
};

/// Deterministic room with 3-6 colored boxes, rendered by casting one ray
/// through each pixel center. Points are hits of distinct pixel rays, so each
/// projects into its own pixel and carries that pixel's color.
Scene generate_scene(std::uint64_t seed, const ModelConfig& cfg);

/// Scenes for seeds [first, first + count), generated on worker threads.
std::vector<Scene> generate_scenes(std::uint64_t first, std::size_t count, const ModelConfig& cfg);

struct TokenizedScene {
    const Scene* scene = nullptr;
    tokenizer::PointTokenSet tokens;
    tokenizer::ImagePatchSet patches;
    tokenizer::MaskAlignment alignment;
};

TokenizedScene tokenize_scene(const Scene& scene, const ModelConfig& cfg, MaskStrategy strategy, double point_ratio,
                              double image_ratio, std::uint64_t mask_seed);

struct SceneForward {
    model::LatentBatch latents;
    model::Reconstructions recon;
    losses::CrossModalTerm cross;
    diff::Tensor loss_pc;
    diff::Tensor loss_img;
    diff::Tensor loss_cross;
    diff::Tensor total;
    LossReport report;
};

/// Forward pass and the three losses for one tokenized scene.
SceneForward evaluate_scene(const ModelConfig& cfg, const ModelWeights& weights, const TokenizedScene& scene,
                            const losses::CrossTargetOptions& cross_options = {}, bool record_attention = false);

/// Mask seed for a dataset scene at a step.
std::uint64_t mask_seed(const TrainConfig& cfg, std::size_t step, std::size_t scene_index);

/// Forward, backward and AdamW update over a batch, averaging the losses.
/// Throws NonFinite naming the offending tensor; weights are untouched then.
LossReport train_step(std::span<const TokenizedScene> batch, ModelWeights& weights, AdamState& state,
                      const ModelConfig& mcfg, const TrainConfig& tcfg, std::size_t step);

/// Central-difference check of the summed loss gradient against every
/// parameter of the tiny profile on one synthetic scene. The point head, the
/// masked patch values and the held cross-modal targets are first set so
/// every term sits a small residual away from its minimum.
diff::GradCheckResult end_to_end_grad_check(std::uint64_t seed, double eps = 1e-5);

struct Checkpoint {
    ModelConfig model;
    TrainConfig train;
    std::size_t step = 0;
    ModelWeights weights;
    AdamState optimizer;
};

/// "PIMAECK1", u64 little-endian header length, JSON header, then raw
/// little-endian doubles for each tensor in header order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws BadMagic, Truncated, ShapeMismatch or ParseError.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct StepMetrics {
    std::size_t step = 0;
    double lr = 0.0;
    LossReport losses;
    double wall_ms = 0.0;
};

/// Owns the weights and optimizer for a run over a fixed scene list.
class Trainer {
   public:
    Trainer(ModelConfig mcfg, TrainConfig tcfg, std::vector<Scene> dataset);
    Trainer(Checkpoint ckpt, std::vector<Scene> dataset);

    /// Runs the next step (1-based).
    StepMetrics step();

    std::size_t current_step() const { return step_; }
    const ModelConfig& model_config() const { return mcfg_; }
    const TrainConfig& train_config() const { return tcfg_; }
    const ModelWeights& weights() const { return weights_; }
    ModelWeights& weights() { return weights_; }
    const std::vector<Scene>& dataset() const { return dataset_; }
    Checkpoint checkpoint() const;
    /// Dataset indices used at a step.
    std::vector<std::size_t> batch_indices(std::size_t step) const;
    TokenizedScene tokenize(std::size_t scene_index, std::size_t step) const;

   private:
    ModelConfig mcfg_;
    TrainConfig tcfg_;
    std::vector<Scene> dataset_;
    ModelWeights weights_;
    AdamState adam_;
    std::size_t step_ = 0;
};

/// Line of metrics.jsonl.
std::string metrics_line(const StepMetrics& m);

/// Worker count from PIMAE_THREADS, else hardware concurrency.
std::size_t worker_count();
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace pimae::train
