#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pimae/geometry.hpp"
#include "pimae/image.hpp"
#include "pimae/train.hpp"

namespace pimae::io {

namespace fs = std::filesystem;

/// Everything a CLI run needs, resolved from a flat key space.
struct RunConfig {
    model::ModelConfig model = model::ModelConfig::desk();
    train::TrainConfig train;
    fs::path output_dir;
    fs::path scene_dir;  // empty: synthetic scenes
    std::uint64_t synth_first = 0;
    std::size_t synth_count = 4;
    fs::path checkpoint;  // resume point for pretrain, weights for inspection
    std::size_t checkpoint_every = 0;
    bool wall_clock = false;  // off keeps metrics.jsonl byte-reproducible
    std::size_t scene_index = 0;
    std::string attn_stack = "enc_shared";
    std::size_t attn_layer = 0;
    std::size_t attn_head = 0;
    std::size_t attn_query = 0;
};

/// Flat keys: `profile`, every model and training key, `mask_ratio` (sets both
/// ratios) and the run keys above. Reloading the result reproduces the config.
nlohmann::ordered_json to_json(const RunConfig& cfg);

/// Keys of the flat space, including the write-only `mask_ratio`.
std::vector<std::string> config_keys();

/// Applies `file`, then `overrides`, on top of the defaults. `profile` is
/// resolved across both layers first and selects the base architecture. In a
/// layer, `mask_ratio` applies before the per-modality ratios.
/// Throws UnknownKey, TypeError, MissingRequired (output_dir) or InvalidArgument.
RunConfig resolve_config(const nlohmann::json& file, const nlohmann::json& overrides, bool require_output = true);

/// Parses a JSON object from disk. Throws IoError or ParseError.
nlohmann::json read_config_file(const fs::path& path);

/// Creates the output directory and writes resolved_config.json into it.
void write_resolved_config(const RunConfig& cfg);

// Scene directories: points.ply, image.ppm and camera.json.

/// ASCII PLY vertices with x, y, z properties; other properties and elements
/// are skipped. Throws ParseError naming the file and byte offset.
std::vector<geometry::Point3> read_ply_points(const fs::path& path);
/// `masked` is empty or one flag per point; non-empty adds a uchar property.
void write_ply_points(const fs::path& path, std::span<const geometry::Point3> points,
                      std::span<const std::uint8_t> masked = {});

/// Binary P6 with maxval at most 255, scaled to [0,1].
Image read_ppm(const fs::path& path);
/// Values are clamped to [0,1] and rounded to 8 bits.
void write_ppm(const fs::path& path, const Image& image);

/// {"K": 12 numbers, "Rt": 16 numbers, "H": int, "W": int}, row-major.
geometry::CameraModel read_camera(const fs::path& path);
void write_camera(const fs::path& path, const geometry::CameraModel& cam);

/// Loads a scene directory. Clouds larger than cfg.num_points are reduced by
/// farthest point sampling. Throws DimensionMismatch when the image, camera
/// and model sizes disagree or the cloud is too small.
train::Scene load_scene(const fs::path& dir, const model::ModelConfig& cfg);
void save_scene(const fs::path& dir, const train::Scene& scene);

/// `root` itself when it holds points.ply, else its scene subdirectories in
/// lexicographic order.
std::vector<fs::path> list_scene_dirs(const fs::path& root);

/// Synthetic seeds [synth_first, synth_first + synth_count) or every scene
/// directory under scene_dir.
std::vector<train::Scene> load_dataset(const RunConfig& cfg);

// Inspection outputs.

/// Weights, configs and one tokenized scene ready for a forward pass.
struct Inspection {
    model::ModelConfig model;
    train::TrainConfig train;
    model::ModelWeights weights;
    std::size_t step = 0;
    std::shared_ptr<const train::Scene> scene;  // shared so tokenized.scene stays valid
    train::TokenizedScene tokenized;
};

/// Uses the checkpoint when given, else freshly initialized weights. The mask
/// is the one training would draw for scene_index at the checkpoint step.
Inspection prepare_inspection(const RunConfig& cfg);

/// Input image with every masked patch replaced by its prediction.
Image reconstructed_image(const train::TokenizedScene& scene, const model::Reconstructions& recon,
                          const model::LatentBatch& latents);

struct PointReconstruction {
    std::vector<geometry::Point3> points;
    std::vector<std::uint8_t> masked;
};

/// Visible clusters keep their input groups; masked clusters are center plus
/// predicted offsets.
PointReconstruction reconstructed_points(const train::TokenizedScene& scene, const model::Reconstructions& recon,
                                         const model::LatentBatch& latents);

/// Input image with masked patches at half brightness.
Image mask_visualization(const train::TokenizedScene& scene);

nlohmann::ordered_json hits_json(const train::TokenizedScene& scene);

/// recon_image.ppm and recon_points.ply for the branches that are enabled.
std::vector<fs::path> emit_reconstruction(const fs::path& out, const Inspection& in);
/// mask_image.ppm and hits.json.
std::vector<fs::path> emit_mask_vis(const fs::path& out, const Inspection& in);
/// attn_{layer}_{head}_{query}.json with the softmax row and its token labels.
fs::path emit_attention(const fs::path& out, const Inspection& in, const std::string& stack, std::size_t layer,
                        std::size_t head, std::size_t query);

}  // namespace pimae::io
