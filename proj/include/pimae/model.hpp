#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pimae/diff.hpp"
#include "pimae/geometry.hpp"
#include "pimae/tokenizer.hpp"

namespace pimae::model {

using diff::Tensor;

enum class Branches { Both, PointOnly, ImageOnly };

std::string_view to_string(Branches branches);
Branches parse_branches(std::string_view name);

struct ModelConfig {
    std::size_t enc_dim = 256;
    std::size_t enc_heads = 4;
    std::size_t dec_dim = 192;
    std::size_t dec_heads = 3;
    std::size_t specific_enc_depth = 3;
    std::size_t shared_enc_depth = 3;
    std::size_t shared_dec_depth = 1;
    std::size_t specific_dec_depth = 2;
    int patch_size = 16;
    int image_height = 256;
    int image_width = 352;
    std::size_t num_points = 2048;
    std::size_t num_clusters = 128;
    std::size_t group_size = 16;
    std::size_t point_hidden = 64;
    Branches branches = Branches::Both;
    bool cross_modal = true;

    /// Full-size architecture: 256/4 encoders, 192/3 decoders, 3+3 / 1+2 blocks.
    static ModelConfig paper();
    /// Single-CPU profile: 64x80 images (20 patches), 16 clusters of 8.
    static ModelConfig desk();
    /// Gradient-check profile: 8 clusters of 4 from 1280 points, 4x5 patches of 8 pixels, width 32.
    static ModelConfig tiny();

    void validate() const;
    bool uses_points() const { return branches != Branches::ImageOnly; }
    bool uses_image() const { return branches != Branches::PointOnly; }
    bool cross_active() const { return cross_modal && branches == Branches::Both; }
    std::size_t patch_dim() const { return static_cast<std::size_t>(patch_size) * patch_size * 3; }
    geometry::PatchGrid grid() const { return {patch_size, image_height, image_width}; }
};

/// Named parameters of the two-branch autoencoder. Names are unique and the
/// map is ordered, so iteration order is stable.
class ModelWeights {
   public:
    /// Parameter names and shapes implied by a configuration.
    static std::map<std::string, diff::Shape> layout(const ModelConfig& cfg);
    /// Linear weights, mask tokens and modality embeddings from a normal
    /// truncated at two standard deviations (std 0.02); biases and LayerNorm
    /// shifts zero, LayerNorm scales one.
    static ModelWeights initialize(const ModelConfig& cfg, std::uint64_t seed);

    const Tensor& operator[](const std::string& name) const;
    Tensor& operator[](const std::string& name);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    std::vector<Tensor> tensors() const;
    std::size_t parameter_count() const;

    ModelWeights clone() const;
    void zero_grad();

   private:
    std::map<std::string, Tensor> params_;
};

enum class Modality { Point, Image };

struct TokenRef {
    Modality modality;
    std::size_t slot;
};

struct AttentionRecord {
    std::string stack;
    std::size_t layer = 0;
    std::size_t heads = 0;
    std::size_t tokens = 0;
    std::vector<double> weights;  // heads x tokens x tokens
    std::vector<TokenRef> refs;
};

/// Latent tokens at each stage of one scene's forward pass plus the slot
/// bookkeeping that maps rows back to clusters and patches.
struct LatentBatch {
    std::vector<std::size_t> pc_visible, pc_masked;
    std::vector<std::size_t> img_visible, img_masked;

    Tensor pc_l1;      // visible point tokens after the point encoder
    Tensor img_l1;     // visible image tokens after the image encoder
    Tensor shared_l2;  // [point visible; image visible] after the shared encoder
    std::vector<TokenRef> l2_refs;
    Tensor dec_input;  // shared-decoder input: every cluster slot, then every patch slot
    Tensor pc_l3;      // every cluster slot after the shared decoder
    Tensor img_l3;     // every patch slot after the shared decoder
    Tensor pc_dec;     // point-specific decoder output, normalized
    Tensor img_dec;    // image-specific decoder output, normalized

    bool record_attention = false;
    std::vector<AttentionRecord> attention;
};

struct Reconstructions {
    Tensor pixels;   // masked patches x patch_dim
    Tensor offsets;  // masked clusters x (group_size * 3)
    Tensor cross;    // masked clusters x dec_dim
};

/// Per-point MLP on (point - center), max over the group, plus the center's
/// positional MLP and the point modality embedding. One row per visible cluster.
Tensor embed_point_tokens(const ModelConfig& cfg, const ModelWeights& w, const tokenizer::PointTokenSet& tokens,
                          std::span<const geometry::Point3> cloud);

/// Linear patch projection plus fixed sin-cos position and the image modality
/// embedding. One row per visible patch.
Tensor embed_image_tokens(const ModelConfig& cfg, const ModelWeights& w, const tokenizer::ImagePatchSet& patches);

/// Fixed 2-D sin-cos table, one row per patch in row-major order.
Tensor sincos_position_table(std::size_t rows, std::size_t cols, std::size_t dim);

/// Pre-norm transformer blocks `prefix.0 .. prefix.(depth-1)`. An empty stack
/// returns its input.
Tensor run_stack(const ModelWeights& w, const std::string& prefix, std::size_t depth, std::size_t heads,
                 const Tensor& x, LatentBatch* record = nullptr, const std::vector<TokenRef>& refs = {});

/// Specific encoders then the shared encoder over the concatenated tokens.
/// Either input may be undefined when its branch carries no tokens.
void encode(const ModelConfig& cfg, const ModelWeights& w, const Tensor& vis_pc, const Tensor& vis_img,
            LatentBatch& latents);

/// Projects encoded tokens to decoder width, fills masked slots with mask
/// tokens plus position and modality embeddings, runs the shared decoder
/// over all slots and then the modality-specific decoders.
void decode(const ModelConfig& cfg, const ModelWeights& w, const tokenizer::PointTokenSet& tokens,
            const tokenizer::ImagePatchSet& patches, LatentBatch& latents);

Reconstructions heads(const ModelConfig& cfg, const ModelWeights& w, const LatentBatch& latents);

/// Slot bookkeeping, embedding, encoding and decoding for one tokenized scene.
LatentBatch forward(const ModelConfig& cfg, const ModelWeights& w, const tokenizer::PointTokenSet& tokens,
                    std::span<const geometry::Point3> cloud, const tokenizer::ImagePatchSet& patches,
                    bool record_attention = false);

/// Softmax row for `query` at one recorded layer and head. Throws
/// UnknownToken when the query is out of range.
std::vector<double> attention_maps(const LatentBatch& latents, const std::string& stack, std::size_t layer,
                                   std::size_t head, std::size_t query);

}  // namespace pimae::model
