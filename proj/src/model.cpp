#include "pimae/model.hpp"

#include <cmath>
#include <random>

#include "pimae/error.hpp"

namespace pimae::model {

using namespace diff;

std::string_view to_string(Branches branches) {
    switch (branches) {
        case Branches::Both: return "both";
        case Branches::PointOnly: return "point_only";
        case Branches::ImageOnly: return "image_only";
    }
    return "both";
}

Branches parse_branches(std::string_view name) {
    if (name == "both") return Branches::Both;
    if (name == "point_only") return Branches::PointOnly;
    if (name == "image_only") return Branches::ImageOnly;
    fail(ErrorKind::TypeError, "unknown branch toggle '" + std::string(name) + "'");
}

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
    ModelConfig c;
    c.enc_dim = 64;
    c.enc_heads = 4;
    c.dec_dim = 48;
    c.dec_heads = 3;
    c.image_height = 64;
    c.image_width = 80;
    c.num_points = 512;
    c.num_clusters = 16;
    c.group_size = 8;
    return c;
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.enc_dim = 32;
    c.enc_heads = 4;
    c.dec_dim = 12;
    c.dec_heads = 3;
    c.specific_enc_depth = 1;
    c.shared_enc_depth = 1;
    c.shared_dec_depth = 1;
    c.specific_dec_depth = 1;
    c.patch_size = 8;
    c.image_height = 32;
    c.image_width = 40;
    c.num_points = 1280;
    c.num_clusters = 8;
    c.group_size = 4;
    c.point_hidden = 16;
    return c;
}

void ModelConfig::validate() const {
    auto bad = [](const std::string& what) { fail(ErrorKind::InvalidArgument, what); };
    if (enc_dim == 0 || enc_heads == 0 || enc_dim % enc_heads != 0) bad("enc_dim must be divisible by enc_heads");
    if (dec_dim == 0 || dec_heads == 0 || dec_dim % dec_heads != 0) bad("dec_dim must be divisible by dec_heads");
    if (enc_dim % 4 != 0 || dec_dim % 4 != 0) bad("encoder and decoder widths must be multiples of 4");
    if (patch_size <= 0 || image_height <= 0 || image_width <= 0 || image_height % patch_size != 0 ||
        image_width % patch_size != 0) {
        bad("image size must be a positive multiple of the patch size");
    }
    if (num_clusters == 0 || group_size == 0 || point_hidden == 0) bad("cluster, group and hidden sizes must be positive");
    if (num_clusters > num_points || group_size > num_points) bad("num_points too small for clusters/groups");
}

namespace {

void add_linear(std::map<std::string, Shape>& l, const std::string& name, std::size_t in, std::size_t out) {
    l[name + ".w"] = {in, out};
    l[name + ".b"] = {out};
}

void add_norm(std::map<std::string, Shape>& l, const std::string& name, std::size_t dim) {
    l[name + ".gamma"] = {dim};
    l[name + ".beta"] = {dim};
}

void add_stack(std::map<std::string, Shape>& l, const std::string& prefix, std::size_t depth, std::size_t dim) {
    for (std::size_t i = 0; i < depth; ++i) {
        const std::string p = prefix + "." + std::to_string(i);
        add_norm(l, p + ".ln1", dim);
        // A key bias shifts every logit of a row equally, so keys carry none.
        add_linear(l, p + ".attn.q", dim, dim);
        l[p + ".attn.k.w"] = {dim, dim};
        add_linear(l, p + ".attn.v", dim, dim);
        add_linear(l, p + ".attn.proj", dim, dim);
        add_norm(l, p + ".ln2", dim);
        add_linear(l, p + ".mlp.fc1", dim, 4 * dim);
        add_linear(l, p + ".mlp.fc2", 4 * dim, dim);
    }
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Tensor mlp2(const ModelWeights& w, const std::string& name, const Tensor& x) {
    auto h = gelu(linear(x, w[name + ".fc1.w"], w[name + ".fc1.b"]));
    return linear(h, w[name + ".fc2.w"], w[name + ".fc2.b"]);
}

Tensor center_matrix(const tokenizer::PointTokenSet& tokens, std::span<const std::size_t> clusters) {
    std::vector<double> v;
    v.reserve(clusters.size() * 3);
    for (auto c : clusters) {
        const auto& p = tokens.centers[c];
        v.insert(v.end(), {p.x, p.y, p.z});
    }
    return Tensor::constant({clusters.size(), 3}, std::move(v));
}

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back(i);
    return out;
}

std::vector<TokenRef> refs_for(Modality m, std::span<const std::size_t> slots) {
    std::vector<TokenRef> refs;
    for (auto s : slots) refs.push_back({m, s});
    return refs;
}

// Visible rows first, then mask rows; reorders into slot order.
Tensor fill_slots(const Tensor& visible_rows, const Tensor& mask_rows, std::span<const std::size_t> visible_slots,
                  std::span<const std::size_t> masked_slots) {
    const std::size_t total = visible_slots.size() + masked_slots.size();
    std::vector<std::size_t> row_of_slot(total);
    for (std::size_t i = 0; i < visible_slots.size(); ++i) row_of_slot[visible_slots[i]] = i;
    for (std::size_t j = 0; j < masked_slots.size(); ++j) row_of_slot[masked_slots[j]] = visible_slots.size() + j;
    std::vector<Tensor> parts;
    if (visible_rows.defined()) parts.push_back(visible_rows);
    if (mask_rows.defined()) parts.push_back(mask_rows);
    return gather_rows(concat(parts, 0), row_of_slot);
}

Tensor mask_token_rows(const ModelWeights& w, const std::string& token, std::size_t count) {
    std::vector<std::size_t> zeros(count, 0);
    return gather_rows(w[token], zeros);
}

}  // namespace

std::map<std::string, Shape> ModelWeights::layout(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t e = cfg.enc_dim, d = cfg.dec_dim;
    std::map<std::string, Shape> l;
    add_linear(l, "pc_embed.fc1", 3, cfg.point_hidden);
    add_linear(l, "pc_embed.fc2", cfg.point_hidden, e);
    add_linear(l, "pc_pos_enc.fc1", 3, e);
    add_linear(l, "pc_pos_enc.fc2", e, e);
    add_linear(l, "pc_pos_dec.fc1", 3, d);
    add_linear(l, "pc_pos_dec.fc2", d, d);
    add_linear(l, "img_embed", cfg.patch_dim(), e);
    l["modality.pc_enc"] = {1, e};
    l["modality.img_enc"] = {1, e};
    l["modality.pc_dec"] = {1, d};
    l["modality.img_dec"] = {1, d};
    add_stack(l, "enc_pc", cfg.specific_enc_depth, e);
    add_stack(l, "enc_img", cfg.specific_enc_depth, e);
    add_stack(l, "enc_shared", cfg.shared_enc_depth, e);
    add_norm(l, "enc_shared.norm", e);
    add_linear(l, "enc_to_dec", e, d);
    l["mask_token.pc"] = {1, d};
    l["mask_token.img"] = {1, d};
    add_stack(l, "dec_shared", cfg.shared_dec_depth, d);
    add_stack(l, "dec_pc", cfg.specific_dec_depth, d);
    add_stack(l, "dec_img", cfg.specific_dec_depth, d);
    add_norm(l, "dec_pc.norm", d);
    add_norm(l, "dec_img.norm", d);
    add_linear(l, "head_img", d, cfg.patch_dim());
    add_linear(l, "head_pc", d, cfg.group_size * 3);
    add_linear(l, "head_cross", d, d);
    return l;
}

ModelWeights ModelWeights::initialize(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    ModelWeights w;
    for (const auto& [name, shape] : layout(cfg)) {
        std::vector<double> v(element_count(shape), 0.0);
        if (ends_with(name, ".gamma")) {
            std::fill(v.begin(), v.end(), 1.0);
        } else if (ends_with(name, ".w") || name.starts_with("modality.") || name.starts_with("mask_token.")) {
            for (auto& x : v) {
                do {
                    x = normal(rng);
                } while (std::abs(x) > 0.04);
            }
        }
        w.params_.emplace(name, Tensor::parameter(shape, std::move(v)));
    }
    return w;
}

const Tensor& ModelWeights::operator[](const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) fail(ErrorKind::UnknownKey, "no parameter named '" + name + "'");
    return it->second;
}

Tensor& ModelWeights::operator[](const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) fail(ErrorKind::UnknownKey, "no parameter named '" + name + "'");
    return it->second;
}

std::vector<Tensor> ModelWeights::tensors() const {
    std::vector<Tensor> out;
    for (const auto& [_, t] : params_) out.push_back(t);
    return out;
}

std::size_t ModelWeights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
}

ModelWeights ModelWeights::clone() const {
    ModelWeights w;
    for (const auto& [name, t] : params_) w.params_.emplace(name, t.clone());
    return w;
}

void ModelWeights::zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
}

Tensor sincos_position_table(std::size_t rows, std::size_t cols, std::size_t dim) {
    if (dim % 4 != 0) fail(ErrorKind::InvalidArgument, "sin-cos width must be a multiple of 4");
    const std::size_t half = dim / 2;
    const std::size_t quarter = dim / 4;
    std::vector<double> v(rows * cols * dim);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            double* row = v.data() + (r * cols + c) * dim;
            for (std::size_t i = 0; i < quarter; ++i) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
                row[i] = std::sin(static_cast<double>(r) * omega);
                row[quarter + i] = std::cos(static_cast<double>(r) * omega);
                row[half + i] = std::sin(static_cast<double>(c) * omega);
                row[half + quarter + i] = std::cos(static_cast<double>(c) * omega);
            }
        }
    }
    return Tensor::constant({rows * cols, dim}, std::move(v));
}

Tensor embed_point_tokens(const ModelConfig& cfg, const ModelWeights& w, const tokenizer::PointTokenSet& tokens,
                          std::span<const geometry::Point3> cloud) {
    const auto visible = tokens.visible_indices();
    if (visible.empty()) return {};
    const std::size_t k = tokens.group_size;
    std::vector<double> local;
    local.reserve(visible.size() * k * 3);
    for (auto c : visible) {
        const auto& center = tokens.centers[c];
        for (auto idx : tokens.group(c)) {
            const auto& p = cloud[idx];
            local.insert(local.end(), {p.x - center.x, p.y - center.y, p.z - center.z});
        }
    }
    auto per_point = mlp2(w, "pc_embed", Tensor::constant({visible.size() * k, 3}, std::move(local)));
    auto pooled = group_max(per_point, k);
    auto pos = mlp2(w, "pc_pos_enc", center_matrix(tokens, visible));
    (void)cfg;
    return add(add(pooled, pos), w["modality.pc_enc"]);
}

Tensor embed_image_tokens(const ModelConfig& cfg, const ModelWeights& w, const tokenizer::ImagePatchSet& patches) {
    const auto visible = patches.visible_indices();
    if (visible.empty()) return {};
    std::vector<double> v;
    v.reserve(visible.size() * patches.patch_dim);
    for (auto p : visible) {
        auto patch = patches.patch(p);
        v.insert(v.end(), patch.begin(), patch.end());
    }
    auto x = linear(Tensor::constant({visible.size(), patches.patch_dim}, std::move(v)), w["img_embed.w"],
                    w["img_embed.b"]);
    auto table = sincos_position_table(static_cast<std::size_t>(patches.grid.rows()),
                                       static_cast<std::size_t>(patches.grid.cols()), cfg.enc_dim);
    return add(add(x, gather_rows(table, visible)), w["modality.img_enc"]);
}

Tensor run_stack(const ModelWeights& w, const std::string& prefix, std::size_t depth, std::size_t heads,
                 const Tensor& x_in, LatentBatch* record, const std::vector<TokenRef>& refs) {
    Tensor x = x_in;
    const std::size_t n = x.rows(), d = x.cols(), hd = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t layer = 0; layer < depth; ++layer) {
        const std::string p = prefix + "." + std::to_string(layer);
        auto h = layer_norm(x, w[p + ".ln1.gamma"], w[p + ".ln1.beta"]);
        auto q_t = transpose(linear(h, w[p + ".attn.q.w"], w[p + ".attn.q.b"]));  // d x n
        auto k_t = transpose(matmul(h, w[p + ".attn.k.w"]));
        auto v_t = transpose(linear(h, w[p + ".attn.v.w"], w[p + ".attn.v.b"]));
        AttentionRecord rec;
        const bool keep = record != nullptr && record->record_attention;
        if (keep) {
            rec = {prefix, layer, heads, n, {}, refs};
            rec.weights.reserve(heads * n * n);
        }
        std::vector<Tensor> outs;
        for (std::size_t head = 0; head < heads; ++head) {
            auto q = transpose(slice_rows(q_t, head * hd, (head + 1) * hd));
            auto k = slice_rows(k_t, head * hd, (head + 1) * hd);  // hd x n
            auto v = transpose(slice_rows(v_t, head * hd, (head + 1) * hd));
            auto attn = softmax(scale(matmul(q, k), inv_sqrt));
            if (keep) rec.weights.insert(rec.weights.end(), attn.values().begin(), attn.values().end());
            outs.push_back(matmul(attn, v));
        }
        if (keep) record->attention.push_back(std::move(rec));
        auto merged = outs.size() == 1 ? outs[0] : concat(outs, 1);
        x = add(x, linear(merged, w[p + ".attn.proj.w"], w[p + ".attn.proj.b"]));
        auto m = layer_norm(x, w[p + ".ln2.gamma"], w[p + ".ln2.beta"]);
        m = gelu(linear(m, w[p + ".mlp.fc1.w"], w[p + ".mlp.fc1.b"]));
        x = add(x, linear(m, w[p + ".mlp.fc2.w"], w[p + ".mlp.fc2.b"]));
    }
    return x;
}

void encode(const ModelConfig& cfg, const ModelWeights& w, const Tensor& vis_pc, const Tensor& vis_img,
            LatentBatch& latents) {
    std::vector<Tensor> parts;
    latents.l2_refs.clear();
    if (cfg.uses_points() && vis_pc.defined()) {
        latents.pc_l1 = run_stack(w, "enc_pc", cfg.specific_enc_depth, cfg.enc_heads, vis_pc, &latents,
                                  refs_for(Modality::Point, latents.pc_visible));
        parts.push_back(latents.pc_l1);
        for (auto s : latents.pc_visible) latents.l2_refs.push_back({Modality::Point, s});
    }
    if (cfg.uses_image() && vis_img.defined()) {
        latents.img_l1 = run_stack(w, "enc_img", cfg.specific_enc_depth, cfg.enc_heads, vis_img, &latents,
                                   refs_for(Modality::Image, latents.img_visible));
        parts.push_back(latents.img_l1);
        for (auto s : latents.img_visible) latents.l2_refs.push_back({Modality::Image, s});
    }
    if (parts.empty()) fail(ErrorKind::InvalidArgument, "no visible tokens to encode");
    auto joined = parts.size() == 1 ? parts[0] : concat(parts, 0);
    // Pre-norm blocks leave the residual stream unnormalized; the final norm bounds what the decoder sees.
    auto encoded =
        run_stack(w, "enc_shared", cfg.shared_enc_depth, cfg.enc_heads, joined, &latents, latents.l2_refs);
    latents.shared_l2 = layer_norm(encoded, w["enc_shared.norm.gamma"], w["enc_shared.norm.beta"]);
}

void decode(const ModelConfig& cfg, const ModelWeights& w, const tokenizer::PointTokenSet& tokens,
            const tokenizer::ImagePatchSet& patches, LatentBatch& latents) {
    auto projected = linear(latents.shared_l2, w["enc_to_dec.w"], w["enc_to_dec.b"]);
    const std::size_t n_pc_vis = latents.pc_l1.defined() ? latents.pc_visible.size() : 0;
    std::vector<Tensor> sequence;
    std::vector<TokenRef> refs;

    Tensor pc_full, img_full;
    if (cfg.uses_points()) {
        Tensor vis = n_pc_vis ? slice_rows(projected, 0, n_pc_vis) : Tensor{};
        Tensor masked;
        if (!latents.pc_masked.empty()) {
            auto pos = mlp2(w, "pc_pos_dec", center_matrix(tokens, latents.pc_masked));
            masked = add(add(mask_token_rows(w, "mask_token.pc", latents.pc_masked.size()), pos),
                         w["modality.pc_dec"]);
        }
        pc_full = fill_slots(vis, masked, latents.pc_visible, latents.pc_masked);
        sequence.push_back(pc_full);
        for (std::size_t s = 0; s < tokens.cluster_count(); ++s) refs.push_back({Modality::Point, s});
    }
    if (cfg.uses_image()) {
        const std::size_t n_img_vis = latents.img_l1.defined() ? latents.img_visible.size() : 0;
        Tensor vis = n_img_vis ? slice_rows(projected, n_pc_vis, n_pc_vis + n_img_vis) : Tensor{};
        Tensor masked;
        if (!latents.img_masked.empty()) {
            auto table = sincos_position_table(static_cast<std::size_t>(patches.grid.rows()),
                                               static_cast<std::size_t>(patches.grid.cols()), cfg.dec_dim);
            masked = add(add(mask_token_rows(w, "mask_token.img", latents.img_masked.size()),
                             gather_rows(table, latents.img_masked)),
                         w["modality.img_dec"]);
        }
        img_full = fill_slots(vis, masked, latents.img_visible, latents.img_masked);
        sequence.push_back(img_full);
        for (std::size_t s = 0; s < patches.patch_count(); ++s) refs.push_back({Modality::Image, s});
    }

    auto joined = sequence.size() == 1 ? sequence[0] : concat(sequence, 0);
    latents.dec_input = joined;
    auto shared = run_stack(w, "dec_shared", cfg.shared_dec_depth, cfg.dec_heads, joined, &latents, refs);
    std::size_t offset = 0;
    if (cfg.uses_points()) {
        const std::size_t m = tokens.cluster_count();
        latents.pc_l3 = sequence.size() == 1 ? shared : slice_rows(shared, 0, m);
        offset = m;
        auto out = run_stack(w, "dec_pc", cfg.specific_dec_depth, cfg.dec_heads, latents.pc_l3, &latents,
                             refs_for(Modality::Point, iota(0, m)));
        latents.pc_dec = layer_norm(out, w["dec_pc.norm.gamma"], w["dec_pc.norm.beta"]);
    }
    if (cfg.uses_image()) {
        const std::size_t p = patches.patch_count();
        latents.img_l3 = sequence.size() == 1 ? shared : slice_rows(shared, offset, offset + p);
        auto out = run_stack(w, "dec_img", cfg.specific_dec_depth, cfg.dec_heads, latents.img_l3, &latents,
                             refs_for(Modality::Image, iota(0, p)));
        latents.img_dec = layer_norm(out, w["dec_img.norm.gamma"], w["dec_img.norm.beta"]);
    }
}

Reconstructions heads(const ModelConfig& cfg, const ModelWeights& w, const LatentBatch& latents) {
    Reconstructions r;
    if (cfg.uses_image() && !latents.img_masked.empty()) {
        r.pixels = linear(gather_rows(latents.img_dec, latents.img_masked), w["head_img.w"], w["head_img.b"]);
    }
    if (cfg.uses_points() && !latents.pc_masked.empty()) {
        auto masked = gather_rows(latents.pc_dec, latents.pc_masked);
        r.offsets = linear(masked, w["head_pc.w"], w["head_pc.b"]);
        if (cfg.cross_active()) r.cross = linear(masked, w["head_cross.w"], w["head_cross.b"]);
    }
    return r;
}

LatentBatch forward(const ModelConfig& cfg, const ModelWeights& w, const tokenizer::PointTokenSet& tokens,
                    std::span<const geometry::Point3> cloud, const tokenizer::ImagePatchSet& patches,
                    bool record_attention) {
    LatentBatch latents;
    latents.record_attention = record_attention;
    Tensor vis_pc, vis_img;
    if (cfg.uses_points()) {
        latents.pc_visible = tokens.visible_indices();
        latents.pc_masked = tokens.masked_indices();
        vis_pc = embed_point_tokens(cfg, w, tokens, cloud);
    }
    if (cfg.uses_image()) {
        latents.img_visible = patches.visible_indices();
        latents.img_masked = patches.masked_indices();
        vis_img = embed_image_tokens(cfg, w, patches);
    }
    encode(cfg, w, vis_pc, vis_img, latents);
    decode(cfg, w, tokens, patches, latents);
    return latents;
}

std::vector<double> attention_maps(const LatentBatch& latents, const std::string& stack, std::size_t layer,
                                   std::size_t head, std::size_t query) {
    for (const auto& rec : latents.attention) {
        if (rec.stack != stack || rec.layer != layer) continue;
        if (head >= rec.heads) {
            fail(ErrorKind::InvalidArgument, "head " + std::to_string(head) + " out of range for " + stack);
        }
        if (query >= rec.tokens) {
            fail(ErrorKind::UnknownToken, "query " + std::to_string(query) + " but layer has " +
                                              std::to_string(rec.tokens) + " tokens");
        }
        const auto begin = rec.weights.begin() +
                           static_cast<std::ptrdiff_t>((head * rec.tokens + query) * rec.tokens);
        return {begin, begin + static_cast<std::ptrdiff_t>(rec.tokens)};
    }
    fail(ErrorKind::InvalidArgument, "no recorded attention for " + stack + "." + std::to_string(layer));
}

}  // namespace pimae::model
