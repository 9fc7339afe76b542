#pragma once

#include <optional>
#include <string>
#include <vector>

#include "simla/tensor.hpp"

namespace simla {

template <typename R>
struct NamedParam {
    std::string name;
    Tensor<R> tensor;
};

template <typename R>
using ParamList = std::vector<NamedParam<R>>;

struct AttentionConfig {
    int d_model = 64;
    int n_heads = 4;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (n_heads <= 0 || d_model % n_heads != 0)
            throw std::invalid_argument("attention config: d_model must be divisible by n_heads");
        if (head_dim() < 4) throw std::invalid_argument("attention config: head_dim must be >= 4");
    }
};

enum class BlockMode { self_only, self_plus_cross };

namespace init {

template <typename R>
Tensor<R> normal(Shape shape, Rng& rng, double stddev = 0.02) {
    Tensor<R> t = Tensor<R>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<R>(rng.normal(0.0, stddev));
    t.set_requires_grad(true);
    return t;
}

template <typename R>
Tensor<R> constant(Shape shape, R v) {
    Tensor<R> t = Tensor<R>::filled(std::move(shape), v);
    t.set_requires_grad(true);
    return t;
}

}  // namespace init

template <typename R>
struct Linear {
    Tensor<R> weight;  // [in, out]
    Tensor<R> bias;    // [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng)
        : weight(init::normal<R>({in, out}, rng)), bias(init::constant<R>({out}, R(0))) {}

    Tensor<R> forward(const Tensor<R>& x) const { return add_bias(matmul(x, weight), bias); }

    void collect(const std::string& prefix, ParamList<R>& out) {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

template <typename R>
struct LayerNorm {
    Tensor<R> gamma;
    Tensor<R> beta;

    LayerNorm() = default;
    explicit LayerNorm(int d) : gamma(init::constant<R>({d}, R(1))), beta(init::constant<R>({d}, R(0))) {}

    Tensor<R> forward(const Tensor<R>& x) const { return layer_norm(x, gamma, beta); }

    void collect(const std::string& prefix, ParamList<R>& out) {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

template <typename R>
struct AttentionOut {
    Tensor<R> output;  // [B*Tq, D]
    Tensor<R> weights; // [B*H, Tq, Tk] row-stochastic
};

// Scaled dot-product multi-head attention. Queries and keys/values may come
// from different sequences; an optional additive bias (e.g. -1e9 on padded
// keys) is applied to the scores before softmax.
template <typename R>
struct MultiHeadAttention {
    AttentionConfig cfg;
    Linear<R> wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(AttentionConfig c, Rng& rng)
        : cfg(c),
          wq(c.d_model, c.d_model, rng),
          wk(c.d_model, c.d_model, rng),
          wv(c.d_model, c.d_model, rng),
          wo(c.d_model, c.d_model, rng) {
        cfg.validate();
    }

    AttentionOut<R> forward(const Tensor<R>& q_seq, const Tensor<R>& kv_seq, int batch, int tq, int tk,
                            const Tensor<R>* score_bias = nullptr) const {
        if (tq < 1 || tk < 1) throw std::invalid_argument("attention: empty sequence");
        if (q_seq.shape().back() != cfg.d_model || kv_seq.shape().back() != cfg.d_model)
            throw std::invalid_argument("attention: width mismatch with d_model");
        const int h = cfg.n_heads;
        const R inv_sqrt_dk = R(1) / std::sqrt(static_cast<R>(cfg.head_dim()));
        Tensor<R> q = split_heads(wq.forward(q_seq), batch, tq, h);
        Tensor<R> k = split_heads(wk.forward(kv_seq), batch, tk, h);
        Tensor<R> v = split_heads(wv.forward(kv_seq), batch, tk, h);
        Tensor<R> scores = scale(bmm_nt(q, k), inv_sqrt_dk);
        if (score_bias != nullptr) scores = add(scores, *score_bias);
        Tensor<R> attn = softmax(scores, 2);
        Tensor<R> ctx = merge_heads(bmm(attn, v), batch, h, tq);
        return {wo.forward(ctx), attn};
    }

    void collect(const std::string& prefix, ParamList<R>& out) {
        wq.collect(prefix + ".wq", out);
        wk.collect(prefix + ".wk", out);
        wv.collect(prefix + ".wv", out);
        wo.collect(prefix + ".wo", out);
    }
};

template <typename R>
struct FeedForward {
    Linear<R> fc1, fc2;

    FeedForward() = default;
    FeedForward(int d, int hidden, Rng& rng) : fc1(d, hidden, rng), fc2(hidden, d, rng) {}

    Tensor<R> forward(const Tensor<R>& x) const { return fc2.forward(gelu(fc1.forward(x))); }

    void collect(const std::string& prefix, ParamList<R>& out) {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

// Optional key/value context for cross-attention and hooks for capturing
// attention maps out of a forward pass.
template <typename R>
struct CrossContext {
    const Tensor<R>* seq = nullptr;  // [B*Tk, D]
    int tk = 0;
    const Tensor<R>* score_bias = nullptr;  // [B*H, Tq, Tk] or null
};

template <typename R>
struct BlockCapture {
    Tensor<R> self_attn;   // [B*H, T, T]
    Tensor<R> cross_attn;  // [B*H, Tq, Tk]
};

// Pre-norm transformer block: self-attention, optional cross-attention (one
// layer norm of its own per inserted layer), feed-forward.
template <typename R>
struct EncoderBlock {
    BlockMode mode = BlockMode::self_only;
    LayerNorm<R> ln_self, ln_cross, ln_ffn;
    MultiHeadAttention<R> self_attn;
    MultiHeadAttention<R> cross_attn;
    FeedForward<R> ffn;

    EncoderBlock() = default;
    EncoderBlock(AttentionConfig c, BlockMode m, int ffn_hidden, Rng& rng)
        : mode(m), ln_self(c.d_model), ln_ffn(c.d_model), self_attn(c, rng), ffn(c.d_model, ffn_hidden, rng) {
        if (mode == BlockMode::self_plus_cross) {
            ln_cross = LayerNorm<R>(c.d_model);
            cross_attn = MultiHeadAttention<R>(c, rng);
        }
    }

    Tensor<R> forward(Tensor<R> x, int batch, int t, const Tensor<R>* self_bias = nullptr,
                      const CrossContext<R>* cross = nullptr, BlockCapture<R>* capture = nullptr) const {
        Tensor<R> h = ln_self.forward(x);
        AttentionOut<R> sa = self_attn.forward(h, h, batch, t, t, self_bias);
        if (capture) capture->self_attn = sa.weights;
        x = add(x, sa.output);
        if (mode == BlockMode::self_plus_cross && cross != nullptr) {
            AttentionOut<R> ca =
                cross_attn.forward(ln_cross.forward(x), *cross->seq, batch, t, cross->tk, cross->score_bias);
            if (capture) capture->cross_attn = ca.weights;
            x = add(x, ca.output);
        }
        return add(x, ffn.forward(ln_ffn.forward(x)));
    }

    void collect(const std::string& prefix, ParamList<R>& out) {
        ln_self.collect(prefix + ".ln_self", out);
        self_attn.collect(prefix + ".self_attn", out);
        if (mode == BlockMode::self_plus_cross) {
            ln_cross.collect(prefix + ".ln_cross", out);
            cross_attn.collect(prefix + ".cross_attn", out);
        }
        ln_ffn.collect(prefix + ".ln_ffn", out);
        ffn.collect(prefix + ".ffn", out);
    }
};

// Linear projection of non-overlapping P x P x C patches plus a learned
// [CLS] vector at position 0 and learned absolute position embeddings.
template <typename R>
struct PatchEmbed {
    int image_size = 64, patch = 8, channels = 3, d_model = 64;
    Linear<R> proj;
    Tensor<R> cls;        // [D]
    Tensor<R> mask_embed; // [D], substituted for masked patches
    Tensor<R> pos;        // [(N+1), D]

    PatchEmbed() = default;
    PatchEmbed(int image_size_, int patch_, int channels_, int d, Rng& rng)
        : image_size(image_size_), patch(patch_), channels(channels_), d_model(d) {
        if (image_size % patch != 0)
            throw std::invalid_argument("patch_embed: image size not divisible by patch size");
        proj = Linear<R>(patch * patch * channels, d, rng);
        cls = init::normal<R>({d}, rng);
        mask_embed = init::normal<R>({d}, rng);
        pos = init::normal<R>({num_patches() + 1, d}, rng);
    }

    int grid() const { return image_size / patch; }
    int num_patches() const { return grid() * grid(); }

    // images: [B, H*W*C] row-major HWC. Returns [B*(N+1), D].
    Tensor<R> forward(const Tensor<R>& images, int batch, const std::vector<std::vector<int>>* masked = nullptr,
                      bool positional = true) const {
        const int hw = image_size * image_size * channels;
        if (images.rank() != 2 || images.dim(0) != batch || images.dim(1) != hw)
            throw std::invalid_argument("patch_embed: image batch shape mismatch, want [B," + std::to_string(hw) +
                                        "], got " + shape_str(images.shape()));
        Tensor<R> patches = extract_patches(images, batch);
        Tensor<R> emb = proj.forward(patches);  // [B*N, D]
        if (masked != nullptr) emb = apply_mask(emb, batch, *masked);
        Tensor<R> seq = prepend_row_per_seq(emb, cls, batch, num_patches());
        if (!positional) return seq;
        // Broadcast position table over the batch.
        std::vector<int> pos_idx;
        pos_idx.reserve(static_cast<size_t>(batch) * (num_patches() + 1));
        for (int b = 0; b < batch; ++b)
            for (int p = 0; p <= num_patches(); ++p) pos_idx.push_back(p);
        return add(seq, gather_rows(pos, pos_idx));
    }

    // [B, H*W*C] -> [B*N, P*P*C], patches in row-major grid order.
    Tensor<R> extract_patches(const Tensor<R>& images, int batch) const {
        const int g = grid();
        const int pd = patch * patch * channels;
        bool rg = detail::want_grad<R>({&images});
        Tensor<R> out = detail::make_output<R>({batch * num_patches(), pd}, rg);
        const R* src = images.data();
        R* dst = out.data();
        const int row_stride = image_size * channels;
        for (int b = 0; b < batch; ++b)
            for (int py = 0; py < g; ++py)
                for (int px = 0; px < g; ++px) {
                    R* d = dst + ((static_cast<int64_t>(b) * g + py) * g + px) * pd;
                    for (int y = 0; y < patch; ++y) {
                        const R* s = src + static_cast<int64_t>(b) * image_size * row_stride +
                                     (static_cast<int64_t>(py) * patch + y) * row_stride + px * patch * channels;
                        std::copy(s, s + patch * channels, d + y * patch * channels);
                    }
                }
        // Image pixels are inputs, not parameters; no backward needed, but
        // keep the op total in case a caller differentiates through it.
        if (rg) {
            auto in = images.node();
            auto on = out.node();
            const int g2 = g, patch2 = patch, channels2 = channels, image_size2 = image_size;
            Tape<R>::current()->record("extract_patches", [in, on, batch, g2, patch2, channels2, image_size2, pd] {
                if (!detail::has_grad(on) || !in->requires_grad) return;
                in->ensure_grad();
                const int row_stride = image_size2 * channels2;
                for (int b = 0; b < batch; ++b)
                    for (int py = 0; py < g2; ++py)
                        for (int px = 0; px < g2; ++px) {
                            const R* gsrc = on->grad.data() + ((static_cast<int64_t>(b) * g2 + py) * g2 + px) * pd;
                            for (int y = 0; y < patch2; ++y) {
                                R* gdst = in->grad.data() + static_cast<int64_t>(b) * image_size2 * row_stride +
                                          (static_cast<int64_t>(py) * patch2 + y) * row_stride +
                                          px * patch2 * channels2;
                                for (int xx = 0; xx < patch2 * channels2; ++xx)
                                    gdst[xx] += gsrc[y * patch2 * channels2 + xx];
                            }
                        }
            });
        }
        return out;
    }

    // Replace masked patch embeddings with the learned mask embedding.
    Tensor<R> apply_mask(const Tensor<R>& emb, int batch, const std::vector<std::vector<int>>& masked) const {
        if (static_cast<int>(masked.size()) != batch)
            throw std::invalid_argument("patch_embed: one mask list per image required");
        const int n = num_patches(), d = d_model;
        bool rg = detail::want_grad<R>({&emb, &mask_embed});
        Tensor<R> out = detail::make_output<R>(emb.shape(), rg);
        std::copy(emb.data(), emb.data() + emb.numel(), out.data());
        std::vector<int64_t> rows;
        for (int b = 0; b < batch; ++b)
            for (int p : masked[b]) {
                if (p < 0 || p >= n) throw std::invalid_argument("patch_embed: mask position outside grid");
                rows.push_back(static_cast<int64_t>(b) * n + p);
            }
        const R* pm = mask_embed.data();
        for (int64_t r : rows)
            for (int j = 0; j < d; ++j) out.data()[r * d + j] = pm[j];
        if (rg) {
            auto en = emb.node(), mn = mask_embed.node(), on = out.node();
            auto rows_sh = std::make_shared<std::vector<int64_t>>(std::move(rows));
            Tape<R>::current()->record("patch_mask", [en, mn, on, rows_sh, d] {
                if (!detail::has_grad(on)) return;
                std::vector<bool> replaced(on->value.size() / d, false);
                for (int64_t r : *rows_sh) replaced[r] = true;
                if (en->requires_grad) {
                    en->ensure_grad();
                    for (size_t r = 0; r < replaced.size(); ++r)
                        if (!replaced[r])
                            for (int j = 0; j < d; ++j)
                                en->grad[r * d + j] += on->grad[r * d + j];
                }
                if (mn->requires_grad) {
                    mn->ensure_grad();
                    for (int64_t r : *rows_sh)
                        for (int j = 0; j < d; ++j) mn->grad[j] += on->grad[r * d + j];
                }
            });
        }
        return out;
    }

    void collect(const std::string& prefix, ParamList<R>& out) {
        proj.collect(prefix + ".proj", out);
        out.push_back({prefix + ".cls", cls});
        out.push_back({prefix + ".mask_embed", mask_embed});
        out.push_back({prefix + ".pos", pos});
    }
};

// Token embedding with learned positions; position 0 carries [CLS].
template <typename R>
struct TokenEmbed {
    Tensor<R> table;  // [V, D]
    Tensor<R> pos;    // [L, D]
    int max_len = 0;

    TokenEmbed() = default;
    TokenEmbed(int vocab, int d, int max_len_, Rng& rng)
        : table(init::normal<R>({vocab, d}, rng)), pos(init::normal<R>({max_len_, d}, rng)), max_len(max_len_) {}

    // tokens: [B, L] ids flattened row-major. Returns [B*L, D].
    Tensor<R> forward(const std::vector<int>& ids, int batch, int len) const {
        if (len > max_len) throw std::invalid_argument("token_embed: sequence longer than position table");
        Tensor<R> emb = embedding(table, ids);
        std::vector<int> pos_idx;
        pos_idx.reserve(ids.size());
        for (int b = 0; b < batch; ++b)
            for (int t = 0; t < len; ++t) pos_idx.push_back(t);
        return add(emb, gather_rows(pos, pos_idx));
    }

    void collect(const std::string& prefix, ParamList<R>& out) {
        out.push_back({prefix + ".table", table});
        out.push_back({prefix + ".pos", pos});
    }
};

// Additive attention bias that hides padded key positions.
template <typename R>
Tensor<R> key_padding_bias(const std::vector<std::vector<bool>>& key_valid, int batch, int heads, int tq) {
    const int tk = static_cast<int>(key_valid.at(0).size());
    Tensor<R> bias = Tensor<R>::zeros({batch * heads, tq, tk});
    R* p = bias.data();
    for (int b = 0; b < batch; ++b)
        for (int h = 0; h < heads; ++h)
            for (int q = 0; q < tq; ++q)
                for (int k = 0; k < tk; ++k)
                    if (!key_valid[b][k]) p[((static_cast<int64_t>(b) * heads + h) * tq + q) * tk + k] = R(-1e9);
    return bias;
}

}  // namespace simla
