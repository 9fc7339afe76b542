#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "simla/rng.hpp"

namespace simla {

// Word-level vocabulary. Ids 0-3 are the fixed specials; the rest are dense.
class Vocab {
public:
    static constexpr int kCls = 0;
    static constexpr int kSep = 1;
    static constexpr int kMask = 2;
    static constexpr int kPad = 3;

    static Vocab from_words(const std::vector<std::string>& words);
    // Closed vocabulary of the shape-world caption grammar.
    static Vocab shape_world();

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const { return tokens_.at(id); }
    int id(const std::string& word) const;
    bool contains(const std::string& word) const { return index_.count(word) > 0; }
    static bool is_special(int id) { return id >= 0 && id < 4; }

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// [CLS] + word ids + [SEP], padded with [PAD] to exactly max_len.
std::vector<int> tokenize(const std::string& caption, const Vocab& vocab, int max_len);

// Inverse of tokenize over grammar captions (specials and padding dropped).
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);

enum class MaskKind { image_blockwise, text_bert };

enum class TextMaskAction { use_mask_token, use_random_token, keep_original };

struct MaskSpec {
    MaskKind kind = MaskKind::text_bert;
    std::vector<int> positions;                // ascending, [CLS] never present
    std::vector<TextMaskAction> replacements;  // aligned with positions (text only)
};

constexpr int kIgnoreTarget = -1;

struct MaskedText {
    std::vector<int> tokens;   // with replacements applied
    MaskSpec spec;
    std::vector<int> targets;  // original id at masked positions, kIgnoreTarget elsewhere
};

// BERT masking: each non-special position independently with probability
// `rate`; of the masked, 80% -> [MASK], 10% -> random non-special id,
// 10% -> unchanged. With force_one, resamples until at least one position
// is masked.
MaskedText mask_text(const std::vector<int>& tokens, const Vocab& vocab, double rate, Rng& rng,
                     bool force_one = true);

struct MaskBlock {
    int x0 = 0, y0 = 0, w = 0, h = 0;
    int area() const { return w * h; }
};

struct ImageMask {
    MaskSpec spec;                  // positions are patch indices, row-major
    std::vector<MaskBlock> blocks;  // the sampled rectangles
};

// BEiT-style blockwise masking: rectangles of area >= min_block (aspect
// ratio within [0.5, 2]) are drawn until at least ceil(ratio * N) patches
// are covered.
ImageMask sample_blockwise_mask(int grid_w, int grid_h, double ratio, int min_block, Rng& rng);

constexpr int kMaxMaskBlockArea = 16;

}  // namespace simla
