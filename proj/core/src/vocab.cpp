#include "simla/tokenization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace simla {

Vocab Vocab::from_words(const std::vector<std::string>& words) {
    Vocab v;
    v.tokens_ = {"[CLS]", "[SEP]", "[MASK]", "[PAD]"};
    for (const auto& w : words) {
        if (std::find(v.tokens_.begin(), v.tokens_.end(), w) != v.tokens_.end())
            throw std::invalid_argument("vocab: duplicate token '" + w + "'");
        v.tokens_.push_back(w);
    }
    for (size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int>(i);
    return v;
}

Vocab Vocab::shape_world() {
    return from_words({"a", "and", "red", "green", "blue", "yellow", "circle", "square", "triangle"});
}

int Vocab::id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw std::invalid_argument("vocab: unknown word '" + word + "'");
    return it->second;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("vocab: cannot write " + path);
    for (const auto& t : tokens_) out << t << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("vocab: cannot read " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    if (lines.size() < 4 || lines[0] != "[CLS]" || lines[1] != "[SEP]" || lines[2] != "[MASK]" || lines[3] != "[PAD]")
        throw std::runtime_error("vocab: " + path + " does not start with the four specials");
    return from_words({lines.begin() + 4, lines.end()});
}

std::vector<int> tokenize(const std::string& caption, const Vocab& vocab, int max_len) {
    std::vector<int> ids = {Vocab::kCls};
    std::istringstream words(caption);
    std::string w;
    while (words >> w) ids.push_back(vocab.id(w));
    if (static_cast<int>(ids.size()) + 1 > max_len)
        throw std::invalid_argument("tokenize: caption of " + std::to_string(ids.size() - 1) +
                                    " words does not fit in max_len " + std::to_string(max_len));
    ids.push_back(Vocab::kSep);
    ids.resize(max_len, Vocab::kPad);
    return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (Vocab::is_special(id)) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

MaskedText mask_text(const std::vector<int>& tokens, const Vocab& vocab, double rate, Rng& rng, bool force_one) {
    std::vector<int> eligible;
    for (size_t i = 0; i < tokens.size(); ++i)
        if (!Vocab::is_special(tokens[i])) eligible.push_back(static_cast<int>(i));
    if (eligible.empty()) throw std::invalid_argument("mask_text: sequence has no non-special tokens");

    MaskedText out;
    out.spec.kind = MaskKind::text_bert;
    for (;;) {
        out.spec.positions.clear();
        out.spec.replacements.clear();
        out.tokens = tokens;
        out.targets.assign(tokens.size(), kIgnoreTarget);
        for (int pos : eligible) {
            if (!rng.bernoulli(rate)) continue;
            out.spec.positions.push_back(pos);
            out.targets[pos] = tokens[pos];
            double u = rng.uniform();
            if (u < 0.8) {
                out.spec.replacements.push_back(TextMaskAction::use_mask_token);
                out.tokens[pos] = Vocab::kMask;
            } else if (u < 0.9) {
                out.spec.replacements.push_back(TextMaskAction::use_random_token);
                out.tokens[pos] = 4 + rng.uniform_index(vocab.size() - 4);
            } else {
                out.spec.replacements.push_back(TextMaskAction::keep_original);
            }
        }
        if (!out.spec.positions.empty() || !force_one) break;
    }
    return out;
}

ImageMask sample_blockwise_mask(int grid_w, int grid_h, double ratio, int min_block, Rng& rng) {
    if (grid_w < 2 || grid_h < 2) throw std::invalid_argument("mask_image: grid must be at least 2x2");
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("mask_image: ratio must be in (0,1)");
    const int n = grid_w * grid_h;
    const int target = static_cast<int>(std::ceil(ratio * n));
    std::vector<bool> covered(n, false);
    ImageMask out;
    out.spec.kind = MaskKind::image_blockwise;
    int masked = 0;
    while (masked < target) {
        // Side lengths in [2,4]: area in [4,16], aspect within [0.5, 2].
        int h = 2 + rng.uniform_index(3);
        int w = 2 + rng.uniform_index(3);
        h = std::min(h, grid_h);
        w = std::min(w, grid_w);
        if (h * w < min_block) continue;
        MaskBlock blk;
        blk.h = h;
        blk.w = w;
        blk.y0 = rng.uniform_index(grid_h - h + 1);
        blk.x0 = rng.uniform_index(grid_w - w + 1);
        out.blocks.push_back(blk);
        for (int y = blk.y0; y < blk.y0 + h; ++y)
            for (int x = blk.x0; x < blk.x0 + w; ++x) {
                int p = y * grid_w + x;
                if (!covered[p]) {
                    covered[p] = true;
                    ++masked;
                }
            }
    }
    for (int p = 0; p < n; ++p)
        if (covered[p]) out.spec.positions.push_back(p);
    return out;
}

}  // namespace simla
