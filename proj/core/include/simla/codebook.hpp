#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "simla/rng.hpp"
#include "simla/tokenization.hpp"

namespace simla {

// Frozen k-means codebook over raw patch pixel vectors. Stands in for a
// learned discrete tokenizer: it never receives gradients and provides the
// discrete reconstruction targets for masked image modeling.
class VisualCodebook {
public:
    VisualCodebook() = default;
    VisualCodebook(int k, int dim, std::vector<float> centroids) : k_(k), dim_(dim), centroids_(std::move(centroids)) {
        if (k_ < 2) throw std::invalid_argument("codebook: K must be >= 2");
        if (static_cast<size_t>(k_) * dim_ != centroids_.size())
            throw std::invalid_argument("codebook: centroid buffer size mismatch");
    }

    int size() const { return k_; }
    int dim() const { return dim_; }
    const float* centroid(int i) const { return centroids_.data() + static_cast<size_t>(i) * dim_; }
    const std::vector<float>& raw() const { return centroids_; }

    // Nearest centroid by squared L2; ties break to the lowest id.
    template <typename R>
    int quantize(const R* patch) const {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k_; ++c) {
            const float* mu = centroid(c);
            double d = 0.0;
            for (int j = 0; j < dim_; ++j) {
                double diff = static_cast<double>(patch[j]) - static_cast<double>(mu[j]);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        return best;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("codebook: cannot write " + path);
        out.write("SMCB", 4);
        uint32_t k = static_cast<uint32_t>(k_), d = static_cast<uint32_t>(dim_);
        out.write(reinterpret_cast<const char*>(&k), 4);
        out.write(reinterpret_cast<const char*>(&d), 4);
        out.write(reinterpret_cast<const char*>(centroids_.data()), centroids_.size() * sizeof(float));
    }

    static VisualCodebook load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("codebook: cannot read " + path);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "SMCB", 4) != 0) throw std::runtime_error("codebook: bad magic in " + path);
        uint32_t k = 0, d = 0;
        in.read(reinterpret_cast<char*>(&k), 4);
        in.read(reinterpret_cast<char*>(&d), 4);
        std::vector<float> c(static_cast<size_t>(k) * d);
        in.read(reinterpret_cast<char*>(c.data()), c.size() * sizeof(float));
        if (!in) throw std::runtime_error("codebook: truncated file " + path);
        return VisualCodebook(static_cast<int>(k), static_cast<int>(d), std::move(c));
    }

private:
    int k_ = 0;
    int dim_ = 0;
    std::vector<float> centroids_;
};

namespace detail {

inline double sq_dist(const float* a, const float* b, int dim) {
    double d = 0.0;
    for (int j = 0; j < dim; ++j) {
        double diff = static_cast<double>(a[j]) - static_cast<double>(b[j]);
        d += diff * diff;
    }
    return d;
}

}  // namespace detail

// Lloyd's algorithm with farthest-point initialization (first seed random,
// each next seed the point maximizing its distance to the chosen set; ties
// to the lowest index). Quantization error is non-increasing per iteration;
// an empty cluster keeps its previous centroid.
inline VisualCodebook build_codebook(const std::vector<std::vector<float>>& patches, int k, uint64_t seed,
                                     int iterations = 20) {
    if (k < 2) throw std::invalid_argument("build_codebook: K must be >= 2");
    if (static_cast<int>(patches.size()) < k)
        throw std::invalid_argument("build_codebook: need at least K=" + std::to_string(k) + " patches, got " +
                                    std::to_string(patches.size()));
    const int dim = static_cast<int>(patches[0].size());
    const int n = static_cast<int>(patches.size());
    Rng rng(seed);

    std::vector<float> centroids(static_cast<size_t>(k) * dim);
    std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
    int first = rng.uniform_index(n);
    std::copy(patches[first].begin(), patches[first].end(), centroids.begin());
    for (int c = 1; c < k; ++c) {
        const float* last = centroids.data() + static_cast<size_t>(c - 1) * dim;
        int far_idx = 0;
        double far_d = -1.0;
        for (int i = 0; i < n; ++i) {
            min_dist[i] = std::min(min_dist[i], detail::sq_dist(patches[i].data(), last, dim));
            if (min_dist[i] > far_d) {
                far_d = min_dist[i];
                far_idx = i;
            }
        }
        std::copy(patches[far_idx].begin(), patches[far_idx].end(),
                  centroids.begin() + static_cast<size_t>(c) * dim);
    }

    std::vector<int> assign(n, 0);
    std::vector<double> sums(static_cast<size_t>(k) * dim);
    std::vector<int> counts(k);
    for (int it = 0; it < iterations; ++it) {
        VisualCodebook current(k, dim, centroids);
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int a = current.quantize(patches[i].data());
            if (a != assign[i]) changed = true;
            assign[i] = a;
        }
        if (!changed && it > 0) break;
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (int i = 0; i < n; ++i) {
            double* s = sums.data() + static_cast<size_t>(assign[i]) * dim;
            for (int j = 0; j < dim; ++j) s[j] += patches[i][j];
            ++counts[assign[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            float* mu = centroids.data() + static_cast<size_t>(c) * dim;
            const double* s = sums.data() + static_cast<size_t>(c) * dim;
            for (int j = 0; j < dim; ++j) mu[j] = static_cast<float>(s[j] / counts[c]);
        }
    }
    return VisualCodebook(k, dim, std::move(centroids));
}

// Mean squared distance of each patch to its assigned centroid.
inline double quantization_error(const VisualCodebook& cb, const std::vector<std::vector<float>>& patches) {
    double total = 0.0;
    for (const auto& p : patches) total += detail::sq_dist(p.data(), cb.centroid(cb.quantize(p.data())), cb.dim());
    return patches.empty() ? 0.0 : total / static_cast<double>(patches.size());
}

// Non-overlapping P x P x C patch pixel vectors in row-major grid order.
template <typename R>
std::vector<std::vector<float>> extract_patch_vectors(const R* image, int image_size, int patch, int channels) {
    if (image_size % patch != 0) throw std::invalid_argument("extract_patch_vectors: image not divisible by patch");
    const int g = image_size / patch;
    const int row_stride = image_size * channels;
    std::vector<std::vector<float>> out;
    out.reserve(static_cast<size_t>(g) * g);
    for (int py = 0; py < g; ++py)
        for (int px = 0; px < g; ++px) {
            std::vector<float> v(static_cast<size_t>(patch) * patch * channels);
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch * channels; ++x)
                    v[static_cast<size_t>(y) * patch * channels + x] =
                        static_cast<float>(image[(py * patch + y) * row_stride + px * patch * channels + x]);
            out.push_back(std::move(v));
        }
    return out;
}

// Visual token ids for each patch of an image, row-major grid order.
template <typename R>
std::vector<int> quantize_patches(const R* image, int image_size, int patch, int channels,
                                  const VisualCodebook& cb) {
    auto vecs = extract_patch_vectors(image, image_size, patch, channels);
    std::vector<int> ids;
    ids.reserve(vecs.size());
    for (const auto& v : vecs) ids.push_back(cb.quantize(v.data()));
    return ids;
}

}  // namespace simla
