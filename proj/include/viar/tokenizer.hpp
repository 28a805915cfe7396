#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "viar/errors.hpp"
#include "viar/rng.hpp"
#include "viar/serialize.hpp"

namespace viar {

// Frozen multi-scale vector quantizer. Every operation here is a pure
// function of immutable inputs; nothing participates in gradient tracking.

struct ScaleHierarchy {
    std::vector<std::size_t> resolutions; // n_1 < n_2 < ... < n_K, tokens per side

    static ScaleHierarchy geometric(std::size_t base, std::size_t count) {
        ScaleHierarchy h;
        std::size_t n = 1;
        for (std::size_t k = 0; k < count; ++k) {
            h.resolutions.push_back(n);
            n *= base;
        }
        h.validate();
        return h;
    }

    void validate() const {
        if (resolutions.empty()) throw SpecError("hierarchy: no scales");
        if (resolutions.front() < 1) throw SpecError("hierarchy: n_1 must be >= 1");
        for (std::size_t k = 1; k < resolutions.size(); ++k)
            if (resolutions[k] <= resolutions[k - 1])
                throw SpecError("hierarchy: resolutions must be strictly increasing");
    }

    std::size_t count() const { return resolutions.size(); }
    std::size_t finest() const { return resolutions.back(); }
    std::size_t tokens_at(std::size_t k) const { return resolutions[k] * resolutions[k]; }
    std::size_t total_tokens() const {
        std::size_t t = 0;
        for (std::size_t n : resolutions) t += n * n;
        return t;
    }
    // Row offset of scale k (0-based) in the concatenated token sequence.
    std::size_t offset(std::size_t k) const {
        std::size_t off = 0;
        for (std::size_t i = 0; i < k; ++i) off += tokens_at(i);
        return off;
    }
};

template <std::floating_point Real>
struct CodeBook {
    std::size_t codes = 0; // V
    std::size_t width = 0; // D
    std::vector<Real> entries; // V x D row-major

    const Real* row(std::size_t v) const { return entries.data() + v * width; }

    void validate() const {
        if (codes < 2) throw DataError("codebook: need at least 2 codes");
        if (entries.size() != codes * width) throw DimensionError("codebook: bad entry count");
        for (std::size_t a = 0; a < codes; ++a) {
            for (std::size_t b = a + 1; b < codes; ++b) {
                Real d2 = 0;
                for (std::size_t j = 0; j < width; ++j) {
                    const Real d = row(a)[j] - row(b)[j];
                    d2 += d * d;
                }
                if (std::sqrt(d2) <= Real(1e-9))
                    throw DataError("codebook: duplicate rows " + std::to_string(a) + "," +
                                    std::to_string(b));
            }
        }
    }
};

struct TokenHierarchy {
    std::vector<std::size_t> sides;         // n_k per scale
    std::vector<std::vector<int>> grids;    // grid k: n_k * n_k indices, row-major

    std::size_t count() const { return grids.size(); }
};

template <std::floating_point Real>
struct LatentMap {
    std::size_t side = 0;  // n_K
    std::size_t depth = 0; // D
    std::vector<Real> features; // side x side x depth, channel fastest

    const Real* cell(std::size_t i, std::size_t j) const {
        return features.data() + (i * side + j) * depth;
    }
};

// Linear patch projection standing in for the frozen encoder: each PxP patch
// of a C-channel image maps through one (P*P*C) x D affine map.
template <std::floating_point Real>
struct PatchEncoder {
    std::size_t patch = 0, channels = 0, width = 0;
    std::vector<Real> weight; // (P*P*C) x D
    std::vector<Real> bias;   // D
};

template <std::floating_point Real>
struct PatchDecoder {
    std::size_t patch = 0, channels = 0, width = 0;
    std::vector<Real> weight; // D x (P*P*C)
    std::vector<Real> bias;   // P*P*C
};

template <std::floating_point Real>
LatentMap<Real> encode(const io::Image<Real>& im, const PatchEncoder<Real>& enc) {
    const std::size_t p = enc.patch;
    if (p == 0 || im.height % p != 0 || im.width % p != 0)
        throw DimensionError("encode: image " + std::to_string(im.height) + "x" +
                             std::to_string(im.width) + " not divisible by patch " +
                             std::to_string(p));
    if (im.height != im.width) throw DimensionError("encode: square images only");
    if (im.channels != enc.channels) throw DimensionError("encode: channel mismatch");
    const std::size_t side = im.height / p;
    const std::size_t in_dim = p * p * enc.channels;
    LatentMap<Real> f;
    f.side = side;
    f.depth = enc.width;
    f.features.assign(side * side * enc.width, Real(0));
    std::vector<Real> patch_buf(in_dim);
    for (std::size_t bi = 0; bi < side; ++bi) {
        for (std::size_t bj = 0; bj < side; ++bj) {
            std::size_t idx = 0;
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t c = 0; c < im.channels; ++c)
                        patch_buf[idx++] = im.at(bi * p + y, bj * p + x, c);
            Real* out = f.features.data() + (bi * side + bj) * enc.width;
            for (std::size_t d = 0; d < enc.width; ++d) out[d] = enc.bias[d];
            for (std::size_t i = 0; i < in_dim; ++i) {
                const Real v = patch_buf[i];
                if (v == Real(0)) continue;
                const Real* wrow = enc.weight.data() + i * enc.width;
                for (std::size_t d = 0; d < enc.width; ++d) out[d] += v * wrow[d];
            }
        }
    }
    return f;
}

// Area-average resampling of the latent map down to n_k x n_k. Exact block
// means when n_K is a multiple of n_k; fractional box overlap otherwise.
// k is 1-based; k = K returns the input bitwise.
template <std::floating_point Real>
std::vector<Real> interp_to_scale(const LatentMap<Real>& f, std::size_t k,
                                  const ScaleHierarchy& h) {
    if (k < 1 || k > h.count()) throw RangeError("interp_to_scale: k outside [1,K]");
    const std::size_t n = h.resolutions[k - 1];
    if (n == f.side) return f.features;
    if (n > f.side) throw RangeError("interp_to_scale: target finer than latent");
    const std::size_t m = f.side, d = f.depth;
    const double ratio = static_cast<double>(m) / static_cast<double>(n);
    std::vector<Real> out(n * n * d, Real(0));
    for (std::size_t ti = 0; ti < n; ++ti) {
        const double y0 = ti * ratio, y1 = (ti + 1) * ratio;
        for (std::size_t tj = 0; tj < n; ++tj) {
            const double x0 = tj * ratio, x1 = (tj + 1) * ratio;
            Real* cell = out.data() + (ti * n + tj) * d;
            double total_w = 0;
            for (std::size_t si = static_cast<std::size_t>(y0); si < m && si < y1; ++si) {
                const double wy = std::min<double>(y1, si + 1) - std::max<double>(y0, si);
                if (wy <= 0) continue;
                for (std::size_t sj = static_cast<std::size_t>(x0); sj < m && sj < x1; ++sj) {
                    const double wx = std::min<double>(x1, sj + 1) - std::max<double>(x0, sj);
                    if (wx <= 0) continue;
                    const Real w = static_cast<Real>(wy * wx);
                    total_w += wy * wx;
                    const Real* src = f.cell(si, sj);
                    for (std::size_t c = 0; c < d; ++c) cell[c] += w * src[c];
                }
            }
            for (std::size_t c = 0; c < d; ++c) cell[c] /= static_cast<Real>(total_w);
        }
    }
    return out;
}

// Nearest code under squared Euclidean distance; ties break to the lowest
// index so quantization is a pure function.
template <std::floating_point Real>
std::vector<int> quantize_scale(const std::vector<Real>& features, std::size_t side,
                                const CodeBook<Real>& book) {
    if (features.size() != side * side * book.width)
        throw DimensionError("quantize_scale: feature width mismatch");
    std::vector<int> grid(side * side);
    for (std::size_t cell = 0; cell < side * side; ++cell) {
        const Real* x = features.data() + cell * book.width;
        for (std::size_t j = 0; j < book.width; ++j)
            if (!std::isfinite(x[j])) throw DataError("quantize_scale: non-finite feature");
        Real best = std::numeric_limits<Real>::max();
        int best_v = 0;
        for (std::size_t v = 0; v < book.codes; ++v) {
            const Real* z = book.row(v);
            Real d2 = 0;
            for (std::size_t j = 0; j < book.width; ++j) {
                const Real dd = z[j] - x[j];
                d2 += dd * dd;
            }
            if (d2 < best) {
                best = d2;
                best_v = static_cast<int>(v);
            }
        }
        grid[cell] = best_v;
    }
    return grid;
}

template <std::floating_point Real>
TokenHierarchy tokenize(const io::Image<Real>& im, const CodeBook<Real>& book,
                        const ScaleHierarchy& h, const PatchEncoder<Real>& enc) {
    const LatentMap<Real> f = encode(im, enc);
    if (f.side != h.finest()) throw DimensionError("tokenize: latent side != finest scale");
    TokenHierarchy tokens;
    for (std::size_t k = 1; k <= h.count(); ++k) {
        const std::size_t n = h.resolutions[k - 1];
        tokens.sides.push_back(n);
        tokens.grids.push_back(quantize_scale(interp_to_scale(f, k, h), n, book));
    }
    return tokens;
}

// Reconstruction uses only the finest grid: look codes up, project each cell
// back to a pixel patch, tile.
template <std::floating_point Real>
io::Image<Real> decode(const TokenHierarchy& tokens, const CodeBook<Real>& book,
                       const PatchDecoder<Real>& dec) {
    if (tokens.grids.empty()) throw ContractError("decode: empty hierarchy");
    const std::size_t side = tokens.sides.back();
    const std::vector<int>& grid = tokens.grids.back();
    const std::size_t p = dec.patch, c = dec.channels;
    const std::size_t out_dim = p * p * c;
    io::Image<Real> im;
    im.height = im.width = side * p;
    im.channels = c;
    im.pixels.assign(im.height * im.width * c, Real(0));
    std::vector<Real> patch(out_dim);
    for (std::size_t bi = 0; bi < side; ++bi) {
        for (std::size_t bj = 0; bj < side; ++bj) {
            const int v = grid[bi * side + bj];
            if (v < 0 || static_cast<std::size_t>(v) >= book.codes)
                throw IndexError("decode: token " + std::to_string(v) + " outside codebook");
            const Real* z = book.row(static_cast<std::size_t>(v));
            for (std::size_t o = 0; o < out_dim; ++o) patch[o] = dec.bias[o];
            for (std::size_t i = 0; i < dec.width; ++i) {
                const Real zi = z[i];
                if (zi == Real(0)) continue;
                const Real* wrow = dec.weight.data() + i * out_dim;
                for (std::size_t o = 0; o < out_dim; ++o) patch[o] += zi * wrow[o];
            }
            std::size_t idx = 0;
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        im.at(bi * p + y, bj * p + x, ch) = patch[idx++];
        }
    }
    return im;
}

// Seeded k-means (k-means++ init, Lloyd iterations capped at 50). Stands in
// for the pretrained tokenizer codebook; frozen once built.
template <std::floating_point Real>
CodeBook<Real> build_codebook(const std::vector<std::vector<Real>>& samples, std::size_t v_codes,
                              std::uint64_t seed) {
    if (samples.size() < v_codes)
        throw DataError("build_codebook: " + std::to_string(samples.size()) + " samples for " +
                        std::to_string(v_codes) + " codes");
    const std::size_t n = samples.size();
    const std::size_t d = samples[0].size();
    Rng rng(seed, "codebook");

    auto dist2 = [&](const Real* a, const Real* b) {
        Real s = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const Real dd = a[j] - b[j];
            s += dd * dd;
        }
        return s;
    };

    // k-means++ seeding
    std::vector<Real> centroids;
    centroids.reserve(v_codes * d);
    const std::size_t first = rng.uniform_u64(n);
    centroids.insert(centroids.end(), samples[first].begin(), samples[first].end());
    std::vector<double> min_d2(n);
    for (std::size_t v = 1; v < v_codes; ++v) {
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            for (std::size_t cv = 0; cv < v; ++cv)
                best = std::min(best,
                                static_cast<double>(dist2(samples[i].data(), centroids.data() + cv * d)));
            min_d2[i] = best;
        }
        const std::size_t pick = rng.weighted_index(min_d2);
        centroids.insert(centroids.end(), samples[pick].begin(), samples[pick].end());
    }

    // Lloyd: converged when assignments stop changing; empty clusters keep
    // their previous centroid.
    std::vector<std::size_t> assign(n, 0);
    constexpr int kMaxIters = 50;
    for (int iter = 0; iter < kMaxIters; ++iter) {
        bool changed = iter == 0;
        for (std::size_t i = 0; i < n; ++i) {
            Real best = std::numeric_limits<Real>::max();
            std::size_t best_v = 0;
            for (std::size_t v = 0; v < v_codes; ++v) {
                const Real d2 = dist2(samples[i].data(), centroids.data() + v * d);
                if (d2 < best) {
                    best = d2;
                    best_v = v;
                }
            }
            if (assign[i] != best_v) {
                assign[i] = best_v;
                changed = true;
            }
        }
        if (!changed) break;
        std::vector<Real> sums(v_codes * d, Real(0));
        std::vector<std::size_t> counts(v_codes, 0);
        for (std::size_t i = 0; i < n; ++i) {
            counts[assign[i]]++;
            for (std::size_t j = 0; j < d; ++j) sums[assign[i] * d + j] += samples[i][j];
        }
        for (std::size_t v = 0; v < v_codes; ++v) {
            if (counts[v] == 0) continue;
            for (std::size_t j = 0; j < d; ++j)
                centroids[v * d + j] = sums[v * d + j] / static_cast<Real>(counts[v]);
        }
    }

    CodeBook<Real> book;
    book.codes = v_codes;
    book.width = d;
    book.entries = std::move(centroids);
    book.validate();
    return book;
}

// ---------------------------------------------------------------------------
// Codebook serialization: "VIARCB1", V, D as u32 LE, then V*D fp32 LE.

inline constexpr std::string_view kCodebookMagic = "VIARCB1";

template <std::floating_point Real>
void write_codebook(std::ostream& os, const CodeBook<Real>& book) {
    io::write_magic(os, kCodebookMagic);
    io::write_u32(os, static_cast<std::uint32_t>(book.codes));
    io::write_u32(os, static_cast<std::uint32_t>(book.width));
    io::write_f32_values(os, book.entries);
}

template <std::floating_point Real>
CodeBook<Real> read_codebook(std::istream& is) {
    io::expect_magic(is, kCodebookMagic);
    CodeBook<Real> book;
    book.codes = io::read_u32(is);
    book.width = io::read_u32(is);
    book.entries = io::read_f32_values<Real>(is, book.codes * book.width);
    return book;
}

} // namespace viar
