#pragma once

#include <map>

#include "polypflow/tensor.hpp"

namespace pf {
namespace metrics {

// All metrics operate on single-channel [H,W] tensors: predictions soft in
// [0,1], ground truth binary {0,1}. Foreground threshold is strictly > 0.5
// (ties go to background).

constexpr double kEps = 1e-12;

inline Tensor threshold_mask(const Tensor& p, double thr = 0.5) {
    Tensor out(p.shape);
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] > thr ? 1.0 : 0.0;
    return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

inline double dice(const Tensor& p, const Tensor& g) {
    check_same_shape(p, g, "dice");
    double inter = 0.0, sp = 0.0, sg = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += p[i] * g[i];
        sp += p[i];
        sg += g[i];
    }
    if (sp + sg == 0.0) return 1.0;  // both empty
    return 2.0 * inter / (sp + sg);
}

inline double iou(const Tensor& p, const Tensor& g) {
    check_same_shape(p, g, "iou");
    double inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += p[i] * g[i];
        uni += p[i] + g[i] - p[i] * g[i];
    }
    if (uni == 0.0) return 1.0;
    return inter / uni;
}

inline double mae(const Tensor& p_soft, const Tensor& g) {
    check_same_shape(p_soft, g, "mae");
    double acc = 0.0;
    for (std::size_t i = 0; i < p_soft.size(); ++i) acc += std::abs(p_soft[i] - g[i]);
    return acc / static_cast<double>(p_soft.size());
}

namespace detail {

// Exact Euclidean distance transform with nearest-foreground-pixel indices.
// Ties resolve to the smaller column, then the smaller row (column-major
// scan); the same rule is pinned wherever a nearest pixel matters.
struct DistField {
    std::vector<double> dist;  // Euclidean distance, 0 on foreground
    std::vector<int> nearest;  // flat index h*W+w of the nearest foreground pixel
};

inline DistField distance_transform(const Tensor& g) {
    const int H = g.dim(0), W = g.dim(1);
    DistField out;
    out.dist.assign(static_cast<std::size_t>(H) * W, 1e18);
    out.nearest.assign(static_cast<std::size_t>(H) * W, -1);

    // nearest foreground row per column
    std::vector<int> col_row(static_cast<std::size_t>(H) * W, -1);
    for (int w = 0; w < W; ++w) {
        int last = -1;
        for (int h = 0; h < H; ++h) {
            if (g.at2(h, w) > 0.5) last = h;
            col_row[h * W + w] = last;
        }
        int nxt = -1;
        for (int h = H - 1; h >= 0; --h) {
            if (g.at2(h, w) > 0.5) nxt = h;
            int& cur = col_row[h * W + w];
            // prefer the smaller row on distance ties
            if (cur < 0)
                cur = nxt;
            else if (nxt >= 0 && std::abs(nxt - h) < std::abs(cur - h))
                cur = nxt;
        }
    }
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double best = 1e18;
            int best_idx = -1;
            for (int w2 = 0; w2 < W; ++w2) {
                int r = col_row[h * W + w2];
                if (r < 0) continue;
                double d2 = static_cast<double>(w - w2) * (w - w2) +
                            static_cast<double>(h - r) * (h - r);
                if (d2 < best) {
                    best = d2;
                    best_idx = r * W + w2;
                }
            }
            out.dist[h * W + w] = best_idx < 0 ? 1e18 : std::sqrt(best);
            out.nearest[h * W + w] = best_idx;
        }
    return out;
}

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(size) * size);
    const int r = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            double v = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2.0 * sigma * sigma));
            k[i * size + j] = v;
            sum += v;
        }
    for (auto& v : k) v /= sum;
    return k;
}

// mean / sample standard deviation of a value list
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    if (v.size() < 2) return {m, 0.0};
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    return {m, std::sqrt(s2 / static_cast<double>(v.size() - 1))};
}

inline double object_score(const std::vector<double>& vals) {
    auto [x, sd] = mean_std(vals);
    return 2.0 * x / (x * x + 1.0 + sd + kEps);
}

// SSIM-style regional similarity used by the structure measure.
inline double region_ssim(const std::vector<double>& p, const std::vector<double>& g) {
    const std::size_t n = p.size();
    if (n == 0) return 1.0;
    double xm = 0.0, ym = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        xm += p[i];
        ym += g[i];
    }
    xm /= static_cast<double>(n);
    ym /= static_cast<double>(n);
    double sx = 0.0, sy = 0.0, sxy = 0.0;
    if (n > 1) {
        for (std::size_t i = 0; i < n; ++i) {
            sx += (p[i] - xm) * (p[i] - xm);
            sy += (g[i] - ym) * (g[i] - ym);
            sxy += (p[i] - xm) * (g[i] - ym);
        }
        sx /= static_cast<double>(n - 1);
        sy /= static_cast<double>(n - 1);
        sxy /= static_cast<double>(n - 1);
    }
    const double alpha = 4.0 * xm * ym * sxy;
    const double beta = (xm * xm + ym * ym) * (sx + sy);
    if (alpha != 0.0) return alpha / (beta + kEps);
    return beta == 0.0 ? 1.0 : 0.0;
}

}  // namespace detail

// Weighted F-measure (distance-transform weighted precision/recall, beta^2=1).
// All-background ground truth: 1 when the prediction is also all-background
// (no pixel above 0.5), else 0.
inline double weighted_fmeasure(const Tensor& p_soft, const Tensor& g) {
    check_same_shape(p_soft, g, "weighted_fmeasure");
    const int H = g.dim(0), W = g.dim(1);
    const std::size_t N = p_soft.size();
    double gsum = 0.0;
    for (std::size_t i = 0; i < N; ++i) gsum += g[i];
    if (gsum == 0.0) {
        for (std::size_t i = 0; i < N; ++i)
            if (p_soft[i] > 0.5) return 0.0;
        return 1.0;
    }

    auto df = detail::distance_transform(g);
    std::vector<double> E(N), Et(N);
    for (std::size_t i = 0; i < N; ++i) E[i] = std::abs(p_soft[i] - g[i]);
    for (std::size_t i = 0; i < N; ++i) Et[i] = g[i] > 0.5 ? E[i] : E[df.nearest[i]];

    // Gaussian-smoothed error, 7x7 kernel, sigma 5, zero padding
    const int ks = 7, kr = 3;
    static const std::vector<double> K = detail::gaussian_kernel(ks, 5.0);
    std::vector<double> EA(N, 0.0);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double acc = 0.0;
            for (int i = -kr; i <= kr; ++i) {
                const int hh = h + i;
                if (hh < 0 || hh >= H) continue;
                for (int j = -kr; j <= kr; ++j) {
                    const int ww = w + j;
                    if (ww < 0 || ww >= W) continue;
                    acc += K[(i + kr) * ks + (j + kr)] * Et[hh * W + ww];
                }
            }
            EA[h * W + w] = acc;
        }

    double ew_fg = 0.0, ew_bg = 0.0;
    const double decay = std::log(0.5) / 5.0;
    for (std::size_t i = 0; i < N; ++i) {
        double min_e = E[i];
        if (g[i] > 0.5 && EA[i] < E[i]) min_e = EA[i];
        double B = g[i] > 0.5 ? 1.0 : 2.0 - std::exp(decay * df.dist[i]);
        double ew = min_e * B;
        if (g[i] > 0.5)
            ew_fg += ew;
        else
            ew_bg += ew;
    }
    const double tpw = gsum - ew_fg;
    const double fpw = ew_bg;
    const double recall = 1.0 - ew_fg / gsum;
    const double precision = tpw / (tpw + fpw + kEps);
    return 2.0 * precision * recall / (precision + recall + kEps);
}

// Structure measure, alpha = 0.5 (object- and region-aware terms).
inline double s_measure(const Tensor& p_soft, const Tensor& g, double alpha = 0.5) {
    check_same_shape(p_soft, g, "s_measure");
    const int H = g.dim(0), W = g.dim(1);
    const std::size_t N = p_soft.size();
    double y = 0.0;
    for (std::size_t i = 0; i < N; ++i) y += g[i];
    y /= static_cast<double>(N);
    if (y == 0.0) return 1.0 - p_soft.mean();
    if (y == 1.0) return p_soft.mean();

    // object-aware term
    std::vector<double> fg_vals, bg_vals;
    for (std::size_t i = 0; i < N; ++i)
        (g[i] > 0.5 ? fg_vals : bg_vals).push_back(g[i] > 0.5 ? p_soft[i] : 1.0 - p_soft[i]);
    const double s_obj =
        y * detail::object_score(fg_vals) + (1.0 - y) * detail::object_score(bg_vals);

    // region-aware term: split at the foreground centroid
    double rc = 0.0, cc = 0.0, area = 0.0;
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
            if (g.at2(h, w) > 0.5) {
                rc += h;
                cc += w;
                area += 1.0;
            }
    int cut_h = std::clamp(static_cast<int>(std::llround(rc / area + 1.0)), 1, H - 1);
    int cut_w = std::clamp(static_cast<int>(std::llround(cc / area + 1.0)), 1, W - 1);

    double s_reg = 0.0;
    for (int qh = 0; qh < 2; ++qh)
        for (int qw = 0; qw < 2; ++qw) {
            const int h0 = qh ? cut_h : 0, h1 = qh ? H : cut_h;
            const int w0 = qw ? cut_w : 0, w1 = qw ? W : cut_w;
            std::vector<double> pv, gv;
            for (int h = h0; h < h1; ++h)
                for (int w = w0; w < w1; ++w) {
                    pv.push_back(p_soft.at2(h, w));
                    gv.push_back(g.at2(h, w));
                }
            const double weight = static_cast<double>(pv.size()) / static_cast<double>(N);
            s_reg += weight * detail::region_ssim(pv, gv);
        }
    return std::max(0.0, alpha * s_obj + (1.0 - alpha) * s_reg);
}

// Enhanced-alignment measure for one binarized prediction.
inline double e_measure(const Tensor& p_bin, const Tensor& g) {
    check_same_shape(p_bin, g, "e_measure");
    const std::size_t N = p_bin.size();
    double gsum = 0.0;
    for (std::size_t i = 0; i < N; ++i) gsum += g[i];
    double acc = 0.0;
    if (gsum == 0.0) {
        for (std::size_t i = 0; i < N; ++i) acc += 1.0 - p_bin[i];
    } else if (gsum == static_cast<double>(N)) {
        for (std::size_t i = 0; i < N; ++i) acc += p_bin[i];
    } else {
        const double gm = gsum / static_cast<double>(N);
        double pm = 0.0;
        for (std::size_t i = 0; i < N; ++i) pm += p_bin[i];
        pm /= static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i) {
            const double pg = g[i] - gm, pf = p_bin[i] - pm;
            const double align = 2.0 * pg * pf / (pg * pg + pf * pf + kEps);
            acc += (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    return acc / (static_cast<double>(N) - 1.0 + kEps);
}

// Maximum E-measure over 256 thresholds k/255 (binarization p >= threshold).
inline double e_measure_max(const Tensor& p_soft, const Tensor& g) {
    check_same_shape(p_soft, g, "e_measure_max");
    double best = 0.0;
    Tensor bin(p_soft.shape);
    for (int k = 0; k < 256; ++k) {
        const double thr = static_cast<double>(k) / 255.0;
        for (std::size_t i = 0; i < p_soft.size(); ++i) bin[i] = p_soft[i] >= thr ? 1.0 : 0.0;
        best = std::max(best, e_measure(bin, g));
    }
    return best;
}

struct ImageMetrics {
    std::string name;
    double dice = 0, iou = 0, fbw = 0, sm = 0, em = 0, mae = 0;
};

struct MetricsReport {
    std::vector<ImageMetrics> rows;
    ImageMetrics mean_row;  // name = "MEAN"
};

inline ImageMetrics evaluate_pair(const std::string& name, const Tensor& p_soft,
                                  const Tensor& g) {
    ImageMetrics m;
    m.name = name;
    Tensor p_bin = threshold_mask(p_soft);
    m.dice = dice(p_bin, g);
    m.iou = iou(p_bin, g);
    m.fbw = weighted_fmeasure(p_soft, g);
    m.sm = s_measure(p_soft, g);
    m.em = e_measure_max(p_soft, g);
    m.mae = mae(p_soft, g);
    return m;
}

inline MetricsReport evaluate_pairs(
    const std::vector<std::tuple<std::string, Tensor, Tensor>>& pairs) {
    MetricsReport rep;
    for (const auto& [name, p, g] : pairs) rep.rows.push_back(evaluate_pair(name, p, g));
    rep.mean_row.name = "MEAN";
    if (!rep.rows.empty()) {
        for (const auto& r : rep.rows) {
            rep.mean_row.dice += r.dice;
            rep.mean_row.iou += r.iou;
            rep.mean_row.fbw += r.fbw;
            rep.mean_row.sm += r.sm;
            rep.mean_row.em += r.em;
            rep.mean_row.mae += r.mae;
        }
        const double n = static_cast<double>(rep.rows.size());
        rep.mean_row.dice /= n;
        rep.mean_row.iou /= n;
        rep.mean_row.fbw /= n;
        rep.mean_row.sm /= n;
        rep.mean_row.em /= n;
        rep.mean_row.mae /= n;
    }
    return rep;
}

}  // namespace metrics
}  // namespace pf
