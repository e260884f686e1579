#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nyoforge/errors.hpp"
#include "nyoforge/rng.hpp"

namespace nyoforge {

// Row-major matrix of doubles. All core math runs in f64 at desk scale.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}

    double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }
    bool empty() const { return a.empty(); }
};

using Vec = std::vector<double>;

struct LossConfig {
    enum class Mode { none, maxz, auxz };
    Mode mode = Mode::maxz;
    double maxz_coeff = 2e-4;
    double auxz_coeff = 1e-4;
};

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int context_len = 128;
    int vocab_size = 512;
    int mlp_hidden = 0;  // 0 -> 4 * d_model
    double rope_base = 10000.0;
    double ln_eps = 1e-5;
    bool tied_head = true;
    bool attn_bias = false;  // no biases on q/k/v/o by default; MLP keeps biases
    LossConfig loss;

    int d_head() const { return d_model / n_heads; }
    int hidden() const { return mlp_hidden > 0 ? mlp_hidden : 4 * d_model; }

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || vocab_size <= 0)
            throw BadConfig("model dimensions must be positive");
        if (d_model % n_heads != 0) throw BadConfig("d_model must be divisible by n_heads");
        if (d_head() % 2 != 0) throw OddHeadDim("head dim must be even for rotary embeddings");
        if (context_len < 2) throw BadConfig("context_len must be >= 2");
    }

    // Full-scale preset from the 7B reference configuration; never
    // trained in this repo.
    static ModelConfig wonton7b() {
        ModelConfig c;
        c.d_model = 4096;
        c.n_heads = 32;
        c.n_layers = 32;
        c.context_len = 2048;
        c.vocab_size = 139776;
        return c;
    }
};

struct ModelParams {
    struct Layer {
        Vec ln1_gain, ln1_bias;
        Mat wq, wk, wv, wo;
        Vec bq, bk, bv, bo;  // allocated only when attn_bias
        Vec qkq_gain, qkq_bias, qkk_gain, qkk_bias;
        Vec ln2_gain, ln2_bias;
        Mat w1;
        Vec b1;
        Mat w2;
        Vec b2;
    };

    Mat embed;  // vocab x d
    std::vector<Layer> layers;
    Vec lnf_gain, lnf_bias;
    Mat head;  // empty when tied to the embedding

    static ModelParams shaped(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.embed = Mat(cfg.vocab_size, cfg.d_model);
        p.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& l : p.layers) {
            l.ln1_gain.assign(static_cast<size_t>(cfg.d_model), 0.0);
            l.ln1_bias.assign(static_cast<size_t>(cfg.d_model), 0.0);
            l.wq = Mat(cfg.d_model, cfg.d_model);
            l.wk = Mat(cfg.d_model, cfg.d_model);
            l.wv = Mat(cfg.d_model, cfg.d_model);
            l.wo = Mat(cfg.d_model, cfg.d_model);
            if (cfg.attn_bias) {
                l.bq.assign(static_cast<size_t>(cfg.d_model), 0.0);
                l.bk.assign(static_cast<size_t>(cfg.d_model), 0.0);
                l.bv.assign(static_cast<size_t>(cfg.d_model), 0.0);
                l.bo.assign(static_cast<size_t>(cfg.d_model), 0.0);
            }
            l.qkq_gain.assign(static_cast<size_t>(cfg.d_model), 0.0);
            l.qkq_bias.assign(static_cast<size_t>(cfg.d_model), 0.0);
            l.qkk_gain.assign(static_cast<size_t>(cfg.d_model), 0.0);
            l.qkk_bias.assign(static_cast<size_t>(cfg.d_model), 0.0);
            l.ln2_gain.assign(static_cast<size_t>(cfg.d_model), 0.0);
            l.ln2_bias.assign(static_cast<size_t>(cfg.d_model), 0.0);
            l.w1 = Mat(cfg.hidden(), cfg.d_model);
            l.b1.assign(static_cast<size_t>(cfg.hidden()), 0.0);
            l.w2 = Mat(cfg.d_model, cfg.hidden());
            l.b2.assign(static_cast<size_t>(cfg.d_model), 0.0);
        }
        p.lnf_gain.assign(static_cast<size_t>(cfg.d_model), 0.0);
        p.lnf_bias.assign(static_cast<size_t>(cfg.d_model), 0.0);
        if (!cfg.tied_head) p.head = Mat(cfg.vocab_size, cfg.d_model);
        return p;
    }

    // Fixed enumeration order; also the checkpoint serialization order.
    template <typename F>
    void for_each(F&& f) {
        f("embed", embed.a);
        for (size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            f(p + "ln1.gain", l.ln1_gain);
            f(p + "ln1.bias", l.ln1_bias);
            f(p + "attn.wq", l.wq.a);
            if (!l.bq.empty()) f(p + "attn.bq", l.bq);
            f(p + "attn.wk", l.wk.a);
            if (!l.bk.empty()) f(p + "attn.bk", l.bk);
            f(p + "attn.wv", l.wv.a);
            if (!l.bv.empty()) f(p + "attn.bv", l.bv);
            f(p + "attn.wo", l.wo.a);
            if (!l.bo.empty()) f(p + "attn.bo", l.bo);
            f(p + "attn.qk_q.gain", l.qkq_gain);
            f(p + "attn.qk_q.bias", l.qkq_bias);
            f(p + "attn.qk_k.gain", l.qkk_gain);
            f(p + "attn.qk_k.bias", l.qkk_bias);
            f(p + "ln2.gain", l.ln2_gain);
            f(p + "ln2.bias", l.ln2_bias);
            f(p + "mlp.w1", l.w1.a);
            f(p + "mlp.b1", l.b1);
            f(p + "mlp.w2", l.w2.a);
            f(p + "mlp.b2", l.b2);
        }
        f("final_ln.gain", lnf_gain);
        f("final_ln.bias", lnf_bias);
        if (!head.empty()) f("head", head.a);
    }

    template <typename F>
    void for_each(F&& f) const {
        const_cast<ModelParams*>(this)->for_each(
            [&](const std::string& name, Vec& v) { f(name, static_cast<const Vec&>(v)); });
    }
};

using ParamGrads = ModelParams;

// Linear and embedding weights drawn from Normal(0, base_std^2); each
// layer's MLP up-projection additionally scaled by 1/sqrt(n_layers).
// Norm gains start at one, every bias at zero.
inline ModelParams init_params(const ModelConfig& cfg, double base_std, uint64_t seed) {
    if (base_std <= 0) throw BadConfig("base_std must be positive");
    ModelParams p = ModelParams::shaped(cfg);
    Rng rng(seed);
    const double up_scale = 1.0 / std::sqrt(static_cast<double>(cfg.n_layers));
    p.for_each([&](const std::string& name, Vec& v) {
        const bool is_gain = name.ends_with(".gain");
        const bool is_bias = name.ends_with(".bias") || name.ends_with("b1") ||
                             name.ends_with("b2") || name.ends_with(".bq") ||
                             name.ends_with(".bk") || name.ends_with(".bv") ||
                             name.ends_with(".bo");
        if (is_gain) {
            std::fill(v.begin(), v.end(), 1.0);
            return;
        }
        if (is_bias) return;  // already zero
        double scale = base_std;
        if (name.ends_with("mlp.w1")) scale *= up_scale;
        for (double& x : v) x = scale * rng.gaussian();
    });
    return p;
}

// ---- primitive ops -------------------------------------------------------

inline Vec layer_norm(const Vec& x, const Vec& gain, const Vec& bias, double eps) {
    const size_t d = x.size();
    double mean = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    Vec y(d);
    for (size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    return y;
}

// Pairwise rotation of (2i, 2i+1) by m * base^(-2i/d); norm preserving.
inline void rope_rotate(double* v, int d_head, int64_t m, double base, bool inverse = false) {
    if (d_head % 2 != 0) throw OddHeadDim("rope requires an even head dim");
    for (int i = 0; i * 2 < d_head; ++i) {
        const double theta = std::pow(base, -2.0 * i / static_cast<double>(d_head));
        double angle = static_cast<double>(m) * theta;
        if (inverse) angle = -angle;
        const double c = std::cos(angle), s = std::sin(angle);
        const double x = v[2 * i], y = v[2 * i + 1];
        v[2 * i] = x * c - y * s;
        v[2 * i + 1] = x * s + y * c;
    }
}

inline Vec rope_apply(Vec v, int64_t m, double base = 10000.0) {
    rope_rotate(v.data(), static_cast<int>(v.size()), m, base);
    return v;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

// y = x W^T + b, with x (T x in) and W (out x in)
inline Mat linear(const Mat& x, const Mat& w, const Vec* bias = nullptr) {
    Mat y(x.rows, w.rows);
    for (int t = 0; t < x.rows; ++t) {
        const double* xr = x.row(t);
        double* yr = y.row(t);
        for (int o = 0; o < w.rows; ++o) {
            const double* wr = w.row(o);
            double acc = bias ? (*bias)[static_cast<size_t>(o)] : 0.0;
            for (int i = 0; i < w.cols; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
    return y;
}

inline void linear_backward(const Mat& x, const Mat& w, const Mat& dy, Mat* dx_add, Mat& dw,
                            Vec* db) {
    for (int t = 0; t < x.rows; ++t) {
        const double* xr = x.row(t);
        const double* dyr = dy.row(t);
        for (int o = 0; o < w.rows; ++o) {
            const double g = dyr[o];
            if (g == 0.0) continue;
            double* dwr = dw.row(o);
            for (int i = 0; i < w.cols; ++i) dwr[i] += g * xr[i];
            if (db) (*db)[static_cast<size_t>(o)] += g;
            if (dx_add) {
                const double* wr = w.row(o);
                double* dxr = dx_add->row(t);
                for (int i = 0; i < w.cols; ++i) dxr[i] += g * wr[i];
            }
        }
    }
}

// ---- forward trace -------------------------------------------------------

struct LnCache {
    Mat xhat;     // normalized pre-affine values
    Vec inv_std;  // one per row
};

// Per-head layer norm over slices of width d_head; inv_std is (T x heads).
struct HeadLnCache {
    Mat xhat;
    Mat inv_std;
};

struct LayerTrace {
    Mat x_in;
    LnCache ln1;
    Mat h;        // post-ln1
    Mat q, k, v;  // raw projections
    HeadLnCache qln, kln;
    Mat q_rot, k_rot;        // post QK-LayerNorm, post RoPE
    std::vector<Mat> probs;  // per head, T x T, zero where masked
    Mat attn_ctx;            // concatenated head contexts, pre-Wo
    Mat y;                   // residual after attention
    LnCache ln2;
    Mat h2;
    Mat u;  // pre-activation
    Mat g;  // post-gelu
    Mat out;

    // monitor raw values
    double max_attn_logit = 0.0;
    double mean_query_norm = 0.0;
    double block_output_rms = 0.0;
};

struct ForwardTrace {
    std::vector<int32_t> tokens;
    std::vector<int32_t> block_of;  // document block id per position
    std::vector<LayerTrace> layers;
    LnCache lnf;
    Mat final_hidden;
    Mat logits;
};

namespace detail {

inline void row_layer_norm(const Mat& x, const Vec& gain, const Vec& bias, double eps, Mat& y,
                           LnCache& cache) {
    const int T = x.rows, d = x.cols;
    cache.xhat = Mat(T, d);
    cache.inv_std.assign(static_cast<size_t>(T), 0.0);
    y = Mat(T, d);
    for (int t = 0; t < T; ++t) {
        const double* xr = x.row(t);
        double mean = 0;
        for (int i = 0; i < d; ++i) mean += xr[i];
        mean /= d;
        double var = 0;
        for (int i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        cache.inv_std[static_cast<size_t>(t)] = inv;
        double* xh = cache.xhat.row(t);
        double* yr = y.row(t);
        for (int i = 0; i < d; ++i) {
            xh[i] = (xr[i] - mean) * inv;
            yr[i] = xh[i] * gain[static_cast<size_t>(i)] + bias[static_cast<size_t>(i)];
        }
    }
}

inline void row_layer_norm_backward(const Mat& dy, const LnCache& cache, const Vec& gain,
                                    Mat& dx_add, Vec& dgain, Vec& dbias) {
    const int T = dy.rows, d = dy.cols;
    for (int t = 0; t < T; ++t) {
        const double* dyr = dy.row(t);
        const double* xh = cache.xhat.row(t);
        const double inv = cache.inv_std[static_cast<size_t>(t)];
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int i = 0; i < d; ++i) {
            const double dxh = dyr[i] * gain[static_cast<size_t>(i)];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[i];
            dgain[static_cast<size_t>(i)] += dyr[i] * xh[i];
            dbias[static_cast<size_t>(i)] += dyr[i];
        }
        const double m1 = sum_dxhat / d, m2 = sum_dxhat_xhat / d;
        double* dxr = dx_add.row(t);
        for (int i = 0; i < d; ++i) {
            const double dxh = dyr[i] * gain[static_cast<size_t>(i)];
            dxr[i] += inv * (dxh - m1 - xh[i] * m2);
        }
    }
}

// LayerNorm over each d_head slice with per-channel affine.
inline void head_layer_norm(const Mat& x, const Vec& gain, const Vec& bias, int heads, double eps,
                            Mat& y, HeadLnCache& cache) {
    const int T = x.rows, d = x.cols, dh = d / heads;
    cache.xhat = Mat(T, d);
    cache.inv_std = Mat(T, heads);
    y = Mat(T, d);
    for (int t = 0; t < T; ++t) {
        const double* xr = x.row(t);
        double* xh = cache.xhat.row(t);
        double* yr = y.row(t);
        for (int hd = 0; hd < heads; ++hd) {
            const int off = hd * dh;
            double mean = 0;
            for (int i = 0; i < dh; ++i) mean += xr[off + i];
            mean /= dh;
            double var = 0;
            for (int i = 0; i < dh; ++i) var += (xr[off + i] - mean) * (xr[off + i] - mean);
            var /= dh;
            const double inv = 1.0 / std::sqrt(var + eps);
            cache.inv_std(t, hd) = inv;
            for (int i = 0; i < dh; ++i) {
                xh[off + i] = (xr[off + i] - mean) * inv;
                yr[off + i] = xh[off + i] * gain[static_cast<size_t>(off + i)] +
                              bias[static_cast<size_t>(off + i)];
            }
        }
    }
}

inline void head_layer_norm_backward(const Mat& dy, const HeadLnCache& cache, const Vec& gain,
                                     int heads, Mat& dx_add, Vec& dgain, Vec& dbias) {
    const int T = dy.rows, d = dy.cols, dh = d / heads;
    for (int t = 0; t < T; ++t) {
        const double* dyr = dy.row(t);
        const double* xh = cache.xhat.row(t);
        double* dxr = dx_add.row(t);
        for (int hd = 0; hd < heads; ++hd) {
            const int off = hd * dh;
            const double inv = cache.inv_std(t, hd);
            double sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int i = 0; i < dh; ++i) {
                const double dxh = dyr[off + i] * gain[static_cast<size_t>(off + i)];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[off + i];
                dgain[static_cast<size_t>(off + i)] += dyr[off + i] * xh[off + i];
                dbias[static_cast<size_t>(off + i)] += dyr[off + i];
            }
            const double m1 = sum_dxhat / dh, m2 = sum_dxhat_xhat / dh;
            for (int i = 0; i < dh; ++i) {
                const double dxh = dyr[off + i] * gain[static_cast<size_t>(off + i)];
                dxr[off + i] += inv * (dxh - m1 - xh[off + i] * m2);
            }
        }
    }
}

}  // namespace detail

// ---- forward -------------------------------------------------------------

// Decoder-only pre-norm forward pass. `boundaries` holds document-end
// offsets from the packer; attention is causal and never crosses them.
inline ForwardTrace forward(const ModelParams& params, const ModelConfig& cfg,
                            std::span<const int32_t> tokens,
                            std::span<const int32_t> boundaries = {}) {
    const int T = static_cast<int>(tokens.size());
    if (T == 0 || T > cfg.context_len)
        throw LengthExceedsContext("sequence length " + std::to_string(T) + " vs context " +
                                   std::to_string(cfg.context_len));
    for (int32_t id : tokens)
        if (id < 0 || id >= cfg.vocab_size) throw IdOutOfRange("token id " + std::to_string(id));

    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardTrace tr;
    tr.tokens.assign(tokens.begin(), tokens.end());
    tr.block_of.assign(static_cast<size_t>(T), 0);
    {
        int32_t block = 0;
        size_t bi = 0;
        for (int t = 0; t < T; ++t) {
            while (bi < boundaries.size() && boundaries[bi] <= t) {
                ++block;
                ++bi;
            }
            tr.block_of[static_cast<size_t>(t)] = block;
        }
    }

    Mat x(T, d);
    for (int t = 0; t < T; ++t)
        std::memcpy(x.row(t), params.embed.row(tokens[static_cast<size_t>(t)]),
                    sizeof(double) * static_cast<size_t>(d));

    tr.layers.resize(params.layers.size());
    for (size_t li = 0; li < params.layers.size(); ++li) {
        const auto& l = params.layers[li];
        LayerTrace& lt = tr.layers[li];
        lt.x_in = x;

        detail::row_layer_norm(x, l.ln1_gain, l.ln1_bias, cfg.ln_eps, lt.h, lt.ln1);
        lt.q = linear(lt.h, l.wq, l.bq.empty() ? nullptr : &l.bq);
        lt.k = linear(lt.h, l.wk, l.bk.empty() ? nullptr : &l.bk);
        lt.v = linear(lt.h, l.wv, l.bv.empty() ? nullptr : &l.bv);

        detail::head_layer_norm(lt.q, l.qkq_gain, l.qkq_bias, H, cfg.ln_eps, lt.q_rot, lt.qln);
        detail::head_layer_norm(lt.k, l.qkk_gain, l.qkk_bias, H, cfg.ln_eps, lt.k_rot, lt.kln);
        for (int t = 0; t < T; ++t)
            for (int hd = 0; hd < H; ++hd) {
                rope_rotate(lt.q_rot.row(t) + hd * dh, dh, t, cfg.rope_base);
                rope_rotate(lt.k_rot.row(t) + hd * dh, dh, t, cfg.rope_base);
            }

        double query_norm_sum = 0.0;
        double max_logit = -std::numeric_limits<double>::infinity();
        lt.probs.assign(static_cast<size_t>(H), Mat(T, T));
        lt.attn_ctx = Mat(T, d);
        for (int hd = 0; hd < H; ++hd) {
            Mat& P = lt.probs[static_cast<size_t>(hd)];
            const int off = hd * dh;
            for (int i = 0; i < T; ++i) {
                const double* qi = lt.q_rot.row(i) + off;
                {
                    double nq = 0;
                    for (int c = 0; c < dh; ++c) nq += qi[c] * qi[c];
                    query_norm_sum += std::sqrt(nq);
                }
                double row_max = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j) {
                    if (tr.block_of[static_cast<size_t>(j)] != tr.block_of[static_cast<size_t>(i)])
                        continue;
                    const double* kj = lt.k_rot.row(j) + off;
                    double dot = 0;
                    for (int c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                    const double logit = dot * scale;
                    P(i, j) = logit;
                    row_max = std::max(row_max, logit);
                    max_logit = std::max(max_logit, logit);
                }
                double denom = 0;
                for (int j = 0; j <= i; ++j) {
                    if (tr.block_of[static_cast<size_t>(j)] != tr.block_of[static_cast<size_t>(i)])
                        continue;
                    P(i, j) = std::exp(P(i, j) - row_max);
                    denom += P(i, j);
                }
                double* ctx = lt.attn_ctx.row(i) + off;
                for (int j = 0; j <= i; ++j) {
                    if (tr.block_of[static_cast<size_t>(j)] != tr.block_of[static_cast<size_t>(i)])
                        continue;
                    P(i, j) /= denom;
                    const double* vj = lt.v.row(j) + off;
                    const double w = P(i, j);
                    for (int c = 0; c < dh; ++c) ctx[c] += w * vj[c];
                }
            }
        }
        lt.max_attn_logit = max_logit;
        lt.mean_query_norm = query_norm_sum / (static_cast<double>(T) * H);

        Mat attn_proj = linear(lt.attn_ctx, l.wo, l.bo.empty() ? nullptr : &l.bo);
        lt.y = Mat(T, d);
        for (size_t idx = 0; idx < x.a.size(); ++idx) lt.y.a[idx] = x.a[idx] + attn_proj.a[idx];

        detail::row_layer_norm(lt.y, l.ln2_gain, l.ln2_bias, cfg.ln_eps, lt.h2, lt.ln2);
        lt.u = linear(lt.h2, l.w1, &l.b1);
        lt.g = Mat(lt.u.rows, lt.u.cols);
        for (size_t idx = 0; idx < lt.u.a.size(); ++idx) lt.g.a[idx] = gelu(lt.u.a[idx]);
        Mat z = linear(lt.g, l.w2, &l.b2);
        lt.out = Mat(T, d);
        for (size_t idx = 0; idx < lt.y.a.size(); ++idx) lt.out.a[idx] = lt.y.a[idx] + z.a[idx];

        double ss = 0;
        for (double vv : lt.out.a) ss += vv * vv;
        lt.block_output_rms = std::sqrt(ss / static_cast<double>(lt.out.a.size()));

        x = lt.out;
    }

    detail::row_layer_norm(x, params.lnf_gain, params.lnf_bias, cfg.ln_eps, tr.final_hidden,
                           tr.lnf);
    const Mat& out_w = cfg.tied_head ? params.embed : params.head;
    tr.logits = linear(tr.final_hidden, out_w);
    return tr;
}

// ---- loss ----------------------------------------------------------------

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0;         // mean over unmasked target positions
    double reg = 0.0;        // coeff * reg_raw
    double reg_raw = 0.0;    // mean over positions of z^2
    int64_t n_unmasked = 0;
    int64_t n_positions = 0;
};

// Mean token cross-entropy over unmasked targets (target < 0 excludes a
// position) plus the configured logit regularizer, which always runs
// over every position.
inline LossBreakdown compute_loss(const Mat& logits, std::span<const int32_t> targets,
                                  const LossConfig& loss) {
    if (static_cast<int>(targets.size()) != logits.rows)
        throw ShapeMismatch("targets length vs logits rows");
    LossBreakdown out;
    out.n_positions = logits.rows;
    double ce_sum = 0.0, reg_sum = 0.0;
    for (int t = 0; t < logits.rows; ++t) {
        const double* row = logits.row(t);
        double mx = row[0];
        for (int v = 1; v < logits.cols; ++v) mx = std::max(mx, row[v]);
        double sumexp = 0.0;
        for (int v = 0; v < logits.cols; ++v) sumexp += std::exp(row[v] - mx);
        const double lse = mx + std::log(sumexp);
        if (loss.mode == LossConfig::Mode::maxz) reg_sum += mx * mx;
        else if (loss.mode == LossConfig::Mode::auxz) reg_sum += lse * lse;
        const int32_t target = targets[static_cast<size_t>(t)];
        if (target < 0) continue;
        if (target >= logits.cols) throw IdOutOfRange("target id " + std::to_string(target));
        ce_sum += lse - row[target];
        ++out.n_unmasked;
    }
    if (out.n_unmasked == 0) throw AllMasked("no unmasked target positions");
    out.ce = ce_sum / static_cast<double>(out.n_unmasked);
    out.reg_raw = reg_sum / static_cast<double>(out.n_positions);
    const double coeff = loss.mode == LossConfig::Mode::maxz   ? loss.maxz_coeff
                         : loss.mode == LossConfig::Mode::auxz ? loss.auxz_coeff
                                                               : 0.0;
    out.reg = coeff * out.reg_raw;
    out.total = out.ce + out.reg;
    return out;
}

// Weights that turn per-position sums into the final scalar loss;
// single-sequence training uses 1/n_unmasked and coeff/n_positions, a
// batch substitutes the batch-wide totals.
struct BackwardScales {
    double ce = 0.0;
    double reg = 0.0;
};

inline BackwardScales default_scales(const LossBreakdown& lb, const LossConfig& loss) {
    const double coeff = loss.mode == LossConfig::Mode::maxz   ? loss.maxz_coeff
                         : loss.mode == LossConfig::Mode::auxz ? loss.auxz_coeff
                                                               : 0.0;
    return {1.0 / static_cast<double>(lb.n_unmasked),
            coeff / static_cast<double>(lb.n_positions)};
}

// Exact reverse-mode gradients for loss = ce_scale * sum(ce_t) +
// reg_scale * sum(z_t^2). The max-z subgradient flows to the argmax
// logit, ties to the lowest index. Accumulates into `grads`.
inline void backward(const ModelParams& params, const ModelConfig& cfg, const ForwardTrace& tr,
                     std::span<const int32_t> targets, const BackwardScales& scales,
                     ParamGrads& grads) {
    const int T = static_cast<int>(tr.tokens.size());
    if (static_cast<int>(targets.size()) != T) throw TraceMismatch("targets vs trace length");
    if (tr.logits.rows != T || static_cast<int>(tr.layers.size()) != cfg.n_layers)
        throw TraceMismatch("trace does not match config");
    const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // dlogits
    Mat dlogits(T, cfg.vocab_size);
    for (int t = 0; t < T; ++t) {
        const double* row = tr.logits.row(t);
        double* drow = dlogits.row(t);
        double mx = row[0];
        int argmax = 0;
        for (int v = 1; v < cfg.vocab_size; ++v)
            if (row[v] > mx) {
                mx = row[v];
                argmax = v;
            }
        double sumexp = 0.0;
        for (int v = 0; v < cfg.vocab_size; ++v) sumexp += std::exp(row[v] - mx);
        const int32_t target = targets[static_cast<size_t>(t)];
        if (target >= 0) {
            const double inv = 1.0 / sumexp;
            for (int v = 0; v < cfg.vocab_size; ++v)
                drow[v] += scales.ce * std::exp(row[v] - mx) * inv;
            drow[target] -= scales.ce;
        }
        if (scales.reg != 0.0) {
            if (cfg.loss.mode == LossConfig::Mode::maxz) {
                drow[argmax] += scales.reg * 2.0 * mx;
            } else if (cfg.loss.mode == LossConfig::Mode::auxz) {
                const double lse = mx + std::log(sumexp);
                const double c = scales.reg * 2.0 * lse / sumexp;
                for (int v = 0; v < cfg.vocab_size; ++v) drow[v] += c * std::exp(row[v] - mx);
            }
        }
    }

    // output head (tied: gradients reach the embedding both ways)
    Mat dfinal(T, d);
    if (cfg.tied_head) {
        linear_backward(tr.final_hidden, params.embed, dlogits, &dfinal, grads.embed, nullptr);
    } else {
        linear_backward(tr.final_hidden, params.head, dlogits, &dfinal, grads.head, nullptr);
    }

    Mat dx(T, d);
    detail::row_layer_norm_backward(dfinal, tr.lnf, params.lnf_gain, dx, grads.lnf_gain,
                                    grads.lnf_bias);

    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        const auto& l = params.layers[static_cast<size_t>(li)];
        auto& gl = grads.layers[static_cast<size_t>(li)];
        const LayerTrace& lt = tr.layers[static_cast<size_t>(li)];

        // dx currently holds the gradient at the block output
        Mat dy = dx;  // residual branch into y
        Mat dz = std::move(dx);

        // MLP
        Mat dg(T, cfg.hidden());
        linear_backward(lt.g, l.w2, dz, &dg, gl.w2, &gl.b2);
        Mat du(T, cfg.hidden());
        for (size_t idx = 0; idx < du.a.size(); ++idx) du.a[idx] = dg.a[idx] * gelu_grad(lt.u.a[idx]);
        Mat dh2(T, d);
        linear_backward(lt.h2, l.w1, du, &dh2, gl.w1, &gl.b1);
        detail::row_layer_norm_backward(dh2, lt.ln2, l.ln2_gain, dy, gl.ln2_gain, gl.ln2_bias);

        // attention
        dx = dy;  // residual branch into x
        Mat dctx(T, d);
        linear_backward(lt.attn_ctx, l.wo, dy, &dctx, gl.wo, l.bo.empty() ? nullptr : &gl.bo);

        Mat dq_rot(T, d), dk_rot(T, d), dv(T, d);
        for (int hd = 0; hd < H; ++hd) {
            const int off = hd * dh;
            const Mat& P = lt.probs[static_cast<size_t>(hd)];
            for (int i = 0; i < T; ++i) {
                const double* dctx_i = dctx.row(i) + off;
                auto masked = [&](int j) {
                    return tr.block_of[static_cast<size_t>(j)] !=
                           tr.block_of[static_cast<size_t>(i)];
                };
                // dP and the softmax Jacobian, restricted to the valid row
                double dot_sum = 0.0;
                std::vector<double> dP(static_cast<size_t>(i) + 1, 0.0);
                for (int j = 0; j <= i; ++j) {
                    if (masked(j)) continue;
                    const double* vj = lt.v.row(j) + off;
                    double acc = 0;
                    for (int c = 0; c < dh; ++c) acc += dctx_i[c] * vj[c];
                    dP[static_cast<size_t>(j)] = acc;
                    dot_sum += acc * P(i, j);
                    double* dvj = dv.row(j) + off;
                    const double w = P(i, j);
                    for (int c = 0; c < dh; ++c) dvj[c] += w * dctx_i[c];
                }
                const double* qi = lt.q_rot.row(i) + off;
                double* dqi = dq_rot.row(i) + off;
                for (int j = 0; j <= i; ++j) {
                    if (masked(j)) continue;
                    const double dlogit = P(i, j) * (dP[static_cast<size_t>(j)] - dot_sum) * scale;
                    const double* kj = lt.k_rot.row(j) + off;
                    double* dkj = dk_rot.row(j) + off;
                    for (int c = 0; c < dh; ++c) {
                        dqi[c] += dlogit * kj[c];
                        dkj[c] += dlogit * qi[c];
                    }
                }
            }
        }

        // undo the rotation (RoPE is orthogonal)
        for (int t = 0; t < T; ++t)
            for (int hd = 0; hd < H; ++hd) {
                rope_rotate(dq_rot.row(t) + hd * dh, dh, t, cfg.rope_base, /*inverse=*/true);
                rope_rotate(dk_rot.row(t) + hd * dh, dh, t, cfg.rope_base, /*inverse=*/true);
            }

        Mat dq(T, d), dk(T, d);
        detail::head_layer_norm_backward(dq_rot, lt.qln, l.qkq_gain, H, dq, gl.qkq_gain,
                                         gl.qkq_bias);
        detail::head_layer_norm_backward(dk_rot, lt.kln, l.qkk_gain, H, dk, gl.qkk_gain,
                                         gl.qkk_bias);

        Mat dhpre(T, d);
        linear_backward(lt.h, l.wq, dq, &dhpre, gl.wq, l.bq.empty() ? nullptr : &gl.bq);
        linear_backward(lt.h, l.wk, dk, &dhpre, gl.wk, l.bk.empty() ? nullptr : &gl.bk);
        linear_backward(lt.h, l.wv, dv, &dhpre, gl.wv, l.bv.empty() ? nullptr : &gl.bv);
        detail::row_layer_norm_backward(dhpre, lt.ln1, l.ln1_gain, dx, gl.ln1_gain, gl.ln1_bias);
    }

    for (int t = 0; t < T; ++t) {
        double* er = grads.embed.row(tr.tokens[static_cast<size_t>(t)]);
        const double* dxr = dx.row(t);
        for (int i = 0; i < d; ++i) er[i] += dxr[i];
    }
}

// ---- checkpoint I/O --------------------------------------------------------

// `NYOMODL1` binary: magic, 7 x i64 config, 2 x f64 (rope_base, ln_eps),
// then each tensor in for_each order as (name_len, name, count, f64[]).
// Little-endian throughout.
inline void save_model(const std::string& path, const ModelConfig& cfg, const ModelParams& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoFailure("cannot write " + path);
    f.write("NYOMODL1", 8);
    auto wi64 = [&](int64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    auto wf64 = [&](double v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    wi64(cfg.d_model);
    wi64(cfg.n_heads);
    wi64(cfg.n_layers);
    wi64(cfg.context_len);
    wi64(cfg.vocab_size);
    wi64(cfg.hidden());
    wi64((cfg.tied_head ? 1 : 0) | (cfg.attn_bias ? 2 : 0));
    wf64(cfg.rope_base);
    wf64(cfg.ln_eps);
    int64_t count = 0;
    params.for_each([&](const std::string&, const Vec&) { ++count; });
    wi64(count);
    params.for_each([&](const std::string& name, const Vec& v) {
        wi64(static_cast<int64_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        wi64(static_cast<int64_t>(v.size()));
        f.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
    });
    if (!f.good()) throw IoFailure("write failed: " + path);
}

inline std::pair<ModelConfig, ModelParams> load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoFailure("cannot read " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f.good() || std::memcmp(magic, "NYOMODL1", 8) != 0)
        throw CheckpointCorrupt("bad magic in " + path);
    auto ri64 = [&]() {
        int64_t v;
        f.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    auto rf64 = [&]() {
        double v;
        f.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    ModelConfig cfg;
    cfg.d_model = static_cast<int>(ri64());
    cfg.n_heads = static_cast<int>(ri64());
    cfg.n_layers = static_cast<int>(ri64());
    cfg.context_len = static_cast<int>(ri64());
    cfg.vocab_size = static_cast<int>(ri64());
    cfg.mlp_hidden = static_cast<int>(ri64());
    const int64_t flags = ri64();
    cfg.tied_head = (flags & 1) != 0;
    cfg.attn_bias = (flags & 2) != 0;
    cfg.rope_base = rf64();
    cfg.ln_eps = rf64();
    if (!f.good()) throw CheckpointCorrupt("truncated header in " + path);

    ModelParams params = ModelParams::shaped(cfg);
    const int64_t count = ri64();
    int64_t seen = 0;
    params.for_each([&](const std::string& name, Vec& v) {
        const int64_t nlen = ri64();
        std::string got(static_cast<size_t>(nlen), '\0');
        f.read(got.data(), nlen);
        const int64_t n = ri64();
        if (!f.good() || got != name || n != static_cast<int64_t>(v.size()))
            throw CheckpointCorrupt("tensor mismatch at '" + name + "' in " + path);
        f.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
        ++seen;
    });
    if (!f.good() || seen != count) throw CheckpointCorrupt("tensor count mismatch in " + path);
    return {cfg, params};
}

}  // namespace nyoforge
