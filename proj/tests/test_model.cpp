#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>

#include "nyoforge/model.hpp"

using namespace nyoforge;

namespace {

std::vector<int32_t> random_tokens(Rng& rng, int n, int vocab) {
    std::vector<int32_t> t(static_cast<size_t>(n));
    for (auto& x : t) x = static_cast<int32_t>(rng.bounded(static_cast<uint64_t>(vocab)));
    return t;
}

// Independent recomputation of the per-layer monitor raws from the
// cached activations.
struct MonitorRecompute {
    double max_attn_logit;
    double mean_query_norm;
    double block_output_rms;
};

MonitorRecompute recompute_monitors(const ForwardTrace& tr, const ModelConfig& cfg, int layer) {
    const auto& lt = tr.layers[static_cast<size_t>(layer)];
    const int T = lt.q_rot.rows, H = cfg.n_heads, dh = cfg.d_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    MonitorRecompute out{-std::numeric_limits<double>::infinity(), 0.0, 0.0};
    for (int hd = 0; hd < H; ++hd)
        for (int i = 0; i < T; ++i) {
            double nq = 0;
            for (int c = 0; c < dh; ++c) {
                const double q = lt.q_rot(i, hd * dh + c);
                nq += q * q;
            }
            out.mean_query_norm += std::sqrt(nq);
            for (int j = 0; j <= i; ++j) {
                if (tr.block_of[static_cast<size_t>(j)] != tr.block_of[static_cast<size_t>(i)])
                    continue;
                double dot = 0;
                for (int c = 0; c < dh; ++c) dot += lt.q_rot(i, hd * dh + c) * lt.k_rot(j, hd * dh + c);
                out.max_attn_logit = std::max(out.max_attn_logit, dot * scale);
            }
        }
    out.mean_query_norm /= static_cast<double>(T) * H;
    double ss = 0;
    for (double v : lt.out.a) ss += v * v;
    out.block_output_rms = std::sqrt(ss / static_cast<double>(lt.out.a.size()));
    return out;
}

}  // namespace

TEST_CASE("init scales the up-projection by 1/sqrt(n_layers)", "[model]") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 32;
    cfg.vocab_size = 64;
    cfg.context_len = 16;
    auto p = init_params(cfg, 0.02, 7);

    double sum = 0, sum2 = 0;
    int64_t n = 0;
    for (const auto& l : p.layers)
        for (double v : l.w1.a) {
            sum += v;
            sum2 += v * v;
            ++n;
        }
    const double std_w1 = std::sqrt(sum2 / static_cast<double>(n) -
                                    (sum / static_cast<double>(n)) * (sum / static_cast<double>(n)));
    const double expected = 0.02 / std::sqrt(32.0);
    CHECK(std_w1 == Catch::Approx(expected).epsilon(0.05));

    for (const auto& l : p.layers) {
        for (double v : l.ln1_gain) CHECK(v == 1.0);
        for (double v : l.qkq_gain) CHECK(v == 1.0);
        for (double v : l.b1) CHECK(v == 0.0);
        for (double v : l.ln1_bias) CHECK(v == 0.0);
    }

    auto q = init_params(cfg, 0.02, 7);
    CHECK(p.embed.a == q.embed.a);
    CHECK(p.layers[5].wq.a == q.layers[5].wq.a);

    CHECK_THROWS_AS(init_params(cfg, 0.0, 1), BadConfig);
}

TEST_CASE("layer_norm closed forms", "[model]") {
    Vec gain(4, 1.0), bias(4, 0.0);
    auto zeros = layer_norm(Vec{3.0, 3.0, 3.0, 3.0}, gain, bias, 1e-5);
    for (double v : zeros) CHECK(v == Catch::Approx(0.0).margin(1e-12));

    Vec g2(2, 1.0), b2(2, 0.0);
    auto pm = layer_norm(Vec{1.0, -1.0}, g2, b2, 1e-12);
    CHECK(pm[0] == Catch::Approx(1.0).epsilon(1e-6));
    CHECK(pm[1] == Catch::Approx(-1.0).epsilon(1e-6));

    Rng rng(3);
    Vec x(64);
    for (auto& v : x) v = rng.gaussian() * 5 + 2;
    Vec g(64, 1.0), b(64, 0.0);
    auto y = layer_norm(x, g, b, 1e-10);
    double mean = 0, var = 0;
    for (double v : y) mean += v;
    mean /= 64;
    for (double v : y) var += (v - mean) * (v - mean);
    var /= 64;
    CHECK(mean == Catch::Approx(0.0).margin(1e-10));
    CHECK(var == Catch::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("rope closed forms and relative-position identity", "[model]") {
    CHECK(rope_apply(Vec{0.3, -0.7, 1.1, 0.2}, 0) == Vec{0.3, -0.7, 1.1, 0.2});

    auto r = rope_apply(Vec{1.0, 0.0}, 1);
    CHECK(r[0] == Catch::Approx(std::cos(1.0)).epsilon(1e-12));
    CHECK(r[1] == Catch::Approx(std::sin(1.0)).epsilon(1e-12));

    CHECK_THROWS_AS(rope_apply(Vec{1.0, 2.0, 3.0}, 1), OddHeadDim);

    Rng rng(11);
    for (int iter = 0; iter < 1000; ++iter) {
        const int dh = 2 * (1 + static_cast<int>(rng.bounded(8)));
        Vec q(static_cast<size_t>(dh)), k(static_cast<size_t>(dh));
        for (auto& v : q) v = rng.gaussian();
        for (auto& v : k) v = rng.gaussian();
        const auto m = static_cast<int64_t>(rng.bounded(2048));
        const auto n = static_cast<int64_t>(rng.bounded(2048));

        auto qm = rope_apply(q, m);
        auto kn = rope_apply(k, n);
        auto qrel = rope_apply(q, m - n);
        double lhs = 0, rhs = 0, nq = 0, nq0 = 0;
        for (int i = 0; i < dh; ++i) {
            lhs += qm[static_cast<size_t>(i)] * kn[static_cast<size_t>(i)];
            rhs += qrel[static_cast<size_t>(i)] * k[static_cast<size_t>(i)];
            nq += qm[static_cast<size_t>(i)] * qm[static_cast<size_t>(i)];
            nq0 += q[static_cast<size_t>(i)] * q[static_cast<size_t>(i)];
        }
        CHECK(lhs == Catch::Approx(rhs).margin(1e-5));
        CHECK(nq == Catch::Approx(nq0).epsilon(1e-10));  // rotations preserve norm
    }
}

TEST_CASE("attention is causal, block-diagonal, and bounded by qk layernorm", "[model]") {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 1;
    cfg.vocab_size = 96;
    cfg.context_len = 16;
    Rng rng(21);

    // wild parameter scales; the logit bound must hold regardless
    auto p = init_params(cfg, 0.02, 5);
    for (double& v : p.embed.a) v = rng.gaussian() * 40.0;
    for (double& v : p.layers[0].wq.a) v = rng.gaussian() * 9.0;
    for (double& v : p.layers[0].wk.a) v = rng.gaussian() * 9.0;

    const double bound = std::sqrt(static_cast<double>(cfg.d_head())) + 1e-4;
    auto tokens = random_tokens(rng, 12, cfg.vocab_size);
    std::vector<int32_t> boundaries{5, 9};
    auto tr = forward(p, cfg, tokens, boundaries);
    const auto& lt = tr.layers[0];

    CHECK(lt.max_attn_logit <= bound);

    for (int hd = 0; hd < cfg.n_heads; ++hd) {
        const auto& P = lt.probs[static_cast<size_t>(hd)];
        for (int i = 0; i < 12; ++i) {
            double row_sum = 0;
            for (int j = 0; j < 12; ++j) {
                if (j > i) CHECK(P(i, j) == 0.0);  // causal
                if (tr.block_of[static_cast<size_t>(j)] != tr.block_of[static_cast<size_t>(i)])
                    CHECK(P(i, j) == 0.0);  // never crosses a document boundary
                row_sum += P(i, j);
            }
            CHECK(row_sum == Catch::Approx(1.0).epsilon(1e-12));
        }
        // boundary [5]: position 5 attends only within its own block
        CHECK(P(5, 4) == 0.0);
        CHECK(P(5, 0) == 0.0);
    }

    // single position: softmax weight 1 on self
    auto tr1 = forward(p, cfg, std::vector<int32_t>{3});
    CHECK(tr1.layers[0].probs[0](0, 0) == 1.0);
}

TEST_CASE("forward shape, causality, and degenerate symmetry", "[model]") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.vocab_size = 48;
    cfg.context_len = 12;
    auto p = init_params(cfg, 0.02, 9);
    Rng rng(33);

    auto tokens = random_tokens(rng, 10, cfg.vocab_size);
    auto tr = forward(p, cfg, tokens);
    CHECK(tr.logits.rows == 10);
    CHECK(tr.logits.cols == 48);

    // perturbing token t changes logits only at positions >= t
    auto tokens2 = tokens;
    tokens2[6] = (tokens2[6] + 1) % cfg.vocab_size;
    auto tr2 = forward(p, cfg, tokens2);
    for (int t = 0; t < 6; ++t)
        for (int v = 0; v < cfg.vocab_size; ++v) CHECK(tr.logits(t, v) == tr2.logits(t, v));
    bool changed = false;
    for (int v = 0; v < cfg.vocab_size; ++v) changed |= tr.logits(6, v) != tr2.logits(6, v);
    CHECK(changed);

    // all-zero params except gains: logits equal across the vocab
    auto zero = ModelParams::shaped(cfg);
    zero.for_each([](const std::string& name, Vec& v) {
        if (name.ends_with(".gain")) std::fill(v.begin(), v.end(), 1.0);
    });
    auto trz = forward(zero, cfg, tokens);
    for (int t = 0; t < 10; ++t)
        for (int v = 0; v < cfg.vocab_size; ++v) CHECK(trz.logits(t, v) == trz.logits(t, 0));

    CHECK_THROWS_AS(forward(p, cfg, random_tokens(rng, 13, cfg.vocab_size)),
                    LengthExceedsContext);
    CHECK_THROWS_AS(forward(p, cfg, std::vector<int32_t>{1, 999}), IdOutOfRange);
}

TEST_CASE("loss closed forms", "[model]") {
    LossConfig none;
    none.mode = LossConfig::Mode::none;

    // uniform logits over V -> CE = ln V
    Mat logits(3, 32);
    std::vector<int32_t> targets{1, 5, -1};
    auto lb = compute_loss(logits, targets, none);
    CHECK(lb.ce == Catch::Approx(std::log(32.0)).epsilon(1e-12));
    CHECK(lb.n_unmasked == 2);
    CHECK(lb.reg == 0.0);

    // max logit 10 at one position, coeff 2e-4 -> contribution 0.02
    LossConfig mz;
    mz.mode = LossConfig::Mode::maxz;
    mz.maxz_coeff = 2e-4;
    Mat one(1, 4);
    one(0, 2) = 10.0;
    std::vector<int32_t> t1{2};
    auto lbz = compute_loss(one, t1, mz);
    CHECK(lbz.reg == Catch::Approx(2e-4 * 100.0).epsilon(1e-12));

    // increasing the coefficient never decreases the total
    double prev = 0.0;
    for (double c : {0.0, 1e-4, 2e-4, 1e-3, 1e-2}) {
        LossConfig lc = mz;
        lc.maxz_coeff = c;
        auto l = compute_loss(one, t1, lc);
        CHECK(l.total >= prev);
        prev = l.total;
    }

    // aux-z: coeff * mean(lse^2)
    LossConfig az;
    az.mode = LossConfig::Mode::auxz;
    az.auxz_coeff = 1e-4;
    auto lba = compute_loss(one, t1, az);
    double lse = 0;
    for (int v = 0; v < 4; ++v) lse += std::exp(one(0, v));
    lse = std::log(lse);
    CHECK(lba.reg == Catch::Approx(1e-4 * lse * lse).epsilon(1e-12));

    std::vector<int32_t> all_masked{-1, -1, -1};
    CHECK_THROWS_AS(compute_loss(logits, all_masked, none), AllMasked);
    std::vector<int32_t> wrong_len{1};
    CHECK_THROWS_AS(compute_loss(logits, wrong_len, none), ShapeMismatch);
}

TEST_CASE("gradients match central finite differences", "[model]") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.vocab_size = 64;
    cfg.context_len = 16;
    cfg.attn_bias = true;  // exercise the optional bias path
    cfg.loss.mode = LossConfig::Mode::maxz;
    cfg.loss.maxz_coeff = 2e-4;

    auto params = init_params(cfg, 0.05, 17);
    Rng rng(23);
    auto tokens = random_tokens(rng, 10, cfg.vocab_size);
    std::vector<int32_t> boundaries{4};
    std::vector<int32_t> targets(10);
    for (size_t i = 0; i < targets.size(); ++i)
        targets[i] = (i == 3 || i == 7) ? -1
                                        : static_cast<int32_t>(rng.bounded(
                                              static_cast<uint64_t>(cfg.vocab_size)));

    auto loss_at = [&]() {
        auto tr = forward(params, cfg, tokens, boundaries);
        return compute_loss(tr.logits, targets, cfg.loss).total;
    };

    auto tr = forward(params, cfg, tokens, boundaries);
    auto lb = compute_loss(tr.logits, targets, cfg.loss);
    auto grads = ModelParams::shaped(cfg);
    backward(params, cfg, tr, targets, default_scales(lb, cfg.loss), grads);

    std::vector<std::pair<std::string, Vec*>> tensors;
    params.for_each([&](const std::string& name, Vec& v) { tensors.push_back({name, &v}); });
    std::map<std::string, Vec*> grad_of;
    grads.for_each([&](const std::string& name, Vec& v) { grad_of[name] = &v; });

    const double h = 1e-4;
    int checked = 0;
    Rng pick(41);
    for (int s = 0; s < 64; ++s) {
        auto& [name, vec] = tensors[pick.bounded(tensors.size())];
        const size_t idx = pick.bounded(vec->size());
        const double orig = (*vec)[idx];
        (*vec)[idx] = orig + h;
        const double up = loss_at();
        (*vec)[idx] = orig - h;
        const double down = loss_at();
        (*vec)[idx] = orig;
        const double fd = (up - down) / (2 * h);
        const double an = (*grad_of[name])[idx];
        INFO(name << "[" << idx << "] fd=" << fd << " analytic=" << an);
        CHECK(std::abs(fd - an) <= 1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6}));
        ++checked;
    }
    CHECK(checked == 64);
}

TEST_CASE("fully masked loss with no regularizer has zero gradients", "[model]") {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.vocab_size = 16;
    cfg.context_len = 8;
    cfg.loss.mode = LossConfig::Mode::none;
    auto params = init_params(cfg, 0.05, 3);
    std::vector<int32_t> tokens{1, 2, 3, 4};
    std::vector<int32_t> targets{-1, -1, -1, -1};
    auto tr = forward(params, cfg, tokens);
    auto grads = ModelParams::shaped(cfg);
    backward(params, cfg, tr, targets, {0.25, 0.0}, grads);
    grads.for_each([&](const std::string&, Vec& v) {
        for (double g : v) CHECK(g == 0.0);
    });
}

TEST_CASE("monitor raws are recomputable from the trace", "[model]") {
    ModelConfig cfg;
    cfg.d_model = 24;
    cfg.n_heads = 3;
    cfg.n_layers = 2;
    cfg.vocab_size = 80;
    cfg.context_len = 20;
    auto params = init_params(cfg, 0.04, 29);
    Rng rng(31);
    auto tokens = random_tokens(rng, 17, cfg.vocab_size);
    std::vector<int32_t> boundaries{6, 11};
    auto tr = forward(params, cfg, tokens, boundaries);
    for (int li = 0; li < cfg.n_layers; ++li) {
        auto re = recompute_monitors(tr, cfg, li);
        const auto& lt = tr.layers[static_cast<size_t>(li)];
        CHECK(std::abs(re.max_attn_logit - lt.max_attn_logit) < 1e-10);
        CHECK(std::abs(re.mean_query_norm - lt.mean_query_norm) < 1e-10);
        CHECK(std::abs(re.block_output_rms - lt.block_output_rms) < 1e-10);
    }
}

TEST_CASE("model checkpoint round-trips bit-exactly", "[model]") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "nyomodel_ckpt";
    fs::create_directories(dir);
    const auto path = (dir / "m.bin").string();

    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.vocab_size = 32;
    cfg.context_len = 8;
    cfg.tied_head = false;
    auto params = init_params(cfg, 0.02, 77);
    save_model(path, cfg, params);
    auto [cfg2, params2] = load_model(path);
    CHECK(cfg2.d_model == cfg.d_model);
    CHECK(cfg2.tied_head == cfg.tied_head);
    CHECK(cfg2.mlp_hidden == cfg.hidden());

    bool equal = true;
    params.for_each([&](const std::string& name, Vec& v) {
        params2.for_each([&](const std::string& name2, Vec& v2) {
            if (name == name2 && v != v2) equal = false;
        });
    });
    CHECK(equal);

    // same logits after reload
    std::vector<int32_t> toks{1, 2, 3};
    auto a = forward(params, cfg, toks);
    auto b = forward(params2, cfg2, toks);
    CHECK(a.logits.a == b.logits.a);

    std::ofstream bad(dir / "bad.bin", std::ios::binary);
    bad << "NOPE";
    bad.close();
    CHECK_THROWS_AS(load_model((dir / "bad.bin").string()), CheckpointCorrupt);
    fs::remove_all(dir);
}

TEST_CASE("wonton7b preset holds the reference table values", "[model]") {
    auto cfg = ModelConfig::wonton7b();
    CHECK(cfg.d_model == 4096);
    CHECK(cfg.n_heads == 32);
    CHECK(cfg.n_layers == 32);
    CHECK(cfg.context_len == 2048);
    CHECK(cfg.vocab_size == 139776);
    cfg.validate();
}
