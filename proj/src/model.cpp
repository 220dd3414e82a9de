#include "pretrain/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <thread>

#include "pretrain/rng.hpp"

namespace pretrain {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskScore = -1e30;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// out[r] += x[c] * W[c, r] over c (W stored row-major c x r).
void matvec_accum(const double* w, const double* x, double* out, std::int32_t in_dim,
                  std::int32_t out_dim) {
    for (std::int32_t c = 0; c < in_dim; ++c) {
        const double xv = x[c];
        if (xv == 0.0) continue;
        const double* row = w + static_cast<std::size_t>(c) * static_cast<std::size_t>(out_dim);
        for (std::int32_t r = 0; r < out_dim; ++r) out[r] += xv * row[r];
    }
}

struct SegBuilder {
    ParamLayout layout;
    void add(std::string name, std::size_t size, bool decay) {
        layout.segments.push_back({std::move(name), layout.total, size, decay});
        layout.total += size;
    }
};

std::string layer_prefix(std::int32_t layer) { return "layer" + std::to_string(layer) + "."; }

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1) throw std::invalid_argument("model: layers must be >= 1");
    if (hidden < 1 || heads < 1 || hidden % heads != 0)
        throw std::invalid_argument("model: hidden must be divisible by heads");
    if (intermediate < 1) throw std::invalid_argument("model: intermediate must be >= 1");
    if (max_len < 1) throw std::invalid_argument("model: max_len must be >= 1");
    if (vocab_size < 1) throw std::invalid_argument("model: vocab_size must be set");
}

const ParamSegment& ParamLayout::find(std::string_view name) const {
    for (const auto& seg : segments)
        if (seg.name == name) return seg;
    throw std::out_of_range("unknown parameter segment: " + std::string(name));
}

const ParamSegment& ParamLayout::locate(std::size_t flat_index) const {
    for (const auto& seg : segments)
        if (flat_index >= seg.offset && flat_index < seg.offset + seg.size) return seg;
    throw std::out_of_range("parameter index out of range");
}

ParamLayout make_layout(const ModelConfig& config) {
    config.validate();
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto h = static_cast<std::size_t>(config.hidden);
    const auto i = static_cast<std::size_t>(config.intermediate);
    const auto l = static_cast<std::size_t>(config.max_len);

    SegBuilder b;
    b.add("tok_emb", v * h, true);
    b.add("pos_emb", l * h, true);
    for (std::int32_t layer = 0; layer < config.layers; ++layer) {
        const std::string p = layer_prefix(layer);
        b.add(p + "ln1.g", h, false);
        b.add(p + "ln1.b", h, false);
        b.add(p + "attn.wq", h * h, true);
        b.add(p + "attn.bq", h, false);
        b.add(p + "attn.wk", h * h, true);
        b.add(p + "attn.bk", h, false);
        b.add(p + "attn.wv", h * h, true);
        b.add(p + "attn.bv", h, false);
        b.add(p + "attn.wo", h * h, true);
        b.add(p + "attn.bo", h, false);
        b.add(p + "ln2.g", h, false);
        b.add(p + "ln2.b", h, false);
        b.add(p + "ff.w1", h * i, true);
        b.add(p + "ff.b1", i, false);
        b.add(p + "ff.w2", i * h, true);
        b.add(p + "ff.b2", h, false);
    }
    b.add("final_ln.g", h, false);
    b.add("final_ln.b", h, false);
    b.add("head.binary.w", h, true);
    b.add("head.binary.b", 1, false);
    b.add("head.lm.b", v, false);
    return std::move(b.layout);
}

TransformerParams init_params(const ModelConfig& config, std::uint64_t seed) {
    TransformerParams params;
    params.config = config;
    params.layout = make_layout(config);
    params.data.assign(params.layout.total, 0.0);

    Rng rng = derive_rng(seed, "model.init");
    for (const auto& seg : params.layout.segments) {
        double* p = params.data.data() + seg.offset;
        const bool is_ln_gain = seg.name.size() > 1 && seg.name.rfind(".g") == seg.name.size() - 2 &&
                                seg.name.find("ln") != std::string::npos;
        if (is_ln_gain) {
            std::fill(p, p + seg.size, 1.0);
        } else if (seg.decay || seg.name == "tok_emb" || seg.name == "pos_emb") {
            for (std::size_t k = 0; k < seg.size; ++k) p[k] = 0.02 * rng.normal();
        }
        // biases stay zero
    }
    return params;
}

namespace {

void check_head_matches(HeadType head, Objective objective) {
    const bool detection = objective == Objective::RTS || objective == Objective::CRTS ||
                           objective == Objective::TD_GEN;
    if (head == HeadType::BINARY && !detection)
        throw std::invalid_argument("head/objective mismatch: BINARY head needs a detection batch");
    if (head == HeadType::LM && detection)
        throw std::invalid_argument("head/objective mismatch: LM head needs token-prediction labels");
}

}  // namespace

ForwardCache forward(const TransformerParams& params, const CorruptedBatch& cb) {
    const ModelConfig& cfg = params.config;
    if (cb.max_len > cfg.max_len)
        throw std::invalid_argument("forward: sequence length exceeds model max_len");
    if (cfg.vocab_size <= 0) throw std::invalid_argument("forward: model has no vocabulary");
    check_head_matches(cfg.head, cb.objective);

    const std::int32_t rows = cb.rows;
    const std::int32_t len = cb.max_len;
    const std::int32_t h = cfg.hidden;
    const std::int32_t heads = cfg.heads;
    const std::int32_t dk = cfg.head_dim();
    const std::int32_t inter = cfg.intermediate;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const auto cells = static_cast<std::size_t>(rows) * static_cast<std::size_t>(len);

    ForwardCache cache;
    cache.rows = rows;
    cache.len = len;

    // Embeddings.
    const double* tok_emb = params.seg("tok_emb");
    const double* pos_emb = params.seg("pos_emb");
    cache.x0.resize(cells * static_cast<std::size_t>(h));
    for (std::int32_t r = 0; r < rows; ++r) {
        for (std::int32_t c = 0; c < len; ++c) {
            const std::size_t cell = cb.flat(r, c);
            const TokenId id = cb.input_ids[cell];
            if (id < 0 || id >= cfg.vocab_size)
                throw std::invalid_argument("forward: token id outside model vocabulary");
            double* dst = cache.x0.data() + cell * static_cast<std::size_t>(h);
            const double* te = tok_emb + static_cast<std::size_t>(id) * static_cast<std::size_t>(h);
            const double* pe = pos_emb + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) dst[d] = te[d] + pe[d];
        }
    }

    const auto layer_norm = [&](const double* x, const double* gain, const double* bias,
                                double* norm, double* mean_out, double* rstd_out, double* out) {
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double* xi = x + cell * static_cast<std::size_t>(h);
            double mean = 0.0;
            for (std::int32_t d = 0; d < h; ++d) mean += xi[d];
            mean /= static_cast<double>(h);
            double var = 0.0;
            for (std::int32_t d = 0; d < h; ++d) {
                const double diff = xi[d] - mean;
                var += diff * diff;
            }
            var /= static_cast<double>(h);
            const double rstd = 1.0 / std::sqrt(var + kLnEps);
            mean_out[cell] = mean;
            rstd_out[cell] = rstd;
            double* ni = norm + cell * static_cast<std::size_t>(h);
            double* oi = out + cell * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) {
                ni[d] = (xi[d] - mean) * rstd;
                oi[d] = ni[d] * gain[d] + bias[d];
            }
        }
    };

    std::vector<double> scratch(cells * static_cast<std::size_t>(h));
    const double* x = cache.x0.data();

    cache.layers.resize(static_cast<std::size_t>(cfg.layers));
    for (std::int32_t layer = 0; layer < cfg.layers; ++layer) {
        LayerCache& lc = cache.layers[static_cast<std::size_t>(layer)];
        const std::string p = layer_prefix(layer);
        const auto hsz = cells * static_cast<std::size_t>(h);
        lc.ln1_norm.resize(hsz);
        lc.ln1_mean.resize(cells);
        lc.ln1_rstd.resize(cells);
        lc.q.assign(hsz, 0.0);
        lc.k.assign(hsz, 0.0);
        lc.v.assign(hsz, 0.0);
        lc.probs.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(heads) *
                            static_cast<std::size_t>(len) * static_cast<std::size_t>(len),
                        0.0);
        lc.ctx.assign(hsz, 0.0);
        lc.x_att.resize(hsz);

        // ln1 -> q,k,v
        layer_norm(x, params.seg(p + "ln1.g"), params.seg(p + "ln1.b"), lc.ln1_norm.data(),
                   lc.ln1_mean.data(), lc.ln1_rstd.data(), scratch.data());

        const double* wq = params.seg(p + "attn.wq");
        const double* wk = params.seg(p + "attn.wk");
        const double* wv = params.seg(p + "attn.wv");
        const double* bq = params.seg(p + "attn.bq");
        const double* bk = params.seg(p + "attn.bk");
        const double* bv = params.seg(p + "attn.bv");
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double* a = scratch.data() + cell * static_cast<std::size_t>(h);
            double* q = lc.q.data() + cell * static_cast<std::size_t>(h);
            double* k = lc.k.data() + cell * static_cast<std::size_t>(h);
            double* v = lc.v.data() + cell * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) {
                q[d] = bq[d];
                k[d] = bk[d];
                v[d] = bv[d];
            }
            matvec_accum(wq, a, q, h, h);
            matvec_accum(wk, a, k, h, h);
            matvec_accum(wv, a, v, h, h);
        }

        // Scaled dot-product attention with PAD keys masked out.
        for (std::int32_t r = 0; r < rows; ++r) {
            const std::size_t row_base = static_cast<std::size_t>(r) * static_cast<std::size_t>(len);
            for (std::int32_t head = 0; head < heads; ++head) {
                const std::int32_t d0 = head * dk;
                for (std::int32_t qc = 0; qc < len; ++qc) {
                    const double* qv = lc.q.data() + (row_base + static_cast<std::size_t>(qc)) *
                                                         static_cast<std::size_t>(h) + d0;
                    double* prow = lc.probs.data() +
                                   ((static_cast<std::size_t>(r) * static_cast<std::size_t>(heads) +
                                     static_cast<std::size_t>(head)) *
                                        static_cast<std::size_t>(len) +
                                    static_cast<std::size_t>(qc)) *
                                       static_cast<std::size_t>(len);
                    double max_score = -std::numeric_limits<double>::infinity();
                    for (std::int32_t kc = 0; kc < len; ++kc) {
                        double score = kMaskScore;
                        if (cb.attention_mask[row_base + static_cast<std::size_t>(kc)]) {
                            const double* kv = lc.k.data() +
                                               (row_base + static_cast<std::size_t>(kc)) *
                                                   static_cast<std::size_t>(h) + d0;
                            double dot = 0.0;
                            for (std::int32_t d = 0; d < dk; ++d) dot += qv[d] * kv[d];
                            score = dot * scale;
                        }
                        prow[kc] = score;
                        max_score = std::max(max_score, score);
                    }
                    double total = 0.0;
                    for (std::int32_t kc = 0; kc < len; ++kc) {
                        prow[kc] = std::exp(prow[kc] - max_score);
                        total += prow[kc];
                    }
                    const double inv = 1.0 / total;
                    for (std::int32_t kc = 0; kc < len; ++kc) prow[kc] *= inv;

                    double* ctx = lc.ctx.data() + (row_base + static_cast<std::size_t>(qc)) *
                                                      static_cast<std::size_t>(h) + d0;
                    for (std::int32_t kc = 0; kc < len; ++kc) {
                        const double w = prow[kc];
                        if (w == 0.0) continue;
                        const double* vv = lc.v.data() + (row_base + static_cast<std::size_t>(kc)) *
                                                             static_cast<std::size_t>(h) + d0;
                        for (std::int32_t d = 0; d < dk; ++d) ctx[d] += w * vv[d];
                    }
                }
            }
        }

        // Output projection + residual.
        const double* wo = params.seg(p + "attn.wo");
        const double* bo = params.seg(p + "attn.bo");
        for (std::size_t cell = 0; cell < cells; ++cell) {
            double* out = lc.x_att.data() + cell * static_cast<std::size_t>(h);
            const double* xin = x + cell * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) out[d] = xin[d] + bo[d];
            matvec_accum(wo, lc.ctx.data() + cell * static_cast<std::size_t>(h), out, h, h);
        }

        // ln2 -> feed-forward -> residual.
        lc.ln2_norm.resize(hsz);
        lc.ln2_mean.resize(cells);
        lc.ln2_rstd.resize(cells);
        layer_norm(lc.x_att.data(), params.seg(p + "ln2.g"), params.seg(p + "ln2.b"),
                   lc.ln2_norm.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(), scratch.data());

        lc.ff_pre.assign(cells * static_cast<std::size_t>(inter), 0.0);
        lc.ff_act.resize(cells * static_cast<std::size_t>(inter));
        lc.x_out.resize(hsz);
        const double* w1 = params.seg(p + "ff.w1");
        const double* b1 = params.seg(p + "ff.b1");
        const double* w2 = params.seg(p + "ff.w2");
        const double* b2 = params.seg(p + "ff.b2");
        for (std::size_t cell = 0; cell < cells; ++cell) {
            double* pre = lc.ff_pre.data() + cell * static_cast<std::size_t>(inter);
            double* act = lc.ff_act.data() + cell * static_cast<std::size_t>(inter);
            for (std::int32_t d = 0; d < inter; ++d) pre[d] = b1[d];
            matvec_accum(w1, scratch.data() + cell * static_cast<std::size_t>(h), pre, h, inter);
            for (std::int32_t d = 0; d < inter; ++d) act[d] = gelu(pre[d]);

            double* out = lc.x_out.data() + cell * static_cast<std::size_t>(h);
            const double* xin = lc.x_att.data() + cell * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) out[d] = xin[d] + b2[d];
            matvec_accum(w2, act, out, inter, h);
        }
        x = lc.x_out.data();
    }

    // Final layer norm.
    cache.lnf_norm.resize(cells * static_cast<std::size_t>(h));
    cache.lnf_mean.resize(cells);
    cache.lnf_rstd.resize(cells);
    cache.hidden.resize(cells * static_cast<std::size_t>(h));
    layer_norm(x, params.seg("final_ln.g"), params.seg("final_ln.b"), cache.lnf_norm.data(),
               cache.lnf_mean.data(), cache.lnf_rstd.data(), cache.hidden.data());

    // Heads.
    if (cfg.head == HeadType::BINARY) {
        const double* w = params.seg("head.binary.w");
        const double bias = *params.seg("head.binary.b");
        cache.binary_logits.resize(cells);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double* hv = cache.hidden.data() + cell * static_cast<std::size_t>(h);
            double dot = bias;
            for (std::int32_t d = 0; d < h; ++d) dot += hv[d] * w[d];
            cache.binary_logits[cell] = dot;
        }
    } else {
        const double* lm_bias = params.seg("head.lm.b");
        for (std::size_t cell = 0; cell < cells; ++cell)
            if (cb.loss_mask[cell]) cache.lm_positions.push_back(static_cast<std::int64_t>(cell));
        cache.lm_logits.assign(cache.lm_positions.size() * static_cast<std::size_t>(cfg.vocab_size),
                               0.0);
        for (std::size_t p = 0; p < cache.lm_positions.size(); ++p) {
            const double* hv = cache.hidden.data() +
                               static_cast<std::size_t>(cache.lm_positions[p]) *
                                   static_cast<std::size_t>(h);
            double* out = cache.lm_logits.data() + p * static_cast<std::size_t>(cfg.vocab_size);
            for (std::int32_t vtok = 0; vtok < cfg.vocab_size; ++vtok) {
                const double* te = tok_emb + static_cast<std::size_t>(vtok) * static_cast<std::size_t>(h);
                double dot = lm_bias[vtok];
                for (std::int32_t d = 0; d < h; ++d) dot += hv[d] * te[d];
                out[vtok] = dot;
            }
        }
    }
    return cache;
}

namespace {

std::int64_t count_loss_positions(const CorruptedBatch& cb) {
    std::int64_t count = 0;
    for (const auto m : cb.loss_mask) count += m ? 1 : 0;
    return count;
}

double bce_with_logit(double z, double y) {
    return std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

double loss(const TransformerParams& params, const ForwardCache& cache, const CorruptedBatch& cb,
            std::int64_t loss_denominator) {
    const std::int64_t denom = loss_denominator >= 0 ? loss_denominator : count_loss_positions(cb);
    if (denom == 0) return 0.0;

    double total = 0.0;
    if (params.config.head == HeadType::BINARY) {
        for (std::size_t cell = 0; cell < cb.loss_mask.size(); ++cell) {
            if (!cb.loss_mask[cell]) continue;
            const std::int32_t label = cb.labels[cell];
            if (label != 0 && label != 1)
                throw std::invalid_argument("loss: BINARY head needs 0/1 labels (objective mismatch)");
            total += bce_with_logit(cache.binary_logits[cell], static_cast<double>(label));
        }
    } else {
        const auto vocab_size = static_cast<std::size_t>(params.config.vocab_size);
        for (std::size_t p = 0; p < cache.lm_positions.size(); ++p) {
            const auto cell = static_cast<std::size_t>(cache.lm_positions[p]);
            const std::int32_t label = cb.labels[cell];
            if (label < 0 || label >= params.config.vocab_size)
                throw std::invalid_argument("loss: LM head needs token labels (objective mismatch)");
            const double* logits = cache.lm_logits.data() + p * vocab_size;
            double max_logit = logits[0];
            for (std::size_t v = 1; v < vocab_size; ++v) max_logit = std::max(max_logit, logits[v]);
            double lse = 0.0;
            for (std::size_t v = 0; v < vocab_size; ++v) lse += std::exp(logits[v] - max_logit);
            total += max_logit + std::log(lse) - logits[static_cast<std::size_t>(label)];
        }
    }
    return total / static_cast<double>(denom);
}

std::vector<double> backward(const TransformerParams& params, const ForwardCache& cache,
                             const CorruptedBatch& cb, std::int64_t loss_denominator) {
    const ModelConfig& cfg = params.config;
    const std::int32_t rows = cache.rows;
    const std::int32_t len = cache.len;
    const std::int32_t h = cfg.hidden;
    const std::int32_t heads = cfg.heads;
    const std::int32_t dk = cfg.head_dim();
    const std::int32_t inter = cfg.intermediate;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const auto cells = static_cast<std::size_t>(rows) * static_cast<std::size_t>(len);

    std::vector<double> grads(params.data.size(), 0.0);
    const std::int64_t denom = loss_denominator >= 0 ? loss_denominator : count_loss_positions(cb);
    if (denom == 0) return grads;
    const double inv_denom = 1.0 / static_cast<double>(denom);

    const auto gseg = [&](std::string_view name) {
        return grads.data() + params.layout.find(name).offset;
    };

    // d(loss)/d(hidden), then through the head.
    std::vector<double> dhidden(cells * static_cast<std::size_t>(h), 0.0);
    const double* tok_emb = params.seg("tok_emb");

    if (cfg.head == HeadType::BINARY) {
        const double* w = params.seg("head.binary.w");
        double* gw = gseg("head.binary.w");
        double* gb = gseg("head.binary.b");
        for (std::size_t cell = 0; cell < cells; ++cell) {
            if (!cb.loss_mask[cell]) continue;
            const double z = cache.binary_logits[cell];
            const double y = static_cast<double>(cb.labels[cell]);
            const double dz = (1.0 / (1.0 + std::exp(-z)) - y) * inv_denom;
            const double* hv = cache.hidden.data() + cell * static_cast<std::size_t>(h);
            double* dh = dhidden.data() + cell * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) {
                dh[d] += dz * w[d];
                gw[d] += dz * hv[d];
            }
            *gb += dz;
        }
    } else {
        const auto vocab_size = static_cast<std::size_t>(cfg.vocab_size);
        double* g_tok = gseg("tok_emb");
        double* g_lmb = gseg("head.lm.b");
        std::vector<double> dlogits(vocab_size);
        for (std::size_t p = 0; p < cache.lm_positions.size(); ++p) {
            const auto cell = static_cast<std::size_t>(cache.lm_positions[p]);
            const double* logits = cache.lm_logits.data() + p * vocab_size;
            const auto label = static_cast<std::size_t>(cb.labels[cell]);
            double max_logit = logits[0];
            for (std::size_t v = 1; v < vocab_size; ++v) max_logit = std::max(max_logit, logits[v]);
            double total = 0.0;
            for (std::size_t v = 0; v < vocab_size; ++v) {
                dlogits[v] = std::exp(logits[v] - max_logit);
                total += dlogits[v];
            }
            const double inv = 1.0 / total;
            for (std::size_t v = 0; v < vocab_size; ++v) dlogits[v] = dlogits[v] * inv * inv_denom;
            dlogits[label] -= inv_denom;

            const double* hv = cache.hidden.data() + cell * static_cast<std::size_t>(h);
            double* dh = dhidden.data() + cell * static_cast<std::size_t>(h);
            // Tied head: logits = hidden . tok_emb^T + bias.
            for (std::size_t v = 0; v < vocab_size; ++v) {
                const double dz = dlogits[v];
                if (dz == 0.0) continue;
                const double* te = tok_emb + v * static_cast<std::size_t>(h);
                double* gte = g_tok + v * static_cast<std::size_t>(h);
                for (std::int32_t d = 0; d < h; ++d) {
                    dh[d] += dz * te[d];
                    gte[d] += dz * hv[d];
                }
                g_lmb[v] += dz;
            }
        }
    }

    // LayerNorm backward helper: norm/mean/rstd cached, x is the LN input.
    const auto layer_norm_backward = [&](const double* dout, const double* norm, const double* rstd,
                                         const double* gain, double* ggain, double* gbias,
                                         double* dx_out) {
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double* dvec = dout + cell * static_cast<std::size_t>(h);
            const double* ni = norm + cell * static_cast<std::size_t>(h);
            double* dx = dx_out + cell * static_cast<std::size_t>(h);
            double sum_dn = 0.0, sum_dn_n = 0.0;
            for (std::int32_t d = 0; d < h; ++d) {
                const double dn = dvec[d] * gain[d];
                sum_dn += dn;
                sum_dn_n += dn * ni[d];
                ggain[d] += dvec[d] * ni[d];
                gbias[d] += dvec[d];
            }
            const double inv_h = 1.0 / static_cast<double>(h);
            const double r = rstd[cell];
            for (std::int32_t d = 0; d < h; ++d) {
                const double dn = dvec[d] * gain[d];
                dx[d] = r * (dn - inv_h * sum_dn - ni[d] * inv_h * sum_dn_n);
            }
        }
    };

    // Through the final LN into the top of the residual stream.
    std::vector<double> dx(cells * static_cast<std::size_t>(h), 0.0);
    layer_norm_backward(dhidden.data(), cache.lnf_norm.data(), cache.lnf_rstd.data(),
                        params.seg("final_ln.g"), gseg("final_ln.g"), gseg("final_ln.b"), dx.data());

    std::vector<double> d_ln_out(cells * static_cast<std::size_t>(h));
    std::vector<double> d_pre(cells * static_cast<std::size_t>(inter));
    std::vector<double> dq(cells * static_cast<std::size_t>(h));
    std::vector<double> dkv(cells * static_cast<std::size_t>(h));
    std::vector<double> dv(cells * static_cast<std::size_t>(h));
    std::vector<double> dctx(cells * static_cast<std::size_t>(h));
    std::vector<double> dx_prev(cells * static_cast<std::size_t>(h));

    for (std::int32_t layer = cfg.layers - 1; layer >= 0; --layer) {
        const LayerCache& lc = cache.layers[static_cast<std::size_t>(layer)];
        const std::string p = layer_prefix(layer);

        // ---- feed-forward block ----
        // x_out = x_att + W2 . gelu(W1 . ln2(x_att) + b1) + b2
        const double* w1 = params.seg(p + "ff.w1");
        const double* w2 = params.seg(p + "ff.w2");
        double* gw1 = gseg(p + "ff.w1");
        double* gb1 = gseg(p + "ff.b1");
        double* gw2 = gseg(p + "ff.w2");
        double* gb2 = gseg(p + "ff.b2");

        // Recompute ln2 output (cheap) to form W1's input.
        std::vector<double>& ln2_out = d_ln_out;  // reuse buffer
        {
            const double* gain = params.seg(p + "ln2.g");
            const double* bias = params.seg(p + "ln2.b");
            for (std::size_t cell = 0; cell < cells; ++cell) {
                const double* ni = lc.ln2_norm.data() + cell * static_cast<std::size_t>(h);
                double* oi = ln2_out.data() + cell * static_cast<std::size_t>(h);
                for (std::int32_t d = 0; d < h; ++d) oi[d] = ni[d] * gain[d] + bias[d];
            }
        }

        std::fill(d_pre.begin(), d_pre.end(), 0.0);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double* dxo = dx.data() + cell * static_cast<std::size_t>(h);
            const double* act = lc.ff_act.data() + cell * static_cast<std::size_t>(inter);
            const double* pre = lc.ff_pre.data() + cell * static_cast<std::size_t>(inter);
            double* dpre = d_pre.data() + cell * static_cast<std::size_t>(inter);
            // through W2
            for (std::int32_t d = 0; d < h; ++d) gb2[d] += dxo[d];
            for (std::int32_t c = 0; c < inter; ++c) {
                const double a = act[c];
                const double* w2row = w2 + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                double* gw2row = gw2 + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                double dact = 0.0;
                for (std::int32_t d = 0; d < h; ++d) {
                    dact += dxo[d] * w2row[d];
                    gw2row[d] += a * dxo[d];
                }
                dpre[c] = dact * gelu_grad(pre[c]);
            }
        }

        // through W1 into ln2 output gradient (reuse dctx buffer for it)
        std::vector<double>& d_ln2_out = dctx;
        std::fill(d_ln2_out.begin(), d_ln2_out.end(), 0.0);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double* dpre = d_pre.data() + cell * static_cast<std::size_t>(inter);
            const double* a = ln2_out.data() + cell * static_cast<std::size_t>(h);
            double* dln = d_ln2_out.data() + cell * static_cast<std::size_t>(h);
            for (std::int32_t c = 0; c < h; ++c) {
                const double av = a[c];
                const double* w1row = w1 + static_cast<std::size_t>(c) * static_cast<std::size_t>(inter);
                double* gw1row = gw1 + static_cast<std::size_t>(c) * static_cast<std::size_t>(inter);
                double dsum = 0.0;
                for (std::int32_t d = 0; d < inter; ++d) {
                    dsum += dpre[d] * w1row[d];
                    gw1row[d] += av * dpre[d];
                }
                dln[c] = dsum;
            }
            for (std::int32_t d = 0; d < inter; ++d) gb1[d] += dpre[d];
        }

        // d(x_att) = dx (residual) + LN2 backward of d_ln2_out
        std::fill(dx_prev.begin(), dx_prev.end(), 0.0);
        layer_norm_backward(d_ln2_out.data(), lc.ln2_norm.data(), lc.ln2_rstd.data(),
                            params.seg(p + "ln2.g"), gseg(p + "ln2.g"), gseg(p + "ln2.b"),
                            dx_prev.data());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dx_prev[i];

        // ---- attention block ----
        // x_att = x_in + Wo . ctx + bo
        const double* wo = params.seg(p + "attn.wo");
        double* gwo = gseg(p + "attn.wo");
        double* gbo = gseg(p + "attn.bo");
        std::fill(dctx.begin(), dctx.end(), 0.0);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double* dxo = dx.data() + cell * static_cast<std::size_t>(h);
            const double* ctx = lc.ctx.data() + cell * static_cast<std::size_t>(h);
            double* dc = dctx.data() + cell * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) gbo[d] += dxo[d];
            for (std::int32_t c = 0; c < h; ++c) {
                const double cv = ctx[c];
                const double* worow = wo + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                double* gworow = gwo + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                double dsum = 0.0;
                for (std::int32_t d = 0; d < h; ++d) {
                    dsum += dxo[d] * worow[d];
                    gworow[d] += cv * dxo[d];
                }
                dc[c] = dsum;
            }
        }

        // attention core backward
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dkv.begin(), dkv.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> dscores(static_cast<std::size_t>(len));
        for (std::int32_t r = 0; r < rows; ++r) {
            const std::size_t row_base = static_cast<std::size_t>(r) * static_cast<std::size_t>(len);
            for (std::int32_t head = 0; head < heads; ++head) {
                const std::int32_t d0 = head * dk;
                for (std::int32_t qc = 0; qc < len; ++qc) {
                    const double* prow = lc.probs.data() +
                                         ((static_cast<std::size_t>(r) * static_cast<std::size_t>(heads) +
                                           static_cast<std::size_t>(head)) *
                                              static_cast<std::size_t>(len) +
                                          static_cast<std::size_t>(qc)) *
                                             static_cast<std::size_t>(len);
                    const double* dc = dctx.data() + (row_base + static_cast<std::size_t>(qc)) *
                                                         static_cast<std::size_t>(h) + d0;
                    // dprobs and dV
                    double dot_dp_p = 0.0;
                    for (std::int32_t kc = 0; kc < len; ++kc) {
                        const double w = prow[kc];
                        double dp = 0.0;
                        if (w != 0.0) {
                            const double* vv = lc.v.data() + (row_base + static_cast<std::size_t>(kc)) *
                                                                 static_cast<std::size_t>(h) + d0;
                            double* dvv = dv.data() + (row_base + static_cast<std::size_t>(kc)) *
                                                          static_cast<std::size_t>(h) + d0;
                            for (std::int32_t d = 0; d < dk; ++d) {
                                dp += dc[d] * vv[d];
                                dvv[d] += w * dc[d];
                            }
                        }
                        dscores[static_cast<std::size_t>(kc)] = dp;
                        dot_dp_p += dp * w;
                    }
                    // softmax backward; masked keys have prob 0 and get no gradient
                    const double* qv = lc.q.data() + (row_base + static_cast<std::size_t>(qc)) *
                                                         static_cast<std::size_t>(h) + d0;
                    double* dqv = dq.data() + (row_base + static_cast<std::size_t>(qc)) *
                                                  static_cast<std::size_t>(h) + d0;
                    for (std::int32_t kc = 0; kc < len; ++kc) {
                        const double w = prow[kc];
                        if (w == 0.0) continue;
                        const double ds = w * (dscores[static_cast<std::size_t>(kc)] - dot_dp_p) * scale;
                        const double* kv = lc.k.data() + (row_base + static_cast<std::size_t>(kc)) *
                                                             static_cast<std::size_t>(h) + d0;
                        double* dkvv = dkv.data() + (row_base + static_cast<std::size_t>(kc)) *
                                                        static_cast<std::size_t>(h) + d0;
                        for (std::int32_t d = 0; d < dk; ++d) {
                            dqv[d] += ds * kv[d];
                            dkvv[d] += ds * qv[d];
                        }
                    }
                }
            }
        }

        // q,k,v projections backward into d(ln1 out).
        const double* wq = params.seg(p + "attn.wq");
        const double* wk = params.seg(p + "attn.wk");
        const double* wv = params.seg(p + "attn.wv");
        double* gwq = gseg(p + "attn.wq");
        double* gwk = gseg(p + "attn.wk");
        double* gwv = gseg(p + "attn.wv");
        double* gbq = gseg(p + "attn.bq");
        double* gbk = gseg(p + "attn.bk");
        double* gbv = gseg(p + "attn.bv");

        // Recompute ln1 output.
        std::vector<double>& ln1_out = d_ln_out;
        {
            const double* gain = params.seg(p + "ln1.g");
            const double* bias = params.seg(p + "ln1.b");
            for (std::size_t cell = 0; cell < cells; ++cell) {
                const double* ni = lc.ln1_norm.data() + cell * static_cast<std::size_t>(h);
                double* oi = ln1_out.data() + cell * static_cast<std::size_t>(h);
                for (std::int32_t d = 0; d < h; ++d) oi[d] = ni[d] * gain[d] + bias[d];
            }
        }

        std::vector<double> d_ln1_out(cells * static_cast<std::size_t>(h), 0.0);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            const double* a = ln1_out.data() + cell * static_cast<std::size_t>(h);
            const double* dqv = dq.data() + cell * static_cast<std::size_t>(h);
            const double* dkvv = dkv.data() + cell * static_cast<std::size_t>(h);
            const double* dvv = dv.data() + cell * static_cast<std::size_t>(h);
            double* dln = d_ln1_out.data() + cell * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) {
                gbq[d] += dqv[d];
                gbk[d] += dkvv[d];
                gbv[d] += dvv[d];
            }
            for (std::int32_t c = 0; c < h; ++c) {
                const double av = a[c];
                const double* wqrow = wq + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                const double* wkrow = wk + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                const double* wvrow = wv + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                double* gwqrow = gwq + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                double* gwkrow = gwk + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                double* gwvrow = gwv + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
                double dsum = 0.0;
                for (std::int32_t d = 0; d < h; ++d) {
                    dsum += dqv[d] * wqrow[d] + dkvv[d] * wkrow[d] + dvv[d] * wvrow[d];
                    gwqrow[d] += av * dqv[d];
                    gwkrow[d] += av * dkvv[d];
                    gwvrow[d] += av * dvv[d];
                }
                dln[c] = dsum;
            }
        }

        // d(x_in) = dx (residual through attention) + LN1 backward.
        std::fill(dx_prev.begin(), dx_prev.end(), 0.0);
        layer_norm_backward(d_ln1_out.data(), lc.ln1_norm.data(), lc.ln1_rstd.data(),
                            params.seg(p + "ln1.g"), gseg(p + "ln1.g"), gseg(p + "ln1.b"),
                            dx_prev.data());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dx_prev[i];
    }

    // Embedding gradients.
    double* g_tok = gseg("tok_emb");
    double* g_pos = gseg("pos_emb");
    for (std::int32_t r = 0; r < rows; ++r) {
        for (std::int32_t c = 0; c < len; ++c) {
            const std::size_t cell = cb.flat(r, c);
            const TokenId id = cb.input_ids[cell];
            const double* dxi = dx.data() + cell * static_cast<std::size_t>(h);
            double* gte = g_tok + static_cast<std::size_t>(id) * static_cast<std::size_t>(h);
            double* gpe = g_pos + static_cast<std::size_t>(c) * static_cast<std::size_t>(h);
            for (std::int32_t d = 0; d < h; ++d) {
                gte[d] += dxi[d];
                gpe[d] += dxi[d];
            }
        }
    }
    return grads;
}

std::vector<std::uint8_t> predict_binary(const std::vector<double>& binary_logits,
                                         double threshold) {
    std::vector<std::uint8_t> out(binary_logits.size());
    for (std::size_t i = 0; i < binary_logits.size(); ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-binary_logits[i]));
        out[i] = sig > threshold ? 1 : 0;
    }
    return out;
}

namespace {

CorruptedBatch slice_rows(const CorruptedBatch& cb, std::int32_t first, std::int32_t count) {
    CorruptedBatch out;
    out.objective = cb.objective;
    out.rows = count;
    out.max_len = cb.max_len;
    const auto begin = static_cast<std::size_t>(first) * static_cast<std::size_t>(cb.max_len);
    const auto end = begin + static_cast<std::size_t>(count) * static_cast<std::size_t>(cb.max_len);
    const auto copy = [&](const auto& src, auto& dst) { dst.assign(src.begin() + begin, src.begin() + end); };
    copy(cb.input_ids, out.input_ids);
    copy(cb.original_ids, out.original_ids);
    copy(cb.corruption_mask, out.corruption_mask);
    copy(cb.loss_mask, out.loss_mask);
    copy(cb.attention_mask, out.attention_mask);
    copy(cb.labels, out.labels);
    return out;
}

}  // namespace

StepOutput train_step_gradients(const TransformerParams& params, const CorruptedBatch& cb,
                                int threads) {
    if (threads < 1) threads = 1;
    threads = std::min<int>(threads, std::max<std::int32_t>(1, cb.rows));

    const std::int64_t denom = count_loss_positions(cb);

    StepOutput out;
    out.loss_positions = denom;
    if (threads == 1) {
        const ForwardCache cache = forward(params, cb);
        out.loss = loss(params, cache, cb, denom);
        out.grads = backward(params, cache, cb, denom);
        out.binary_logits = cache.binary_logits;
        return out;
    }

    // Contiguous row shards; the reduction below runs in shard order, so a
    // given thread count always produces the same bits.
    const std::int32_t per = (cb.rows + threads - 1) / threads;
    struct Shard {
        CorruptedBatch cb;
        std::int32_t first = 0;
        double loss_sum = 0.0;
        std::vector<double> grads;
        std::vector<double> logits;
    };
    std::vector<Shard> shards;
    for (std::int32_t first = 0; first < cb.rows; first += per) {
        Shard s;
        s.first = first;
        s.cb = slice_rows(cb, first, std::min<std::int32_t>(per, cb.rows - first));
        shards.push_back(std::move(s));
    }

    std::vector<std::thread> workers;
    workers.reserve(shards.size());
    for (auto& shard : shards) {
        workers.emplace_back([&params, &shard, denom]() {
            const ForwardCache cache = forward(params, shard.cb);
            shard.loss_sum = loss(params, cache, shard.cb, denom);
            shard.grads = backward(params, cache, shard.cb, denom);
            shard.logits = cache.binary_logits;
        });
    }
    for (auto& w : workers) w.join();

    out.grads.assign(params.data.size(), 0.0);
    if (params.config.head == HeadType::BINARY)
        out.binary_logits.resize(cb.loss_mask.size());
    double total_loss = 0.0;
    for (const auto& shard : shards) {
        total_loss += shard.loss_sum;
        for (std::size_t i = 0; i < out.grads.size(); ++i) out.grads[i] += shard.grads[i];
        if (!shard.logits.empty())
            std::copy(shard.logits.begin(), shard.logits.end(),
                      out.binary_logits.begin() +
                          static_cast<std::ptrdiff_t>(shard.first) * cb.max_len);
    }
    out.loss = total_loss;
    return out;
}

}  // namespace pretrain
