#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "pretrain/objectives.hpp"
#include "pretrain/vocab.hpp"

namespace pretrain {

enum class HeadType { BINARY, LM };

// Pre-norm encoder with learned absolute positions and GELU feed-forward.
// Desk default is intentionally small; the paper-scale shapes are reachable
// through the same config.
struct ModelConfig {
    std::int32_t layers = 2;
    std::int32_t hidden = 64;
    std::int32_t heads = 4;
    std::int32_t intermediate = 256;
    std::int32_t max_len = 32;
    std::int32_t vocab_size = 0;
    HeadType head = HeadType::BINARY;

    void validate() const;
    std::int32_t head_dim() const { return hidden / heads; }
};

struct ParamSegment {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
    bool decay = false;  // participates in weight decay
};

struct ParamLayout {
    std::vector<ParamSegment> segments;
    std::size_t total = 0;

    const ParamSegment& find(std::string_view name) const;
    // Segment containing a flat index; used to name parameters in diagnostics.
    const ParamSegment& locate(std::size_t flat_index) const;
};

ParamLayout make_layout(const ModelConfig& config);

// All dense parameters in one flat 64-bit buffer. Both heads are always
// allocated; config.head selects which one forward uses. The LM head is
// weight-tied to the token embeddings and owns only its output bias.
struct TransformerParams {
    ModelConfig config;
    ParamLayout layout;
    std::vector<double> data;

    double* seg(std::string_view name) { return data.data() + layout.find(name).offset; }
    const double* seg(std::string_view name) const { return data.data() + layout.find(name).offset; }
};

TransformerParams init_params(const ModelConfig& config, std::uint64_t seed);

struct LayerCache {
    std::vector<double> ln1_norm, ln1_mean, ln1_rstd;
    std::vector<double> q, k, v, probs, ctx, x_att;
    std::vector<double> ln2_norm, ln2_mean, ln2_rstd;
    std::vector<double> ff_pre, ff_act, x_out;
};

struct ForwardCache {
    std::int32_t rows = 0;
    std::int32_t len = 0;
    std::vector<double> x0;  // embeddings, rows*len*h
    std::vector<LayerCache> layers;
    std::vector<double> lnf_norm, lnf_mean, lnf_rstd;
    std::vector<double> hidden;  // final hidden states, rows*len*h

    // BINARY head: one logit per position (rows*len).
    std::vector<double> binary_logits;

    // LM head: logits only at loss positions (flat index r*len+c), P x V.
    std::vector<std::int64_t> lm_positions;
    std::vector<double> lm_logits;
};

// PAD keys are masked out of attention with -inf scores; PAD positions still
// produce logits but the loss mask excludes them downstream.
ForwardCache forward(const TransformerParams& params, const CorruptedBatch& cb);

// Mean loss over loss-mask positions: binary cross-entropy for BINARY heads,
// softmax cross-entropy for LM heads. An empty loss mask yields 0.
// loss_denominator overrides the position count (used for sharded batches).
double loss(const TransformerParams& params, const ForwardCache& cache, const CorruptedBatch& cb,
            std::int64_t loss_denominator = -1);

// Exact gradients of loss() with respect to every parameter.
std::vector<double> backward(const TransformerParams& params, const ForwardCache& cache,
                             const CorruptedBatch& cb, std::int64_t loss_denominator = -1);

// sigmoid(logit) > threshold => predicted "replaced"; ties predict original.
std::vector<std::uint8_t> predict_binary(const std::vector<double>& binary_logits,
                                         double threshold = 0.5);

struct StepOutput {
    double loss = 0.0;
    std::int64_t loss_positions = 0;
    std::vector<double> grads;
    std::vector<double> binary_logits;  // populated for BINARY heads
};

// Row-sharded forward+backward. threads=1 is the sequential reference path;
// for a fixed thread count the shard reduction order is fixed, so results are
// reproducible run-to-run.
StepOutput train_step_gradients(const TransformerParams& params, const CorruptedBatch& cb,
                                int threads);

}  // namespace pretrain
