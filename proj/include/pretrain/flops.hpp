#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pretrain/model.hpp"
#include "pretrain/objectives.hpp"
#include "pretrain/train.hpp"

namespace pretrain {

// Dense-matmul FLOPs only: projections, attention scores (the L^2 terms),
// feed-forward, and the head where its outputs are actually needed. Softmax,
// layer norms, and activations are not counted.
enum class EmbedUpdateMode { TouchedRows, FullTable };

struct CostModel {
    double backward_multiplier = 2.0;  // backward costed at 2x forward
    EmbedUpdateMode embed_update = EmbedUpdateMode::TouchedRows;
    // Generator LM head accounting: full-sequence output (the accounting that
    // reproduces the published FLOPs ratios) vs masked-positions-only.
    bool gen_head_all_positions = true;
    // Generator embeddings tied to the discriminator's width, with a
    // hidden->width projection in front of the LM head.
    bool tie_generator_embeddings = true;
};

struct FlopsRequest {
    Objective objective = Objective::RTS;
    ModelConfig discriminator;               // head field is ignored; set per objective
    std::optional<ModelConfig> generator;    // TD_GEN and two-network SLM-all
    std::int64_t batch_size = 256;
    std::vector<PhaseSpec> phases;           // (steps, seq_len)
    double replace_rate = 0.15;
    CostModel cost;
};

struct FlopsBreakdown {
    double encoder = 0.0, head = 0.0, embed = 0.0;
    double gen_encoder = 0.0, gen_head = 0.0, gen_embed = 0.0;

    double network_total() const { return encoder + head + embed; }
    double generator_total() const { return gen_encoder + gen_head + gen_embed; }
    double total() const { return network_total() + generator_total(); }
};

FlopsBreakdown estimate(const FlopsRequest& request);

// Paper-scale request for one Table-1 column: RoBERTa-base discriminator,
// reduced-width generator where the objective carries one, 900K/100K-style
// phase budgets (scaled for generator-bearing objectives).
FlopsRequest paper_scale_request(Objective objective, bool slm_all_two_networks = true);

struct ReportRow {
    std::string name;
    FlopsBreakdown breakdown;
};

// Text table: name, FLOPs, ratio to the first row.
std::string report(const std::vector<ReportRow>& rows);
// Machine-readable line-delimited variant (one JSON object per row).
std::string report_jsonl(const std::vector<ReportRow>& rows);

}  // namespace pretrain
