#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pretrain/batching.hpp"
#include "pretrain/cluster.hpp"
#include "pretrain/crts.hpp"
#include "pretrain/rng.hpp"
#include "pretrain/vocab.hpp"

namespace pretrain {

struct TransformerParams;  // model.hpp
struct ForwardCache;       // model.hpp

enum class Objective { MLM, RTS, CRTS, SLM, SLM_ALL, TD_GEN };

const char* objective_name(Objective objective);
Objective objective_from_name(std::string_view name);

// Label value at positions outside the loss mask; never a valid token id.
constexpr std::int32_t kIgnoreLabel = -100;

struct ObjectiveConfig {
    Objective objective = Objective::RTS;
    double replace_rate = 0.15;
    double mlm_mask_frac = 0.8;
    double mlm_random_frac = 0.1;
    std::uint64_t seed = 0;
};

// Where a C-RTS replacement came from and landed, so the trainer can build
// the OutcomeDelta once discriminator predictions are known.
struct CorruptionEvent {
    std::int32_t row = 0;
    std::int32_t col = 0;
    std::int32_t source_cluster = 0;
    std::int32_t target_cluster = 0;
};

// Universal output of every objective pipeline.
//
// labels: RTS/C-RTS/TD_GEN carry 0/1 replaced flags over all non-PAD
// positions; MLM/SLM carry original ids at selected positions; SLM_ALL
// carries original ids at all non-PAD positions. kIgnoreLabel elsewhere.
// loss_mask: all non-PAD positions for whole-output objectives (RTS, C-RTS,
// TD_GEN, SLM_ALL), selected positions only for MLM/SLM.
struct CorruptedBatch {
    Objective objective = Objective::RTS;
    std::int32_t rows = 0;
    std::int32_t max_len = 0;
    std::vector<TokenId> input_ids;
    std::vector<TokenId> original_ids;
    std::vector<std::uint8_t> corruption_mask;
    std::vector<std::uint8_t> loss_mask;
    std::vector<std::uint8_t> attention_mask;
    std::vector<std::int32_t> labels;
    std::vector<CorruptionEvent> events;  // C-RTS only

    std::size_t flat(std::int32_t r, std::int32_t c) const {
        return static_cast<std::size_t>(r) * static_cast<std::size_t>(max_len) +
               static_cast<std::size_t>(c);
    }
};

// Uniformly samples round(rate * E) positions without replacement from the E
// eligible (non-special, attended) positions of one row; at least 1 when any
// position is eligible. Returned positions are sorted.
std::vector<std::int32_t> select_positions(const Batch& batch, std::int32_t row,
                                           const Vocab& vocab, double rate, Rng& rng);

CorruptedBatch corrupt_rts(const Batch& batch, const Vocab& vocab, const ObjectiveConfig& config,
                           Rng& rng);

CorruptedBatch corrupt_crts(const Batch& batch, const Vocab& vocab, const CountMatrix& cm,
                            const ClusterModel& clusters, const ObjectiveConfig& config, Rng& rng);

// Replacements are real tokens, never MASK; the model must recover the
// original at the replaced positions only.
CorruptedBatch corrupt_slm(const Batch& batch, const Vocab& vocab, const ObjectiveConfig& config,
                           Rng& rng);

// BERT-style: selected positions become MASK / a random token / stay put with
// mlm_mask_frac / mlm_random_frac / remainder probabilities.
CorruptedBatch corrupt_mlm(const Batch& batch, const Vocab& vocab, const ObjectiveConfig& config,
                           Rng& rng);

// Re-targets a replaced-token batch so every non-PAD position must reproduce
// the original token (identity at unchanged positions). Rejects MLM batches,
// whose inputs contain MASK.
CorruptedBatch targets_slm_all(const CorruptedBatch& cb);

// ELECTRA-style corruption: selected positions are masked, a trained LM-head
// generator proposes replacements sampled at the given temperature
// (temperature 0 = argmax), and positions where the sample equals the
// original count as uncorrupted. Specials are never sampled.
CorruptedBatch corrupt_with_generator(const Batch& batch, const TransformerParams& generator,
                                      const Vocab& vocab, const ObjectiveConfig& config, Rng& rng,
                                      double temperature);

// The two halves of corrupt_with_generator, split so a trainer can reuse the
// generator forward pass for its MLM loss. mask_for_generator replaces every
// selected position with MASK (MLM labels); replace_from_generator samples
// the discriminator's input from the cached generator logits.
CorruptedBatch mask_for_generator(const Batch& batch, const Vocab& vocab,
                                  const ObjectiveConfig& config, Rng& rng);
CorruptedBatch replace_from_generator(const CorruptedBatch& masked, const ForwardCache& gen_cache,
                                      const Vocab& vocab, Rng& rng, double temperature);

// Line-delimited dump for golden tests: a header record, then one record per
// row with the integer arrays.
void dump_corrupted(std::ostream& out, const CorruptedBatch& cb, std::uint64_t seed);

}  // namespace pretrain
