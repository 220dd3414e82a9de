#include "pretrain/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

#include "pretrain/model.hpp"

namespace pretrain {

const char* objective_name(Objective objective) {
    switch (objective) {
        case Objective::MLM: return "mlm";
        case Objective::RTS: return "rts";
        case Objective::CRTS: return "crts";
        case Objective::SLM: return "slm";
        case Objective::SLM_ALL: return "slm-all";
        case Objective::TD_GEN: return "td-gen";
    }
    return "?";
}

Objective objective_from_name(std::string_view name) {
    if (name == "mlm") return Objective::MLM;
    if (name == "rts") return Objective::RTS;
    if (name == "crts") return Objective::CRTS;
    if (name == "slm") return Objective::SLM;
    if (name == "slm-all" || name == "slm_all") return Objective::SLM_ALL;
    if (name == "td-gen" || name == "td_gen") return Objective::TD_GEN;
    throw std::invalid_argument("unknown objective: " + std::string(name));
}

namespace {

// Uniform non-special id != original.
TokenId draw_replacement(const Vocab& vocab, TokenId original, Rng& rng) {
    const auto candidates = static_cast<std::uint64_t>(vocab.num_regular() - 1);
    TokenId id = static_cast<TokenId>(vocab.num_specials() + static_cast<TokenId>(rng.below(candidates)));
    if (id >= original) ++id;
    return id;
}

CorruptedBatch base_from(const Batch& batch, Objective objective) {
    CorruptedBatch cb;
    cb.objective = objective;
    cb.rows = batch.rows;
    cb.max_len = batch.max_len;
    cb.input_ids = batch.ids;
    cb.original_ids = batch.ids;
    cb.attention_mask = batch.attention;
    const std::size_t cells = batch.ids.size();
    cb.corruption_mask.assign(cells, 0);
    cb.loss_mask.assign(cells, 0);
    cb.labels.assign(cells, kIgnoreLabel);
    return cb;
}

void require_replaceable(const Vocab& vocab) {
    if (vocab.num_regular() < 2)
        throw std::invalid_argument("corruption needs at least two non-special tokens");
}

// Whole-output labeling shared by RTS and C-RTS: every non-PAD position gets
// a 0/1 replaced flag and contributes to the loss.
void finish_detection_labels(CorruptedBatch& cb) {
    for (std::size_t i = 0; i < cb.labels.size(); ++i) {
        if (!cb.attention_mask[i]) continue;
        cb.loss_mask[i] = 1;
        cb.labels[i] = cb.corruption_mask[i] ? 1 : 0;
    }
}

}  // namespace

std::vector<std::int32_t> select_positions(const Batch& batch, std::int32_t row,
                                           const Vocab& vocab, double rate, Rng& rng) {
    if (rate <= 0.0 || rate >= 1.0)
        throw std::invalid_argument("select_positions: rate must be in (0, 1)");

    std::vector<std::int32_t> eligible;
    for (std::int32_t c = 0; c < batch.max_len; ++c)
        if (batch.attends(row, c) && !vocab.is_special(batch.id_at(row, c))) eligible.push_back(c);
    if (eligible.empty()) return {};

    const auto want = std::max<std::int64_t>(
        1, std::llround(rate * static_cast<double>(eligible.size())));
    const auto count = std::min<std::size_t>(eligible.size(), static_cast<std::size_t>(want));

    // Partial Fisher-Yates: the first `count` entries are a uniform sample
    // without replacement.
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + rng.index(eligible.size() - i);
        std::swap(eligible[i], eligible[j]);
    }
    eligible.resize(count);
    std::sort(eligible.begin(), eligible.end());
    return eligible;
}

CorruptedBatch corrupt_rts(const Batch& batch, const Vocab& vocab, const ObjectiveConfig& config,
                           Rng& rng) {
    require_replaceable(vocab);
    CorruptedBatch cb = base_from(batch, Objective::RTS);
    for (std::int32_t r = 0; r < batch.rows; ++r) {
        for (const std::int32_t c : select_positions(batch, r, vocab, config.replace_rate, rng)) {
            const std::size_t i = cb.flat(r, c);
            cb.input_ids[i] = draw_replacement(vocab, cb.original_ids[i], rng);
            cb.corruption_mask[i] = 1;
        }
    }
    finish_detection_labels(cb);
    return cb;
}

CorruptedBatch corrupt_crts(const Batch& batch, const Vocab& vocab, const CountMatrix& cm,
                            const ClusterModel& clusters, const ObjectiveConfig& config, Rng& rng) {
    require_replaceable(vocab);
    if (clusters.assignment.size() != static_cast<std::size_t>(vocab.size()))
        throw std::invalid_argument("corrupt_crts: cluster model does not cover the vocabulary");

    CorruptedBatch cb = base_from(batch, Objective::CRTS);
    for (std::int32_t r = 0; r < batch.rows; ++r) {
        for (const std::int32_t c : select_positions(batch, r, vocab, config.replace_rate, rng)) {
            const std::size_t i = cb.flat(r, c);
            const TokenId alpha = cb.original_ids[i];
            const TokenId beta = sample_replacement(cm, clusters, vocab, alpha, rng);
            cb.input_ids[i] = beta;
            cb.corruption_mask[i] = 1;
            cb.events.push_back({r, c, clusters.cluster_of(alpha), clusters.cluster_of(beta)});
        }
    }
    finish_detection_labels(cb);
    return cb;
}

CorruptedBatch corrupt_slm(const Batch& batch, const Vocab& vocab, const ObjectiveConfig& config,
                           Rng& rng) {
    require_replaceable(vocab);
    CorruptedBatch cb = base_from(batch, Objective::SLM);
    for (std::int32_t r = 0; r < batch.rows; ++r) {
        for (const std::int32_t c : select_positions(batch, r, vocab, config.replace_rate, rng)) {
            const std::size_t i = cb.flat(r, c);
            cb.input_ids[i] = draw_replacement(vocab, cb.original_ids[i], rng);
            cb.corruption_mask[i] = 1;
            cb.loss_mask[i] = 1;
            cb.labels[i] = cb.original_ids[i];
        }
    }
    return cb;
}

CorruptedBatch corrupt_mlm(const Batch& batch, const Vocab& vocab, const ObjectiveConfig& config,
                           Rng& rng) {
    require_replaceable(vocab);
    if (config.mlm_mask_frac + config.mlm_random_frac > 1.0)
        throw std::invalid_argument("corrupt_mlm: mask and random fractions exceed 1");

    CorruptedBatch cb = base_from(batch, Objective::MLM);
    for (std::int32_t r = 0; r < batch.rows; ++r) {
        for (const std::int32_t c : select_positions(batch, r, vocab, config.replace_rate, rng)) {
            const std::size_t i = cb.flat(r, c);
            // corruption_mask marks every selected position, including the
            // ones left unchanged.
            cb.corruption_mask[i] = 1;
            cb.loss_mask[i] = 1;
            cb.labels[i] = cb.original_ids[i];
            const double u = rng.next_double();
            if (u < config.mlm_mask_frac)
                cb.input_ids[i] = vocab.mask_id();
            else if (u < config.mlm_mask_frac + config.mlm_random_frac)
                cb.input_ids[i] = draw_replacement(vocab, cb.original_ids[i], rng);
            // else: left unchanged
        }
    }
    return cb;
}

CorruptedBatch targets_slm_all(const CorruptedBatch& cb) {
    if (cb.objective == Objective::MLM)
        throw std::invalid_argument("SLM-all forbids MASK: source batch is MLM-corrupted");
    if (cb.objective != Objective::RTS && cb.objective != Objective::CRTS &&
        cb.objective != Objective::TD_GEN)
        throw std::invalid_argument("targets_slm_all: source must be a replaced-token batch");
    CorruptedBatch out = cb;
    out.objective = Objective::SLM_ALL;
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
        if (out.attention_mask[i]) {
            out.loss_mask[i] = 1;
            out.labels[i] = out.original_ids[i];
        } else {
            out.loss_mask[i] = 0;
            out.labels[i] = kIgnoreLabel;
        }
    }
    return out;
}

CorruptedBatch mask_for_generator(const Batch& batch, const Vocab& vocab,
                                  const ObjectiveConfig& config, Rng& rng) {
    require_replaceable(vocab);
    CorruptedBatch masked = base_from(batch, Objective::MLM);
    for (std::int32_t r = 0; r < batch.rows; ++r) {
        for (const std::int32_t c : select_positions(batch, r, vocab, config.replace_rate, rng)) {
            const std::size_t i = masked.flat(r, c);
            masked.input_ids[i] = vocab.mask_id();
            masked.corruption_mask[i] = 1;
            masked.loss_mask[i] = 1;
            masked.labels[i] = masked.original_ids[i];
        }
    }
    return masked;
}

CorruptedBatch replace_from_generator(const CorruptedBatch& masked, const ForwardCache& gen_cache,
                                      const Vocab& vocab, Rng& rng, double temperature) {
    const auto& cache = gen_cache;
    const auto num_positions = cache.lm_positions.size();
    const auto vocab_size = static_cast<std::size_t>(vocab.size());
    const auto first_regular = static_cast<std::size_t>(vocab.num_specials());

    CorruptedBatch cb;
    cb.objective = Objective::TD_GEN;
    cb.rows = masked.rows;
    cb.max_len = masked.max_len;
    cb.input_ids = masked.original_ids;
    cb.original_ids = masked.original_ids;
    cb.attention_mask = masked.attention_mask;
    cb.corruption_mask.assign(cb.input_ids.size(), 0);
    cb.loss_mask.assign(cb.input_ids.size(), 0);
    cb.labels.assign(cb.input_ids.size(), kIgnoreLabel);

    std::vector<double> probs(vocab_size);
    for (std::size_t p = 0; p < num_positions; ++p) {
        const std::size_t i = static_cast<std::size_t>(cache.lm_positions[p]);
        const double* logits = cache.lm_logits.data() + p * vocab_size;

        TokenId sample;
        if (temperature <= 0.0) {
            // Zero-temperature limit: generator argmax over non-specials,
            // ties to the lower id.
            std::size_t best = first_regular;
            for (std::size_t v = first_regular + 1; v < vocab_size; ++v)
                if (logits[v] > logits[best]) best = v;
            sample = static_cast<TokenId>(best);
        } else {
            double max_logit = logits[first_regular];
            for (std::size_t v = first_regular + 1; v < vocab_size; ++v)
                max_logit = std::max(max_logit, logits[v]);
            double total = 0.0;
            for (std::size_t v = first_regular; v < vocab_size; ++v) {
                probs[v] = std::exp((logits[v] - max_logit) / temperature);
                total += probs[v];
            }
            const double target = rng.next_double() * total;
            double acc = 0.0;
            std::size_t chosen = vocab_size - 1;
            for (std::size_t v = first_regular; v < vocab_size; ++v) {
                acc += probs[v];
                if (target < acc) {
                    chosen = v;
                    break;
                }
            }
            sample = static_cast<TokenId>(chosen);
        }

        cb.input_ids[i] = sample;
        // A lucky generator sample that reproduces the original counts as an
        // original token.
        cb.corruption_mask[i] = sample == cb.original_ids[i] ? 0 : 1;
    }
    finish_detection_labels(cb);
    return cb;
}

CorruptedBatch corrupt_with_generator(const Batch& batch, const TransformerParams& generator,
                                      const Vocab& vocab, const ObjectiveConfig& config, Rng& rng,
                                      double temperature) {
    if (generator.config.vocab_size != vocab.size())
        throw std::invalid_argument("corrupt_with_generator: generator vocabulary size mismatch");
    if (generator.config.head != HeadType::LM)
        throw std::invalid_argument("corrupt_with_generator: generator must have an LM head");
    const CorruptedBatch masked = mask_for_generator(batch, vocab, config, rng);
    const ForwardCache cache = forward(generator, masked);
    return replace_from_generator(masked, cache, vocab, rng, temperature);
}

void dump_corrupted(std::ostream& out, const CorruptedBatch& cb, std::uint64_t seed) {
    out << "objective=" << objective_name(cb.objective) << " rows=" << cb.rows
        << " max_len=" << cb.max_len << " seed=" << seed << '\n';
    const auto write_row = [&](const char* field, auto get) {
        out << field << ':';
        for (std::int32_t c = 0; c < cb.max_len; ++c) out << ' ' << get(c);
        out << '\n';
    };
    for (std::int32_t r = 0; r < cb.rows; ++r) {
        out << "row " << r << '\n';
        write_row("input_ids", [&](std::int32_t c) { return cb.input_ids[cb.flat(r, c)]; });
        write_row("original_ids", [&](std::int32_t c) { return cb.original_ids[cb.flat(r, c)]; });
        write_row("labels", [&](std::int32_t c) { return cb.labels[cb.flat(r, c)]; });
        write_row("corruption_mask",
                  [&](std::int32_t c) { return static_cast<int>(cb.corruption_mask[cb.flat(r, c)]); });
        write_row("loss_mask",
                  [&](std::int32_t c) { return static_cast<int>(cb.loss_mask[cb.flat(r, c)]); });
        write_row("attention_mask",
                  [&](std::int32_t c) { return static_cast<int>(cb.attention_mask[cb.flat(r, c)]); });
    }
}

}  // namespace pretrain
