#include "pretrain/batching.hpp"

#include <stdexcept>

#include "pretrain/rng.hpp"

namespace pretrain {

std::vector<Batch> pack_batches(const std::vector<TokenSequence>& seqs, const Vocab& vocab,
                                const PackConfig& config) {
    if (config.max_len < 3)
        throw std::invalid_argument("pack_batches: max_len must be >= 3 (CLS + token + SEP)");
    if (config.batch_size < 1)
        throw std::invalid_argument("pack_batches: batch_size must be >= 1");

    const std::int32_t payload = config.max_len - 2;

    std::vector<TokenSequence> rows;
    for (const auto& seq : seqs) {
        if (seq.empty()) continue;
        for (std::size_t start = 0; start < seq.size(); start += static_cast<std::size_t>(payload)) {
            const std::size_t end = std::min(seq.size(), start + static_cast<std::size_t>(payload));
            rows.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(start),
                              seq.begin() + static_cast<std::ptrdiff_t>(end));
        }
    }

    // Fisher-Yates on row order; the seed fully determines the permutation.
    Rng rng = derive_rng(config.seed, "pack.shuffle");
    for (std::size_t i = rows.size(); i > 1; --i) {
        const std::size_t j = rng.index(i);
        std::swap(rows[i - 1], rows[j]);
    }

    std::vector<Batch> batches;
    for (std::size_t first = 0; first < rows.size(); first += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t count =
            std::min(rows.size() - first, static_cast<std::size_t>(config.batch_size));
        Batch batch;
        batch.rows = static_cast<std::int32_t>(count);
        batch.max_len = config.max_len;
        batch.ids.assign(count * static_cast<std::size_t>(config.max_len), vocab.pad_id());
        batch.attention.assign(count * static_cast<std::size_t>(config.max_len), 0);
        batch.lengths.resize(count);
        for (std::size_t r = 0; r < count; ++r) {
            const TokenSequence& row = rows[first + r];
            const std::size_t base = r * static_cast<std::size_t>(config.max_len);
            batch.ids[base] = vocab.cls_id();
            for (std::size_t c = 0; c < row.size(); ++c) batch.ids[base + 1 + c] = row[c];
            batch.ids[base + 1 + row.size()] = vocab.sep_id();
            const std::int32_t length = static_cast<std::int32_t>(row.size()) + 2;
            batch.lengths[r] = length;
            for (std::int32_t c = 0; c < length; ++c) batch.attention[base + static_cast<std::size_t>(c)] = 1;
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace pretrain
