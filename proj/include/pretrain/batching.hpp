#pragma once

#include <cstdint>
#include <vector>

#include "pretrain/vocab.hpp"

namespace pretrain {

// Fixed-length rows: CLS + payload + SEP, padded to max_len. Rows are
// left-aligned and attention is false exactly at PAD.
struct Batch {
    std::int32_t rows = 0;
    std::int32_t max_len = 0;
    std::vector<TokenId> ids;             // rows * max_len
    std::vector<std::uint8_t> attention;  // rows * max_len, 1 = real token
    std::vector<std::int32_t> lengths;    // true length per row (incl CLS/SEP)

    TokenId id_at(std::int32_t r, std::int32_t c) const {
        return ids[static_cast<std::size_t>(r) * static_cast<std::size_t>(max_len) +
                   static_cast<std::size_t>(c)];
    }
    bool attends(std::int32_t r, std::int32_t c) const {
        return attention[static_cast<std::size_t>(r) * static_cast<std::size_t>(max_len) +
                         static_cast<std::size_t>(c)] != 0;
    }
};

struct PackConfig {
    std::int32_t max_len = 128;
    std::int32_t batch_size = 32;
    std::uint64_t seed = 0;
};

// Splits sequences longer than max_len-2 into several rows (nothing is
// silently truncated), shuffles row order by seed, then groups rows into
// batches; the final batch may be short. Deterministic given (input, config).
std::vector<Batch> pack_batches(const std::vector<TokenSequence>& seqs, const Vocab& vocab,
                                const PackConfig& config);

}  // namespace pretrain
