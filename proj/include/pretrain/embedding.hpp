#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pretrain/vocab.hpp"

namespace pretrain {

struct EmbeddingTable {
    std::int32_t vocab_size = 0;
    std::int32_t dim = 0;
    std::int32_t trained_epochs = 0;
    std::vector<double> data;  // vocab_size * dim, row per id

    std::span<double> row(TokenId id) {
        return {data.data() + static_cast<std::size_t>(id) * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }
    std::span<const double> row(TokenId id) const {
        return {data.data() + static_cast<std::size_t>(id) * static_cast<std::size_t>(dim),
                static_cast<std::size_t>(dim)};
    }
};

struct SgnsConfig {
    std::int32_t dim = 64;
    std::int32_t window = 5;
    std::int32_t negatives = 5;
    std::int32_t epochs = 5;
    double lr = 0.025;
    std::uint64_t seed = 1;
    std::int32_t loss_window = 200;  // pair updates per recorded loss average
};

// Skip-gram with negative sampling, single-threaded reference path. Negatives
// come from the unigram^0.75 distribution over non-special tokens; specials
// are never centers, contexts, or negatives, and their rows keep the seeded
// initialization. Returns the center table. Deterministic given the seed.
//
// loss_trace, when given, receives the mean pair loss of consecutive
// loss_window-update windows.
EmbeddingTable train_sgns(const std::vector<TokenSequence>& corpus, const Vocab& vocab,
                          const SgnsConfig& config, std::vector<double>* loss_trace = nullptr);

// k nearest rows by Euclidean distance, excluding token_id itself; distance
// ties broken by lower id.
std::vector<std::pair<TokenId, double>> nearest(const EmbeddingTable& table, TokenId token_id,
                                                std::int32_t k);

// Text format: header "V d", then V lines of d decimals, line order = id.
void save_embeddings(const EmbeddingTable& table, const std::string& path);
EmbeddingTable load_embeddings(const std::string& path);

}  // namespace pretrain
