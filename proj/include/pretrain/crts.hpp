#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pretrain/cluster.hpp"
#include "pretrain/rng.hpp"
#include "pretrain/vocab.hpp"

namespace pretrain {

// Failure-minus-success counts of the discriminator per (source cluster,
// target cluster) replacement pair. Starts all-zero; a correct prediction at
// a replaced position decrements the cell, a miss increments it.
struct CountMatrix {
    std::int32_t n = 0;
    double gamma = 2.0;
    std::vector<std::int64_t> counts;  // n * n, row-major

    CountMatrix() = default;
    CountMatrix(std::int32_t n_, double gamma_)
        : n(n_), gamma(gamma_), counts(static_cast<std::size_t>(n_) * static_cast<std::size_t>(n_), 0) {}

    std::int64_t& at(std::int32_t i, std::int32_t j) {
        return counts[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
    }
    std::int64_t at(std::int32_t i, std::int32_t j) const {
        return counts[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
    }
};

// One discriminator outcome at a replaced position.
struct OutcomeEvent {
    std::int32_t source_cluster = 0;
    std::int32_t target_cluster = 0;
    bool discriminator_correct = false;
};

// Batched outcome counts; merging is associative and commutative, so parallel
// workers can accumulate independently and combine in any order.
struct OutcomeDelta {
    std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> cells;

    void record(const OutcomeEvent& event) {
        cells[{event.source_cluster, event.target_cluster}] +=
            event.discriminator_correct ? -1 : +1;
    }
    void merge(const OutcomeDelta& other) {
        for (const auto& [key, value] : other.cells) cells[key] += value;
    }
    std::int64_t total_magnitude() const {
        std::int64_t total = 0;
        for (const auto& [key, value] : cells) total += value < 0 ? -value : value;
        return total;
    }
};

// Min-max normalisation of row i followed by a gamma-softmax. A constant row
// (all entries equal, e.g. at initialization) yields the uniform distribution.
std::vector<double> row_distribution(const CountMatrix& cm, std::int32_t i);

// Draws the replacement token: target cluster from row_distribution of
// alpha's cluster, then uniform over that cluster's members excluding alpha.
// If alpha's own cluster is a singleton that gets drawn, the cluster draw is
// retried up to kSingletonRetries times before falling back to a uniform draw
// over all non-special ids != alpha. Never returns alpha or a special token.
TokenId sample_replacement(const CountMatrix& cm, const ClusterModel& clusters,
                           const Vocab& vocab, TokenId alpha, Rng& rng);

constexpr int kSingletonRetries = 8;

// Folds a batch of outcomes into F.
void update_counts(CountMatrix& cm, const OutcomeDelta& delta);

// Exact probability that sample_replacement(alpha) returns beta, including
// the singleton-retry renormalisation. Sums to 1 over all valid beta.
double replacement_probability(const CountMatrix& cm, const ClusterModel& clusters,
                               const Vocab& vocab, TokenId alpha, TokenId beta);

// Text format: header "n gamma", then n rows of n signed integers.
void save_count_matrix(const CountMatrix& cm, const std::string& path);
CountMatrix load_count_matrix(const std::string& path);

}  // namespace pretrain
