#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pretrain/embedding.hpp"
#include "pretrain/vocab.hpp"

namespace pretrain {

constexpr std::int32_t kNoCluster = -1;

// Vocabulary partition over embedding space. Specials are unclustered
// (assignment kNoCluster) and never candidates for replacement.
struct ClusterModel {
    std::int32_t n = 0;
    std::int32_t dim = 0;
    std::vector<std::int32_t> assignment;        // vocab id -> cluster, kNoCluster for specials
    std::vector<std::vector<TokenId>> members;   // cluster -> sorted member ids
    std::vector<double> centroids;               // n * dim
    double sse = 0.0;
    std::vector<double> sse_history;             // per-iteration assignment-time SSE

    // Throws for special tokens, which have no cluster.
    std::int32_t cluster_of(TokenId id) const;
};

// k-means++ seeding then Lloyd iterations until assignments are stable or
// max_iter. Distance ties go to the lower cluster index. A cluster that
// empties is repaired by re-seeding its centroid at the member of the largest
// cluster farthest from the empty cluster's centroid, so |C_j| >= 1 always.
ClusterModel kmeans(const EmbeddingTable& table, const Vocab& vocab, std::int32_t n,
                    std::int32_t max_iter, std::uint64_t seed);

// Text format: header "n V", V lines "token_id cluster", then n centroid rows.
void save_clusters(const ClusterModel& model, const std::string& path);
ClusterModel load_clusters(const std::string& path);

}  // namespace pretrain
