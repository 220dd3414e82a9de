#include "pretrain/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "pretrain/rng.hpp"
#include "pretrain/util.hpp"

namespace pretrain {

namespace {

double dist2(const double* a, const double* b, std::int32_t dim) {
    double acc = 0.0;
    for (std::int32_t d = 0; d < dim; ++d) {
        const double diff = a[d] - b[d];
        acc += diff * diff;
    }
    return acc;
}

}  // namespace

std::int32_t ClusterModel::cluster_of(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= assignment.size())
        throw std::out_of_range("cluster_of: token id out of range");
    const std::int32_t c = assignment[static_cast<std::size_t>(id)];
    if (c == kNoCluster) throw std::invalid_argument("cluster_of: specials are unclustered");
    return c;
}

ClusterModel kmeans(const EmbeddingTable& table, const Vocab& vocab, std::int32_t n,
                    std::int32_t max_iter, std::uint64_t seed) {
    if (max_iter < 1) throw std::invalid_argument("kmeans: max_iter must be >= 1");
    const std::int32_t dim = table.dim;

    std::vector<TokenId> points;  // vocab ids in id order
    for (TokenId id = vocab.num_specials(); id < vocab.size(); ++id) points.push_back(id);
    const auto num_points = static_cast<std::int32_t>(points.size());
    if (n < 1 || n > num_points)
        throw std::invalid_argument("kmeans: n must be in [1, number of non-special tokens]");

    const auto point = [&](std::int32_t p) { return table.row(points[static_cast<std::size_t>(p)]).data(); };

    // k-means++ seeding: first centroid uniform, the rest D^2-weighted.
    Rng rng = derive_rng(seed, "kmeans.init");
    std::vector<double> centroids(static_cast<std::size_t>(n) * static_cast<std::size_t>(dim));
    const auto centroid = [&](std::int32_t c) { return centroids.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(dim); };
    const auto set_centroid = [&](std::int32_t c, const double* src) {
        std::copy(src, src + dim, centroid(c));
    };

    set_centroid(0, point(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(num_points)))));
    std::vector<double> best_d2(static_cast<std::size_t>(num_points),
                                std::numeric_limits<double>::infinity());
    for (std::int32_t c = 1; c < n; ++c) {
        double total = 0.0;
        for (std::int32_t p = 0; p < num_points; ++p) {
            const double d = dist2(point(p), centroid(c - 1), dim);
            auto& best = best_d2[static_cast<std::size_t>(p)];
            if (d < best) best = d;
            total += best;
        }
        std::int32_t chosen = 0;
        if (total > 0.0) {
            const double target = rng.next_double() * total;
            double acc = 0.0;
            chosen = num_points - 1;
            for (std::int32_t p = 0; p < num_points; ++p) {
                acc += best_d2[static_cast<std::size_t>(p)];
                if (acc >= target) {
                    chosen = p;
                    break;
                }
            }
        } else {
            // All remaining points coincide with chosen centroids.
            chosen = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(num_points)));
        }
        set_centroid(c, point(chosen));
    }

    std::vector<std::int32_t> assign(static_cast<std::size_t>(num_points), -1);
    std::vector<std::int32_t> prev_assign;
    std::vector<double> sse_history;

    for (std::int32_t iter = 0; iter < max_iter; ++iter) {
        // Assignment step; strict less-than keeps the lower index on ties.
        for (std::int32_t p = 0; p < num_points; ++p) {
            double best = std::numeric_limits<double>::infinity();
            std::int32_t best_c = 0;
            for (std::int32_t c = 0; c < n; ++c) {
                const double d = dist2(point(p), centroid(c), dim);
                if (d < best) {
                    best = d;
                    best_c = c;
                }
            }
            assign[static_cast<std::size_t>(p)] = best_c;
        }

        // Repair empty clusters by re-seeding at the largest cluster's member
        // farthest from the empty cluster's current centroid.
        std::vector<std::int32_t> counts(static_cast<std::size_t>(n), 0);
        for (const auto a : assign) counts[static_cast<std::size_t>(a)] += 1;
        bool repaired = false;
        for (std::int32_t c = 0; c < n; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) continue;
            std::int32_t largest = 0;
            for (std::int32_t o = 1; o < n; ++o)
                if (counts[static_cast<std::size_t>(o)] > counts[static_cast<std::size_t>(largest)]) largest = o;
            std::int32_t moved = -1;
            double far = -1.0;
            for (std::int32_t p = 0; p < num_points; ++p) {
                if (assign[static_cast<std::size_t>(p)] != largest) continue;
                const double d = dist2(point(p), centroid(c), dim);
                if (d > far) {
                    far = d;
                    moved = p;
                }
            }
            set_centroid(c, point(moved));
            assign[static_cast<std::size_t>(moved)] = c;
            counts[static_cast<std::size_t>(largest)] -= 1;
            counts[static_cast<std::size_t>(c)] += 1;
            repaired = true;
        }

        double sse = 0.0;
        for (std::int32_t p = 0; p < num_points; ++p)
            sse += dist2(point(p), centroid(assign[static_cast<std::size_t>(p)]), dim);
        sse_history.push_back(sse);

        if (!repaired && assign == prev_assign) break;
        prev_assign = assign;

        // Update step: centroids become member means.
        std::fill(centroids.begin(), centroids.end(), 0.0);
        for (std::int32_t p = 0; p < num_points; ++p) {
            double* c = centroid(assign[static_cast<std::size_t>(p)]);
            const double* x = point(p);
            for (std::int32_t d = 0; d < dim; ++d) c[d] += x[d];
        }
        for (std::int32_t c = 0; c < n; ++c) {
            double* row = centroid(c);
            const double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            for (std::int32_t d = 0; d < dim; ++d) row[d] *= inv;
        }
    }

    // Leave centroids consistent with the final assignment (member means).
    {
        std::vector<std::int32_t> counts(static_cast<std::size_t>(n), 0);
        std::fill(centroids.begin(), centroids.end(), 0.0);
        for (std::int32_t p = 0; p < num_points; ++p) {
            counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(p)])] += 1;
            double* c = centroid(assign[static_cast<std::size_t>(p)]);
            const double* x = point(p);
            for (std::int32_t d = 0; d < dim; ++d) c[d] += x[d];
        }
        for (std::int32_t c = 0; c < n; ++c) {
            double* row = centroid(c);
            const double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            for (std::int32_t d = 0; d < dim; ++d) row[d] *= inv;
        }
    }

    ClusterModel model;
    model.n = n;
    model.dim = dim;
    model.centroids = std::move(centroids);
    model.assignment.assign(static_cast<std::size_t>(vocab.size()), kNoCluster);
    model.members.assign(static_cast<std::size_t>(n), {});
    for (std::int32_t p = 0; p < num_points; ++p) {
        const TokenId id = points[static_cast<std::size_t>(p)];
        const std::int32_t c = assign[static_cast<std::size_t>(p)];
        model.assignment[static_cast<std::size_t>(id)] = c;
        model.members[static_cast<std::size_t>(c)].push_back(id);
    }
    for (auto& m : model.members) std::sort(m.begin(), m.end());
    model.sse_history = std::move(sse_history);
    double final_sse = 0.0;
    for (std::int32_t p = 0; p < num_points; ++p)
        final_sse += dist2(point(p),
                           model.centroids.data() +
                               static_cast<std::size_t>(assign[static_cast<std::size_t>(p)]) *
                                   static_cast<std::size_t>(dim),
                           dim);
    model.sse = final_sse;
    return model;
}

void save_clusters(const ClusterModel& model, const std::string& path) {
    std::ostringstream out;
    out << model.n << ' ' << model.assignment.size() << '\n';
    for (std::size_t id = 0; id < model.assignment.size(); ++id)
        out << id << ' ' << model.assignment[id] << '\n';
    for (std::int32_t c = 0; c < model.n; ++c) {
        for (std::int32_t d = 0; d < model.dim; ++d) {
            if (d) out << ' ';
            out << format_double(
                model.centroids[static_cast<std::size_t>(c) * static_cast<std::size_t>(model.dim) +
                                static_cast<std::size_t>(d)]);
        }
        out << '\n';
    }
    write_file(path, out.str());
}

ClusterModel load_clusters(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open cluster file: " + path);
    ClusterModel model;
    std::size_t vocab_size = 0;
    if (!(in >> model.n >> vocab_size) || model.n <= 0)
        throw std::runtime_error("malformed cluster header: " + path);
    model.assignment.assign(vocab_size, kNoCluster);
    model.members.assign(static_cast<std::size_t>(model.n), {});
    for (std::size_t i = 0; i < vocab_size; ++i) {
        std::size_t id = 0;
        std::int32_t c = kNoCluster;
        if (!(in >> id >> c)) throw std::runtime_error("truncated cluster file: " + path);
        model.assignment[id] = c;
        if (c != kNoCluster) model.members[static_cast<std::size_t>(c)].push_back(static_cast<TokenId>(id));
    }
    for (auto& m : model.members) std::sort(m.begin(), m.end());
    std::vector<double> centroids;
    double v = 0.0;
    while (in >> v) centroids.push_back(v);
    if (!centroids.empty()) {
        if (centroids.size() % static_cast<std::size_t>(model.n) != 0)
            throw std::runtime_error("malformed centroid block: " + path);
        model.dim = static_cast<std::int32_t>(centroids.size() / static_cast<std::size_t>(model.n));
        model.centroids = std::move(centroids);
    }
    return model;
}

}  // namespace pretrain
