#include "pretrain/crts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pretrain/util.hpp"

namespace pretrain {

namespace {

void check_row(const CountMatrix& cm, std::int32_t i) {
    if (i < 0 || i >= cm.n) throw std::out_of_range("count matrix row out of range");
}

// Uniform member of members[j] excluding alpha; caller guarantees a valid
// choice exists.
TokenId draw_member(const std::vector<TokenId>& members, TokenId alpha, Rng& rng) {
    const auto it = std::lower_bound(members.begin(), members.end(), alpha);
    const bool contains_alpha = it != members.end() && *it == alpha;
    if (!contains_alpha)
        return members[rng.index(members.size())];
    const auto alpha_pos = static_cast<std::size_t>(it - members.begin());
    std::size_t pick = rng.index(members.size() - 1);
    if (pick >= alpha_pos) ++pick;
    return members[pick];
}

TokenId draw_uniform_nonspecial(const Vocab& vocab, TokenId alpha, Rng& rng) {
    const auto candidates = static_cast<std::uint64_t>(vocab.num_regular() - 1);
    TokenId id = static_cast<TokenId>(vocab.num_specials() + static_cast<TokenId>(rng.below(candidates)));
    if (id >= alpha) ++id;
    return id;
}

}  // namespace

std::vector<double> row_distribution(const CountMatrix& cm, std::int32_t i) {
    check_row(cm, i);
    const std::int64_t* row = cm.counts.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(cm.n);
    std::int64_t lo = row[0], hi = row[0];
    for (std::int32_t j = 1; j < cm.n; ++j) {
        lo = std::min(lo, row[j]);
        hi = std::max(hi, row[j]);
    }

    std::vector<double> p(static_cast<std::size_t>(cm.n));
    if (hi == lo) {
        std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(cm.n));
        return p;
    }
    const double span = static_cast<double>(hi - lo);
    double total = 0.0;
    for (std::int32_t j = 0; j < cm.n; ++j) {
        const double normalized = static_cast<double>(row[j] - lo) / span;
        const double e = std::exp(cm.gamma * normalized);
        p[static_cast<std::size_t>(j)] = e;
        total += e;
    }
    for (auto& v : p) v /= total;
    return p;
}

TokenId sample_replacement(const CountMatrix& cm, const ClusterModel& clusters,
                           const Vocab& vocab, TokenId alpha, Rng& rng) {
    if (vocab.is_special(alpha))
        throw std::invalid_argument("sample_replacement: alpha must not be special");
    if (vocab.num_regular() < 2)
        throw std::invalid_argument("sample_replacement: need at least two non-special tokens");

    const std::int32_t source = clusters.cluster_of(alpha);
    const std::vector<double> p = row_distribution(cm, source);

    for (int attempt = 0; attempt < kSingletonRetries; ++attempt) {
        const double u = rng.next_double();
        double acc = 0.0;
        std::int32_t target = cm.n - 1;
        for (std::int32_t j = 0; j < cm.n; ++j) {
            acc += p[static_cast<std::size_t>(j)];
            if (u < acc) {
                target = j;
                break;
            }
        }
        const auto& members = clusters.members[static_cast<std::size_t>(target)];
        const bool only_alpha = members.size() == 1 && members[0] == alpha;
        if (!only_alpha) return draw_member(members, alpha, rng);
    }
    return draw_uniform_nonspecial(vocab, alpha, rng);
}

void update_counts(CountMatrix& cm, const OutcomeDelta& delta) {
    for (const auto& [key, value] : delta.cells) {
        check_row(cm, key.first);
        check_row(cm, key.second);
        cm.at(key.first, key.second) += value;
    }
}

double replacement_probability(const CountMatrix& cm, const ClusterModel& clusters,
                               const Vocab& vocab, TokenId alpha, TokenId beta) {
    if (vocab.is_special(alpha) || vocab.is_special(beta))
        throw std::invalid_argument("replacement_probability: tokens must not be special");
    if (alpha == beta) throw std::invalid_argument("replacement_probability: beta must differ from alpha");

    const std::int32_t source = clusters.cluster_of(alpha);
    const std::int32_t target = clusters.cluster_of(beta);
    const std::vector<double> p = row_distribution(cm, source);

    // Mass of the one unusable cluster draw: alpha's own cluster when it is a
    // singleton. Every other cluster always offers a valid beta.
    const auto& source_members = clusters.members[static_cast<std::size_t>(source)];
    const bool source_singleton = source_members.size() == 1 && source_members[0] == alpha;
    const double q = source_singleton ? p[static_cast<std::size_t>(source)] : 0.0;

    double retry_mass = 0.0;  // sum_{t=0}^{retries-1} q^t
    double qt = 1.0;
    for (int t = 0; t < kSingletonRetries; ++t) {
        retry_mass += qt;
        qt *= q;
    }
    const double fallback_mass = qt;  // q^retries

    const auto& target_members = clusters.members[static_cast<std::size_t>(target)];
    const bool target_has_alpha =
        std::binary_search(target_members.begin(), target_members.end(), alpha);
    const auto choices = static_cast<double>(target_members.size() - (target_has_alpha ? 1 : 0));

    double prob = retry_mass * p[static_cast<std::size_t>(target)] / choices;
    prob += fallback_mass / static_cast<double>(vocab.num_regular() - 1);
    return prob;
}

void save_count_matrix(const CountMatrix& cm, const std::string& path) {
    std::ostringstream out;
    out << cm.n << ' ' << format_double(cm.gamma) << '\n';
    for (std::int32_t i = 0; i < cm.n; ++i) {
        for (std::int32_t j = 0; j < cm.n; ++j) {
            if (j) out << ' ';
            out << cm.at(i, j);
        }
        out << '\n';
    }
    write_file(path, out.str());
}

CountMatrix load_count_matrix(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open count matrix: " + path);
    std::int32_t n = 0;
    double gamma = 0.0;
    if (!(in >> n >> gamma) || n <= 0) throw std::runtime_error("malformed count matrix header: " + path);
    CountMatrix cm(n, gamma);
    for (auto& v : cm.counts)
        if (!(in >> v)) throw std::runtime_error("truncated count matrix: " + path);
    return cm;
}

}  // namespace pretrain
