#include "pretrain/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pretrain/rng.hpp"
#include "pretrain/util.hpp"

namespace pretrain {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

EmbeddingTable seeded_init(std::int32_t vocab_size, std::int32_t dim, std::uint64_t seed) {
    EmbeddingTable table;
    table.vocab_size = vocab_size;
    table.dim = dim;
    table.data.resize(static_cast<std::size_t>(vocab_size) * static_cast<std::size_t>(dim));
    Rng rng = derive_rng(seed, "sgns.init");
    const double scale = 0.5 / static_cast<double>(dim);
    for (auto& v : table.data) v = (rng.next_double() * 2.0 - 1.0) * scale;
    return table;
}

}  // namespace

EmbeddingTable train_sgns(const std::vector<TokenSequence>& corpus, const Vocab& vocab,
                          const SgnsConfig& config, std::vector<double>* loss_trace) {
    if (config.dim < 2) throw std::invalid_argument("train_sgns: dim must be >= 2");
    if (config.window < 1) throw std::invalid_argument("train_sgns: window must be >= 1");
    if (config.negatives < 1) throw std::invalid_argument("train_sgns: negatives must be >= 1");

    std::int64_t total_tokens = 0;
    for (const auto& seq : corpus) total_tokens += static_cast<std::int64_t>(seq.size());
    if (total_tokens <= config.window)
        throw std::runtime_error("train_sgns: corpus shorter than window");

    const std::int32_t dim = config.dim;
    EmbeddingTable center = seeded_init(vocab.size(), dim, config.seed);
    if (config.epochs <= 0) return center;

    // Context table starts at zero, word2vec style.
    std::vector<double> context(center.data.size(), 0.0);

    // Negative sampling CDF over unigram^0.75, non-special ids only.
    std::vector<double> neg_cdf(static_cast<std::size_t>(vocab.size()), 0.0);
    double total_weight = 0.0;
    for (TokenId id = vocab.num_specials(); id < vocab.size(); ++id) {
        total_weight += std::pow(static_cast<double>(vocab.freq(id)), 0.75);
        neg_cdf[static_cast<std::size_t>(id)] = total_weight;
    }
    if (total_weight <= 0.0) throw std::runtime_error("train_sgns: vocabulary has no counted tokens");
    for (auto& v : neg_cdf) v /= total_weight;

    Rng rng = derive_rng(config.seed, "sgns.train");
    const auto draw_negative = [&]() {
        const double u = rng.next_double();
        const auto it = std::lower_bound(neg_cdf.begin(), neg_cdf.end(), u);
        auto idx = static_cast<std::size_t>(it - neg_cdf.begin());
        if (idx >= neg_cdf.size()) idx = neg_cdf.size() - 1;
        return static_cast<TokenId>(idx);
    };

    const double lr_floor = config.lr * 1e-4;
    const std::int64_t planned = total_tokens * config.epochs;
    std::int64_t processed = 0;

    std::vector<double> center_delta(static_cast<std::size_t>(dim));
    double window_loss = 0.0;
    std::int64_t window_updates = 0;

    for (std::int32_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (const auto& seq : corpus) {
            const auto len = static_cast<std::int64_t>(seq.size());
            for (std::int64_t pos = 0; pos < len; ++pos, ++processed) {
                const TokenId center_id = seq[static_cast<std::size_t>(pos)];
                if (vocab.is_special(center_id)) continue;

                const double progress =
                    static_cast<double>(processed) / static_cast<double>(planned + 1);
                const double lr = std::max(lr_floor, config.lr * (1.0 - progress));

                // Reduced window, as in the reference word2vec implementation.
                const std::int64_t reach =
                    1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(config.window)));
                for (std::int64_t off = -reach; off <= reach; ++off) {
                    if (off == 0) continue;
                    const std::int64_t cpos = pos + off;
                    if (cpos < 0 || cpos >= len) continue;
                    const TokenId context_id = seq[static_cast<std::size_t>(cpos)];
                    if (vocab.is_special(context_id)) continue;

                    auto v = center.row(center_id);
                    std::fill(center_delta.begin(), center_delta.end(), 0.0);
                    double pair_loss = 0.0;

                    for (std::int32_t k = 0; k <= config.negatives; ++k) {
                        TokenId target;
                        double label;
                        if (k == 0) {
                            target = context_id;
                            label = 1.0;
                        } else {
                            target = draw_negative();
                            if (target == context_id) continue;
                            label = 0.0;
                        }
                        double* u = context.data() +
                                    static_cast<std::size_t>(target) * static_cast<std::size_t>(dim);
                        double dot = 0.0;
                        for (std::int32_t d = 0; d < dim; ++d) dot += u[d] * v[static_cast<std::size_t>(d)];
                        const double pred = sigmoid(dot);
                        const double grad = (pred - label) * lr;
                        pair_loss += label > 0.5 ? -std::log(std::max(pred, 1e-12))
                                                 : -std::log(std::max(1.0 - pred, 1e-12));
                        for (std::int32_t d = 0; d < dim; ++d) {
                            center_delta[static_cast<std::size_t>(d)] += grad * u[d];
                            u[d] -= grad * v[static_cast<std::size_t>(d)];
                        }
                    }
                    for (std::int32_t d = 0; d < dim; ++d)
                        v[static_cast<std::size_t>(d)] -= center_delta[static_cast<std::size_t>(d)];

                    window_loss += pair_loss;
                    if (++window_updates == config.loss_window) {
                        if (loss_trace)
                            loss_trace->push_back(window_loss / static_cast<double>(window_updates));
                        window_loss = 0.0;
                        window_updates = 0;
                    }
                }
            }
        }
    }
    center.trained_epochs = config.epochs;
    return center;
}

std::vector<std::pair<TokenId, double>> nearest(const EmbeddingTable& table, TokenId token_id,
                                                std::int32_t k) {
    if (token_id < 0 || token_id >= table.vocab_size)
        throw std::out_of_range("nearest: token id out of range");
    if (k >= table.vocab_size)
        throw std::invalid_argument("nearest: k must be < vocab size");

    const auto ref = table.row(token_id);
    std::vector<std::pair<TokenId, double>> all;
    all.reserve(static_cast<std::size_t>(table.vocab_size) - 1);
    for (TokenId id = 0; id < table.vocab_size; ++id) {
        if (id == token_id) continue;
        const auto row = table.row(id);
        double dist2 = 0.0;
        for (std::int32_t d = 0; d < table.dim; ++d) {
            const double diff = row[static_cast<std::size_t>(d)] - ref[static_cast<std::size_t>(d)];
            dist2 += diff * diff;
        }
        all.emplace_back(id, std::sqrt(dist2));
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second < b.second;
        return a.first < b.first;
    });
    all.resize(static_cast<std::size_t>(k));
    return all;
}

void save_embeddings(const EmbeddingTable& table, const std::string& path) {
    std::ostringstream out;
    out << table.vocab_size << ' ' << table.dim << '\n';
    for (TokenId id = 0; id < table.vocab_size; ++id) {
        const auto row = table.row(id);
        for (std::int32_t d = 0; d < table.dim; ++d) {
            if (d) out << ' ';
            out << format_double(row[static_cast<std::size_t>(d)]);
        }
        out << '\n';
    }
    write_file(path, out.str());
}

EmbeddingTable load_embeddings(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open embeddings: " + path);
    EmbeddingTable table;
    if (!(in >> table.vocab_size >> table.dim) || table.vocab_size <= 0 || table.dim <= 0)
        throw std::runtime_error("malformed embedding header: " + path);
    table.data.resize(static_cast<std::size_t>(table.vocab_size) *
                      static_cast<std::size_t>(table.dim));
    for (auto& v : table.data)
        if (!(in >> v)) throw std::runtime_error("truncated embedding file: " + path);
    return table;
}

}  // namespace pretrain
