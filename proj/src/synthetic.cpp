#include "pretrain/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "pretrain/rng.hpp"

namespace pretrain {

namespace {

// Cumulative Zipf weights over ranks 0..n-1; sample by inverse CDF.
std::vector<double> zipf_cdf(std::int32_t n, double s) {
    std::vector<double> cdf(static_cast<std::size_t>(n));
    double total = 0.0;
    for (std::int32_t r = 0; r < n; ++r) {
        total += 1.0 / std::pow(static_cast<double>(r + 1), s);
        cdf[static_cast<std::size_t>(r)] = total;
    }
    for (auto& v : cdf) v /= total;
    return cdf;
}

std::int32_t sample_cdf(const std::vector<double>& cdf, Rng& rng) {
    const double u = rng.next_double();
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    const auto idx = static_cast<std::size_t>(it - cdf.begin());
    return static_cast<std::int32_t>(std::min(idx, cdf.size() - 1));
}

}  // namespace

std::int32_t topic_of_word(const SynthConfig& config, std::int32_t word_index) {
    const std::int32_t block =
        (config.vocab_words + config.topics - 1) / config.topics;
    return word_index / block;
}

std::string word_surface(std::int32_t word_index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "w%03d", word_index);
    return std::string(buf);
}

std::vector<std::string> gen_corpus(const SynthConfig& config) {
    if (config.vocab_words < config.topics || config.topics < 1)
        throw std::invalid_argument("gen_corpus: need at least one word per topic");
    if (config.min_words < 3 || config.max_words < config.min_words)
        throw std::invalid_argument("gen_corpus: bad sentence length range");

    // Per-topic word lists, Zipf-weighted within each topic so every topic has
    // its own frequent core and rare tail.
    std::vector<std::vector<std::int32_t>> topic_words(static_cast<std::size_t>(config.topics));
    for (std::int32_t w = 0; w < config.vocab_words; ++w)
        topic_words[static_cast<std::size_t>(topic_of_word(config, w))].push_back(w);
    std::vector<std::vector<double>> topic_cdf;
    topic_cdf.reserve(topic_words.size());
    for (const auto& words : topic_words)
        topic_cdf.push_back(zipf_cdf(static_cast<std::int32_t>(words.size()), config.zipf_exponent));

    // Candidate-list weights for the Markov step, heaviest first.
    std::vector<double> cand_cdf(static_cast<std::size_t>(config.markov_candidates));
    {
        double total = 0.0;
        for (std::int32_t k = 0; k < config.markov_candidates; ++k) {
            total += 1.0 / std::pow(2.0, static_cast<double>(k) * 0.8);
            cand_cdf[static_cast<std::size_t>(k)] = total;
        }
        for (auto& v : cand_cdf) v /= total;
    }

    const auto draw_topic_word = [&](std::int32_t topic, Rng& rng) {
        const auto t = static_cast<std::size_t>(topic);
        return topic_words[t][static_cast<std::size_t>(sample_cdf(topic_cdf[t], rng))];
    };

    // The candidate set for a (w2, w1, topic) context is a pure function of
    // the corpus seed, so the same context always offers the same next words.
    const auto markov_next = [&](std::int32_t w2, std::int32_t w1, std::int32_t topic, Rng& rng) {
        Rng ctx = derive_rng(config.seed, "synth.markov",
                             hash_combine(static_cast<std::uint64_t>(w2),
                                          static_cast<std::uint64_t>(w1)),
                             static_cast<std::uint64_t>(topic));
        const std::int32_t pick = sample_cdf(cand_cdf, rng);
        std::int32_t candidate = 0;
        for (std::int32_t k = 0; k <= pick; ++k) candidate = draw_topic_word(topic, ctx);
        return candidate;
    };

    Rng rng = derive_rng(config.seed, "synth.sentences");
    std::vector<std::string> lines;
    lines.reserve(static_cast<std::size_t>(config.sentences));
    for (std::int32_t s = 0; s < config.sentences; ++s) {
        const std::int32_t topic = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(config.topics)));
        const std::int32_t span = config.max_words - config.min_words + 1;
        const std::int32_t length =
            config.min_words + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(span)));

        std::vector<std::int32_t> words;
        words.reserve(static_cast<std::size_t>(length));
        words.push_back(draw_topic_word(topic, rng));
        words.push_back(markov_next(words[0], words[0], topic, rng));
        while (static_cast<std::int32_t>(words.size()) < length) {
            const std::int32_t w1 = words[words.size() - 1];
            const std::int32_t w2 = words[words.size() - 2];
            if (rng.next_double() < config.markov_prob)
                words.push_back(markov_next(w2, w1, topic, rng));
            else
                words.push_back(draw_topic_word(topic, rng));
        }

        std::string line;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i) line.push_back(' ');
            line += word_surface(words[i]);
        }
        lines.push_back(std::move(line));
    }
    return lines;
}

}  // namespace pretrain
