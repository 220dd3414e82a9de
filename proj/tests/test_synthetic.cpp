#include <doctest.h>

#include <map>

#include "pretrain/synthetic.hpp"
#include "pretrain/util.hpp"

using namespace pretrain;

TEST_CASE("gen_corpus is deterministic and respects the length range") {
    SynthConfig cfg;
    cfg.sentences = 200;
    cfg.seed = 9;
    const auto a = gen_corpus(cfg);
    const auto b = gen_corpus(cfg);
    CHECK(a == b);
    REQUIRE(a.size() == 200);
    for (const auto& line : a) {
        const auto words = tokenize(line);
        CHECK(words.size() >= static_cast<std::size_t>(cfg.min_words));
        CHECK(words.size() <= static_cast<std::size_t>(cfg.max_words));
    }
    cfg.seed = 10;
    CHECK(gen_corpus(cfg) != a);
}

TEST_CASE("sentences stay within one topic block") {
    SynthConfig cfg;
    cfg.vocab_words = 90;
    cfg.topics = 3;
    cfg.sentences = 120;
    cfg.seed = 4;
    const auto lines = gen_corpus(cfg);
    for (const auto& line : lines) {
        const auto words = tokenize(line);
        REQUIRE(!words.empty());
        const std::int32_t first_index = std::stoi(words[0].substr(1));
        const std::int32_t topic = topic_of_word(cfg, first_index);
        for (const auto& word : words) {
            const std::int32_t index = std::stoi(word.substr(1));
            CHECK(topic_of_word(cfg, index) == topic);
        }
    }
}

TEST_CASE("frequent words dominate (zipf-shaped marginals)") {
    SynthConfig cfg;
    cfg.vocab_words = 100;
    cfg.topics = 1;
    cfg.sentences = 800;
    cfg.seed = 21;
    const auto lines = gen_corpus(cfg);
    std::map<std::string, int> counts;
    int total = 0;
    for (const auto& line : lines)
        for (const auto& word : tokenize(line)) {
            counts[word] += 1;
            total += 1;
        }
    // The head of the inventory should hold far more mass than the tail.
    int head = 0, tail = 0;
    for (const auto& [word, count] : counts) {
        const int index = std::stoi(word.substr(1));
        if (index < 10) head += count;
        if (index >= 90) tail += count;
    }
    CHECK(head > 5 * std::max(tail, 1));
    CHECK(total > 0);
}

TEST_CASE("markov contexts reuse a small candidate set") {
    SynthConfig cfg;
    cfg.vocab_words = 60;
    cfg.topics = 1;
    cfg.sentences = 1500;
    cfg.seed = 33;
    const auto lines = gen_corpus(cfg);
    // Count distinct successors per (w2, w1) context; with candidate lists of
    // size 6 plus a small unigram leak, typical contexts should be far below
    // the unconstrained 60.
    std::map<std::pair<std::string, std::string>, std::map<std::string, int>> successors;
    for (const auto& line : lines) {
        const auto words = tokenize(line);
        for (std::size_t i = 2; i < words.size(); ++i)
            successors[{words[i - 2], words[i - 1]}][words[i]] += 1;
    }
    std::int64_t contexts = 0, bounded = 0;
    for (const auto& [ctx, nexts] : successors) {
        std::int64_t mass = 0, top_mass = 0;
        for (const auto& [w, c] : nexts) mass += c;
        if (mass < 20) continue;  // only well-sampled contexts
        contexts += 1;
        std::vector<int> freqs;
        for (const auto& [w, c] : nexts) freqs.push_back(c);
        std::sort(freqs.rbegin(), freqs.rend());
        for (std::size_t k = 0; k < std::min<std::size_t>(6, freqs.size()); ++k)
            top_mass += freqs[k];
        if (top_mass * 10 >= mass * 8) bounded += 1;  // top-6 carries >= 80%
    }
    REQUIRE(contexts > 10);
    CHECK(bounded * 10 >= contexts * 9);  // in at least 90% of contexts
}
