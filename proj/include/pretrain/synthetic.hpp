#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pretrain {

// Seeded synthetic text: a Zipf-distributed word inventory partitioned into
// topics, emitted through a second-order Markov chain. Each (previous two
// words, topic) context has a small fixed candidate set for the next word, so
// the text has strong local structure: random token substitutions are
// detectable in principle, and words within a topic co-occur.
struct SynthConfig {
    std::int32_t vocab_words = 300;
    std::int32_t topics = 3;
    std::int32_t sentences = 9000;
    std::int32_t min_words = 4;
    std::int32_t max_words = 22;
    double zipf_exponent = 1.05;
    std::int32_t markov_candidates = 6;
    double markov_prob = 0.92;
    std::uint64_t seed = 1;
};

std::vector<std::string> gen_corpus(const SynthConfig& config);

// Topic of a word index, by construction (contiguous blocks). Word indices
// refer to the generator's inventory, not vocabulary ids.
std::int32_t topic_of_word(const SynthConfig& config, std::int32_t word_index);

// Surface form of a generator word index ("w000", "w001", ...).
std::string word_surface(std::int32_t word_index);

}  // namespace pretrain
