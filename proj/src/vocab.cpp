#include "pretrain/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pretrain/util.hpp"

namespace pretrain {

TokenId Vocab::lookup(std::string_view token) const {
    auto it = id_of_.find(std::string(token));
    return it == id_of_.end() ? TokenId{-1} : it->second;
}

void Vocab::push_token(std::string token, std::int64_t freq) {
    const TokenId id = static_cast<TokenId>(tokens_.size());
    id_of_.emplace(token, id);
    tokens_.push_back(std::move(token));
    freq_.push_back(freq);
}

Vocab build_vocab(const std::vector<std::string>& lines, std::int64_t max_size,
                  std::int64_t min_freq) {
    if (max_size <= Vocab::kNumSpecials)
        throw std::invalid_argument("max_size must exceed the number of special tokens");
    if (min_freq < 1) throw std::invalid_argument("min_freq must be >= 1");

    std::unordered_map<std::string, std::int64_t> counts;
    std::uint64_t hash = 0xcbf29ce484222325ull;
    for (const auto& line : lines) {
        for (auto& word : tokenize(line)) counts[word] += 1;
        hash = fnv1a(line) ^ (hash * 0x100000001b3ull);
    }
    if (counts.empty()) throw std::runtime_error("empty corpus");

    std::vector<std::pair<std::string, std::int64_t>> ranked;
    ranked.reserve(counts.size());
    for (auto& kv : counts)
        if (kv.second >= min_freq) ranked.emplace_back(kv.first, kv.second);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    const std::size_t keep =
        std::min(ranked.size(), static_cast<std::size_t>(max_size - Vocab::kNumSpecials));

    Vocab vocab;
    for (auto surface : Vocab::kSpecialSurface) vocab.push_token(std::string(surface), 0);
    for (std::size_t i = 0; i < keep; ++i)
        vocab.push_token(std::move(ranked[i].first), ranked[i].second);
    vocab.built_min_freq = min_freq;
    vocab.built_max_size = max_size;
    vocab.corpus_hash = hash;
    return vocab;
}

Vocab build_vocab(std::istream& stream, std::int64_t max_size, std::int64_t min_freq) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(stream, line)) lines.push_back(line);
    return build_vocab(lines, max_size, min_freq);
}

TokenSequence encode(const Vocab& vocab, std::string_view text) {
    TokenSequence ids;
    for (const auto& word : tokenize(text)) {
        const TokenId id = vocab.lookup(word);
        ids.push_back(id < 0 ? vocab.unk_id() : id);
    }
    return ids;
}

std::string decode(const Vocab& vocab, const TokenSequence& seq) {
    std::string out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i) out.push_back(' ');
        out += vocab.surface(seq[i]);
    }
    return out;
}

void save_vocab(const Vocab& vocab, const std::string& path) {
    std::ostringstream body;
    for (TokenId id = 0; id < vocab.size(); ++id)
        body << vocab.surface(id) << '\n';
    write_file(path, body.str());

    std::ostringstream meta;
    meta << "min_freq=" << vocab.built_min_freq << '\n'
         << "max_size=" << vocab.built_max_size << '\n'
         << "corpus_hash=" << to_hex(vocab.corpus_hash) << '\n';
    for (TokenId id = Vocab::kNumSpecials; id < vocab.size(); ++id)
        meta << "freq." << vocab.surface(id) << '=' << vocab.freq(id) << '\n';
    write_file(path + ".meta", meta.str());
}

Vocab load_vocab(const std::string& path) {
    const auto lines = read_lines(path);
    if (lines.size() < Vocab::kNumSpecials)
        throw std::runtime_error("vocab file too small: " + path);
    for (int i = 0; i < Vocab::kNumSpecials; ++i)
        if (lines[static_cast<std::size_t>(i)] != Vocab::kSpecialSurface[static_cast<std::size_t>(i)])
            throw std::runtime_error("vocab file missing special tokens: " + path);

    std::unordered_map<std::string, std::int64_t> freqs;
    Vocab vocab;
    if (file_exists(path + ".meta")) {
        for (const auto& line : read_lines(path + ".meta")) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(0, eq);
            const std::string value = line.substr(eq + 1);
            if (key == "min_freq") vocab.built_min_freq = std::stoll(value);
            else if (key == "max_size") vocab.built_max_size = std::stoll(value);
            else if (key == "corpus_hash") vocab.corpus_hash = std::stoull(value, nullptr, 16);
            else if (key.rfind("freq.", 0) == 0) freqs[key.substr(5)] = std::stoll(value);
        }
    }
    for (const auto& token : lines) {
        if (token.empty()) continue;
        auto it = freqs.find(token);
        vocab.push_token(token, it == freqs.end() ? 0 : it->second);
    }
    return vocab;
}

}  // namespace pretrain
