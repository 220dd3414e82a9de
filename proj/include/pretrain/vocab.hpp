#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pretrain {

using TokenId = std::int32_t;

// Word-level vocabulary. Ids are dense 0..V-1, the five special tokens occupy
// the lowest ids so "is this a special" is a single comparison. MASK is always
// present, even for objectives that never emit it, so every objective shares
// one vocabulary.
class Vocab {
public:
    static constexpr int kNumSpecials = 5;
    static constexpr std::array<std::string_view, kNumSpecials> kSpecialSurface = {
        "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

    Vocab() = default;

    TokenId pad_id() const { return 0; }
    TokenId unk_id() const { return 1; }
    TokenId cls_id() const { return 2; }
    TokenId sep_id() const { return 3; }
    TokenId mask_id() const { return 4; }

    std::int32_t size() const { return static_cast<std::int32_t>(tokens_.size()); }
    std::int32_t num_specials() const { return kNumSpecials; }
    std::int32_t num_regular() const { return size() - kNumSpecials; }

    bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecials; }

    const std::string& surface(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::int64_t freq(TokenId id) const { return freq_.at(static_cast<std::size_t>(id)); }

    // Returns -1 when the token is unknown.
    TokenId lookup(std::string_view token) const;

    const std::vector<std::string>& tokens() const { return tokens_; }

    // Build-time metadata, persisted alongside the vocab file.
    std::int64_t built_min_freq = 1;
    std::int64_t built_max_size = 0;
    std::uint64_t corpus_hash = 0;

    friend Vocab build_vocab(const std::vector<std::string>& lines, std::int64_t max_size,
                             std::int64_t min_freq);
    friend Vocab load_vocab(const std::string& path);

private:
    void push_token(std::string token, std::int64_t freq);

    std::vector<std::string> tokens_;
    std::vector<std::int64_t> freq_;
    std::unordered_map<std::string, TokenId> id_of_;
};

using TokenSequence = std::vector<TokenId>;

// Whitespace-split, lowercased word vocabulary. The most frequent words are
// kept (rarest dropped first, frequency ties broken lexicographically so the
// result is a pure function of the counts). Throws "empty corpus" when the
// stream holds no tokens at all.
Vocab build_vocab(const std::vector<std::string>& lines, std::int64_t max_size,
                  std::int64_t min_freq);
Vocab build_vocab(std::istream& stream, std::int64_t max_size, std::int64_t min_freq);

// OOV words map to UNK; no CLS/SEP framing here.
TokenSequence encode(const Vocab& vocab, std::string_view text);

// Inverse of encode up to OOV words, which come back as the UNK surface form.
std::string decode(const Vocab& vocab, const TokenSequence& seq);

// Plain text format: one token per line, line number = id, specials first.
// A sibling "<path>.meta" records min_freq / max_size / corpus hash.
void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

}  // namespace pretrain
