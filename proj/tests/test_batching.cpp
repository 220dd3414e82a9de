#include <doctest.h>

#include <map>
#include <set>

#include "pretrain/batching.hpp"
#include "pretrain/vocab.hpp"

using namespace pretrain;

namespace {

Vocab small_vocab() { return build_vocab({"t1 t2 t3 t4 t5 t6 t7 t8 t9 t10"}, 50, 1); }

}  // namespace

TEST_CASE("one short sequence packs into a single framed row") {
    const Vocab vocab = small_vocab();
    const TokenSequence seq = {5, 6, 7, 8};
    const auto batches = pack_batches({seq}, vocab, {8, 4, 1});
    REQUIRE(batches.size() == 1);
    const Batch& b = batches[0];
    REQUIRE(b.rows == 1);
    CHECK(b.lengths[0] == 6);
    CHECK(b.id_at(0, 0) == vocab.cls_id());
    CHECK(b.id_at(0, 1) == 5);
    CHECK(b.id_at(0, 4) == 8);
    CHECK(b.id_at(0, 5) == vocab.sep_id());
    CHECK(b.id_at(0, 6) == vocab.pad_id());
    CHECK(b.id_at(0, 7) == vocab.pad_id());
    for (std::int32_t c = 0; c < 6; ++c) CHECK(b.attends(0, c));
    CHECK_FALSE(b.attends(0, 6));
    CHECK_FALSE(b.attends(0, 7));
}

TEST_CASE("long sequences split instead of truncating") {
    const Vocab vocab = small_vocab();
    TokenSequence seq;
    for (int i = 0; i < 10; ++i) seq.push_back(static_cast<TokenId>(5 + (i % 5)));
    const auto batches = pack_batches({seq}, vocab, {8, 4, 1});
    REQUIRE(batches.size() == 1);
    const Batch& b = batches[0];
    REQUIRE(b.rows == 2);
    // 6 + 4 payload tokens across the two rows, in some shuffled row order.
    std::multiset<std::int32_t> lengths = {b.lengths[0], b.lengths[1]};
    CHECK(lengths == std::multiset<std::int32_t>{8, 6});
}

TEST_CASE("packing conserves non-special tokens") {
    const Vocab vocab = small_vocab();
    std::vector<TokenSequence> seqs;
    std::map<TokenId, int> idcount;
    std::size_t total = 0;
    for (int s = 0; s < 23; ++s) {
        TokenSequence seq;
        for (int i = 0; i <= s % 17; ++i) {
            const TokenId id = static_cast<TokenId>(5 + ((s + i) % 10));
            seq.push_back(id);
            idcount[id] += 1;
        }
        total += seq.size();
        seqs.push_back(seq);
    }
    const auto batches = pack_batches(seqs, vocab, {8, 4, 99});
    std::map<TokenId, int> packed;
    std::size_t packed_total = 0;
    for (const auto& b : batches)
        for (std::int32_t r = 0; r < b.rows; ++r)
            for (std::int32_t c = 0; c < b.max_len; ++c) {
                const TokenId id = b.id_at(r, c);
                if (id >= vocab.num_specials()) {
                    packed[id] += 1;
                    packed_total += 1;
                }
            }
    CHECK(packed_total == total);
    CHECK(packed == idcount);
}

TEST_CASE("attention mask is consistent with lengths and PAD") {
    const Vocab vocab = small_vocab();
    const auto batches = pack_batches({{5, 6}, {7, 8, 9, 10, 11}}, vocab, {6, 8, 3});
    for (const auto& b : batches)
        for (std::int32_t r = 0; r < b.rows; ++r)
            for (std::int32_t c = 0; c < b.max_len; ++c) {
                const bool real = c < b.lengths[r];
                CHECK(b.attends(r, c) == real);
                if (!real) CHECK(b.id_at(r, c) == vocab.pad_id());
            }
}

TEST_CASE("identical stream and seed give bit-identical batches") {
    const Vocab vocab = small_vocab();
    std::vector<TokenSequence> seqs;
    for (int s = 0; s < 40; ++s) seqs.push_back({static_cast<TokenId>(5 + s % 10), 6, 7});
    const auto a = pack_batches(seqs, vocab, {8, 4, 1234});
    const auto b = pack_batches(seqs, vocab, {8, 4, 1234});
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].ids == b[i].ids);
        CHECK(a[i].attention == b[i].attention);
        CHECK(a[i].lengths == b[i].lengths);
    }
    // A different seed shuffles rows differently.
    const auto c = pack_batches(seqs, vocab, {8, 4, 4321});
    bool any_difference = false;
    for (std::size_t i = 0; i < a.size() && !any_difference; ++i)
        any_difference = a[i].ids != c[i].ids;
    CHECK(any_difference);
}

TEST_CASE("configuration errors") {
    const Vocab vocab = small_vocab();
    CHECK_THROWS(pack_batches({{5}}, vocab, {2, 4, 1}));  // max_len < 3
    CHECK_THROWS(pack_batches({{5}}, vocab, {8, 0, 1}));  // batch_size = 0
}
