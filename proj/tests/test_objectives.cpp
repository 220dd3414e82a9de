#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "pretrain/batching.hpp"
#include "pretrain/model.hpp"
#include "pretrain/objectives.hpp"
#include "pretrain/rng.hpp"
#include "pretrain/synthetic.hpp"
#include "pretrain/vocab.hpp"
#include "support/stats.hpp"

using namespace pretrain;

namespace {

struct World {
    Vocab vocab;
    std::vector<Batch> batches;
};

World make_world(int sentences = 60, std::int32_t max_len = 16, std::int32_t batch_size = 4,
                 std::uint64_t seed = 3) {
    SynthConfig synth;
    synth.vocab_words = 40;
    synth.topics = 2;
    synth.sentences = sentences;
    synth.min_words = 4;
    synth.max_words = 12;
    synth.seed = seed;
    const auto lines = gen_corpus(synth);
    World w{build_vocab(lines, 60, 1), {}};
    std::vector<TokenSequence> seqs;
    for (const auto& line : lines) seqs.push_back(encode(w.vocab, line));
    w.batches = pack_batches(seqs, w.vocab, {max_len, batch_size, seed});
    return w;
}

std::int64_t eligible_count(const Batch& batch, const Vocab& vocab, std::int32_t row) {
    std::int64_t count = 0;
    for (std::int32_t c = 0; c < batch.max_len; ++c)
        if (batch.attends(row, c) && !vocab.is_special(batch.id_at(row, c))) count += 1;
    return count;
}

ClusterModel trivial_clusters(const Vocab& vocab, std::int32_t n) {
    ClusterModel m;
    m.n = n;
    m.assignment.assign(static_cast<std::size_t>(vocab.size()), kNoCluster);
    m.members.resize(static_cast<std::size_t>(n));
    for (TokenId id = vocab.num_specials(); id < vocab.size(); ++id) {
        const std::int32_t c = (id - vocab.num_specials()) % n;
        m.assignment[static_cast<std::size_t>(id)] = c;
        m.members[static_cast<std::size_t>(c)].push_back(id);
    }
    return m;
}

}  // namespace

TEST_CASE("select_positions: exact count, minimum rule, empty row") {
    const World w = make_world();
    const Vocab& vocab = w.vocab;

    SUBCASE("rate 0.15 of 100 eligible positions is exactly 15") {
        Batch batch;
        batch.rows = 1;
        batch.max_len = 102;
        batch.ids.assign(102, 7);
        batch.ids[0] = vocab.cls_id();
        batch.ids[101] = vocab.sep_id();
        batch.attention.assign(102, 1);
        batch.lengths = {102};
        Rng rng(1);
        CHECK(select_positions(batch, 0, vocab, 0.15, rng).size() == 15);
    }

    SUBCASE("three eligible positions still select one") {
        Batch batch;
        batch.rows = 1;
        batch.max_len = 5;
        batch.ids = {vocab.cls_id(), 7, 8, 9, vocab.sep_id()};
        batch.attention = {1, 1, 1, 1, 1};
        batch.lengths = {5};
        Rng rng(2);
        CHECK(select_positions(batch, 0, vocab, 0.15, rng).size() == 1);
    }

    SUBCASE("specials-only row selects nothing") {
        Batch batch;
        batch.rows = 1;
        batch.max_len = 4;
        batch.ids = {vocab.cls_id(), vocab.sep_id(), vocab.pad_id(), vocab.pad_id()};
        batch.attention = {1, 1, 0, 0};
        batch.lengths = {2};
        Rng rng(3);
        CHECK(select_positions(batch, 0, vocab, 0.15, rng).empty());
    }

    SUBCASE("positions are uniform without replacement") {
        Batch batch;
        batch.rows = 1;
        batch.max_len = 12;
        batch.ids.assign(12, 9);
        batch.ids[0] = vocab.cls_id();
        batch.ids[11] = vocab.sep_id();
        batch.attention.assign(12, 1);
        batch.lengths = {12};
        Rng rng(4);
        std::vector<std::int64_t> hits(12, 0);
        const int trials = 40000;
        for (int t = 0; t < trials; ++t) {
            const auto positions = select_positions(batch, 0, vocab, 0.3, rng);
            CHECK(positions.size() == 3);  // round(0.3 * 10)
            std::set<std::int32_t> unique(positions.begin(), positions.end());
            CHECK(unique.size() == positions.size());
            for (const auto p : positions) hits[static_cast<std::size_t>(p)] += 1;
        }
        CHECK(hits[0] == 0);
        CHECK(hits[11] == 0);
        std::vector<double> probs(12, 0.0);
        for (int c = 1; c <= 10; ++c) probs[static_cast<std::size_t>(c)] = 0.1;
        const double pvalue = teststats::chi_square_pvalue(hits, probs, 3.0 * trials);
        CHECK(pvalue > 0.001);
    }
}

TEST_CASE("corrupt_rts: construction invariants and uniform replacement law") {
    const World w = make_world();
    ObjectiveConfig cfg;
    cfg.objective = Objective::RTS;
    Rng rng(5);

    std::vector<std::int64_t> replacement_hist(static_cast<std::size_t>(w.vocab.size()), 0);
    std::int64_t replacements = 0;
    for (int round = 0; round < 400; ++round) {
        const Batch& batch = w.batches[static_cast<std::size_t>(round) % w.batches.size()];
        const CorruptedBatch cb = corrupt_rts(batch, w.vocab, cfg, rng);
        for (std::int32_t r = 0; r < cb.rows; ++r) {
            std::int64_t row_corrupted = 0;
            for (std::int32_t c = 0; c < cb.max_len; ++c) {
                const std::size_t i = cb.flat(r, c);
                const bool differs = cb.input_ids[i] != cb.original_ids[i];
                CHECK(differs == (cb.corruption_mask[i] != 0));
                if (cb.attention_mask[i]) {
                    CHECK(cb.loss_mask[i] == 1);
                    CHECK(cb.labels[i] == (cb.corruption_mask[i] ? 1 : 0));
                } else {
                    CHECK(cb.loss_mask[i] == 0);
                    CHECK(cb.labels[i] == kIgnoreLabel);
                }
                if (cb.corruption_mask[i]) {
                    row_corrupted += 1;
                    CHECK(!w.vocab.is_special(cb.input_ids[i]));
                    replacement_hist[static_cast<std::size_t>(cb.input_ids[i])] += 1;
                    replacements += 1;
                }
            }
            const std::int64_t eligible = eligible_count(batch, w.vocab, r);
            const auto expected = std::max<std::int64_t>(
                1, std::llround(0.15 * static_cast<double>(eligible)));
            CHECK(row_corrupted == expected);
        }
    }

    // The replacement law is only *conditionally* uniform (the original id is
    // excluded per draw), so compare against the exact mixture.
    std::vector<double> probs(static_cast<std::size_t>(w.vocab.size()), 0.0);
    {
        // Count how often each original id was corrupted to reconstruct the
        // mixture weights exactly.
        Rng replay(5);
        std::vector<std::int64_t> corrupted_of(static_cast<std::size_t>(w.vocab.size()), 0);
        std::int64_t total = 0;
        for (int round = 0; round < 400; ++round) {
            const Batch& batch = w.batches[static_cast<std::size_t>(round) % w.batches.size()];
            const CorruptedBatch cb = corrupt_rts(batch, w.vocab, cfg, replay);
            for (std::size_t i = 0; i < cb.corruption_mask.size(); ++i)
                if (cb.corruption_mask[i]) {
                    corrupted_of[static_cast<std::size_t>(cb.original_ids[i])] += 1;
                    total += 1;
                }
        }
        const double regular = w.vocab.num_regular();
        for (TokenId beta = w.vocab.num_specials(); beta < w.vocab.size(); ++beta) {
            double p = 0.0;
            for (TokenId alpha = w.vocab.num_specials(); alpha < w.vocab.size(); ++alpha) {
                if (alpha == beta) continue;
                p += static_cast<double>(corrupted_of[static_cast<std::size_t>(alpha)]) /
                     static_cast<double>(total) / (regular - 1.0);
            }
            probs[static_cast<std::size_t>(beta)] = p;
        }
    }
    const double pvalue =
        teststats::chi_square_pvalue(replacement_hist, probs, static_cast<double>(replacements));
    CHECK(pvalue > 0.001);
}

TEST_CASE("corrupt_crts: matches rts labeling and emits cluster events") {
    const World w = make_world();
    const ClusterModel clusters = trivial_clusters(w.vocab, 5);
    CountMatrix cm(5, 2.0);
    ObjectiveConfig cfg;
    cfg.objective = Objective::CRTS;
    Rng rng(7);
    const CorruptedBatch cb = corrupt_crts(w.batches[0], w.vocab, cm, clusters, cfg, rng);

    std::int64_t corrupted = 0;
    for (std::size_t i = 0; i < cb.corruption_mask.size(); ++i) {
        if (cb.corruption_mask[i]) {
            corrupted += 1;
            CHECK(cb.input_ids[i] != cb.original_ids[i]);
            CHECK(!w.vocab.is_special(cb.input_ids[i]));
        }
        if (cb.attention_mask[i]) CHECK(cb.labels[i] == (cb.corruption_mask[i] ? 1 : 0));
    }
    CHECK(static_cast<std::int64_t>(cb.events.size()) == corrupted);
    for (const auto& event : cb.events) {
        const std::size_t i = cb.flat(event.row, event.col);
        CHECK(cb.corruption_mask[i] == 1);
        CHECK(event.source_cluster == clusters.cluster_of(cb.original_ids[i]));
        CHECK(event.target_cluster == clusters.cluster_of(cb.input_ids[i]));
    }
}

TEST_CASE("corrupt_crts: saturated F row sends all replacements to one cluster") {
    const World w = make_world();
    const ClusterModel clusters = trivial_clusters(w.vocab, 4);
    CountMatrix cm(4, 50.0);  // gamma 50: essentially argmax
    for (std::int32_t i = 0; i < 4; ++i) cm.at(i, 2) = 100;  // every row prefers cluster 2
    ObjectiveConfig cfg;
    cfg.objective = Objective::CRTS;
    Rng rng(9);
    for (int round = 0; round < 50; ++round) {
        const CorruptedBatch cb =
            corrupt_crts(w.batches[static_cast<std::size_t>(round) % w.batches.size()], w.vocab, cm,
                         clusters, cfg, rng);
        for (const auto& event : cb.events) CHECK(event.target_cluster == 2);
    }
}

TEST_CASE("corrupt_slm: real-token replacements, selected-only loss") {
    const World w = make_world();
    ObjectiveConfig cfg;
    cfg.objective = Objective::SLM;
    Rng rng(11);
    for (int round = 0; round < 200; ++round) {
        const Batch& batch = w.batches[static_cast<std::size_t>(round) % w.batches.size()];
        const CorruptedBatch cb = corrupt_slm(batch, w.vocab, cfg, rng);
        for (std::int32_t r = 0; r < cb.rows; ++r) {
            std::int64_t selected = 0, loss_positions = 0;
            for (std::int32_t c = 0; c < cb.max_len; ++c) {
                const std::size_t i = cb.flat(r, c);
                CHECK(cb.input_ids[i] != w.vocab.mask_id());
                CHECK(cb.loss_mask[i] == cb.corruption_mask[i]);
                if (cb.corruption_mask[i]) {
                    selected += 1;
                    CHECK(cb.labels[i] == cb.original_ids[i]);
                    CHECK(cb.input_ids[i] != cb.original_ids[i]);
                }
                loss_positions += cb.loss_mask[i];
            }
            CHECK(loss_positions == selected);
        }
    }
}

TEST_CASE("corrupt_mlm: mask/random/keep split") {
    const World w = make_world(400);
    ObjectiveConfig cfg;
    cfg.objective = Objective::MLM;

    SUBCASE("mask_frac 1.0 masks every selected position") {
        ObjectiveConfig all_mask = cfg;
        all_mask.mlm_mask_frac = 1.0;
        all_mask.mlm_random_frac = 0.0;
        Rng rng(13);
        const CorruptedBatch cb = corrupt_mlm(w.batches[0], w.vocab, all_mask, rng);
        for (std::size_t i = 0; i < cb.corruption_mask.size(); ++i)
            if (cb.corruption_mask[i]) CHECK(cb.input_ids[i] == w.vocab.mask_id());
    }

    SUBCASE("empirical 80/10/10 within half a percent") {
        Rng rng(17);
        std::int64_t masked = 0, random = 0, kept = 0;
        while (masked + random + kept < 100000) {
            for (const auto& batch : w.batches) {
                const CorruptedBatch cb = corrupt_mlm(batch, w.vocab, cfg, rng);
                for (std::size_t i = 0; i < cb.corruption_mask.size(); ++i) {
                    if (!cb.corruption_mask[i]) continue;
                    CHECK(cb.loss_mask[i] == 1);
                    CHECK(cb.labels[i] == cb.original_ids[i]);
                    if (cb.input_ids[i] == w.vocab.mask_id())
                        masked += 1;
                    else if (cb.input_ids[i] != cb.original_ids[i])
                        random += 1;
                    else
                        kept += 1;
                }
            }
        }
        const double total = static_cast<double>(masked + random + kept);
        CHECK(std::abs(masked / total - 0.8) < 0.005);
        CHECK(std::abs(random / total - 0.1) < 0.005);
        CHECK(std::abs(kept / total - 0.1) < 0.005);
    }
}

TEST_CASE("targets_slm_all: identity labels everywhere, MLM rejected") {
    const World w = make_world();
    ObjectiveConfig cfg;
    cfg.objective = Objective::RTS;
    Rng rng(19);
    const CorruptedBatch rts = corrupt_rts(w.batches[0], w.vocab, cfg, rng);
    const CorruptedBatch all = targets_slm_all(rts);
    CHECK(all.objective == Objective::SLM_ALL);

    std::int64_t non_pad = 0, loss_positions = 0;
    for (std::size_t i = 0; i < all.labels.size(); ++i) {
        if (all.attention_mask[i]) {
            non_pad += 1;
            CHECK(all.labels[i] == all.original_ids[i]);
            if (all.corruption_mask[i]) CHECK(all.labels[i] != all.input_ids[i]);
            if (!all.corruption_mask[i]) CHECK(all.labels[i] == all.input_ids[i]);
        } else {
            CHECK(all.labels[i] == kIgnoreLabel);
        }
        loss_positions += all.loss_mask[i];
    }
    CHECK(loss_positions == non_pad);

    ObjectiveConfig mlm_cfg;
    mlm_cfg.objective = Objective::MLM;
    Rng rng2(21);
    const CorruptedBatch mlm = corrupt_mlm(w.batches[0], w.vocab, mlm_cfg, rng2);
    CHECK_THROWS_WITH(targets_slm_all(mlm), "SLM-all forbids MASK: source batch is MLM-corrupted");
}

TEST_CASE("corrupt_with_generator: untrained generator samples ~uniformly") {
    const World w = make_world(200, 12, 2);
    ModelConfig gen_cfg;
    gen_cfg.layers = 1;
    gen_cfg.hidden = 8;
    gen_cfg.heads = 2;
    gen_cfg.intermediate = 16;
    gen_cfg.max_len = 12;
    gen_cfg.vocab_size = w.vocab.size();
    gen_cfg.head = HeadType::LM;
    TransformerParams gen = init_params(gen_cfg, 1);
    // Uniform logits: zero everything.
    std::fill(gen.data.begin(), gen.data.end(), 0.0);

    ObjectiveConfig cfg;
    cfg.objective = Objective::TD_GEN;
    Rng rng(23);
    std::vector<std::int64_t> hist(static_cast<std::size_t>(w.vocab.size()), 0);
    std::int64_t draws = 0;
    std::int64_t label_zero_unchanged = 0, corrupted = 0;
    for (int round = 0; round < 400; ++round) {
        const Batch& batch = w.batches[static_cast<std::size_t>(round) % w.batches.size()];
        const CorruptedBatch cb = corrupt_with_generator(batch, gen, w.vocab, cfg, rng, 1.0);
        CHECK(cb.objective == Objective::TD_GEN);
        for (std::size_t i = 0; i < cb.input_ids.size(); ++i) {
            CHECK(cb.input_ids[i] != w.vocab.mask_id());
            if (cb.attention_mask[i]) {
                CHECK(cb.labels[i] == (cb.corruption_mask[i] ? 1 : 0));
                CHECK(cb.loss_mask[i] == 1);
            }
            if (cb.input_ids[i] != cb.original_ids[i]) {
                CHECK(cb.corruption_mask[i] == 1);
                corrupted += 1;
                hist[static_cast<std::size_t>(cb.input_ids[i])] += 1;
                draws += 1;
            } else if (cb.corruption_mask[i] == 0 && cb.attention_mask[i] &&
                       cb.labels[i] == 0 && !w.vocab.is_special(cb.original_ids[i])) {
                label_zero_unchanged += 1;
            }
        }
    }
    CHECK(corrupted > 800);
    // Lucky samples (generator hits the original) exist and carry label 0.
    CHECK(label_zero_unchanged > 0);

    // The sample law is uniform over non-specials; observed replacements are
    // samples conditioned on "not the original", the same mixture as RTS.
    std::vector<double> probs(static_cast<std::size_t>(w.vocab.size()), 0.0);
    {
        Rng replay(23);
        std::vector<std::int64_t> original_count(static_cast<std::size_t>(w.vocab.size()), 0);
        std::int64_t total = 0;
        double p_not_original = 0.0;
        const double regular = w.vocab.num_regular();
        for (int round = 0; round < 400; ++round) {
            const Batch& batch = w.batches[static_cast<std::size_t>(round) % w.batches.size()];
            const CorruptedBatch cb = corrupt_with_generator(batch, gen, w.vocab, cfg, replay, 1.0);
            for (std::size_t i = 0; i < cb.input_ids.size(); ++i)
                if (cb.input_ids[i] != cb.original_ids[i]) {
                    original_count[static_cast<std::size_t>(cb.original_ids[i])] += 1;
                    total += 1;
                }
        }
        // The generator samples uniformly over the R non-specials; an
        // observed replacement is that draw conditioned on missing the
        // original, so P(beta | alpha) = (1/R) / (1 - 1/R).
        p_not_original = 1.0 - 1.0 / regular;
        for (TokenId beta = w.vocab.num_specials(); beta < w.vocab.size(); ++beta) {
            double p = 0.0;
            for (TokenId alpha = w.vocab.num_specials(); alpha < w.vocab.size(); ++alpha) {
                if (alpha == beta) continue;
                p += static_cast<double>(original_count[static_cast<std::size_t>(alpha)]) /
                     static_cast<double>(total) * (1.0 / regular) / p_not_original;
            }
            probs[static_cast<std::size_t>(beta)] = p;
        }
    }
    const double pvalue = teststats::chi_square_pvalue(hist, probs, static_cast<double>(draws));
    CHECK(pvalue > 0.001);
}

TEST_CASE("corrupt_with_generator: temperature zero takes the argmax") {
    const World w = make_world(30, 12, 2);
    ModelConfig gen_cfg;
    gen_cfg.layers = 1;
    gen_cfg.hidden = 8;
    gen_cfg.heads = 2;
    gen_cfg.intermediate = 16;
    gen_cfg.max_len = 12;
    gen_cfg.vocab_size = w.vocab.size();
    gen_cfg.head = HeadType::LM;
    TransformerParams gen = init_params(gen_cfg, 1);
    std::fill(gen.data.begin(), gen.data.end(), 0.0);
    const TokenId favored = 9;
    gen.seg("head.lm.b")[favored] = 5.0;  // argmax everywhere

    ObjectiveConfig cfg;
    cfg.objective = Objective::TD_GEN;
    Rng rng(29);
    const CorruptedBatch cb = corrupt_with_generator(w.batches[0], gen, w.vocab, cfg, rng, 0.0);
    bool saw_replacement = false;
    for (std::size_t i = 0; i < cb.input_ids.size(); ++i)
        if (cb.input_ids[i] != cb.original_ids[i]) {
            CHECK(cb.input_ids[i] == favored);
            saw_replacement = true;
        }
    CHECK(saw_replacement);
}

TEST_CASE("objective invariants across all corruption pipelines") {
    const World w = make_world(80);
    const ClusterModel clusters = trivial_clusters(w.vocab, 6);
    CountMatrix cm(6, 2.0);
    ModelConfig gen_cfg;
    gen_cfg.layers = 1;
    gen_cfg.hidden = 8;
    gen_cfg.heads = 2;
    gen_cfg.intermediate = 16;
    gen_cfg.max_len = 16;
    gen_cfg.vocab_size = w.vocab.size();
    gen_cfg.head = HeadType::LM;
    const TransformerParams gen = init_params(gen_cfg, 7);

    ObjectiveConfig cfg;
    Rng rng(31);
    for (int round = 0; round < 40; ++round) {
        const Batch& batch = w.batches[static_cast<std::size_t>(round) % w.batches.size()];
        for (const Objective objective :
             {Objective::RTS, Objective::CRTS, Objective::SLM, Objective::MLM, Objective::SLM_ALL,
              Objective::TD_GEN}) {
            cfg.objective = objective;
            CorruptedBatch cb;
            switch (objective) {
                case Objective::RTS: cb = corrupt_rts(batch, w.vocab, cfg, rng); break;
                case Objective::CRTS:
                    cb = corrupt_crts(batch, w.vocab, cm, clusters, cfg, rng);
                    break;
                case Objective::SLM: cb = corrupt_slm(batch, w.vocab, cfg, rng); break;
                case Objective::MLM: cb = corrupt_mlm(batch, w.vocab, cfg, rng); break;
                case Objective::SLM_ALL: {
                    ObjectiveConfig rts = cfg;
                    rts.objective = Objective::RTS;
                    cb = targets_slm_all(corrupt_rts(batch, w.vocab, rts, rng));
                    break;
                }
                case Objective::TD_GEN:
                    cb = corrupt_with_generator(batch, gen, w.vocab, cfg, rng, 1.0);
                    break;
            }

            // Length preservation.
            CHECK(cb.input_ids.size() == cb.original_ids.size());
            CHECK(cb.rows == batch.rows);
            CHECK(cb.max_len == batch.max_len);

            const bool whole_output = objective == Objective::RTS || objective == Objective::CRTS ||
                                      objective == Objective::TD_GEN ||
                                      objective == Objective::SLM_ALL;
            for (std::size_t i = 0; i < cb.input_ids.size(); ++i) {
                // Corruption never touches specials or PAD.
                if (cb.corruption_mask[i]) {
                    CHECK(cb.attention_mask[i] == 1);
                    CHECK(!w.vocab.is_special(cb.original_ids[i]));
                }
                // Loss-mask dichotomy.
                if (whole_output)
                    CHECK(cb.loss_mask[i] == cb.attention_mask[i]);
                else
                    CHECK(cb.loss_mask[i] == cb.corruption_mask[i]);
                // MASK-freedom outside MLM.
                if (objective != Objective::MLM) CHECK(cb.input_ids[i] != w.vocab.mask_id());
                // beta != alpha for replaced-token objectives.
                if (objective != Objective::MLM && objective != Objective::TD_GEN &&
                    cb.corruption_mask[i])
                    CHECK(cb.input_ids[i] != cb.original_ids[i]);
            }
        }
    }
}

TEST_CASE("determinism: identical inputs and seeds give identical corruption") {
    const World w = make_world();
    ObjectiveConfig cfg;
    cfg.objective = Objective::RTS;
    Rng a(41), b(41);
    const CorruptedBatch ca = corrupt_rts(w.batches[0], w.vocab, cfg, a);
    const CorruptedBatch cb = corrupt_rts(w.batches[0], w.vocab, cfg, b);
    CHECK(ca.input_ids == cb.input_ids);
    CHECK(ca.corruption_mask == cb.corruption_mask);
    CHECK(ca.labels == cb.labels);
}

TEST_CASE("corrupted batch dump is stable") {
    const World w = make_world(10, 8, 2);
    ObjectiveConfig cfg;
    cfg.objective = Objective::RTS;
    Rng rng(43);
    const CorruptedBatch cb = corrupt_rts(w.batches[0], w.vocab, cfg, rng);
    std::ostringstream a, b;
    dump_corrupted(a, cb, 43);
    dump_corrupted(b, cb, 43);
    CHECK(a.str() == b.str());
    CHECK(a.str().find("objective=rts") == 0);
}
