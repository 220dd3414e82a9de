#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "pretrain/synthetic.hpp"
#include "pretrain/train.hpp"
#include "pretrain/util.hpp"

using namespace pretrain;

namespace {

TrainConfig small_train_config(Objective objective, std::int64_t steps = 40) {
    TrainConfig cfg;
    cfg.total_steps = steps;
    cfg.warmup_steps = std::max<std::int64_t>(1, steps / 10);
    cfg.batch_size = 4;
    cfg.metrics_every = steps;
    cfg.seed = 9;
    cfg.objective.objective = objective;
    return cfg;
}

ModelConfig small_model(HeadType head) {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.intermediate = 32;
    cfg.max_len = 16;
    cfg.head = head;
    return cfg;
}

struct SmallWorld {
    std::vector<std::string> lines;
    Vocab vocab;
    std::vector<TokenSequence> corpus;
};

SmallWorld small_world(int sentences = 120) {
    SynthConfig synth;
    synth.vocab_words = 40;
    synth.topics = 2;
    synth.sentences = sentences;
    synth.min_words = 4;
    synth.max_words = 12;
    synth.seed = 21;
    SmallWorld w;
    w.lines = gen_corpus(synth);
    w.vocab = build_vocab(w.lines, 60, 1);
    for (const auto& line : w.lines) w.corpus.push_back(encode(w.vocab, line));
    return w;
}

}  // namespace

TEST_CASE("lr_at: linear warmup then linear decay, exact endpoints") {
    TrainConfig cfg;
    cfg.peak_lr = 1e-4;
    cfg.warmup_steps = 10000;
    cfg.total_steps = 900000;
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(10000, cfg) == 1e-4);
    CHECK(lr_at(900000, cfg) == 0.0);

    // Piecewise linear: second differences vanish on each side.
    const double a = lr_at(100, cfg), b = lr_at(200, cfg), c = lr_at(300, cfg);
    CHECK(std::abs((c - b) - (b - a)) < 1e-18);
    const double d = lr_at(500000, cfg), e = lr_at(500100, cfg), f = lr_at(500200, cfg);
    CHECK(std::abs((f - e) - (e - d)) < 1e-18);

    // Peak is attained exactly at warmup_steps.
    for (const std::int64_t step : {0L, 5000L, 9999L, 10000L, 10001L, 400000L, 900000L})
        CHECK(lr_at(step, cfg) <= 1e-4);
    CHECK_THROWS(lr_at(900001, cfg));
}

TEST_CASE("derive_total_steps applies the generator budget ratio") {
    CHECK(derive_total_steps(Objective::RTS, 900000) == 900000);
    CHECK(derive_total_steps(Objective::MLM, 900000) == 900000);
    CHECK(derive_total_steps(Objective::TD_GEN, 900000) == 766000);
    const auto phases = derive_phase_schedule(Objective::TD_GEN, 900000, 100000, 128, 512);
    REQUIRE(phases.size() == 2);
    CHECK(phases[0].steps == 689000);
    CHECK(phases[0].max_len == 128);
    CHECK(phases[1].steps == 77000);
    CHECK(phases[1].max_len == 512);
    const auto plain = derive_phase_schedule(Objective::RTS, 900000, 100000, 128, 512);
    CHECK(plain[0].steps == 800000);
    CHECK(plain[1].steps == 100000);
}

TEST_CASE("adam_step: hand-evaluated recurrence on a single scalar") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.hidden = 1;
    cfg.heads = 1;
    cfg.intermediate = 1;
    cfg.max_len = 1;
    cfg.vocab_size = 6;
    TransformerParams params = init_params(cfg, 1);
    AdamState state;
    TrainConfig tc;
    tc.total_steps = 10;
    tc.warmup_steps = 1;
    tc.weight_decay = 0.0;

    // Watch one decayable weight; give it gradient 1, everything else 0.
    const auto& seg = params.layout.find("layer0.attn.wq");
    const double before = params.data[seg.offset];
    std::vector<double> grads(params.data.size(), 0.0);
    grads[seg.offset] = 1.0;
    adam_step(params, grads, state, 0.001, tc);
    // Bias-corrected first step: m_hat = 1, v_hat = 1, update = lr/(1+eps).
    const double expected = before - 0.001 * 1.0 / (1.0 + 1e-8);
    CHECK(params.data[seg.offset] == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("adam_step: zero gradient with zero decay is a no-op") {
    ModelConfig cfg = small_model(HeadType::BINARY);
    cfg.vocab_size = 11;
    TransformerParams params = init_params(cfg, 2);
    const std::vector<double> before = params.data;
    AdamState state;
    TrainConfig tc;
    tc.weight_decay = 0.0;
    tc.total_steps = 10;
    tc.warmup_steps = 1;
    adam_step(params, std::vector<double>(params.data.size(), 0.0), state, 0.001, tc);
    CHECK(params.data == before);
}

TEST_CASE("decoupled decay alone shrinks weights by (1 - lr*wd)") {
    ModelConfig cfg = small_model(HeadType::BINARY);
    cfg.vocab_size = 11;
    TransformerParams params = init_params(cfg, 3);
    const std::vector<double> before = params.data;
    AdamState state;
    TrainConfig tc;
    tc.weight_decay = 0.01;
    tc.total_steps = 10;
    tc.warmup_steps = 1;
    const double lr = 0.5;
    adam_step(params, std::vector<double>(params.data.size(), 0.0), state, lr, tc);
    for (const auto& seg : params.layout.segments) {
        for (std::size_t k = seg.offset; k < seg.offset + seg.size; ++k) {
            if (seg.decay)
                CHECK(params.data[k] == doctest::Approx(before[k] * (1.0 - lr * 0.01)).epsilon(1e-15));
            else
                CHECK(params.data[k] == before[k]);
        }
    }
}

TEST_CASE("non-finite gradients raise an error naming the parameter") {
    ModelConfig cfg = small_model(HeadType::BINARY);
    cfg.vocab_size = 11;
    TransformerParams params = init_params(cfg, 4);
    AdamState state;
    TrainConfig tc;
    tc.total_steps = 10;
    tc.warmup_steps = 1;
    std::vector<double> grads(params.data.size(), 0.0);
    const auto& seg = params.layout.find("layer0.ff.w1");
    grads[seg.offset + 2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(adam_step(params, grads, state, 0.001, tc),
                         "adam_step: non-finite gradient in layer0.ff.w1", std::runtime_error);
}

TEST_CASE("clip_gradients caps the global norm") {
    std::vector<double> grads = {3.0, 4.0};  // norm 5
    const double norm = clip_gradients(grads, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(grads[0] == doctest::Approx(0.6));
    CHECK(grads[1] == doctest::Approx(0.8));
    std::vector<double> small = {0.1, 0.1};
    clip_gradients(small, 1.0);
    CHECK(small[0] == 0.1);
}

TEST_CASE("metrics json round trip") {
    MetricsRecord r;
    r.step = 150;
    r.loss = 0.6931471805599453;
    r.disc_accuracy = 0.75;
    r.lr = 1e-4;
    r.wall_ms = 0.0;
    const std::string line = metrics_to_json(r);
    CHECK(line.find("\"repl_acc\":null") != std::string::npos);
    const MetricsRecord parsed = metrics_from_json(line);
    CHECK(parsed.step == 150);
    CHECK(parsed.loss == r.loss);
    CHECK(parsed.disc_accuracy == r.disc_accuracy);
    CHECK(parsed.replaced_accuracy == -1.0);
    CHECK(parsed.lr == r.lr);
}

TEST_CASE("trainer rejects objective/head mismatches and missing deps") {
    const SmallWorld w = small_world();
    CHECK_THROWS(Trainer(w.corpus, w.vocab, small_model(HeadType::LM),
                         small_train_config(Objective::RTS), {}));
    CHECK_THROWS(Trainer(w.corpus, w.vocab, small_model(HeadType::BINARY),
                         small_train_config(Objective::SLM), {}));
    CHECK_THROWS(Trainer(w.corpus, w.vocab, small_model(HeadType::BINARY),
                         small_train_config(Objective::CRTS), {}));  // no clusters
    CHECK_THROWS(Trainer(w.corpus, w.vocab, small_model(HeadType::BINARY),
                         small_train_config(Objective::TD_GEN), {}));  // no generator
}

TEST_CASE("short RTS run: finite losses, metrics, holdout split") {
    const SmallWorld w = small_world();
    TrainConfig tc = small_train_config(Objective::RTS, 30);
    tc.metrics_every = 10;
    Trainer trainer(w.corpus, w.vocab, small_model(HeadType::BINARY), tc, {});
    std::int64_t observed_steps = 0;
    trainer.observer = [&](const StepObservation& obs) {
        CHECK(std::isfinite(obs.loss));
        CHECK(obs.corrupted_positions > 0);
        observed_steps += 1;
    };
    trainer.run();
    CHECK(observed_steps == 30);
    CHECK(trainer.step() == 30);
    CHECK(trainer.metrics().size() == 3);
    CHECK(!trainer.holdout_batches().empty());
    for (const auto& record : trainer.metrics()) {
        CHECK(std::isfinite(record.loss));
        CHECK(record.disc_accuracy >= 0.0);
        CHECK(record.replaced_accuracy == -1.0);
    }
}

TEST_CASE("CRTS feedback: F changes once per step by at most the event count") {
    const SmallWorld w = small_world();
    SgnsConfig ec;
    ec.dim = 8;
    ec.epochs = 1;
    ec.seed = 5;
    const EmbeddingTable table = train_sgns(w.corpus, w.vocab, ec);
    const ClusterModel clusters = kmeans(table, w.vocab, 6, 30, 5);

    TrainConfig tc = small_train_config(Objective::CRTS, 20);
    PretrainDeps deps;
    deps.clusters = &clusters;
    Trainer trainer(w.corpus, w.vocab, small_model(HeadType::BINARY), tc, deps);

    std::vector<std::int64_t> previous(static_cast<std::size_t>(clusters.n) *
                                           static_cast<std::size_t>(clusters.n),
                                       0);
    trainer.observer = [&](const StepObservation& obs) {
        REQUIRE(obs.f != nullptr);
        std::int64_t change = 0;
        for (std::size_t i = 0; i < previous.size(); ++i)
            change += std::abs(obs.f->counts[i] - previous[i]);
        // Per batch, |F| moves by exactly the net delta magnitude, bounded by
        // the replaced-position count with matching parity.
        CHECK(change == obs.f_update_magnitude);
        CHECK(change <= obs.corrupted_positions);
        CHECK((obs.corrupted_positions - change) % 2 == 0);
        previous = obs.f->counts;
    };
    trainer.run();
    std::int64_t total = 0;
    for (const auto v : trainer.count_matrix().counts) total += std::abs(v);
    CHECK(total > 0);
}

TEST_CASE("determinism and bit-exact resume through checkpoints") {
    const SmallWorld w = small_world();

    const auto run = [&](std::int64_t until, const Checkpoint* resume_from) {
        TrainConfig tc = small_train_config(Objective::RTS, 24);
        tc.metrics_every = 6;
        Trainer trainer(w.corpus, w.vocab, small_model(HeadType::BINARY), tc, {});
        if (resume_from) trainer.restore(*resume_from);
        trainer.run_to(until);
        return trainer;
    };

    // Two identical runs are bit-identical.
    const Trainer a = run(24, nullptr);
    const Trainer b = run(24, nullptr);
    CHECK(a.params().data == b.params().data);
    REQUIRE(a.metrics().size() == b.metrics().size());
    for (std::size_t i = 0; i < a.metrics().size(); ++i) {
        CHECK(metrics_to_json(a.metrics()[i]) == metrics_to_json(b.metrics()[i]));
    }

    // Interrupt at 12, checkpoint, resume: equals the uninterrupted run.
    const Trainer half = run(12, nullptr);
    const Checkpoint mid = half.make_checkpoint();
    const std::string path = "/tmp/pretrain_test_ckpt.bin";
    save_checkpoint(mid, path);
    const Checkpoint loaded = load_checkpoint(path);
    const Trainer resumed = run(24, &loaded);
    CHECK(resumed.params().data == a.params().data);
    const Checkpoint final_a = a.make_checkpoint();
    const Checkpoint final_r = resumed.make_checkpoint();
    CHECK(final_a.params == final_r.params);
    CHECK(final_a.m == final_r.m);
    CHECK(final_a.v == final_r.v);
}

TEST_CASE("checkpoint round trip and mismatch rejection") {
    const SmallWorld w = small_world();
    TrainConfig tc = small_train_config(Objective::RTS, 12);
    Trainer trainer(w.corpus, w.vocab, small_model(HeadType::BINARY), tc, {});
    trainer.run_to(6);
    const Checkpoint ckpt = trainer.make_checkpoint();
    const std::string path = "/tmp/pretrain_test_ckpt2.bin";
    save_checkpoint(ckpt, path);
    const Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.step == 6);
    CHECK(loaded.params == ckpt.params);
    CHECK(loaded.objective == Objective::RTS);

    // Wrong objective.
    TrainConfig slm = small_train_config(Objective::SLM, 12);
    slm.seed = tc.seed;
    Trainer other(w.corpus, w.vocab, small_model(HeadType::LM), slm, {});
    CHECK_THROWS(other.restore(loaded));

    // Wrong seed.
    TrainConfig reseeded = tc;
    reseeded.seed = tc.seed + 1;
    Trainer reseeded_trainer(w.corpus, w.vocab, small_model(HeadType::BINARY), reseeded, {});
    CHECK_THROWS(reseeded_trainer.restore(loaded));

    // Wrong shape.
    ModelConfig bigger = small_model(HeadType::BINARY);
    bigger.hidden = 32;
    bigger.heads = 4;
    Trainer bigger_trainer(w.corpus, w.vocab, bigger, tc, {});
    CHECK_THROWS(bigger_trainer.restore(loaded));
}

TEST_CASE("TD_GEN joint training runs and the step budget is scaled") {
    const SmallWorld w = small_world();
    TrainConfig tc = small_train_config(Objective::TD_GEN, 0);
    tc.total_steps = derive_total_steps(Objective::TD_GEN, 18);  // 18 * 766/900
    CHECK(tc.total_steps == 15);
    tc.warmup_steps = 2;
    tc.metrics_every = 5;
    PretrainDeps deps;
    ModelConfig gen;
    gen.layers = 1;
    gen.hidden = 8;
    gen.heads = 2;
    gen.intermediate = 16;
    gen.max_len = 16;
    deps.generator_config = gen;
    Trainer trainer(w.corpus, w.vocab, small_model(HeadType::BINARY), tc, deps);
    trainer.run();
    CHECK(trainer.step() == 15);
    const Checkpoint ckpt = trainer.make_checkpoint();
    CHECK(ckpt.has_generator);
    CHECK(!ckpt.gen_params.empty());
}

TEST_CASE("SLM-all training learns identity reproduction on a memorizable corpus") {
    // 200 steps on 8 fixed sentences; afterwards the loss on an *uncorrupted*
    // batch (labels = inputs everywhere) must approach zero.
    std::vector<std::string> lines;
    for (int i = 0; i < 8; ++i)
        lines.push_back("s" + std::to_string(i) + " t" + std::to_string(i) + " u" +
                        std::to_string(i) + " v" + std::to_string(i));
    const Vocab vocab = build_vocab(lines, 60, 1);
    std::vector<TokenSequence> corpus;
    for (const auto& line : lines) corpus.push_back(encode(vocab, line));

    TrainConfig tc;
    tc.total_steps = 200;
    tc.warmup_steps = 20;
    tc.batch_size = 8;
    tc.metrics_every = 200;
    tc.holdout_frac = 0.0;
    tc.peak_lr = 1e-2;
    tc.seed = 13;
    tc.objective.objective = Objective::SLM_ALL;
    ModelConfig mc = small_model(HeadType::LM);
    mc.hidden = 32;
    mc.heads = 2;
    mc.intermediate = 64;
    mc.max_len = 8;
    Trainer trainer(corpus, vocab, mc, tc, {});
    trainer.run();

    const auto batches = pack_batches(corpus, vocab, {8, 8, 0});
    REQUIRE(batches.size() == 1);
    CorruptedBatch identity;
    identity.objective = Objective::SLM_ALL;
    identity.rows = batches[0].rows;
    identity.max_len = batches[0].max_len;
    identity.input_ids = batches[0].ids;
    identity.original_ids = batches[0].ids;
    identity.attention_mask = batches[0].attention;
    identity.corruption_mask.assign(batches[0].ids.size(), 0);
    identity.loss_mask = batches[0].attention;
    identity.labels.assign(batches[0].ids.size(), kIgnoreLabel);
    for (std::size_t i = 0; i < identity.labels.size(); ++i)
        if (identity.attention_mask[i]) identity.labels[i] = identity.original_ids[i];

    const double identity_loss =
        loss(trainer.params(), forward(trainer.params(), identity), identity);
    CHECK(identity_loss < 0.1);
}

TEST_CASE("two-phase sequence schedule repacks and switches lengths") {
    const SmallWorld w = small_world(200);
    TrainConfig tc = small_train_config(Objective::RTS, 20);
    tc.seq_len_schedule = {{14, 8}, {6, 16}};
    ModelConfig mc = small_model(HeadType::BINARY);
    Trainer trainer(w.corpus, w.vocab, mc, tc, {});

    std::vector<std::int32_t> seen_lens;
    trainer.observer = [&](const StepObservation& obs) { seen_lens.push_back(obs.batch->max_len); };
    trainer.run();
    REQUIRE(seen_lens.size() == 20);
    for (int s = 0; s < 14; ++s) CHECK(seen_lens[static_cast<std::size_t>(s)] == 8);
    for (int s = 14; s < 20; ++s) CHECK(seen_lens[static_cast<std::size_t>(s)] == 16);
    CHECK(trainer.holdout_batches().front().max_len == 16);

    // Phases must sum to total_steps.
    TrainConfig bad = tc;
    bad.seq_len_schedule = {{10, 8}};
    CHECK_THROWS(Trainer(w.corpus, w.vocab, mc, bad, {}));
}

TEST_CASE("probe_hardness: untrained model sits at chance, deterministic") {
    const SmallWorld w = small_world(260);
    SgnsConfig ec;
    ec.dim = 8;
    ec.epochs = 1;
    ec.seed = 5;
    const EmbeddingTable table = train_sgns(w.corpus, w.vocab, ec);
    const ClusterModel clusters = kmeans(table, w.vocab, 6, 30, 5);
    CountMatrix cm(6, 2.0);

    ModelConfig mc = small_model(HeadType::BINARY);
    mc.vocab_size = w.vocab.size();
    const auto batches = pack_batches(w.corpus, w.vocab, {16, 8, 3});

    // Chance level. A single untrained model carries a per-init lean (its
    // random head splits the hidden space unevenly), so the 0.5 expectation
    // is demonstrated structurally: negating the head flips every prediction,
    // forcing acc(model) + acc(negated model) = 1 exactly, and an untrained
    // model shows no uniform-vs-crts hardness gap.
    const TransformerParams params = init_params(mc, 77);
    TransformerParams negated = params;
    {
        const auto& w_seg = negated.layout.find("head.binary.w");
        for (std::size_t i = w_seg.offset; i < w_seg.offset + w_seg.size; ++i)
            negated.data[i] = -negated.data[i];
        const auto& b_seg = negated.layout.find("head.binary.b");
        negated.data[b_seg.offset] = -negated.data[b_seg.offset];
    }
    const ProbeResult r1 = probe_hardness(params, cm, clusters, w.vocab, batches, 5, 30);
    const ProbeResult flipped = probe_hardness(negated, cm, clusters, w.vocab, batches, 5, 30);
    CHECK(r1.positions >= 10000);
    CHECK(r1.acc_uniform + flipped.acc_uniform == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r1.acc_crts + flipped.acc_crts == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(r1.acc_uniform - r1.acc_crts) < 0.05);

    const ProbeResult r2 = probe_hardness(params, cm, clusters, w.vocab, batches, 5, 30);
    CHECK(r1.acc_uniform == r2.acc_uniform);
    CHECK(r1.acc_crts == r2.acc_crts);

    // LM-head checkpoints are rejected.
    ModelConfig lm = small_model(HeadType::LM);
    lm.vocab_size = w.vocab.size();
    CHECK_THROWS(probe_hardness(init_params(lm, 1), cm, clusters, w.vocab, batches, 5, 1));
}
