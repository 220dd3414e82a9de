#include "pretrain/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pretrain/util.hpp"

namespace pretrain {

void TrainConfig::validate() const {
    if (peak_lr <= 0.0 || adam_eps <= 0.0) throw std::invalid_argument("train: rates must be positive");
    if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0 || adam_beta2 <= 0.0 || adam_beta2 >= 1.0)
        throw std::invalid_argument("train: betas must lie in (0, 1)");
    if (warmup_steps < 1 || warmup_steps >= total_steps)
        throw std::invalid_argument("train: need 0 < warmup_steps < total_steps");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (holdout_frac < 0.0 || holdout_frac >= 1.0)
        throw std::invalid_argument("train: holdout_frac must be in [0, 1)");
    if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
    if (reference && threads != 1)
        throw std::invalid_argument("train: the reference path is single-threaded");
}

double lr_at(std::int64_t step, const TrainConfig& config) {
    if (step < 0 || step > config.total_steps)
        throw std::invalid_argument("lr_at: step outside [0, total_steps]");
    const auto s = static_cast<double>(step);
    if (step <= config.warmup_steps)
        return config.peak_lr * s / static_cast<double>(config.warmup_steps);
    return config.peak_lr * static_cast<double>(config.total_steps - step) /
           static_cast<double>(config.total_steps - config.warmup_steps);
}

std::int64_t derive_total_steps(Objective objective, std::int64_t base_steps) {
    if (objective != Objective::TD_GEN) return base_steps;
    return std::llround(static_cast<double>(base_steps) * 766.0 / 900.0);
}

std::vector<PhaseSpec> derive_phase_schedule(Objective objective, std::int64_t base_total,
                                             std::int64_t base_phase2, std::int32_t len1,
                                             std::int32_t len2) {
    if (base_phase2 < 0 || base_phase2 > base_total)
        throw std::invalid_argument("derive_phase_schedule: bad phase split");
    if (objective != Objective::TD_GEN) {
        if (base_phase2 == 0) return {{base_total, len1}};
        return {{base_total - base_phase2, len1}, {base_phase2, len2}};
    }
    // Generator-bearing budgets: the published 766K total with a 689K/77K
    // split; the ratios are taken as given, not rederived.
    const std::int64_t total = derive_total_steps(objective, base_total);
    const std::int64_t phase2 =
        std::llround(static_cast<double>(base_phase2) * 77.0 / 100.0);
    if (phase2 == 0) return {{total, len1}};
    return {{total - phase2, len1}, {phase2, len2}};
}

double clip_gradients(std::vector<double>& grads, double max_norm) {
    double sq = 0.0;
    for (const double g : grads) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (double& g : grads) g *= scale;
    }
    return norm;
}

void adam_step(TransformerParams& params, const std::vector<double>& grads, AdamState& state,
               double lr, const TrainConfig& config) {
    if (grads.size() != params.data.size())
        throw std::invalid_argument("adam_step: gradient shape mismatch");
    if (state.m.empty()) {
        state.m.assign(params.data.size(), 0.0);
        state.v.assign(params.data.size(), 0.0);
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(state.t));

    for (const auto& seg : params.layout.segments) {
        const double decay = seg.decay ? lr * config.weight_decay : 0.0;
        for (std::size_t k = seg.offset; k < seg.offset + seg.size; ++k) {
            const double g = grads[k];
            if (!std::isfinite(g))
                throw std::runtime_error("adam_step: non-finite gradient in " + seg.name);
            state.m[k] = config.adam_beta1 * state.m[k] + (1.0 - config.adam_beta1) * g;
            state.v[k] = config.adam_beta2 * state.v[k] + (1.0 - config.adam_beta2) * g * g;
            const double m_hat = state.m[k] / bc1;
            const double v_hat = state.v[k] / bc2;
            const double p_old = params.data[k];
            params.data[k] = p_old - lr * m_hat / (std::sqrt(v_hat) + config.adam_eps) -
                             decay * p_old;
        }
    }
}

// ---------------------------------------------------------------- metrics

namespace {

void json_field(std::ostringstream& out, const char* key, double value, bool valid,
                bool trailing_comma = true) {
    out << '"' << key << "\":";
    if (valid)
        out << format_double(value);
    else
        out << "null";
    if (trailing_comma) out << ',';
}

double parse_field(const std::string& line, const std::string& key) {
    const auto at = line.find('"' + key + "\":");
    if (at == std::string::npos) return -1.0;
    const auto start = at + key.size() + 3;
    if (line.compare(start, 4, "null") == 0) return -1.0;
    return std::stod(line.substr(start));
}

}  // namespace

std::string metrics_to_json(const MetricsRecord& r) {
    std::ostringstream out;
    out << "{\"step\":" << r.step << ',';
    json_field(out, "loss", r.loss, true);
    json_field(out, "disc_acc", r.disc_accuracy, r.disc_accuracy >= 0.0);
    json_field(out, "repl_acc", r.replaced_accuracy, r.replaced_accuracy >= 0.0);
    json_field(out, "repl_ce", r.replaced_ce, r.replaced_ce >= 0.0);
    json_field(out, "lr", r.lr, true);
    json_field(out, "wall_ms", r.wall_ms, true, false);
    out << '}';
    return out.str();
}

MetricsRecord metrics_from_json(const std::string& line) {
    MetricsRecord r;
    r.step = static_cast<std::int64_t>(parse_field(line, "step"));
    r.loss = parse_field(line, "loss");
    r.disc_accuracy = parse_field(line, "disc_acc");
    r.replaced_accuracy = parse_field(line, "repl_acc");
    r.replaced_ce = parse_field(line, "repl_ce");
    r.lr = parse_field(line, "lr");
    r.wall_ms = parse_field(line, "wall_ms");
    return r;
}

// ------------------------------------------------------------- checkpoint

namespace {

void put_bytes(std::string& buf, const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
}
template <typename T>
void put_pod(std::string& buf, T v) {
    put_bytes(buf, &v, sizeof v);
}
void put_doubles(std::string& buf, const std::vector<double>& v) {
    put_pod<std::uint64_t>(buf, v.size());
    put_bytes(buf, v.data(), v.size() * sizeof(double));
}
void put_config(std::string& buf, const ModelConfig& c) {
    put_pod<std::int32_t>(buf, c.layers);
    put_pod<std::int32_t>(buf, c.hidden);
    put_pod<std::int32_t>(buf, c.heads);
    put_pod<std::int32_t>(buf, c.intermediate);
    put_pod<std::int32_t>(buf, c.max_len);
    put_pod<std::int32_t>(buf, c.vocab_size);
    put_pod<std::uint32_t>(buf, c.head == HeadType::LM ? 1u : 0u);
}

struct Reader {
    const char* p;
    const char* end;
    explicit Reader(const std::string& s) : p(s.data()), end(s.data() + s.size()) {}
    void take(void* dst, std::size_t n) {
        if (p + n > end) throw std::runtime_error("checkpoint truncated");
        std::memcpy(dst, p, n);
        p += n;
    }
    template <typename T>
    T pod() {
        T v;
        take(&v, sizeof v);
        return v;
    }
    std::vector<double> doubles() {
        const auto n = pod<std::uint64_t>();
        std::vector<double> v(n);
        take(v.data(), n * sizeof(double));
        return v;
    }
    ModelConfig config() {
        ModelConfig c;
        c.layers = pod<std::int32_t>();
        c.hidden = pod<std::int32_t>();
        c.heads = pod<std::int32_t>();
        c.intermediate = pod<std::int32_t>();
        c.max_len = pod<std::int32_t>();
        c.vocab_size = pod<std::int32_t>();
        c.head = pod<std::uint32_t>() == 1u ? HeadType::LM : HeadType::BINARY;
        return c;
    }
};

constexpr char kCheckpointMagic[8] = {'P', 'T', 'O', 'B', 'J', 'C', 'K', '1'};

bool same_config(const ModelConfig& a, const ModelConfig& b) {
    return a.layers == b.layers && a.hidden == b.hidden && a.heads == b.heads &&
           a.intermediate == b.intermediate && a.max_len == b.max_len &&
           a.vocab_size == b.vocab_size && a.head == b.head;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::string buf;
    put_bytes(buf, kCheckpointMagic, sizeof kCheckpointMagic);
    put_pod<std::uint32_t>(buf, ckpt.version);
    put_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(ckpt.objective));
    put_pod<std::uint64_t>(buf, ckpt.seed);
    put_pod<std::int64_t>(buf, ckpt.step);
    put_config(buf, ckpt.model_config);
    put_doubles(buf, ckpt.params);
    put_doubles(buf, ckpt.m);
    put_doubles(buf, ckpt.v);
    put_pod<std::uint8_t>(buf, ckpt.has_generator ? 1 : 0);
    if (ckpt.has_generator) {
        put_config(buf, ckpt.gen_config);
        put_doubles(buf, ckpt.gen_params);
        put_doubles(buf, ckpt.gen_m);
        put_doubles(buf, ckpt.gen_v);
    }
    put_pod<std::uint8_t>(buf, ckpt.f.n > 0 ? 1 : 0);
    if (ckpt.f.n > 0) {
        put_pod<std::int32_t>(buf, ckpt.f.n);
        put_pod<double>(buf, ckpt.f.gamma);
        put_bytes(buf, ckpt.f.counts.data(), ckpt.f.counts.size() * sizeof(std::int64_t));
    }
    write_file(path, buf);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string buf = read_file(path);
    Reader r(buf);
    char magic[8];
    r.take(magic, sizeof magic);
    if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    Checkpoint ckpt;
    ckpt.version = r.pod<std::uint32_t>();
    ckpt.objective = static_cast<Objective>(r.pod<std::uint32_t>());
    ckpt.seed = r.pod<std::uint64_t>();
    ckpt.step = r.pod<std::int64_t>();
    ckpt.model_config = r.config();
    ckpt.params = r.doubles();
    ckpt.m = r.doubles();
    ckpt.v = r.doubles();
    if (r.pod<std::uint8_t>() == 1) {
        ckpt.has_generator = true;
        ckpt.gen_config = r.config();
        ckpt.gen_params = r.doubles();
        ckpt.gen_m = r.doubles();
        ckpt.gen_v = r.doubles();
    }
    if (r.pod<std::uint8_t>() == 1) {
        const auto n = r.pod<std::int32_t>();
        const auto gamma = r.pod<double>();
        ckpt.f = CountMatrix(n, gamma);
        r.take(ckpt.f.counts.data(), ckpt.f.counts.size() * sizeof(std::int64_t));
    }
    return ckpt;
}

// ---------------------------------------------------------------- trainer

namespace {

bool is_detection(Objective objective) {
    return objective == Objective::RTS || objective == Objective::CRTS ||
           objective == Objective::TD_GEN;
}

// Detection batch corrupted at caller-chosen positions; `draw` supplies each
// replacement token.
template <typename DrawFn>
CorruptedBatch corrupt_at_positions(const Batch& batch,
                                    const std::vector<std::vector<std::int32_t>>& positions,
                                    DrawFn&& draw) {
    CorruptedBatch cb;
    cb.objective = Objective::RTS;
    cb.rows = batch.rows;
    cb.max_len = batch.max_len;
    cb.input_ids = batch.ids;
    cb.original_ids = batch.ids;
    cb.attention_mask = batch.attention;
    cb.corruption_mask.assign(batch.ids.size(), 0);
    cb.loss_mask.assign(batch.ids.size(), 0);
    cb.labels.assign(batch.ids.size(), kIgnoreLabel);
    for (std::int32_t r = 0; r < batch.rows; ++r) {
        for (const std::int32_t c : positions[static_cast<std::size_t>(r)]) {
            const std::size_t i = cb.flat(r, c);
            cb.input_ids[i] = draw(cb.original_ids[i]);
            cb.corruption_mask[i] = 1;
        }
    }
    for (std::size_t i = 0; i < cb.labels.size(); ++i) {
        if (!cb.attention_mask[i]) continue;
        cb.loss_mask[i] = 1;
        cb.labels[i] = cb.corruption_mask[i] ? 1 : 0;
    }
    return cb;
}

TokenId draw_uniform_replacement(const Vocab& vocab, TokenId original, Rng& rng) {
    const auto candidates = static_cast<std::uint64_t>(vocab.num_regular() - 1);
    TokenId id = static_cast<TokenId>(vocab.num_specials() + static_cast<TokenId>(rng.below(candidates)));
    if (id >= original) ++id;
    return id;
}

}  // namespace

Trainer::Trainer(const std::vector<TokenSequence>& corpus, const Vocab& vocab,
                 const ModelConfig& model_config, const TrainConfig& config,
                 const PretrainDeps& deps)
    : corpus_(corpus), vocab_(vocab), config_(config), deps_(deps) {
    config_.validate();
    ModelConfig mc = model_config;
    mc.vocab_size = vocab.size();
    mc.validate();

    const Objective objective = config_.objective.objective;
    const bool detection = is_detection(objective);
    if (detection && mc.head != HeadType::BINARY)
        throw std::invalid_argument("objective/head mismatch: detection objectives need a BINARY head");
    if (!detection && mc.head != HeadType::LM)
        throw std::invalid_argument("objective/head mismatch: token-prediction objectives need an LM head");
    if (objective == Objective::CRTS && deps_.clusters == nullptr)
        throw std::invalid_argument("CRTS pre-training needs a cluster model");
    if (objective == Objective::TD_GEN && !deps_.generator_config.has_value())
        throw std::invalid_argument("TD_GEN pre-training needs a generator config");

    // Phases; default is a single phase at the model's max_len.
    std::vector<PhaseSpec> schedule = config_.seq_len_schedule;
    if (schedule.empty()) schedule = {{config_.total_steps, mc.max_len}};
    std::int64_t sum = 0;
    for (const auto& phase : schedule) {
        if (phase.max_len > mc.max_len)
            throw std::invalid_argument("schedule max_len exceeds model max_len");
        sum += phase.steps;
    }
    if (sum != config_.total_steps)
        throw std::invalid_argument("seq_len_schedule steps must sum to total_steps");

    std::int64_t first = 0;
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        PhaseData phase;
        phase.spec = schedule[i];
        phase.first_step = first;
        first += schedule[i].steps;
        PackConfig pc{schedule[i].max_len, config_.batch_size,
                      hash_combine(config_.seed, hash_combine(hash_str("pack"), i))};
        auto batches = pack_batches(corpus_, vocab_, pc);
        std::size_t holdout = 0;
        if (config_.holdout_frac > 0.0)
            holdout = std::max<std::size_t>(
                1, static_cast<std::size_t>(config_.holdout_frac * static_cast<double>(batches.size())));
        if (holdout >= batches.size())
            throw std::invalid_argument("corpus too small for the holdout split");
        phase.holdout.assign(batches.end() - static_cast<std::ptrdiff_t>(holdout), batches.end());
        batches.resize(batches.size() - holdout);
        phase.train = std::move(batches);
        phases_.push_back(std::move(phase));
    }

    params_ = init_params(mc, hash_combine(config_.seed, hash_str("model.disc")));
    opt_.m.assign(params_.data.size(), 0.0);
    opt_.v.assign(params_.data.size(), 0.0);

    if (objective == Objective::TD_GEN) {
        ModelConfig gc = *deps_.generator_config;
        gc.vocab_size = vocab.size();
        gc.head = HeadType::LM;
        if (gc.max_len < mc.max_len)
            throw std::invalid_argument("generator max_len must cover the discriminator's");
        gen_params_ = init_params(gc, hash_combine(config_.seed, hash_str("model.gen")));
        gen_opt_ = AdamState{};
        gen_opt_->m.assign(gen_params_->data.size(), 0.0);
        gen_opt_->v.assign(gen_params_->data.size(), 0.0);
    }

    if (objective == Objective::CRTS) {
        if (deps_.initial_f.has_value()) {
            f_ = *deps_.initial_f;
            if (f_.n != deps_.clusters->n)
                throw std::invalid_argument("initial F matrix does not match the cluster count");
        } else {
            f_ = CountMatrix(deps_.clusters->n, deps_.gamma);
        }
    }
}

const Trainer::PhaseData& Trainer::phase_at(std::int64_t step) const {
    for (const auto& phase : phases_)
        if (step < phase.first_step + phase.spec.steps) return phase;
    return phases_.back();
}

const std::vector<Batch>& Trainer::holdout_batches() const {
    const std::int64_t step = std::min(step_, config_.total_steps - 1);
    return phase_at(step).holdout;
}

void Trainer::restore(const Checkpoint& ckpt) {
    if (ckpt.objective != config_.objective.objective)
        throw std::runtime_error("checkpoint/config mismatch: objective differs");
    if (ckpt.seed != config_.seed)
        throw std::runtime_error("checkpoint/config mismatch: seed differs");
    if (!same_config(ckpt.model_config, params_.config))
        throw std::runtime_error("checkpoint/config mismatch: model shape differs");
    if (ckpt.step > config_.total_steps)
        throw std::runtime_error("checkpoint/config mismatch: step beyond total_steps");
    if (ckpt.params.size() != params_.data.size())
        throw std::runtime_error("checkpoint/config mismatch: parameter count differs");
    params_.data = ckpt.params;
    opt_.m = ckpt.m;
    opt_.v = ckpt.v;
    opt_.t = ckpt.step;
    if (ckpt.has_generator) {
        if (!gen_params_.has_value() || !same_config(ckpt.gen_config, gen_params_->config))
            throw std::runtime_error("checkpoint/config mismatch: generator shape differs");
        gen_params_->data = ckpt.gen_params;
        gen_opt_->m = ckpt.gen_m;
        gen_opt_->v = ckpt.gen_v;
        gen_opt_->t = ckpt.step;
    } else if (gen_params_.has_value()) {
        throw std::runtime_error("checkpoint/config mismatch: checkpoint lacks the generator");
    }
    if (ckpt.f.n > 0) {
        if (f_.n != ckpt.f.n)
            throw std::runtime_error("checkpoint/config mismatch: count matrix size differs");
        f_ = ckpt.f;
    }
    step_ = ckpt.step;
}

Checkpoint Trainer::make_checkpoint() const {
    Checkpoint ckpt;
    ckpt.objective = config_.objective.objective;
    ckpt.seed = config_.seed;
    ckpt.step = step_;
    ckpt.model_config = params_.config;
    ckpt.params = params_.data;
    ckpt.m = opt_.m;
    ckpt.v = opt_.v;
    if (gen_params_.has_value()) {
        ckpt.has_generator = true;
        ckpt.gen_config = gen_params_->config;
        ckpt.gen_params = gen_params_->data;
        ckpt.gen_m = gen_opt_->m;
        ckpt.gen_v = gen_opt_->v;
    }
    ckpt.f = f_;
    return ckpt;
}

CorruptedBatch Trainer::corrupt_for_step(const Batch& batch, std::int64_t step) const {
    Rng rng = derive_rng(config_.seed, "corrupt", static_cast<std::uint64_t>(step));
    ObjectiveConfig oc = config_.objective;
    switch (oc.objective) {
        case Objective::RTS:
            return corrupt_rts(batch, vocab_, oc, rng);
        case Objective::CRTS:
            return corrupt_crts(batch, vocab_, f_, *deps_.clusters, oc, rng);
        case Objective::SLM:
            return corrupt_slm(batch, vocab_, oc, rng);
        case Objective::MLM:
            return corrupt_mlm(batch, vocab_, oc, rng);
        case Objective::SLM_ALL: {
            oc.objective = Objective::RTS;
            return targets_slm_all(corrupt_rts(batch, vocab_, oc, rng));
        }
        case Objective::TD_GEN:
            break;  // handled inline by run_to, which also trains the generator
    }
    throw std::logic_error("corrupt_for_step: unhandled objective");
}

void Trainer::run_to(std::int64_t target_step) {
    const std::int64_t target = std::min(target_step, config_.total_steps);
    auto wall_start = std::chrono::steady_clock::now();

    while (step_ < target) {
        const PhaseData& phase = phase_at(step_);
        const Batch& batch =
            phase.train[static_cast<std::size_t>((step_ - phase.first_step) %
                                                 static_cast<std::int64_t>(phase.train.size()))];
        const double lr = lr_at(step_ + 1, config_);
        double step_loss = 0.0;
        std::int64_t corrupted = 0;
        std::int64_t f_magnitude = 0;
        CorruptedBatch step_cb;

        if (config_.objective.objective == Objective::TD_GEN) {
            Rng rng = derive_rng(config_.seed, "corrupt", static_cast<std::uint64_t>(step_));
            CorruptedBatch masked = mask_for_generator(batch, vocab_, config_.objective, rng);
            const ForwardCache gen_cache = forward(*gen_params_, masked);
            step_cb = replace_from_generator(masked, gen_cache, vocab_, rng, config_.gen_temperature);

            const double gen_loss = loss(*gen_params_, gen_cache, masked);
            std::vector<double> gen_grads = backward(*gen_params_, gen_cache, masked);
            StepOutput disc_out = train_step_gradients(params_, step_cb, config_.threads);
            step_loss = gen_loss + config_.disc_loss_weight * disc_out.loss;
            for (double& g : disc_out.grads) g *= config_.disc_loss_weight;

            clip_gradients(gen_grads, config_.clip_norm);
            clip_gradients(disc_out.grads, config_.clip_norm);
            adam_step(*gen_params_, gen_grads, *gen_opt_, lr, config_);
            adam_step(params_, disc_out.grads, opt_, lr, config_);
        } else {
            step_cb = corrupt_for_step(batch, step_);
            StepOutput out = train_step_gradients(params_, step_cb, config_.threads);
            step_loss = out.loss;
            clip_gradients(out.grads, config_.clip_norm);
            adam_step(params_, out.grads, opt_, lr, config_);

            if (config_.objective.objective == Objective::CRTS) {
                // Outcomes fold into F only after the optimizer step, so the
                // batch saw a frozen sampling distribution.
                const std::vector<std::uint8_t> preds = predict_binary(out.binary_logits);
                OutcomeDelta delta;
                for (const auto& event : step_cb.events) {
                    const bool predicted_replaced =
                        preds[step_cb.flat(event.row, event.col)] != 0;
                    delta.record({event.source_cluster, event.target_cluster, predicted_replaced});
                }
                update_counts(f_, delta);
                f_magnitude = delta.total_magnitude();
            }
        }
        for (const auto m : step_cb.corruption_mask) corrupted += m ? 1 : 0;

        if (!std::isfinite(step_loss))
            throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step_));

        step_ += 1;

        if (observer) {
            StepObservation obs;
            obs.step = step_;
            obs.loss = step_loss;
            obs.corrupted_positions = corrupted;
            obs.f_update_magnitude = f_magnitude;
            obs.f = config_.objective.objective == Objective::CRTS ? &f_ : nullptr;
            obs.batch = &step_cb;
            observer(obs);
        }

        if (step_ % config_.metrics_every == 0 || step_ == config_.total_steps) {
            MetricsRecord record;
            record.step = step_;
            record.loss = step_loss;
            record.lr = lr;
            if (params_.config.head == HeadType::BINARY) {
                record.disc_accuracy = holdout_balanced_accuracy(static_cast<std::uint64_t>(step_));
            } else {
                const LmEval eval = holdout_lm_eval(static_cast<std::uint64_t>(step_));
                record.replaced_accuracy = eval.replaced_accuracy;
                record.replaced_ce = eval.replaced_ce;
            }
            if (!config_.reference) {
                const auto now = std::chrono::steady_clock::now();
                record.wall_ms =
                    std::chrono::duration<double, std::milli>(now - wall_start).count();
                wall_start = now;
            }
            metrics_.push_back(record);
            if (!metrics_path.empty()) {
                std::ofstream out(metrics_path, std::ios::app);
                out << metrics_to_json(record) << '\n';
            }
        }
        maybe_checkpoint(step_);
    }
}

void Trainer::maybe_checkpoint(std::int64_t step) {
    if (checkpoint_dir.empty()) return;
    const bool cadence = config_.checkpoint_every > 0 && step % config_.checkpoint_every == 0;
    const bool final = step == config_.total_steps;
    if (!cadence && !final) return;
    const Checkpoint ckpt = make_checkpoint();
    if (cadence)
        save_checkpoint(ckpt, checkpoint_dir + "/checkpoint_step" + std::to_string(step) + ".bin");
    if (final) save_checkpoint(ckpt, checkpoint_dir + "/checkpoint_final.bin");
}

double Trainer::holdout_balanced_accuracy(std::uint64_t eval_salt) const {
    const auto& holdout = holdout_batches();
    std::int64_t pos_total = 0, pos_hit = 0, neg_total = 0, neg_hit = 0;
    for (std::size_t i = 0; i < holdout.size(); ++i) {
        Rng rng = derive_rng(config_.seed, "eval.corrupt", eval_salt, i);
        CorruptedBatch cb;
        ObjectiveConfig oc = config_.objective;
        switch (oc.objective) {
            case Objective::CRTS:
                cb = corrupt_crts(holdout[i], vocab_, f_, *deps_.clusters, oc, rng);
                break;
            case Objective::TD_GEN: {
                CorruptedBatch masked = mask_for_generator(holdout[i], vocab_, oc, rng);
                cb = replace_from_generator(masked, forward(*gen_params_, masked), vocab_, rng,
                                            config_.gen_temperature);
                break;
            }
            default:
                cb = corrupt_rts(holdout[i], vocab_, oc, rng);
        }
        const ForwardCache cache = forward(params_, cb);
        const std::vector<std::uint8_t> preds = predict_binary(cache.binary_logits);
        for (std::size_t cell = 0; cell < cb.loss_mask.size(); ++cell) {
            if (!cb.loss_mask[cell]) continue;
            if (cb.labels[cell] == 1) {
                pos_total += 1;
                pos_hit += preds[cell] != 0 ? 1 : 0;
            } else {
                neg_total += 1;
                neg_hit += preds[cell] == 0 ? 1 : 0;
            }
        }
    }
    if (pos_total == 0 || neg_total == 0) return -1.0;
    return 0.5 * (static_cast<double>(pos_hit) / static_cast<double>(pos_total) +
                  static_cast<double>(neg_hit) / static_cast<double>(neg_total));
}

Trainer::LmEval Trainer::holdout_lm_eval(std::uint64_t eval_salt) const {
    const auto& holdout = holdout_batches();
    double ce_sum = 0.0;
    std::int64_t count = 0, hits = 0;
    for (std::size_t i = 0; i < holdout.size(); ++i) {
        Rng rng = derive_rng(config_.seed, "eval.corrupt", eval_salt, i);
        ObjectiveConfig oc = config_.objective;
        CorruptedBatch cb;
        switch (oc.objective) {
            case Objective::SLM:
                cb = corrupt_slm(holdout[i], vocab_, oc, rng);
                break;
            case Objective::MLM:
                cb = corrupt_mlm(holdout[i], vocab_, oc, rng);
                break;
            case Objective::SLM_ALL: {
                oc.objective = Objective::RTS;
                cb = targets_slm_all(corrupt_rts(holdout[i], vocab_, oc, rng));
                break;
            }
            default:
                throw std::logic_error("holdout_lm_eval: LM objectives only");
        }
        const ForwardCache cache = forward(params_, cb);
        const auto vocab_size = static_cast<std::size_t>(vocab_.size());
        for (std::size_t p = 0; p < cache.lm_positions.size(); ++p) {
            const auto cell = static_cast<std::size_t>(cache.lm_positions[p]);
            if (!cb.corruption_mask[cell]) continue;  // replaced positions only
            const double* logits = cache.lm_logits.data() + p * vocab_size;
            const auto label = static_cast<std::size_t>(cb.labels[cell]);
            double max_logit = logits[0];
            std::size_t argmax = 0;
            for (std::size_t v = 1; v < vocab_size; ++v) {
                if (logits[v] > max_logit) {
                    max_logit = logits[v];
                    argmax = v;
                }
            }
            double lse = 0.0;
            for (std::size_t v = 0; v < vocab_size; ++v) lse += std::exp(logits[v] - max_logit);
            ce_sum += max_logit + std::log(lse) - logits[label];
            hits += argmax == label ? 1 : 0;
            count += 1;
        }
    }
    LmEval eval;
    if (count > 0) {
        eval.replaced_ce = ce_sum / static_cast<double>(count);
        eval.replaced_accuracy = static_cast<double>(hits) / static_cast<double>(count);
    }
    return eval;
}

ProbeResult probe_hardness(const TransformerParams& params, const CountMatrix& cm,
                           const ClusterModel& clusters, const Vocab& vocab,
                           const std::vector<Batch>& eval_batches, std::uint64_t seed,
                           int rounds, double replace_rate) {
    if (params.config.head != HeadType::BINARY)
        throw std::invalid_argument("probe_hardness: needs a BINARY-head checkpoint");

    std::int64_t total = 0, hits_uniform = 0, hits_crts = 0;
    for (int round = 0; round < rounds; ++round) {
        for (std::size_t i = 0; i < eval_batches.size(); ++i) {
            const Batch& batch = eval_batches[i];
            Rng pos_rng = derive_rng(seed, "probe.pos", static_cast<std::uint64_t>(round), i);
            std::vector<std::vector<std::int32_t>> positions(static_cast<std::size_t>(batch.rows));
            for (std::int32_t r = 0; r < batch.rows; ++r)
                positions[static_cast<std::size_t>(r)] =
                    select_positions(batch, r, vocab, replace_rate, pos_rng);

            Rng rng_u = derive_rng(seed, "probe.unif", static_cast<std::uint64_t>(round), i);
            const CorruptedBatch cb_u = corrupt_at_positions(
                batch, positions,
                [&](TokenId original) { return draw_uniform_replacement(vocab, original, rng_u); });

            Rng rng_c = derive_rng(seed, "probe.crts", static_cast<std::uint64_t>(round), i);
            const CorruptedBatch cb_c = corrupt_at_positions(
                batch, positions,
                [&](TokenId original) { return sample_replacement(cm, clusters, vocab, original, rng_c); });

            const std::vector<std::uint8_t> preds_u =
                predict_binary(forward(params, cb_u).binary_logits);
            const std::vector<std::uint8_t> preds_c =
                predict_binary(forward(params, cb_c).binary_logits);
            for (std::size_t cell = 0; cell < cb_u.corruption_mask.size(); ++cell) {
                if (!cb_u.corruption_mask[cell]) continue;
                total += 1;
                hits_uniform += preds_u[cell] != 0 ? 1 : 0;
                hits_crts += preds_c[cell] != 0 ? 1 : 0;
            }
        }
    }

    ProbeResult result;
    result.positions = total;
    if (total > 0) {
        result.acc_uniform = static_cast<double>(hits_uniform) / static_cast<double>(total);
        result.acc_crts = static_cast<double>(hits_crts) / static_cast<double>(total);
    }
    return result;
}

}  // namespace pretrain
