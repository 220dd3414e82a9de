#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pretrain/batching.hpp"
#include "pretrain/cluster.hpp"
#include "pretrain/crts.hpp"
#include "pretrain/model.hpp"
#include "pretrain/objectives.hpp"
#include "pretrain/vocab.hpp"

namespace pretrain {

struct PhaseSpec {
    std::int64_t steps = 0;
    std::int32_t max_len = 0;
};

struct TrainConfig {
    double peak_lr = 1e-4;
    double adam_eps = 1e-8;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    // ELECTRA's published discriminator loss weight for joint TD training.
    double disc_loss_weight = 50.0;
    double gen_temperature = 1.0;
    std::int64_t warmup_steps = 100;
    std::int64_t total_steps = 2000;
    std::int32_t batch_size = 32;
    std::uint64_t seed = 1;
    ObjectiveConfig objective;
    // Sequence-length phases; empty means one phase at the model's max_len.
    std::vector<PhaseSpec> seq_len_schedule;
    std::int64_t metrics_every = 50;
    std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
    double holdout_frac = 0.05;         // trailing batches reserved for eval
    int threads = 1;
    bool reference = true;  // deterministic path: single shard, wall_ms zeroed

    void validate() const;
};

// Linear warmup 0 -> peak over warmup_steps, then linear decay to 0 at
// total_steps. The training loop evaluates this at (step + 1) so the first
// optimizer step has a nonzero rate.
double lr_at(std::int64_t step, const TrainConfig& config);

// TD objectives carry a generator, so their step budget shrinks by the
// published 766/900 ratio; two-phase schedules split 689/77.
std::int64_t derive_total_steps(Objective objective, std::int64_t base_steps);
std::vector<PhaseSpec> derive_phase_schedule(Objective objective, std::int64_t base_total,
                                             std::int64_t base_phase2, std::int32_t len1,
                                             std::int32_t len2);

struct AdamState {
    std::vector<double> m, v;
    std::int64_t t = 0;
};

// Bias-corrected Adam with decoupled weight decay on decay-flagged segments
// (everything except biases and layer-norm parameters). Throws with the
// parameter path on a non-finite gradient.
void adam_step(TransformerParams& params, const std::vector<double>& grads, AdamState& state,
               double lr, const TrainConfig& config);

// Global-norm gradient clipping; returns the pre-clip norm.
double clip_gradients(std::vector<double>& grads, double max_norm);

struct MetricsRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    // Balanced held-out accuracy over original/replaced classes, binary
    // objectives only (chance level 0.5).
    double disc_accuracy = -1.0;
    // Held-out accuracy and cross-entropy at replaced positions, LM
    // objectives only.
    double replaced_accuracy = -1.0;
    double replaced_ce = -1.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

std::string metrics_to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const std::string& line);

struct Checkpoint {
    std::uint32_t version = 1;
    Objective objective = Objective::RTS;
    std::uint64_t seed = 0;
    std::int64_t step = 0;
    ModelConfig model_config;
    std::vector<double> params, m, v;
    bool has_generator = false;
    ModelConfig gen_config;
    std::vector<double> gen_params, gen_m, gen_v;
    CountMatrix f;  // n == 0 when the objective keeps no count matrix
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct PretrainDeps {
    const ClusterModel* clusters = nullptr;        // required for CRTS
    double gamma = 2.0;                            // CRTS gamma when F starts fresh
    std::optional<CountMatrix> initial_f;          // resume / warm start
    std::optional<ModelConfig> generator_config;   // required for TD_GEN
};

// Per-step view for tests and metrics hooks.
struct StepObservation {
    std::int64_t step = 0;
    double loss = 0.0;
    std::int64_t corrupted_positions = 0;
    std::int64_t f_update_magnitude = 0;   // sum |delta| applied to F this step
    const CountMatrix* f = nullptr;        // post-update, CRTS only
    const CorruptedBatch* batch = nullptr; // the step's training batch
};

class Trainer {
public:
    Trainer(const std::vector<TokenSequence>& corpus, const Vocab& vocab,
            const ModelConfig& model_config, const TrainConfig& config, const PretrainDeps& deps);

    // Restores parameters, moments, F, and the step counter. The checkpoint
    // must match the configured model, objective, and seed.
    void restore(const Checkpoint& ckpt);

    // Advances training to target_step (capped at total_steps), emitting a
    // metrics record every metrics_every steps and checkpoints per config.
    void run_to(std::int64_t target_step);
    void run() { run_to(config_.total_steps); }

    Checkpoint make_checkpoint() const;

    const TransformerParams& params() const { return params_; }
    const CountMatrix& count_matrix() const { return f_; }
    const std::vector<MetricsRecord>& metrics() const { return metrics_; }
    std::int64_t step() const { return step_; }
    const Vocab& vocab() const { return vocab_; }

    // Held-out batches of the phase active at `step` (never trained on).
    const std::vector<Batch>& holdout_batches() const;

    std::string checkpoint_dir;  // empty = keep checkpoints in memory only
    std::string metrics_path;    // empty = no metrics file
    std::function<void(const StepObservation&)> observer;

    // Held-out evaluation helpers (also used by the acceptance suite).
    double holdout_balanced_accuracy(std::uint64_t eval_salt) const;
    struct LmEval {
        double replaced_ce = 0.0;
        double replaced_accuracy = 0.0;
    };
    LmEval holdout_lm_eval(std::uint64_t eval_salt) const;

private:
    struct PhaseData {
        PhaseSpec spec;
        std::int64_t first_step = 0;
        std::vector<Batch> train;
        std::vector<Batch> holdout;
    };

    const PhaseData& phase_at(std::int64_t step) const;
    CorruptedBatch corrupt_for_step(const Batch& batch, std::int64_t step) const;
    void emit_metrics(std::int64_t step, double loss);
    void maybe_checkpoint(std::int64_t step);

    std::vector<TokenSequence> corpus_;
    const Vocab& vocab_;
    TrainConfig config_;
    PretrainDeps deps_;
    std::vector<PhaseData> phases_;

    TransformerParams params_;
    AdamState opt_;
    std::optional<TransformerParams> gen_params_;
    std::optional<AdamState> gen_opt_;
    CountMatrix f_;
    std::int64_t step_ = 0;
    std::vector<MetricsRecord> metrics_;
};

struct ProbeResult {
    double acc_uniform = 0.0;
    double acc_crts = 0.0;
    std::int64_t positions = 0;
};

// Discriminator accuracy at replaced positions under (a) uniform-random and
// (b) C-RTS replacements, measured on the same positions with the same seeds.
// Requires a BINARY-head model.
ProbeResult probe_hardness(const TransformerParams& params, const CountMatrix& cm,
                           const ClusterModel& clusters, const Vocab& vocab,
                           const std::vector<Batch>& eval_batches, std::uint64_t seed,
                           int rounds = 1, double replace_rate = 0.15);

}  // namespace pretrain
