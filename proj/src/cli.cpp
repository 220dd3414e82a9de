#include "pretrain/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pretrain/batching.hpp"
#include "pretrain/cluster.hpp"
#include "pretrain/crts.hpp"
#include "pretrain/embedding.hpp"
#include "pretrain/flops.hpp"
#include "pretrain/model.hpp"
#include "pretrain/objectives.hpp"
#include "pretrain/synthetic.hpp"
#include "pretrain/train.hpp"
#include "pretrain/util.hpp"
#include "pretrain/vocab.hpp"

namespace pretrain {

namespace {

constexpr const char* kToolVersion = "0.1.0";

namespace fs = std::filesystem;
using nlohmann::json;

struct MissingInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
    if (!file_exists(path)) throw MissingInputError("missing " + what + ": " + path);
}

std::string default_out_dir(std::uint64_t seed) {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&t));
    return "runs/run-" + std::string(stamp) + "-" + std::to_string(seed);
}

// Snapshot of every resolved option plus input hashes; written to the run
// directory before any compute starts.
struct Manifest {
    std::string command;
    std::uint64_t seed = 0;
    json config = json::object();
    json inputs = json::object();
    std::vector<std::string> artifacts;

    void add_input(const std::string& path) {
        inputs[path] = to_hex(fnv1a(read_file(path)));
    }
    void write(const std::string& out_dir) const {
        json doc;
        doc["tool"] = "pretrain";
        doc["version"] = kToolVersion;
        doc["command"] = command;
        doc["seed"] = seed;
        doc["config"] = config;
        doc["inputs"] = inputs;
        doc["artifacts"] = artifacts;
        write_file(out_dir + "/manifest.json", doc.dump(2) + "\n");
    }
};

// Collects resolved option values into the manifest config block.
class OptionRecorder {
public:
    explicit OptionRecorder(CLI::App& app) : app_(app) {}
    json snapshot() const {
        json config = json::object();
        for (const auto* option : app_.get_options()) {
            const std::string name = option->get_single_name();
            if (name == "config" || name == "help") continue;
            if (option->count() > 0 || !option->get_default_str().empty()) {
                config[name] = option->count() > 0 ? option->as<std::string>()
                                                   : option->get_default_str();
            }
        }
        return config;
    }

private:
    CLI::App& app_;
};

void configure_app(CLI::App& app) {
    app.set_config("--config", "", "flat key=value config file");
    app.allow_config_extras(false);
}

void ensure_out_dir(std::string& out_dir, std::uint64_t seed) {
    if (out_dir.empty()) out_dir = default_out_dir(seed);
    fs::create_directories(out_dir);
}

// ------------------------------------------------------------ subcommands

int cmd_gen_corpus(CLI::App& app, std::vector<std::string>& args) {
    SynthConfig cfg;
    std::string out_dir;
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", cfg.seed, "corpus seed")->capture_default_str();
    app.add_option("--words", cfg.vocab_words, "word inventory size")->capture_default_str();
    app.add_option("--topics", cfg.topics, "topic count")->capture_default_str();
    app.add_option("--sentences", cfg.sentences, "sentence count")->capture_default_str();
    app.add_option("--min-words", cfg.min_words, "min sentence length")->capture_default_str();
    app.add_option("--max-words", cfg.max_words, "max sentence length")->capture_default_str();
    app.add_option("--zipf", cfg.zipf_exponent, "zipf exponent")->capture_default_str();
    app.add_option("--markov-prob", cfg.markov_prob, "second-order transition probability")
        ->capture_default_str();
    app.add_option("--candidates", cfg.markov_candidates, "candidates per context")
        ->capture_default_str();
    app.parse(args);

    ensure_out_dir(out_dir, cfg.seed);
    Manifest manifest;
    manifest.command = "gen-corpus";
    manifest.seed = cfg.seed;
    manifest.config = OptionRecorder(app).snapshot();
    manifest.artifacts = {"corpus.txt"};
    manifest.write(out_dir);

    const auto lines = gen_corpus(cfg);
    std::string body;
    for (const auto& line : lines) {
        body += line;
        body += '\n';
    }
    write_file(out_dir + "/corpus.txt", body);
    std::cout << "wrote " << lines.size() << " sentences to " << out_dir << "/corpus.txt\n";
    return kOk;
}

int cmd_build_vocab(CLI::App& app, std::vector<std::string>& args) {
    std::string corpus_path, out_dir;
    std::int64_t max_size = 100000, min_freq = 1;
    std::uint64_t seed = 0;
    app.add_option("--corpus", corpus_path, "corpus file (one document per line)")->required();
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--max-size", max_size, "maximum vocabulary size")->capture_default_str();
    app.add_option("--min-freq", min_freq, "minimum token frequency")->capture_default_str();
    app.add_option("--seed", seed, "run seed (naming only)")->capture_default_str();
    app.parse(args);

    require_file(corpus_path, "corpus");
    ensure_out_dir(out_dir, seed);
    Manifest manifest;
    manifest.command = "build-vocab";
    manifest.seed = seed;
    manifest.config = OptionRecorder(app).snapshot();
    manifest.add_input(corpus_path);
    manifest.artifacts = {"vocab.txt", "vocab.txt.meta"};
    manifest.write(out_dir);

    const Vocab vocab = build_vocab(read_lines(corpus_path), max_size, min_freq);
    save_vocab(vocab, out_dir + "/vocab.txt");
    std::cout << "vocabulary: " << vocab.size() << " tokens (" << vocab.num_specials()
              << " specials)\n";
    return kOk;
}

int cmd_train_embeddings(CLI::App& app, std::vector<std::string>& args) {
    std::string corpus_path, vocab_path, out_dir;
    SgnsConfig cfg;
    app.add_option("--corpus", corpus_path, "corpus file")->required();
    app.add_option("--vocab", vocab_path, "vocab file")->required();
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--dim", cfg.dim, "embedding dimension")->capture_default_str();
    app.add_option("--window", cfg.window, "context window")->capture_default_str();
    app.add_option("--negatives", cfg.negatives, "negative samples")->capture_default_str();
    app.add_option("--epochs", cfg.epochs, "epochs")->capture_default_str();
    app.add_option("--lr", cfg.lr, "initial learning rate")->capture_default_str();
    app.add_option("--seed", cfg.seed, "seed")->capture_default_str();
    app.parse(args);

    require_file(corpus_path, "corpus");
    require_file(vocab_path, "vocab");
    ensure_out_dir(out_dir, cfg.seed);
    Manifest manifest;
    manifest.command = "train-embeddings";
    manifest.seed = cfg.seed;
    manifest.config = OptionRecorder(app).snapshot();
    manifest.add_input(corpus_path);
    manifest.add_input(vocab_path);
    manifest.artifacts = {"embeddings.txt"};
    manifest.write(out_dir);

    const Vocab vocab = load_vocab(vocab_path);
    std::vector<TokenSequence> corpus;
    for (const auto& line : read_lines(corpus_path)) corpus.push_back(encode(vocab, line));
    const EmbeddingTable table = train_sgns(corpus, vocab, cfg);
    save_embeddings(table, out_dir + "/embeddings.txt");
    std::cout << "embeddings: " << table.vocab_size << " x " << table.dim << "\n";
    return kOk;
}

int cmd_cluster(CLI::App& app, std::vector<std::string>& args) {
    std::string embeddings_path, vocab_path, out_dir;
    std::int32_t n = 100, max_iter = 100;
    std::uint64_t seed = 1;
    app.add_option("--embeddings", embeddings_path, "embedding file")->required();
    app.add_option("--vocab", vocab_path, "vocab file")->required();
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--n", n, "cluster count")->capture_default_str();
    app.add_option("--max-iter", max_iter, "Lloyd iteration cap")->capture_default_str();
    app.add_option("--seed", seed, "seed")->capture_default_str();
    app.parse(args);

    require_file(embeddings_path, "embeddings");
    require_file(vocab_path, "vocab");
    ensure_out_dir(out_dir, seed);
    Manifest manifest;
    manifest.command = "cluster";
    manifest.seed = seed;
    manifest.config = OptionRecorder(app).snapshot();
    manifest.add_input(embeddings_path);
    manifest.add_input(vocab_path);
    manifest.artifacts = {"clusters.txt"};
    manifest.write(out_dir);

    const Vocab vocab = load_vocab(vocab_path);
    const EmbeddingTable table = load_embeddings(embeddings_path);
    if (table.vocab_size != vocab.size())
        throw ValidationError("embedding table size does not match the vocabulary");
    const ClusterModel model = kmeans(table, vocab, n, max_iter, seed);
    save_clusters(model, out_dir + "/clusters.txt");
    std::cout << "clusters: " << model.n << ", sse " << format_double(model.sse) << ", "
              << model.sse_history.size() << " iterations\n";
    return kOk;
}

int cmd_pretrain(CLI::App& app, std::vector<std::string>& args) {
    std::string corpus_path, vocab_path, clusters_path, fmatrix_path, resume_path, out_dir;
    std::string objective_name = "rts";
    ModelConfig model;
    ModelConfig gen;
    gen.layers = 2;
    gen.hidden = 32;
    gen.heads = 2;
    gen.intermediate = 128;
    TrainConfig train;
    double gamma = 2.0;
    std::int64_t base_steps = 2000, base_phase2 = 0;
    std::int32_t phase2_len = 0;

    app.add_option("--corpus", corpus_path, "corpus file")->required();
    app.add_option("--vocab", vocab_path, "vocab file")->required();
    app.add_option("--objective", objective_name, "mlm|rts|crts|slm|slm-all|td-gen")
        ->capture_default_str();
    app.add_option("--clusters", clusters_path, "cluster file (crts)");
    app.add_option("--fmatrix", fmatrix_path, "initial F matrix (crts warm start)");
    app.add_option("--gamma", gamma, "gamma-softmax coefficient")->capture_default_str();
    app.add_option("--resume", resume_path, "checkpoint to resume from");
    app.add_option("--out", out_dir, "output directory");

    app.add_option("--layers", model.layers, "encoder layers")->capture_default_str();
    app.add_option("--hidden", model.hidden, "hidden size")->capture_default_str();
    app.add_option("--heads", model.heads, "attention heads")->capture_default_str();
    app.add_option("--intermediate", model.intermediate, "feed-forward size")->capture_default_str();
    app.add_option("--max-len", model.max_len, "sequence length")->capture_default_str();

    app.add_option("--gen-layers", gen.layers, "generator layers")->capture_default_str();
    app.add_option("--gen-hidden", gen.hidden, "generator hidden size")->capture_default_str();
    app.add_option("--gen-heads", gen.heads, "generator heads")->capture_default_str();
    app.add_option("--gen-intermediate", gen.intermediate, "generator feed-forward size")
        ->capture_default_str();

    app.add_option("--steps", base_steps, "base step budget (scaled for generator objectives)")
        ->capture_default_str();
    app.add_option("--phase2-steps", base_phase2, "base steps of the long-sequence phase")
        ->capture_default_str();
    app.add_option("--phase2-len", phase2_len, "long-sequence phase length")->capture_default_str();
    app.add_option("--warmup", train.warmup_steps, "warmup steps")->capture_default_str();
    app.add_option("--batch-size", train.batch_size, "batch size")->capture_default_str();
    app.add_option("--peak-lr", train.peak_lr, "peak learning rate")->capture_default_str();
    app.add_option("--weight-decay", train.weight_decay, "decoupled weight decay")
        ->capture_default_str();
    app.add_option("--clip-norm", train.clip_norm, "gradient clip norm")->capture_default_str();
    app.add_option("--replace-rate", train.objective.replace_rate, "corruption rate")
        ->capture_default_str();
    app.add_option("--disc-weight", train.disc_loss_weight, "TD discriminator loss weight")
        ->capture_default_str();
    app.add_option("--gen-temperature", train.gen_temperature, "generator sampling temperature")
        ->capture_default_str();
    app.add_option("--metrics-every", train.metrics_every, "metrics cadence")->capture_default_str();
    app.add_option("--checkpoint-every", train.checkpoint_every, "checkpoint cadence (0 = final)")
        ->capture_default_str();
    app.add_option("--holdout-frac", train.holdout_frac, "held-out batch fraction")
        ->capture_default_str();
    app.add_option("--seed", train.seed, "run seed")->capture_default_str();
    app.add_option("--threads", train.threads, "worker threads (fast path)")->capture_default_str();
    bool reference = false;
    app.add_flag("--reference", reference, "deterministic 64-bit reference path");
    app.parse(args);

    const Objective objective = objective_from_name(objective_name);
    train.objective.objective = objective;
    train.objective.seed = train.seed;
    train.reference = reference || train.threads == 1;
    train.total_steps = derive_total_steps(objective, base_steps);
    if (base_phase2 > 0) {
        if (phase2_len <= 0) throw ValidationError("--phase2-steps needs --phase2-len");
        train.seq_len_schedule =
            derive_phase_schedule(objective, base_steps, base_phase2, model.max_len, phase2_len);
        if (phase2_len > model.max_len) model.max_len = phase2_len;
    }

    require_file(corpus_path, "corpus");
    require_file(vocab_path, "vocab");
    if (objective == Objective::CRTS && clusters_path.empty())
        throw MissingInputError("missing dependency: objective=crts needs --clusters");
    if (!clusters_path.empty()) require_file(clusters_path, "clusters");
    if (!fmatrix_path.empty()) require_file(fmatrix_path, "fmatrix");
    if (!resume_path.empty()) require_file(resume_path, "checkpoint");

    ensure_out_dir(out_dir, train.seed);
    Manifest manifest;
    manifest.command = "pretrain";
    manifest.seed = train.seed;
    manifest.config = OptionRecorder(app).snapshot();
    manifest.config["derived_total_steps"] = std::to_string(train.total_steps);
    manifest.add_input(corpus_path);
    manifest.add_input(vocab_path);
    if (!clusters_path.empty()) manifest.add_input(clusters_path);
    if (!fmatrix_path.empty()) manifest.add_input(fmatrix_path);
    if (!resume_path.empty()) manifest.add_input(resume_path);
    manifest.artifacts = {"checkpoint_final.bin", "metrics.jsonl"};
    if (objective == Objective::CRTS) manifest.artifacts.push_back("fmatrix.txt");
    manifest.write(out_dir);

    const Vocab vocab = load_vocab(vocab_path);
    std::vector<TokenSequence> corpus;
    for (const auto& line : read_lines(corpus_path)) corpus.push_back(encode(vocab, line));

    model.head = objective == Objective::MLM || objective == Objective::SLM ||
                         objective == Objective::SLM_ALL
                     ? HeadType::LM
                     : HeadType::BINARY;
    gen.max_len = model.max_len;

    PretrainDeps deps;
    deps.gamma = gamma;
    ClusterModel clusters;
    if (!clusters_path.empty()) {
        clusters = load_clusters(clusters_path);
        if (clusters.assignment.size() != static_cast<std::size_t>(vocab.size()))
            throw ValidationError("cluster file does not cover the vocabulary");
        deps.clusters = &clusters;
    }
    if (!fmatrix_path.empty()) deps.initial_f = load_count_matrix(fmatrix_path);
    if (objective == Objective::TD_GEN) deps.generator_config = gen;

    Trainer trainer(corpus, vocab, model, train, deps);
    trainer.checkpoint_dir = out_dir;
    trainer.metrics_path = out_dir + "/metrics.jsonl";
    if (!resume_path.empty()) trainer.restore(load_checkpoint(resume_path));
    trainer.run();

    if (objective == Objective::CRTS)
        save_count_matrix(trainer.count_matrix(), out_dir + "/fmatrix.txt");

    const auto& metrics = trainer.metrics();
    if (!metrics.empty()) {
        const auto& last = metrics.back();
        std::cout << "final step " << last.step << ": loss " << format_double(last.loss);
        if (last.disc_accuracy >= 0.0)
            std::cout << ", held-out balanced acc " << format_double(last.disc_accuracy);
        if (last.replaced_ce >= 0.0)
            std::cout << ", held-out replaced CE " << format_double(last.replaced_ce);
        std::cout << '\n';
    }
    return kOk;
}

int cmd_probe(CLI::App& app, std::vector<std::string>& args) {
    std::string checkpoint_path, clusters_path, vocab_path, corpus_path, out_dir;
    std::int32_t batch_size = 32, max_len = 32, rounds = 1;
    std::uint64_t seed = 1;
    double replace_rate = 0.15;
    app.add_option("--checkpoint", checkpoint_path, "C-RTS checkpoint")->required();
    app.add_option("--clusters", clusters_path, "cluster file")->required();
    app.add_option("--vocab", vocab_path, "vocab file")->required();
    app.add_option("--corpus", corpus_path, "evaluation corpus")->required();
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--batch-size", batch_size, "batch size")->capture_default_str();
    app.add_option("--max-len", max_len, "sequence length")->capture_default_str();
    app.add_option("--rounds", rounds, "corruption rounds per batch")->capture_default_str();
    app.add_option("--replace-rate", replace_rate, "corruption rate")->capture_default_str();
    app.add_option("--seed", seed, "seed")->capture_default_str();
    app.parse(args);

    require_file(checkpoint_path, "checkpoint");
    require_file(clusters_path, "clusters");
    require_file(vocab_path, "vocab");
    require_file(corpus_path, "corpus");
    ensure_out_dir(out_dir, seed);
    Manifest manifest;
    manifest.command = "probe";
    manifest.seed = seed;
    manifest.config = OptionRecorder(app).snapshot();
    manifest.add_input(checkpoint_path);
    manifest.add_input(clusters_path);
    manifest.add_input(vocab_path);
    manifest.add_input(corpus_path);
    manifest.artifacts = {"probe.json"};
    manifest.write(out_dir);

    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    if (ckpt.model_config.head != HeadType::BINARY)
        throw ValidationError("probe needs a BINARY-head checkpoint");
    if (ckpt.f.n == 0) throw ValidationError("probe needs a checkpoint with a count matrix (crts)");
    const Vocab vocab = load_vocab(vocab_path);
    const ClusterModel clusters = load_clusters(clusters_path);

    TransformerParams params = init_params(ckpt.model_config, 0);
    params.data = ckpt.params;

    std::vector<TokenSequence> corpus;
    for (const auto& line : read_lines(corpus_path)) corpus.push_back(encode(vocab, line));
    const auto batches = pack_batches(corpus, vocab, {max_len, batch_size, hash_combine(seed, hash_str("probe.pack"))});

    const ProbeResult result =
        probe_hardness(params, ckpt.f, clusters, vocab, batches, seed, rounds, replace_rate);
    json doc;
    doc["acc_uniform"] = result.acc_uniform;
    doc["acc_crts"] = result.acc_crts;
    doc["positions"] = result.positions;
    write_file(out_dir + "/probe.json", doc.dump(2) + "\n");
    std::cout << "probe: acc_uniform " << format_double(result.acc_uniform) << ", acc_crts "
              << format_double(result.acc_crts) << " over " << result.positions << " positions\n";
    return kOk;
}

int cmd_flops(CLI::App& app, std::vector<std::string>& args) {
    std::string out_dir;
    std::string preset = "paper";
    std::uint64_t seed = 0;
    app.add_option("--preset", preset, "paper (Table-1 shapes)")->capture_default_str();
    app.add_option("--out", out_dir, "optional output directory for the jsonl report");
    app.add_option("--seed", seed, "run seed (naming only)")->capture_default_str();
    app.parse(args);

    if (preset != "paper") throw ValidationError("unknown flops preset: " + preset);

    std::vector<ReportRow> rows;
    rows.push_back({"mlm", estimate(paper_scale_request(Objective::MLM))});
    rows.push_back({"rts", estimate(paper_scale_request(Objective::RTS))});
    rows.push_back({"crts", estimate(paper_scale_request(Objective::CRTS))});
    rows.push_back({"slm", estimate(paper_scale_request(Objective::SLM))});
    rows.push_back({"td-gen", estimate(paper_scale_request(Objective::TD_GEN))});
    rows.push_back({"slm-all-2net", estimate(paper_scale_request(Objective::SLM_ALL, true))});

    std::cout << report(rows);
    if (!out_dir.empty()) {
        ensure_out_dir(out_dir, seed);
        Manifest manifest;
        manifest.command = "flops";
        manifest.seed = seed;
        manifest.config = OptionRecorder(app).snapshot();
        manifest.artifacts = {"flops.jsonl"};
        manifest.write(out_dir);
        write_file(out_dir + "/flops.jsonl", report_jsonl(rows));
    }
    return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    if (args.empty()) {
        std::cerr << "usage: pretrain <gen-corpus|build-vocab|train-embeddings|cluster|pretrain|"
                     "probe|flops> [options]\n";
        return kUsage;
    }
    const std::string command = args[0];
    std::vector<std::string> rest(args.begin() + 1, args.end());
    // CLI11 consumes arguments in reverse.
    std::reverse(rest.begin(), rest.end());

    try {
        CLI::App app{std::string("pretrain ") + command};
        configure_app(app);
        if (command == "gen-corpus") return cmd_gen_corpus(app, rest);
        if (command == "build-vocab") return cmd_build_vocab(app, rest);
        if (command == "train-embeddings") return cmd_train_embeddings(app, rest);
        if (command == "cluster") return cmd_cluster(app, rest);
        if (command == "pretrain") return cmd_pretrain(app, rest);
        if (command == "probe") return cmd_probe(app, rest);
        if (command == "flops") return cmd_flops(app, rest);
        std::cerr << "unknown command: " << command << '\n';
        return kUsage;
    } catch (const CLI::CallForHelp& e) {
        std::cout << e.what() << '\n';
        return kOk;
    } catch (const CLI::ParseError& e) {
        std::cerr << "argument error: " << e.what() << '\n';
        return kUsage;
    } catch (const MissingInputError& e) {
        std::cerr << e.what() << '\n';
        return kMissingInput;
    } catch (const ValidationError& e) {
        std::cerr << e.what() << '\n';
        return kValidation;
    } catch (const std::invalid_argument& e) {
        std::cerr << e.what() << '\n';
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return kRuntime;
    }
}

}  // namespace pretrain
