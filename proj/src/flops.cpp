#include "pretrain/flops.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "pretrain/util.hpp"

namespace pretrain {

namespace {

struct NetworkShape {
    double layers, hidden, intermediate, vocab;
    double emb_width;       // LM head output width (tied embeddings)
    bool binary_head;
    double head_positions;  // fraction of positions the head runs on
};

// Matmul-only forward FLOPs for one sequence of length L.
double encoder_flops(const NetworkShape& net, double L) {
    const double h = net.hidden;
    const double projections = 8.0 * L * h * h;          // Q, K, V, O
    const double scores = 4.0 * L * L * h;               // QK^T and probs*V
    const double ff = 4.0 * L * h * net.intermediate;    // two matmuls
    return net.layers * (projections + scores + ff);
}

double head_flops(const NetworkShape& net, double L) {
    if (net.binary_head) return 2.0 * L * net.hidden;
    const double positions = net.head_positions * L;
    double per_position = 2.0 * net.emb_width * net.vocab;
    if (net.emb_width != net.hidden) per_position += 2.0 * net.hidden * net.emb_width;
    return positions * per_position;
}

double embed_forward_flops(const NetworkShape& net, double L) { return L * net.hidden; }

double embed_update_flops(const NetworkShape& net, double L, const CostModel& cost) {
    // Only the touched rows are updated per step (or the whole table, for the
    // alternative accounting).
    return cost.embed_update == EmbedUpdateMode::TouchedRows ? L * net.hidden
                                                             : net.vocab * net.hidden;
}

struct NetworkTotals {
    double encoder = 0.0, head = 0.0, embed = 0.0;
};

NetworkTotals accumulate(const NetworkShape& net, const FlopsRequest& request) {
    NetworkTotals totals;
    const double fwd_bwd = 1.0 + request.cost.backward_multiplier;
    for (const auto& phase : request.phases) {
        const double mult =
            static_cast<double>(phase.steps) * static_cast<double>(request.batch_size);
        const double L = static_cast<double>(phase.max_len);
        totals.encoder += mult * fwd_bwd * encoder_flops(net, L);
        totals.head += mult * fwd_bwd * head_flops(net, L);
        totals.embed += mult * (fwd_bwd * embed_forward_flops(net, L) +
                                embed_update_flops(net, L, request.cost));
    }
    return totals;
}

}  // namespace

FlopsBreakdown estimate(const FlopsRequest& request) {
    const ModelConfig& disc = request.discriminator;
    const bool detection = request.objective == Objective::RTS ||
                           request.objective == Objective::CRTS ||
                           request.objective == Objective::TD_GEN;

    NetworkShape main_net;
    main_net.layers = disc.layers;
    main_net.hidden = disc.hidden;
    main_net.intermediate = disc.intermediate;
    main_net.vocab = disc.vocab_size;
    main_net.emb_width = disc.hidden;
    main_net.binary_head = detection;
    // MLM/SLM need head outputs at the selected positions only; SLM-all needs
    // the whole sequence.
    main_net.head_positions = request.objective == Objective::SLM_ALL ? 1.0 : request.replace_rate;

    FlopsBreakdown out;
    const NetworkTotals main_totals = accumulate(main_net, request);
    out.encoder = main_totals.encoder;
    out.head = main_totals.head;
    out.embed = main_totals.embed;

    const bool wants_generator =
        request.objective == Objective::TD_GEN ||
        (request.objective == Objective::SLM_ALL && request.generator.has_value());
    if (wants_generator) {
        if (!request.generator.has_value())
            throw std::invalid_argument("flops: TD_GEN estimate needs a generator config");
        const ModelConfig& gen = *request.generator;
        NetworkShape gen_net;
        gen_net.layers = gen.layers;
        gen_net.hidden = gen.hidden;
        gen_net.intermediate = gen.intermediate;
        gen_net.vocab = gen.vocab_size;
        gen_net.emb_width = request.cost.tie_generator_embeddings
                                ? static_cast<double>(disc.hidden)
                                : static_cast<double>(gen.hidden);
        gen_net.binary_head = false;
        gen_net.head_positions =
            request.cost.gen_head_all_positions ? 1.0 : request.replace_rate;
        const NetworkTotals gen_totals = accumulate(gen_net, request);
        out.gen_encoder = gen_totals.encoder;
        out.gen_head = gen_totals.head;
        out.gen_embed = gen_totals.embed;
    }
    return out;
}

FlopsRequest paper_scale_request(Objective objective, bool slm_all_two_networks) {
    FlopsRequest request;
    request.objective = objective;

    ModelConfig disc;  // RoBERTa-base shape
    disc.layers = 12;
    disc.hidden = 768;
    disc.heads = 12;
    disc.intermediate = 3072;
    disc.max_len = 512;
    disc.vocab_size = 50265;
    request.discriminator = disc;

    const bool electra_budget =
        objective == Objective::TD_GEN || (objective == Objective::SLM_ALL && slm_all_two_networks);
    if (electra_budget) {
        ModelConfig gen;  // reduced-width generator
        gen.layers = 12;
        gen.hidden = 256;
        gen.heads = 4;
        gen.intermediate = 1024;
        gen.max_len = 512;
        gen.vocab_size = 50265;
        request.generator = gen;
        request.phases = {{689000, 128}, {77000, 512}};
    } else {
        request.phases = {{800000, 128}, {100000, 512}};
    }
    request.batch_size = 256;
    return request;
}

std::string report(const std::vector<ReportRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("flops report: need at least one row");
    std::ostringstream out;
    out << "name                     total_flops      ratio_to_first\n";
    const double base = rows.front().breakdown.total();
    for (const auto& row : rows) {
        char line[128];
        std::snprintf(line, sizeof line, "%-24s %-16.4e %.4f\n", row.name.c_str(),
                      row.breakdown.total(), row.breakdown.total() / base);
        out << line;
    }
    return out.str();
}

std::string report_jsonl(const std::vector<ReportRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("flops report: need at least one row");
    std::ostringstream out;
    const double base = rows.front().breakdown.total();
    for (const auto& row : rows) {
        const auto& b = row.breakdown;
        out << "{\"name\":\"" << row.name << "\",\"total\":" << format_double(b.total())
            << ",\"encoder\":" << format_double(b.encoder) << ",\"head\":" << format_double(b.head)
            << ",\"embed\":" << format_double(b.embed)
            << ",\"generator\":" << format_double(b.generator_total())
            << ",\"ratio_to_first\":" << format_double(b.total() / base) << "}\n";
    }
    return out.str();
}

}  // namespace pretrain
