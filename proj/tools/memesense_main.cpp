// Command-line front end for the meme-intervention pipeline: data synthesis
// and ingestion, commonsense tagging, exemplar retrieval, steering-vector
// distillation, inference, evaluation, probes, and runtime benchmarks.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "memesense/corpus.hpp"
#include "memesense/csv_trainer.hpp"
#include "memesense/evaluation.hpp"
#include "memesense/inference.hpp"
#include "memesense/model.hpp"
#include "memesense/retrieval.hpp"
#include "memesense/tagger.hpp"

namespace {

using nlohmann::json;
using namespace memesense;

// ---------------------------------------------------------------------------
// Config file: one JSON object; command-line flags override its values.
// ---------------------------------------------------------------------------

const std::set<std::string>& known_config_fields() {
    static const std::set<std::string> fields = {
        "paths.corpus", "paths.tagger", "paths.index", "paths.icl",
        "paths.model", "paths.shifts", "paths.predictions", "paths.baseline",
        "paths.report", "paths.probe", "paths.bench", "paths.tags",
        "model.n_layers", "model.d_model", "model.n_heads", "model.max_seq",
        "model.img_prefix_len", "model.seed",
        "synth.n", "synth.d_img", "synth.clusters",
        "tagger.threshold", "tagger.learning_rate", "tagger.epochs",
        "retrieval.strategy", "retrieval.k", "retrieval.c",
        "lm.epochs", "lm.batch", "lm.learning_rate",
        "csv.gamma", "csv.learning_rate", "csv.epochs", "csv.batch",
        "csv.init_sigma",
        "infer.mode", "infer.commonsense", "infer.max_new_tokens",
        "probe.layer", "probe.pairs", "probe.top_pairs", "probe.max_members",
        "bench.limit",
        "seed",
    };
    return fields;
}

class Settings {
public:
    static Settings from_file(const std::string& path) {
        Settings s;
        if (path.empty()) return s;
        std::ifstream in(path);
        if (!in) throw std::runtime_error("missing artifact: " + path);
        try {
            in >> s.root_;
        } catch (const json::exception& e) {
            throw std::runtime_error("config " + path + ": " + e.what());
        }
        if (!s.root_.is_object()) {
            throw std::runtime_error("config field <root>: expected an object");
        }
        s.ensure_known();
        return s;
    }

    bool has(const std::string& dotted) const {
        return find(dotted) != nullptr;
    }

    template <typename T>
    T get(const std::string& dotted) const;

private:
    const json* find(const std::string& dotted) const {
        const json* node = &root_;
        std::istringstream parts(dotted);
        std::string key;
        while (std::getline(parts, key, '.')) {
            if (!node->is_object() || !node->contains(key)) return nullptr;
            node = &node->at(key);
        }
        return node;
    }

    void ensure_known() const {
        std::vector<std::pair<std::string, const json*>> stack = {
            {"", &root_}};
        while (!stack.empty()) {
            auto [prefix, node] = stack.back();
            stack.pop_back();
            for (const auto& [key, value] : node->items()) {
                const std::string path =
                    prefix.empty() ? key : prefix + "." + key;
                if (value.is_object()) {
                    stack.emplace_back(path, &value);
                } else if (known_config_fields().count(path) == 0) {
                    throw std::runtime_error("config field " + path +
                                             " is not recognized");
                }
            }
        }
    }

    json root_ = json::object();
};

template <>
std::string Settings::get<std::string>(const std::string& dotted) const {
    const json* node = find(dotted);
    if (node == nullptr || !node->is_string()) {
        throw std::runtime_error("config field " + dotted +
                                 ": expected a string");
    }
    return node->get<std::string>();
}

template <>
std::size_t Settings::get<std::size_t>(const std::string& dotted) const {
    const json* node = find(dotted);
    if (node == nullptr || !node->is_number_integer() ||
        (node->is_number_integer() && node->get<long long>() < 0)) {
        throw std::runtime_error("config field " + dotted +
                                 ": expected a non-negative integer");
    }
    return node->get<std::size_t>();
}

template <>
double Settings::get<double>(const std::string& dotted) const {
    const json* node = find(dotted);
    if (node == nullptr || !node->is_number()) {
        throw std::runtime_error("config field " + dotted +
                                 ": expected a number");
    }
    return node->get<double>();
}

// Flags win over config values; config values win over built-in defaults.
template <typename T>
void fill(const CLI::App* cmd, const std::string& flag, T& var,
          const Settings& s, const std::string& path) {
    if (cmd->count(flag) == 0 && s.has(path)) var = s.get<T>(path);
}

std::string need_path(const CLI::App* cmd, const std::string& flag,
                      std::string flag_val, const Settings& s,
                      const std::string& cfg_path) {
    fill(cmd, flag, flag_val, s, cfg_path);
    if (flag_val.empty()) {
        throw std::runtime_error("missing " + flag + " (or config " +
                                 cfg_path + ")");
    }
    return flag_val;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
    if (!out) throw std::runtime_error("cannot write " + path);
}

model::DemoInput demo_input(const corpus::Corpus& c,
                            const retrieval::Demonstration& demo) {
    const auto& record = c.at(demo.record_id);
    return {record.image_features, demo.commonsense, demo.intervention};
}

model::ModelConfig model_config_from(const CLI::App* cmd, const Settings& s,
                                     std::size_t d_img,
                                     model::ModelConfig cfg) {
    fill(cmd, "--layers", cfg.n_layers, s, "model.n_layers");
    fill(cmd, "--d-model", cfg.d_model, s, "model.d_model");
    fill(cmd, "--heads", cfg.n_heads, s, "model.n_heads");
    fill(cmd, "--max-seq", cfg.max_seq, s, "model.max_seq");
    fill(cmd, "--img-prefix", cfg.img_prefix_len, s, "model.img_prefix_len");
    fill(cmd, "--model-seed", cfg.seed, s, "model.seed");
    cfg.d_img = d_img;
    return cfg;
}

// Retrieval context shared by infer --mode kshot and bench: the index is
// loaded only when the strategy needs one.
struct RetrievalContext {
    retrieval::Strategy strategy = retrieval::Strategy::image;
    std::size_t k = 4;
    std::size_t c = 2;
    std::optional<retrieval::EmbeddingIndex> index;
    std::optional<retrieval::LookupSet> lookup;

    retrieval::InContextSet demos_for(const corpus::Corpus& corpus,
                                      const corpus::MemeRecord& anchor,
                                      std::size_t k_now,
                                      std::uint64_t seed) const {
        if (k_now == 0) {
            retrieval::InContextSet empty;
            empty.anchor_id = anchor.id;
            empty.strategy = strategy;
            return empty;
        }
        return retrieval::retrieve(corpus,
                                   index.has_value() ? &*index : nullptr,
                                   lookup.has_value() ? &*lookup : nullptr,
                                   anchor, strategy, k_now, c, seed);
    }
};

RetrievalContext make_retrieval_context(const corpus::Corpus& corpus,
                                        const std::string& strategy_name,
                                        std::size_t k, std::size_t c,
                                        const std::string& index_path) {
    RetrievalContext ctx;
    ctx.strategy = retrieval::parse_strategy(strategy_name);
    ctx.k = k;
    ctx.c = c;
    const bool needs_index = ctx.strategy == retrieval::Strategy::image ||
                             ctx.strategy == retrieval::Strategy::combined;
    if (needs_index) {
        if (index_path.empty()) {
            throw std::runtime_error("strategy '" + strategy_name +
                                     "' needs --index (or config paths.index)");
        }
        ctx.index = retrieval::EmbeddingIndex::load(index_path);
    }
    const bool needs_lookup =
        ctx.strategy == retrieval::Strategy::commonsense ||
        ctx.strategy == retrieval::Strategy::combined;
    if (needs_lookup) ctx.lookup = retrieval::build_lookup(corpus);
    return ctx;
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

void run_synth(const CLI::App* cmd, const Settings& s, std::size_t n,
               std::size_t d_img, std::size_t clusters, std::uint64_t seed,
               std::string out) {
    fill(cmd, "--n", n, s, "synth.n");
    fill(cmd, "--d-img", d_img, s, "synth.d_img");
    fill(cmd, "--clusters", clusters, s, "synth.clusters");
    fill(cmd, "--seed", seed, s, "seed");
    out = need_path(cmd, "--out", out, s, "paths.corpus");

    const auto corpus = corpus::synth_generate(
        {.n = n, .d_img = d_img, .n_clusters = clusters, .seed = seed});
    corpus::write_corpus(corpus, out);
    std::cout << "wrote " << out << ": n=" << corpus.size()
              << " train=" << corpus.train_records().size()
              << " test=" << corpus.test_records().size()
              << " d_img=" << corpus.d_img() << "\n";
}

void run_ingest(const CLI::App* cmd, const Settings& s, std::string in,
                const std::string& out, bool stats) {
    in = need_path(cmd, "--in", in, s, "paths.corpus");
    const auto corpus = corpus::load_corpus(in);
    std::cout << "corpus " << in << ": n=" << corpus.size()
              << " train=" << corpus.train_records().size()
              << " test=" << corpus.test_records().size()
              << " d_img=" << corpus.d_img() << "\n";
    if (stats) {
        std::cout << corpus::stats_to_json(corpus::compute_stats(corpus))
                  << "\n";
    }
    if (!out.empty()) {
        corpus::write_corpus(corpus, out);
        std::cout << "wrote " << out << "\n";
    }
}

void run_tag_train(const CLI::App* cmd, const Settings& s, std::string corpus_path,
                   std::string out, double threshold, double lr,
                   std::size_t epochs) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    out = need_path(cmd, "--out", out, s, "paths.tagger");
    fill(cmd, "--threshold", threshold, s, "tagger.threshold");
    fill(cmd, "--lr", lr, s, "tagger.learning_rate");
    fill(cmd, "--epochs", epochs, s, "tagger.epochs");

    const auto corpus = corpus::load_corpus(corpus_path);
    tagger::TaggerModel model({.d_img = corpus.d_img(),
                               .threshold = threshold,
                               .learning_rate = lr,
                               .epochs = epochs,
                               .seed = 0});
    const auto result = tagger::train(model, corpus.train_records());
    tagger::save_tagger(model, out);
    std::cout << "tagger " << out << ": epochs=" << result.epoch_loss.size()
              << " final_bce=" << result.epoch_loss.back()
              << " train_f1=" << tagger::micro_f1(model, corpus.train_records())
              << " test_f1=" << tagger::micro_f1(model, corpus.test_records())
              << "\n";
}

void run_tag(const CLI::App* cmd, const Settings& s, std::string corpus_path,
             std::string tagger_path, std::string out,
             const std::string& split) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    tagger_path = need_path(cmd, "--tagger", tagger_path, s, "paths.tagger");
    out = need_path(cmd, "--out", out, s, "paths.tags");

    const auto corpus = corpus::load_corpus(corpus_path);
    const auto model = tagger::load_tagger(tagger_path);

    std::vector<const corpus::MemeRecord*> records;
    if (split == "train") {
        records = corpus.train_records();
    } else if (split == "test") {
        records = corpus.test_records();
    } else if (split == "all") {
        for (const auto& r : corpus.records()) records.push_back(&r);
    } else {
        throw std::runtime_error("unknown --split '" + split +
                                 "' (expected train|test|all)");
    }

    json rows = json::array();
    for (const auto* r : records) {
        json row = json::object();
        row["id"] = r->id;
        json params = json::array();
        for (auto p : model.predict(*r)) params.push_back(corpus::name(p));
        row["params"] = params;
        rows.push_back(row);
    }
    write_text(out, rows.dump(2) + "\n");
    std::cout << "tagged " << records.size() << " records -> " << out << "\n";
}

void run_index(const CLI::App* cmd, const Settings& s, std::string corpus_path,
               std::string out) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    out = need_path(cmd, "--out", out, s, "paths.index");
    const auto corpus = corpus::load_corpus(corpus_path);
    const auto index = retrieval::EmbeddingIndex::build(corpus);
    index.save(out);
    std::cout << "index " << out << ": rows=" << index.size()
              << " d_img=" << index.d_img() << "\n";
}

void run_icl_build(const CLI::App* cmd, const Settings& s,
                   std::string corpus_path, std::string out,
                   std::string strategy, std::size_t k, std::size_t c,
                   std::uint64_t seed) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    out = need_path(cmd, "--out", out, s, "paths.icl");
    fill(cmd, "--strategy", strategy, s, "retrieval.strategy");
    fill(cmd, "--k", k, s, "retrieval.k");
    fill(cmd, "--c", c, s, "retrieval.c");
    fill(cmd, "--seed", seed, s, "seed");

    const auto corpus = corpus::load_corpus(corpus_path);
    const auto sets = retrieval::build_icl_dataset(
        corpus, retrieval::parse_strategy(strategy), k, c, seed);
    retrieval::save_icl(sets, out);
    std::cout << "icl " << out << ": sets=" << sets.size()
              << " strategy=" << strategy << " k=" << k << " c=" << c << "\n";
}

void run_train_csv(const CLI::App* cmd, const Settings& s,
                   std::string corpus_path, std::string icl_path,
                   std::string out_model, std::string out_shifts,
                   model::ModelConfig base_cfg, std::size_t lm_epochs,
                   std::size_t lm_batch, double lm_lr, double gamma,
                   double csv_lr, std::size_t csv_epochs,
                   std::size_t csv_batch, double init_sigma,
                   std::uint64_t seed) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    icl_path = need_path(cmd, "--icl", icl_path, s, "paths.icl");
    out_model = need_path(cmd, "--out-model", out_model, s, "paths.model");
    out_shifts = need_path(cmd, "--out-shifts", out_shifts, s, "paths.shifts");
    fill(cmd, "--lm-epochs", lm_epochs, s, "lm.epochs");
    fill(cmd, "--lm-batch", lm_batch, s, "lm.batch");
    fill(cmd, "--lm-lr", lm_lr, s, "lm.learning_rate");
    fill(cmd, "--gamma", gamma, s, "csv.gamma");
    fill(cmd, "--csv-lr", csv_lr, s, "csv.learning_rate");
    fill(cmd, "--csv-epochs", csv_epochs, s, "csv.epochs");
    fill(cmd, "--csv-batch", csv_batch, s, "csv.batch");
    fill(cmd, "--init-sigma", init_sigma, s, "csv.init_sigma");
    fill(cmd, "--seed", seed, s, "seed");

    const auto corpus = corpus::load_corpus(corpus_path);
    const auto sets = retrieval::load_icl(icl_path);

    auto tok = model::Tokenizer::build(corpus);
    const auto cfg = model_config_from(cmd, s, corpus.d_img(), base_cfg);
    model::Model m(cfg, std::move(tok));

    // The base model learns the task in exactly the form the teacher will
    // see it: every training sequence carries its retrieved demonstrations,
    // and the loss covers only the anchor's response. Demonstration-free
    // behavior is left to the steering vectors.
    std::vector<model::PromptEncoding> encodings;
    encodings.reserve(sets.size());
    for (const auto& set : sets) {
        const auto& anchor = corpus.at(set.anchor_id);
        std::vector<model::DemoInput> demos;
        demos.reserve(set.demonstrations.size());
        for (const auto& d : set.demonstrations) {
            demos.push_back(demo_input(corpus, d));
        }
        encodings.push_back(model::encode_prompt(
            m.tokenizer(), m.config(), anchor.image_features,
            anchor.commonsense, demos, anchor.intervention));
    }
    const auto lm_report = model::train_lm(
        m, encodings,
        {.epochs = lm_epochs, .batch_size = lm_batch, .learning_rate = lm_lr,
         .seed = seed});
    m.save(out_model);

    const auto pairs = csv_trainer::build_distillation_set(m, corpus, sets);
    const auto trained = csv_trainer::distill(
        m, pairs,
        {.gamma = gamma, .learning_rate = csv_lr, .epochs = csv_epochs,
         .batch_size = csv_batch, .init_sigma = init_sigma, .seed = seed});
    csv_trainer::save_shifts(
        out_shifts, trained.shifts,
        {.gamma = gamma, .seed = seed, .epochs = csv_epochs});

    double match = 0.0;
    for (const auto& pair : pairs) {
        const auto student = m.response_distributions(pair.student, &trained.shifts);
        match += csv_trainer::match_rate(pair.teacher_rows, student);
    }
    match /= static_cast<double>(pairs.size());

    std::cout << "base model " << out_model
              << ": lm_loss=" << lm_report.epoch_loss.front() << " -> "
              << lm_report.epoch_loss.back() << " ("
              << lm_report.epoch_loss.size() << " epochs)\n";
    std::cout << "shifts " << out_shifts
              << ": total=" << trained.report.epoch_loss.front().total
              << " -> " << trained.report.epoch_loss.back().total
              << " teacher_match=" << match << "\n";
}

void run_infer(const CLI::App* cmd, const Settings& s,
               std::string corpus_path, std::string model_path,
               std::string shifts_path, std::string index_path,
               std::string tagger_path, std::string mode, std::string cs,
               std::string strategy, std::size_t k, std::size_t c,
               std::size_t max_new, std::uint64_t seed, std::string out) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    model_path = need_path(cmd, "--model", model_path, s, "paths.model");
    out = need_path(cmd, "--out", out, s, "paths.predictions");
    fill(cmd, "--shifts", shifts_path, s, "paths.shifts");
    fill(cmd, "--index", index_path, s, "paths.index");
    fill(cmd, "--tagger", tagger_path, s, "paths.tagger");
    fill(cmd, "--mode", mode, s, "infer.mode");
    fill(cmd, "--cs", cs, s, "infer.commonsense");
    fill(cmd, "--strategy", strategy, s, "retrieval.strategy");
    fill(cmd, "--k", k, s, "retrieval.k");
    fill(cmd, "--c", c, s, "retrieval.c");
    fill(cmd, "--max-new", max_new, s, "infer.max_new_tokens");
    fill(cmd, "--seed", seed, s, "seed");

    const auto corpus = corpus::load_corpus(corpus_path);
    const auto m = model::Model::load(model_path);
    const auto test = corpus.test_records();
    if (test.empty()) throw std::runtime_error("corpus has no test records");

    auto cs_mode = inference::commonsense_mode_from_string(cs);
    std::optional<tagger::TaggerModel> tag_model;
    if (cs_mode == inference::CommonsenseMode::tagger) {
        if (tagger_path.empty()) {
            throw std::runtime_error(
                "--cs tagger needs --tagger (or config paths.tagger)");
        }
        tag_model = tagger::load_tagger(tagger_path);
    }

    const bool kshot = mode == "kshot";
    std::optional<RetrievalContext> retr;
    model::LayerShifts shifts;
    if (kshot) {
        retr = make_retrieval_context(corpus, strategy, k, c, index_path);
    } else {
        if (shifts_path.empty()) {
            throw std::runtime_error("--mode " + mode +
                                     " needs --shifts (or config paths.shifts)");
        }
        shifts = csv_trainer::load_shifts(shifts_path).shifts;
        if (mode == "full") {
            // as loaded
        } else if (mode == "no-cs") {
            cs_mode = inference::CommonsenseMode::none;
        } else if (mode == "random-cs") {
            cs_mode = inference::CommonsenseMode::random;
        } else if (mode == "alpha1") {
            std::fill(shifts.alpha.begin(), shifts.alpha.end(), 1.0);
        } else {
            throw std::runtime_error(
                "unknown --mode '" + mode +
                "' (expected full|no-cs|random-cs|alpha1|kshot)");
        }
    }

    std::ostringstream lines;
    for (const auto* record : test) {
        inference::GenerationResult result;
        if (kshot) {
            const auto demos = retr->demos_for(corpus, *record, k, seed);
            result = inference::kshot_generate(m, corpus, *record, demos,
                                               max_new);
        } else {
            inference::InferenceRequest req;
            req.record = record;
            req.commonsense_mode = cs_mode;
            req.shift = &shifts;
            req.tagger = tag_model.has_value() ? &*tag_model : nullptr;
            req.max_new_tokens = max_new;
            req.seed = seed;
            result = inference::generate_intervention(m, corpus, req);
        }
        // Timing stays out of the prediction rows (bench owns runtime
        // reporting) so reruns with the same seeds are byte-identical.
        json row = json::object();
        row["id"] = record->id;
        row["prediction"] = result.text;
        row["prompt_tokens"] = result.profile.prompt_tokens;
        lines << row.dump() << "\n";
    }
    write_text(out, lines.str());
    std::cout << "wrote " << test.size() << " predictions -> " << out << "\n";
}

std::vector<evaluation::Prediction> load_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing artifact: " + path);
    std::vector<evaluation::Prediction> predictions;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json row;
        try {
            row = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": " + e.what());
        }
        if (!row.is_object() || !row.contains("id") ||
            !row.contains("prediction") || !row.at("id").is_string() ||
            !row.at("prediction").is_string()) {
            throw std::runtime_error(
                path + ":" + std::to_string(line_no) +
                ": expected an object with string id and prediction");
        }
        predictions.push_back({row.at("id").get<std::string>(),
                               row.at("prediction").get<std::string>()});
    }
    return predictions;
}

void run_evaluate(const CLI::App* cmd, const Settings& s,
                  std::string corpus_path, std::string model_path,
                  std::string predictions_path, std::string baseline_path,
                  std::string out) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    model_path = need_path(cmd, "--model", model_path, s, "paths.model");
    predictions_path = need_path(cmd, "--predictions", predictions_path, s,
                                 "paths.predictions");
    out = need_path(cmd, "--out", out, s, "paths.report");
    fill(cmd, "--baseline", baseline_path, s, "paths.baseline");

    const auto corpus = corpus::load_corpus(corpus_path);
    const auto m = model::Model::load(model_path);
    const auto embed = evaluation::make_model_embedder(m);

    auto report =
        evaluation::evaluate(load_predictions(predictions_path), corpus, embed);
    if (!baseline_path.empty()) {
        const auto baseline = evaluation::evaluate(
            load_predictions(baseline_path), corpus, embed);
        report.significance = evaluation::compare_semantic(report, baseline);
    }
    write_text(out, evaluation::report_to_json(report).dump(2) + "\n");

    std::cout << "report " << out << ": n=" << report.n
              << " bleu4=" << report.aggregate.bleu4
              << " rouge_l=" << report.aggregate.rouge_l
              << " flesch=" << report.aggregate.flesch
              << " sem_sim=" << report.aggregate.semantic_similarity
              << " matchscore=" << report.aggregate.matchscore;
    if (report.significance.has_value()) {
        std::cout << " U=" << report.significance->u_statistic
                  << " p=" << report.significance->p_value;
    }
    std::cout << "\n";
}

void run_probe(const CLI::App* cmd, const Settings& s,
               std::string corpus_path, std::string model_path,
               std::string shifts_path, std::size_t layer, std::size_t pairs,
               std::size_t top_pairs, std::size_t max_members,
               std::uint64_t seed, std::string out) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    model_path = need_path(cmd, "--model", model_path, s, "paths.model");
    out = need_path(cmd, "--out", out, s, "paths.probe");
    fill(cmd, "--shifts", shifts_path, s, "paths.shifts");
    fill(cmd, "--layer", layer, s, "probe.layer");
    fill(cmd, "--pairs", pairs, s, "probe.pairs");
    fill(cmd, "--top-pairs", top_pairs, s, "probe.top_pairs");
    fill(cmd, "--max-members", max_members, s, "probe.max_members");
    fill(cmd, "--seed", seed, s, "seed");

    const auto corpus = corpus::load_corpus(corpus_path);
    const auto m = model::Model::load(model_path);
    if (layer == 0) layer = m.config().n_layers;  // default: last layer

    std::optional<model::LayerShifts> shifts;
    if (!shifts_path.empty()) {
        shifts = csv_trainer::load_shifts(shifts_path).shifts;
    }
    const model::LayerShifts* shift_ptr =
        shifts.has_value() ? &*shifts : nullptr;

    const auto wb = evaluation::probe_within_between(m, corpus, layer, pairs,
                                                     seed, shift_ptr);
    const auto co = evaluation::probe_cooccurrence(
        m, corpus, layer, top_pairs, max_members, seed, shift_ptr);

    nlohmann::ordered_json doc;
    doc["layer"] = layer;
    doc["within_between"] = {{"within", wb.within},
                             {"between", wb.between},
                             {"n_pairs", wb.n_pairs}};
    nlohmann::ordered_json pair_rows = nlohmann::ordered_json::array();
    for (const auto& p : co.pairs) {
        pair_rows.push_back({{"a", corpus::name(p.a)},
                             {"b", corpus::name(p.b)},
                             {"count", p.count},
                             {"mean_distance", p.mean_distance}});
    }
    doc["cooccurrence"] = {{"spearman", co.spearman}, {"pairs", pair_rows}};
    write_text(out, doc.dump(2) + "\n");

    std::cout << "probe " << out << ": layer=" << layer
              << " within=" << wb.within << " between=" << wb.between
              << " cooccurrence_spearman=" << co.spearman << "\n";
}

void run_bench(const CLI::App* cmd, const Settings& s,
               std::string corpus_path, std::string model_path,
               std::string shifts_path, std::string index_path,
               std::string strategy, std::size_t c, std::size_t limit,
               std::size_t max_new, std::uint64_t seed, std::string out) {
    corpus_path = need_path(cmd, "--corpus", corpus_path, s, "paths.corpus");
    model_path = need_path(cmd, "--model", model_path, s, "paths.model");
    shifts_path = need_path(cmd, "--shifts", shifts_path, s, "paths.shifts");
    fill(cmd, "--index", index_path, s, "paths.index");
    fill(cmd, "--strategy", strategy, s, "retrieval.strategy");
    fill(cmd, "--c", c, s, "retrieval.c");
    fill(cmd, "--limit", limit, s, "bench.limit");
    fill(cmd, "--max-new", max_new, s, "infer.max_new_tokens");
    fill(cmd, "--seed", seed, s, "seed");

    const auto corpus = corpus::load_corpus(corpus_path);
    const auto m = model::Model::load(model_path);
    const auto shifts = csv_trainer::load_shifts(shifts_path).shifts;
    auto records = corpus.test_records();
    if (records.empty()) throw std::runtime_error("corpus has no test records");
    if (limit > 0 && records.size() > limit) records.resize(limit);

    const auto ctx =
        make_retrieval_context(corpus, strategy, 8, c, index_path);

    struct Row {
        std::string mode;
        double prompt_tokens = 0.0;  // mean per record
        double wall_seconds = 0.0;   // total
    };
    std::vector<Row> rows;

    for (std::size_t k : {0u, 1u, 2u, 4u, 8u}) {
        Row row;
        row.mode = "k=" + std::to_string(k);
        for (const auto* record : records) {
            const auto demos = ctx.demos_for(corpus, *record, k, seed);
            const auto result =
                inference::kshot_generate(m, corpus, *record, demos, max_new);
            row.prompt_tokens +=
                static_cast<double>(result.profile.prompt_tokens);
            row.wall_seconds += result.profile.wall_seconds;
        }
        row.prompt_tokens /= static_cast<double>(records.size());
        rows.push_back(row);
    }

    Row csv_row;
    csv_row.mode = "csv";
    for (const auto* record : records) {
        inference::InferenceRequest req;
        req.record = record;
        req.shift = &shifts;
        req.max_new_tokens = max_new;
        const auto result = inference::generate_intervention(m, corpus, req);
        csv_row.prompt_tokens +=
            static_cast<double>(result.profile.prompt_tokens);
        csv_row.wall_seconds += result.profile.wall_seconds;
    }
    csv_row.prompt_tokens /= static_cast<double>(records.size());
    rows.push_back(csv_row);

    std::cout << "mode  prompt_tokens  wall_seconds\n";
    for (const auto& row : rows) {
        std::cout << row.mode << "  " << row.prompt_tokens << "  "
                  << row.wall_seconds << "\n";
    }

    if (!out.empty()) {
        nlohmann::ordered_json doc;
        doc["records"] = records.size();
        doc["max_new_tokens"] = max_new;
        nlohmann::ordered_json row_json = nlohmann::ordered_json::array();
        for (const auto& row : rows) {
            row_json.push_back({{"mode", row.mode},
                                {"prompt_tokens", row.prompt_tokens},
                                {"wall_seconds", row.wall_seconds}});
        }
        doc["rows"] = row_json;
        write_text(out, doc.dump(2) + "\n");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal meme-intervention pipeline"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path,
                   "JSON config file; command-line flags override it");

    const auto settings = [&config_path] {
        return Settings::from_file(config_path);
    };

    // synth ------------------------------------------------------------
    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    struct {
        std::size_t n = 50, d_img = 16, clusters = 5;
        std::uint64_t seed = 0;
        std::string out;
    } so;
    synth->add_option("--n", so.n, "record count");
    synth->add_option("--d-img", so.d_img, "image feature dimension");
    synth->add_option("--clusters", so.clusters, "cluster count");
    synth->add_option("--seed", so.seed, "generation seed");
    synth->add_option("--out", so.out, "corpus JSONL to write");
    synth->callback([&] {
        run_synth(synth, settings(), so.n, so.d_img, so.clusters, so.seed,
                  so.out);
    });

    // ingest -----------------------------------------------------------
    auto* ingest = app.add_subcommand("ingest", "load and validate a corpus");
    struct {
        std::string in, out;
        bool stats = false;
    } io_;
    ingest->add_option("--in", io_.in, "corpus JSONL to read");
    ingest->add_option("--out", io_.out, "canonicalized copy to write");
    ingest->add_flag("--stats", io_.stats, "print corpus statistics JSON");
    ingest->callback(
        [&] { run_ingest(ingest, settings(), io_.in, io_.out, io_.stats); });

    // tag-train ----------------------------------------------------------
    auto* tag_train =
        app.add_subcommand("tag-train", "train the commonsense tagger");
    struct {
        std::string corpus, out;
        double threshold = 0.5, lr = 0.05;
        std::size_t epochs = 300;
    } tt;
    tag_train->add_option("--corpus", tt.corpus, "corpus JSONL");
    tag_train->add_option("--out", tt.out, "tagger checkpoint directory");
    tag_train->add_option("--threshold", tt.threshold, "selection cutoff");
    tag_train->add_option("--lr", tt.lr, "learning rate");
    tag_train->add_option("--epochs", tt.epochs, "training epochs");
    tag_train->callback([&] {
        run_tag_train(tag_train, settings(), tt.corpus, tt.out, tt.threshold,
                      tt.lr, tt.epochs);
    });

    // tag ----------------------------------------------------------------
    auto* tag = app.add_subcommand("tag", "predict commonsense parameters");
    struct {
        std::string corpus, tagger, out, split = "all";
    } tg;
    tag->add_option("--corpus", tg.corpus, "corpus JSONL");
    tag->add_option("--tagger", tg.tagger, "tagger checkpoint directory");
    tag->add_option("--out", tg.out, "predicted parameters JSON");
    tag->add_option("--split", tg.split, "train|test|all (default all)");
    tag->callback([&] {
        run_tag(tag, settings(), tg.corpus, tg.tagger, tg.out, tg.split);
    });

    // index --------------------------------------------------------------
    auto* index =
        app.add_subcommand("index", "build the image-similarity index");
    struct {
        std::string corpus, out;
    } ix;
    index->add_option("--corpus", ix.corpus, "corpus JSONL");
    index->add_option("--out", ix.out, "index directory");
    index->callback(
        [&] { run_index(index, settings(), ix.corpus, ix.out); });

    // icl-build ----------------------------------------------------------
    auto* icl_build = app.add_subcommand(
        "icl-build", "retrieve in-context exemplars for every train record");
    struct {
        std::string corpus, out, strategy = "image";
        std::size_t k = 4, c = 2;
        std::uint64_t seed = 0;
    } ib;
    icl_build->add_option("--corpus", ib.corpus, "corpus JSONL");
    icl_build->add_option("--out", ib.out, "exemplar sets JSON");
    icl_build->add_option("--strategy", ib.strategy,
                          "random|commonsense|image|combined");
    icl_build->add_option("--k", ib.k, "exemplars per anchor");
    icl_build->add_option("--c", ib.c, "commonsense quota (combined)");
    icl_build->add_option("--seed", ib.seed, "retrieval seed");
    icl_build->callback([&] {
        run_icl_build(icl_build, settings(), ib.corpus, ib.out, ib.strategy,
                      ib.k, ib.c, ib.seed);
    });

    // train-csv ----------------------------------------------------------
    auto* train_csv = app.add_subcommand(
        "train-csv",
        "train the base model on exemplar-formatted sequences, then distill "
        "its in-context behavior into per-layer steering vectors");
    struct {
        std::string corpus, icl, out_model, out_shifts;
        std::size_t layers = 2, d_model = 32, heads = 2, max_seq = 256,
                    img_prefix = 2;
        std::uint64_t model_seed = 0;
        std::size_t lm_epochs = 30, lm_batch = 4;
        double lm_lr = 1e-3;
        double gamma = 0.5, csv_lr = 1e-2, init_sigma = 0.01;
        std::size_t csv_epochs = 10, csv_batch = 2;
        std::uint64_t seed = 0;
    } tc;
    train_csv->add_option("--corpus", tc.corpus, "corpus JSONL");
    train_csv->add_option("--icl", tc.icl, "exemplar sets JSON");
    train_csv->add_option("--out-model", tc.out_model,
                          "base model checkpoint directory");
    train_csv->add_option("--out-shifts", tc.out_shifts,
                          "steering-vector checkpoint directory");
    train_csv->add_option("--layers", tc.layers, "transformer layers");
    train_csv->add_option("--d-model", tc.d_model, "hidden width");
    train_csv->add_option("--heads", tc.heads, "attention heads");
    train_csv->add_option("--max-seq", tc.max_seq, "positional horizon");
    train_csv->add_option("--img-prefix", tc.img_prefix,
                          "image prefix slots");
    train_csv->add_option("--model-seed", tc.model_seed,
                          "base-model init seed");
    train_csv->add_option("--lm-epochs", tc.lm_epochs, "base-model epochs");
    train_csv->add_option("--lm-batch", tc.lm_batch, "base-model batch size");
    train_csv->add_option("--lm-lr", tc.lm_lr, "base-model learning rate");
    train_csv->add_option("--gamma", tc.gamma, "reference-loss weight");
    train_csv->add_option("--csv-lr", tc.csv_lr, "distillation learning rate");
    train_csv->add_option("--csv-epochs", tc.csv_epochs,
                          "distillation epochs");
    train_csv->add_option("--csv-batch", tc.csv_batch, "distillation batch");
    train_csv->add_option("--init-sigma", tc.init_sigma,
                          "vector init standard deviation");
    train_csv->add_option("--seed", tc.seed, "training seed");
    train_csv->callback([&] {
        model::ModelConfig base_cfg;
        base_cfg.n_layers = tc.layers;
        base_cfg.d_model = tc.d_model;
        base_cfg.n_heads = tc.heads;
        base_cfg.max_seq = tc.max_seq;
        base_cfg.img_prefix_len = tc.img_prefix;
        base_cfg.seed = tc.model_seed;
        run_train_csv(train_csv, settings(), tc.corpus, tc.icl, tc.out_model,
                      tc.out_shifts, base_cfg, tc.lm_epochs, tc.lm_batch,
                      tc.lm_lr, tc.gamma, tc.csv_lr, tc.csv_epochs,
                      tc.csv_batch, tc.init_sigma, tc.seed);
    });

    // infer --------------------------------------------------------------
    auto* infer =
        app.add_subcommand("infer", "generate interventions for the test split");
    struct {
        std::string corpus, model, shifts, index, tagger;
        std::string mode = "full", cs = "provided", strategy = "image";
        std::size_t k = 4, c = 2, max_new = 16;
        std::uint64_t seed = 0;
        std::string out;
    } in_;
    infer->add_option("--corpus", in_.corpus, "corpus JSONL");
    infer->add_option("--model", in_.model, "base model checkpoint");
    infer->add_option("--shifts", in_.shifts, "steering-vector checkpoint");
    infer->add_option("--index", in_.index, "image index (kshot retrieval)");
    infer->add_option("--tagger", in_.tagger, "tagger checkpoint (--cs tagger)");
    infer->add_option("--mode", in_.mode,
                      "full|no-cs|random-cs|alpha1|kshot");
    infer->add_option("--cs", in_.cs,
                      "commonsense source: provided|tagger|none|random");
    infer->add_option("--strategy", in_.strategy,
                      "kshot retrieval strategy");
    infer->add_option("--k", in_.k, "kshot exemplar count");
    infer->add_option("--c", in_.c, "kshot commonsense quota");
    infer->add_option("--max-new", in_.max_new, "generation budget");
    infer->add_option("--seed", in_.seed, "random-mode seed");
    infer->add_option("--out", in_.out, "predictions JSONL");
    infer->callback([&] {
        run_infer(infer, settings(), in_.corpus, in_.model, in_.shifts,
                  in_.index, in_.tagger, in_.mode, in_.cs, in_.strategy,
                  in_.k, in_.c, in_.max_new, in_.seed, in_.out);
    });

    // evaluate -----------------------------------------------------------
    auto* evaluate = app.add_subcommand(
        "evaluate", "score predictions against reference interventions");
    struct {
        std::string corpus, model, predictions, baseline, out;
    } ev;
    evaluate->add_option("--corpus", ev.corpus, "corpus JSONL");
    evaluate->add_option("--model", ev.model,
                         "base model checkpoint (token embeddings)");
    evaluate->add_option("--predictions", ev.predictions,
                         "predictions JSONL");
    evaluate->add_option("--baseline", ev.baseline,
                         "baseline predictions JSONL for the rank test");
    evaluate->add_option("--out", ev.out, "evaluation report JSON");
    evaluate->callback([&] {
        run_evaluate(evaluate, settings(), ev.corpus, ev.model,
                     ev.predictions, ev.baseline, ev.out);
    });

    // probe --------------------------------------------------------------
    auto* probe = app.add_subcommand(
        "probe", "hidden-state distance probes over commonsense structure");
    struct {
        std::string corpus, model, shifts;
        std::size_t layer = 0, pairs = 20, top_pairs = 5, max_members = 20;
        std::uint64_t seed = 0;
        std::string out;
    } pr;
    probe->add_option("--corpus", pr.corpus, "corpus JSONL");
    probe->add_option("--model", pr.model, "base model checkpoint");
    probe->add_option("--shifts", pr.shifts,
                      "optional steering-vector checkpoint");
    probe->add_option("--layer", pr.layer, "probed layer (0 = last)");
    probe->add_option("--pairs", pr.pairs, "record pairs per distance");
    probe->add_option("--top-pairs", pr.top_pairs,
                      "co-occurring parameter pairs to rank");
    probe->add_option("--max-members", pr.max_members,
                      "record cap per parameter pair");
    probe->add_option("--seed", pr.seed, "sampling seed");
    probe->add_option("--out", pr.out, "probe report JSON");
    probe->callback([&] {
        run_probe(probe, settings(), pr.corpus, pr.model, pr.shifts, pr.layer,
                  pr.pairs, pr.top_pairs, pr.max_members, pr.seed, pr.out);
    });

    // bench --------------------------------------------------------------
    auto* bench = app.add_subcommand(
        "bench", "prompt-size and wall-clock table across context lengths");
    struct {
        std::string corpus, model, shifts, index, strategy = "image";
        std::size_t c = 2, limit = 5, max_new = 8;
        std::uint64_t seed = 0;
        std::string out;
    } be;
    bench->add_option("--corpus", be.corpus, "corpus JSONL");
    bench->add_option("--model", be.model, "base model checkpoint");
    bench->add_option("--shifts", be.shifts, "steering-vector checkpoint");
    bench->add_option("--index", be.index, "image index");
    bench->add_option("--strategy", be.strategy, "retrieval strategy");
    bench->add_option("--c", be.c, "commonsense quota (combined)");
    bench->add_option("--limit", be.limit, "test records to bench (0 = all)");
    bench->add_option("--max-new", be.max_new, "generation budget");
    bench->add_option("--seed", be.seed, "retrieval seed");
    bench->add_option("--out", be.out, "bench table JSON");
    bench->callback([&] {
        run_bench(bench, settings(), be.corpus, be.model, be.shifts, be.index,
                  be.strategy, be.c, be.limit, be.max_new, be.seed, be.out);
    });

    // Let `memesense <sub> --config file.json` reach the parent option.
    for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
        sub->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
