#include "memesense/inference.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>
#include <utility>

#include "memesense/rng.hpp"

namespace memesense::inference {

namespace {

model::DemoInput demo_input(const corpus::Corpus& corpus,
                            const retrieval::Demonstration& demo) {
    const auto& record = corpus.at(demo.record_id);
    return {record.image_features, demo.commonsense, demo.intervention};
}

GenerationResult timed_generate(const model::Model& m,
                                const model::PromptEncoding& enc,
                                std::size_t max_new_tokens,
                                const model::LayerShifts* shifts) {
    const auto start = std::chrono::steady_clock::now();
    const auto ids = m.generate(enc, max_new_tokens, shifts);
    const auto stop = std::chrono::steady_clock::now();

    GenerationResult result;
    result.text = m.tokenizer().decode(ids);
    result.profile.prompt_tokens = enc.tokens.size();
    result.profile.generated_tokens = ids.size();
    result.profile.wall_seconds =
        std::chrono::duration<double>(stop - start).count();
    return result;
}

}  // namespace

CommonsenseMode commonsense_mode_from_string(const std::string& s) {
    if (s == "tagger") return CommonsenseMode::tagger;
    if (s == "provided") return CommonsenseMode::provided;
    if (s == "none") return CommonsenseMode::none;
    if (s == "random") return CommonsenseMode::random;
    throw std::runtime_error("unknown commonsense mode '" + s +
                             "' (expected tagger|provided|none|random)");
}

std::string to_string(CommonsenseMode mode) {
    switch (mode) {
        case CommonsenseMode::tagger: return "tagger";
        case CommonsenseMode::provided: return "provided";
        case CommonsenseMode::none: return "none";
        case CommonsenseMode::random: return "random";
    }
    throw std::runtime_error("unknown commonsense mode");
}

std::vector<corpus::Param> resolve_commonsense(
    const InferenceRequest& request) {
    if (request.record == nullptr) {
        throw std::runtime_error("inference request carries no record");
    }
    switch (request.commonsense_mode) {
        case CommonsenseMode::provided:
            return request.record->commonsense;
        case CommonsenseMode::none:
            return {};
        case CommonsenseMode::tagger: {
            if (request.tagger == nullptr) {
                throw std::runtime_error(
                    "tagger commonsense mode needs a trained tagger");
            }
            return request.tagger->predict(*request.record);
        }
        case CommonsenseMode::random: {
            auto gen =
                rng::derive(request.seed, "random_cs", request.record->id);
            const auto count = static_cast<std::size_t>(1 + gen.below(3));
            const auto& all = corpus::all_params();
            std::vector<corpus::Param> pool(all.begin(), all.end());
            for (std::size_t i = 0; i < count; ++i) {
                const auto j = i + static_cast<std::size_t>(
                                       gen.below(pool.size() - i));
                std::swap(pool[i], pool[j]);
            }
            pool.resize(count);
            std::sort(pool.begin(), pool.end());
            return pool;
        }
    }
    throw std::runtime_error("unknown commonsense mode");
}

GenerationResult generate_intervention(const model::Model& m,
                                       const corpus::Corpus& corpus,
                                       const InferenceRequest& request) {
    if (request.record == nullptr) {
        throw std::runtime_error("inference request carries no record");
    }
    if (request.shift != nullptr && request.demonstrations != nullptr) {
        throw std::runtime_error(
            "steering vectors and in-context demonstrations are mutually "
            "exclusive; set at most one");
    }

    std::vector<model::DemoInput> demos;
    if (request.demonstrations != nullptr) {
        demos.reserve(request.demonstrations->demonstrations.size());
        for (const auto& d : request.demonstrations->demonstrations) {
            demos.push_back(demo_input(corpus, d));
        }
    }

    const auto enc = model::encode_prompt(
        m.tokenizer(), m.config(), request.record->image_features,
        resolve_commonsense(request), demos, "");
    return timed_generate(m, enc, request.max_new_tokens, request.shift);
}

GenerationResult kshot_generate(const model::Model& m,
                                const corpus::Corpus& corpus,
                                const corpus::MemeRecord& record,
                                const retrieval::InContextSet& in_context,
                                std::size_t max_new_tokens) {
    InferenceRequest request;
    request.record = &record;
    request.commonsense_mode = CommonsenseMode::provided;
    request.demonstrations = &in_context;
    request.max_new_tokens = max_new_tokens;
    return generate_intervention(m, corpus, request);
}

AblationMode ablation_mode_from_string(const std::string& s) {
    if (s == "full") return AblationMode::full;
    if (s == "no_commonsense") return AblationMode::no_commonsense;
    if (s == "random_commonsense") return AblationMode::random_commonsense;
    if (s == "fixed_alpha_1") return AblationMode::fixed_alpha_1;
    throw std::runtime_error(
        "unknown ablation mode '" + s +
        "' (expected full|no_commonsense|random_commonsense|fixed_alpha_1)");
}

std::string to_string(AblationMode mode) {
    switch (mode) {
        case AblationMode::full: return "full";
        case AblationMode::no_commonsense: return "no_commonsense";
        case AblationMode::random_commonsense: return "random_commonsense";
        case AblationMode::fixed_alpha_1: return "fixed_alpha_1";
    }
    throw std::runtime_error("unknown ablation mode");
}

evaluation::EvaluationReport run_ablation(const model::Model& m,
                                          const model::LayerShifts& shifts,
                                          const corpus::Corpus& corpus,
                                          AblationMode mode,
                                          std::size_t max_new_tokens,
                                          std::uint64_t seed) {
    const auto test = corpus.test_records();
    if (test.empty()) {
        throw std::runtime_error("ablation needs a non-empty test split");
    }

    model::LayerShifts all_one;
    const model::LayerShifts* active = &shifts;
    CommonsenseMode cs_mode = CommonsenseMode::provided;
    switch (mode) {
        case AblationMode::full:
            break;
        case AblationMode::no_commonsense:
            cs_mode = CommonsenseMode::none;
            break;
        case AblationMode::random_commonsense:
            cs_mode = CommonsenseMode::random;
            break;
        case AblationMode::fixed_alpha_1:
            all_one = shifts;
            std::fill(all_one.alpha.begin(), all_one.alpha.end(), 1.0);
            active = &all_one;
            break;
    }

    std::vector<evaluation::Prediction> predictions;
    predictions.reserve(test.size());
    for (const auto* record : test) {
        InferenceRequest request;
        request.record = record;
        request.commonsense_mode = cs_mode;
        request.shift = active;
        request.max_new_tokens = max_new_tokens;
        request.seed = seed;
        const auto out = generate_intervention(m, corpus, request);
        predictions.push_back({record->id, out.text});
    }
    return evaluation::evaluate(predictions, corpus,
                                evaluation::make_model_embedder(m));
}

}  // namespace memesense::inference
