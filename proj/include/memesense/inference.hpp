#pragma once

// Intervention generation: demonstration-free steering-vector inference,
// k-shot in-context baselines, ablation sweeps, and per-request runtime
// profiling.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "memesense/corpus.hpp"
#include "memesense/evaluation.hpp"
#include "memesense/model.hpp"
#include "memesense/retrieval.hpp"
#include "memesense/tagger.hpp"

namespace memesense::inference {

// Where the commonsense parameters in the prompt come from:
//   tagger   – predicted from image features by a trained tagger
//   provided – the record's own annotations
//   none     – the params segment is omitted entirely
//   random   – 1-3 parameters sampled uniformly, seeded per record
enum class CommonsenseMode { tagger, provided, none, random };

CommonsenseMode commonsense_mode_from_string(const std::string& s);
std::string to_string(CommonsenseMode mode);

struct InferenceRequest {
    const corpus::MemeRecord* record = nullptr;
    CommonsenseMode commonsense_mode = CommonsenseMode::provided;
    // Steering vectors and in-context demonstrations are mutually exclusive:
    // the vectors stand in for the demonstrations.
    const model::LayerShifts* shift = nullptr;
    const retrieval::InContextSet* demonstrations = nullptr;
    // Required when commonsense_mode == tagger.
    const tagger::TaggerModel* tagger = nullptr;
    std::size_t max_new_tokens = 16;
    std::uint64_t seed = 0;  // consumed by the random mode only
};

struct RuntimeProfile {
    std::size_t prompt_tokens = 0;
    std::size_t generated_tokens = 0;
    double wall_seconds = 0.0;
};

struct GenerationResult {
    std::string text;
    RuntimeProfile profile;
};

// The parameter list the prompt will carry, per the request's mode. Random
// draws are seeded by (seed, record id), so they do not depend on evaluation
// order. Throws when tagger mode lacks a tagger.
std::vector<corpus::Param> resolve_commonsense(const InferenceRequest& request);

// Greedy generation for one record. The corpus resolves demonstration ids to
// image features when an in-context set is attached. Throws when both a shift
// and demonstrations are set, when the record is missing, or when the prompt
// exceeds the positional horizon.
GenerationResult generate_intervention(const model::Model& m,
                                       const corpus::Corpus& corpus,
                                       const InferenceRequest& request);

// k-shot baseline: the record's own annotations plus the serialized
// demonstrations, no steering. k = 0 degenerates to direct prompting.
GenerationResult kshot_generate(const model::Model& m,
                                const corpus::Corpus& corpus,
                                const corpus::MemeRecord& record,
                                const retrieval::InContextSet& in_context,
                                std::size_t max_new_tokens);

// Ablation sweep over the test split:
//   full               – annotated commonsense, trained shift
//   no_commonsense     – params segment omitted, trained shift
//   random_commonsense – seeded random parameters, trained shift
//   fixed_alpha_1      – annotated commonsense, shift with every gain = 1
enum class AblationMode { full, no_commonsense, random_commonsense, fixed_alpha_1 };

AblationMode ablation_mode_from_string(const std::string& s);
std::string to_string(AblationMode mode);

// Generates for every test record under the mode, then scores against the
// ground-truth interventions (embeddings from the model's own token table).
// Throws when the test split is empty.
evaluation::EvaluationReport run_ablation(const model::Model& m,
                                          const model::LayerShifts& shifts,
                                          const corpus::Corpus& corpus,
                                          AblationMode mode,
                                          std::size_t max_new_tokens,
                                          std::uint64_t seed);

}  // namespace memesense::inference
