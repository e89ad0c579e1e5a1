#pragma once

// Text-quality metrics, rank statistics, and interpretability probes.
//
// Tokenization for all text metrics is plain whitespace splitting,
// case-sensitive, matching the generation-side tokenizer. Every metric pins
// its exact convention here so tests can hold it to closed-form values.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "memesense/corpus.hpp"
#include "memesense/model.hpp"

namespace memesense::evaluation {

// ---------------------------------------------------------------------------
// Reference-based text metrics
// ---------------------------------------------------------------------------

// Unsmoothed BLEU with n-grams up to 4: geometric mean of clipped modified
// precisions times the brevity penalty exp(min(0, 1 - r/c)). Returns 0 when
// the candidate is empty, shorter than four tokens, or misses every n-gram
// at any order.
double bleu4(const std::string& reference, const std::string& candidate);

// Longest-common-subsequence F1 (beta = 1): P = lcs/|cand|, R = lcs/|ref|.
// Returns 0 when either side is empty or the LCS is empty.
double rouge_l(const std::string& reference, const std::string& candidate);

// 206.835 - 1.015*(words/sentences) - 84.6*(syllables/word). Sentences are
// maximal runs of [.!?] (at least one otherwise); syllables per word are
// maximal [aeiouy] runs over the word's lowercased letters, floored at 1
// when the word has any letter. Throws on text with no words.
double flesch_reading_ease(const std::string& text);

// Exposed for direct testing of the heuristic.
std::size_t syllable_count(const std::string& word);

// ---------------------------------------------------------------------------
// Embedding-based metrics
// ---------------------------------------------------------------------------

using Embedder = std::function<std::vector<double>(const std::string&)>;

// Looks tokens up in the model's input-embedding table (unknown words take
// the [UNK] row).
Embedder make_model_embedder(const model::Model& m);

// Cosine similarity of mean-pooled token embeddings; 0 when either text has
// no tokens or a zero-norm mean.
double semantic_similarity(const std::string& a, const std::string& b,
                           const Embedder& embed);

// Greedy one-to-one token alignment: candidate tokens, in order, claim the
// most-similar unmatched reference token; a claim only counts when cosine
// exceeds `threshold`. F1 of matched counts (0 when both sides are empty).
double matchscore_f1(const std::string& reference, const std::string& candidate,
                     const Embedder& embed, double threshold = 0.5);

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

struct MwuResult {
    double u;  // U statistic of the FIRST sample
    double p;  // two-sided
};

// Mann-Whitney U. Exact permutation distribution (dynamic programming over
// rank arrangements) when n_a*n_b <= 400 and no value repeats anywhere;
// otherwise a normal approximation with tie-corrected variance and a 0.5
// continuity correction toward the mean. Two-sided exact p is
// 2*min(P(U<=u), P(U>=u)) capped at 1. Throws on an empty sample.
MwuResult mann_whitney_u(const std::vector<double>& a,
                         const std::vector<double>& b);

// Spearman rank correlation with average ranks on ties. Throws when either
// input is constant or the lengths differ.
double spearman_rho(const std::vector<double>& x,
                    const std::vector<double>& y);

// ---------------------------------------------------------------------------
// Interpretability probes
// ---------------------------------------------------------------------------

// Mean Euclidean distance between first-response-position hidden states for
// record pairs sharing at least one commonsense parameter (within) and pairs
// with disjoint parameters (between). Pairs are drawn seeded from the train
// split; prompts are demonstration-free with ground-truth commonsense.
struct ProbeDistances {
    double within = 0.0;
    double between = 0.0;
    std::size_t n_pairs = 0;
};
ProbeDistances probe_within_between(const model::Model& m,
                                    const corpus::Corpus& corpus,
                                    std::size_t layer, std::size_t n_pairs,
                                    std::uint64_t seed,
                                    const model::LayerShifts* shifts = nullptr);

// Top co-occurring parameter pairs (count desc, ids asc) against the mean
// pairwise hidden distance of the records carrying both parameters, plus the
// Spearman correlation of counts vs distances. Sets larger than
// `max_records_per_pair` are subsampled seeded.
struct CooccurrencePairStat {
    corpus::Param a;
    corpus::Param b;
    std::size_t count = 0;
    double mean_distance = 0.0;
};
struct CooccurrenceProbe {
    std::vector<CooccurrencePairStat> pairs;
    double spearman = 0.0;
};
CooccurrenceProbe probe_cooccurrence(const model::Model& m,
                                     const corpus::Corpus& corpus,
                                     std::size_t layer, std::size_t top_pairs,
                                     std::size_t max_records_per_pair,
                                     std::uint64_t seed,
                                     const model::LayerShifts* shifts = nullptr);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct Prediction {
    std::string id;
    std::string text;
};

struct RecordScores {
    std::string id;
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    double flesch = 0.0;
    double semantic_similarity = 0.0;
    double matchscore = 0.0;
};

struct Significance {
    double u_statistic = 0.0;
    double p_value = 1.0;
};

struct EvaluationReport {
    std::vector<RecordScores> per_record;
    RecordScores aggregate;  // arithmetic means; id is empty
    std::optional<Significance> significance;
    std::size_t n = 0;
};

// Scores every prediction against corpus.at(id).intervention. Throws on an
// unknown or duplicate id and on an empty prediction list.
EvaluationReport evaluate(const std::vector<Prediction>& predictions,
                          const corpus::Corpus& corpus, const Embedder& embed,
                          double match_threshold = 0.5);

// Mann-Whitney U over the two reports' per-record semantic similarities.
Significance compare_semantic(const EvaluationReport& ours,
                              const EvaluationReport& baseline);

nlohmann::ordered_json report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const nlohmann::json& j);

}  // namespace memesense::evaluation
