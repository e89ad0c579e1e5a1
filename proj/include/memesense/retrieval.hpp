#pragma once

// In-context exemplar retrieval: an exact cosine index over train-split
// image embeddings, per-parameter lookup sets, and the four demonstration
// selection strategies (random / commonsense-anchored / image-anchored /
// combined). Output is a demonstration set per anchor, ready for prompting.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "memesense/corpus.hpp"

namespace memesense::retrieval {

// ---------------------------------------------------------------------------
// Embedding index
// ---------------------------------------------------------------------------

struct ScoredId {
    std::string id;
    double similarity;  // cosine over unit-normalized f32 rows
};

// Exact-scan cosine index. Rows are unit-normalized and stored as f32 (the
// on-disk format), so ranking semantics are identical before and after a
// save/load round trip. Capped at 10k rows: beyond that an approximate
// index would be the right tool, and this component deliberately stays exact.
class EmbeddingIndex {
public:
    static constexpr std::size_t kMaxRows = 10000;

    // Indexes the train split. Zero-norm features are an error naming the id.
    static EmbeddingIndex build(const corpus::Corpus& corpus);

    // Top-k by cosine, similarity non-increasing, exact ties broken toward
    // the lexicographically smaller id. Requires 1 <= k <= size().
    std::vector<ScoredId> query(const std::vector<float>& features,
                                std::size_t k) const;

    std::size_t size() const { return ids_.size(); }
    std::size_t d_img() const { return d_img_; }
    const std::vector<std::string>& ids() const { return ids_; }
    const float* row(std::size_t i) const { return rows_.data() + i * d_img_; }

    // Directory layout: manifest.json (n, d_img, ids) + vectors.f32.
    void save(const std::string& dir) const;
    static EmbeddingIndex load(const std::string& dir);

private:
    std::vector<std::string> ids_;
    std::vector<float> rows_;  // n * d_img, unit rows
    std::size_t d_img_ = 0;
};

// ---------------------------------------------------------------------------
// Lookup sets for commonsense-anchored retrieval
// ---------------------------------------------------------------------------

// Up to five train exemplars per parameter (ascending record id), plus the
// train-split frequency of each parameter for rarest-first ordering.
struct LookupSet {
    std::array<std::vector<std::string>, corpus::kNumParams> ids_by_param;
    std::array<std::size_t, corpus::kNumParams> train_frequency{};
};

LookupSet build_lookup(const corpus::Corpus& corpus);

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

enum class Strategy : int { random = 0, commonsense, image, combined };

const char* name(Strategy s);
Strategy parse_strategy(const std::string& text);  // throws on unknown

enum class Source : int { random = 0, commonsense, image };
const char* name(Source s);

struct Demonstration {
    std::string record_id;
    std::vector<corpus::Param> commonsense;
    std::string intervention;
    Source source = Source::random;
    std::optional<double> similarity;  // cosine; only for image-sourced picks
};

struct InContextSet {
    std::string anchor_id;
    Strategy strategy = Strategy::random;
    std::size_t k = 0;
    std::size_t c = 0;  // commonsense quota; meaningful for combined only
    std::vector<Demonstration> demonstrations;
};

// Image-anchored: k nearest train records by cosine, anchor itself excluded,
// ordered most-similar first. Errors when k exceeds available candidates.
std::vector<ScoredId> retrieve_image(const EmbeddingIndex& index,
                                     const corpus::MemeRecord& anchor,
                                     std::size_t k);

// Commonsense-anchored: round-robin over the anchor's parameters ordered
// rarest-first (train frequency ascending, then category id); each turn
// draws uniformly without replacement from that parameter's lookup list,
// skipping the anchor and anything already chosen. Parameters with empty
// lists contribute nothing. Errors if the anchor has no parameters or the
// distinct candidate pool is smaller than k. Randomness derives from
// (seed, anchor id), so per-anchor results ignore iteration order.
std::vector<std::string> retrieve_commonsense(const LookupSet& lookup,
                                              const corpus::MemeRecord& anchor,
                                              std::size_t k,
                                              std::uint64_t seed);

// Uniform sample of k train records without replacement, anchor excluded.
std::vector<std::string> retrieve_random(const corpus::Corpus& corpus,
                                         const corpus::MemeRecord& anchor,
                                         std::size_t k, std::uint64_t seed);

// One anchor, one strategy -> a tagged demonstration set. For combined,
// exactly c commonsense-sourced picks come first, then k-c image-ranked
// picks that skip duplicates. Requires 1 <= c <= k for combined.
InContextSet retrieve(const corpus::Corpus& corpus, const EmbeddingIndex* index,
                      const LookupSet* lookup,
                      const corpus::MemeRecord& anchor, Strategy strategy,
                      std::size_t k, std::size_t c, std::uint64_t seed);

// One InContextSet per train record. k outside {1,2,4,8,10} (and, for
// combined, c outside {1,2,4}) is accepted with a warning on stderr.
std::vector<InContextSet> build_icl_dataset(const corpus::Corpus& corpus,
                                            Strategy strategy, std::size_t k,
                                            std::size_t c, std::uint64_t seed);

// JSONL-free JSON persistence for demonstration sets.
void save_icl(const std::vector<InContextSet>& sets, const std::string& path);
std::vector<InContextSet> load_icl(const std::string& path);

}  // namespace memesense::retrieval
