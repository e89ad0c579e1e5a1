#pragma once

// Meme corpus: record schema, the 15-parameter commonsense taxonomy with its
// 5 broader groupings, JSONL load/store, corpus statistics, deterministic
// splitting, and a clustered synthetic generator for end-to-end tests.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace memesense::corpus {

// ---------------------------------------------------------------------------
// Taxonomy
// ---------------------------------------------------------------------------

enum class Param : int {
    hate_speech = 0,
    body_shaming,
    misogyny,
    stereotyping,
    sexual_content,
    vulgarity,
    misinformation,
    child_exploitation,
    public_decorum_privacy,
    cultural_sensitivity,
    religious_sensitivity,
    humor_appropriateness,
    mental_health_impact,
    violence,
    substance_abuse,
};

inline constexpr int kNumParams = 15;

enum class Meta : int {
    social_norm_violations = 0,
    credibility,
    empathy_ethics,
    contextual_interpretation,
    predicting_consequences,
};

inline constexpr int kNumMetas = 5;

const char* name(Param p);
const char* name(Meta m);
Param parse_param(const std::string& text);  // throws on unknown name
Meta meta_of(Param p);
const std::array<Param, kNumParams>& all_params();

// Distinctive everyday word used in generated intervention templates for a
// parameter; lets tests check that generations mention the right category.
const char* template_keyword(Param p);

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

enum class Split : int { train = 0, test = 1 };

const char* name(Split s);
Split parse_split(const std::string& text);  // throws on unknown value

struct MemeRecord {
    std::string id;                            // non-empty, unique in corpus
    std::vector<float> image_features;         // length d_img, uniform per corpus
    std::optional<std::string> overlay_text;   // absent = meme without text
    std::vector<Param> commonsense;            // sorted ascending, no duplicates
    std::string intervention;                  // ground truth; non-empty on train
    Split split = Split::train;
};

class Corpus {
public:
    Corpus() = default;
    Corpus(std::vector<MemeRecord> records, std::size_t d_img);

    const std::vector<MemeRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    std::size_t d_img() const { return d_img_; }

    const MemeRecord* find(const std::string& id) const;  // nullptr if absent
    const MemeRecord& at(const std::string& id) const;    // throws if absent

    std::vector<const MemeRecord*> train_records() const;
    std::vector<const MemeRecord*> test_records() const;

private:
    std::vector<MemeRecord> records_;
    std::size_t d_img_ = 0;
    std::unordered_map<std::string, std::size_t> by_id_;
};

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct CorpusStats {
    std::size_t n = 0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::size_t with_text = 0;
    std::size_t without_text = 0;
    std::array<std::size_t, kNumParams> param_counts{};
    std::array<std::size_t, kNumMetas> meta_counts{};
    // cooccurrence[i][j] = records tagged with both i and j; diagonal holds
    // the per-parameter marginals. Symmetric by construction.
    std::array<std::array<std::size_t, kNumParams>, kNumParams> cooccurrence{};
};

CorpusStats compute_stats(const Corpus& corpus);
std::string stats_to_json(const CorpusStats& stats);  // pretty-printed object

// ---------------------------------------------------------------------------
// I/O and transforms
// ---------------------------------------------------------------------------

// Loads and validates a UTF-8 JSONL corpus. Errors name the offending line
// or record id. The corpus must be non-empty and dimensionally consistent.
Corpus load_corpus(const std::string& path);

// One JSON object per line, fixed key order; loading the result yields a
// content-equivalent corpus.
void write_corpus(const Corpus& corpus, const std::string& path);

// Reassigns splits: shuffles ids with the seed, takes
// clamp(floor(train_fraction*n), 1, n-1) records as train. Requires n >= 2
// and train_fraction in (0, 1).
Corpus split_corpus(const Corpus& corpus, double train_fraction,
                    std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::size_t n = 50;
    std::size_t d_img = 16;     // must be >= 2
    std::size_t n_clusters = 5; // must satisfy 1 <= n_clusters <= n
    std::uint64_t seed = 0;
};

// Well-separated Gaussian feature clusters; each cluster carries a fixed
// 1-2 parameter signature and a templated intervention, so category <->
// wording is a learnable mapping. Cluster sizes are graded (larger clusters
// are also tighter), which plants a co-occurrence/spread structure the
// interpretability probes can detect. Roughly one record in five per cluster
// goes to the test split.
Corpus synth_generate(const SynthConfig& config);

}  // namespace memesense::corpus
