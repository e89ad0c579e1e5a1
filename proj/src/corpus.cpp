#include "memesense/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "memesense/rng.hpp"
#include "json.hpp"

namespace memesense::corpus {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Taxonomy tables
// ---------------------------------------------------------------------------

namespace {

struct ParamInfo {
    const char* id;
    Meta meta;
    const char* keyword;
};

// Index order is the canonical ascending category order used by every
// tie-break in the pipeline.
constexpr ParamInfo kParamTable[kNumParams] = {
    {"hate_speech", Meta::social_norm_violations, "hateful"},
    {"body_shaming", Meta::social_norm_violations, "shaming"},
    {"misogyny", Meta::social_norm_violations, "misogynistic"},
    {"stereotyping", Meta::social_norm_violations, "stereotyping"},
    {"sexual_content", Meta::social_norm_violations, "explicit"},
    {"vulgarity", Meta::social_norm_violations, "vulgar"},
    {"misinformation", Meta::credibility, "misleading"},
    {"child_exploitation", Meta::empathy_ethics, "exploitative"},
    {"public_decorum_privacy", Meta::empathy_ethics, "invasive"},
    {"cultural_sensitivity", Meta::empathy_ethics, "insensitive"},
    {"religious_sensitivity", Meta::empathy_ethics, "disrespectful"},
    {"humor_appropriateness", Meta::contextual_interpretation, "mocking"},
    {"mental_health_impact", Meta::predicting_consequences, "distressing"},
    {"violence", Meta::predicting_consequences, "violent"},
    {"substance_abuse", Meta::predicting_consequences, "glorifying"},
};

constexpr const char* kMetaNames[kNumMetas] = {
    "social_norm_violations", "credibility", "empathy_ethics",
    "contextual_interpretation", "predicting_consequences",
};

}  // namespace

const char* name(Param p) { return kParamTable[static_cast<int>(p)].id; }
const char* name(Meta m) { return kMetaNames[static_cast<int>(m)]; }
Meta meta_of(Param p) { return kParamTable[static_cast<int>(p)].meta; }
const char* template_keyword(Param p) {
    return kParamTable[static_cast<int>(p)].keyword;
}

Param parse_param(const std::string& text) {
    for (int i = 0; i < kNumParams; ++i) {
        if (text == kParamTable[i].id) return static_cast<Param>(i);
    }
    throw std::runtime_error("unknown commonsense parameter '" + text + "'");
}

const std::array<Param, kNumParams>& all_params() {
    static const std::array<Param, kNumParams> params = [] {
        std::array<Param, kNumParams> out{};
        for (int i = 0; i < kNumParams; ++i) out[i] = static_cast<Param>(i);
        return out;
    }();
    return params;
}

const char* name(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "test") return Split::test;
    throw std::runtime_error("unknown split value '" + text +
                             "' (expected 'train' or 'test')");
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

Corpus::Corpus(std::vector<MemeRecord> records, std::size_t d_img)
    : records_(std::move(records)), d_img_(d_img) {
    by_id_.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const MemeRecord& r = records_[i];
        if (r.id.empty()) {
            throw std::runtime_error("record with empty id at position " +
                                     std::to_string(i));
        }
        if (r.image_features.size() != d_img_) {
            throw std::runtime_error(
                "record '" + r.id + "' has " +
                std::to_string(r.image_features.size()) +
                " image features, expected " + std::to_string(d_img_));
        }
        if (!by_id_.emplace(r.id, i).second) {
            throw std::runtime_error("duplicate record id '" + r.id + "'");
        }
    }
}

const MemeRecord* Corpus::find(const std::string& id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &records_[it->second];
}

const MemeRecord& Corpus::at(const std::string& id) const {
    const MemeRecord* r = find(id);
    if (!r) throw std::runtime_error("no record with id '" + id + "'");
    return *r;
}

std::vector<const MemeRecord*> Corpus::train_records() const {
    std::vector<const MemeRecord*> out;
    for (const auto& r : records_)
        if (r.split == Split::train) out.push_back(&r);
    return out;
}

std::vector<const MemeRecord*> Corpus::test_records() const {
    std::vector<const MemeRecord*> out;
    for (const auto& r : records_)
        if (r.split == Split::test) out.push_back(&r);
    return out;
}

// ---------------------------------------------------------------------------
// Load / store
// ---------------------------------------------------------------------------

namespace {

MemeRecord parse_record(const json& j, std::size_t line_no) {
    const auto fail = [line_no](const std::string& what) -> std::runtime_error {
        return std::runtime_error("corpus line " + std::to_string(line_no) +
                                  ": " + what);
    };
    if (!j.is_object()) throw fail("expected a JSON object");

    MemeRecord r;
    if (!j.contains("id") || !j["id"].is_string()) {
        throw fail("missing or non-string 'id'");
    }
    r.id = j["id"].get<std::string>();
    if (r.id.empty()) throw fail("empty 'id'");

    if (!j.contains("image_features") || !j["image_features"].is_array() ||
        j["image_features"].empty()) {
        throw fail("record '" + r.id + "': missing or empty 'image_features'");
    }
    for (const auto& v : j["image_features"]) {
        if (!v.is_number()) {
            throw fail("record '" + r.id + "': non-numeric image feature");
        }
        r.image_features.push_back(v.get<float>());
    }

    if (j.contains("overlay_text") && !j["overlay_text"].is_null()) {
        if (!j["overlay_text"].is_string()) {
            throw fail("record '" + r.id + "': 'overlay_text' must be string or null");
        }
        r.overlay_text = j["overlay_text"].get<std::string>();
    }

    if (!j.contains("commonsense") || !j["commonsense"].is_array()) {
        throw fail("record '" + r.id + "': missing 'commonsense' array");
    }
    for (const auto& v : j["commonsense"]) {
        if (!v.is_string()) {
            throw fail("record '" + r.id + "': non-string commonsense entry");
        }
        try {
            r.commonsense.push_back(parse_param(v.get<std::string>()));
        } catch (const std::exception& e) {
            throw fail("record '" + r.id + "': " + e.what());
        }
    }
    std::sort(r.commonsense.begin(), r.commonsense.end());
    if (std::adjacent_find(r.commonsense.begin(), r.commonsense.end()) !=
        r.commonsense.end()) {
        throw fail("record '" + r.id + "': duplicate commonsense parameter");
    }

    if (!j.contains("intervention") || !j["intervention"].is_string()) {
        throw fail("record '" + r.id + "': missing or non-string 'intervention'");
    }
    r.intervention = j["intervention"].get<std::string>();

    if (!j.contains("split") || !j["split"].is_string()) {
        throw fail("record '" + r.id + "': missing or non-string 'split'");
    }
    try {
        r.split = parse_split(j["split"].get<std::string>());
    } catch (const std::exception& e) {
        throw fail("record '" + r.id + "': " + e.what());
    }

    if (r.split == Split::train && r.intervention.empty()) {
        throw fail("record '" + r.id + "': empty intervention on train split");
    }
    return r;
}

}  // namespace

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);

    std::vector<MemeRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;  // tolerate blank lines
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                     ": malformed JSON: " + e.what());
        }
        records.push_back(parse_record(j, line_no));
    }
    if (records.empty()) {
        throw std::runtime_error("corpus is empty: " + path);
    }
    const std::size_t d_img = records.front().image_features.size();
    return Corpus(std::move(records), d_img);
}

void write_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open corpus file for writing: " + path);
    for (const auto& r : corpus.records()) {
        ordered_json j;
        j["id"] = r.id;
        j["image_features"] = r.image_features;
        if (r.overlay_text) {
            j["overlay_text"] = *r.overlay_text;
        } else {
            j["overlay_text"] = nullptr;
        }
        json cs = json::array();
        for (Param p : r.commonsense) cs.push_back(name(p));
        j["commonsense"] = std::move(cs);
        j["intervention"] = r.intervention;
        j["split"] = name(r.split);
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("short write to corpus file: " + path);
}

// ---------------------------------------------------------------------------
// Stats
// ---------------------------------------------------------------------------

CorpusStats compute_stats(const Corpus& corpus) {
    CorpusStats s;
    s.n = corpus.size();
    for (const auto& r : corpus.records()) {
        (r.split == Split::train ? s.n_train : s.n_test) += 1;
        (r.overlay_text ? s.with_text : s.without_text) += 1;
        for (Param a : r.commonsense) {
            const int ia = static_cast<int>(a);
            s.param_counts[ia] += 1;
            s.meta_counts[static_cast<int>(meta_of(a))] += 1;
            for (Param b : r.commonsense) {
                s.cooccurrence[ia][static_cast<int>(b)] += 1;
            }
        }
    }
    return s;
}

std::string stats_to_json(const CorpusStats& s) {
    ordered_json j;
    j["n"] = s.n;
    j["n_train"] = s.n_train;
    j["n_test"] = s.n_test;
    j["with_text"] = s.with_text;
    j["without_text"] = s.without_text;
    ordered_json counts;
    for (int i = 0; i < kNumParams; ++i) {
        counts[name(static_cast<Param>(i))] = s.param_counts[i];
    }
    j["param_counts"] = std::move(counts);
    ordered_json metas;
    for (int i = 0; i < kNumMetas; ++i) {
        metas[name(static_cast<Meta>(i))] = s.meta_counts[i];
    }
    j["meta_counts"] = std::move(metas);
    json cooc = json::array();
    for (const auto& row : s.cooccurrence) {
        cooc.push_back(row);
    }
    j["cooccurrence"] = std::move(cooc);
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

Corpus split_corpus(const Corpus& corpus, double train_fraction,
                    std::uint64_t seed) {
    const std::size_t n = corpus.size();
    if (n < 2) {
        throw std::runtime_error("cannot split a corpus with fewer than 2 records");
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw std::runtime_error("train_fraction must lie strictly between 0 and 1");
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng::Rng gen = rng::derive(seed, "split");
    gen.shuffle(order);

    // Both splits always end up non-empty.
    std::size_t n_train = static_cast<std::size_t>(
        std::floor(train_fraction * static_cast<double>(n)));
    n_train = std::max<std::size_t>(1, std::min(n_train, n - 1));

    std::vector<MemeRecord> records = corpus.records();
    for (std::size_t rank = 0; rank < n; ++rank) {
        records[order[rank]].split = rank < n_train ? Split::train : Split::test;
    }
    return Corpus(std::move(records), corpus.d_img());
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace {

// Each parameter contributes three words of its own — the template keyword
// plus a noun and a verb — and no word is shared between parameters or with
// the surrounding sentence skeleton. The skeleton interleaves shared
// connectives with the parameter-specific slots, so every slot word follows
// a connective that is identical across signatures: predicting a slot
// requires the signature (from the category tokens or the image), not just
// within-sentence word statistics, while a generation that follows the
// wrong signature still forfeits every slot under word-overlap and
// embedding-similarity metrics.
struct ParamWords {
    const char* noun;
    const char* verb;
};

ParamWords param_words(Param p) {
    switch (p) {
        case Param::hate_speech: return {"slurs", "demean"};
        case Param::body_shaming: return {"remarks", "humiliate"};
        case Param::misogyny: return {"tropes", "degrade"};
        case Param::stereotyping: return {"caricatures", "flatten"};
        case Param::sexual_content: return {"imagery", "unsettle"};
        case Param::vulgarity: return {"phrasing", "coarsen"};
        case Param::misinformation: return {"claims", "deceive"};
        case Param::child_exploitation: return {"depictions", "endanger"};
        case Param::public_decorum_privacy: return {"snapshots", "expose"};
        case Param::cultural_sensitivity: return {"jokes", "trample"};
        case Param::religious_sensitivity: return {"parodies", "profane"};
        case Param::humor_appropriateness: return {"punchlines", "trivialize"};
        case Param::mental_health_impact: return {"visuals", "unnerve"};
        case Param::violence: return {"scenes", "brutalize"};
        case Param::substance_abuse: return {"portrayals", "intoxicate"};
    }
    throw std::runtime_error("unknown commonsense parameter value");
}

std::string make_intervention(const std::vector<Param>& signature) {
    // One param:  "remove this <kw1> meme its <n1> would <v1> everyone"
    // Two params: "remove this <kw1> <kw2> meme its <n1> and <n2> would
    //              <v1> then <v2> everyone"
    std::string text = "remove this";
    for (const Param p : signature) {
        text += ' ';
        text += template_keyword(p);
    }
    text += " meme its";
    for (std::size_t i = 0; i < signature.size(); ++i) {
        if (i > 0) text += " and";
        text += ' ';
        text += param_words(signature[i]).noun;
    }
    text += " would";
    for (std::size_t i = 0; i < signature.size(); ++i) {
        if (i > 0) text += " then";
        text += ' ';
        text += param_words(signature[i]).verb;
    }
    text += " everyone";
    return text;
}

}  // namespace

Corpus synth_generate(const SynthConfig& cfg) {
    if (cfg.n_clusters < 1 || cfg.n_clusters > cfg.n) {
        throw std::runtime_error("synth: need 1 <= n_clusters <= n");
    }
    if (cfg.d_img < 2) {
        throw std::runtime_error("synth: d_img must be >= 2");
    }
    const std::size_t nc = cfg.n_clusters;

    // Graded cluster sizes: weight ramps 1.4 -> 0.6 so earlier clusters are
    // larger. Remainder correction keeps the exact total and every size >= 1.
    std::vector<std::size_t> sizes(nc, 0);
    {
        std::vector<double> w(nc);
        double wsum = 0.0;
        for (std::size_t c = 0; c < nc; ++c) {
            w[c] = nc == 1 ? 1.0
                           : 1.4 - 0.8 * static_cast<double>(c) /
                                       static_cast<double>(nc - 1);
            wsum += w[c];
        }
        std::size_t assigned = 0;
        for (std::size_t c = 0; c < nc; ++c) {
            sizes[c] = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::floor(
                       static_cast<double>(cfg.n) * w[c] / wsum)));
            assigned += sizes[c];
        }
        std::size_t c = 0;
        while (assigned < cfg.n) {  // hand leftovers out front-to-back
            sizes[c % nc] += 1;
            ++assigned;
            ++c;
        }
        while (assigned > cfg.n) {  // trim from the back, never below 1
            const std::size_t idx = nc - 1 - (c % nc);
            if (sizes[idx] > 1) {
                sizes[idx] -= 1;
                --assigned;
            }
            ++c;
        }
    }

    rng::Rng gen = rng::derive(cfg.seed, "synth");
    std::vector<MemeRecord> records;
    records.reserve(cfg.n);
    std::size_t global_idx = 0;

    for (std::size_t c = 0; c < nc; ++c) {
        // Larger (earlier) clusters are tighter; smaller ones are more
        // spread out. Pair that with per-cluster co-occurrence counts equal
        // to cluster size and you get the planted structure: frequent pairs
        // <-> compact feature neighborhoods.
        const double sigma =
            nc == 1 ? 0.8
                    : 0.6 + 0.9 * static_cast<double>(c) /
                                static_cast<double>(nc - 1);

        // Centers sit on coordinate axes at radius 10, with the radius
        // stepping up once the axes run out; any two centers are >= 10 apart.
        const std::size_t axis = c % cfg.d_img;
        const double radius =
            10.0 * (1.0 + static_cast<double>(c / cfg.d_img));

        // Two-parameter signature per cluster, wrapping around the taxonomy.
        std::vector<Param> signature = {
            static_cast<Param>((2 * c) % kNumParams),
            static_cast<Param>((2 * c + 1) % kNumParams),
        };
        std::sort(signature.begin(), signature.end());
        signature.erase(std::unique(signature.begin(), signature.end()),
                        signature.end());

        const std::string intervention = make_intervention(signature);

        for (std::size_t i = 0; i < sizes[c]; ++i, ++global_idx) {
            MemeRecord r;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "synth_%04zu", global_idx);
            r.id = buf;
            r.image_features.resize(cfg.d_img);
            for (std::size_t d = 0; d < cfg.d_img; ++d) {
                double v = sigma * gen.normal();
                if (d == axis) v += radius;
                r.image_features[d] = static_cast<float>(v);
            }
            // Mix of memes with and without overlay text.
            if (global_idx % 3 != 2) {
                r.overlay_text = std::string("funny ") +
                                 template_keyword(signature.front()) +
                                 " caption";
            }
            r.commonsense = signature;
            r.intervention = intervention;
            // Every fifth record of a cluster is held out.
            r.split = (i % 5 == 4) ? Split::test : Split::train;
            records.push_back(std::move(r));
        }
    }
    return Corpus(std::move(records), cfg.d_img);
}

}  // namespace memesense::corpus
