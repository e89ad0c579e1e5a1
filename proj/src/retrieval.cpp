#include "memesense/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <stdexcept>

#include "json.hpp"
#include "memesense/io.hpp"
#include "memesense/kernels.hpp"
#include "memesense/rng.hpp"

namespace memesense::retrieval {

using corpus::kNumParams;

// ---------------------------------------------------------------------------
// EmbeddingIndex
// ---------------------------------------------------------------------------

namespace {

// Unit-normalize in double, store as f32. Zero norm is the caller's error.
std::vector<float> unit_row(const std::vector<float>& features,
                            const std::string& id_for_error) {
    double sq = 0.0;
    for (float f : features) {
        sq += static_cast<double>(f) * static_cast<double>(f);
    }
    if (sq == 0.0) {
        throw std::runtime_error("zero-norm image features for record '" +
                                 id_for_error + "'");
    }
    const double inv = 1.0 / std::sqrt(sq);
    std::vector<float> out(features.size());
    for (std::size_t i = 0; i < features.size(); ++i) {
        out[i] = static_cast<float>(static_cast<double>(features[i]) * inv);
    }
    return out;
}

}  // namespace

EmbeddingIndex EmbeddingIndex::build(const corpus::Corpus& corpus) {
    const auto train = corpus.train_records();
    if (train.empty()) {
        throw std::runtime_error("embedding index: train split is empty");
    }
    if (train.size() > kMaxRows) {
        throw std::runtime_error(
            "embedding index: " + std::to_string(train.size()) +
            " rows exceed the exact-scan cap of " + std::to_string(kMaxRows));
    }
    EmbeddingIndex idx;
    idx.d_img_ = corpus.d_img();
    idx.ids_.reserve(train.size());
    idx.rows_.reserve(train.size() * idx.d_img_);
    for (const auto* r : train) {
        const auto row = unit_row(r->image_features, r->id);
        idx.ids_.push_back(r->id);
        idx.rows_.insert(idx.rows_.end(), row.begin(), row.end());
    }
    return idx;
}

std::vector<ScoredId> EmbeddingIndex::query(const std::vector<float>& features,
                                            std::size_t k) const {
    if (k < 1 || k > ids_.size()) {
        throw std::runtime_error("index query: k=" + std::to_string(k) +
                                 " outside [1, " + std::to_string(ids_.size()) +
                                 "]");
    }
    if (features.size() != d_img_) {
        throw std::runtime_error("index query: feature dimension mismatch");
    }
    const auto q = unit_row(features, "<query>");

    std::vector<std::size_t> order(ids_.size());
    std::vector<double> sims(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        order[i] = i;
        sims[i] = kernels::dot(row(i), q.data(), d_img_);
    }
    // Full sort keeps tie-breaking simple; N is capped at 10k.
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (sims[a] != sims[b]) return sims[a] > sims[b];
        return ids_[a] < ids_[b];
    });

    std::vector<ScoredId> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back({ids_[order[i]], sims[order[i]]});
    }
    return out;
}

void EmbeddingIndex::save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["n"] = ids_.size();
    manifest["d_img"] = d_img_;
    manifest["ids"] = ids_;
    io::write_text((fs::path(dir) / "manifest.json").string(),
                   manifest.dump(2) + "\n");
    io::write_f32_raw((fs::path(dir) / "vectors.f32").string(), rows_);
}

EmbeddingIndex EmbeddingIndex::load(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest = nlohmann::json::parse(
        io::read_text((fs::path(dir) / "manifest.json").string()));
    EmbeddingIndex idx;
    const auto n = manifest.at("n").get<std::size_t>();
    idx.d_img_ = manifest.at("d_img").get<std::size_t>();
    idx.ids_ = manifest.at("ids").get<std::vector<std::string>>();
    if (idx.ids_.size() != n) {
        throw std::runtime_error("index manifest inconsistent: n=" +
                                 std::to_string(n) + " but " +
                                 std::to_string(idx.ids_.size()) + " ids");
    }
    idx.rows_ = io::read_f32_raw((fs::path(dir) / "vectors.f32").string(),
                                 n * idx.d_img_);
    return idx;
}

// ---------------------------------------------------------------------------
// Lookup sets
// ---------------------------------------------------------------------------

LookupSet build_lookup(const corpus::Corpus& corpus) {
    LookupSet lookup;
    // Ascending id order makes the five-exemplar cut deterministic no matter
    // how the corpus file was ordered.
    auto train = corpus.train_records();
    std::sort(train.begin(), train.end(),
              [](const corpus::MemeRecord* a, const corpus::MemeRecord* b) {
                  return a->id < b->id;
              });
    for (const auto* r : train) {
        for (corpus::Param p : r->commonsense) {
            const int ip = static_cast<int>(p);
            lookup.train_frequency[ip] += 1;
            if (lookup.ids_by_param[ip].size() < 5) {
                lookup.ids_by_param[ip].push_back(r->id);
            }
        }
    }
    return lookup;
}

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

const char* name(Strategy s) {
    switch (s) {
        case Strategy::random: return "random";
        case Strategy::commonsense: return "commonsense";
        case Strategy::image: return "image";
        case Strategy::combined: return "combined";
    }
    return "?";
}

Strategy parse_strategy(const std::string& text) {
    if (text == "random") return Strategy::random;
    if (text == "commonsense") return Strategy::commonsense;
    if (text == "image") return Strategy::image;
    if (text == "combined") return Strategy::combined;
    throw std::runtime_error("unknown retrieval strategy '" + text + "'");
}

const char* name(Source s) {
    switch (s) {
        case Source::random: return "random";
        case Source::commonsense: return "commonsense";
        case Source::image: return "image";
    }
    return "?";
}

std::vector<ScoredId> retrieve_image(const EmbeddingIndex& index,
                                     const corpus::MemeRecord& anchor,
                                     std::size_t k) {
    if (k < 1) throw std::runtime_error("retrieve_image: k must be >= 1");
    // Anchors from the train split sit in the index; leave room to drop them.
    const bool anchor_indexed =
        std::find(index.ids().begin(), index.ids().end(), anchor.id) !=
        index.ids().end();
    const std::size_t candidates = index.size() - (anchor_indexed ? 1 : 0);
    if (k > candidates) {
        throw std::runtime_error(
            "retrieve_image: k=" + std::to_string(k) + " exceeds the " +
            std::to_string(candidates) + " available candidates");
    }
    const auto ranked =
        index.query(anchor.image_features, std::min(index.size(), k + 1));
    std::vector<ScoredId> out;
    for (const auto& s : ranked) {
        if (s.id == anchor.id) continue;
        out.push_back(s);
        if (out.size() == k) break;
    }
    return out;
}

std::vector<std::string> retrieve_commonsense(const LookupSet& lookup,
                                              const corpus::MemeRecord& anchor,
                                              std::size_t k,
                                              std::uint64_t seed) {
    if (k < 1) throw std::runtime_error("retrieve_commonsense: k must be >= 1");
    if (anchor.commonsense.empty()) {
        throw std::runtime_error("retrieve_commonsense: anchor '" + anchor.id +
                                 "' has no commonsense parameters");
    }

    // Rarest-first parameter order: train frequency ascending, id tie-break.
    std::vector<corpus::Param> params = anchor.commonsense;
    std::sort(params.begin(), params.end(),
              [&](corpus::Param a, corpus::Param b) {
                  const auto fa = lookup.train_frequency[static_cast<int>(a)];
                  const auto fb = lookup.train_frequency[static_cast<int>(b)];
                  if (fa != fb) return fa < fb;
                  return a < b;
              });

    // Working copies of the lookup lists with the anchor itself removed.
    std::vector<std::vector<std::string>> pools;
    for (corpus::Param p : params) {
        auto pool = lookup.ids_by_param[static_cast<int>(p)];
        std::erase(pool, anchor.id);
        pools.push_back(std::move(pool));
    }

    rng::Rng gen = rng::derive(seed, "retrieve_commonsense", anchor.id);
    std::vector<std::string> chosen;
    while (chosen.size() < k) {
        bool progressed = false;
        for (std::size_t pi = 0; pi < pools.size() && chosen.size() < k; ++pi) {
            auto& pool = pools[pi];
            // Drop anything another parameter's turn already took.
            std::erase_if(pool, [&](const std::string& id) {
                return std::find(chosen.begin(), chosen.end(), id) !=
                       chosen.end();
            });
            if (pool.empty()) continue;
            const std::size_t pick =
                static_cast<std::size_t>(gen.below(pool.size()));
            chosen.push_back(pool[pick]);
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
            progressed = true;
        }
        if (!progressed) {
            throw std::runtime_error(
                "retrieve_commonsense: only " + std::to_string(chosen.size()) +
                " distinct exemplars available for anchor '" + anchor.id +
                "', need k=" + std::to_string(k));
        }
    }
    return chosen;
}

std::vector<std::string> retrieve_random(const corpus::Corpus& corpus,
                                         const corpus::MemeRecord& anchor,
                                         std::size_t k, std::uint64_t seed) {
    if (k < 1) throw std::runtime_error("retrieve_random: k must be >= 1");
    std::vector<std::string> candidates;
    for (const auto* r : corpus.train_records()) {
        if (r->id != anchor.id) candidates.push_back(r->id);
    }
    if (k > candidates.size()) {
        throw std::runtime_error(
            "retrieve_random: k=" + std::to_string(k) + " exceeds the " +
            std::to_string(candidates.size()) + " available candidates");
    }
    rng::Rng gen = rng::derive(seed, "retrieve_random", anchor.id);
    // Partial Fisher-Yates: the first k slots are a uniform sample.
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j =
            i + static_cast<std::size_t>(gen.below(candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
    }
    candidates.resize(k);
    return candidates;
}

namespace {

Demonstration make_demo(const corpus::Corpus& corpus, const std::string& id,
                        Source source,
                        std::optional<double> similarity = std::nullopt) {
    const auto& r = corpus.at(id);
    Demonstration d;
    d.record_id = r.id;
    d.commonsense = r.commonsense;
    d.intervention = r.intervention;
    d.source = source;
    d.similarity = similarity;
    return d;
}

}  // namespace

InContextSet retrieve(const corpus::Corpus& corpus, const EmbeddingIndex* index,
                      const LookupSet* lookup,
                      const corpus::MemeRecord& anchor, Strategy strategy,
                      std::size_t k, std::size_t c, std::uint64_t seed) {
    InContextSet set;
    set.anchor_id = anchor.id;
    set.strategy = strategy;
    set.k = k;
    set.c = strategy == Strategy::combined ? c : 0;

    switch (strategy) {
        case Strategy::random: {
            for (const auto& id : retrieve_random(corpus, anchor, k, seed)) {
                set.demonstrations.push_back(
                    make_demo(corpus, id, Source::random));
            }
            break;
        }
        case Strategy::commonsense: {
            if (!lookup) throw std::runtime_error("commonsense strategy needs a lookup set");
            for (const auto& id :
                 retrieve_commonsense(*lookup, anchor, k, seed)) {
                set.demonstrations.push_back(
                    make_demo(corpus, id, Source::commonsense));
            }
            break;
        }
        case Strategy::image: {
            if (!index) throw std::runtime_error("image strategy needs an index");
            for (const auto& s : retrieve_image(*index, anchor, k)) {
                set.demonstrations.push_back(
                    make_demo(corpus, s.id, Source::image, s.similarity));
            }
            break;
        }
        case Strategy::combined: {
            if (!index || !lookup) {
                throw std::runtime_error("combined strategy needs index and lookup");
            }
            if (c < 1 || c > k) {
                throw std::runtime_error("combined strategy: need 1 <= c <= k, got c=" +
                                         std::to_string(c) + ", k=" + std::to_string(k));
            }
            const auto cs_ids = retrieve_commonsense(*lookup, anchor, c, seed);
            for (const auto& id : cs_ids) {
                set.demonstrations.push_back(
                    make_demo(corpus, id, Source::commonsense));
            }
            if (c < k) {
                // Rank everything, then walk down skipping the anchor and the
                // commonsense picks until the image quota is filled.
                const auto ranked =
                    index->query(anchor.image_features, index->size());
                std::size_t need = k - c;
                for (const auto& s : ranked) {
                    if (need == 0) break;
                    if (s.id == anchor.id) continue;
                    if (std::find(cs_ids.begin(), cs_ids.end(), s.id) !=
                        cs_ids.end()) {
                        continue;
                    }
                    set.demonstrations.push_back(
                        make_demo(corpus, s.id, Source::image, s.similarity));
                    --need;
                }
                if (need > 0) {
                    throw std::runtime_error(
                        "combined strategy: not enough distinct image candidates "
                        "for anchor '" + anchor.id + "'");
                }
            }
            break;
        }
    }
    return set;
}

std::vector<InContextSet> build_icl_dataset(const corpus::Corpus& corpus,
                                            Strategy strategy, std::size_t k,
                                            std::size_t c, std::uint64_t seed) {
    static constexpr std::size_t kGrid[] = {1, 2, 4, 8, 10};
    if (std::find(std::begin(kGrid), std::end(kGrid), k) == std::end(kGrid)) {
        std::cerr << "warning: k=" << k
                  << " is outside the usual grid {1,2,4,8,10}; proceeding\n";
    }
    if (strategy == Strategy::combined && c != 1 && c != 2 && c != 4) {
        std::cerr << "warning: c=" << c
                  << " is outside the usual grid {1,2,4}; proceeding\n";
    }

    const EmbeddingIndex index = EmbeddingIndex::build(corpus);
    const LookupSet lookup = build_lookup(corpus);

    std::vector<InContextSet> sets;
    for (const auto* anchor : corpus.train_records()) {
        sets.push_back(
            retrieve(corpus, &index, &lookup, *anchor, strategy, k, c, seed));
    }
    return sets;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_icl(const std::vector<InContextSet>& sets, const std::string& path) {
    nlohmann::ordered_json root = nlohmann::json::array();
    for (const auto& set : sets) {
        nlohmann::ordered_json j;
        j["anchor_id"] = set.anchor_id;
        j["strategy"] = name(set.strategy);
        j["k"] = set.k;
        j["c"] = set.c;
        nlohmann::ordered_json demos = nlohmann::json::array();
        for (const auto& d : set.demonstrations) {
            nlohmann::ordered_json dj;
            dj["record_id"] = d.record_id;
            nlohmann::json cs = nlohmann::json::array();
            for (corpus::Param p : d.commonsense) cs.push_back(corpus::name(p));
            dj["commonsense"] = std::move(cs);
            dj["intervention"] = d.intervention;
            dj["source"] = name(d.source);
            if (d.similarity) {
                dj["similarity"] = *d.similarity;
            } else {
                dj["similarity"] = nullptr;
            }
            demos.push_back(std::move(dj));
        }
        j["demonstrations"] = std::move(demos);
        root.push_back(std::move(j));
    }
    io::write_text(path, root.dump(2) + "\n");
}

std::vector<InContextSet> load_icl(const std::string& path) {
    const auto root = nlohmann::json::parse(io::read_text(path));
    if (!root.is_array()) {
        throw std::runtime_error("demonstration file must hold a JSON array: " +
                                 path);
    }
    std::vector<InContextSet> sets;
    for (const auto& j : root) {
        InContextSet set;
        set.anchor_id = j.at("anchor_id").get<std::string>();
        set.strategy = parse_strategy(j.at("strategy").get<std::string>());
        set.k = j.at("k").get<std::size_t>();
        set.c = j.at("c").get<std::size_t>();
        for (const auto& dj : j.at("demonstrations")) {
            Demonstration d;
            d.record_id = dj.at("record_id").get<std::string>();
            for (const auto& cs : dj.at("commonsense")) {
                d.commonsense.push_back(
                    corpus::parse_param(cs.get<std::string>()));
            }
            d.intervention = dj.at("intervention").get<std::string>();
            const std::string src = dj.at("source").get<std::string>();
            if (src == "random") d.source = Source::random;
            else if (src == "commonsense") d.source = Source::commonsense;
            else if (src == "image") d.source = Source::image;
            else throw std::runtime_error("unknown demonstration source '" + src + "'");
            if (dj.contains("similarity") && !dj.at("similarity").is_null()) {
                d.similarity = dj.at("similarity").get<double>();
            }
            set.demonstrations.push_back(std::move(d));
        }
        sets.push_back(std::move(set));
    }
    return sets;
}

}  // namespace memesense::retrieval
