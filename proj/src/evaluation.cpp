#include "memesense/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "memesense/kernels.hpp"
#include "memesense/rng.hpp"

namespace memesense::evaluation {

namespace {

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw std::runtime_error("embedding dims disagree: " +
                                 std::to_string(a.size()) + " vs " +
                                 std::to_string(b.size()));
    }
    const double na = kernels::dot(a.data(), a.data(), a.size());
    const double nb = kernels::dot(b.data(), b.data(), b.size());
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return kernels::dot(a.data(), b.data(), a.size()) /
           (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> mean_embedding(const std::vector<std::string>& tokens,
                                   const Embedder& embed) {
    std::vector<double> acc;
    for (const auto& t : tokens) {
        auto e = embed(t);
        if (acc.empty()) {
            acc = std::move(e);
        } else {
            if (e.size() != acc.size()) {
                throw std::runtime_error("embedder returned inconsistent dims");
            }
            kernels::axpy(1.0, e.data(), acc.data(), acc.size());
        }
    }
    if (!acc.empty() && !tokens.empty()) {
        kernels::scale(1.0 / static_cast<double>(tokens.size()), acc.data(),
                       acc.size());
    }
    return acc;
}

// Normal CDF.
double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double hidden_distance(const std::vector<double>& a,
                       const std::vector<double>& b) {
    return std::sqrt(kernels::sqdist(a.data(), b.data(), a.size()));
}

std::vector<double> probe_hidden(const model::Model& m,
                                 const corpus::MemeRecord& rec,
                                 std::size_t layer,
                                 const model::LayerShifts* shifts) {
    const auto enc = model::encode_prompt(m.tokenizer(), m.config(),
                                          rec.image_features, rec.commonsense,
                                          {}, "");
    return m.first_token_hidden(enc, layer, shifts);
}

bool shares_param(const corpus::MemeRecord& a, const corpus::MemeRecord& b) {
    for (auto p : a.commonsense) {
        if (std::find(b.commonsense.begin(), b.commonsense.end(), p) !=
            b.commonsense.end()) {
            return true;
        }
    }
    return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// BLEU / ROUGE / readability
// ---------------------------------------------------------------------------

double bleu4(const std::string& reference, const std::string& candidate) {
    const auto ref = split_words(reference);
    const auto cand = split_words(candidate);
    if (cand.empty() || ref.empty()) return 0.0;

    double log_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        if (cand.size() < n) return 0.0;  // no n-grams to score
        std::map<std::string, std::size_t> ref_counts;
        auto join = [](const std::vector<std::string>& toks, std::size_t i,
                       std::size_t n) {
            std::string key;
            for (std::size_t k = 0; k < n; ++k) {
                key += toks[i + k];
                key += '\x1f';
            }
            return key;
        };
        if (ref.size() >= n) {
            for (std::size_t i = 0; i + n <= ref.size(); ++i) {
                ++ref_counts[join(ref, i, n)];
            }
        }
        std::map<std::string, std::size_t> cand_counts;
        for (std::size_t i = 0; i + n <= cand.size(); ++i) {
            ++cand_counts[join(cand, i, n)];
        }
        std::size_t clipped = 0, total = 0;
        for (const auto& [key, count] : cand_counts) {
            total += count;
            const auto it = ref_counts.find(key);
            if (it != ref_counts.end()) {
                clipped += std::min(count, it->second);
            }
        }
        if (clipped == 0) return 0.0;  // unsmoothed: any zero order zeroes BLEU
        log_sum += std::log(static_cast<double>(clipped) /
                            static_cast<double>(total));
    }
    const double c = static_cast<double>(cand.size());
    const double r = static_cast<double>(ref.size());
    const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
    return bp * std::exp(0.25 * log_sum);
}

double rouge_l(const std::string& reference, const std::string& candidate) {
    const auto ref = split_words(reference);
    const auto cand = split_words(candidate);
    if (ref.empty() || cand.empty()) return 0.0;
    std::vector<std::size_t> prev(cand.size() + 1, 0), cur(cand.size() + 1, 0);
    for (std::size_t i = 1; i <= ref.size(); ++i) {
        for (std::size_t j = 1; j <= cand.size(); ++j) {
            cur[j] = ref[i - 1] == cand[j - 1]
                         ? prev[j - 1] + 1
                         : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    const double lcs = static_cast<double>(prev[cand.size()]);
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(cand.size());
    const double r = lcs / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

std::size_t syllable_count(const std::string& word) {
    std::string letters;
    for (char ch : word) {
        if (std::isalpha(static_cast<unsigned char>(ch))) {
            letters += static_cast<char>(
                std::tolower(static_cast<unsigned char>(ch)));
        }
    }
    if (letters.empty()) return 0;
    const std::string vowels = "aeiouy";
    std::size_t runs = 0;
    bool in_run = false;
    for (char ch : letters) {
        const bool vowel = vowels.find(ch) != std::string::npos;
        if (vowel && !in_run) ++runs;
        in_run = vowel;
    }
    return std::max<std::size_t>(runs, 1);
}

double flesch_reading_ease(const std::string& text) {
    const auto words = split_words(text);
    if (words.empty()) {
        throw std::runtime_error("readability needs at least one word");
    }
    std::size_t sentences = 0;
    bool in_terminator = false;
    for (char ch : text) {
        const bool term = ch == '.' || ch == '!' || ch == '?';
        if (term && !in_terminator) ++sentences;
        in_terminator = term;
    }
    if (sentences == 0) sentences = 1;
    std::size_t syllables = 0;
    for (const auto& w : words) syllables += syllable_count(w);
    const double W = static_cast<double>(words.size());
    return 206.835 - 1.015 * (W / static_cast<double>(sentences)) -
           84.6 * (static_cast<double>(syllables) / W);
}

// ---------------------------------------------------------------------------
// Embedding metrics
// ---------------------------------------------------------------------------

Embedder make_model_embedder(const model::Model& m) {
    const auto* params = &m.params();
    const auto* tok = &m.tokenizer();
    const std::size_t d = m.config().d_model;
    return [params, tok, d](const std::string& word) {
        const auto id = static_cast<std::size_t>(tok->word_id(word));
        return std::vector<double>(params->tok_emb.begin() + id * d,
                                   params->tok_emb.begin() + (id + 1) * d);
    };
}

double semantic_similarity(const std::string& a, const std::string& b,
                           const Embedder& embed) {
    const auto ta = split_words(a), tb = split_words(b);
    if (ta.empty() || tb.empty()) return 0.0;
    return cosine(mean_embedding(ta, embed), mean_embedding(tb, embed));
}

double matchscore_f1(const std::string& reference, const std::string& candidate,
                     const Embedder& embed, double threshold) {
    const auto ref = split_words(reference);
    const auto cand = split_words(candidate);
    if (ref.empty() && cand.empty()) return 0.0;
    if (ref.empty() || cand.empty()) return 0.0;

    std::vector<std::vector<double>> ref_emb;
    ref_emb.reserve(ref.size());
    for (const auto& t : ref) ref_emb.push_back(embed(t));

    std::vector<bool> taken(ref.size(), false);
    std::size_t matches = 0;
    for (const auto& t : cand) {
        const auto e = embed(t);
        double best = -2.0;
        std::size_t best_i = ref.size();
        for (std::size_t i = 0; i < ref.size(); ++i) {
            if (taken[i]) continue;
            const double sim = cosine(e, ref_emb[i]);
            if (sim > best) {
                best = sim;
                best_i = i;
            }
        }
        if (best_i < ref.size() && best > threshold) {
            taken[best_i] = true;
            ++matches;
        }
    }
    if (matches == 0) return 0.0;
    const double p = static_cast<double>(matches) /
                     static_cast<double>(cand.size());
    const double r = static_cast<double>(matches) /
                     static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

MwuResult mann_whitney_u(const std::vector<double>& a,
                         const std::vector<double>& b) {
    if (a.empty() || b.empty()) {
        throw std::runtime_error("both samples need at least one value");
    }
    const std::size_t na = a.size(), nb = b.size();

    double u_a = 0.0;
    for (double x : a) {
        for (double y : b) {
            if (x > y) {
                u_a += 1.0;
            } else if (x == y) {
                u_a += 0.5;
            }
        }
    }

    // Tie inventory over the pooled sample.
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    std::sort(pooled.begin(), pooled.end());
    bool has_ties = false;
    double tie_term = 0.0;  // sum of t^3 - t over tie groups
    for (std::size_t i = 0; i < pooled.size();) {
        std::size_t j = i;
        while (j < pooled.size() && pooled[j] == pooled[i]) ++j;
        const double t = static_cast<double>(j - i);
        if (j - i > 1) {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        i = j;
    }

    MwuResult out;
    out.u = u_a;

    if (!has_ties && na * nb <= 400) {
        // Exact permutation distribution via the rank-arrangement recurrence
        // f(n1, n2, u) = f(n1-1, n2, u-n2) + f(n1, n2-1, u): the largest
        // pooled value either belongs to the first sample (beating all n2) or
        // to the second.
        const std::size_t umax = na * nb;
        std::vector<std::vector<std::vector<double>>> f(
            na + 1,
            std::vector<std::vector<double>>(
                nb + 1, std::vector<double>(umax + 1, 0.0)));
        for (std::size_t j = 0; j <= nb; ++j) f[0][j][0] = 1.0;
        for (std::size_t i = 1; i <= na; ++i) {
            for (std::size_t j = 0; j <= nb; ++j) {
                for (std::size_t u = 0; u <= umax; ++u) {
                    double v = 0.0;
                    if (u >= j) v += f[i - 1][j][u - j];
                    if (j >= 1) v += f[i][j - 1][u];
                    f[i][j][u] = v;
                }
            }
        }
        const auto& dist = f[na][nb];
        double total = 0.0;
        for (double w : dist) total += w;
        const auto u_int = static_cast<std::size_t>(u_a + 0.5);
        double le = 0.0, ge = 0.0;
        for (std::size_t u = 0; u <= umax; ++u) {
            if (u <= u_int) le += dist[u];
            if (u >= u_int) ge += dist[u];
        }
        out.p = std::min(1.0, 2.0 * std::min(le, ge) / total);
        return out;
    }

    const double n = static_cast<double>(na + nb);
    const double mu = static_cast<double>(na) * static_cast<double>(nb) / 2.0;
    const double var = static_cast<double>(na) * static_cast<double>(nb) /
                       12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if (var <= 0.0) {
        // Every pooled value identical: no evidence either way.
        out.p = 1.0;
        return out;
    }
    double z = 0.0;
    if (u_a > mu) {
        z = (u_a - 0.5 - mu) / std::sqrt(var);
    } else if (u_a < mu) {
        z = (u_a + 0.5 - mu) / std::sqrt(var);
    }
    out.p = std::min(1.0, 2.0 * phi(-std::fabs(z)));
    return out;
}

double spearman_rho(const std::vector<double>& x,
                    const std::vector<double>& y) {
    if (x.size() != y.size()) {
        throw std::runtime_error("rank correlation needs equal lengths, got " +
                                 std::to_string(x.size()) + " and " +
                                 std::to_string(y.size()));
    }
    if (x.size() < 2) {
        throw std::runtime_error("rank correlation needs at least two points");
    }
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(n, 0.0);
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j < n && v[order[j]] == v[order[i]]) ++j;
            const double avg = (static_cast<double>(i) +
                                static_cast<double>(j - 1)) / 2.0 + 1.0;
            for (std::size_t k = i; k < j; ++k) r[order[k]] = avg;
            i = j;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(rx.size());
    my /= static_cast<double>(ry.size());
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        const double dx = rx[i] - mx, dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) {
        throw std::runtime_error(
            "rank correlation is undefined for a constant sequence");
    }
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

ProbeDistances probe_within_between(const model::Model& m,
                                    const corpus::Corpus& corpus,
                                    std::size_t layer, std::size_t n_pairs,
                                    std::uint64_t seed,
                                    const model::LayerShifts* shifts) {
    const auto train = corpus.train_records();
    if (train.size() < 4) {
        throw std::runtime_error("probe needs at least four train records");
    }
    if (n_pairs == 0) {
        throw std::runtime_error("probe needs at least one pair");
    }

    // Hidden states are cached per record id on first use.
    std::map<std::string, std::vector<double>> cache;
    auto hidden = [&](const corpus::MemeRecord& rec) -> const std::vector<double>& {
        auto it = cache.find(rec.id);
        if (it == cache.end()) {
            it = cache.emplace(rec.id, probe_hidden(m, rec, layer, shifts))
                     .first;
        }
        return it->second;
    };

    auto draw_pair = [&](bool within, std::uint64_t trial) {
        rng::Rng gen(rng::derive(seed,
                                 within ? "probe_within" : "probe_between",
                                 std::to_string(trial)));
        for (int attempt = 0; attempt < 100; ++attempt) {
            const auto* first = train[gen.below(train.size())];
            std::vector<const corpus::MemeRecord*> candidates;
            for (const auto* other : train) {
                if (other->id == first->id) continue;
                if (shares_param(*first, *other) == within) {
                    candidates.push_back(other);
                }
            }
            if (candidates.empty()) continue;
            const auto* second = candidates[gen.below(candidates.size())];
            return std::pair<const corpus::MemeRecord*,
                             const corpus::MemeRecord*>{first, second};
        }
        throw std::runtime_error(
            std::string("could not sample a ") +
            (within ? "parameter-sharing" : "parameter-disjoint") +
            " record pair");
    };

    ProbeDistances out;
    out.n_pairs = n_pairs;
    for (std::size_t t = 0; t < n_pairs; ++t) {
        const auto [wa, wb] = draw_pair(true, t);
        out.within += hidden_distance(hidden(*wa), hidden(*wb));
        const auto [ba, bb] = draw_pair(false, t);
        out.between += hidden_distance(hidden(*ba), hidden(*bb));
    }
    out.within /= static_cast<double>(n_pairs);
    out.between /= static_cast<double>(n_pairs);
    return out;
}

CooccurrenceProbe probe_cooccurrence(const model::Model& m,
                                     const corpus::Corpus& corpus,
                                     std::size_t layer, std::size_t top_pairs,
                                     std::size_t max_records_per_pair,
                                     std::uint64_t seed,
                                     const model::LayerShifts* shifts) {
    const auto train = corpus.train_records();
    if (max_records_per_pair < 2) {
        throw std::runtime_error("pair subsample cap must be at least 2");
    }

    // Co-occurrence counts over unordered parameter pairs.
    std::map<std::pair<int, int>, std::size_t> counts;
    for (const auto* r : train) {
        for (std::size_t i = 0; i < r->commonsense.size(); ++i) {
            for (std::size_t j = i + 1; j < r->commonsense.size(); ++j) {
                const int pa = static_cast<int>(r->commonsense[i]);
                const int pb = static_cast<int>(r->commonsense[j]);
                ++counts[{std::min(pa, pb), std::max(pa, pb)}];
            }
        }
    }
    std::vector<std::pair<std::pair<int, int>, std::size_t>> ranked(
        counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    std::map<std::string, std::vector<double>> cache;
    auto hidden = [&](const corpus::MemeRecord& rec) -> const std::vector<double>& {
        auto it = cache.find(rec.id);
        if (it == cache.end()) {
            it = cache.emplace(rec.id, probe_hidden(m, rec, layer, shifts))
                     .first;
        }
        return it->second;
    };

    CooccurrenceProbe out;
    for (const auto& [pair, count] : ranked) {
        if (out.pairs.size() >= top_pairs) break;
        std::vector<const corpus::MemeRecord*> members;
        for (const auto* r : train) {
            const auto pa = static_cast<corpus::Param>(pair.first);
            const auto pb = static_cast<corpus::Param>(pair.second);
            const auto& cs = r->commonsense;
            if (std::find(cs.begin(), cs.end(), pa) != cs.end() &&
                std::find(cs.begin(), cs.end(), pb) != cs.end()) {
                members.push_back(r);
            }
        }
        if (members.size() < 2) continue;
        if (members.size() > max_records_per_pair) {
            rng::Rng gen(rng::derive(seed, "cooccurrence_subsample",
                                     std::to_string(pair.first) + "_" +
                                         std::to_string(pair.second)));
            gen.shuffle(members);
            members.resize(max_records_per_pair);
            std::sort(members.begin(), members.end(),
                      [](const auto* a, const auto* b) { return a->id < b->id; });
        }
        double total = 0.0;
        std::size_t n_dist = 0;
        for (std::size_t i = 0; i < members.size(); ++i) {
            for (std::size_t j = i + 1; j < members.size(); ++j) {
                total += hidden_distance(hidden(*members[i]),
                                         hidden(*members[j]));
                ++n_dist;
            }
        }
        CooccurrencePairStat stat;
        stat.a = static_cast<corpus::Param>(pair.first);
        stat.b = static_cast<corpus::Param>(pair.second);
        stat.count = count;
        stat.mean_distance = total / static_cast<double>(n_dist);
        out.pairs.push_back(stat);
    }
    if (out.pairs.size() < 2) {
        throw std::runtime_error(
            "co-occurrence probe needs at least two parameter pairs with two "
            "or more records each");
    }
    std::vector<double> xs, ys;
    for (const auto& s : out.pairs) {
        xs.push_back(static_cast<double>(s.count));
        ys.push_back(s.mean_distance);
    }
    out.spearman = spearman_rho(xs, ys);
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

EvaluationReport evaluate(const std::vector<Prediction>& predictions,
                          const corpus::Corpus& corpus, const Embedder& embed,
                          double match_threshold) {
    if (predictions.empty()) {
        throw std::runtime_error("no predictions to evaluate");
    }
    EvaluationReport report;
    std::unordered_set<std::string> seen;
    for (const auto& pred : predictions) {
        if (!seen.insert(pred.id).second) {
            throw std::runtime_error("duplicate prediction for record '" +
                                     pred.id + "'");
        }
        const auto& rec = corpus.at(pred.id);
        RecordScores s;
        s.id = pred.id;
        s.bleu4 = bleu4(rec.intervention, pred.text);
        s.rouge_l = rouge_l(rec.intervention, pred.text);
        s.flesch = pred.text.empty() ? 0.0 : flesch_reading_ease(pred.text);
        s.semantic_similarity =
            semantic_similarity(rec.intervention, pred.text, embed);
        s.matchscore =
            matchscore_f1(rec.intervention, pred.text, embed, match_threshold);
        report.aggregate.bleu4 += s.bleu4;
        report.aggregate.rouge_l += s.rouge_l;
        report.aggregate.flesch += s.flesch;
        report.aggregate.semantic_similarity += s.semantic_similarity;
        report.aggregate.matchscore += s.matchscore;
        report.per_record.push_back(std::move(s));
    }
    report.n = report.per_record.size();
    const double inv = 1.0 / static_cast<double>(report.n);
    report.aggregate.bleu4 *= inv;
    report.aggregate.rouge_l *= inv;
    report.aggregate.flesch *= inv;
    report.aggregate.semantic_similarity *= inv;
    report.aggregate.matchscore *= inv;
    return report;
}

Significance compare_semantic(const EvaluationReport& ours,
                              const EvaluationReport& baseline) {
    std::vector<double> a, b;
    for (const auto& s : ours.per_record) a.push_back(s.semantic_similarity);
    for (const auto& s : baseline.per_record) {
        b.push_back(s.semantic_similarity);
    }
    const auto r = mann_whitney_u(a, b);
    return Significance{r.u, r.p};
}

nlohmann::ordered_json report_to_json(const EvaluationReport& report) {
    nlohmann::ordered_json j;
    j["n"] = report.n;
    j["aggregates"] = {
        {"bleu4", report.aggregate.bleu4},
        {"rouge_l", report.aggregate.rouge_l},
        {"flesch", report.aggregate.flesch},
        {"semantic_similarity", report.aggregate.semantic_similarity},
        {"matchscore", report.aggregate.matchscore}};
    auto records = nlohmann::ordered_json::array();
    for (const auto& s : report.per_record) {
        records.push_back({{"id", s.id},
                           {"bleu4", s.bleu4},
                           {"rouge_l", s.rouge_l},
                           {"flesch", s.flesch},
                           {"semantic_similarity", s.semantic_similarity},
                           {"matchscore", s.matchscore}});
    }
    j["per_record"] = std::move(records);
    if (report.significance) {
        j["significance"] = {{"u_statistic", report.significance->u_statistic},
                             {"p_value", report.significance->p_value}};
    } else {
        j["significance"] = nullptr;
    }
    return j;
}

EvaluationReport report_from_json(const nlohmann::json& j) {
    EvaluationReport report;
    report.n = j.at("n").get<std::size_t>();
    const auto& agg = j.at("aggregates");
    report.aggregate.bleu4 = agg.at("bleu4").get<double>();
    report.aggregate.rouge_l = agg.at("rouge_l").get<double>();
    report.aggregate.flesch = agg.at("flesch").get<double>();
    report.aggregate.semantic_similarity =
        agg.at("semantic_similarity").get<double>();
    report.aggregate.matchscore = agg.at("matchscore").get<double>();
    for (const auto& rec : j.at("per_record")) {
        RecordScores s;
        s.id = rec.at("id").get<std::string>();
        s.bleu4 = rec.at("bleu4").get<double>();
        s.rouge_l = rec.at("rouge_l").get<double>();
        s.flesch = rec.at("flesch").get<double>();
        s.semantic_similarity = rec.at("semantic_similarity").get<double>();
        s.matchscore = rec.at("matchscore").get<double>();
        report.per_record.push_back(std::move(s));
    }
    if (!j.at("significance").is_null()) {
        Significance sig;
        sig.u_statistic = j.at("significance").at("u_statistic").get<double>();
        sig.p_value = j.at("significance").at("p_value").get<double>();
        report.significance = sig;
    }
    if (report.per_record.size() != report.n) {
        throw std::runtime_error("report lists " +
                                 std::to_string(report.per_record.size()) +
                                 " records but claims n=" +
                                 std::to_string(report.n));
    }
    return report;
}

}  // namespace memesense::evaluation
