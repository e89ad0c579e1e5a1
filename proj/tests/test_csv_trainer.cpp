#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "memesense/corpus.hpp"
#include "memesense/csv_trainer.hpp"
#include "memesense/io.hpp"
#include "memesense/model.hpp"
#include "memesense/retrieval.hpp"
#include "memesense/rng.hpp"
#include "test_util.hpp"

using namespace memesense;
using csv_trainer::LossBreakdown;
using model::LayerShifts;
using model::Model;

namespace {

struct Pipeline {
    corpus::Corpus corpus;
    Model m;
    std::vector<csv_trainer::TrainPair> pairs;
};

Pipeline make_pipeline(std::uint64_t seed = 51) {
    auto c = corpus::synth_generate(
        {.n = 20, .d_img = 8, .n_clusters = 2, .seed = seed});
    model::ModelConfig config;
    config.n_layers = 2;
    config.d_model = 16;
    config.n_heads = 2;
    config.max_seq = 160;
    config.d_img = 8;
    config.img_prefix_len = 2;
    config.seed = seed + 1;
    Model m(config, model::Tokenizer::build(c));
    const auto sets =
        retrieval::build_icl_dataset(c, retrieval::Strategy::image, 2, 1, 9);
    auto pairs = csv_trainer::build_distillation_set(m, c, sets);
    return Pipeline{std::move(c), std::move(m), std::move(pairs)};
}

std::vector<double> random_distribution(rng::Rng& gen, std::size_t n) {
    std::vector<double> p(n);
    double s = 0.0;
    for (auto& x : p) {
        x = -std::log(gen.uniform() + 1e-300);
        s += x;
    }
    for (auto& x : p) x /= s;
    return p;
}

}  // namespace

TEST_CASE("kl_row matches the closed form and is zero on identical rows") {
    const std::vector<double> t = {0.5, 0.5};
    const std::vector<double> s = {0.25, 0.75};
    const double expect = 0.5 * std::log(0.5 / 0.25) +
                          0.5 * std::log(0.5 / 0.75);
    CHECK(csv_trainer::kl_row(t, s) ==
          doctest::Approx(expect).epsilon(1e-12));
    CHECK(csv_trainer::kl_row(t, t) == 0.0);
    CHECK(csv_trainer::kl_row(s, s) == 0.0);
}

TEST_CASE("kl_row is non-negative on random distribution pairs") {
    rng::Rng gen(7);
    for (int trial = 0; trial < 100; ++trial) {
        const auto t = random_distribution(gen, 17);
        const auto s = random_distribution(gen, 17);
        CHECK(csv_trainer::kl_row(t, s) >= -1e-12);
    }
}

TEST_CASE("kl_row floors zero student mass instead of overflowing") {
    const std::vector<double> t = {0.5, 0.5};
    const std::vector<double> s = {1.0, 0.0};
    const double got = csv_trainer::kl_row(t, s);
    CHECK(std::isfinite(got));
    const double expect = 0.5 * std::log(0.5 / 1.0) +
                          0.5 * (std::log(0.5) - std::log(1e-12));
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("kl_row validates lengths and normalization") {
    CHECK_THROWS_WITH_AS(csv_trainer::kl_row({1.0}, {0.5, 0.5}),
                         doctest::Contains("length mismatch"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(csv_trainer::kl_row({0.4, 0.5}, {0.5, 0.5}),
                         doctest::Contains("expected 1"), std::runtime_error);
    CHECK_THROWS_WITH_AS(csv_trainer::kl_row({0.5, 0.5}, {0.7, 0.5}),
                         doctest::Contains("expected 1"), std::runtime_error);
}

TEST_CASE("uniform student over 64 tokens scores ivt = ln 64") {
    const std::size_t V = 64;
    const std::vector<double> uniform(V, 1.0 / 64.0);
    std::vector<std::vector<double>> teacher(3, uniform);
    std::vector<std::vector<double>> student(3, uniform);
    const std::vector<int> targets = {5, 0, 63};
    const auto loss = csv_trainer::total_loss(teacher, student, targets, 0.5);
    CHECK(loss.ivt == doctest::Approx(std::log(64.0)).epsilon(1e-9));
    CHECK(loss.od == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("total is exactly od + gamma * ivt") {
    rng::Rng gen(13);
    std::vector<std::vector<double>> teacher, student;
    std::vector<int> targets;
    for (int i = 0; i < 5; ++i) {
        teacher.push_back(random_distribution(gen, 23));
        student.push_back(random_distribution(gen, 23));
        targets.push_back(static_cast<int>(gen.below(23)));
    }
    const auto loss = csv_trainer::total_loss(teacher, student, targets, 0.5);
    CHECK(loss.total == loss.od + 0.5 * loss.ivt);
    CHECK(loss.gamma == 0.5);

    const auto heavier = csv_trainer::total_loss(teacher, student, targets, 2.0);
    CHECK(heavier.od == loss.od);
    CHECK(heavier.ivt == loss.ivt);
    CHECK(heavier.total == loss.od + 2.0 * loss.ivt);
}

TEST_CASE("total_loss validates row counts") {
    const std::vector<std::vector<double>> rows(2, {0.5, 0.5});
    CHECK_THROWS_WITH_AS(
        csv_trainer::total_loss(rows, rows, {0}, 0.5),
        doctest::Contains("disagree"), std::runtime_error);
    CHECK_THROWS_WITH_AS(csv_trainer::total_loss({}, {}, {}, 0.5),
                         doctest::Contains("no scored positions"),
                         std::runtime_error);
}

TEST_CASE("match_rate counts greedy agreements") {
    const std::vector<std::vector<double>> a = {{0.9, 0.1}, {0.2, 0.8}};
    const std::vector<std::vector<double>> b = {{0.6, 0.4}, {0.7, 0.3}};
    CHECK(csv_trainer::match_rate(a, a) == 1.0);
    CHECK(csv_trainer::match_rate(a, b) == 0.5);
    const std::vector<std::vector<double>> c = {{0.1, 0.9}, {0.8, 0.2}};
    CHECK(csv_trainer::match_rate(a, c) == 0.0);
}

TEST_CASE("init_shifts: unit gains, f32-clean small vectors, seeded") {
    model::ModelConfig config;
    config.n_layers = 3;
    config.d_model = 24;
    const auto a = csv_trainer::init_shifts(config, 5, 0.01);
    const auto b = csv_trainer::init_shifts(config, 5, 0.01);
    const auto other = csv_trainer::init_shifts(config, 6, 0.01);

    REQUIRE(a.alpha.size() == 3);
    for (double g : a.alpha) CHECK(g == 1.0);
    REQUIRE(a.csv.size() == 72);
    double sq = 0.0;
    bool nonzero = false;
    for (double x : a.csv) {
        CHECK(io::round_f32(x) == x);
        CHECK(std::fabs(x) < 0.1);
        if (x != 0.0) nonzero = true;
        sq += x * x;
    }
    CHECK(nonzero);
    // Empirical spread is on the order of the configured sigma.
    const double sd = std::sqrt(sq / 72.0);
    CHECK(sd > 0.003);
    CHECK(sd < 0.03);
    CHECK(a.csv == b.csv);
    CHECK(a.csv != other.csv);
}

TEST_CASE("analytic distillation gradients agree with finite differences") {
    auto pipe = make_pipeline(51);
    const auto& m = pipe.m;
    const auto& pair = pipe.pairs.front();
    const double gamma = 0.5;

    auto shifts = csv_trainer::init_shifts(m.config(), 3, 0.01);
    shifts.alpha = {0.8, 1.2};

    auto loss_at = [&]() {
        const auto rows = m.response_distributions(pair.student, &shifts);
        return csv_trainer::total_loss(pair.teacher_rows, rows, pair.targets,
                                       gamma).total;
    };

    // Analytic gradients via the backward pass.
    const auto fwd = m.forward(pair.student, &shifts);
    const std::size_t V = m.config().vocab_size;
    const auto positions = model::loss_positions(pair.student);
    const double inv = 1.0 / static_cast<double>(positions.size());
    std::vector<double> dlogits(fwd.acts.T * V, 0.0);
    for (std::size_t i = 0; i < positions.size(); ++i) {
        std::vector<double> row(fwd.logits.begin() + positions[i] * V,
                                fwd.logits.begin() + (positions[i] + 1) * V);
        model::softmax_row(row.data(), V);
        double* dl = dlogits.data() + positions[i] * V;
        const auto target = static_cast<std::size_t>(pair.targets[i]);
        for (std::size_t v = 0; v < V; ++v) {
            const double onehot = v == target ? 1.0 : 0.0;
            dl[v] = inv * ((row[v] - pair.teacher_rows[i][v]) +
                           gamma * (row[v] - onehot));
        }
    }
    LayerShifts grads;
    grads.csv.assign(shifts.csv.size(), 0.0);
    grads.alpha.assign(shifts.alpha.size(), 0.0);
    m.backward(pair.student, fwd, dlogits, &shifts, nullptr, &grads);

    const double eps = 1e-3;
    auto central = [&](double& slot, double h) {
        const double orig = slot;
        slot = orig + h;
        const double up = loss_at();
        slot = orig - h;
        const double dn = loss_at();
        slot = orig;
        return (up - dn) / (2.0 * h);
    };
    auto fd = [&](double& slot) {
        return (4.0 * central(slot, eps / 2.0) - central(slot, eps)) / 3.0;
    };

    double worst = 0.0;
    for (std::size_t i = 0; i < shifts.csv.size(); ++i) {
        const double numeric = fd(shifts.csv[i]);
        worst = std::max(worst,
                         std::fabs(grads.csv[i] - numeric) /
                             std::max(1e-6, std::max(std::fabs(grads.csv[i]),
                                                     std::fabs(numeric))));
    }
    for (std::size_t l = 0; l < shifts.alpha.size(); ++l) {
        const double numeric = fd(shifts.alpha[l]);
        worst = std::max(worst,
                         std::fabs(grads.alpha[l] - numeric) /
                             std::max(1e-6,
                                      std::max(std::fabs(grads.alpha[l]),
                                               std::fabs(numeric))));
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("distillation pairs align teacher rows with student positions") {
    auto pipe = make_pipeline(52);
    REQUIRE(pipe.pairs.size() == pipe.corpus.train_records().size());
    for (const auto& pair : pipe.pairs) {
        const auto positions = model::loss_positions(pair.student);
        CHECK(pair.teacher_rows.size() == positions.size());
        CHECK(pair.targets.size() == positions.size());
        for (std::size_t i = 0; i < positions.size(); ++i) {
            CHECK(pair.targets[i] ==
                  pair.student.tokens[positions[i] + 1]);
        }

        // The demonstrations must actually alter the predictive
        // distributions; otherwise distillation has nothing to close.
        const auto zero_shot = pipe.m.response_distributions(pair.student);
        REQUIRE(zero_shot.size() == pair.teacher_rows.size());
        double gap = 0.0;
        for (std::size_t i = 0; i < zero_shot.size(); ++i) {
            gap += csv_trainer::kl_row(pair.teacher_rows[i], zero_shot[i]);
        }
        CHECK(gap > 0.0);
    }
}

TEST_CASE("training reduces the objective without touching the base model") {
    auto pipe = make_pipeline(53);
    std::vector<double> before;
    pipe.m.params().for_each(
        [&](const std::string&, const std::vector<double>& v) {
            before.insert(before.end(), v.begin(), v.end());
        });

    csv_trainer::ShiftTrainConfig tc;
    tc.epochs = 6;
    tc.batch_size = 2;
    tc.learning_rate = 1e-2;
    tc.seed = 4;
    const auto trained = csv_trainer::distill(pipe.m, pipe.pairs, tc);

    REQUIRE(trained.report.epoch_loss.size() == tc.epochs);
    for (const auto& e : trained.report.epoch_loss) {
        CHECK(std::isfinite(e.total));
        CHECK(e.od >= -1e-12);
        CHECK(e.ivt >= 0.0);
    }
    CHECK(trained.report.epoch_loss.back().total <
          trained.report.epoch_loss.front().total);

    std::vector<double> after;
    pipe.m.params().for_each(
        [&](const std::string&, const std::vector<double>& v) {
            after.insert(after.end(), v.begin(), v.end());
        });
    CHECK(before == after);

    for (double x : trained.shifts.csv) CHECK(io::round_f32(x) == x);
    for (double x : trained.shifts.alpha) CHECK(io::round_f32(x) == x);

    // Deterministic end to end.
    const auto again = csv_trainer::distill(pipe.m, pipe.pairs, tc);
    CHECK(again.shifts.csv == trained.shifts.csv);
    CHECK(again.shifts.alpha == trained.shifts.alpha);
    REQUIRE(again.report.epoch_loss.size() == tc.epochs);
    for (std::size_t e = 0; e < tc.epochs; ++e) {
        CHECK(again.report.epoch_loss[e].total ==
              trained.report.epoch_loss[e].total);
    }
}

TEST_CASE("poisoned activations abort with a diagnostic") {
    auto pipe = make_pipeline(54);
    csv_trainer::ShiftTrainConfig tc;
    tc.epochs = 1;
    auto shifts = csv_trainer::init_shifts(pipe.m.config(), 0, 0.01);
    shifts.csv[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(
        csv_trainer::train_shifts(pipe.m, pipe.pairs, tc, shifts),
        std::runtime_error);
}

TEST_CASE("shift checkpoints round-trip exactly and reject corruption") {
    model::ModelConfig config;
    config.n_layers = 2;
    config.d_model = 16;
    auto shifts = csv_trainer::init_shifts(config, 99, 0.01);
    shifts.alpha = {1.25, 0.75};
    csv_trainer::ShiftMeta meta;
    meta.gamma = 0.5;
    meta.seed = 99;
    meta.epochs = 10;

    testutil::TempDir tmp;
    const std::string dir = tmp.file("shifts");
    csv_trainer::save_shifts(dir, shifts, meta);
    const auto loaded = csv_trainer::load_shifts(dir);
    CHECK(loaded.shifts.csv == shifts.csv);
    CHECK(loaded.shifts.alpha == shifts.alpha);
    CHECK(loaded.meta.gamma == meta.gamma);
    CHECK(loaded.meta.seed == meta.seed);
    CHECK(loaded.meta.epochs == meta.epochs);

    // Truncated tensor file.
    const std::string cpath = dir + "/csv.f32";
    const auto bytes = testutil::read_file(cpath);
    testutil::write_file(cpath, bytes.substr(0, bytes.size() - 4));
    CHECK_THROWS_WITH_AS(csv_trainer::load_shifts(dir),
                         doctest::Contains("size mismatch"),
                         std::runtime_error);
    testutil::write_file(cpath, bytes);

    // Unsupported reduction in the manifest.
    const std::string mpath = dir + "/manifest.json";
    auto text = testutil::read_file(mpath);
    const auto at = text.find("\"mean\"");
    REQUIRE(at != std::string::npos);
    text.replace(at, 6, "\"sum\"");
    testutil::write_file(mpath, text);
    CHECK_THROWS_WITH_AS(csv_trainer::load_shifts(dir),
                         doctest::Contains("reduction"), std::runtime_error);
}
