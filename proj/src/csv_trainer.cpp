#include "memesense/csv_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "json.hpp"

#include "memesense/io.hpp"
#include "memesense/kernels.hpp"
#include "memesense/rng.hpp"

namespace memesense::csv_trainer {

namespace {

void check_row(const std::vector<double>& row, const char* which) {
    const double s = kernels::sum(row.data(), row.size());
    if (!(std::fabs(s - 1.0) <= 1e-6)) {
        throw std::runtime_error(std::string(which) +
                                 " distribution sums to " + std::to_string(s) +
                                 "; expected 1 within 1e-6");
    }
}

std::size_t argmax(const std::vector<double>& row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) best = i;
    }
    return best;
}

}  // namespace

double kl_row(const std::vector<double>& teacher,
              const std::vector<double>& student) {
    if (teacher.size() != student.size()) {
        throw std::runtime_error(
            "distribution length mismatch: teacher has " +
            std::to_string(teacher.size()) + " entries, student " +
            std::to_string(student.size()));
    }
    check_row(teacher, "teacher");
    check_row(student, "student");
    double acc = 0.0;
    for (std::size_t i = 0; i < teacher.size(); ++i) {
        if (teacher[i] <= 0.0) continue;
        acc += teacher[i] * (std::log(std::max(teacher[i], kProbEps)) -
                             std::log(std::max(student[i], kProbEps)));
    }
    return acc;
}

LossBreakdown total_loss(const std::vector<std::vector<double>>& teacher_rows,
                         const std::vector<std::vector<double>>& student_rows,
                         const std::vector<int>& targets, double gamma) {
    if (teacher_rows.size() != student_rows.size() ||
        targets.size() != student_rows.size()) {
        throw std::runtime_error(
            "scored positions disagree: " +
            std::to_string(teacher_rows.size()) + " teacher rows, " +
            std::to_string(student_rows.size()) + " student rows, " +
            std::to_string(targets.size()) + " targets");
    }
    if (teacher_rows.empty()) {
        throw std::runtime_error("no scored positions to compute a loss over");
    }
    LossBreakdown out;
    out.gamma = gamma;
    for (std::size_t i = 0; i < teacher_rows.size(); ++i) {
        out.od += kl_row(teacher_rows[i], student_rows[i]);
        const auto t = static_cast<std::size_t>(targets[i]);
        if (t >= student_rows[i].size()) {
            throw std::runtime_error("target id " + std::to_string(targets[i]) +
                                     " outside the distribution");
        }
        out.ivt += -std::log(std::max(student_rows[i][t], kProbEps));
    }
    const double inv = 1.0 / static_cast<double>(teacher_rows.size());
    out.od *= inv;
    out.ivt *= inv;
    out.total = out.od + gamma * out.ivt;
    return out;
}

double match_rate(const std::vector<std::vector<double>>& teacher_rows,
                  const std::vector<std::vector<double>>& student_rows) {
    if (teacher_rows.size() != student_rows.size()) {
        throw std::runtime_error("row counts disagree: " +
                                 std::to_string(teacher_rows.size()) + " vs " +
                                 std::to_string(student_rows.size()));
    }
    if (teacher_rows.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < teacher_rows.size(); ++i) {
        if (argmax(teacher_rows[i]) == argmax(student_rows[i])) ++hits;
    }
    return static_cast<double>(hits) /
           static_cast<double>(teacher_rows.size());
}

std::vector<TrainPair> build_distillation_set(
    const model::Model& m, const corpus::Corpus& corpus,
    const std::vector<retrieval::InContextSet>& sets) {
    std::vector<TrainPair> out;
    out.reserve(sets.size());
    const auto& tok = m.tokenizer();
    for (const auto& set : sets) {
        const auto& anchor = corpus.at(set.anchor_id);
        std::vector<model::DemoInput> demos;
        demos.reserve(set.demonstrations.size());
        for (const auto& d : set.demonstrations) {
            demos.push_back({corpus.at(d.record_id).image_features,
                             d.commonsense, d.intervention});
        }
        const auto teacher_enc = model::encode_prompt(
            tok, m.config(), anchor.image_features, anchor.commonsense, demos,
            anchor.intervention);

        TrainPair pair;
        pair.anchor_id = anchor.id;
        pair.student = model::encode_prompt(tok, m.config(),
                                            anchor.image_features,
                                            anchor.commonsense, {},
                                            anchor.intervention);
        pair.teacher_rows = m.response_distributions(teacher_enc);
        for (std::size_t pos : model::loss_positions(pair.student)) {
            pair.targets.push_back(pair.student.tokens[pos + 1]);
        }
        if (pair.teacher_rows.size() != pair.targets.size()) {
            throw std::runtime_error(
                "teacher and student disagree on scored positions for '" +
                anchor.id + "': " + std::to_string(pair.teacher_rows.size()) +
                " vs " + std::to_string(pair.targets.size()));
        }
        out.push_back(std::move(pair));
    }
    return out;
}

model::LayerShifts init_shifts(const model::ModelConfig& config,
                               std::uint64_t seed, double sigma) {
    model::LayerShifts s;
    s.csv.assign(config.n_layers * config.d_model, 0.0);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        rng::Rng gen(rng::derive(seed, "shift_init", std::to_string(l)));
        for (std::size_t i = 0; i < config.d_model; ++i) {
            s.csv[l * config.d_model + i] = io::round_f32(sigma * gen.normal());
        }
    }
    s.alpha.assign(config.n_layers, 1.0);
    return s;
}

ShiftTrainReport train_shifts(const model::Model& m,
                              const std::vector<TrainPair>& data,
                              const ShiftTrainConfig& config,
                              model::LayerShifts& shifts) {
    if (data.empty()) {
        throw std::runtime_error("no distillation pairs were provided");
    }
    const std::size_t V = m.config().vocab_size;

    model::LayerShifts grads, m_state, v_state;
    grads.csv.assign(shifts.csv.size(), 0.0);
    grads.alpha.assign(shifts.alpha.size(), 0.0);
    m_state = grads;
    v_state = grads;

    std::size_t step = 0;
    ShiftTrainReport report;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        LossBreakdown epoch_acc;
        epoch_acc.gamma = config.gamma;

        for (std::size_t start = 0; start < data.size();
             start += config.batch_size) {
            const std::size_t end =
                std::min(data.size(), start + config.batch_size);
            const double batch_inv = 1.0 / static_cast<double>(end - start);

            std::fill(grads.csv.begin(), grads.csv.end(), 0.0);
            std::fill(grads.alpha.begin(), grads.alpha.end(), 0.0);
            double batch_total = 0.0;

            for (std::size_t b = start; b < end; ++b) {
                const auto& pair = data[b];
                const auto fwd = m.forward(pair.student, &shifts);
                const auto positions = model::loss_positions(pair.student);
                const double pos_inv =
                    1.0 / static_cast<double>(positions.size());

                std::vector<std::vector<double>> student_rows;
                student_rows.reserve(positions.size());
                std::vector<double> dlogits(fwd.acts.T * V, 0.0);
                for (std::size_t i = 0; i < positions.size(); ++i) {
                    std::vector<double> row(
                        fwd.logits.begin() + positions[i] * V,
                        fwd.logits.begin() + (positions[i] + 1) * V);
                    model::softmax_row(row.data(), V);
                    double* dl = dlogits.data() + positions[i] * V;
                    const auto target =
                        static_cast<std::size_t>(pair.targets[i]);
                    for (std::size_t v = 0; v < V; ++v) {
                        // d/dlogit of KL(t||softmax) is p_s - p_t; of the
                        // reference NLL it is p_s - onehot.
                        const double onehot = v == target ? 1.0 : 0.0;
                        dl[v] = batch_inv * pos_inv *
                                ((row[v] - pair.teacher_rows[i][v]) +
                                 config.gamma * (row[v] - onehot));
                    }
                    student_rows.push_back(std::move(row));
                }

                const auto loss = total_loss(pair.teacher_rows, student_rows,
                                             pair.targets, config.gamma);
                batch_total += loss.total;
                epoch_acc.od += loss.od;
                epoch_acc.ivt += loss.ivt;
                epoch_acc.total += loss.total;

                m.backward(pair.student, fwd, dlogits, &shifts, nullptr,
                           &grads);
            }

            if (!std::isfinite(batch_total)) {
                throw std::runtime_error(
                    "steering-vector training diverged: non-finite loss in "
                    "epoch " + std::to_string(epoch) + ", batch starting at "
                    "anchor index " + std::to_string(start));
            }

            ++step;
            const double bc1 =
                1.0 - std::pow(config.beta1, static_cast<double>(step));
            const double bc2 =
                1.0 - std::pow(config.beta2, static_cast<double>(step));
            auto adam = [&](std::vector<double>& p, std::vector<double>& g,
                            std::vector<double>& mm, std::vector<double>& vv) {
                for (std::size_t i = 0; i < p.size(); ++i) {
                    mm[i] = config.beta1 * mm[i] + (1.0 - config.beta1) * g[i];
                    vv[i] = config.beta2 * vv[i] +
                            (1.0 - config.beta2) * g[i] * g[i];
                    const double mhat = mm[i] / bc1;
                    const double vhat = vv[i] / bc2;
                    p[i] = io::round_f32(
                        p[i] - config.learning_rate * mhat /
                                   (std::sqrt(vhat) + config.adam_eps));
                }
            };
            adam(shifts.csv, grads.csv, m_state.csv, v_state.csv);
            adam(shifts.alpha, grads.alpha, m_state.alpha, v_state.alpha);
        }

        const double inv = 1.0 / static_cast<double>(data.size());
        epoch_acc.od *= inv;
        epoch_acc.ivt *= inv;
        epoch_acc.total *= inv;
        report.epoch_loss.push_back(epoch_acc);
    }
    return report;
}

TrainedShifts distill(const model::Model& m,
                      const std::vector<TrainPair>& data,
                      const ShiftTrainConfig& config) {
    TrainedShifts out;
    out.shifts = init_shifts(m.config(), config.seed, config.init_sigma);
    out.report = train_shifts(m, data, config, out.shifts);
    return out;
}

void save_shifts(const std::string& dir, const model::LayerShifts& shifts,
                 const ShiftMeta& meta) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::size_t L = shifts.n_layers();
    nlohmann::ordered_json manifest;
    manifest["n_layers"] = L;
    manifest["d_model"] = L == 0 ? 0 : shifts.csv.size() / L;
    manifest["gamma"] = meta.gamma;
    manifest["seed"] = meta.seed;
    manifest["epochs"] = meta.epochs;
    manifest["reduction"] = "mean";
    io::write_text((fs::path(dir) / "manifest.json").string(),
                   manifest.dump(2) + "\n");
    io::write_f32((fs::path(dir) / "csv.f32").string(), shifts.csv);
    io::write_f32((fs::path(dir) / "alpha.f32").string(), shifts.alpha);
}

LoadedShifts load_shifts(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest = nlohmann::json::parse(
        io::read_text((fs::path(dir) / "manifest.json").string()));
    const auto L = manifest.at("n_layers").get<std::size_t>();
    const auto d = manifest.at("d_model").get<std::size_t>();
    if (manifest.at("reduction").get<std::string>() != "mean") {
        throw std::runtime_error("unsupported loss reduction '" +
                                 manifest.at("reduction").get<std::string>() +
                                 "'");
    }
    LoadedShifts out;
    out.shifts.csv = io::read_f32((fs::path(dir) / "csv.f32").string(), L * d);
    out.shifts.alpha =
        io::read_f32((fs::path(dir) / "alpha.f32").string(), L);
    out.meta.gamma = manifest.at("gamma").get<double>();
    out.meta.seed = manifest.at("seed").get<std::uint64_t>();
    out.meta.epochs = manifest.at("epochs").get<std::size_t>();
    return out;
}

}  // namespace memesense::csv_trainer
