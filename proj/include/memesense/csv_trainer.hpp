#pragma once

// Distillation of in-context behavior into per-layer steering vectors.
//
// The teacher is the frozen base model consuming a k-shot prompt
// (retrieved demonstrations + the anchor's ground-truth commonsense); the
// student is the same frozen model consuming the demonstration-free prompt,
// augmented with trainable per-layer additive vectors. Only the vectors and
// their per-layer gains receive gradients; teacher distributions are
// computed once up front because nothing they depend on ever changes.

#include <cstdint>
#include <string>
#include <vector>

#include "memesense/corpus.hpp"
#include "memesense/model.hpp"
#include "memesense/retrieval.hpp"

namespace memesense::csv_trainer {

inline constexpr double kProbEps = 1e-12;  // floor inside every log

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// KL(teacher || student) for one distribution pair. Both rows must have the
// same length and each must sum to 1 within 1e-6; zero teacher entries
// contribute nothing, and kProbEps floors both arguments inside the logs.
double kl_row(const std::vector<double>& teacher,
              const std::vector<double>& student);

struct LossBreakdown {
    double od = 0.0;     // mean KL(teacher || student) over scored positions
    double ivt = 0.0;    // mean reference-token NLL over scored positions
    double total = 0.0;  // od + gamma * ivt
    double gamma = 0.5;
};

// teacher_rows[i] and student_rows[i] are the distributions at the i-th
// scored position; targets[i] is the reference token predicted there.
LossBreakdown total_loss(const std::vector<std::vector<double>>& teacher_rows,
                         const std::vector<std::vector<double>>& student_rows,
                         const std::vector<int>& targets, double gamma);

// Fraction of scored positions where teacher and student agree on the
// greedy token (ties broken toward the smaller id on both sides).
double match_rate(const std::vector<std::vector<double>>& teacher_rows,
                  const std::vector<std::vector<double>>& student_rows);

// ---------------------------------------------------------------------------
// Distillation pairs
// ---------------------------------------------------------------------------

struct TrainPair {
    std::string anchor_id;
    model::PromptEncoding student;  // demo-free prompt, teacher-forced
    std::vector<std::vector<double>> teacher_rows;  // aligned distributions
    std::vector<int> targets;       // reference tokens at scored positions
};

// One pair per in-context set: the teacher consumes the set's demonstrations
// plus the anchor's ground-truth commonsense and reference intervention; the
// student consumes the same anchor without demonstrations. Anchors may come
// from either split (training uses the train split; held-out evaluation
// passes test-split sets).
std::vector<TrainPair> build_distillation_set(
    const model::Model& m, const corpus::Corpus& corpus,
    const std::vector<retrieval::InContextSet>& sets);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct ShiftTrainConfig {
    double gamma = 0.5;
    double learning_rate = 1e-2;
    std::size_t epochs = 10;
    std::size_t batch_size = 2;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double init_sigma = 0.01;
    std::uint64_t seed = 0;
};

struct ShiftTrainReport {
    std::vector<LossBreakdown> epoch_loss;  // mean over anchors, per epoch
};

// Per-layer vectors drawn from N(0, sigma^2) rounded to f32 precision;
// every gain starts at exactly 1.
model::LayerShifts init_shifts(const model::ModelConfig& config,
                               std::uint64_t seed, double sigma);

// Adam on the vectors and gains only; the base model is untouched. Anchors
// are visited in the order given, in fixed batches. Throws if any batch
// produces a non-finite loss, naming the epoch and batch.
ShiftTrainReport train_shifts(const model::Model& m,
                              const std::vector<TrainPair>& data,
                              const ShiftTrainConfig& config,
                              model::LayerShifts& shifts);

// Convenience: init + train in one call.
struct TrainedShifts {
    model::LayerShifts shifts;
    ShiftTrainReport report;
};
TrainedShifts distill(const model::Model& m,
                      const std::vector<TrainPair>& data,
                      const ShiftTrainConfig& config);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

struct ShiftMeta {
    double gamma = 0.5;
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
};

// Directory layout: manifest.json (n_layers, d_model, gamma, seed, epochs,
// reduction) + csv.f32 + alpha.f32; values round-trip bit-exactly.
void save_shifts(const std::string& dir, const model::LayerShifts& shifts,
                 const ShiftMeta& meta);

struct LoadedShifts {
    model::LayerShifts shifts;
    ShiftMeta meta;
};
LoadedShifts load_shifts(const std::string& dir);

}  // namespace memesense::csv_trainer
