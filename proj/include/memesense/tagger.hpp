#pragma once

// Commonsense tagger: a 15-way multi-label logistic model over image
// features. Stands in for the heavyweight annotator at the front of the
// pipeline; downstream consumers only see the selected parameter set.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "memesense/corpus.hpp"

namespace memesense::tagger {

struct TaggerConfig {
    std::size_t d_img = 0;
    double threshold = 0.5;       // selection cutoff on sigmoid scores
    double learning_rate = 0.05;
    std::size_t epochs = 300;
    std::uint64_t seed = 0;       // kept for interface symmetry; training is
                                  // full-batch and needs no randomness
};

struct TrainResult {
    std::vector<double> epoch_loss;  // mean binary cross-entropy per epoch
};

class TaggerModel {
public:
    explicit TaggerModel(TaggerConfig config);  // zero-initialized weights

    const TaggerConfig& config() const { return config_; }

    // Raw sigmoid scores, one per parameter, each strictly inside (0, 1).
    // Throws if the feature count does not match d_img.
    std::array<double, corpus::kNumParams> scores(
        const std::vector<float>& image_features) const;

    // Selected parameters: score >= threshold, capped at the 5 highest
    // scores (ties broken toward the lower category id), returned sorted
    // ascending. Depends only on image features, never on id or split.
    std::vector<corpus::Param> predict(const corpus::MemeRecord& record) const;
    std::vector<corpus::Param> predict(const corpus::MemeRecord& record,
                                       double threshold) const;

    // Parameter access (tests, serialization). Row-major 15 x d_img + 15 bias.
    const std::vector<double>& weights() const { return weights_; }
    const std::vector<double>& bias() const { return bias_; }
    std::vector<double>& mutable_weights() { return weights_; }
    std::vector<double>& mutable_bias() { return bias_; }

private:
    TaggerConfig config_;
    std::vector<double> weights_;  // f32-representable after training/loading
    std::vector<double> bias_;
};

// Full-batch gradient descent on mean BCE (averaged over records and the 15
// labels). Deterministic. The loss history is non-increasing whenever the
// learning rate is at or below stable_learning_rate() for the data. Final
// parameters are rounded to f32 so the in-memory model matches its
// serialization exactly.
TrainResult train(TaggerModel& model,
                  const std::vector<const corpus::MemeRecord*>& records);

// Conservative stable step size: 60 / max_record ||features||^2, derived
// from the BCE Hessian bound lambda_max <= max||x||^2 / (4 * 15).
double stable_learning_rate(
    const std::vector<const corpus::MemeRecord*>& records);

// Micro-averaged F1 of predicted vs annotated parameter sets.
double micro_f1(const TaggerModel& model,
                const std::vector<const corpus::MemeRecord*>& records);

// Checkpoint directory: manifest.json + weights.f32 (15 x d_img weight rows
// followed by the 15 biases, row-major little-endian f32).
void save_tagger(const TaggerModel& model, const std::string& dir);
TaggerModel load_tagger(const std::string& dir);

}  // namespace memesense::tagger
