#include "memesense/tagger.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "json.hpp"
#include "memesense/io.hpp"
#include "memesense/kernels.hpp"

namespace memesense::tagger {

using corpus::kNumParams;

namespace {

double sigmoid(double z) {
    // Split on sign to avoid overflow in exp for large |z|; clamp away from
    // the endpoints so scores are genuinely inside (0,1) even when the exp
    // saturates (keeps "threshold 1.0 selects nothing" true by construction).
    constexpr double kEdge = 1e-12;
    double s;
    if (z >= 0.0) {
        const double e = std::exp(-z);
        s = 1.0 / (1.0 + e);
    } else {
        const double e = std::exp(z);
        s = e / (1.0 + e);
    }
    return std::min(1.0 - kEdge, std::max(kEdge, s));
}

// Numerically safe BCE term: -y*log(s) - (1-y)*log(1-s) with a floor.
double bce_term(double y, double s) {
    constexpr double kFloor = 1e-12;
    return -y * std::log(std::max(s, kFloor)) -
           (1.0 - y) * std::log(std::max(1.0 - s, kFloor));
}

}  // namespace

TaggerModel::TaggerModel(TaggerConfig config) : config_(config) {
    if (config_.d_img == 0) {
        throw std::runtime_error("tagger: d_img must be positive");
    }
    weights_.assign(static_cast<std::size_t>(kNumParams) * config_.d_img, 0.0);
    bias_.assign(kNumParams, 0.0);
}

std::array<double, kNumParams> TaggerModel::scores(
    const std::vector<float>& image_features) const {
    if (image_features.size() != config_.d_img) {
        throw std::runtime_error(
            "tagger: feature dimension mismatch: got " +
            std::to_string(image_features.size()) + ", model expects " +
            std::to_string(config_.d_img));
    }
    // Promote features once; rows are dotted in double.
    std::vector<double> x(image_features.begin(), image_features.end());
    std::array<double, kNumParams> out{};
    for (int c = 0; c < kNumParams; ++c) {
        const double z =
            kernels::dot(weights_.data() + static_cast<std::size_t>(c) * config_.d_img,
                         x.data(), config_.d_img) +
            bias_[c];
        out[c] = sigmoid(z);
    }
    return out;
}

std::vector<corpus::Param> TaggerModel::predict(
    const corpus::MemeRecord& record) const {
    return predict(record, config_.threshold);
}

std::vector<corpus::Param> TaggerModel::predict(const corpus::MemeRecord& record,
                                                double threshold) const {
    const auto s = scores(record.image_features);

    // Candidates above threshold, ranked by score descending; equal scores
    // fall back to the lower category id.
    std::vector<int> candidates;
    for (int c = 0; c < kNumParams; ++c) {
        if (s[c] >= threshold) candidates.push_back(c);
    }
    std::sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return a < b;
    });
    if (candidates.size() > 5) candidates.resize(5);  // cap at five

    std::sort(candidates.begin(), candidates.end());
    std::vector<corpus::Param> out;
    out.reserve(candidates.size());
    for (int c : candidates) out.push_back(static_cast<corpus::Param>(c));
    return out;
}

double stable_learning_rate(
    const std::vector<const corpus::MemeRecord*>& records) {
    double max_sq = 0.0;
    for (const auto* r : records) {
        double sq = 0.0;
        for (float f : r->image_features) {
            sq += static_cast<double>(f) * static_cast<double>(f);
        }
        max_sq = std::max(max_sq, sq);
    }
    if (max_sq == 0.0) return 1.0;
    return 60.0 / max_sq;
}

TrainResult train(TaggerModel& model,
                  const std::vector<const corpus::MemeRecord*>& records) {
    if (records.empty()) {
        throw std::runtime_error("tagger: cannot train on an empty record set");
    }
    const std::size_t d = model.config().d_img;
    const std::size_t n = records.size();

    // Pre-promote features and build multi-hot label matrix.
    std::vector<std::vector<double>> xs(n);
    std::vector<std::array<double, kNumParams>> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = *records[i];
        if (r.image_features.size() != d) {
            throw std::runtime_error(
                "tagger: record '" + r.id + "' has feature dimension " +
                std::to_string(r.image_features.size()) + ", model expects " +
                std::to_string(d));
        }
        xs[i].assign(r.image_features.begin(), r.image_features.end());
        ys[i].fill(0.0);
        for (corpus::Param p : r.commonsense) {
            ys[i][static_cast<int>(p)] = 1.0;
        }
    }

    auto& w = model.mutable_weights();
    auto& b = model.mutable_bias();
    const double lr = model.config().learning_rate;
    const double inv = 1.0 / (static_cast<double>(n) * kNumParams);

    TrainResult result;
    result.epoch_loss.reserve(model.config().epochs);

    std::vector<double> gw(w.size());
    std::vector<double> gb(kNumParams);
    for (std::size_t epoch = 0; epoch < model.config().epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (int c = 0; c < kNumParams; ++c) {
                const double z =
                    kernels::dot(w.data() + static_cast<std::size_t>(c) * d,
                                 xs[i].data(), d) +
                    b[c];
                const double s = sigmoid(z);
                loss += bce_term(ys[i][c], s);
                const double g = (s - ys[i][c]) * inv;
                kernels::axpy(g, xs[i].data(),
                              gw.data() + static_cast<std::size_t>(c) * d, d);
                gb[c] += g;
            }
        }
        result.epoch_loss.push_back(loss * inv);
        kernels::axpy(-lr, gw.data(), w.data(), w.size());
        kernels::axpy(-lr, gb.data(), b.data(), kNumParams);
    }

    // Lock parameters to their f32 serialization.
    io::round_f32_inplace(w);
    io::round_f32_inplace(b);
    return result;
}

double micro_f1(const TaggerModel& model,
                const std::vector<const corpus::MemeRecord*>& records) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto* r : records) {
        const auto predicted = model.predict(*r);
        bool pred_mask[kNumParams] = {};
        for (corpus::Param p : predicted) pred_mask[static_cast<int>(p)] = true;
        bool true_mask[kNumParams] = {};
        for (corpus::Param p : r->commonsense) true_mask[static_cast<int>(p)] = true;
        for (int c = 0; c < kNumParams; ++c) {
            if (pred_mask[c] && true_mask[c]) ++tp;
            else if (pred_mask[c]) ++fp;
            else if (true_mask[c]) ++fn;
        }
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    if (denom == 0.0) return 1.0;  // nothing to find, nothing found
    return 2.0 * static_cast<double>(tp) / denom;
}

void save_tagger(const TaggerModel& model, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    nlohmann::ordered_json manifest;
    manifest["d_img"] = model.config().d_img;
    manifest["d_text"] = 0;  // overlay-text features unconfigured in this build
    manifest["threshold"] = model.config().threshold;
    manifest["learning_rate"] = model.config().learning_rate;
    manifest["epochs"] = model.config().epochs;
    manifest["seed"] = model.config().seed;
    manifest["layout"] = "weights_then_bias";
    io::write_text((fs::path(dir) / "manifest.json").string(),
                   manifest.dump(2) + "\n");

    std::vector<double> flat = model.weights();
    flat.insert(flat.end(), model.bias().begin(), model.bias().end());
    io::write_f32((fs::path(dir) / "weights.f32").string(), flat);
}

TaggerModel load_tagger(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest = nlohmann::json::parse(
        io::read_text((fs::path(dir) / "manifest.json").string()));

    TaggerConfig cfg;
    cfg.d_img = manifest.at("d_img").get<std::size_t>();
    cfg.threshold = manifest.at("threshold").get<double>();
    cfg.learning_rate = manifest.at("learning_rate").get<double>();
    cfg.epochs = manifest.at("epochs").get<std::size_t>();
    cfg.seed = manifest.at("seed").get<std::uint64_t>();

    TaggerModel model(cfg);
    const std::size_t count =
        static_cast<std::size_t>(kNumParams) * cfg.d_img + kNumParams;
    const std::vector<double> flat =
        io::read_f32((fs::path(dir) / "weights.f32").string(), count);
    std::copy(flat.begin(),
              flat.begin() + static_cast<std::ptrdiff_t>(kNumParams * cfg.d_img),
              model.mutable_weights().begin());
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(kNumParams * cfg.d_img),
              flat.end(), model.mutable_bias().begin());
    return model;
}

}  // namespace memesense::tagger
