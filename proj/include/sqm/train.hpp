#pragma once

// Loss, optimizer, schedule, training loop and evaluation metrics.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sqm/autodiff.hpp"
#include "sqm/data.hpp"
#include "sqm/errors.hpp"
#include "sqm/model.hpp"

namespace sqm::train {

using ad::Tensor;

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    if (pred.size() == 0 || pred.size() != target.size()) throw UsageError("mse_loss: need equal non-empty batches");
    const double n = static_cast<double>(pred.size());
    double acc = 0.0;
    std::vector<double> resid(pred.size());
    for (std::size_t i = 0; i < resid.size(); ++i) {
        resid[i] = pred[i] - target[i];
        acc += resid[i] * resid[i];
    }
    return ad::detail::make_result("mse_loss", {1}, {acc / n}, {pred, target}, [n, resid = std::move(resid)](ad::Node& self) {
        const double g = self.grad[0] * 2.0 / n;
        if (double* gp = ad::detail::grad_of(self, 0))
            for (std::size_t i = 0; i < resid.size(); ++i) gp[i] += g * resid[i];
        if (double* gt = ad::detail::grad_of(self, 1))
            for (std::size_t i = 0; i < resid.size(); ++i) gt[i] -= g * resid[i];
    });
}

// ---------------------------------------------------------------------------
// Metrics

inline void check_pairs(std::span<const double> obs, std::span<const double> pred, std::size_t min_len) {
    if (obs.size() != pred.size() || obs.size() < min_len)
        throw UsageError("metrics need two equal-length series of at least " + std::to_string(min_len) + " values");
}

inline double mae(std::span<const double> obs, std::span<const double> pred) {
    check_pairs(obs, pred, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < obs.size(); ++i) s += std::abs(obs[i] - pred[i]);
    return s / static_cast<double>(obs.size());
}

inline double rmse(std::span<const double> obs, std::span<const double> pred) {
    check_pairs(obs, pred, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < obs.size(); ++i) s += (obs[i] - pred[i]) * (obs[i] - pred[i]);
    return std::sqrt(s / static_cast<double>(obs.size()));
}

// 1 - SSE/SST; nullopt when the observations are constant.
inline std::optional<double> r2(std::span<const double> obs, std::span<const double> pred) {
    check_pairs(obs, pred, 2);
    if (std::all_of(obs.begin(), obs.end(), [&](double y) { return y == obs[0]; })) return std::nullopt;
    double mean = 0.0;
    for (double y : obs) mean += y;
    mean /= static_cast<double>(obs.size());
    double sse = 0.0, sst = 0.0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
        sse += (obs[i] - pred[i]) * (obs[i] - pred[i]);
        sst += (mean - obs[i]) * (mean - obs[i]);
    }
    return 1.0 - sse / sst;
}

enum class DroughtCategory {
    ExtremelyDry,
    SeverelyDry,
    ModeratelyDry,
    NearNormal,
    ModeratelyWet,
    SeverelyWet,
    ExtremelyWet,
};

inline DroughtCategory categorize(double d) {
    if (!(d >= -3.0 && d <= 3.0)) throw RangeError("drought index outside [-3, 3]");
    if (d <= -2.0) return DroughtCategory::ExtremelyDry;
    if (d <= -1.5) return DroughtCategory::SeverelyDry;
    if (d <= -1.0) return DroughtCategory::ModeratelyDry;
    if (d <= 1.0) return DroughtCategory::NearNormal;
    if (d <= 1.5) return DroughtCategory::ModeratelyWet;
    if (d <= 2.0) return DroughtCategory::SeverelyWet;
    return DroughtCategory::ExtremelyWet;
}

inline std::string_view category_name(DroughtCategory c) {
    switch (c) {
        case DroughtCategory::ExtremelyDry: return "Extremely Dry";
        case DroughtCategory::SeverelyDry: return "Severely Dry";
        case DroughtCategory::ModeratelyDry: return "Moderately Dry";
        case DroughtCategory::NearNormal: return "Near Normal";
        case DroughtCategory::ModeratelyWet: return "Moderately Wet";
        case DroughtCategory::SeverelyWet: return "Severely Wet";
        case DroughtCategory::ExtremelyWet: return "Extremely Wet";
    }
    return "?";
}

struct SeriesPoint {
    data::YearMonth month;
    double observed = 0.0;
    double predicted = 0.0;
};

struct MetricsReport {
    double mae = 0.0;
    double rmse = 0.0;
    std::optional<double> r2;
    std::vector<SeriesPoint> series;
};

inline MetricsReport report_from_series(std::vector<SeriesPoint> series) {
    MetricsReport rep;
    rep.series = std::move(series);
    if (rep.series.empty()) return rep;
    std::vector<double> obs, pred;
    for (const auto& p : rep.series) obs.push_back(p.observed), pred.push_back(p.predicted);
    rep.mae = mae(obs, pred);
    rep.rmse = rmse(obs, pred);
    if (obs.size() >= 2) rep.r2 = r2(obs, pred);
    return rep;
}

namespace detail {
inline void stack_batch(const std::vector<data::WindowSample>& samples, std::span<const std::size_t> idx,
                        std::vector<double>& z, std::vector<double>& tz, std::vector<double>& y) {
    z.clear(), tz.clear(), y.clear();
    for (std::size_t i : idx) {
        const auto& s = samples[i];
        z.insert(z.end(), s.z.begin(), s.z.end());
        tz.insert(tz.end(), s.tz.begin(), s.tz.end());
        y.push_back(s.target);
    }
}
} // namespace detail

inline constexpr std::size_t kEvalChunk = 64;

inline std::vector<double> predict_samples(const std::vector<data::WindowSample>& samples,
                                           model::SquareMambaParams& params, const model::Ablation& flags) {
    std::vector<double> out;
    out.reserve(samples.size());
    std::vector<std::size_t> idx;
    std::vector<double> z, tz, y;
    for (std::size_t start = 0; start < samples.size(); start += kEvalChunk) {
        idx.clear();
        for (std::size_t i = start; i < std::min(samples.size(), start + kEvalChunk); ++i) idx.push_back(i);
        detail::stack_batch(samples, idx, z, tz, y);
        auto d = model::predict_eval(z, tz, idx.size(), params, flags);
        out.insert(out.end(), d.begin(), d.end());
    }
    return out;
}

inline MetricsReport evaluate(const std::vector<data::WindowSample>& samples, model::SquareMambaParams& params,
                              const model::Ablation& flags) {
    const auto pred = predict_samples(samples, params, flags);
    std::vector<SeriesPoint> series;
    for (std::size_t i = 0; i < samples.size(); ++i)
        series.push_back({samples[i].target_month, samples[i].target, pred[i]});
    return report_from_series(std::move(series));
}

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// month,observed,predicted,category with round-trip precision.
inline void emit_series(const MetricsReport& report, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write series file " + path);
    os << "month,observed,predicted,category\n";
    for (const auto& p : report.series)
        os << p.month.to_string() << ',' << format_real(p.observed) << ',' << format_real(p.predicted) << ','
           << category_name(categorize(p.predicted)) << '\n';
    if (!os) throw IoError("failed writing series file " + path);
}

inline std::vector<SeriesPoint> read_series(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open series file " + path);
    std::string line;
    if (!std::getline(in, line) || line != "month,observed,predicted,category")
        throw SchemaError("series file header mismatch in " + path);
    std::vector<SeriesPoint> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        const auto f = data::detail::split_fields(line);
        if (f.size() != 4) throw ParseError(line_no, "expected 4 fields");
        const auto month = data::parse_year_month(f[0]);
        const auto obs = data::detail::parse_real(f[1], line_no, "observed");
        const auto pred = data::detail::parse_real(f[2], line_no, "predicted");
        if (!month || !obs || !pred) throw ParseError(line_no, "malformed series row");
        out.push_back({*month, *obs, *pred});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay: theta *= (1 - lr*lambda), then the bias-corrected
// Adam update.
class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(std::span<const model::NamedTensor> params, double lr) {
        if (first_.empty()) {
            for (const auto& p : params) {
                first_.emplace_back(p.tensor->size(), 0.0);
                second_.emplace_back(p.tensor->size(), 0.0);
            }
        }
        if (first_.size() != params.size()) throw UsageError("AdamW: parameter list changed between steps");
        for (std::size_t k = 0; k < params.size(); ++k) {
            if (first_[k].size() != params[k].tensor->size()) throw DimensionError("AdamW: moment shape mismatch");
            for (double g : params[k].tensor->grad())
                if (!std::isfinite(g)) throw NonFiniteError("AdamW: non-finite gradient in " + params[k].name);
        }
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(steps_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto theta = params[k].tensor->mutable_values();
            auto grad = params[k].tensor->grad();
            auto& m = first_[k];
            auto& v = second_[k];
            for (std::size_t i = 0; i < theta.size(); ++i) {
                const double g = grad.empty() ? 0.0 : grad[i];
                theta[i] *= 1.0 - lr * cfg_.weight_decay;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
            }
        }
    }

    std::uint64_t steps() const { return steps_; }

  private:
    AdamWConfig cfg_;
    std::uint64_t steps_ = 0;
    std::vector<std::vector<double>> first_, second_;
};

inline double cosine_lr(int epoch, int max_epochs, double lr0 = 1e-3) {
    if (max_epochs < 1 || epoch < 0 || epoch >= max_epochs)
        throw UsageError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(max_epochs) + ")");
    return lr0 * (1.0 + std::cos(std::numbers::pi * epoch / max_epochs)) / 2.0;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    int max_epochs = 250;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    model::Ablation flags;
    double lr0 = 1e-3;
    AdamWConfig adamw;
    int patience = 30;
    double min_delta = 1e-5;

    void validate() const {
        if (max_epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 2) throw ConfigError("batch size must be >= 2 (batch normalization)");
        if (patience < 1) throw ConfigError("patience must be >= 1");
    }
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_mae = 0.0;
    double val_rmse = 0.0;
    std::optional<double> val_r2;
    double wall_seconds = 0.0;
};

// Stable across runs: everything except wall time.
inline nlohmann::json to_json(const EpochLog& e) {
    return {{"epoch", e.epoch},         {"lr", e.lr},           {"train_loss", e.train_loss},
            {"val_loss", e.val_loss},   {"val_mae", e.val_mae}, {"val_rmse", e.val_rmse},
            {"val_r2", e.val_r2 ? nlohmann::json(*e.val_r2) : nlohmann::json(nullptr)}};
}

struct TrainResult {
    model::SquareMambaParams best;
    model::CheckpointMeta meta;
    std::vector<EpochLog> log;
    bool early_stopped = false;
    bool diverged = false;
    std::string message;
};

// Batch boundaries of a shuffled epoch; a trailing single sample joins the
// previous batch so batch statistics always see two rows.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch) out.emplace_back(s, std::min(n, s + batch));
    if (out.size() > 1 && out.back().second - out.back().first == 1) {
        out.pop_back();
        out.back().second = n;
    }
    return out;
}

inline TrainResult train(const data::DatasetSplit& split, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
    using namespace model::layout;
    cfg.validate();
    if (split.train.size() < 2 || split.validation.size() < 2)
        throw ValidationError("training needs at least two train and two validation samples");

    auto params = model::init_params(cfg.seed);
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5348554646ULL);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x44524F50ULL);
    AdamW opt(cfg.adamw);
    auto trainable = params.trainable(cfg.flags);

    TrainResult result{params.clone(), {cfg.seed, 0, cfg.flags, std::nullopt}, {}, false, false, {}};
    std::optional<double> best_r2;
    double best_loss = std::numeric_limits<double>::infinity();
    double best_select_loss = std::numeric_limits<double>::infinity();
    int since_improved = 0;

    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> z, tz, y;
    std::vector<double> val_obs;
    for (const auto& s : split.validation) val_obs.push_back(s.target);

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);

        double loss_sum = 0.0;
        EpochLog rec;
        std::vector<double> val_pred;
        try {
            for (auto [b0, b1] : batch_ranges(order.size(), cfg.batch_size)) {
                detail::stack_batch(split.train, std::span(order).subspan(b0, b1 - b0), z, tz, y);
                const std::size_t B = b1 - b0;
                auto pred = model::predict(Tensor::from({B, kFlat}, z), Tensor::from({B, kFlat, kWindow, kWindow}, tz),
                                           params, ad::Mode::Train, dropout_rng, cfg.flags);
                auto loss = mse_loss(pred, Tensor::from({B}, y));
                for (auto& p : trainable) p.tensor->zero_grad();
                ad::backward(loss);
                opt.step(trainable, lr);
                loss_sum += loss.item() * double(B);
            }
            val_pred = predict_samples(split.validation, params, cfg.flags);
        } catch (const NonFiniteError& e) {
            result.diverged = true;
            result.message = std::string("diverged at epoch ") + std::to_string(epoch) + ": " + e.what();
            break;
        }

        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / double(order.size());
        rec.val_mae = mae(val_obs, val_pred);
        rec.val_rmse = rmse(val_obs, val_pred);
        rec.val_loss = rec.val_rmse * rec.val_rmse;
        rec.val_r2 = r2(val_obs, val_pred);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.push_back(rec);
        if (on_epoch) on_epoch(rec);

        // Constant validation targets leave R^2 undefined; lowest loss decides then.
        const bool better = rec.val_r2 ? (!best_r2 || *rec.val_r2 > *best_r2) : rec.val_loss < best_select_loss;
        if (better) {
            best_r2 = rec.val_r2;
            best_select_loss = rec.val_loss;
            result.best = params.clone();
            result.meta.epoch = epoch;
            result.meta.val_r2 = rec.val_r2;
        }
        if (rec.val_loss < best_loss - cfg.min_delta) {
            best_loss = rec.val_loss;
            since_improved = 0;
        } else if (++since_improved >= cfg.patience) {
            result.early_stopped = true;
            result.message = "validation loss plateaued at epoch " + std::to_string(epoch);
            break;
        }
    }
    return result;
}

} // namespace sqm::train
