#pragma once

// Synthetic 3x3-cell monthly climate archive with a known teacher target:
// SPEI-1 at month t is 3 tanh of a sparse weighted sum of standardized
// precipitation and mean-temperature lags from the centre cell's own
// 15-month window, plus Gaussian noise.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "sqm/data.hpp"

namespace sqm::synthetic {

struct TeacherTerm {
    std::size_t month;     // 0..14 within the window, 14 = most recent
    std::size_t variable;  // index into data::kVariableNames
    double weight;
};

// pre = 0, tmp = 3.
inline constexpr std::array<TeacherTerm, 5> kTeacher = {{
    {14, 0, 0.45},
    {13, 0, 0.25},
    {12, 0, 0.15},
    {14, 3, -0.30},
    {11, 3, -0.15},
}};

inline double teacher(std::span<const double> z) {
    double s = 0.0;
    for (const auto& t : kTeacher) s += t.weight * z[t.month * model::layout::kVariables + t.variable];
    return 3.0 * std::tanh(s);
}

struct SyntheticConfig {
    std::uint64_t seed = 2024;
    int first_year = 1901;
    int years = 123;
    double center_lat = -29.25;   // cell-centred 0.5 degree grid
    double center_lon = 153.25;
    double noise_sd = 0.05;
};

// Records for the 3x3 block around the centre, every month present. Each
// cell's spei1 follows the teacher on that cell's own window; the first 15
// months of each cell carry NA.
inline std::vector<data::ClimateRecord> generate(const SyntheticConfig& cfg) {
    using namespace model::layout;
    constexpr std::size_t V = data::kNumVariables;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    const int months = cfg.years * 12;
    const int first = data::YearMonth{cfg.first_year, 1}.index();
    const auto center = data::GridCell::from_degrees(cfg.center_lat, cfg.center_lon);

    // Seasonal baseline, amplitude and anomaly scale per variable.
    constexpr std::array<double, V> base = {60.0, 26.0, 13.0, 19.5, 16.0, 45.0, 110.0};
    constexpr std::array<double, V> season = {25.0, 5.0, 5.0, 5.0, 4.0, 10.0, 40.0};
    constexpr std::array<double, V> spread = {30.0, 1.5, 1.2, 1.2, 1.5, 8.0, 12.0};

    std::array<double, V> regional{};
    std::array<std::array<double, V>, kCells> local{};
    std::vector<std::array<std::array<double, V>, kCells>> values(static_cast<std::size_t>(months));
    for (int t = 0; t < months; ++t) {
        const double phase = 2.0 * std::numbers::pi * (t % 12) / 12.0;
        for (std::size_t v = 0; v < V; ++v) regional[v] = 0.6 * regional[v] + 0.8 * normal(rng);
        for (std::size_t k = 0; k < kCells; ++k)
            for (std::size_t v = 0; v < V; ++v) {
                local[k][v] = 0.5 * local[k][v] + 0.35 * normal(rng);
                double x = base[v] + season[v] * std::cos(phase) + spread[v] * (regional[v] + local[k][v]);
                if (v == 0 || v == 5 || v == 6) x = std::max(0.0, x);
                values[static_cast<std::size_t>(t)][k][v] = x;
            }
    }

    std::vector<data::ClimateRecord> out;
    out.reserve(static_cast<std::size_t>(months) * kCells);
    for (std::size_t k = 0; k < kCells; ++k) {
        const auto cell = data::frame_cell(center, k);
        for (int t = 0; t < months; ++t) {
            data::ClimateRecord r;
            r.date = data::YearMonth::from_index(first + t);
            r.cell = cell;
            r.vars = values[static_cast<std::size_t>(t)][k];
            if (t >= int(kMonths)) {
                std::vector<double> raw(data::kWindowValues);
                for (std::size_t m = 0; m < kMonths; ++m)
                    for (std::size_t v = 0; v < V; ++v)
                        for (std::size_t c = 0; c < kCells; ++c)
                            raw[(m * V + v) * kCells + c] = values[static_cast<std::size_t>(t) - kMonths + m][k][v];
                const auto w = data::standardize_window(raw);
                r.spei1 = std::clamp(teacher(w.z) + cfg.noise_sd * normal(rng), -3.0, 3.0);
            }
            out.push_back(r);
        }
    }
    return out;
}

} // namespace sqm::synthetic
