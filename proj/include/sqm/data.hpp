#pragma once

// Monthly gridded climate records -> standardized 15-month windows with a
// 3x3 spatial neighbourhood and the next month's SPEI-1 as target.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sqm/errors.hpp"
#include "sqm/model.hpp"

namespace sqm::data {

inline constexpr std::size_t kNumVariables = model::layout::kVariables;
inline constexpr std::array<std::string_view, kNumVariables> kVariableNames = {"pre", "tmx", "tmn", "tmp",
                                                                               "vap", "cld", "pet"};
inline constexpr std::string_view kHeader = "date,lat,lon,pre,tmx,tmn,tmp,vap,cld,pet,spei1";
inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct YearMonth {
    int year = 0;
    int month = 1;  // 1..12

    int index() const { return year * 12 + (month - 1); }
    static YearMonth from_index(int i) { return {i / 12, i % 12 + 1}; }
    std::string to_string() const {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%04d-%02d", year, month);
        return buf;
    }
    auto operator<=>(const YearMonth& o) const { return index() <=> o.index(); }
    bool operator==(const YearMonth& o) const { return index() == o.index(); }
};

inline std::optional<YearMonth> parse_year_month(std::string_view s) {
    if (s.size() != 7 || s[4] != '-') return std::nullopt;
    int y = 0, m = 0;
    if (std::from_chars(s.data(), s.data() + 4, y).ptr != s.data() + 4) return std::nullopt;
    if (std::from_chars(s.data() + 5, s.data() + 7, m).ptr != s.data() + 7) return std::nullopt;
    if (m < 1 || m > 12) return std::nullopt;
    return YearMonth{y, m};
}

// Grid cell in quarter-degree units, so 0.5 degree neighbours differ by 2.
struct GridCell {
    int lat_q = 0;
    int lon_q = 0;

    double lat() const { return lat_q / 4.0; }
    double lon() const { return lon_q / 4.0; }
    static GridCell from_degrees(double lat, double lon) {
        return {static_cast<int>(std::lround(lat * 4)), static_cast<int>(std::lround(lon * 4))};
    }
    GridCell offset(int dlat_cells, int dlon_cells) const { return {lat_q + 2 * dlat_cells, lon_q + 2 * dlon_cells}; }
    auto operator<=>(const GridCell&) const = default;
    std::string to_string() const {
        std::ostringstream os;
        os << '(' << lat() << ", " << lon() << ')';
        return os.str();
    }
};

// Accepts both corner-aligned (x.0 / x.5) and cell-centred (x.25 / x.75)
// half-degree grids.
inline bool on_half_degree_grid(double deg) {
    const double twice = 2.0 * deg;
    const double frac = twice - std::floor(twice);
    constexpr double kTol = 2e-6;
    return frac < kTol || frac > 1.0 - kTol || std::abs(frac - 0.5) < kTol;
}

struct ClimateRecord {
    YearMonth date;
    GridCell cell;
    std::array<double, kNumVariables> vars{};  // NaN when missing
    double spei1 = kMissing;
    std::size_t line = 0;  // source line, 0 when synthesized
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

// Empty or NA -> nullopt(missing); malformed -> throws.
inline std::optional<double> parse_real(std::string_view s, std::size_t line, std::string_view column) {
    s = trim(s);
    if (s.empty() || s == "NA") return std::nullopt;
    double v = 0.0;
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc{} || ptr != end || !std::isfinite(v))
        throw ParseError(line, "malformed value '" + std::string(s) + "' in column " + std::string(column));
    return v;
}

} // namespace detail

// Parses the ingestion table, validates each row, rejects duplicate
// (cell, month) keys and returns records sorted by (cell, month).
inline std::vector<ClimateRecord> parse_records(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("empty input: expected header '" + std::string(kHeader) + "'");
    const auto header = detail::trim(line);
    if (header != kHeader) {
        std::vector<std::string_view> got;
        for (auto f : detail::split_fields(header)) got.push_back(detail::trim(f));
        std::string missing;
        for (auto want : detail::split_fields(kHeader))
            if (std::find(got.begin(), got.end(), want) == got.end()) missing += (missing.empty() ? "" : ", ") + std::string(want);
        throw SchemaError(missing.empty() ? "header must be exactly '" + std::string(kHeader) + "'"
                                          : "missing required column(s): " + missing);
    }

    std::vector<ClimateRecord> records;
    std::map<std::pair<GridCell, int>, std::size_t> seen;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        const auto text = detail::trim(line);
        if (text.empty()) continue;
        const auto fields = detail::split_fields(text);
        if (fields.size() != 11)
            throw ParseError(line_no, "expected 11 fields, found " + std::to_string(fields.size()));
        ClimateRecord r;
        r.line = line_no;
        const auto date = parse_year_month(detail::trim(fields[0]));
        if (!date) throw ParseError(line_no, "date must be YYYY-MM, got '" + std::string(fields[0]) + "'");
        r.date = *date;
        const auto lat = detail::parse_real(fields[1], line_no, "lat");
        const auto lon = detail::parse_real(fields[2], line_no, "lon");
        if (!lat || !lon) throw ParseError(line_no, "lat/lon may not be missing");
        if (*lat < -90 || *lat > 90 || *lon < -180 || *lon > 360)
            throw ParseError(line_no, "coordinates out of range");
        if (!on_half_degree_grid(*lat) || !on_half_degree_grid(*lon))
            throw ParseError(line_no, "coordinates are not on the 0.5 degree grid");
        r.cell = GridCell::from_degrees(*lat, *lon);
        for (std::size_t v = 0; v < kNumVariables; ++v)
            r.vars[v] = detail::parse_real(fields[3 + v], line_no, kVariableNames[v]).value_or(kMissing);
        r.spei1 = detail::parse_real(fields[10], line_no, "spei1").value_or(kMissing);
        auto [it, inserted] = seen.emplace(std::pair{r.cell, r.date.index()}, line_no);
        if (!inserted)
            throw ParseError(line_no, "duplicate record for " + r.cell.to_string() + " " + r.date.to_string() +
                                          " (first seen on line " + std::to_string(it->second) + ")");
        records.push_back(r);
    }
    std::sort(records.begin(), records.end(), [](const ClimateRecord& a, const ClimateRecord& b) {
        return std::pair{a.cell, a.date.index()} < std::pair{b.cell, b.date.index()};
    });
    return records;
}

inline std::vector<ClimateRecord> load_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return parse_records(in);
}

inline void write_records_csv(const std::vector<ClimateRecord>& records, std::ostream& os) {
    os << kHeader << '\n';
    char buf[64];
    auto put = [&](double v) {
        if (std::isnan(v)) return;
        std::snprintf(buf, sizeof buf, "%.10g", v);
        os << buf;
    };
    for (const auto& r : records) {
        os << r.date.to_string() << ',';
        put(r.cell.lat());
        os << ',';
        put(r.cell.lon());
        for (double v : r.vars) {
            os << ',';
            put(v);
        }
        os << ',';
        if (std::isnan(r.spei1)) os << "NA";
        else put(r.spei1);
        os << '\n';
    }
}

// Indexed view over validated records.
class ClimateDataset {
  public:
    explicit ClimateDataset(std::vector<ClimateRecord> records) : records_(std::move(records)) {
        for (std::size_t i = 0; i < records_.size(); ++i) index_[records_[i].cell][records_[i].date.index()] = i;
    }

    const std::vector<ClimateRecord>& records() const { return records_; }

    std::vector<GridCell> locations() const {
        std::vector<GridCell> out;
        for (const auto& [cell, _] : index_) out.push_back(cell);
        return out;
    }

    bool has_cell(GridCell c) const { return index_.contains(c); }

    const ClimateRecord* find(GridCell c, int month_index) const {
        auto it = index_.find(c);
        if (it == index_.end()) return nullptr;
        auto jt = it->second.find(month_index);
        return jt == it->second.end() ? nullptr : &records_[jt->second];
    }

    // Months present for a cell, ascending.
    std::vector<int> months(GridCell c) const {
        std::vector<int> out;
        if (auto it = index_.find(c); it != index_.end())
            for (const auto& [m, _] : it->second) out.push_back(m);
        return out;
    }

    int neighbour_count(GridCell c) const {
        int n = 0;
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc)
                if ((dr || dc) && has_cell(c.offset(dr, dc))) ++n;
        return n;
    }

    // Cell with the most neighbours present; ties go to the first in order.
    std::optional<GridCell> default_center() const {
        std::optional<GridCell> best;
        int best_n = -1;
        for (const auto& [cell, _] : index_) {
            const int n = neighbour_count(cell);
            if (n > best_n) best_n = n, best = cell;
        }
        return best;
    }

    nlohmann::json manifest() const {
        nlohmann::json j;
        j["row_count"] = records_.size();
        j["locations"] = nlohmann::json::array();
        for (const auto& [cell, months] : index_)
            j["locations"].push_back({{"lat", cell.lat()},
                                      {"lon", cell.lon()},
                                      {"first", YearMonth::from_index(months.begin()->first).to_string()},
                                      {"last", YearMonth::from_index(months.rbegin()->first).to_string()},
                                      {"rows", months.size()}});
        if (!records_.empty()) {
            int lo = std::numeric_limits<int>::max(), hi = std::numeric_limits<int>::min();
            for (const auto& r : records_) lo = std::min(lo, r.date.index()), hi = std::max(hi, r.date.index());
            j["month_range"] = {YearMonth::from_index(lo).to_string(), YearMonth::from_index(hi).to_string()};
        }
        return j;
    }

  private:
    std::vector<ClimateRecord> records_;
    std::map<GridCell, std::map<int, std::size_t>> index_;
};

// ---------------------------------------------------------------------------
// Windows

inline constexpr std::size_t kWindowValues = model::layout::kFlat * model::layout::kCells;  // 945
inline constexpr std::size_t kCenterCell = 4;

// Frame cell k = row*3 + col; row 0 is the northern row, col 0 the western.
inline GridCell frame_cell(GridCell center, std::size_t k) {
    const int row = static_cast<int>(k / 3), col = static_cast<int>(k % 3);
    return center.offset(1 - row, col - 1);
}

// Builds the raw [105][3][3] augmented window for months
// [first_month, first_month + 15). Missing neighbour values take the value of
// the nearest (Euclidean, on the 3x3 frame) neighbour that has it, ties in
// row-major order; with no such neighbour the centre value is used. Throws
// ValidationError if the centre history has gaps.
inline std::vector<double> augment_spatial(const ClimateDataset& ds, GridCell center, int first_month) {
    using namespace model::layout;
    std::vector<std::string> gaps;
    for (std::size_t m = 0; m < kMonths; ++m) {
        const auto* r = ds.find(center, first_month + static_cast<int>(m));
        bool complete = r != nullptr;
        if (r)
            for (double v : r->vars) complete = complete && std::isfinite(v);
        if (!complete) gaps.push_back(YearMonth::from_index(first_month + static_cast<int>(m)).to_string());
    }
    if (!gaps.empty()) {
        std::string msg = "centre " + center.to_string() + " has incomplete history at";
        for (const auto& g : gaps) msg += " " + g;
        throw ValidationError(msg);
    }

    // Neighbour search order per frame cell: other non-centre cells sorted by
    // squared distance, then index.
    std::array<std::vector<std::size_t>, kCells> order;
    for (std::size_t k = 0; k < kCells; ++k) {
        for (std::size_t j = 0; j < kCells; ++j)
            if (j != k && j != kCenterCell) order[k].push_back(j);
        auto dist2 = [k](std::size_t j) {
            const int dr = int(j / 3) - int(k / 3), dc = int(j % 3) - int(k % 3);
            return dr * dr + dc * dc;
        };
        std::stable_sort(order[k].begin(), order[k].end(),
                         [&](std::size_t a, std::size_t b) { return dist2(a) < dist2(b); });
    }

    std::vector<double> tz(kWindowValues);
    for (std::size_t m = 0; m < kMonths; ++m) {
        const int month = first_month + static_cast<int>(m);
        std::array<const ClimateRecord*, kCells> rec{};
        for (std::size_t k = 0; k < kCells; ++k) rec[k] = ds.find(frame_cell(center, k), month);
        for (std::size_t v = 0; v < kVariables; ++v) {
            auto present = [&](std::size_t k) { return rec[k] && std::isfinite(rec[k]->vars[v]); };
            double* slot = tz.data() + (m * kVariables + v) * kCells;
            for (std::size_t k = 0; k < kCells; ++k) {
                if (present(k)) {
                    slot[k] = rec[k]->vars[v];
                    continue;
                }
                slot[k] = rec[kCenterCell]->vars[v];
                for (std::size_t j : order[k])
                    if (present(j)) {
                        slot[k] = rec[j]->vars[v];
                        break;
                    }
            }
        }
    }
    return tz;
}

// Constant-variable guard for the z-score denominator.
inline constexpr double kMinStd = 1e-8;

struct StandardizedWindow {
    std::vector<double> z;   // [105], month-major
    std::vector<double> tz;  // [105][3][3]
};

// Per variable, z-scores every cell with the mean and (population) standard
// deviation of the 15 centre-cell months.
inline StandardizedWindow standardize_window(const std::vector<double>& raw_tz) {
    using namespace model::layout;
    if (raw_tz.size() != kWindowValues) throw DimensionError("standardize_window expects 945 values");
    StandardizedWindow out{std::vector<double>(kFlat), raw_tz};
    for (std::size_t v = 0; v < kVariables; ++v) {
        double mean = 0.0;
        for (std::size_t m = 0; m < kMonths; ++m) mean += raw_tz[(m * kVariables + v) * kCells + kCenterCell];
        mean /= kMonths;
        double var = 0.0;
        for (std::size_t m = 0; m < kMonths; ++m) {
            const double d = raw_tz[(m * kVariables + v) * kCells + kCenterCell] - mean;
            var += d * d;
        }
        const double sd = std::sqrt(var / kMonths);
        const double denom = sd < kMinStd ? 1.0 : sd;
        for (std::size_t m = 0; m < kMonths; ++m)
            for (std::size_t k = 0; k < kCells; ++k) {
                double& x = out.tz[(m * kVariables + v) * kCells + k];
                x = (x - mean) / denom;
            }
    }
    for (std::size_t i = 0; i < kFlat; ++i) out.z[i] = out.tz[i * kCells + kCenterCell];
    return out;
}

struct WindowSample {
    std::vector<double> z;   // [105]
    std::vector<double> tz;  // [105][3][3]
    double target = 0.0;
    GridCell location;
    YearMonth target_month;
};

struct SplitRanges {
    int train_first = 1901, train_last = 1980;
    int val_first = 1981, val_last = 2005;
    int test_first = 2006, test_last = 2023;
};

struct DatasetSplit {
    std::vector<WindowSample> train, validation, test;
    std::vector<std::string> skipped;  // one reason per rejected target month

    std::size_t total() const { return train.size() + validation.size() + test.size(); }
};

inline WindowSample make_sample(const ClimateDataset& ds, GridCell center, int target_month) {
    auto std_window = standardize_window(augment_spatial(ds, center, target_month - int(model::layout::kMonths)));
    WindowSample s;
    s.z = std::move(std_window.z);
    s.tz = std::move(std_window.tz);
    s.location = center;
    s.target_month = YearMonth::from_index(target_month);
    if (const auto* r = ds.find(center, target_month)) s.target = r->spei1;
    return s;
}

// One sample per target month with 15 months of prior centre history; split
// membership follows the target month's year.
inline DatasetSplit build_splits(const ClimateDataset& ds, GridCell center, const SplitRanges& ranges = {}) {
    DatasetSplit split;
    const auto months = ds.months(center);
    if (months.empty()) {
        split.skipped.push_back("no records for centre " + center.to_string());
        return split;
    }
    const int first_target = months.front() + int(model::layout::kMonths);
    for (int t = first_target; t <= months.back(); ++t) {
        const auto ym = YearMonth::from_index(t);
        std::vector<WindowSample>* bucket = nullptr;
        if (ym.year >= ranges.train_first && ym.year <= ranges.train_last) bucket = &split.train;
        else if (ym.year >= ranges.val_first && ym.year <= ranges.val_last) bucket = &split.validation;
        else if (ym.year >= ranges.test_first && ym.year <= ranges.test_last) bucket = &split.test;
        if (!bucket) {
            split.skipped.push_back(ym.to_string() + ": outside split year ranges");
            continue;
        }
        const auto* target = ds.find(center, t);
        if (!target || !std::isfinite(target->spei1)) {
            split.skipped.push_back(ym.to_string() + ": missing spei1 target");
            continue;
        }
        try {
            bucket->push_back(make_sample(ds, center, t));
        } catch (const ValidationError& e) {
            split.skipped.push_back(ym.to_string() + ": " + e.what());
        }
    }
    return split;
}

// ---------------------------------------------------------------------------
// Sample cache: magic, uint64 manifest length, JSON manifest, then per sample
// [target_month_index, target, z(105), tz(945)] as float64.

inline constexpr char kCacheMagic[8] = {'S', 'Q', 'M', 'D', 'A', 'T', 'A', '1'};
inline constexpr int kCacheVersion = 1;
inline constexpr std::size_t kRecordDoubles = 2 + model::layout::kFlat + kWindowValues;

inline void save_cache(const std::string& path, const DatasetSplit& split, GridCell center,
                       const nlohmann::json& source_manifest) {
    nlohmann::json m;
    m["format"] = "sqm-sample-cache";
    m["version"] = kCacheVersion;
    m["layout"] = model::layout_manifest();
    m["location"] = {{"lat", center.lat()}, {"lon", center.lon()}};
    m["counts"] = {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}};
    m["source"] = source_manifest;
    const std::string text = m.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write cache " + path);
    const std::uint64_t len = text.size();
    os.write(kCacheMagic, sizeof kCacheMagic);
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(len));
    std::vector<double> rec(kRecordDoubles);
    for (const auto* part : {&split.train, &split.validation, &split.test})
        for (const auto& s : *part) {
            rec[0] = s.target_month.index();
            rec[1] = s.target;
            std::copy(s.z.begin(), s.z.end(), rec.begin() + 2);
            std::copy(s.tz.begin(), s.tz.end(), rec.begin() + 2 + model::layout::kFlat);
            os.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size() * sizeof(double)));
        }
    if (!os) throw IoError("failed writing cache " + path);
}

struct LoadedCache {
    DatasetSplit split;
    GridCell center;
    nlohmann::json manifest;
};

inline LoadedCache load_cache(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open sample cache " + path);
    char magic[8];
    std::uint64_t len = 0;
    is.read(magic, sizeof magic);
    is.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!is || std::memcmp(magic, kCacheMagic, sizeof magic) != 0) throw VersionError("not a sample cache: " + path);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    LoadedCache out;
    out.manifest = nlohmann::json::parse(text, nullptr, false);
    if (out.manifest.is_discarded() || out.manifest.value("version", -1) != kCacheVersion)
        throw VersionError("unsupported sample cache version in " + path);
    if (out.manifest.at("layout") != model::layout_manifest())
        throw VersionError("sample cache layout does not match this build");
    out.center = GridCell::from_degrees(out.manifest["location"]["lat"].get<double>(),
                                        out.manifest["location"]["lon"].get<double>());
    std::vector<double> rec(kRecordDoubles);
    auto read_part = [&](std::vector<WindowSample>& part, std::size_t n) {
        part.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            is.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size() * sizeof(double)));
            if (!is) throw IoError("truncated sample cache " + path);
            WindowSample s;
            s.target_month = YearMonth::from_index(static_cast<int>(rec[0]));
            s.target = rec[1];
            s.z.assign(rec.begin() + 2, rec.begin() + 2 + model::layout::kFlat);
            s.tz.assign(rec.begin() + 2 + model::layout::kFlat, rec.end());
            s.location = out.center;
            part.push_back(std::move(s));
        }
    };
    const auto& c = out.manifest.at("counts");
    read_part(out.split.train, c.at("train").get<std::size_t>());
    read_part(out.split.validation, c.at("validation").get<std::size_t>());
    read_part(out.split.test, c.at("test").get<std::size_t>());
    return out;
}

} // namespace sqm::data
