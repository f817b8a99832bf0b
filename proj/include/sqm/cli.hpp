#pragma once

// Batch command-line surface: ingest, train, evaluate, predict.
//
// Exit codes: 0 success, 2 input/schema/version error, 3 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sqm/data.hpp"
#include "sqm/model.hpp"
#include "sqm/train.hpp"

namespace sqm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitRuntime = 3;

struct RunConfig {
    std::string command;
    std::string data;
    std::optional<double> lat, lon;
    std::string out = ".";
    std::uint64_t seed = 0;
    bool no_seb = false;
    bool no_qltem = false;
    int epochs = 250;
    std::size_t batch_size = 32;
    std::string checkpoint;
    std::string split = "test";

    nlohmann::json to_json() const {
        nlohmann::json j = {{"command", command}, {"data", data},        {"out", out},
                            {"seed", seed},       {"no_seb", no_seb},    {"no_qltem", no_qltem},
                            {"epochs", epochs},   {"batch_size", batch_size}, {"checkpoint", checkpoint},
                            {"split", split}};
        j["lat"] = lat ? nlohmann::json(*lat) : nlohmann::json(nullptr);
        j["lon"] = lon ? nlohmann::json(*lon) : nlohmann::json(nullptr);
        return j;
    }
    std::filesystem::path out_path(const std::string& name) const { return std::filesystem::path(out) / name; }
    std::string cache_path() const { return data.empty() ? out_path("samples.bin").string() : data; }
    std::string checkpoint_path() const { return checkpoint.empty() ? out_path("checkpoint.bin").string() : checkpoint; }
};

namespace detail {

inline data::GridCell pick_center(const data::ClimateDataset& ds, const RunConfig& cfg) {
    if (cfg.lat.has_value() != cfg.lon.has_value()) throw ValidationError("--lat and --lon must be given together");
    if (cfg.lat) {
        if (!data::on_half_degree_grid(*cfg.lat) || !data::on_half_degree_grid(*cfg.lon))
            throw ValidationError("--lat/--lon are not on the 0.5 degree grid");
        const auto c = data::GridCell::from_degrees(*cfg.lat, *cfg.lon);
        if (!ds.has_cell(c)) throw ValidationError("no records for location " + c.to_string());
        return c;
    }
    const auto c = ds.default_center();
    if (!c) throw ValidationError("dataset has no records");
    return *c;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

inline void require_file(const std::string& path, const std::string& what, const std::string& hint) {
    if (!std::filesystem::exists(path)) throw ValidationError("no " + what + " at " + path + "; " + hint);
}

} // namespace detail

inline int cmd_ingest(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    if (cfg.data.empty()) throw ValidationError("ingest needs --data <csv>");
    data::ClimateDataset ds(data::load_records(cfg.data));
    const auto center = detail::pick_center(ds, cfg);
    const auto split = data::build_splits(ds, center);
    std::filesystem::create_directories(cfg.out);

    if (split.total() == 0) err << "warning: no eligible samples for " << center.to_string() << '\n';
    for (auto [name, n] : {std::pair{"train", split.train.size()}, std::pair{"validation", split.validation.size()},
                           std::pair{"test", split.test.size()}})
        if (n == 0) err << "warning: empty " << name << " split\n";

    auto source = ds.manifest();
    data::save_cache(cfg.out_path("samples.bin").string(), split, center, source);
    nlohmann::json manifest;
    manifest["dataset"] = source;
    manifest["location"] = {{"lat", center.lat()}, {"lon", center.lon()}};
    manifest["counts"] = {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}};
    manifest["skipped"] = split.skipped;
    detail::write_json(cfg.out_path("manifest.json"), manifest);

    out << "location " << center.to_string() << '\n'
        << "train " << split.train.size() << '\n'
        << "validation " << split.validation.size() << '\n'
        << "test " << split.test.size() << '\n';
    return kExitOk;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    detail::require_file(cfg.cache_path(), "sample cache", "run `sqm ingest --data <csv> --out <dir>` first");
    const auto cache = data::load_cache(cfg.cache_path());
    std::filesystem::create_directories(cfg.out);

    train::TrainConfig tc;
    tc.max_epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.seed = cfg.seed;
    tc.flags = {cfg.no_seb, cfg.no_qltem};

    std::ofstream log(cfg.out_path("train_log.jsonl"), std::ios::trunc);
    std::ofstream timing(cfg.out_path("train_timing.jsonl"), std::ios::trunc);
    if (!log || !timing) throw IoError("cannot write training log in " + cfg.out);
    log << nlohmann::json{{"config", cfg.to_json()}}.dump() << '\n';
    auto result = train::train(cache.split, tc, [&](const train::EpochLog& e) {
        log << train::to_json(e).dump() << '\n';
        timing << nlohmann::json{{"epoch", e.epoch}, {"wall_seconds", e.wall_seconds}}.dump() << '\n';
    });
    model::save_checkpoint(cfg.checkpoint_path(), result.best, result.meta);

    out << "epochs run " << result.log.size() << '\n'
        << "best epoch " << result.meta.epoch << '\n'
        << "best val R2 " << (result.meta.val_r2 ? train::format_real(*result.meta.val_r2) : "undefined") << '\n'
        << "checkpoint " << cfg.checkpoint_path() << '\n';
    if (result.early_stopped) out << result.message << '\n';
    if (result.diverged) {
        err << "error: " << result.message << "; wrote last good checkpoint\n";
        return kExitRuntime;
    }
    return kExitOk;
}

inline int cmd_evaluate(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    if (cfg.split != "val" && cfg.split != "test") throw ValidationError("--split must be val or test");
    detail::require_file(cfg.checkpoint_path(), "checkpoint", "run `sqm train` first or pass --checkpoint");
    detail::require_file(cfg.cache_path(), "sample cache", "run `sqm ingest` first or pass --data");
    auto ck = model::load_checkpoint(cfg.checkpoint_path());
    const auto cache = data::load_cache(cfg.cache_path());
    const auto& samples = cfg.split == "val" ? cache.split.validation : cache.split.test;
    if (samples.empty()) throw ValidationError("the " + cfg.split + " split is empty");

    const auto report = train::evaluate(samples, ck.params, ck.meta.flags);
    std::filesystem::create_directories(cfg.out);
    const auto series_path = cfg.out_path("series_" + cfg.split + ".csv").string();
    train::emit_series(report, series_path);
    out << "split " << cfg.split << " (" << samples.size() << " samples)\n"
        << "MAE " << train::format_real(report.mae) << '\n'
        << "RMSE " << train::format_real(report.rmse) << '\n'
        << "R2 " << (report.r2 ? train::format_real(*report.r2) : "undefined") << '\n'
        << "series " << series_path << '\n';
    return kExitOk;
}

inline int cmd_predict(const RunConfig& cfg, std::ostream& out, std::ostream&) {
    using namespace model::layout;
    if (cfg.data.empty()) throw ValidationError("predict needs --data <window csv>");
    detail::require_file(cfg.checkpoint_path(), "checkpoint", "pass --checkpoint");
    auto ck = model::load_checkpoint(cfg.checkpoint_path());
    data::ClimateDataset ds(data::load_records(cfg.data));
    const auto center = detail::pick_center(ds, cfg);

    std::set<int> months;
    for (const auto& r : ds.records()) months.insert(r.date.index());
    const int first = *months.begin();
    std::string problems;
    if (*months.rbegin() - first + 1 != int(kMonths))
        problems += " window must span exactly 15 consecutive months (found " +
                    data::YearMonth::from_index(first).to_string() + " to " +
                    data::YearMonth::from_index(*months.rbegin()).to_string() + ");";
    std::string missing_cells;
    for (std::size_t k = 0; k < kCells; ++k)
        if (!ds.has_cell(data::frame_cell(center, k)))
            missing_cells += " " + data::frame_cell(center, k).to_string();
    if (!missing_cells.empty()) problems += " missing cells:" + missing_cells + ";";
    if (!problems.empty()) throw ValidationError("incomplete window:" + problems);

    const auto w = data::standardize_window(data::augment_spatial(ds, center, first));
    const double d = model::predict_eval(w.z, w.tz, 1, ck.params, ck.meta.flags).front();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", d);
    out << "d " << buf << '\n' << "category " << train::category_name(train::categorize(d)) << '\n';
    return kExitOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Drought forecasting with a hybrid selective-SSM / quantum-circuit network", "sqm"};
    app.set_config("--config", "", "TOML/INI file with default option values");
    app.require_subcommand(1);
    RunConfig cfg;

    auto add_shared = [&](CLI::App* sub) {
        sub->add_option("--data", cfg.data, "Input table, window file or sample cache");
        sub->add_option("--lat", cfg.lat, "Centre latitude (degrees)");
        sub->add_option("--lon", cfg.lon, "Centre longitude (degrees)");
        sub->add_option("--out", cfg.out, "Output directory");
        sub->add_option("--seed", cfg.seed, "Random seed");
        sub->add_flag("--no-seb", cfg.no_seb, "Bypass the spatial encoding block");
        sub->add_flag("--no-qltem", cfg.no_qltem, "Drop the quantum temporal branch");
        sub->add_option("--epochs", cfg.epochs, "Maximum training epochs")->check(CLI::PositiveNumber);
        sub->add_option("--batch-size", cfg.batch_size, "Minibatch size")->check(CLI::Range(2, 1 << 20));
        sub->add_option("--checkpoint", cfg.checkpoint, "Checkpoint path");
        sub->configurable();
    };
    auto* ingest = app.add_subcommand("ingest", "Validate a climate table and build the split sample cache");
    auto* trn = app.add_subcommand("train", "Train on the cached train/validation splits");
    auto* eval = app.add_subcommand("evaluate", "Report MAE/RMSE/R2 for a checkpoint and write the series file");
    auto* pred = app.add_subcommand("predict", "Forecast the next month for a single 15-month window");
    for (auto* sub : {ingest, trn, eval, pred}) add_shared(sub);
    eval->add_option("--split", cfg.split, "val or test")->check(CLI::IsMember({"val", "test"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitInput;
    }
    cfg.command = app.get_subcommands().front()->get_name();

    try {
        if (cfg.command == "ingest") return cmd_ingest(cfg, out, err);
        if (cfg.command == "train") return cmd_train(cfg, out, err);
        if (cfg.command == "evaluate") return cmd_evaluate(cfg, out, err);
        return cmd_predict(cfg, out, err);
    } catch (const SchemaError& e) {
        err << "schema error: " << e.what() << '\n';
        return kExitInput;
    } catch (const ParseError& e) {
        err << "parse error: " << e.what() << '\n';
        return kExitInput;
    } catch (const VersionError& e) {
        err << "version error: " << e.what() << '\n';
        return kExitInput;
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << '\n';
        return kExitInput;
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return kExitInput;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kExitRuntime;
    }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<const char*> argv{"sqm"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace sqm::cli
