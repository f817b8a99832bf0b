// Writes a synthetic 3x3-cell climate table in the ingestion format.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "sqm/synthetic.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Synthetic climate table generator", "sqm_synth"};
    sqm::synthetic::SyntheticConfig cfg;
    std::string out;
    app.add_option("--out", out, "Output CSV path")->required();
    app.add_option("--seed", cfg.seed, "Generator seed");
    app.add_option("--years", cfg.years, "Number of years starting at --first-year")->check(CLI::PositiveNumber);
    app.add_option("--first-year", cfg.first_year, "First calendar year");
    app.add_option("--lat", cfg.center_lat, "Centre latitude");
    app.add_option("--lon", cfg.center_lon, "Centre longitude");
    app.add_option("--noise", cfg.noise_sd, "Target noise standard deviation");
    CLI11_PARSE(app, argc, argv);

    std::ofstream os(out);
    if (!os) {
        std::cerr << "cannot write " << out << '\n';
        return 2;
    }
    sqm::data::write_records_csv(sqm::synthetic::generate(cfg), os);
    return 0;
}
