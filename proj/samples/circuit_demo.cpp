// Runs one group circuit and prints its Pauli-Z read-out and parameter-shift
// gradient for a unit upstream signal on every wire.

#include <cstdio>

#include "sqm/quantum.hpp"

int main() {
    using namespace sqm::quantum;
    const Triple inputs = {0.3, -1.1, 0.8};
    GroupCircuitParams params;
    params.ry1 = {0.1, 0.2, -0.3};
    params.xx01 = 0.7;
    params.rx = {-0.4, 0.5, 0.05};
    params.xx12 = -0.9;
    params.ry2 = {0.25, -0.15, 0.6};

    const auto z = run_group_circuit(inputs, params);
    std::printf("<Z> = (%.6f, %.6f, %.6f)\n", z[0], z[1], z[2]);

    const auto g = param_shift_grad(pack_angles(inputs, params), {1.0, 1.0, 1.0});
    std::printf("d/d angle:");
    for (double v : g) std::printf(" %.5f", v);
    std::printf("\n");
}
