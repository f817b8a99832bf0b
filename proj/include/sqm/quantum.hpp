#pragma once

// Exact statevector simulation of the 3-qubit group circuit:
//
//   |000> -> RY(x_q) -> RY(a_q) -> XX_01(b) -> RX(c_q) -> XX_12(e) -> RY(f_q)
//         -> CCNOT(0,1,2) -> CCNOT(1,2,0) -> CCNOT(2,0,1) -> <Z_q>
//
// Basis index bit 2 is wire 0, so |q0 q1 q2> maps to q0*4 + q1*2 + q2.
// Every parametrized gate is exp(-i theta/2 P) with P^2 = I, so the
// two-term parameter-shift rule gives exact gradients for all 14 angles.

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "sqm/errors.hpp"

namespace sqm::quantum {

using Complex = std::complex<double>;
inline constexpr std::size_t kQubits = 3;
inline constexpr std::size_t kDim = 8;

struct StateVector {
    std::array<Complex, kDim> amp{};

    static StateVector zero() {
        StateVector s;
        s.amp[0] = 1.0;
        return s;
    }
    double norm_squared() const {
        double n = 0.0;
        for (const auto& a : amp) n += std::norm(a);
        return n;
    }
};

// Dense matrices, row-major.
using Mat2 = std::array<Complex, 4>;
using Mat4 = std::array<Complex, 16>;

inline Mat2 ry_matrix(double theta) {
    const double c = std::cos(theta / 2), s = std::sin(theta / 2);
    return {c, -s, s, c};
}
inline Mat2 rx_matrix(double theta) {
    const double c = std::cos(theta / 2), s = std::sin(theta / 2);
    return {c, Complex(0, -s), Complex(0, -s), c};
}
inline Mat2 rz_matrix(double theta) { return {std::polar(1.0, -theta / 2), 0.0, 0.0, std::polar(1.0, theta / 2)}; }
inline Mat2 pauli_z_matrix() { return {1.0, 0.0, 0.0, -1.0}; }
inline Mat2 not_matrix() { return {0.0, 1.0, 1.0, 0.0}; }

inline Mat4 xx_matrix(double theta) {
    const double c = std::cos(theta / 2), s = std::sin(theta / 2);
    const Complex d = c, o(0, -s);
    return {d, 0, 0, o,  //
            0, d, o, 0,  //
            0, o, d, 0,  //
            o, 0, 0, d};
}

namespace detail {
inline std::size_t wire_mask(std::size_t wire) {
    if (wire >= kQubits) throw IndexError("wire " + std::to_string(wire) + " out of range for 3 qubits");
    return std::size_t{1} << (kQubits - 1 - wire);
}
} // namespace detail

inline void apply_single(StateVector& state, std::size_t wire, const Mat2& m) {
    const std::size_t mask = detail::wire_mask(wire);
    for (std::size_t i = 0; i < kDim; ++i) {
        if (i & mask) continue;
        const Complex a = state.amp[i], b = state.amp[i | mask];
        state.amp[i] = m[0] * a + m[1] * b;
        state.amp[i | mask] = m[2] * a + m[3] * b;
    }
}

// RY keeps real amplitudes real; the dedicated loop avoids complex matrix
// products on the hot path.
inline void apply_ry(StateVector& state, std::size_t wire, double theta) {
    const std::size_t mask = detail::wire_mask(wire);
    const double c = std::cos(theta / 2), s = std::sin(theta / 2);
    for (std::size_t i = 0; i < kDim; ++i) {
        if (i & mask) continue;
        const Complex a = state.amp[i], b = state.amp[i | mask];
        state.amp[i] = c * a - s * b;
        state.amp[i | mask] = s * a + c * b;
    }
}

inline void apply_rx(StateVector& state, std::size_t wire, double theta) {
    const std::size_t mask = detail::wire_mask(wire);
    const double c = std::cos(theta / 2), s = std::sin(theta / 2);
    const Complex mis(0, -s);
    for (std::size_t i = 0; i < kDim; ++i) {
        if (i & mask) continue;
        const Complex a = state.amp[i], b = state.amp[i | mask];
        state.amp[i] = c * a + mis * b;
        state.amp[i | mask] = mis * a + c * b;
    }
}

// exp(-i theta/2 X(x)X): couples each basis state with its double bit flip.
inline void apply_xx(StateVector& state, std::size_t wire_a, std::size_t wire_b, double theta) {
    if (wire_a == wire_b) throw UsageError("XX gate needs two distinct wires");
    const std::size_t flip = detail::wire_mask(wire_a) | detail::wire_mask(wire_b);
    const double c = std::cos(theta / 2), s = std::sin(theta / 2);
    const Complex mis(0, -s);
    const StateVector in = state;
    for (std::size_t i = 0; i < kDim; ++i) state.amp[i] = c * in.amp[i] + mis * in.amp[i ^ flip];
}

// Flips `target` when `ctrl_one` reads |1> and `ctrl_zero` reads |0>.
inline void apply_ccnot(StateVector& state, std::size_t ctrl_one, std::size_t ctrl_zero, std::size_t target) {
    if (ctrl_one == ctrl_zero || ctrl_one == target || ctrl_zero == target)
        throw UsageError("CCNOT needs three distinct wires");
    const std::size_t m1 = detail::wire_mask(ctrl_one), m0 = detail::wire_mask(ctrl_zero),
                      mt = detail::wire_mask(target);
    for (std::size_t i = 0; i < kDim; ++i)
        if ((i & m1) && !(i & m0) && !(i & mt)) std::swap(state.amp[i], state.amp[i | mt]);
}

inline double expect_z(const StateVector& state, std::size_t wire) {
    const std::size_t mask = detail::wire_mask(wire);
    double e = 0.0;
    for (std::size_t i = 0; i < kDim; ++i) e += (i & mask) ? -std::norm(state.amp[i]) : std::norm(state.amp[i]);
    return e;
}

// 8x8 permutation matrix of a mixed-polarity CCNOT, row-major.
inline std::vector<Complex> ccnot_matrix(std::size_t ctrl_one, std::size_t ctrl_zero, std::size_t target) {
    std::vector<Complex> m(kDim * kDim, 0.0);
    for (std::size_t col = 0; col < kDim; ++col) {
        StateVector s;
        s.amp[col] = 1.0;
        apply_ccnot(s, ctrl_one, ctrl_zero, target);
        for (std::size_t row = 0; row < kDim; ++row) m[row * kDim + col] = s.amp[row];
    }
    return m;
}

// ---------------------------------------------------------------------------
// Group circuit

// Trainable angles of one group register (radians).
struct GroupCircuitParams {
    std::array<double, 3> ry1{};
    double xx01 = 0.0;
    std::array<double, 3> rx{};
    double xx12 = 0.0;
    std::array<double, 3> ry2{};

    static constexpr std::size_t kCount = 11;

    // Flat order: ry1[0..2], xx01, rx[0..2], xx12, ry2[0..2].
    std::array<double, kCount> flat() const {
        return {ry1[0], ry1[1], ry1[2], xx01, rx[0], rx[1], rx[2], xx12, ry2[0], ry2[1], ry2[2]};
    }
    static GroupCircuitParams from_flat(std::span<const double> v) {
        if (v.size() != kCount) throw DimensionError("group circuit expects 11 angles");
        GroupCircuitParams p;
        p.ry1 = {v[0], v[1], v[2]};
        p.xx01 = v[3];
        p.rx = {v[4], v[5], v[6]};
        p.xx12 = v[7];
        p.ry2 = {v[8], v[9], v[10]};
        return p;
    }
};

using Triple = std::array<double, 3>;
// Three embedding angles followed by the 11 trainable ones.
using CircuitAngles = std::array<double, 3 + GroupCircuitParams::kCount>;

inline CircuitAngles pack_angles(const Triple& inputs, const GroupCircuitParams& params) {
    CircuitAngles a{};
    const auto flat = params.flat();
    std::copy(inputs.begin(), inputs.end(), a.begin());
    std::copy(flat.begin(), flat.end(), a.begin() + 3);
    return a;
}

// Number of full circuit simulations since process start (instrumentation).
inline std::atomic<std::uint64_t>& circuit_runs() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

inline StateVector group_circuit_state(const CircuitAngles& a) {
    circuit_runs().fetch_add(1, std::memory_order_relaxed);
    StateVector s = StateVector::zero();
    for (std::size_t q = 0; q < 3; ++q) apply_ry(s, q, a[q]);
    for (std::size_t q = 0; q < 3; ++q) apply_ry(s, q, a[3 + q]);
    apply_xx(s, 0, 1, a[6]);
    for (std::size_t q = 0; q < 3; ++q) apply_rx(s, q, a[7 + q]);
    apply_xx(s, 1, 2, a[10]);
    for (std::size_t q = 0; q < 3; ++q) apply_ry(s, q, a[11 + q]);
    apply_ccnot(s, 0, 1, 2);
    apply_ccnot(s, 1, 2, 0);
    apply_ccnot(s, 2, 0, 1);
    return s;
}

inline Triple measure_all(const StateVector& s) { return {expect_z(s, 0), expect_z(s, 1), expect_z(s, 2)}; }

inline Triple run_group_circuit(const CircuitAngles& angles) { return measure_all(group_circuit_state(angles)); }

inline Triple run_group_circuit(const Triple& inputs, const GroupCircuitParams& params) {
    return run_group_circuit(pack_angles(inputs, params));
}

struct CircuitGradient {
    Triple inputs{};
    GroupCircuitParams params;
};

// Parameter-shift gradient of upstream . <Z> with respect to all 14 angles.
inline CircuitAngles param_shift_grad(const CircuitAngles& angles, const Triple& upstream) {
    CircuitAngles g{};
    if (upstream[0] == 0.0 && upstream[1] == 0.0 && upstream[2] == 0.0) return g;
    constexpr double kShift = std::numbers::pi / 2;
    CircuitAngles shifted = angles;
    for (std::size_t k = 0; k < angles.size(); ++k) {
        shifted[k] = angles[k] + kShift;
        const Triple plus = run_group_circuit(shifted);
        shifted[k] = angles[k] - kShift;
        const Triple minus = run_group_circuit(shifted);
        shifted[k] = angles[k];
        g[k] = 0.5 * (upstream[0] * (plus[0] - minus[0]) + upstream[1] * (plus[1] - minus[1]) +
                      upstream[2] * (plus[2] - minus[2]));
    }
    return g;
}

inline CircuitGradient param_shift_grad(const Triple& inputs, const GroupCircuitParams& params, const Triple& upstream) {
    const CircuitAngles g = param_shift_grad(pack_angles(inputs, params), upstream);
    CircuitGradient out;
    std::copy_n(g.begin(), 3, out.inputs.begin());
    out.params = GroupCircuitParams::from_flat(std::span<const double>(g).subspan(3));
    return out;
}

// ---------------------------------------------------------------------------
// Single-qubit expressibility: every U(2) element is RY(a) RX(b) RY(r) up to
// a global phase.

inline Mat2 matmul(const Mat2& a, const Mat2& b) {
    return {a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3]};
}
inline Mat2 adjoint(const Mat2& a) { return {std::conj(a[0]), std::conj(a[2]), std::conj(a[1]), std::conj(a[3])}; }

// max |(U^dagger U - I)_ij|
inline double unitarity_defect(std::span<const Complex> u, std::size_t n) {
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Complex acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += std::conj(u[k * n + i]) * u[k * n + j];
            worst = std::max(worst, std::abs(acc - (i == j ? 1.0 : 0.0)));
        }
    return worst;
}

struct EulerFit {
    double alpha = 0.0;  // outer RY
    double beta = 0.0;   // RX
    double rho = 0.0;    // inner RY
    double residual = 0.0;
};

inline Mat2 euler_compose(double alpha, double beta, double rho) {
    return matmul(ry_matrix(alpha), matmul(rx_matrix(beta), ry_matrix(rho)));
}

// Smallest max-norm distance between `fitted` and a phase multiple of `target`.
inline double phase_residual(const Mat2& fitted, const Mat2& target) {
    Complex overlap = 0.0;
    for (std::size_t i = 0; i < 4; ++i) overlap += std::conj(target[i]) * fitted[i];
    const Complex phase = std::abs(overlap) > 0 ? overlap / std::abs(overlap) : Complex(1.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, std::abs(fitted[i] - phase * target[i]));
    return worst;
}

inline EulerFit euler_expressibility_check(const Mat2& target) {
    if (unitarity_defect(target, 2) > 1e-10) throw ValidationError("Euler fit target is not unitary");

    // Strip the global phase so the target lies in SU(2).
    const Complex det = target[0] * target[3] - target[1] * target[2];
    const Complex root = std::sqrt(det);
    Mat2 v;
    for (std::size_t i = 0; i < 4; ++i) v[i] = target[i] / root;

    // The Clifford C = (I - i(X+Y+Z))/2 cycles X -> Y -> Z, so conjugation
    // turns the Y-X-Y product into the standard Z-Y-Z form.
    const Complex h(0.5, -0.5), k(-0.5, -0.5);
    const Mat2 c = {h, k, Complex(0.5, -0.5), Complex(0.5, 0.5)};
    const Mat2 m = matmul(c, matmul(v, adjoint(c)));

    constexpr double kTiny = 1e-14;
    const double cos_half = std::abs(m[3]), sin_half = std::abs(m[2]);
    EulerFit fit;
    fit.beta = 2.0 * std::atan2(sin_half, cos_half);
    if (sin_half < kTiny) {
        fit.alpha = 2.0 * std::arg(m[3]);
    } else if (cos_half < kTiny) {
        fit.alpha = 2.0 * std::arg(m[2]);
    } else {
        const double sum = 2.0 * std::arg(m[3]);   // alpha + rho
        const double diff = 2.0 * std::arg(m[2]);  // alpha - rho
        fit.alpha = 0.5 * (sum + diff);
        fit.rho = 0.5 * (sum - diff);
    }
    fit.residual = phase_residual(euler_compose(fit.alpha, fit.beta, fit.rho), target);
    return fit;
}

} // namespace sqm::quantum
