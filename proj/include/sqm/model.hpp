#pragma once

// The drought forecasting network:
//
//   d = 3 tanh(FFB(TEB(SEB(z, T(z)))))
//
// All forward functions take a leading batch axis. z is month-major: element
// m*7 + v is variable v of month m, so z reshapes to S[15, 7] directly.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "sqm/autodiff.hpp"
#include "sqm/errors.hpp"
#include "sqm/quantum.hpp"

namespace sqm::model {

using ad::Mode;
using ad::Shape;
using ad::Tensor;

namespace layout {
inline constexpr std::size_t kMonths = 15;
inline constexpr std::size_t kVariables = 7;
inline constexpr std::size_t kGroups = 5;
inline constexpr std::size_t kGroupLen = 3;
inline constexpr std::size_t kWindow = 3;
inline constexpr std::size_t kFlat = kMonths * kVariables;
inline constexpr std::size_t kCells = kWindow * kWindow;
inline constexpr std::size_t kInner = 14;     // LTEM expansion width
inline constexpr std::size_t kState = 16;     // SSM hidden size per channel
inline constexpr std::size_t kFfbHidden = 14;
static_assert(kMonths == kGroups * kGroupLen);
static_assert(kFlat == 105);
} // namespace layout

struct Ablation {
    bool no_seb = false;
    bool no_qltem = false;
    bool operator==(const Ablation&) const = default;
};

struct SebParams {
    Tensor kernel;  // [105, 2, 2]
    Tensor bias;    // [105]
};

struct LtemParams {
    Tensor lp1_w, lp1_b;      // 7 -> 14
    Tensor conv1_k, conv1_b;  // [3, 14, 14]
    Tensor dt_w, dt_b;        // 14 -> 14, step size before softplus
    Tensor bsel_w, bsel_b;    // 14 -> 16
    Tensor csel_w, csel_b;    // 14 -> 16
    Tensor a;                 // [14, 16] diagonal state matrix entries
    Tensor d;                 // [14] skip weights
    Tensor lp2_w, lp2_b;      // 7 -> 14 gate
    Tensor lp3_w, lp3_b;      // 14 -> 7
    Tensor bn_g, bn_b;        // [7]
    Tensor conv2_k, conv2_b;  // [3, 7, 7]
    ad::BatchNormStats bn{layout::kVariables};
};

struct QltemParams {
    Tensor angles;  // [7, 11], one GroupCircuitParams row per variable
};

struct FfbParams {
    Tensor f1_w, f1_b;  // 7 -> 14
    Tensor f2_w, f2_b;  // 14 -> 7
    Tensor bn_g, bn_b;  // [7]
    Tensor fc_w, fc_b;  // 105 -> 1
    ad::BatchNormStats bn{layout::kVariables};
};

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

struct NamedStats {
    std::string name;
    std::vector<double>* values;
};

struct SquareMambaParams {
    SebParams seb;
    std::array<LtemParams, layout::kGroups> ltem;
    std::array<QltemParams, layout::kGroups> qltem;
    FfbParams ffb;

    // Every learnable tensor in a fixed serialization order.
    std::vector<NamedTensor> named() {
        std::vector<NamedTensor> out{{"seb.kernel", &seb.kernel}, {"seb.bias", &seb.bias}};
        for (std::size_t g = 0; g < layout::kGroups; ++g) {
            auto& l = ltem[g];
            const std::string p = "ltem" + std::to_string(g) + ".";
            for (auto [n, t] : std::initializer_list<std::pair<const char*, Tensor*>>{
                     {"lp1_w", &l.lp1_w},     {"lp1_b", &l.lp1_b},     {"conv1_k", &l.conv1_k},
                     {"conv1_b", &l.conv1_b}, {"dt_w", &l.dt_w},       {"dt_b", &l.dt_b},
                     {"bsel_w", &l.bsel_w},   {"bsel_b", &l.bsel_b},   {"csel_w", &l.csel_w},
                     {"csel_b", &l.csel_b},   {"a", &l.a},             {"d", &l.d},
                     {"lp2_w", &l.lp2_w},     {"lp2_b", &l.lp2_b},     {"lp3_w", &l.lp3_w},
                     {"lp3_b", &l.lp3_b},     {"bn_g", &l.bn_g},       {"bn_b", &l.bn_b},
                     {"conv2_k", &l.conv2_k}, {"conv2_b", &l.conv2_b}})
                out.push_back({p + n, t});
        }
        for (std::size_t g = 0; g < layout::kGroups; ++g)
            out.push_back({"qltem" + std::to_string(g) + ".angles", &qltem[g].angles});
        for (auto [n, t] : std::initializer_list<std::pair<const char*, Tensor*>>{{"ffb.f1_w", &ffb.f1_w},
                                                                                   {"ffb.f1_b", &ffb.f1_b},
                                                                                   {"ffb.f2_w", &ffb.f2_w},
                                                                                   {"ffb.f2_b", &ffb.f2_b},
                                                                                   {"ffb.bn_g", &ffb.bn_g},
                                                                                   {"ffb.bn_b", &ffb.bn_b},
                                                                                   {"ffb.fc_w", &ffb.fc_w},
                                                                                   {"ffb.fc_b", &ffb.fc_b}})
            out.push_back({n, t});
        return out;
    }

    // Batch-norm running statistics (not trained by the optimizer).
    std::vector<NamedStats> buffers() {
        std::vector<NamedStats> out;
        for (std::size_t g = 0; g < layout::kGroups; ++g) {
            const std::string p = "ltem" + std::to_string(g) + ".bn.";
            out.push_back({p + "running_mean", &ltem[g].bn.running_mean});
            out.push_back({p + "running_var", &ltem[g].bn.running_var});
        }
        out.push_back({"ffb.bn.running_mean", &ffb.bn.running_mean});
        out.push_back({"ffb.bn.running_var", &ffb.bn.running_var});
        return out;
    }

    // Tensors the optimizer updates under the given ablation.
    std::vector<NamedTensor> trainable(const Ablation& flags) {
        std::vector<NamedTensor> out;
        for (auto& nt : named()) {
            if (flags.no_seb && nt.name.starts_with("seb.")) continue;
            if (flags.no_qltem && nt.name.starts_with("qltem")) continue;
            out.push_back(nt);
        }
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto& nt : named()) n += nt.tensor->size();
        return n;
    }

    // Deep copy with fresh leaves; gradients are not copied.
    SquareMambaParams clone() const {
        SquareMambaParams out = *this;
        auto src = const_cast<SquareMambaParams*>(this)->named();
        auto dst = out.named();
        for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->clone();
        return out;
    }
};

// Fan-in scaled uniform weights, quantum angles in [-0.1, 0.1], SSM decay
// a = -1 and step-size bias chosen so softplus(bias) = 0.1.
inline SquareMambaParams init_params(std::uint64_t seed) {
    using namespace layout;
    std::mt19937_64 rng(seed);
    auto uniform = [&](Shape shape, double bound) {
        std::vector<double> v(ad::numel(shape));
        for (auto& x : v) x = bound * (2.0 * ad::uniform01(rng) - 1.0);
        return Tensor::from(std::move(shape), std::move(v), true);
    };
    auto fan_in = [&](Shape shape, std::size_t fan) { return uniform(std::move(shape), 1.0 / std::sqrt(double(fan))); };
    auto constant = [](Shape shape, double v) { return Tensor::full(std::move(shape), v, true); };

    SquareMambaParams p;
    p.seb.kernel = fan_in({kFlat, 2, 2}, 4);
    p.seb.bias = fan_in({kFlat}, 4);
    const double dt_bias = std::log(std::expm1(0.1));
    for (auto& l : p.ltem) {
        l.lp1_w = fan_in({kVariables, kInner}, kVariables);
        l.lp1_b = fan_in({kInner}, kVariables);
        l.conv1_k = fan_in({3, kInner, kInner}, 3 * kInner);
        l.conv1_b = fan_in({kInner}, 3 * kInner);
        l.dt_w = fan_in({kInner, kInner}, kInner);
        l.dt_b = constant({kInner}, dt_bias);
        l.bsel_w = fan_in({kInner, kState}, kInner);
        l.bsel_b = fan_in({kState}, kInner);
        l.csel_w = fan_in({kInner, kState}, kInner);
        l.csel_b = fan_in({kState}, kInner);
        l.a = constant({kInner, kState}, -1.0);
        l.d = constant({kInner}, 1.0);
        l.lp2_w = fan_in({kVariables, kInner}, kVariables);
        l.lp2_b = fan_in({kInner}, kVariables);
        l.lp3_w = fan_in({kInner, kVariables}, kInner);
        l.lp3_b = fan_in({kVariables}, kInner);
        l.bn_g = constant({kVariables}, 1.0);
        l.bn_b = constant({kVariables}, 0.0);
        l.conv2_k = fan_in({3, kVariables, kVariables}, 3 * kVariables);
        l.conv2_b = fan_in({kVariables}, 3 * kVariables);
    }
    for (auto& q : p.qltem) q.angles = uniform({kVariables, quantum::GroupCircuitParams::kCount}, 0.1);
    p.ffb.f1_w = fan_in({kVariables, kFfbHidden}, kVariables);
    p.ffb.f1_b = fan_in({kFfbHidden}, kVariables);
    p.ffb.f2_w = fan_in({kFfbHidden, kVariables}, kFfbHidden);
    p.ffb.f2_b = fan_in({kVariables}, kFfbHidden);
    p.ffb.bn_g = constant({kVariables}, 1.0);
    p.ffb.bn_b = constant({kVariables}, 0.0);
    p.ffb.fc_w = fan_in({kFlat, 1}, kFlat);
    p.ffb.fc_b = fan_in({1}, kFlat);
    return p;
}

// ---------------------------------------------------------------------------
// Spatial encoding

// s = z + maxpool(leaky_relu_0.2(depthwise_2x2(Tz))).  z [B,105], tz [B,105,3,3].
inline Tensor seb_forward(const Tensor& z, const Tensor& tz, const SebParams& p) {
    using namespace layout;
    if (z.rank() != 2 || z.dim(1) != kFlat) throw DimensionError("seb: z must be [B, 105], got " + ad::to_string(z.shape()));
    if (tz.shape() != Shape{z.dim(0), kFlat, kWindow, kWindow})
        throw DimensionError("seb: T(z) must be [B, 105, 3, 3], got " + ad::to_string(tz.shape()));
    auto conv = ad::conv2d_depthwise(tz, p.kernel, p.bias);
    auto act = ad::activation(ad::Activation::LeakyRelu02, conv);
    return ad::add(z, ad::maxpool_spatial(act));
}

// ---------------------------------------------------------------------------
// Selective state-space scan

// Per channel c and state n, with h_0 = 0:
//   h_t[n] = exp(delta_t[c] * a[c,n]) * h_{t-1}[n] + delta_t[c] * bsel_t[n] * u_t[c]
//   y_t[c] = sum_n csel_t[n] * h_t[n] + d[c] * u_t[c]
// u, delta: [B, L, D]; bsel, csel: [B, L, N]; a: [D, N]; d: [D].
inline Tensor sssm_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& bsel, const Tensor& csel,
                        const Tensor& d) {
    if (u.rank() != 3 || delta.shape() != u.shape())
        throw DimensionError("sssm_scan: u and delta must share shape [B, L, D]");
    const std::size_t B = u.dim(0), L = u.dim(1), D = u.dim(2);
    if (a.rank() != 2 || a.dim(0) != D) throw DimensionError("sssm_scan: a must be [D, N]");
    const std::size_t N = a.dim(1);
    if (bsel.shape() != Shape{B, L, N} || csel.shape() != Shape{B, L, N})
        throw DimensionError("sssm_scan: selective B/C must be [B, L, N]");
    if (d.shape() != Shape{D}) throw DimensionError("sssm_scan: d must be [D]");

    std::vector<double> y(B * L * D);
    std::vector<double> hist(B * L * D * N);  // h_t for backward
    std::vector<double> abar(B * L * D * N);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < D; ++c)
            for (std::size_t t = 0; t < L; ++t) {
                const std::size_t i = (b * L + t) * D + c;
                const double dt = delta[i], x = u[i];
                const double* bt = bsel.values().data() + (b * L + t) * N;
                const double* ct = csel.values().data() + (b * L + t) * N;
                double* h = hist.data() + i * N;
                double* ab = abar.data() + i * N;
                const double* hprev = t ? hist.data() + ((b * L + t - 1) * D + c) * N : nullptr;
                double acc = d[c] * x;
                for (std::size_t n = 0; n < N; ++n) {
                    ab[n] = std::exp(dt * a[c * N + n]);
                    h[n] = (hprev ? ab[n] * hprev[n] : 0.0) + dt * bt[n] * x;
                    acc += ct[n] * h[n];
                }
                y[i] = acc;
            }

    return ad::detail::make_result(
        "sssm_scan", u.shape(), std::move(y), {u, delta, a, bsel, csel, d},
        [B, L, D, N, hist = std::move(hist), abar = std::move(abar)](ad::Node& self) {
            const double* dy = self.grad.data();
            const double* uv = self.parents[0]->value.data();
            const double* dv = self.parents[1]->value.data();
            const double* av = self.parents[2]->value.data();
            const double* bv = self.parents[3]->value.data();
            const double* cv = self.parents[4]->value.data();
            const double* skip = self.parents[5]->value.data();
            double* gu = ad::detail::grad_of(self, 0);
            double* gdelta = ad::detail::grad_of(self, 1);
            double* ga = ad::detail::grad_of(self, 2);
            double* gb = ad::detail::grad_of(self, 3);
            double* gc = ad::detail::grad_of(self, 4);
            double* gd = ad::detail::grad_of(self, 5);
            std::vector<double> gh(N);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < D; ++c) {
                    std::fill(gh.begin(), gh.end(), 0.0);
                    for (std::size_t t = L; t-- > 0;) {
                        const std::size_t i = (b * L + t) * D + c;
                        const std::size_t row = (b * L + t) * N;
                        const double g = dy[i], x = uv[i], dt = dv[i];
                        const double* h = hist.data() + i * N;
                        const double* ab = abar.data() + i * N;
                        const double* hprev = t ? hist.data() + ((b * L + t - 1) * D + c) * N : nullptr;
                        double du = g * skip[c], ddt = 0.0;
                        if (gd) gd[c] += g * x;
                        for (std::size_t n = 0; n < N; ++n) {
                            gh[n] += g * cv[row + n];
                            if (gc) gc[row + n] += g * h[n];
                            const double hp = hprev ? hprev[n] : 0.0;
                            const double dab = gh[n] * hp;
                            ddt += dab * ab[n] * av[c * N + n] + gh[n] * bv[row + n] * x;
                            if (ga) ga[c * N + n] += dab * ab[n] * dt;
                            if (gb) gb[row + n] += gh[n] * dt * x;
                            du += gh[n] * dt * bv[row + n];
                            gh[n] *= ab[n];
                        }
                        if (gu) gu[i] += du;
                        if (gdelta) gdelta[i] += ddt;
                    }
                }
        });
}

// Input-dependent discretization feeding sssm_scan: delta = softplus(dt(u)),
// bsel = B(u), csel = C(u).
inline Tensor selective_ssm(const Tensor& u, const LtemParams& p) {
    auto delta = ad::activation(ad::Activation::Softplus, ad::linear(u, p.dt_w, p.dt_b));
    auto bsel = ad::linear(u, p.bsel_w, p.bsel_b);
    auto csel = ad::linear(u, p.csel_w, p.csel_b);
    return sssm_scan(u, delta, p.a, bsel, csel, p.d);
}

// ---------------------------------------------------------------------------
// Temporal encoding

// Classical local time encoder on one 3-month group. s_g [B, 3, 7] -> [B, 3, 7].
inline Tensor ltem_forward(const Tensor& s_g, LtemParams& p, Mode mode) {
    using ad::Activation;
    auto u = ad::activation(Activation::Silu, ad::conv1d_temporal(ad::linear(s_g, p.lp1_w, p.lp1_b), p.conv1_k, p.conv1_b));
    auto gate = ad::activation(Activation::Silu, ad::linear(s_g, p.lp2_w, p.lp2_b));
    auto s_ssm = ad::mul(selective_ssm(u, p), gate);
    auto normed = ad::batchnorm(ad::linear(s_ssm, p.lp3_w, p.lp3_b), p.bn_g, p.bn_b, p.bn, mode);
    return ad::activation(Activation::Elu, ad::conv1d_temporal(normed, p.conv2_k, p.conv2_b));
}

// Quantum local time encoder: variable v's three months drive register v.
// s_g [B, 3, 7], angles [7, 11] -> [B, 3, 7] of Pauli-Z expectations.
inline Tensor qltem_forward(const Tensor& s_g, const QltemParams& p) {
    using namespace layout;
    constexpr std::size_t kP = quantum::GroupCircuitParams::kCount;
    if (s_g.rank() != 3 || s_g.dim(1) != kGroupLen || s_g.dim(2) != kVariables)
        throw DimensionError("qltem: group must be [B, 3, 7], got " + ad::to_string(s_g.shape()));
    if (p.angles.shape() != Shape{kVariables, kP}) throw DimensionError("qltem: angles must be [7, 11]");
    const std::size_t B = s_g.dim(0);
    std::vector<double> out(s_g.size());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t v = 0; v < kVariables; ++v) {
            quantum::CircuitAngles a{};
            for (std::size_t q = 0; q < kGroupLen; ++q) a[q] = s_g[(b * kGroupLen + q) * kVariables + v];
            std::copy_n(p.angles.values().begin() + v * kP, kP, a.begin() + 3);
            const auto z = quantum::run_group_circuit(a);
            for (std::size_t q = 0; q < kGroupLen; ++q) out[(b * kGroupLen + q) * kVariables + v] = z[q];
        }
    return ad::detail::make_result("qltem", s_g.shape(), std::move(out), {s_g, p.angles}, [B](ad::Node& self) {
        const double* x = self.parents[0]->value.data();
        const double* ang = self.parents[1]->value.data();
        double* gx = ad::detail::grad_of(self, 0);
        double* ga = ad::detail::grad_of(self, 1);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t v = 0; v < kVariables; ++v) {
                quantum::CircuitAngles a{};
                quantum::Triple up{};
                for (std::size_t q = 0; q < kGroupLen; ++q) {
                    const std::size_t i = (b * kGroupLen + q) * kVariables + v;
                    a[q] = x[i];
                    up[q] = self.grad[i];
                }
                std::copy_n(ang + v * kP, kP, a.begin() + 3);
                const auto g = quantum::param_shift_grad(a, up);
                if (gx)
                    for (std::size_t q = 0; q < kGroupLen; ++q) gx[(b * kGroupLen + q) * kVariables + v] += g[q];
                if (ga)
                    for (std::size_t k = 0; k < kP; ++k) ga[v * kP + k] += g[3 + k];
            }
    });
}

// Five independent 3-month groups, each LTEM (+ QLTEM), concatenated in time.
inline Tensor teb_forward(const Tensor& s, SquareMambaParams& p, Mode mode, const Ablation& flags) {
    using namespace layout;
    if (s.rank() != 3 || s.dim(1) != kMonths || s.dim(2) != kVariables)
        throw DimensionError("teb: input must be [B, 15, 7], got " + ad::to_string(s.shape()));
    std::vector<Tensor> groups;
    for (std::size_t g = 0; g < kGroups; ++g) {
        auto s_g = ad::slice(s, 1, g * kGroupLen, (g + 1) * kGroupLen);
        auto f_g = ltem_forward(s_g, p.ltem[g], mode);
        if (!flags.no_qltem) f_g = ad::add(f_g, qltem_forward(s_g, p.qltem[g]));
        groups.push_back(std::move(f_g));
    }
    return ad::concat(groups, 1);
}

// ---------------------------------------------------------------------------
// Feature fusion

// FCL(BN(F + F')) with F' = drop(f2(drop(gelu(f1(F))))). F [B, 15, 7] -> [B, 1].
inline Tensor ffb_forward(const Tensor& f, FfbParams& p, Mode mode, std::mt19937_64& rng) {
    using namespace layout;
    constexpr double kDrop = 0.2;
    auto hidden = ad::activation(ad::Activation::Gelu, ad::linear(f, p.f1_w, p.f1_b));
    auto refined = ad::dropout(ad::linear(ad::dropout(hidden, kDrop, mode, rng), p.f2_w, p.f2_b), kDrop, mode, rng);
    auto normed = ad::batchnorm(ad::add(f, refined), p.bn_g, p.bn_b, p.bn, mode);
    return ad::linear(ad::reshape(normed, {f.dim(0), kFlat}), p.fc_w, p.fc_b);
}

// Full network. z [B, 105], tz [B, 105, 3, 3] -> d [B] in (-3, 3).
inline Tensor predict(const Tensor& z, const Tensor& tz, SquareMambaParams& p, Mode mode, std::mt19937_64& rng,
                      const Ablation& flags = {}) {
    using namespace layout;
    if (z.rank() != 2 || z.dim(1) != kFlat) throw DimensionError("predict: z must be [B, 105], got " + ad::to_string(z.shape()));
    const std::size_t B = z.dim(0);
    auto s = flags.no_seb ? z : seb_forward(z, tz, p.seb);
    auto f = teb_forward(ad::reshape(s, {B, kMonths, kVariables}), p, mode, flags);
    auto out = ffb_forward(f, p.ffb, mode, rng);
    return ad::reshape(ad::activation(ad::Activation::ScaledTanh3, out), {B});
}

// Eval-mode convenience: no gradients, no dropout.
inline std::vector<double> predict_eval(const std::vector<double>& z, const std::vector<double>& tz, std::size_t batch,
                                        SquareMambaParams& p, const Ablation& flags) {
    using namespace layout;
    std::mt19937_64 unused(0);
    auto d = predict(Tensor::from({batch, kFlat}, z), Tensor::from({batch, kFlat, kWindow, kWindow}, tz), p, Mode::Eval,
                     unused, flags);
    return {d.values().begin(), d.values().end()};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// File layout: 8-byte magic, uint64 manifest length, JSON manifest, then the
// raw little-endian float64 payload of every tensor and buffer in manifest
// order.

inline constexpr char kCheckpointMagic[8] = {'S', 'Q', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
    std::uint64_t seed = 0;
    int epoch = 0;
    Ablation flags;
    std::optional<double> val_r2;
};

inline nlohmann::json layout_manifest() {
    using namespace layout;
    return {{"months", kMonths},     {"variables", kVariables}, {"groups", kGroups},     {"group_len", kGroupLen},
            {"window", kWindow},     {"d_inner", kInner},       {"d_state", kState},     {"ffb_hidden", kFfbHidden}};
}

inline void save_checkpoint(const std::string& path, SquareMambaParams& params, const CheckpointMeta& meta) {
    static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes little-endian hosts");
    nlohmann::json manifest;
    manifest["format"] = "sqm-checkpoint";
    manifest["version"] = kCheckpointVersion;
    manifest["layout"] = layout_manifest();
    manifest["seed"] = meta.seed;
    manifest["epoch"] = meta.epoch;
    manifest["flags"] = {{"no_seb", meta.flags.no_seb}, {"no_qltem", meta.flags.no_qltem}};
    manifest["val_r2"] = meta.val_r2 ? nlohmann::json(*meta.val_r2) : nlohmann::json(nullptr);
    std::vector<std::span<const double>> payload;
    for (auto& nt : params.named()) {
        manifest["tensors"].push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}});
        payload.push_back(nt.tensor->values());
    }
    for (auto& nb : params.buffers()) {
        manifest["buffers"].push_back({{"name", nb.name}, {"size", nb.values->size()}});
        payload.push_back(*nb.values);
    }
    const std::string text = manifest.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + path);
    const std::uint64_t len = text.size();
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (auto span : payload)
        os.write(reinterpret_cast<const char*>(span.data()), static_cast<std::streamsize>(span.size_bytes()));
    if (!os) throw IoError("failed writing checkpoint " + path);
}

struct Checkpoint {
    SquareMambaParams params;
    CheckpointMeta meta;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    std::uint64_t len = 0;
    is.read(magic, sizeof magic);
    is.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw VersionError("not a checkpoint file: " + path);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    auto manifest = nlohmann::json::parse(text, nullptr, false);
    if (manifest.is_discarded()) throw VersionError("corrupt checkpoint manifest in " + path);
    if (manifest.value("version", -1) != kCheckpointVersion)
        throw VersionError("unsupported checkpoint version in " + path);
    if (manifest["layout"] != layout_manifest()) throw VersionError("checkpoint layout does not match this build");

    Checkpoint ck{init_params(0), {}};
    auto named = ck.params.named();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != named.size()) throw VersionError("checkpoint tensor count mismatch");
    auto read_into = [&](std::span<double> dst) {
        is.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size_bytes()));
        if (!is) throw IoError("truncated checkpoint " + path);
    };
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (tensors[i].at("name") != named[i].name ||
            tensors[i].at("shape").get<Shape>() != named[i].tensor->shape())
            throw VersionError("checkpoint tensor mismatch at " + named[i].name);
        read_into(named[i].tensor->mutable_values());
    }
    auto buffers = ck.params.buffers();
    const auto& bufs = manifest.at("buffers");
    if (bufs.size() != buffers.size()) throw VersionError("checkpoint buffer count mismatch");
    for (std::size_t i = 0; i < buffers.size(); ++i) {
        if (bufs[i].at("name") != buffers[i].name || bufs[i].at("size") != buffers[i].values->size())
            throw VersionError("checkpoint buffer mismatch at " + buffers[i].name);
        read_into(*buffers[i].values);
    }
    ck.meta.seed = manifest.at("seed").get<std::uint64_t>();
    ck.meta.epoch = manifest.at("epoch").get<int>();
    ck.meta.flags.no_seb = manifest.at("flags").at("no_seb").get<bool>();
    ck.meta.flags.no_qltem = manifest.at("flags").at("no_qltem").get<bool>();
    if (!manifest.at("val_r2").is_null()) ck.meta.val_r2 = manifest.at("val_r2").get<double>();
    return ck;
}

} // namespace sqm::model
