#pragma once

#include <cstdint>
#include <vector>

#include "astgl/grid.hpp"
#include "astgl/tensor.hpp"

namespace astgl {

/// All constants of the surrogate transient model. A dataset manifest embeds
/// the block so every dataset names the exact dynamics that produced it.
///
/// Model: per load bus a first-order induction-motor slip state
///   ds/dt = (T_m - T_e(V, s)) / (2 H),   T_e = k V^2 s / (s^2 + s_crit^2)
/// with bus voltages recovered algebraically through a grounded sensitivity
/// matrix S built from the in-service susceptance Laplacian (generator buses
/// act as stiff sources): V = 1 - S q(s), q = c_q * m * s * load_level.
/// A fault clamps the faulted bus to the given depth and depresses the other
/// buses through S during [0, t_d]. Fixed-step RK4.
struct SurrogateConstants {
    double inertia = 0.6;          // H [s]
    double slip_critical = 0.15;   // s_crit
    double torque_gain = 0.52;     // k, tuned so the base case is stable
    double mech_torque = 1.0;      // T_m at nominal load level
    double reactive_gain = 1.2;    // c_q
    double grounding_eps = 1e-6;   // ridge added to the grounded Laplacian
    double dt = 1e-3;              // integration step [s]
    double horizon = 10.0;         // [s]
    double slip_blowup = 1.5;      // |s| beyond this flags the case invalid
    double v_ceiling = 1.2;        // recorded voltages clamp to [0, v_ceiling]
};

struct FaultSpec {
    std::size_t fault_bus = 0;
    double depth = 0.2;      // V_f in [0.05, 0.3] pu
    double duration = 0.1;   // t_d in {0.1, 0.2, 0.3} s
    double load_level = 1.0; // in [0.8, 1.2] of base
    double motor_fraction = -1.0;  // uniform override; < 0 keeps per-bus values
    bool dc_analogue = false;      // extra-deep dip class standing in for DC faults

    /// Strict range check used by the dataset generator.
    void validate(const GridTopology& topology) const;
};

struct SimResult {
    bool valid = false;
    const char* invalid_reason = "";
    double dt = 0.0;
    double fault_clear_time = 0.0;
    Tensor trajectories;  // [samples x N x 3], channels (P, Q, V), 1 kHz grid
    std::size_t samples() const { return trajectories.empty() ? 0 : trajectories.extent(0); }
};

/// Deterministic transient simulation over [0, horizon].
SimResult simulate_case(const GridTopology& topology, const TopologyScenario& scenario,
                        const FaultSpec& fault, const SurrogateConstants& constants = {});

/// 0 (stable) iff every load bus shows a sustained recovery above 0.8 pu by
/// the end of the horizon, scanning the trailing samples; else 1.
int label_case(const SimResult& result, const GridTopology& topology);

/// Samples [t_clear, t_clear + t_win] at dt_sample (endpoint inclusive,
/// L = t_win/dt_sample + 1 rows). No interpolation: dt_sample must land on the
/// integration grid.
Tensor window_case(const SimResult& result, double t_clear, double t_win, double dt_sample);

}  // namespace astgl
