#include "astgl/simulator.hpp"

#include <algorithm>
#include <cmath>

#include "astgl/common.hpp"

namespace astgl {

void FaultSpec::validate(const GridTopology& topology) const {
    if (fault_bus >= topology.n_buses()) {
        throw DataError(concat("fault bus ", fault_bus, " does not exist"));
    }
    if (topology.buses[fault_bus].kind == BusKind::generator) {
        throw DataError(concat("fault bus ", fault_bus, " is a generator bus"));
    }
    if (depth < 0.05 || depth > 0.3) {
        throw DataError(concat("fault depth ", depth, " outside [0.05, 0.3] pu"));
    }
    const bool known_duration =
        std::fabs(duration - 0.1) < 1e-9 || std::fabs(duration - 0.2) < 1e-9 ||
        std::fabs(duration - 0.3) < 1e-9;
    if (!known_duration) {
        throw DataError(concat("fault duration ", duration, " not in {0.1, 0.2, 0.3} s"));
    }
    if (load_level < 0.8 || load_level > 1.2) {
        throw DataError(concat("load level ", load_level, " outside [0.8, 1.2]"));
    }
    if (motor_fraction >= 0.0) {
        const bool known = std::fabs(motor_fraction - 0.6) < 1e-9 ||
                           std::fabs(motor_fraction - 0.75) < 1e-9 ||
                           std::fabs(motor_fraction - 0.9) < 1e-9 ||
                           std::fabs(motor_fraction - 0.95) < 1e-9;
        if (!known) {
            throw DataError(concat("motor fraction ", motor_fraction,
                                   " not in {0.6, 0.75, 0.9, 0.95}"));
        }
    }
}

namespace {

// Reduced network: rows/columns over non-generator buses, generators grounded.
struct NetworkModel {
    SensitivityMatrix s;               // grounded, per (topology, scenario)
    std::vector<std::size_t> load_rows;
    std::vector<double> motor;         // per row, 0 for tie buses
    std::size_t m = 0;
};

NetworkModel build_network(const GridTopology& topo, const TopologyScenario& scenario,
                           const SurrogateConstants& c, double motor_override) {
    NetworkModel net;
    net.s = grounded_sensitivity(topo, scenario.tripped, c.grounding_eps);
    net.m = net.s.size();
    net.motor.assign(net.m, 0.0);
    for (std::size_t r = 0; r < net.m; ++r) {
        const Bus& b = topo.buses[net.s.row_bus[r]];
        if (b.kind == BusKind::load) {
            net.load_rows.push_back(r);
            net.motor[r] = motor_override >= 0.0 ? motor_override : b.motor_fraction;
        }
    }
    return net;
}

struct Dynamics {
    const NetworkModel& net;
    const SurrogateConstants& c;
    double load_level;
    int fault_row;  // -1 when inactive
    double fault_depth;

    // V per network row from the slip state. Returns the pre-fault voltage at
    // the fault row through `natural_fault_v` for the depression term.
    void voltages(const std::vector<double>& slip, bool fault_active,
                  std::vector<double>& v_row) const {
        const std::size_t m = net.m;
        for (std::size_t r = 0; r < m; ++r) {
            double drop = 0.0;
            for (std::size_t j : net.load_rows) {
                const double q = c.reactive_gain * net.motor[j] * slip[j] * load_level;
                drop += net.s.normalized[r * m + j] * q;
            }
            v_row[r] = 1.0 - drop;
        }
        if (fault_active && fault_row >= 0) {
            const std::size_t f = static_cast<std::size_t>(fault_row);
            const double dep = std::max(0.0, v_row[f] - fault_depth);
            if (dep > 0.0) {
                const double mff = net.s.raw[f * m + f];
                for (std::size_t r = 0; r < m; ++r) {
                    v_row[r] -= (net.s.raw[r * m + f] / mff) * dep;
                }
            }
        }
        for (std::size_t r = 0; r < m; ++r) {
            v_row[r] = std::clamp(v_row[r], 0.0, c.v_ceiling);
        }
    }

    double electrical_torque(double v, double s) const {
        return c.torque_gain * v * v * s /
               (s * s + c.slip_critical * c.slip_critical);
    }

    void slopes(const std::vector<double>& slip, bool fault_active, std::vector<double>& v_row,
                std::vector<double>& ds) const {
        voltages(slip, fault_active, v_row);
        const double t_m = c.mech_torque * load_level;
        std::fill(ds.begin(), ds.end(), 0.0);
        for (std::size_t j : net.load_rows) {
            double d = (t_m - electrical_torque(v_row[j], slip[j])) / (2.0 * c.inertia);
            // Stalled rotor saturates at s = 1; slip cannot go negative.
            if (slip[j] >= 1.0 && d > 0.0) d = 0.0;
            if (slip[j] <= 0.0 && d < 0.0) d = 0.0;
            ds[j] = d;
        }
    }
};

// Smallest slip solving T_e(v, s) = T_m; quiet NaN when the motor is overloaded.
double equilibrium_slip(double v, double t_m, const SurrogateConstants& c) {
    const double kv2 = c.torque_gain * v * v;
    const double sc2 = c.slip_critical * c.slip_critical;
    const double disc = kv2 * kv2 - 4.0 * t_m * t_m * sc2;
    if (disc < 0.0) return std::nan("");
    return (kv2 - std::sqrt(disc)) / (2.0 * t_m);
}

bool solve_equilibrium(const Dynamics& dyn, std::vector<double>& slip) {
    const std::size_t m = dyn.net.m;
    std::vector<double> v_row(m);
    std::fill(slip.begin(), slip.end(), 0.0);
    for (std::size_t j : dyn.net.load_rows) slip[j] = 0.02;
    const double t_m = dyn.c.mech_torque * dyn.load_level;
    for (int iter = 0; iter < 200; ++iter) {
        dyn.voltages(slip, /*fault_active=*/false, v_row);
        double delta = 0.0;
        for (std::size_t j : dyn.net.load_rows) {
            const double next = equilibrium_slip(v_row[j], t_m, dyn.c);
            if (!std::isfinite(next)) return false;
            delta = std::max(delta, std::fabs(next - slip[j]));
            slip[j] = next;
        }
        if (delta < 1e-13) return true;
    }
    return true;  // fixed point is a contraction here; late iterates are converged enough
}

}  // namespace

SimResult simulate_case(const GridTopology& topology, const TopologyScenario& scenario,
                        const FaultSpec& fault, const SurrogateConstants& constants) {
    if (fault.fault_bus >= topology.n_buses()) {
        throw DataError(concat("simulate_case: fault bus ", fault.fault_bus, " does not exist"));
    }
    if (topology.buses[fault.fault_bus].kind == BusKind::generator) {
        throw DataError("simulate_case: generator buses are stiff sources and cannot be faulted");
    }
    if (fault.duration < 0 || fault.duration > constants.horizon) {
        throw DataError(concat("simulate_case: fault duration ", fault.duration,
                               " outside [0, horizon]"));
    }

    const NetworkModel net =
        build_network(topology, scenario, constants, fault.motor_fraction);
    Dynamics dyn{net, constants, fault.load_level, net.s.row_of[fault.fault_bus], fault.depth};

    SimResult result;
    result.dt = constants.dt;
    result.fault_clear_time = fault.duration;

    const std::size_t n = topology.n_buses();
    const std::size_t steps = static_cast<std::size_t>(std::llround(constants.horizon / constants.dt));
    const std::size_t fault_steps =
        static_cast<std::size_t>(std::llround(fault.duration / constants.dt));
    result.trajectories = Tensor({steps + 1, n, 3});

    const std::size_t m = net.m;
    std::vector<double> slip(m, 0.0);
    if (!solve_equilibrium(dyn, slip)) {
        result.invalid_reason = "no pre-fault equilibrium (overloaded motors)";
        return result;
    }

    std::vector<double> v_row(m), k1(m), k2(m), k3(m), k4(m), tmp(m);

    auto record = [&](std::size_t sample, bool fault_active) {
        dyn.voltages(slip, fault_active, v_row);
        for (std::size_t b = 0; b < n; ++b) {
            const int r = net.s.row_of[b];
            double v = 1.0, p = 0.0, q = 0.0;
            if (r >= 0) {
                v = v_row[static_cast<std::size_t>(r)];
                const double mf = net.motor[static_cast<std::size_t>(r)];
                if (mf > 0.0) {
                    const double s = slip[static_cast<std::size_t>(r)];
                    p = mf * dyn.electrical_torque(v, s) * (1.0 - s) * fault.load_level;
                    q = mf * constants.reactive_gain * s * fault.load_level;
                }
            }
            result.trajectories.at(sample, b, 0) = p;
            result.trajectories.at(sample, b, 1) = q;
            result.trajectories.at(sample, b, 2) = v;
        }
    };

    const double dt = constants.dt;
    record(0, fault_steps > 0);
    for (std::size_t step = 0; step < steps; ++step) {
        const bool fault_active = step < fault_steps;
        dyn.slopes(slip, fault_active, v_row, k1);
        for (std::size_t i = 0; i < m; ++i) tmp[i] = slip[i] + 0.5 * dt * k1[i];
        dyn.slopes(tmp, fault_active, v_row, k2);
        for (std::size_t i = 0; i < m; ++i) tmp[i] = slip[i] + 0.5 * dt * k2[i];
        dyn.slopes(tmp, fault_active, v_row, k3);
        for (std::size_t i = 0; i < m; ++i) tmp[i] = slip[i] + dt * k3[i];
        dyn.slopes(tmp, fault_active, v_row, k4);
        for (std::size_t i = 0; i < m; ++i) {
            slip[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            slip[i] = std::clamp(slip[i], 0.0, 1.0);
            if (!std::isfinite(slip[i]) || std::fabs(slip[i]) > constants.slip_blowup) {
                result.invalid_reason = "slip blow-up";
                return result;
            }
        }
        record(step + 1, (step + 1) < fault_steps);
    }
    result.valid = true;
    return result;
}

int label_case(const SimResult& result, const GridTopology& topology) {
    if (!result.valid) throw DataError("label_case: invalid simulation result");
    const double horizon = result.dt * static_cast<double>(result.samples() - 1);
    if (horizon < 10.0 - 1e-9) {
        throw DataError(concat("label_case: horizon ", horizon, " s is shorter than 10 s"));
    }
    for (std::size_t b = 0; b < topology.n_buses(); ++b) {
        if (topology.buses[b].kind != BusKind::load) continue;
        // Sustained recovery: the trailing run of samples at or above 0.8 pu
        // must be non-empty for every load bus.
        std::size_t last = result.samples() - 1;
        if (result.trajectories.at(last, b, 2) < 0.8) return 1;
    }
    return 0;
}

Tensor window_case(const SimResult& result, double t_clear, double t_win, double dt_sample) {
    if (!result.valid) throw DataError("window_case: invalid simulation result");
    const double horizon = result.dt * static_cast<double>(result.samples() - 1);
    if (t_clear + t_win > horizon + 1e-9) {
        throw DataError(concat("window_case: window [", t_clear, ", ", t_clear + t_win,
                               "] exceeds horizon ", horizon));
    }
    const double stride_f = dt_sample / result.dt;
    const double ratio = t_win / dt_sample;
    if (std::fabs(stride_f - std::llround(stride_f)) > 1e-9 ||
        std::fabs(ratio - std::llround(ratio)) > 1e-9) {
        throw DataError("window_case: t_win and dt_sample must align with the integration grid");
    }
    const std::size_t stride = static_cast<std::size_t>(std::llround(stride_f));
    const std::size_t rows = static_cast<std::size_t>(std::llround(ratio)) + 1;
    const std::size_t start = static_cast<std::size_t>(std::llround(t_clear / result.dt));
    const std::size_t n = result.trajectories.extent(1);

    Tensor out({rows, n, 3});
    for (std::size_t k = 0; k < rows; ++k) {
        const std::size_t src = start + k * stride;
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t ch = 0; ch < 3; ++ch) {
                out.at(k, b, ch) = result.trajectories.at(src, b, ch);
            }
        }
    }
    return out;
}

}  // namespace astgl
