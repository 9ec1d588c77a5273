//! Reference integrator for the tank: classical RK4 on
//! dh/dt = (q_in - Cv*sqrt(h)) / A with level clamped to [0, h_max].

pub fn derivative(h: f64, q_in: f64, area: f64, cv: f64) -> f64 {
    (q_in - cv * h.max(0.0).sqrt()) / area
}

/// Level after `seconds` from `h0` with constant inflow, integrated at `step`.
pub fn rk4_level(h0: f64, q_in: f64, area: f64, cv: f64, h_max: f64, seconds: f64, step: f64) -> f64 {
    let n = (seconds / step).round() as u64;
    let mut h = h0;
    for _ in 0..n {
        let k1 = derivative(h, q_in, area, cv);
        let k2 = derivative(h + 0.5 * step * k1, q_in, area, cv);
        let k3 = derivative(h + 0.5 * step * k2, q_in, area, cv);
        let k4 = derivative(h + step * k3, q_in, area, cv);
        h = (h + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).clamp(0.0, h_max);
    }
    h
}

/// Equilibrium where inflow equals outflow.
pub fn fixed_point(q_in: f64, cv: f64) -> f64 {
    (q_in / cv).powi(2)
}
