//! The Rosenbrock valley `f(x, y) = (a - x)² + b (y - x²)²` with `a = 1`, `b = 100`.

pub const A: f64 = 1.0;
pub const B: f64 = 100.0;

/// Value and analytic gradient.
pub fn rosenbrock_eval(x: f64, y: f64) -> (f64, [f64; 2]) {
    let dx = A - x;
    let r = y - x * x;
    let value = dx * dx + B * r * r;
    let grad = [-2.0 * dx - 4.0 * B * x * r, 2.0 * B * r];
    (value, grad)
}
