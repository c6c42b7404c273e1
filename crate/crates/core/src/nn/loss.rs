//! Binary cross-entropy on probabilities.

/// `-t ln p - (1 - t) ln(1 - p)`. `p` is expected to be clamped upstream.
pub fn cross_entropy(label: bool, p: f64) -> f64 {
    if label {
        -p.ln()
    } else {
        -(-p).ln_1p()
    }
}

/// Derivative of [`cross_entropy`] with respect to `p`.
pub fn cross_entropy_grad(label: bool, p: f64) -> f64 {
    if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}
