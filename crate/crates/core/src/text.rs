//! Shared helpers for the text artifact formats.

/// 17 significant digits, enough for a bit-exact `f64` round trip.
pub(crate) fn fmt_f64(x: &f64) -> String {
    format!("{x:.16e}")
}
