//! Fixed-format JSON writing helpers shared by the manifest and checkpoint writers.

use std::fmt::Write;

/// Formats a finite f64 with 17 significant digits in scientific notation.
///
/// Seventeen significant digits round-trip every f64 exactly, and the fixed
/// width keeps written files byte-stable.
pub(crate) fn f64_17(x: f64) -> String {
    debug_assert!(x.is_finite());
    format!("{x:.16e}")
}

pub(crate) fn push_f64_array(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&f64_17(*x));
    }
    out.push(']');
}

pub(crate) fn push_json_str(out: &mut String, s: &str) {
    // serde_json never fails on a plain &str.
    let quoted = serde_json::to_string(s).expect("string serialization");
    out.push_str(&quoted);
}

pub(crate) fn push_key(out: &mut String, key: &str) {
    let _ = write!(out, "\"{key}\":");
}
