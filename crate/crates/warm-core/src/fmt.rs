//! Fixed-precision float text shared by every file format.

/// 17 significant digits, enough to round-trip any `f64`.
pub fn f17(x: f64) -> String {
    if x == 0.0 {
        // Keep the sign of negative zero out of the artifacts.
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

pub fn f17_array(xs: &[f64]) -> String {
    let mut s = String::with_capacity(xs.len() * 24 + 2);
    s.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&f17(*x));
    }
    s.push(']');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 6.02e23, f64::MIN_POSITIVE, 0.0, -0.0] {
            let back: f64 = serde_json::from_str(&f17(x)).unwrap();
            assert_eq!(back, if x == 0.0 { 0.0 } else { x });
        }
    }

    #[test]
    fn seventeen_significant_digits() {
        let s = f17(1.0 / 3.0);
        let mantissa = s.split('e').next().unwrap().replace(['.', '-'], "");
        assert_eq!(mantissa.len(), 17);
    }
}
