use crate::error::{Error, Result};

/// Root of a non-decreasing function on `[a, b]` with `f(a) <= 0 <= f(b)`,
/// by the Illinois variant of regula falsi. Falls back to bisection while
/// either end value is infinite.
pub fn illinois<F>(mut f: F, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64, xtol: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if !(fa < 0.0 && fb > 0.0) {
        return Err(Error::ConvergenceFailure {
            what: format!("root not bracketed: f({a})={fa}, f({b})={fb}"),
        });
    }
    let mut side = 0i8;
    for _ in 0..400 {
        let x = if fa.is_finite() && fb.is_finite() {
            let x = (a * fb - b * fa) / (fb - fa);
            if x > a && x < b {
                x
            } else {
                0.5 * (a + b)
            }
        } else {
            0.5 * (a + b)
        };
        if b - a <= xtol * x.abs().max(1.0) {
            return Ok(x);
        }
        let fx = f(x)?;
        if fx.is_nan() {
            return Err(Error::ConvergenceFailure {
                what: format!("NaN at x={x}"),
            });
        }
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            a = x;
            fa = fx;
            if side == -1 && fb.is_finite() {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = x;
            fb = fx;
            if side == 1 && fa.is_finite() {
                fa *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::ConvergenceFailure {
        what: "root iteration limit".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let f = |x: f64| Ok(x * x * x - 2.0);
        let r = illinois(f, 0.0, 2.0, -2.0, 6.0, 1e-14).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn infinite_end() {
        let f = |x: f64| Ok(if x < 1.0 { f64::NEG_INFINITY } else { x - 1.5 });
        let r = illinois(f, 0.0, 4.0, f64::NEG_INFINITY, 2.5, 1e-13).unwrap();
        assert!((r - 1.5).abs() < 1e-11);
    }

    #[test]
    fn unbracketed() {
        assert!(illinois(Ok, 1.0, 2.0, 1.0, 2.0, 1e-12).is_err());
    }
}
