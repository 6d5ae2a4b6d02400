use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope_s_per_email: f64,
    pub intercept_s: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of y on x. `None` with fewer than two distinct x.
pub fn ols(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let ss_res: f64 = points.iter().map(|p| (p.1 - (intercept + slope * p.0)).powi(2)).sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Some(LinearFit { slope_s_per_email: slope, intercept_s: intercept, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_line() {
        let pts: Vec<_> = [100.0, 250.0, 1000.0].iter().map(|&x| (x, 0.5 + x / 14.0)).collect();
        let f = ols(&pts).unwrap();
        assert!((f.slope_s_per_email - 1.0 / 14.0).abs() < 1e-12);
        assert!((f.intercept_s - 0.5).abs() < 1e-9);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(ols(&[(5.0, 1.0)]), None);
        assert_eq!(ols(&[(5.0, 1.0), (5.0, 2.0)]), None);
        assert_eq!(ols(&[]), None);
    }

    #[test]
    fn known_regression() {
        // hand-computed: x = 1..4, y = 2, 4, 5, 8 → slope 1.9, intercept 0, r² = 0.9627...
        let f = ols(&[(1.0, 2.0), (2.0, 4.0), (3.0, 5.0), (4.0, 8.0)]).unwrap();
        assert!((f.slope_s_per_email - 1.9).abs() < 1e-12);
        assert!(f.intercept_s.abs() < 1e-12);
        assert!((f.r_squared - 18.05 / 18.75).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn r_squared_in_unit_interval(ys in proptest::collection::vec(-1e3f64..1e3, 3..20)) {
            let pts: Vec<_> = ys.iter().enumerate().map(|(i, y)| (i as f64, *y)).collect();
            let f = ols(&pts).unwrap();
            prop_assert!((0.0..=1.0).contains(&f.r_squared));
        }
    }
}
