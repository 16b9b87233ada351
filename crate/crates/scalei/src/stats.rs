//! Small statistical utilities: quantiles, Pearson correlation, a
//! bias-corrected distance correlation, and golden-section minimization.

/// Empirical quantile by the nearest-rank rule: the smallest value `v` such
/// that at least `ceil(q * len)` observations are `<= v`. `q` is clamped to
/// `(0, 1]`. Returns `None` for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = q.clamp(f64::MIN_POSITIVE, 1.0);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.saturating_sub(1).min(sorted.len() - 1)])
}

/// Pearson correlation coefficient. Returns `None` when either series is
/// numerically constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    let n = x.len() as f64;
    if x.is_empty() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= f64::MIN_POSITIVE * n || syy <= f64::MIN_POSITIVE * n {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Precomputed per-series state for repeated distance-correlation
/// evaluations against a fixed second series.
///
/// Centering follows the bias-corrected (U-statistic) convention, so the
/// squared statistic is approximately zero-mean under independence instead of
/// carrying an `O(1/k)` positive bias. Values can therefore go slightly
/// negative; [`dcor`] clamps at zero before taking the square root.
pub struct DcorSide {
    values: Vec<f64>,
    row_sums: Vec<f64>,
    grand_sum: f64,
    dvar: f64,
}

impl DcorSide {
    /// Requires at least 4 points (the U-centering denominators vanish
    /// otherwise).
    pub fn new(values: &[f64]) -> DcorSide {
        assert!(values.len() >= 4, "distance correlation needs >= 4 points");
        let n = values.len();
        let mut row_sums = vec![0.0; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (values[i] - values[j]).abs();
                row_sums[i] += d;
                row_sums[j] += d;
            }
        }
        let grand_sum: f64 = row_sums.iter().sum();
        let mut side = DcorSide {
            values: values.to_vec(),
            row_sums,
            grand_sum,
            dvar: 0.0,
        };
        side.dvar = inner_product(&side, &side);
        side
    }
}

/// U-centered inner product Σ_{i≠j} Ã_ij B̃_ij / (n (n-3)).
fn inner_product(a: &DcorSide, b: &DcorSide) -> f64 {
    let n = a.values.len();
    debug_assert_eq!(n, b.values.len());
    let nf = n as f64;
    let ca = 1.0 / (nf - 2.0);
    let cg = 1.0 / ((nf - 1.0) * (nf - 2.0));
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = (a.values[i] - a.values[j]).abs();
            let db = (b.values[i] - b.values[j]).abs();
            let ta = da - ca * a.row_sums[i] - ca * a.row_sums[j] + cg * a.grand_sum;
            let tb = db - ca * b.row_sums[i] - ca * b.row_sums[j] + cg * b.grand_sum;
            acc += 2.0 * ta * tb;
        }
    }
    acc / (nf * (nf - 3.0))
}

/// Bias-corrected squared distance correlation of `x` against a precomputed
/// side. Returns 0 when either distance variance degenerates.
pub fn dcor2_against(x: &[f64], fixed: &DcorSide) -> f64 {
    let xs = DcorSide::new(x);
    let denom = xs.dvar * fixed.dvar;
    if denom <= f64::MIN_POSITIVE {
        return 0.0;
    }
    inner_product(&xs, fixed) / denom.sqrt()
}

/// Bias-corrected distance correlation, clamped into `[0, 1]`.
pub fn dcor(x: &[f64], y: &[f64]) -> f64 {
    let side = DcorSide::new(y);
    dcor2_against(x, &side).max(0.0).sqrt().min(1.0)
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
/// Returns `(argmin, min)` after `iters` interval reductions.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn quantile_nearest_rank() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.5), Some(2.0));
        assert_eq!(quantile(&v, 1.0), Some(4.0));
        assert_eq!(quantile(&v, 0.25), Some(1.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn quantile_ignores_small_contamination() {
        // 1000 zeros and 5 large outliers: the 0.99 quantile stays at zero.
        let mut v = vec![0.0; 1000];
        v.extend(std::iter::repeat(10.0).take(5));
        assert_eq!(quantile(&v, 0.99), Some(0.0));
    }

    #[test]
    fn pearson_exact_on_linear() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        let constant = vec![1.0; 50];
        assert!(pearson(&x, &constant).is_none());
    }

    #[test]
    fn dcor_separates_dependence_from_independence() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 800;
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // Nonlinear, uncorrelated dependence: y = x^2 + small noise.
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, e)| a * a + 0.1 * e).collect();
        assert!(dcor(&x, &y) > 0.3, "dependent pair scored too low");
        assert!(dcor(&x, &noise) < 0.05, "independent pair scored too high");
    }

    #[test]
    fn dcor_cache_matches_direct() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let side = DcorSide::new(&y);
        let a = dcor2_against(&x, &side);
        let b = {
            let side2 = DcorSide::new(&y);
            dcor2_against(&x, &side2)
        };
        assert_eq!(a, b);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, fx) = golden_section(|t| (t - 2.0) * (t - 2.0) + 1.0, -10.0, 10.0, 80);
        // Near the minimum the function is flat to machine precision for
        // |x - 2| ≲ 1e-8, which bounds the attainable argmin accuracy.
        assert!((x - 2.0).abs() < 1e-6);
        assert!((fx - 1.0).abs() < 1e-12);
    }
}
