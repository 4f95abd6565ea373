//! Small sample statistics shared by the generators and their checks.

/// Kendall's τ-b in O(n log n) (Knight's algorithm). Returns `None` for
/// fewer than two points or when either variable is constant.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "kendall_tau needs paired samples");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = (n * (n - 1) / 2) as f64;
    let mut n1 = 0u64; // ties in x
    let mut n3 = 0u64; // joint ties
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in pairs.windows(2) {
        if w[0].0 == w[1].0 {
            run_x += 1;
            if w[0].1 == w[1].1 {
                run_xy += 1;
            } else {
                n3 += run_xy * (run_xy - 1) / 2;
                run_xy = 1;
            }
        } else {
            n1 += run_x * (run_x - 1) / 2;
            n3 += run_xy * (run_xy - 1) / 2;
            run_x = 1;
            run_xy = 1;
        }
    }
    n1 += run_x * (run_x - 1) / 2;
    n3 += run_xy * (run_xy - 1) / 2;

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut n2 = 0u64; // ties in y
    let mut run = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            n2 += run * (run - 1) / 2;
            run = 1;
        }
    }
    n2 += run * (run - 1) / 2;

    let (n1, n2, n3) = (n1 as f64, n2 as f64, n3 as f64);
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((n0 - n1 - n2 + n3 - 2.0 * swaps as f64) / denom)
}

// Sorts `v` ascending and returns the number of inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kolmogorov–Smirnov test of a sample against Uniform(0, 1).
/// Returns `(D, p-value)`; the p-value uses the asymptotic Kolmogorov law
/// with Stephens' small-sample correction.
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    (d, kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d))
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Lag-1 sample autocorrelation.
pub fn lag1_autocorrelation(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}
