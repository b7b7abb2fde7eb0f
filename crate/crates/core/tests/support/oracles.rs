//! Independent reference computations for metric and signal checks.

/// Brute force over a full distance matrix and explicit member lists.
pub fn silhouette_oracle(x: &[Vec<f64>], y: &[usize]) -> f64 {
    let n = x.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).collect())
        .collect();
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort();
    classes.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && y[j] == y[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist[i][j]).sum::<f64>() / own.len() as f64;
        let b = classes
            .iter()
            .filter(|&&c| c != y[i])
            .map(|&c| {
                let m: Vec<f64> = (0..n).filter(|&j| y[j] == c).map(|j| dist[i][j]).collect();
                m.iter().sum::<f64>() / m.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Γ(dof/2) by the half-integer recursion.
fn gamma_half(m: u32) -> f64 {
    let (mut g, mut z) = if m.is_multiple_of(2) { (1.0, 1.0) } else { (std::f64::consts::PI.sqrt(), 0.5) };
    while z < m as f64 / 2.0 - 1e-9 {
        g *= z;
        z += 1.0;
    }
    g
}

/// Two-tailed p by Simpson integration of the t density over [0, |t|].
pub fn p_simpson(t: f64, dof: u32) -> f64 {
    let v = dof as f64;
    let c = gamma_half(dof + 1) / ((v * std::f64::consts::PI).sqrt() * gamma_half(dof));
    let f = |x: f64| c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0);
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}


/// Power of a Hann-windowed direct DFT, bins `0..=n/2`.
pub fn hann_dft_power(x: &[f64]) -> Vec<f64> {
    use std::f64::consts::PI;
    let n = x.len();
    let w: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| v * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()))
        .collect();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in w.iter().enumerate() {
                let a = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .collect()
}
