//! Deterministic quadrature used to check normalization of densities.

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 0 { 0.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre over `[a, b]` with `panels` equal panels between
/// consecutive `breaks` (kinks of the integrand should be listed there).
pub fn integrate_1d(f: impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], panels: usize, order: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(order);
    let mut edges = vec![a];
    edges.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    edges.push(b);
    edges.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for seg in edges.windows(2) {
        let h = (seg[1] - seg[0]) / panels as f64;
        for p in 0..panels {
            let lo = seg[0] + p as f64 * h;
            let mid = lo + 0.5 * h;
            for (x, w) in nodes.iter().zip(&weights) {
                total += 0.5 * h * w * f(mid + 0.5 * h * x);
            }
        }
    }
    total
}

/// Trapezoid rule on a tensor grid with `m` points per axis over the box.
pub fn trapezoid_box(f: impl Fn(&[f64]) -> f64, lower: &[f64], upper: &[f64], m: usize) -> f64 {
    let d = lower.len();
    let h: Vec<f64> = (0..d).map(|j| (upper[j] - lower[j]) / (m - 1) as f64).collect();
    let cell: f64 = h.iter().product();
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for j in 0..d {
            x[j] = lower[j] + idx[j] as f64 * h[j];
            if idx[j] == 0 || idx[j] == m - 1 {
                w *= 0.5;
            }
        }
        total += w * f(&x);
        let mut j = 0;
        loop {
            if j == d {
                return total * cell;
            }
            idx[j] += 1;
            if idx[j] < m {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}
