//! Straight-line Adafactor reference written directly from the published
//! recipe (row/column *sums*, β̂₂ₜ = 1 − t^−0.8, ε₁ = 1e−30, d = 1), no
//! momentum, explicit step size.

pub fn scalar_trajectory(x0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let mut x = x0;
    let mut v = 0.0;
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as f64;
        let beta2 = 1.0 - t.powf(-0.8);
        v = beta2 * v + (1.0 - beta2) * (g * g + 1e-30);
        let u = g / v.sqrt();
        let rms = u.abs();
        let u = u / f64::max(1.0, rms / 1.0);
        x -= lr * u;
        out.push(x);
    }
    out
}

/// Matrix trajectory with factored accumulators; also returns the final
/// (R, C) sums so callers can reconstruct V̂.
pub fn matrix_trajectory(
    x0: &[Vec<f64>],
    grads: &[Vec<Vec<f64>>],
    lr: f64,
) -> (Vec<Vec<Vec<f64>>>, Vec<f64>, Vec<f64>) {
    let n = x0.len();
    let m = x0[0].len();
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    let mut c = vec![0.0; m];
    let mut traj = Vec::new();
    for (step, g) in grads.iter().enumerate() {
        let t = (step + 1) as f64;
        let beta2 = 1.0 - t.powf(-0.8);
        for i in 0..n {
            let row_sum: f64 = (0..m).map(|j| g[i][j] * g[i][j] + 1e-30).sum();
            r[i] = beta2 * r[i] + (1.0 - beta2) * row_sum;
        }
        for j in 0..m {
            let col_sum: f64 = (0..n).map(|i| g[i][j] * g[i][j] + 1e-30).sum();
            c[j] = beta2 * c[j] + (1.0 - beta2) * col_sum;
        }
        let total: f64 = r.iter().sum();
        let mut u = vec![vec![0.0; m]; n];
        let mut ss = 0.0;
        for i in 0..n {
            for j in 0..m {
                let v = r[i] * c[j] / total;
                u[i][j] = g[i][j] / v.sqrt();
                ss += u[i][j] * u[i][j];
            }
        }
        let rms = (ss / (n * m) as f64).sqrt();
        let denom = f64::max(1.0, rms);
        for i in 0..n {
            for j in 0..m {
                x[i][j] -= lr * u[i][j] / denom;
            }
        }
        traj.push(x.clone());
    }
    (traj, r, c)
}

/// Unfactored EMA of G² (the quantity the factored estimate approximates).
pub fn dense_second_moment(grads: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = grads[0].len();
    let m = grads[0][0].len();
    let mut v = vec![vec![0.0; m]; n];
    for (step, g) in grads.iter().enumerate() {
        let t = (step + 1) as f64;
        let beta2 = 1.0 - t.powf(-0.8);
        for i in 0..n {
            for j in 0..m {
                v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * (g[i][j] * g[i][j] + 1e-30);
            }
        }
    }
    v
}
