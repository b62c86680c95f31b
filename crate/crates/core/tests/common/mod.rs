//! Reference computations that share no code with the library.

#![allow(dead_code)]

/// Determinant by LU factorization with partial pivoting.
pub fn lu_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        det *= m[col][col];
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    det
}

/// Number of eigenvalues of the symmetric `a` below `x`: the count of
/// negative pivots when eliminating `a - xI` without pivoting (the sign
/// changes of its leading principal minors).
pub fn count_below(a: &[Vec<f64>], x: f64) -> usize {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] -= x;
    }
    let mut negatives = 0;
    for col in 0..n {
        let mut p = m[col][col];
        if p == 0.0 {
            p = -f64::EPSILON * (1.0 + x.abs());
            m[col][col] = p;
        }
        if p < 0.0 {
            negatives += 1;
        }
        for r in col + 1..n {
            let f = m[r][col] / p;
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    negatives
}

/// Eigenvalues of a symmetric matrix, ascending, by bisection on the
/// characteristic polynomial's sign-change count.
pub fn bisection_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let radius = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row[i].abs()
                + row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, v)| v.abs())
                    .sum::<f64>()
        })
        .fold(0.0, f64::max);
    (0..n)
        .map(|k| {
            let (mut lo, mut hi) = (-radius - 1.0, radius + 1.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if count_below(a, mid) > k {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= 1e-15 * (1.0 + lo.abs().max(hi.abs())) {
                    break;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

/// Small deterministic generator (SplitMix64) for test inputs.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)`.
    pub fn symmetric_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    pub fn symmetric_matrix(&mut self, n: usize) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let v = self.symmetric_unit();
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }
}

/// Network output by a plain forward pass over nested vectors: weights
/// `w[k][i][j]` map unit `i` of layer `k` to unit `j` of layer `k+1`.
pub fn reference_output(w: &[Vec<Vec<f64>>], x: &[f64], act: impl Fn(f64) -> f64) -> f64 {
    let mut f = x.to_vec();
    for (k, layer) in w.iter().enumerate() {
        let width = layer[0].len();
        let mut g = vec![0.0; width];
        for (i, row) in layer.iter().enumerate() {
            for j in 0..width {
                g[j] += row[j] * f[i];
            }
        }
        f = if k + 1 < w.len() {
            g.into_iter().map(&act).collect()
        } else {
            g
        };
    }
    f[0]
}
