//! Dense two-phase simplex for small box-constrained LPs:
//! maximize `c.x` subject to `A x <= b` and `lo <= x <= hi`.

const PIVOT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
}

struct Tableau {
    /// `m` rows of `cols + 1` entries; the last entry is the right-hand side.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in &mut self.rows[r] {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    /// Maximizes `obj . z` over the current feasible basis with Bland's rule.
    fn maximize(&mut self, obj: &[f64], allowed: impl Fn(usize) -> bool) {
        let rhs = self.cols;
        loop {
            let entering = (0..self.cols).find(|&j| {
                if !allowed(j) || self.basis.contains(&j) {
                    return false;
                }
                let reduced = obj[j] - self.rows.iter().zip(&self.basis).map(|(row, &b)| obj[b] * row[j]).sum::<f64>();
                reduced > PIVOT_TOL
            });
            let Some(c) = entering else { return };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                if row[c] > PIVOT_TOL {
                    let ratio = row[rhs] / row[c];
                    let better = match leave {
                        None => true,
                        Some((l, best)) => ratio < best - 1e-15 || (ratio <= best + 1e-15 && self.basis[i] < self.basis[l]),
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            // The feasible region is bounded, so some row always limits the step.
            let Some((r, _)) = leave else { return };
            self.pivot(r, c);
        }
    }

    fn value_of(&self, var: usize) -> f64 {
        self.basis
            .iter()
            .position(|&b| b == var)
            .map_or(0.0, |r| self.rows[r][self.cols])
    }
}

/// Solves the LP; `c = None` only checks feasibility.
pub fn solve(c: Option<&[f64]>, a: &[Vec<f64>], b: &[f64], lo: &[f64], hi: &[f64]) -> LpOutcome {
    let n = lo.len();
    // Shift to u = x - lo in [0, hi - lo] and add the upper bounds as rows.
    let mut rows_a: Vec<Vec<f64>> = Vec::with_capacity(a.len() + n);
    let mut rhs: Vec<f64> = Vec::with_capacity(a.len() + n);
    for (row, &bi) in a.iter().zip(b) {
        rows_a.push(row.clone());
        rhs.push(bi - row.iter().zip(lo).map(|(r, l)| r * l).sum::<f64>());
    }
    for j in 0..n {
        let mut row = vec![0.0; n];
        row[j] = 1.0;
        rows_a.push(row);
        rhs.push(hi[j] - lo[j]);
    }
    let m = rows_a.len();
    let negative: Vec<usize> = (0..m).filter(|&i| rhs[i] < 0.0).collect();
    let art0 = n + m;
    let cols = n + m + negative.len();
    let mut rows = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = vec![0.0; cols + 1];
        let sign = if rhs[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            row[j] = sign * rows_a[i][j];
        }
        row[n + i] = sign;
        row[cols] = sign * rhs[i];
        if let Some(k) = negative.iter().position(|&r| r == i) {
            row[art0 + k] = 1.0;
            basis.push(art0 + k);
        } else {
            basis.push(n + i);
        }
        rows.push(row);
    }
    let mut t = Tableau { rows, basis, cols };
    if !negative.is_empty() {
        let mut phase1 = vec![0.0; cols];
        for v in &mut phase1[art0..] {
            *v = -1.0;
        }
        t.maximize(&phase1, |_| true);
        let scale = 1.0 + rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let infeasibility: f64 = (art0..cols).map(|j| t.value_of(j)).sum();
        if infeasibility > 1e-9 * scale {
            return LpOutcome::Infeasible;
        }
        // Drive zero-valued artificials out of the basis where possible.
        for r in 0..m {
            if t.basis[r] >= art0 {
                if let Some(c) = (0..art0).find(|&j| t.rows[r][j].abs() > PIVOT_TOL && !t.basis.contains(&j)) {
                    t.pivot(r, c);
                }
            }
        }
    }
    let Some(c) = c else {
        return LpOutcome::Optimal {
            x: (0..n).map(|j| (lo[j] + t.value_of(j)).clamp(lo[j], hi[j])).collect(),
            value: 0.0,
        };
    };
    let mut obj = vec![0.0; cols];
    obj[..n].copy_from_slice(c);
    t.maximize(&obj, |j| j < art0);
    let x: Vec<f64> = (0..n).map(|j| (lo[j] + t.value_of(j)).clamp(lo[j], hi[j])).collect();
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    LpOutcome::Optimal { x, value }
}
