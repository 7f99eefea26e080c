//! Cone arithmetic for the product of a nonnegative orthant and
//! second-order cones, including Nesterov-Todd scalings.

/// Layout of the slack cone: the first `nonneg` coordinates are the orthant,
/// followed by one block per second-order cone of the recorded dimension.
#[derive(Clone, Debug)]
pub(crate) struct ConeLayout {
    pub nonneg: usize,
    pub socs: Vec<usize>,
}

impl ConeLayout {
    pub fn total_dim(&self) -> usize {
        self.nonneg + self.socs.iter().sum::<usize>()
    }

    /// Barrier degree: one per orthant coordinate, one per cone.
    pub fn degree(&self) -> usize {
        self.nonneg + self.socs.len()
    }

    pub fn soc_ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut start = self.nonneg;
        self.socs.iter().map(move |&d| {
            let r = (start, start + d);
            start += d;
            r
        })
    }

    /// The cone identity element e.
    pub fn identity(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.total_dim()];
        for v in e[..self.nonneg].iter_mut() {
            *v = 1.0;
        }
        for (lo, _) in self.soc_ranges() {
            e[lo] = 1.0;
        }
        e
    }

    /// Smallest cone eigenvalue of `v`: min(v_i) on the orthant and
    /// v_0 - ||v_1|| per second-order cone.
    pub fn min_eig(&self, v: &[f64]) -> f64 {
        let mut m = f64::INFINITY;
        for &vi in &v[..self.nonneg] {
            m = m.min(vi);
        }
        for (lo, hi) in self.soc_ranges() {
            let n1 = norm(&v[lo + 1..hi]);
            m = m.min(v[lo] - n1);
        }
        m
    }

    /// Jordan product u o v.
    pub fn jordan(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        for i in 0..self.nonneg {
            out[i] = u[i] * v[i];
        }
        for (lo, hi) in self.soc_ranges() {
            let dot: f64 = (lo..hi).map(|i| u[i] * v[i]).sum();
            for i in lo + 1..hi {
                out[i] = u[lo] * v[i] + v[lo] * u[i];
            }
            out[lo] = dot;
        }
    }

    /// Solves lambda o x = d for x (lambda strictly interior).
    pub fn jordan_div(&self, lambda: &[f64], d: &[f64], out: &mut [f64]) {
        for i in 0..self.nonneg {
            out[i] = d[i] / lambda[i];
        }
        for (lo, hi) in self.soc_ranges() {
            let l0 = lambda[lo];
            let l1 = &lambda[lo + 1..hi];
            let det = l0 * l0 - l1.iter().map(|v| v * v).sum::<f64>();
            let cross: f64 = l1.iter().zip(&d[lo + 1..hi]).map(|(a, b)| a * b).sum();
            let x0 = (l0 * d[lo] - cross) / det;
            for (k, i) in (lo + 1..hi).enumerate() {
                out[i] = (d[i] - x0 * l1[k]) / l0;
            }
            out[lo] = x0;
        }
    }

    /// Largest alpha in [0, cap] with point + alpha * dir still in the cone;
    /// `point` must be strictly interior.
    pub fn max_step(&self, point: &[f64], dir: &[f64], cap: f64) -> f64 {
        let mut alpha = cap;
        for i in 0..self.nonneg {
            if dir[i] < 0.0 {
                alpha = alpha.min(-point[i] / dir[i]);
            }
        }
        for (lo, hi) in self.soc_ranges() {
            let p0 = point[lo];
            let d0 = dir[lo];
            let p1 = &point[lo + 1..hi];
            let d1 = &dir[lo + 1..hi];
            let a = d0 * d0 - d1.iter().map(|v| v * v).sum::<f64>();
            let b = 2.0 * (p0 * d0 - p1.iter().zip(d1).map(|(x, y)| x * y).sum::<f64>());
            let c = (p0 * p0 - p1.iter().map(|v| v * v).sum::<f64>()).max(0.0);
            if let Some(r) = smallest_positive_root(a, b, c) {
                alpha = alpha.min(r);
            }
        }
        alpha.max(0.0)
    }
}

/// Smallest positive root of a*t^2 + b*t + c = 0 with c >= 0, if any.
fn smallest_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a.abs() < 1e-300 {
        if b < 0.0 {
            return Some(-c / b);
        }
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let (mut r1, mut r2) = (q / a, if q != 0.0 { c / q } else { 0.0 });
    if r1 > r2 {
        std::mem::swap(&mut r1, &mut r2);
    }
    if r1 > 0.0 {
        Some(r1)
    } else if r2 > 0.0 {
        Some(r2)
    } else {
        None
    }
}

/// Nesterov-Todd scaling W with W z = W^{-1} s = lambda for a strictly
/// interior pair (s, z).
pub(crate) struct Scaling {
    /// s_i / z_i on the orthant.
    pub w2_nonneg: Vec<f64>,
    pub socs: Vec<SocScaling>,
    pub lambda: Vec<f64>,
}

pub(crate) struct SocScaling {
    pub eta: f64,
    pub wbar: Vec<f64>,
}

impl SocScaling {
    /// W v = eta * P(wbar) v with P(w) = [[w0, w1^T], [w1, I + w1 w1^T/(1+w0)]].
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let w0 = self.wbar[0];
        let w1 = &self.wbar[1..];
        let cross: f64 = w1.iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
        out[0] = self.eta * (w0 * v[0] + cross);
        let coef = v[0] + cross / (1.0 + w0);
        for k in 0..w1.len() {
            out[k + 1] = self.eta * (v[k + 1] + coef * w1[k]);
        }
    }

    /// W^{-1} v = (1/eta) * P(J wbar) v; P(J w) is the inverse of P(w).
    #[cfg(test)]
    fn apply_inv(&self, v: &[f64], out: &mut [f64]) {
        let w0 = self.wbar[0];
        let w1 = &self.wbar[1..];
        let cross: f64 = w1.iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
        out[0] = (w0 * v[0] - cross) / self.eta;
        let coef = -v[0] + cross / (1.0 + w0);
        for k in 0..w1.len() {
            out[k + 1] = (v[k + 1] + coef * w1[k]) / self.eta;
        }
    }

    /// Entry (i, j) of W^2 = eta^2 (2 wbar wbar^T - J).
    pub fn w2_entry(&self, i: usize, j: usize) -> f64 {
        let e2 = self.eta * self.eta;
        let base = 2.0 * self.wbar[i] * self.wbar[j];
        if i == j {
            if i == 0 {
                e2 * (base - 1.0)
            } else {
                e2 * (base + 1.0)
            }
        } else {
            e2 * base
        }
    }
}

impl Scaling {
    pub fn compute(layout: &ConeLayout, s: &[f64], z: &[f64]) -> Option<Scaling> {
        let mut w2_nonneg = Vec::with_capacity(layout.nonneg);
        let mut lambda = vec![0.0; layout.total_dim()];
        for i in 0..layout.nonneg {
            if s[i] <= 0.0 || z[i] <= 0.0 {
                return None;
            }
            w2_nonneg.push(s[i] / z[i]);
            lambda[i] = (s[i] * z[i]).sqrt();
        }
        let mut socs = Vec::with_capacity(layout.socs.len());
        for (lo, hi) in layout.soc_ranges() {
            let sres = s[lo] * s[lo] - s[lo + 1..hi].iter().map(|v| v * v).sum::<f64>();
            let zres = z[lo] * z[lo] - z[lo + 1..hi].iter().map(|v| v * v).sum::<f64>();
            if s[lo] <= 0.0 || z[lo] <= 0.0 || sres <= 0.0 || zres <= 0.0 {
                return None;
            }
            let (zeta_s, zeta_z) = (sres.sqrt(), zres.sqrt());
            let dim = hi - lo;
            let mut wbar = vec![0.0; dim];
            let sz_dot: f64 = (lo..hi).map(|i| s[i] * z[i]).sum();
            // gamma^2 = (1 + <s/zeta_s, z/zeta_z>) / 2 with the plain dot product
            let gamma = ((1.0 + sz_dot / (zeta_s * zeta_z)) / 2.0).sqrt();
            wbar[0] = (s[lo] / zeta_s + z[lo] / zeta_z) / (2.0 * gamma);
            for k in 1..dim {
                wbar[k] = (s[lo + k] / zeta_s - z[lo + k] / zeta_z) / (2.0 * gamma);
            }
            let sc = SocScaling {
                eta: (zeta_s / zeta_z).sqrt(),
                wbar,
            };
            sc.apply(&z[lo..hi], &mut lambda[lo..hi]);
            socs.push(sc);
        }
        Some(Scaling {
            w2_nonneg,
            socs,
            lambda,
        })
    }

    pub fn apply_w(&self, layout: &ConeLayout, v: &[f64], out: &mut [f64]) {
        for i in 0..layout.nonneg {
            out[i] = self.w2_nonneg[i].sqrt() * v[i];
        }
        for (c, (lo, hi)) in layout.soc_ranges().enumerate() {
            self.socs[c].apply(&v[lo..hi], &mut out[lo..hi]);
        }
    }

    #[cfg(test)]
    pub fn apply_w_inv(&self, layout: &ConeLayout, v: &[f64], out: &mut [f64]) {
        for i in 0..layout.nonneg {
            out[i] = v[i] / self.w2_nonneg[i].sqrt();
        }
        for (c, (lo, hi)) in layout.soc_ranges().enumerate() {
            self.socs[c].apply_inv(&v[lo..hi], &mut out[lo..hi]);
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ConeLayout {
        ConeLayout {
            nonneg: 3,
            socs: vec![3, 4],
        }
    }

    fn interior_pair() -> (Vec<f64>, Vec<f64>) {
        let s = vec![
            1.5, 0.7, 2.0, // orthant
            2.0, 0.3, -0.9, // soc 3
            3.0, 1.0, -1.2, 0.4, // soc 4
        ];
        let z = vec![0.4, 1.1, 0.6, 1.5, -0.2, 0.7, 2.5, -0.8, 0.5, 1.1];
        (s, z)
    }

    #[test]
    fn nt_scaling_maps_both_points_to_lambda() {
        let lay = layout();
        let (s, z) = interior_pair();
        let sc = Scaling::compute(&lay, &s, &z).unwrap();
        let dim = lay.total_dim();
        let mut wz = vec![0.0; dim];
        sc.apply_w(&lay, &z, &mut wz);
        let mut winv_s = vec![0.0; dim];
        sc.apply_w_inv(&lay, &s, &mut winv_s);
        for i in 0..dim {
            assert!((wz[i] - sc.lambda[i]).abs() < 1e-12, "W z != lambda at {i}");
            assert!(
                (winv_s[i] - sc.lambda[i]).abs() < 1e-12,
                "W^-1 s != lambda at {i}: {} vs {}",
                winv_s[i],
                sc.lambda[i]
            );
        }
        assert!(lay.min_eig(&sc.lambda) > 0.0);
    }

    #[test]
    fn w_inverse_roundtrip() {
        let lay = layout();
        let (s, z) = interior_pair();
        let sc = Scaling::compute(&lay, &s, &z).unwrap();
        let v: Vec<f64> = (0..lay.total_dim()).map(|i| (i as f64 * 0.71).cos()).collect();
        let mut t = vec![0.0; v.len()];
        sc.apply_w(&lay, &v, &mut t);
        let mut back = vec![0.0; v.len()];
        sc.apply_w_inv(&lay, &t, &mut back);
        for i in 0..v.len() {
            assert!((back[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn w2_entries_match_applying_w_twice() {
        let lay = ConeLayout {
            nonneg: 0,
            socs: vec![4],
        };
        let s = vec![3.0, 1.0, -1.2, 0.4];
        let z = vec![2.5, -0.8, 0.5, 1.1];
        let sc = Scaling::compute(&lay, &s, &z).unwrap();
        let soc = &sc.socs[0];
        for j in 0..4 {
            let mut unit = vec![0.0; 4];
            unit[j] = 1.0;
            let mut once = vec![0.0; 4];
            soc.apply(&unit, &mut once);
            let mut twice = vec![0.0; 4];
            soc.apply(&once, &mut twice);
            for i in 0..4 {
                let want = soc.w2_entry(i, j);
                assert!((twice[i] - want).abs() < 1e-12, "W^2[{i},{j}]");
            }
        }
        // W^2 z = s is the defining Nesterov-Todd property.
        let mut wz = vec![0.0; 4];
        soc.apply(&z, &mut wz);
        let mut w2z = vec![0.0; 4];
        soc.apply(&wz, &mut w2z);
        for i in 0..4 {
            assert!((w2z[i] - s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn jordan_division_inverts_product() {
        let lay = layout();
        let (s, z) = interior_pair();
        let sc = Scaling::compute(&lay, &s, &z).unwrap();
        let d: Vec<f64> = (0..lay.total_dim()).map(|i| (i as f64 * 1.3).sin()).collect();
        let mut x = vec![0.0; d.len()];
        lay.jordan_div(&sc.lambda, &d, &mut x);
        let mut back = vec![0.0; d.len()];
        lay.jordan(&sc.lambda, &x, &mut back);
        for i in 0..d.len() {
            assert!((back[i] - d[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn max_step_hits_boundary() {
        let lay = ConeLayout {
            nonneg: 2,
            socs: vec![3],
        };
        let p = vec![1.0, 2.0, 1.0, 0.0, 0.0];
        let d = vec![-0.5, 1.0, 0.0, 1.0, 0.0];
        // Orthant limit: 1.0/0.5 = 2; cone limit: (1, t, 0) stays in for t <= 1.
        let a = lay.max_step(&p, &d, 50.0);
        assert!((a - 1.0).abs() < 1e-12);
        let eps = 1e-9;
        let probe: Vec<f64> = p.iter().zip(&d).map(|(x, y)| x + (a - eps) * y).collect();
        assert!(lay.min_eig(&probe) >= 0.0);
    }
}
