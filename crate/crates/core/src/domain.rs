//! Radially reduced grids on the ball `B_R(0) ⊂ ℝ^N`.
//!
//! Nodes are cell centred, `r_i = (i + 1/2) Δr`, so the origin is never a
//! node and `1/r²` is finite everywhere on the grid. Quadrature weights are
//! the exact volumes of the shells `[iΔr, (i+1)Δr)`, which equal
//! `|S^{N-1}| r_i^{N-1} Δr` up to `O(Δr²)` relative error.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Optimal constant of the Hardy inequality in dimension `dim`, `((N-2)/2)²`.
pub fn hardy_constant(dim: usize) -> Result<f64> {
    if dim < 3 {
        return Err(Error::InvalidArgument(format!(
            "Hardy constant needs dimension N >= 3, got {dim}"
        )));
    }
    let half = (dim as f64 - 2.0) / 2.0;
    Ok(half * half)
}

/// Surface area of the unit sphere `S^{N-1}`, `2 π^{N/2} / Γ(N/2)`.
pub fn sphere_area(dim: usize) -> f64 {
    // Γ(N/2) for integer N without a gamma-function dependency
    let gamma_half = if dim.is_multiple_of(2) {
        (1..dim / 2).map(|k| k as f64).product::<f64>()
    } else {
        // Γ(m + 1/2) = sqrt(π) (2m-1)!! / 2^m with m = (N-1)/2
        let m = (dim - 1) / 2;
        let double_fact: f64 = (0..m).map(|k| (2 * k + 1) as f64).product();
        PI.sqrt() * double_fact / 2f64.powi(m as i32)
    };
    2.0 * PI.powf(dim as f64 / 2.0) / gamma_half
}

/// Volume of the ball of radius `radius` in `ℝ^dim`.
pub fn ball_volume(dim: usize, radius: f64) -> f64 {
    sphere_area(dim) * radius.powi(dim as i32) / dim as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    dim: usize,
    radius: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl RadialGrid {
    /// Cell-centred grid with `n` nodes on `(0, radius)`.
    pub fn new(dim: usize, radius: f64, n: usize) -> Result<Self> {
        if dim < 3 {
            return Err(Error::InvalidArgument(format!(
                "radial grid needs N >= 3, got {dim}"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "radius must be positive and finite, got {radius}"
            )));
        }
        if n < 8 {
            return Err(Error::InvalidArgument(format!(
                "radial grid needs at least 8 nodes, got {n}"
            )));
        }
        Ok(Self::new_unchecked(dim, radius, n))
    }

    fn new_unchecked(dim: usize, radius: f64, n: usize) -> Self {
        let h = radius / n as f64;
        let area = sphere_area(dim);
        let nodes = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
        let weights = (0..n)
            .map(|i| {
                let lo = i as f64 * h;
                let hi = (i + 1) as f64 * h;
                area * (hi.powi(dim as i32) - lo.powi(dim as i32)) / dim as f64
            })
            .collect();
        Self {
            dim,
            radius,
            nodes,
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.radius / self.nodes.len() as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.weights)
    }

    /// Radius of cell face `k` (face 0 is the origin, face `n` the boundary).
    pub fn face(&self, k: usize) -> f64 {
        k as f64 * self.spacing()
    }

    /// `|S^{N-1}| ρ^{N-1}`, the area of the sphere of radius `ρ`.
    pub fn face_area(&self, rho: f64) -> f64 {
        sphere_area(self.dim) * rho.powi(self.dim as i32 - 1)
    }

    /// Quadrature of a radial function `f(|x|)` over the ball.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&r, &w)| w * f(r))
            .sum()
    }

    /// Discrete `L²(Ω)` inner product of nodal vectors.
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * u[i] * v[i]).sum()
    }

    /// Exact shell integrals `∫_{cell i} |x|^{-2} dx`, the weights of the
    /// inverse-square form. Midpoint values `w_i/r_i²` would overweight the
    /// first cell and break the discrete Hardy inequality for `N >= 4`.
    pub fn inverse_square_weights(&self) -> Vec<f64> {
        let area = sphere_area(self.dim);
        let m = self.dim as i32 - 2;
        (0..self.len())
            .map(|i| area * (self.face(i + 1).powi(m) - self.face(i).powi(m)) / m as f64)
            .collect()
    }

    /// Cell averages `(1/w_i) ∫_{cell i} f(|x|) dx` by 8-point Gauss-Legendre
    /// quadrature in `r`.
    pub fn cell_averages(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let (xs, ws) = gauss_legendre_8();
        let h = self.spacing();
        let area = sphere_area(self.dim);
        DVector::from_fn(self.len(), |i, _| {
            let lo = self.face(i);
            let s: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(x, w)| {
                    let r = lo + 0.5 * h * (x + 1.0);
                    w * f(r) * r.powi(self.dim as i32 - 1)
                })
                .sum();
            area * 0.5 * h * s / self.weights[i]
        })
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.nodes.iter().map(|&r| f(r)))
    }
}

/// Nodes and weights of the 8-point Gauss-Legendre rule on `[-1, 1]`.
fn gauss_legendre_8() -> ([f64; 8], [f64; 8]) {
    const M: usize = 8;
    let mut xs = [0.0; M];
    let mut ws = [0.0; M];
    for k in 0..M {
        let mut x = (PI * (k as f64 + 0.75) / (M as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // three-term recurrence for P_M and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=M {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = M as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        xs[k] = x;
        ws[k] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

/// Radial shell `{ x : r_lo <= |x| < r_hi }`; `r_lo = 0` is a ball.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, serde::Serialize)]
pub struct Annulus {
    pub r_lo: f64,
    pub r_hi: f64,
}

impl Annulus {
    pub fn new(r_lo: f64, r_hi: f64) -> Result<Self> {
        if !(r_lo >= 0.0 && r_lo < r_hi && r_hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "annulus needs 0 <= r_lo < r_hi, got [{r_lo}, {r_hi})"
            )));
        }
        Ok(Self { r_lo, r_hi })
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.r_lo && r < self.r_hi
    }

    /// Closure of `self` lies inside `other` (compact containment of shells).
    pub fn compactly_inside(&self, other: &Annulus) -> bool {
        let inner_ok = if other.r_lo == 0.0 {
            true
        } else {
            self.r_lo > other.r_lo
        };
        inner_ok && self.r_hi < other.r_hi
    }

    pub fn volume(&self, dim: usize) -> f64 {
        ball_volume(dim, self.r_hi) - ball_volume(dim, self.r_lo)
    }
}

/// 0/1 mask of a subdomain on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Indicator {
    pub mask: DVector<f64>,
    /// Set when no node falls inside the shell.
    pub degenerate: bool,
}

impl Indicator {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

pub fn indicator(grid: &RadialGrid, shell: &Annulus) -> Result<Indicator> {
    if shell.r_hi > grid.radius() * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "annulus [{}, {}) leaves the domain of radius {}",
            shell.r_lo,
            shell.r_hi,
            grid.radius()
        )));
    }
    let mask = grid.sample(|r| if shell.contains(r) { 1.0 } else { 0.0 });
    let degenerate = mask.iter().all(|&m| m == 0.0);
    Ok(Indicator { mask, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hardy_constant_values() {
        assert_eq!(hardy_constant(3).unwrap(), 0.25);
        assert_eq!(hardy_constant(4).unwrap(), 1.0);
        assert_eq!(hardy_constant(6).unwrap(), 4.0);
        assert!(hardy_constant(2).is_err());
        let seq: Vec<f64> = (3..12).map(|n| hardy_constant(n).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sphere_areas() {
        assert_relative_eq!(sphere_area(3), 4.0 * PI, epsilon = 1e-14);
        assert_relative_eq!(sphere_area(4), 2.0 * PI * PI, epsilon = 1e-13);
        assert_relative_eq!(sphere_area(5), 8.0 * PI * PI / 3.0, epsilon = 1e-13);
    }

    #[test]
    fn grid_nodes_cell_centred() {
        let g = RadialGrid::new_unchecked(3, 1.0, 4);
        assert_eq!(g.nodes(), &[0.125, 0.375, 0.625, 0.875]);
        let g = RadialGrid::new(5, 2.0, 8).unwrap();
        assert_eq!(g.nodes()[7], 1.875);
        assert!(g.nodes()[7] < g.radius());
        assert!(RadialGrid::new(3, 1.0, 7).is_err());
        assert!(RadialGrid::new(2, 1.0, 20).is_err());
    }

    #[test]
    fn weights_sum_to_ball_volume() {
        let g = RadialGrid::new(3, 1.0, 100).unwrap();
        let total: f64 = g.weights().iter().sum();
        let exact = 4.0 * PI / 3.0;
        assert!((total - exact).abs() < 0.01 * exact);
        assert!(g.weights().iter().all(|&w| w > 0.0));
        // each weight is close to the midpoint value |S| r² Δr
        for (r, w) in g.nodes().iter().zip(g.weights()) {
            let mid = 4.0 * PI * r * r * g.spacing();
            assert!((w - mid).abs() <= 4.0 * PI * g.spacing().powi(3) / 12.0 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn quadrature_converges_second_order() {
        // ∫_{B_1} cos(|x|) dx in 3-D = 4π (sin 1 - ... ) computed in closed form:
        // ∫_0^1 r² cos r dr = 2 cos 1 - sin 1
        let exact = 4.0 * PI * (2.0 * 1f64.cos() - 1f64.sin());
        let err = |n| {
            let g = RadialGrid::new(3, 1.0, n).unwrap();
            (g.integrate(f64::cos) - exact).abs()
        };
        let (e1, e2, e3) = (err(40), err(80), err(160));
        let slope1 = (e1 / e2).log2();
        let slope2 = (e2 / e3).log2();
        assert!(slope1 > 1.8 && slope2 > 1.8, "slopes {slope1} {slope2}");
    }

    #[test]
    fn cell_averages_are_exact_for_polynomials() {
        let g = RadialGrid::new(4, 1.5, 30).unwrap();
        let ones = g.cell_averages(|_| 1.0);
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-13));
        // ∫ |x|^{-2} through the quadrature agrees with the closed form
        let avg = g.cell_averages(|r| 1.0 / (r * r));
        for (i, v) in g.inverse_square_weights().iter().enumerate() {
            assert!((avg[i] * g.weights()[i] - v).abs() < 1e-12 * v);
        }
    }

    #[test]
    fn indicator_examples() {
        let g = RadialGrid::new_unchecked(3, 1.0, 4);
        let full = indicator(&g, &Annulus::new(0.0, 1.0).unwrap()).unwrap();
        assert!(full.mask.iter().all(|&m| m == 1.0));
        assert!(!full.degenerate);
        let empty = indicator(&g, &Annulus::new(0.4, 0.6).unwrap()).unwrap();
        assert!(empty.degenerate);
        assert_eq!(empty.count(), 0);
        let mid = indicator(&g, &Annulus::new(0.3, 0.7).unwrap()).unwrap();
        assert_eq!(mid.mask.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(indicator(&g, &Annulus::new(0.3, 1.5).unwrap()).is_err());
    }

    #[test]
    fn compact_containment() {
        let c = Annulus::new(0.0, 0.9).unwrap();
        assert!(Annulus::new(0.0, 0.5).unwrap().compactly_inside(&c));
        assert!(!Annulus::new(0.0, 0.9).unwrap().compactly_inside(&c));
        let shell = Annulus::new(0.2, 0.9).unwrap();
        assert!(!Annulus::new(0.2, 0.5).unwrap().compactly_inside(&shell));
        assert!(Annulus::new(0.25, 0.5).unwrap().compactly_inside(&shell));
    }
}
