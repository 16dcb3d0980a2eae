//! Linearized feeder model.
//!
//! Voltages respond to reactive injections as `v = X q + v~`, where the grid
//! conditions `v~ = R p - X q_load + v0 1` collect the effect of everything the
//! DERs do not control. `X` and `R` are either read from a feeder file or built
//! from a radial branch list.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute tolerance for the symmetry check on single-phase matrices.
pub const SYMMETRY_TOL: f64 = 1e-9;

const POWER_MAX_ITER: usize = 10_000;
const POWER_REL_TOL: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseLayout {
    /// Symmetric positive definite `X` with nonnegative entries.
    Single,
    /// Bus/phase entries flattened; `X` may be asymmetric with mixed signs.
    Multi,
}

/// Sensitivity model of a radial feeder.
///
/// Immutable once built. DER nodes carry a reactive power rating; every other
/// node is uncontrolled.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    x: DMatrix<f64>,
    r: DMatrix<f64>,
    v0: f64,
    layout: PhaseLayout,
    der_nodes: Vec<usize>,
    q_rating: Vec<f64>,
}

/// On-disk feeder schema. Matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeederFile {
    pub n_nodes: usize,
    pub phase_layout: PhaseLayout,
    pub v0: f64,
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub der_nodes: Vec<usize>,
    pub q_rating: Vec<f64>,
}

impl FeederModel {
    pub fn new(
        x: DMatrix<f64>,
        r: DMatrix<f64>,
        v0: f64,
        layout: PhaseLayout,
        der_nodes: Vec<usize>,
        q_rating: Vec<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Dimension("feeder has no nodes".into()));
        }
        for (name, m) in [("X", &x), ("R", &r)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} has non-finite entries")));
            }
        }
        if !v0.is_finite() || v0 <= 0.0 {
            return Err(Error::InvalidParameter(format!("v0 = {v0} must be positive")));
        }
        if der_nodes.len() != q_rating.len() {
            return Err(Error::Dimension(format!(
                "{} DER nodes but {} ratings",
                der_nodes.len(),
                q_rating.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &node in &der_nodes {
            if node >= n {
                return Err(Error::InvalidParameter(format!(
                    "DER node {node} out of range for {n} nodes"
                )));
            }
            if !seen.insert(node) {
                return Err(Error::InvalidParameter(format!("DER node {node} listed twice")));
            }
        }
        if let Some(bad) = q_rating.iter().find(|q| !(q.is_finite() && **q > 0.0)) {
            return Err(Error::InvalidParameter(format!("DER rating {bad} must be positive")));
        }
        if layout == PhaseLayout::Single {
            check_symmetric(&x, "X")?;
            check_symmetric(&r, "R")?;
            // Entries are zero between subtrees that only share the substation.
            if let Some(v) = x.iter().find(|v| **v < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "single-phase X must have nonnegative entries, found {v}"
                )));
            }
            let (lmin, _) = symmetric_eig_extremes(&x)?;
            if lmin <= 0.0 {
                return Err(Error::NotPositiveDefinite {
                    name: "X".into(),
                    min_eig: lmin,
                });
            }
        }
        Ok(FeederModel {
            x,
            r,
            v0,
            layout,
            der_nodes,
            q_rating,
        })
    }

    /// Returns a copy with a different DER placement.
    pub fn with_ders(&self, der_nodes: Vec<usize>, q_rating: Vec<f64>) -> Result<Self> {
        FeederModel::new(
            self.x.clone(),
            self.r.clone(),
            self.v0,
            self.layout,
            der_nodes,
            q_rating,
        )
    }

    pub fn from_file_data(data: FeederFile) -> Result<Self> {
        let x = matrix_from_rows(&data.x, data.n_nodes, "X")?;
        let r = matrix_from_rows(&data.r, data.n_nodes, "R")?;
        FeederModel::new(x, r, data.v0, data.phase_layout, data.der_nodes, data.q_rating)
    }

    pub fn to_file_data(&self) -> FeederFile {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        FeederFile {
            n_nodes: self.n_nodes(),
            phase_layout: self.layout,
            v0: self.v0,
            x: rows(&self.x),
            r: rows(&self.r),
            der_nodes: self.der_nodes.clone(),
            q_rating: self.q_rating.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_file_data())
            .map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn n_nodes(&self) -> usize {
        self.x.nrows()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn layout(&self) -> PhaseLayout {
        self.layout
    }

    pub fn is_single_phase(&self) -> bool {
        self.layout == PhaseLayout::Single
    }

    pub fn der_nodes(&self) -> &[usize] {
        &self.der_nodes
    }

    /// Ratings aligned with [`der_nodes`](Self::der_nodes).
    pub fn q_rating(&self) -> &[f64] {
        &self.q_rating
    }

    /// Ratings scattered onto all nodes, zero where there is no DER.
    pub fn rating_vector(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_nodes());
        for (&node, &q) in self.der_nodes.iter().zip(&self.q_rating) {
            out[node] = q;
        }
        out
    }

    /// `||q^||_2` over the DER ratings.
    pub fn rating_norm(&self) -> f64 {
        self.q_rating.iter().map(|q| q * q).sum::<f64>().sqrt()
    }

    /// Position of `node` within the DER list.
    pub fn der_index(&self, node: usize) -> Option<usize> {
        self.der_nodes.iter().position(|&d| d == node)
    }

    /// Voltages for a given injection: `X q + v~`.
    pub fn voltages(&self, q: &DVector<f64>, scenario: &Scenario) -> Result<DVector<f64>> {
        let n = self.n_nodes();
        if q.len() != n || scenario.len() != n {
            return Err(Error::Dimension(format!(
                "q has {} entries and scenario {}, feeder has {n} nodes",
                q.len(),
                scenario.len()
            )));
        }
        let mut v = scenario.v_tilde.clone();
        v.gemv(1.0, &self.x, q, 1.0);
        Ok(v)
    }
}

/// Reads and validates a feeder JSON file.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let data: FeederFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    FeederModel::from_file_data(data)
}

fn matrix_from_rows(rows: &[Vec<f64>], n: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(Error::Dimension(format!(
            "{name} has {} rows, n_nodes = {n}",
            rows.len()
        )));
    }
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::Dimension(format!(
            "{name} row {i} has {} columns, n_nodes = {n}",
            row.len()
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("{name} is not square")));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > SYMMETRY_TOL {
                return Err(Error::NotSymmetric {
                    name: name.into(),
                    row: i,
                    col: j,
                    diff,
                });
            }
        }
    }
    Ok(())
}

/// One line segment of a radial feeder. Node 0 is the substation; nodes
/// `1..=N` become matrix indices `0..N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// LinDistFlow sensitivities of a radial network.
///
/// `X[i][j]` is twice the reactance of the path the substation shares with
/// nodes `i` and `j`; `R` likewise from resistances. The result has no DERs;
/// add them with [`FeederModel::with_ders`].
pub fn build_radial_feeder(branches: &[Branch], v0: f64) -> Result<FeederModel> {
    let n = branches.len();
    if n == 0 {
        return Err(Error::Topology("no branches".into()));
    }
    // parent[k] = (parent bus, r, x) for bus k in 1..=n
    let mut parent: Vec<Option<(usize, f64, f64)>> = vec![None; n + 1];
    for b in branches {
        if b.to == 0 || b.to > n || b.from > n {
            return Err(Error::Topology(format!(
                "branch {}->{} references a bus outside 0..={n}",
                b.from, b.to
            )));
        }
        if b.from == b.to {
            return Err(Error::Topology(format!("self-loop at bus {}", b.to)));
        }
        if !(b.r > 0.0 && b.x > 0.0 && b.r.is_finite() && b.x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "branch {}->{} needs positive impedance",
                b.from, b.to
            )));
        }
        if parent[b.to].is_some() {
            return Err(Error::Topology(format!("bus {} has two parents", b.to)));
        }
        parent[b.to] = Some((b.from, b.r, b.x));
    }

    // Walk every bus back to the substation; a cycle never reaches bus 0.
    let mut paths: Vec<Vec<usize>> = Vec::with_capacity(n);
    for bus in 1..=n {
        let mut path = Vec::new();
        let mut cur = bus;
        while cur != 0 {
            if path.len() > n {
                return Err(Error::Topology(format!("bus {bus} lies on a cycle")));
            }
            path.push(cur);
            cur = match parent[cur] {
                Some((p, _, _)) => p,
                None => {
                    return Err(Error::Topology(format!(
                        "bus {bus} is not connected to the substation"
                    )))
                }
            };
        }
        path.sort_unstable();
        paths.push(path);
    }

    let mut x = DMatrix::zeros(n, n);
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (mut sx, mut sr) = (0.0, 0.0);
            for bus in sorted_intersection(&paths[i], &paths[j]) {
                let (_, br, bx) = parent[bus].expect("checked above");
                sx += bx;
                sr += br;
            }
            x[(i, j)] = 2.0 * sx;
            x[(j, i)] = 2.0 * sx;
            r[(i, j)] = 2.0 * sr;
            r[(j, i)] = 2.0 * sr;
        }
    }
    FeederModel::new(x, r, v0, PhaseLayout::Single, Vec::new(), Vec::new())
}

fn sorted_intersection<'a>(a: &'a [usize], b: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
    let (mut i, mut j) = (0, 0);
    std::iter::from_fn(move || {
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let v = a[i];
                    i += 1;
                    j += 1;
                    return Some(v);
                }
            }
        }
        None
    })
}

/// Grid-conditions vector `v~` for one loading scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub v_tilde: DVector<f64>,
}

impl Scenario {
    pub fn new(v_tilde: DVector<f64>) -> Result<Self> {
        if let Some(v) = v_tilde.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite grid condition {v}")));
        }
        Ok(Scenario { v_tilde })
    }

    pub fn len(&self) -> usize {
        self.v_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_tilde.is_empty()
    }

    /// `||v~ - 1||^2`, the objective when DERs inject nothing.
    pub fn baseline_deviation(&self) -> f64 {
        self.v_tilde.iter().map(|v| (v - 1.0) * (v - 1.0)).sum()
    }
}

/// `v~ = R p - X q_load + v0 1`.
pub fn grid_conditions(
    feeder: &FeederModel,
    p: &DVector<f64>,
    q_load: &DVector<f64>,
) -> Result<Scenario> {
    let n = feeder.n_nodes();
    if p.len() != n || q_load.len() != n {
        return Err(Error::Dimension(format!(
            "p has {} and q_load {} entries, feeder has {n} nodes",
            p.len(),
            q_load.len()
        )));
    }
    let mut v = DVector::from_element(n, feeder.v0);
    v.gemv(1.0, &feeder.r, p, 1.0);
    v.gemv(-1.0, &feeder.x, q_load, 1.0);
    Scenario::new(v)
}

/// Largest singular value by power iteration on `m^T m`.
///
/// Two deterministic start vectors (all ones, and an alternating ramp) are
/// run and the larger estimate kept, so a start that happens to be orthogonal
/// to the top singular vector cannot return a low value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let ones = DVector::from_element(n, 1.0);
    let ramp = DVector::from_fn(n, |i, _| if i % 2 == 0 { (i + 1) as f64 } else { -((i + 1) as f64) });
    power_iteration_gram(m, ones).max(power_iteration_gram(m, ramp)).sqrt()
}

fn power_iteration_gram(m: &DMatrix<f64>, start: DVector<f64>) -> f64 {
    let norm = start.norm();
    if norm == 0.0 {
        return 0.0;
    }
    let mut v = start / norm;
    let mut mv = DVector::zeros(m.nrows());
    let mut w = DVector::zeros(m.ncols());
    let mut rho_prev = f64::NAN;
    let mut rho_best = 0.0_f64;
    for _ in 0..POWER_MAX_ITER {
        mv.gemv(1.0, m, &v, 0.0);
        let rho = mv.norm_squared();
        rho_best = rho_best.max(rho);
        if rho == 0.0 {
            break;
        }
        w.gemv_tr(1.0, m, &mv, 0.0);
        let wn = w.norm();
        if wn == 0.0 {
            break;
        }
        v.copy_from(&w);
        v /= wn;
        if (rho - rho_prev).abs() <= POWER_REL_TOL * rho {
            break;
        }
        rho_prev = rho;
    }
    rho_best
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_eig_extremes(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_symmetric(m, "m")?;
    if m.nrows() == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

/// `lambda_max / lambda_min` of a symmetric positive definite matrix.
pub fn condition_number(m: &DMatrix<f64>) -> Result<f64> {
    let (lmin, lmax) = symmetric_eig_extremes(m)?;
    if lmin <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            name: "m".into(),
            min_eig: lmin,
        });
    }
    Ok(lmax / lmin)
}
