//! Averaged KNN graph, projection heads and the graph-weighted contrastive loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Forward, Linear, ParamStore, LINEAR_GAIN};
use crate::par;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Lower bound applied to the loss denominator before the log.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Directed K-nearest-neighbour lists of the rows of `z` (`[N×d]`).
///
/// Row `i` lists the `k` rows `j ≠ i` closest in squared Euclidean distance,
/// nearest first; equal distances go to the smaller index.
pub fn knn_indices(z: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = z.shape()[0];
    if z.rank() != 2 {
        return Err(Error::Config(format!("knn expects a matrix, got {:?}", z.shape())));
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!("knn needs 0 < K < N, got K={k}, N={n}")));
    }
    Ok(par::map(n, |i| {
        let zi = z.row(i);
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (squared_distance(zi, z.row(j)), j))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
        cand.sort_by(order);
        cand.into_iter().map(|(_, j)| j).collect()
    }))
}

/// `S = (1/M) Σ_m S^m`, stored as sparse per-row neighbour counts.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    n: usize,
    k: usize,
    views: usize,
    /// Row `i`: `(j, count)` sorted by `j`, where `count` is the number of
    /// views listing `j` among the neighbours of `i`.
    rows: Vec<Vec<(usize, u32)>>,
}

impl NeighborGraph {
    /// Averages per-view neighbour lists (one `Vec<Vec<usize>>` per view).
    pub fn average(per_view: &[Vec<Vec<usize>>], k: usize) -> Result<Self> {
        let views = per_view.len();
        if views == 0 {
            return Err(Error::Config("graph needs at least one view".into()));
        }
        let n = per_view[0].len();
        if per_view.iter().any(|v| v.len() != n) {
            return Err(Error::Config("per-view neighbour lists differ in length".into()));
        }
        let rows = (0..n)
            .map(|i| {
                let mut all: Vec<usize> = per_view.iter().flat_map(|v| v[i].iter().copied()).collect();
                all.sort_unstable();
                let mut row: Vec<(usize, u32)> = Vec::new();
                for j in all {
                    match row.last_mut() {
                        Some((last, c)) if *last == j => *c += 1,
                        _ => row.push((j, 1)),
                    }
                }
                row
            })
            .collect();
        Ok(NeighborGraph { n, k, views, rows })
    }

    /// Builds the averaged graph from per-view latents `[N×d_ψ]`.
    pub fn from_latents(latents: &[Tensor], k: usize) -> Result<Self> {
        let per_view = latents
            .iter()
            .map(|z| knn_indices(z, k))
            .collect::<Result<Vec<_>>>()?;
        Self::average(&per_view, k)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.rows[i].binary_search_by_key(&j, |&(c, _)| c) {
            Ok(p) => self.rows[i][p].1 as f64 / self.views as f64,
            Err(_) => 0.0,
        }
    }

    /// Non-zero entries of row `i` as `(j, S_ij)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let m = self.views as f64;
        self.rows[i].iter().map(move |&(j, c)| (j, c as f64 / m))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, c)| c as u64).sum::<u64>() as f64 / self.views as f64
    }

    /// Dense `S[rows, cols]` block.
    pub fn cross_matrix(&self, rows: &[usize], cols: &[usize]) -> Tensor {
        let mut pos = vec![usize::MAX; self.n];
        for (p, &c) in cols.iter().enumerate() {
            pos[c] = p;
        }
        let mut out = Tensor::zeros(vec![rows.len(), cols.len()]);
        let width = cols.len();
        let data = out.data_mut();
        for (r, &i) in rows.iter().enumerate() {
            for (j, s) in self.row(i) {
                if pos[j] != usize::MAX {
                    data[r * width + pos[j]] = s;
                }
            }
        }
        out
    }

    /// `S` restricted to a batch of global indices, `[b×b]`.
    pub fn batch_matrix(&self, indices: &[usize]) -> Tensor {
        self.cross_matrix(indices, indices)
    }

    /// One `i j s_ij` line per non-zero entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                let _ = writeln!(s, "{i} {j} {v}");
            }
        }
        s
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Linear heads mapping the fused vector and each view latent to `d_φ`.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    pub fused: Linear,
    pub views: Vec<Linear>,
    pub out_dim: usize,
}

impl ProjectionHeads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        views: usize,
        latent_dim: usize,
        out_dim: usize,
    ) -> Self {
        let fused = Linear::new(store, rng, "heads.fused", views * latent_dim, out_dim, LINEAR_GAIN);
        let views = (0..views)
            .map(|m| Linear::new(store, rng, &format!("heads.view{m}"), latent_dim, out_dim, LINEAR_GAIN))
            .collect();
        ProjectionHeads { fused, views, out_dim }
    }

    /// `ĥ = mlp²(z̃)`.
    pub fn project_fused(&self, f: &mut Forward, fused: Var) -> Result<Var, TensorError> {
        self.fused.forward(f, fused)
    }

    /// `h^m = mlp^{3,m}(z^m)` for every view.
    pub fn project_views(&self, f: &mut Forward, latents: &[Var]) -> Result<Vec<Var>, TensorError> {
        latents
            .iter()
            .zip(&self.views)
            .map(|(&z, head)| head.forward(f, z))
            .collect()
    }
}

/// Loss value plus the number of denominators that hit [`DENOMINATOR_FLOOR`].
#[derive(Debug, Clone, Copy)]
pub struct AkclOutput {
    pub loss: Var,
    pub clamped: usize,
}

/// Contrastive loss with the batch as the denominator set.
///
/// `h_hat` is `[b×d_φ]`, every `h_views[m]` is `[b×d_φ]` and `s` is the graph
/// restricted to the batch, `[b×b]`.
pub fn akcl_loss(tape: &mut Tape, h_hat: Var, h_views: &[Var], s: &Tensor, tau: f64) -> Result<AkclOutput> {
    let b = tape.shape(h_hat)[0];
    let positives: Vec<usize> = (0..b).collect();
    akcl_loss_against(tape, h_hat, h_views, s, &positives, tau)
}

/// General form: rows of `h_hat` (`[b×d_φ]`) against `n` candidate rows of
/// every `h_views[m]` (`[n×d_φ]`), with `s` of shape `[b×n]` and the
/// positive of row `i` at column `positives[i]`.
///
/// `−1/(2b) Σ_i Σ_m [C_ii/τ − log(max(Σ_j exp((1−S_ij)·C_ij/τ) − e^{1/τ}, ε))]`
pub fn akcl_loss_against(
    tape: &mut Tape,
    h_hat: Var,
    h_views: &[Var],
    s: &Tensor,
    positives: &[usize],
    tau: f64,
) -> Result<AkclOutput> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if h_views.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one view".into()));
    }
    let b = tape.shape(h_hat)[0];
    let n = tape.shape(h_views[0])[0];
    if s.shape() != [b, n] {
        return Err(TensorError::ShapeMismatch {
            op: "akcl_loss",
            left: s.shape().to_vec(),
            right: vec![b, n],
        }
        .into());
    }
    if positives.len() != b || positives.iter().any(|&p| p >= n) {
        return Err(Error::Config("one in-range positive column per row is required".into()));
    }
    let mut weight = Tensor::zeros(vec![b, n]);
    for (w, sv) in weight.data_mut().iter_mut().zip(s.data()) {
        *w = (1.0 - sv) / tau;
    }
    let mut onehot = Tensor::zeros(vec![b, n]);
    for (i, &p) in positives.iter().enumerate() {
        onehot.data_mut()[i * n + p] = 1.0;
    }
    let self_term = (1.0 / tau).exp();

    let hn = tape.normalize_rows(h_hat)?;
    let mut total: Option<Var> = None;
    let mut clamped = 0;
    for &h in h_views {
        let vn = tape.normalize_rows(h)?;
        let vt = tape.transpose(vn)?;
        let c = tape.matmul(hn, vt)?;
        let pos = tape.mul_const(c, &onehot)?;
        let pos = tape.sum_axis(pos, 1)?;
        let pos = tape.scale(pos, 1.0 / tau);
        let e = tape.mul_const(c, &weight)?;
        let e = tape.exp(e);
        let den = tape.sum_axis(e, 1)?;
        let den = tape.add_scalar(den, -self_term);
        let (den, hits) = tape.clamp_min(den, DENOMINATOR_FLOOR);
        clamped += hits;
        let log_den = tape.log(den);
        let term = tape.sub(pos, log_den)?;
        let term = tape.sum(term);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let loss = tape.scale(total.expect("at least one view"), -1.0 / (2.0 * b as f64));
    Ok(AkclOutput { loss, clamped })
}

/// `L = L_rec + λ·L_akc`.
pub fn total_loss(tape: &mut Tape, rec: Var, akc: Var, lambda: f64) -> Result<Var, TensorError> {
    let weighted = tape.scale(akc, lambda);
    tape.add(rec, weighted)
}
