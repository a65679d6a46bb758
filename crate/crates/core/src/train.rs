//! Two-phase training (reconstruction pretraining, then contrastive
//! fine-tuning), evaluation and the λ/τ sweep.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{reconstruction_loss, ViewAutoencoder};
use crate::cluster::{kmeans, ClusterResult, KMeansConfig};
use crate::config::{DenominatorScope, Precision, RunConfig};
use crate::contrastive::{akcl_loss, akcl_loss_against, total_loss, NeighborGraph, ProjectionHeads};
use crate::data::{plan_batches, MultiViewDataset};
use crate::error::{Error, Result};
use crate::fusion::{concat_fallback, FusionNet};
use crate::metrics::MetricReport;
use crate::nn::{Forward, ParamStore};
use crate::tensor::{Adam, AdamConfig, Tensor, TensorError, Var};

/// Rows per chunk for full-dataset inference.
const EVAL_CHUNK: usize = 64;

/// Every learnable piece of the pipeline plus the settings that shaped it.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub view_dims: Vec<usize>,
    pub store: ParamStore,
    pub autoencoders: Vec<ViewAutoencoder>,
    /// `None` when fusion is ablated to plain concatenation.
    pub fusion: Option<FusionNet>,
    pub heads: ProjectionHeads,
}

impl Model {
    /// Initialises all parameters from `config.seed`.
    pub fn new(config: &RunConfig, view_dims: &[usize]) -> Result<Self> {
        config.validate()?;
        if view_dims.is_empty() {
            return Err(Error::Config("model needs at least one view".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let autoencoders = view_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                ViewAutoencoder::new(&mut store, &mut rng, m, d, &config.hidden_dims, config.d_psi, config.dropout)
            })
            .collect();
        let fusion = if config.no_dshf {
            None
        } else {
            Some(FusionNet::new(&mut store, &mut rng, config.fusion_config(view_dims.len()))?)
        };
        let heads = ProjectionHeads::new(&mut store, &mut rng, view_dims.len(), config.d_psi, config.d_phi);
        if config.precision == Precision::F32 {
            store.round_to_f32();
        }
        Ok(Model {
            config: config.clone(),
            view_dims: view_dims.to_vec(),
            store,
            autoencoders,
            fusion,
            heads,
        })
    }

    pub fn n_views(&self) -> usize {
        self.view_dims.len()
    }

    /// `z̃` from the view latents.
    pub fn fuse(&self, f: &mut Forward, latents: &[Var]) -> Result<Var, TensorError> {
        match &self.fusion {
            Some(net) => net.forward(f, latents),
            None => concat_fallback(f, latents),
        }
    }

    /// Eval-mode latents of the whole dataset, one `[N×d_ψ]` tensor per view.
    pub fn latents(&self, ds: &MultiViewDataset) -> Result<Vec<Tensor>> {
        let chunks = chunked(ds, |f, xs| {
            xs.iter()
                .zip(&self.autoencoders)
                .map(|(&x, ae)| ae.encode(f, x))
                .collect()
        }, &self.store)?;
        Ok(stack_chunks(chunks, self.n_views()))
    }

    /// Eval-mode fused embeddings `ĥ`, `[N×d_φ]`.
    pub fn embed(&self, ds: &MultiViewDataset) -> Result<Tensor> {
        let chunks = chunked(ds, |f, xs| {
            let latents = xs
                .iter()
                .zip(&self.autoencoders)
                .map(|(&x, ae)| ae.encode(f, x))
                .collect::<Result<Vec<_>, _>>()?;
            let fused = self.fuse(f, &latents)?;
            Ok(vec![self.heads.project_fused(f, fused)?])
        }, &self.store)?;
        Ok(stack_chunks(chunks, 1).pop().expect("one output"))
    }

    fn after_step(&mut self) {
        if self.config.precision == Precision::F32 {
            self.store.round_to_f32();
        }
    }
}

fn chunked<F>(ds: &MultiViewDataset, f: F, store: &ParamStore) -> Result<Vec<Vec<Tensor>>>
where
    F: Fn(&mut Forward, &[Var]) -> Result<Vec<Var>, TensorError>,
{
    let n = ds.n_samples();
    let mut out = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let mut fwd = Forward::eval(store);
        let xs: Vec<Var> = ds.batch(&idx).into_iter().map(|t| fwd.input(t)).collect();
        let vars = f(&mut fwd, &xs)?;
        out.push(vars.iter().map(|&v| fwd.tape.value(v).clone()).collect());
    }
    Ok(out)
}

fn stack_chunks(chunks: Vec<Vec<Tensor>>, outputs: usize) -> Vec<Tensor> {
    (0..outputs)
        .map(|o| {
            let width = chunks[0][o].shape()[1];
            let data: Vec<f64> = chunks.iter().flat_map(|c| c[o].data().iter().copied()).collect();
            let rows = data.len() / width;
            Tensor::new(vec![rows, width], data).expect("consistent chunk widths")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Finetune => 2,
        }
    }
}

/// SplitMix64 finaliser, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0, |acc, &p| mix(acc ^ p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_rec: f64,
    pub loss_akc: f64,
    pub loss_total: f64,
    pub metrics: Option<MetricReport>,
    pub wall_ms: u128,
}

pub const RUNLOG_HEADER: &str = "epoch,phase,loss_rec,loss_akc,loss_total,acc,nmi,pur,wall_ms";

/// Per-epoch training history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let (acc, nmi, pur) = match r.metrics {
                Some(m) => (m.acc.to_string(), m.nmi.to_string(), m.pur.to_string()),
                None => Default::default(),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{acc},{nmi},{pur},{}",
                r.epoch,
                r.phase.as_str(),
                r.loss_rec,
                r.loss_akc,
                r.loss_total,
                r.wall_ms
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Result of [`evaluate`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub embeddings: Tensor,
    pub clusters: Option<ClusterResult>,
    pub metrics: Option<MetricReport>,
}

/// Embeds the dataset and, when labels exist, clusters with k = class count.
pub fn evaluate(model: &Model, ds: &MultiViewDataset) -> Result<Evaluation> {
    let embeddings = model.embed(ds)?;
    let (clusters, metrics) = match (ds.labels(), ds.n_classes()) {
        (Some(truth), Some(k)) => {
            let cfg = KMeansConfig {
                k,
                seed: derive_seed(&[model.config.seed, 3]),
                max_iter: model.config.kmeans_max_iter,
                restarts: model.config.kmeans_restarts,
            };
            let clusters = kmeans(&embeddings, &cfg)?;
            let metrics = MetricReport::compute(&clusters.assignments, truth, model.config.nmi_variant)?;
            (Some(clusters), Some(metrics))
        }
        _ => (None, None),
    };
    Ok(Evaluation {
        embeddings,
        clusters,
        metrics,
    })
}

fn check_finite(phase: Phase, epoch: usize, what: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            phase: phase.as_str().to_string(),
            epoch,
            what,
        })
    }
}

fn epoch_metrics(model: &Model, ds: &MultiViewDataset, epoch: usize, last: usize) -> Result<Option<MetricReport>> {
    let every = model.config.eval_every;
    if every == 0 || ds.labels().is_none() || (epoch % every != 0 && epoch != last) {
        return Ok(None);
    }
    Ok(evaluate(model, ds)?.metrics)
}

fn adam_for(model: &Model) -> Adam {
    Adam::new(
        AdamConfig {
            lr: model.config.lr,
            ..AdamConfig::default()
        },
        model.store.values(),
    )
}

/// Reconstruction-only phase over `pretrain_epochs` epochs.
pub fn pretrain(model: &mut Model, ds: &MultiViewDataset, log: &mut RunLog) -> Result<()> {
    let cfg = model.config.clone();
    check_dims(model, ds)?;
    let mut adam = adam_for(model);
    let phase = Phase::Pretrain;
    for epoch in 1..=cfg.pretrain_epochs {
        let start = Instant::now();
        let plan = plan_batches(ds.n_samples(), cfg.batch_size, derive_seed(&[cfg.seed, phase.tag(), epoch as u64]))?;
        let mut rec_sum = 0.0;
        for (bi, idx) in plan.batches().enumerate() {
            let grads = {
                let mut f = Forward::train(&model.store, derive_seed(&[cfg.seed, phase.tag(), epoch as u64, bi as u64, 7]));
                let xs: Vec<Var> = ds.batch(idx).into_iter().map(|t| f.input(t)).collect();
                let rec = reconstruction_loss(&mut f, &xs, &model.autoencoders)?;
                let value = f.tape.value(rec.loss).item();
                check_finite(phase, epoch, "loss_rec", value)?;
                rec_sum += value;
                f.backward(rec.loss)?
            };
            adam.step(model.store.values_mut(), &grads);
            model.after_step();
        }
        let loss_rec = rec_sum / plan.len() as f64;
        let metrics = epoch_metrics(model, ds, epoch, cfg.pretrain_epochs)?;
        log::debug!("pretrain epoch {epoch}: loss_rec={loss_rec}");
        log.records.push(EpochRecord {
            epoch,
            phase,
            loss_rec,
            loss_akc: 0.0,
            loss_total: loss_rec,
            metrics,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(())
}

/// Builds the averaged neighbour graph from the current eval-mode latents.
pub fn build_graph(model: &Model, ds: &MultiViewDataset) -> Result<NeighborGraph> {
    NeighborGraph::from_latents(&model.latents(ds)?, model.config.knn_k)
}

/// Per-batch loss terms of the fine-tuning objective.
struct BatchLoss {
    total: Var,
    rec: f64,
    akc: f64,
    clamped: usize,
}

fn finetune_batch(
    model: &Model,
    f: &mut Forward,
    ds: &MultiViewDataset,
    idx: &[usize],
    graph: Option<&NeighborGraph>,
) -> Result<BatchLoss> {
    let cfg = &model.config;
    let xs: Vec<Var> = ds.batch(idx).into_iter().map(|t| f.input(t)).collect();
    let rec = reconstruction_loss(f, &xs, &model.autoencoders)?;
    let rec_value = f.tape.value(rec.loss).item();
    let Some(graph) = graph.filter(|_| idx.len() >= 2) else {
        return Ok(BatchLoss {
            total: rec.loss,
            rec: rec_value,
            akc: 0.0,
            clamped: 0,
        });
    };
    let fused = model.fuse(f, &rec.latents)?;
    let h_hat = model.heads.project_fused(f, fused)?;
    let out = match cfg.denominator_scope {
        DenominatorScope::Batch => {
            let h_views = model.heads.project_views(f, &rec.latents)?;
            akcl_loss(&mut f.tape, h_hat, &h_views, &graph.batch_matrix(idx), cfg.tau)?
        }
        DenominatorScope::Full => {
            // candidates come from a second pass over every sample
            let all: Vec<usize> = (0..ds.n_samples()).collect();
            let xs_all: Vec<Var> = ds.batch(&all).into_iter().map(|t| f.input(t)).collect();
            let z_all = xs_all
                .iter()
                .zip(&model.autoencoders)
                .map(|(&x, ae)| ae.encode(f, x))
                .collect::<Result<Vec<_>, _>>()?;
            let h_views = model.heads.project_views(f, &z_all)?;
            akcl_loss_against(&mut f.tape, h_hat, &h_views, &graph.cross_matrix(idx, &all), idx, cfg.tau)?
        }
    };
    let akc = f.tape.value(out.loss).item();
    let total = total_loss(&mut f.tape, rec.loss, out.loss, cfg.lambda)?;
    Ok(BatchLoss {
        total,
        rec: rec_value,
        akc,
        clamped: out.clamped,
    })
}

/// Contrastive phase over `finetune_epochs` epochs; returns the graph in use
/// at the end (`None` when the contrastive term is ablated).
pub fn finetune(model: &mut Model, ds: &MultiViewDataset, log: &mut RunLog) -> Result<Option<NeighborGraph>> {
    let cfg = model.config.clone();
    check_dims(model, ds)?;
    cfg.validate_for(ds.n_samples())?;
    let use_akcl = !cfg.no_akcl && cfg.finetune_epochs > 0;
    let mut graph = if use_akcl { Some(build_graph(model, ds)?) } else { None };
    let mut adam = adam_for(model);
    let phase = Phase::Finetune;
    for epoch in 1..=cfg.finetune_epochs {
        let start = Instant::now();
        if use_akcl && cfg.graph_refresh_epochs > 0 && epoch > 1 && (epoch - 1) % cfg.graph_refresh_epochs == 0 {
            graph = Some(build_graph(model, ds)?);
        }
        let plan = plan_batches(ds.n_samples(), cfg.batch_size, derive_seed(&[cfg.seed, phase.tag(), epoch as u64]))?;
        let (mut rec_sum, mut akc_sum, mut total_sum, mut clamped) = (0.0, 0.0, 0.0, 0);
        for (bi, idx) in plan.batches().enumerate() {
            let grads = {
                let mut f = Forward::train(&model.store, derive_seed(&[cfg.seed, phase.tag(), epoch as u64, bi as u64, 7]));
                let b = finetune_batch(model, &mut f, ds, idx, graph.as_ref())?;
                let total = f.tape.value(b.total).item();
                check_finite(phase, epoch, "loss_total", total)?;
                rec_sum += b.rec;
                akc_sum += b.akc;
                total_sum += total;
                clamped += b.clamped;
                f.backward(b.total)?
            };
            adam.step(model.store.values_mut(), &grads);
            model.after_step();
        }
        if clamped > 0 {
            log::warn!("finetune epoch {epoch}: {clamped} contrastive denominators clamped");
        }
        let batches = plan.len() as f64;
        let metrics = epoch_metrics(model, ds, epoch, cfg.finetune_epochs)?;
        log::debug!("finetune epoch {epoch}: loss_total={}", total_sum / batches);
        log.records.push(EpochRecord {
            epoch,
            phase,
            loss_rec: rec_sum / batches,
            loss_akc: akc_sum / batches,
            loss_total: total_sum / batches,
            metrics,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(graph)
}

fn check_dims(model: &Model, ds: &MultiViewDataset) -> Result<()> {
    if ds.view_dims() != model.view_dims {
        return Err(Error::Config(format!(
            "dataset view widths {:?} do not match the model's {:?}",
            ds.view_dims(),
            model.view_dims
        )));
    }
    Ok(())
}

/// Both phases followed by evaluation.
pub fn run(config: &RunConfig, ds: &MultiViewDataset) -> Result<(Model, RunLog, Evaluation)> {
    config.validate_for(ds.n_samples())?;
    let mut model = Model::new(config, &ds.view_dims())?;
    let mut log = RunLog::default();
    pretrain(&mut model, ds, &mut log)?;
    finetune(&mut model, ds, &mut log)?;
    let eval = evaluate(&model, ds)?;
    Ok((model, log, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub tau: f64,
    pub metrics: Option<MetricReport>,
}

/// Default sweep grids: λ over decades 1e-3..1e3, τ over 0.2..0.8.
pub fn default_sweep_grid() -> (Vec<f64>, Vec<f64>) {
    (
        vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3],
        vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
    )
}

/// One fine-tune + evaluation per (λ, τ) pair, all starting from one shared
/// pretrained model.
pub fn sweep(config: &RunConfig, ds: &MultiViewDataset, lambdas: &[f64], taus: &[f64]) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || taus.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let mut base = Model::new(config, &ds.view_dims())?;
    pretrain(&mut base, ds, &mut RunLog::default())?;
    let mut rows = Vec::with_capacity(lambdas.len() * taus.len());
    for &lambda in lambdas {
        for &tau in taus {
            let mut model = base.clone();
            model.config.lambda = lambda;
            model.config.tau = tau;
            model.config.validate_for(ds.n_samples())?;
            finetune(&mut model, ds, &mut RunLog::default())?;
            rows.push(SweepRow {
                lambda,
                tau,
                metrics: evaluate(&model, ds)?.metrics,
            });
        }
    }
    Ok(rows)
}

/// Writes `[N×d]` embeddings as little-endian f32 plus an `N d` shape file.
pub fn export_embeddings(embeddings: &Tensor, data_path: &Path, shape_path: &Path) -> Result<()> {
    let bytes: Vec<u8> = embeddings
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    std::fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))?;
    let shape = format!("{} {}\n", embeddings.shape()[0], embeddings.shape()[1]);
    std::fs::write(shape_path, shape).map_err(|e| Error::io(shape_path, e))
}

/// Moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
