//! Encoder, the five self-supervised objectives and their training loop.

mod diagnostics;
mod loss;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{AdamConfig, AdamState, CompGraph, DenseMatrix, Linear, Mlp, NodeId};
use crate::sampling::RandomStream;

pub use diagnostics::{
    align_uniform_decompose, alignment, barlow_terms, log_mean_exp_taylor, simclr_decomposition_gap,
    sphere_identity_residual,
};
pub use loss::{
    barlow_node, byol_node, loss_barlow, loss_byol, loss_moco, loss_simclr, loss_simsiam, moco_node, simclr_node,
    simsiam_node,
};
pub use train::{default_box_augmentation, train_epoch, AugmentPolicy, BatchRecord, PairSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Simclr,
    Moco,
    Byol,
    Simsiam,
    Barlow,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Simclr,
        Objective::Moco,
        Objective::Byol,
        Objective::Simsiam,
        Objective::Barlow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Simclr => "simclr",
            Objective::Moco => "moco",
            Objective::Byol => "byol",
            Objective::Simsiam => "simsiam",
            Objective::Barlow => "barlow",
        }
    }

    pub fn uses_target(self) -> bool {
        matches!(self, Objective::Moco | Objective::Byol)
    }

    pub fn uses_predictor(self) -> bool {
        matches!(self, Objective::Byol | Objective::Simsiam)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub objective: Objective,
    pub tau: f64,
    pub queue_size: usize,
    pub ema_momentum: f64,
    pub barlow_lambda: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    /// Number of affine layers in the encoder.
    pub depth: usize,
    pub rep_dim: usize,
    pub leaky_slope: f64,
    pub adam: AdamConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Simclr,
            tau: 0.07,
            queue_size: 4096,
            ema_momentum: 0.99,
            barlow_lambda: 0.005,
            batch_size: 128,
            hidden_dim: 256,
            depth: 3,
            rep_dim: 128,
            leaky_slope: 0.2,
            adam: AdamConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.objective == Objective::Moco && self.queue_size < self.batch_size {
            return bad(format!(
                "queue size {} smaller than batch size {}",
                self.queue_size, self.batch_size
            ));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return bad(format!("ema momentum must lie in (0, 1), got {}", self.ema_momentum));
        }
        if !(self.barlow_lambda > 0.0) {
            return bad(format!("barlow lambda must be positive, got {}", self.barlow_lambda));
        }
        if self.depth == 0 || self.rep_dim == 0 || self.hidden_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        Ok(())
    }

    fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat(self.hidden_dim).take(self.depth - 1));
        dims.push(self.rep_dim);
        dims
    }
}

/// FIFO ring buffer of unit-norm key representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MocoQueue {
    keys: DenseMatrix,
    filled: usize,
    cursor: usize,
}

impl MocoQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and dimension must be positive".into()));
        }
        Ok(Self {
            keys: DenseMatrix::zeros(capacity, dim),
            filled: 0,
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.keys.rows()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity()
    }

    /// Writes `batch` at the cursor, overwriting the oldest entries.
    pub fn enqueue(&mut self, batch: &DenseMatrix) -> Result<()> {
        if batch.cols() != self.dim() {
            return Err(shape_err("enqueue", format!("{} vs {}", batch.cols(), self.dim())));
        }
        if batch.row_norms().iter().any(|n| (n - 1.0).abs() > 1e-9) {
            return Err(Error::Contract("queue entries must be unit norm".into()));
        }
        for r in 0..batch.rows() {
            self.keys.row_mut(self.cursor).copy_from_slice(batch.row(r));
            self.cursor = (self.cursor + 1) % self.capacity();
            self.filled = (self.filled + 1).min(self.capacity());
        }
        Ok(())
    }

    /// Stored keys, `len × dim`, in storage order.
    pub fn matrix(&self) -> DenseMatrix {
        self.keys.select_rows(&(0..self.filled).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

/// Online encoder, optional EMA target and predictor, and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslModel {
    pub config: SslConfig,
    pub input_dim: usize,
    pub encoder: Mlp,
    pub target: Option<Mlp>,
    pub predictor: Option<Linear>,
    pub queue: Option<MocoQueue>,
    pub optimizer: AdamState,
}

/// Outcome of one optimisation step; `loss` is `None` during queue warm-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: Option<f64>,
    pub alignment: f64,
    pub uniformity: f64,
}

impl SslModel {
    pub fn new(config: SslConfig, input_dim: usize, rs: &mut RandomStream) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let encoder = Mlp::init(&config.encoder_dims(input_dim), config.leaky_slope, rs);
        let target = config.objective.uses_target().then(|| encoder.clone());
        let predictor = config.objective.uses_predictor().then(|| Linear::identity(config.rep_dim));
        let queue = match config.objective {
            Objective::Moco => Some(MocoQueue::new(config.queue_size, config.rep_dim)?),
            _ => None,
        };
        let optimizer = AdamState::new(config.adam.clone());
        Ok(Self {
            config,
            input_dim,
            encoder,
            target,
            predictor,
            queue,
            optimizer,
        })
    }

    /// Row-normalized representations of `x`.
    pub fn encode(&self, x: &DenseMatrix, which: Which) -> Result<DenseMatrix> {
        let net = match which {
            Which::Online => &self.encoder,
            Which::Target => self
                .target
                .as_ref()
                .ok_or_else(|| Error::Contract("model has no target network".into()))?,
        };
        net.forward(x)?.row_normalize()
    }

    fn record_online(&self, g: &mut CompGraph, x: &DenseMatrix) -> Result<(NodeId, Vec<NodeId>)> {
        let xi = g.constant(x.clone());
        let (h, params) = self.encoder.record(g, xi)?;
        Ok((g.row_normalize(h)?, params))
    }

    fn record_predictor(&self, g: &mut CompGraph, f: NodeId) -> Result<(NodeId, [NodeId; 2])> {
        let p = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::Contract("objective needs a predictor".into()))?;
        let (out, params) = p.record(g, f)?;
        Ok((g.row_normalize(out)?, params))
    }

    /// Records the objective on `(x1, x2)`; returns the loss node (or `None`
    /// while the queue warms up), trainable leaves, and the online reps of both views.
    fn record_loss(
        &self,
        g: &mut CompGraph,
        x1: &DenseMatrix,
        x2: &DenseMatrix,
    ) -> Result<(Option<NodeId>, Vec<NodeId>, DenseMatrix, DenseMatrix)> {
        if x1.shape() != x2.shape() || x1.cols() != self.input_dim {
            return Err(shape_err(
                "ssl_batch",
                format!("views {:?} and {:?} for input dim {}", x1.shape(), x2.shape(), self.input_dim),
            ));
        }
        let b = x1.rows();
        let cfg = &self.config;
        match cfg.objective {
            Objective::Simclr => {
                let (f, params) = self.record_online(g, &DenseMatrix::interleave_rows(x1, x2)?)?;
                let (f1, f2) = g.value(f).deinterleave_rows();
                let l = simclr_node(g, f, cfg.tau)?;
                Ok((Some(l), params, f1, f2))
            }
            Objective::Moco => {
                let (q, params) = self.record_online(g, x1)?;
                let keys = self.encode(x2, Which::Target)?;
                let f2 = self.encode(x2, Which::Online)?;
                let f1 = g.value(q).clone();
                let queue = self.queue.as_ref().expect("moco model owns a queue");
                match moco_node(g, q, &keys, queue, cfg.tau) {
                    Ok(l) => Ok((Some(l), params, f1, f2)),
                    Err(Error::WarmUp { .. }) => Ok((None, params, f1, f2)),
                    Err(e) => Err(e),
                }
            }
            Objective::Byol | Objective::Simsiam => {
                let (f, mut params) = self.record_online(g, &x1.vstack(x2)?)?;
                let (p, pp) = self.record_predictor(g, f)?;
                params.extend(pp);
                let p1 = g.slice_rows(p, 0, b)?;
                let p2 = g.slice_rows(p, b, b)?;
                let z1 = g.slice_rows(f, 0, b)?;
                let z2 = g.slice_rows(f, b, b)?;
                let (f1, f2) = (g.value(z1).clone(), g.value(z2).clone());
                let l = if cfg.objective == Objective::Byol {
                    let t1 = self.encode(x1, Which::Target)?;
                    let t2 = self.encode(x2, Which::Target)?;
                    byol_node(g, p1, p2, &t1, &t2)?
                } else {
                    simsiam_node(g, p1, p2, z1, z2)?
                };
                Ok((Some(l), params, f1, f2))
            }
            Objective::Barlow => {
                let (f, params) = self.record_online(g, &x1.vstack(x2)?)?;
                let z1 = g.slice_rows(f, 0, b)?;
                let z2 = g.slice_rows(f, b, b)?;
                let (f1, f2) = (g.value(z1).clone(), g.value(z2).clone());
                let l = barlow_node(g, z1, z2, cfg.barlow_lambda)?;
                Ok((Some(l), params, f1, f2))
            }
        }
    }

    /// Objective value on a batch pair without updating anything.
    pub fn batch_loss(&self, x1: &DenseMatrix, x2: &DenseMatrix) -> Result<Option<f64>> {
        let mut g = CompGraph::new();
        let (l, ..) = self.record_loss(&mut g, x1, x2)?;
        Ok(l.map(|l| g.scalar(l)))
    }

    /// One Adam step on `(x1, x2)`, then the EMA and queue updates.
    pub fn train_step(&mut self, x1: &DenseMatrix, x2: &DenseMatrix) -> Result<StepOutcome> {
        let mut g = CompGraph::new();
        let (loss, params, f1, f2) = self.record_loss(&mut g, x1, x2)?;
        let (alignment, uniformity) = if f1.rows() >= 2 {
            align_uniform_decompose(&DenseMatrix::interleave_rows(&f1, &f2)?, self.config.tau)?
        } else {
            (alignment(&f1, &f2)?, f64::NAN)
        };
        let keys = match self.config.objective {
            Objective::Moco => Some(self.encode(x2, Which::Target)?),
            _ => None,
        };
        let value = match loss {
            Some(l) => {
                let v = g.scalar(l);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{} loss is {v}", self.config.objective)));
                }
                let grads = g.backward(l)?;
                let grads: Vec<DenseMatrix> = params.iter().map(|&p| grads.wrt(p)).collect();
                let mut targets: Vec<&mut DenseMatrix> = self.encoder.params_mut();
                if let Some(p) = self.predictor.as_mut() {
                    targets.push(&mut p.weight);
                    targets.push(&mut p.bias);
                }
                self.optimizer.step(&mut targets, &grads)?;
                self.ema_update();
                Some(v)
            }
            None => None,
        };
        if let (Some(q), Some(k)) = (self.queue.as_mut(), keys) {
            q.enqueue(&k)?;
        }
        Ok(StepOutcome {
            loss: value,
            alignment,
            uniformity,
        })
    }

    /// `ξ ← αξ + (1 − α)θ`; no-op without a target network.
    pub fn ema_update(&mut self) {
        let a = self.config.ema_momentum;
        if let Some(t) = self.target.as_mut() {
            for (xi, theta) in t.params_mut().into_iter().zip(self.encoder.params()) {
                for (x, th) in xi.as_mut_slice().iter_mut().zip(theta.as_slice()) {
                    *x = a * *x + (1.0 - a) * th;
                }
            }
        }
    }
}
