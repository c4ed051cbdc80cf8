//! Projection heads, negative queues and the cross-domain contrastive loss.

use crate::autograd::{Real, Tape, Var};
use crate::encoder::Clues;
use crate::error::{Result, ScdError};
use crate::nn::{init_batch_norm, init_linear, Forward, ParamStore};
use ndarray::{Array2, ArrayD, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Norm guard used when normalizing projections.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Key-encoder decay `m`.
    pub momentum: f64,
    /// Capacity of each negative queue.
    pub queue_len: usize,
    /// Weights of the (q_g,k_s), (q_g,k_t), (q_s,k_g), (q_t,k_g) terms.
    pub lambda: [f64; 4],
    pub contrast_dim: usize,
    /// Hidden width of the projection heads; defaults to the model width.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    /// Batch-normalize the head's hidden layer.
    #[serde(default)]
    pub head_batch_norm: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.2,
            momentum: 0.999,
            queue_len: 8192,
            lambda: [0.25; 4],
            contrast_dim: 128,
            head_hidden: None,
            head_batch_norm: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ScdError::config("contrast.tau", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(ScdError::config("contrast.momentum", "must lie in [0, 1]"));
        }
        if self.queue_len == 0 {
            return Err(ScdError::config("contrast.queue_len", "must be >= 1"));
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(ScdError::config("contrast.lambda", "weights must be finite and >= 0"));
        }
        if self.contrast_dim == 0 || self.head_hidden == Some(0) {
            return Err(ScdError::config("contrast.contrast_dim", "must be >= 1"));
        }
        Ok(())
    }
}

/// Adds `head.s`, `head.t` (C2 -> hidden -> dim) and `head.g` (2*C2 -> hidden -> dim).
pub fn init_heads<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    model_dim: usize,
    cfg: &ContrastConfig,
    rng: &mut R,
) {
    let hidden = cfg.head_hidden.unwrap_or(model_dim);
    for (name, fan_in) in [("s", model_dim), ("t", model_dim), ("g", 2 * model_dim)] {
        init_linear(store, &format!("head.{name}.fc1"), fan_in, hidden, rng);
        if cfg.head_batch_norm {
            init_batch_norm(store, &format!("head.{name}.bn"), hidden);
        }
        init_linear(store, &format!("head.{name}.fc2"), hidden, cfg.contrast_dim, rng);
    }
}

fn head<F: Real>(fw: &mut Forward<'_, F>, x: Var, name: &str) -> Var {
    let mut h = fw.linear(x, &format!("head.{name}.fc1"));
    let bn = format!("head.{name}.bn");
    if fw.params().get(&format!("{bn}.gamma")).is_some() {
        h = fw.batch_norm(h, &bn);
    }
    let h = fw.tape.relu(h);
    let h = fw.linear(h, &format!("head.{name}.fc2"));
    fw.tape.l2_normalize(h, F::lit(NORM_EPS))
}

/// Unit-norm projections `[N, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub s: Var,
    pub t: Var,
    pub g: Var,
}

/// `q_s = F_s(z_s)`, `q_t = F_t(z_t)`, `q_g = F_g([z_t, z_s])`, each L2-normalized.
pub fn project<F: Real>(fw: &mut Forward<'_, F>, clues: Clues) -> Projections {
    let s = head(fw, clues.z_s, "s");
    let t = head(fw, clues.z_t, "t");
    let cat = fw.tape.concat_last(clues.z_t, clues.z_s);
    let g = head(fw, cat, "g");
    Projections { s, t, g }
}

/// Fixed-capacity FIFO of unit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue<F> {
    storage: Array2<F>,
    cursor: usize,
    len: usize,
}

impl<F: Real> NegativeQueue<F> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeQueue {
            storage: Array2::zeros((capacity, dim)),
            cursor: 0,
            len: 0,
        }
    }

    /// A full queue of random unit vectors.
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Self {
        let mut storage = Array2::from_shape_simple_fn((capacity, dim), || F::lit(rng.sample::<f64, _>(StandardNormal)));
        for mut row in storage.rows_mut() {
            let n = row.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b).sqrt() + F::lit(NORM_EPS);
            row.mapv_inplace(|v| v / n);
        }
        NegativeQueue {
            storage,
            cursor: 0,
            len: capacity,
        }
    }

    /// Rebuilds a queue from raw parts (used by checkpoint loading).
    pub fn from_parts(storage: Array2<F>, cursor: usize, len: usize) -> Result<Self> {
        let cap = storage.nrows();
        if cap == 0 || cursor >= cap || len > cap {
            return Err(ScdError::Checkpoint(format!(
                "queue state out of range: capacity {cap}, cursor {cursor}, len {len}"
            )));
        }
        Ok(NegativeQueue { storage, cursor, len })
    }

    pub fn capacity(&self) -> usize {
        self.storage.nrows()
    }

    pub fn dim(&self) -> usize {
        self.storage.ncols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn storage(&self) -> &Array2<F> {
        &self.storage
    }

    /// Appends keys in row order, evicting the oldest entries once full.
    pub fn enqueue(&mut self, keys: ArrayView2<'_, F>) -> Result<()> {
        if keys.ncols() != self.dim() {
            return Err(ScdError::Shape(format!(
                "queue holds dim {}, got keys of dim {}",
                self.dim(),
                keys.ncols()
            )));
        }
        let cap = self.capacity();
        for row in keys.rows() {
            self.storage.row_mut(self.cursor).assign(&row);
            self.cursor = (self.cursor + 1) % cap;
            self.len = (self.len + 1).min(cap);
        }
        Ok(())
    }

    /// Contents from oldest to newest.
    pub fn contents(&self) -> Array2<F> {
        let cap = self.capacity();
        let start = (self.cursor + cap - self.len) % cap;
        let idx: Vec<usize> = (0..self.len).map(|i| (start + i) % cap).collect();
        self.storage.select(Axis(0), &idx)
    }

    /// Stored vectors as `[dim, len]`, ready for `q @ M`.
    fn negatives_t(&self) -> Array2<F> {
        if self.len == self.capacity() {
            self.storage.t().to_owned()
        } else {
            self.contents().t().to_owned()
        }
    }
}

/// `-log(h(u,v) / (h(u,v) + sum_m h(u,m)))` with `h(a,b) = exp(a.b / tau)`.
pub fn info_nce(u: &[f64], v: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(ScdError::config("tau", "must be > 0"));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let pos = dot(u, v);
    let logits: Vec<f64> = std::iter::once(pos).chain(negatives.iter().map(|m| dot(u, m))).collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Batch-mean InfoNCE on the tape. `q: [B, D]` carries gradient; `keys` and
/// the queue enter as constants.
pub fn info_nce_batch<F: Real>(
    tape: &mut Tape<F>,
    q: Var,
    keys: &Array2<F>,
    queue: &NegativeQueue<F>,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(ScdError::config("tau", "must be > 0"));
    }
    let b = tape.shape(q)[0];
    if keys.dim() != (b, tape.shape(q)[1]) {
        return Err(ScdError::Shape(format!("keys {:?} do not match queries {:?}", keys.dim(), tape.shape(q))));
    }
    let k = tape.constant(keys.clone().into_dyn());
    let pos = tape.mul(q, k);
    let pos = tape.sum_last(pos);
    let mut logits = tape.reshape(pos, &[b, 1]);
    if !queue.is_empty() {
        let m = tape.constant(queue.negatives_t().into_dyn());
        let neg = tape.matmul(q, m);
        logits = tape.concat_last(logits, neg);
    }
    let logits = tape.scale(logits, F::lit(1.0 / tau));
    Ok(tape.cross_entropy(logits, &vec![0; b]))
}

/// Key-side projections, detached.
#[derive(Clone, Debug)]
pub struct Keys<F> {
    pub s: Array2<F>,
    pub t: Array2<F>,
    pub g: Array2<F>,
}

impl<F: Real> Keys<F> {
    pub fn from_tape(tape: &Tape<F>, p: Projections) -> Self {
        let take = |v: Var| -> Array2<F> { tape.value(v).clone().into_dimensionality().expect("projection is 2-D") };
        Keys {
            s: take(p.s),
            t: take(p.t),
            g: take(p.g),
        }
    }
}

/// The three queues, keyed by representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Queues<F> {
    pub s: NegativeQueue<F>,
    pub t: NegativeQueue<F>,
    pub g: NegativeQueue<F>,
}

impl<F: Real> Queues<F> {
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Self {
        Queues {
            s: NegativeQueue::random(capacity, dim, rng),
            t: NegativeQueue::random(capacity, dim, rng),
            g: NegativeQueue::random(capacity, dim, rng),
        }
    }

    pub fn empty(capacity: usize, dim: usize) -> Self {
        Queues {
            s: NegativeQueue::new(capacity, dim),
            t: NegativeQueue::new(capacity, dim),
            g: NegativeQueue::new(capacity, dim),
        }
    }

    pub fn enqueue(&mut self, keys: &Keys<F>) -> Result<()> {
        self.s.enqueue(keys.s.view())?;
        self.t.enqueue(keys.t.view())?;
        self.g.enqueue(keys.g.view())
    }
}

/// Total loss plus the four weighted-term inputs, in the order
/// (q_g,k_s), (q_g,k_t), (q_s,k_g), (q_t,k_g).
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub terms: [Var; 4],
}

pub fn cross_domain_loss<F: Real>(
    tape: &mut Tape<F>,
    q: Projections,
    k: &Keys<F>,
    queues: &Queues<F>,
    lambda: [f64; 4],
    tau: f64,
) -> Result<LossTerms> {
    let terms = [
        info_nce_batch(tape, q.g, &k.s, &queues.s, tau)?,
        info_nce_batch(tape, q.g, &k.t, &queues.t, tau)?,
        info_nce_batch(tape, q.s, &k.g, &queues.g, tau)?,
        info_nce_batch(tape, q.t, &k.g, &queues.g, tau)?,
    ];
    let mut total = tape.scale(terms[0], F::lit(lambda[0]));
    for (t, l) in terms.iter().zip(lambda).skip(1) {
        let w = tape.scale(*t, F::lit(l));
        total = tape.add(total, w);
    }
    Ok(LossTerms { total, terms })
}

/// `xi <- xi * m + theta * (1 - m)` for every tensor.
pub fn momentum_update<F: Real>(theta: &ParamStore<F>, xi: &mut ParamStore<F>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(ScdError::config("momentum", "must lie in [0, 1]"));
    }
    xi.check_compatible(theta)?;
    let (mf, rest) = (F::lit(m), F::lit(1.0 - m));
    for (name, p) in xi.iter_mut() {
        let src = theta.value(name);
        ndarray::Zip::from(&mut p.value)
            .and(src)
            .for_each(|x, &t| *x = *x * mf + t * rest);
    }
    Ok(())
}

/// Converts a `[N, D]` tape value into row vectors.
pub fn rows_of<F: Real>(a: &ArrayD<F>) -> Vec<Vec<f64>> {
    let d = *a.shape().last().unwrap_or(&0);
    a.as_standard_layout()
        .as_slice()
        .unwrap()
        .chunks(d.max(1))
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}
