//! Named parameter storage and the forward-pass context that binds a
//! [`ParamStore`] to a [`Tape`].

use crate::autograd::{BatchStats, Gradients, Real, Tape, Var};
use crate::error::{Result, ScdError};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Role of a stored tensor; decides weight decay and whether it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Affine weight; the only kind that receives weight decay.
    Weight,
    Bias,
    /// Normalization scale or shift.
    Norm,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Norm => 2,
            ParamKind::Buffer => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Norm,
            3 => ParamKind::Buffer,
            _ => return None,
        })
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub kind: ParamKind,
}

/// Ordered map of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: IndexMap<String, Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>, kind: ParamKind) {
        self.params.insert(name.into(), Param { value, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &ArrayD<F> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Keeps only entries whose name starts with one of `prefixes`.
    pub fn filtered(&self, prefixes: &[&str]) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, replacing equal names.
    pub fn merge(&mut self, other: &ParamStore<F>) {
        for (n, p) in other.iter() {
            self.params.insert(n.clone(), p.clone());
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.mapv(|x| G::lit(x.as_f64())),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks that `other` has the same names, kinds and shapes in order.
    pub fn check_compatible(&self, other: &ParamStore<F>) -> Result<()> {
        if self.len() != other.len() {
            return Err(ScdError::Shape(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, pa), (nb, pb)) in self.iter().zip(other.iter()) {
            if na != nb || pa.kind != pb.kind || pa.value.shape() != pb.value.shape() {
                return Err(ScdError::Shape(format!("parameter `{na}` does not match `{nb}`")));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.iter().all(|x| x.is_finite()))
    }

    /// Order-sensitive FNV-1a digest of names and value bits, used to
    /// confirm parameters were left untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (n, p) in &self.params {
            n.bytes().for_each(&mut eat);
            for x in p.value.iter() {
                x.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.random_range(-bound..=bound))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Registers a `[fan_in, fan_out]` weight and `[fan_out]` bias under
/// `{prefix}.w` / `{prefix}.b`.
pub fn init_linear<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    store.insert(
        format!("{prefix}.w"),
        fan_in_uniform(&[fan_in, fan_out], fan_in, rng),
        ParamKind::Weight,
    );
    store.insert(
        format!("{prefix}.b"),
        fan_in_uniform(&[fan_out], fan_in, rng),
        ParamKind::Bias,
    );
}

/// Scale 1, shift 0, plus running mean 0 / variance 1 buffers.
pub fn init_batch_norm<F: Real>(store: &mut ParamStore<F>, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[channels])), ParamKind::Norm);
    store.insert(format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[channels])), ParamKind::Norm);
    store.insert(format!("{prefix}.mean"), ArrayD::zeros(IxDyn(&[channels])), ParamKind::Buffer);
    store.insert(format!("{prefix}.var"), ArrayD::ones(IxDyn(&[channels])), ParamKind::Buffer);
}

pub fn init_layer_norm<F: Real>(store: &mut ParamStore<F>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[dim])), ParamKind::Norm);
    store.insert(format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[dim])), ParamKind::Norm);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization; running averages are recorded.
    Train,
    /// Running statistics in normalization.
    Eval,
}

/// One forward pass: a tape plus lazily registered parameter leaves.
pub struct Forward<'a, F: Real> {
    pub tape: Tape<F>,
    params: &'a ParamStore<F>,
    vars: IndexMap<String, Var>,
    mode: Mode,
    trainable: bool,
    bn_stats: Vec<(String, BatchStats<F>)>,
}

impl<'a, F: Real> Forward<'a, F> {
    /// `trainable = false` registers parameters as constants so no gradient
    /// can reach them.
    pub fn new(params: &'a ParamStore<F>, mode: Mode, trainable: bool) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            vars: IndexMap::new(),
            mode,
            trainable,
            bn_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore<F> {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let param = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let v = if self.trainable && param.kind.trainable() {
            self.tape.param(param.value.clone())
        } else {
            self.tape.constant(param.value.clone())
        };
        self.vars.insert(name.to_string(), v);
        v
    }

    /// `x[..., in] @ w + b` over the last axis.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let shape = self.tape.shape(x).to_vec();
        let din = *shape.last().unwrap();
        let dout = self.tape.shape(w)[1];
        let rows = shape.iter().product::<usize>() / din.max(1);
        let x2 = self.tape.reshape(x, &[rows, din]);
        let y = self.tape.matmul(x2, w);
        let y = self.tape.add_bias(y, b);
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = dout;
        self.tape.reshape(y, &oshape)
    }

    /// Batch normalization over the last (channel) axis.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        let eps = F::lit(BN_EPS);
        let xhat = match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, eps);
                self.bn_stats.push((prefix.to_string(), stats));
                y
            }
            Mode::Eval => {
                let mean = self.params.value(&format!("{prefix}.mean"));
                let var = self.params.value(&format!("{prefix}.var"));
                let inv = var.mapv(|v| F::one() / (v + eps).sqrt());
                let shift = -(mean * &inv);
                let inv = self.tape.constant(inv);
                let shift = self.tape.constant(shift);
                let y = self.tape.mul_bias(x, inv);
                self.tape.add_bias(y, shift)
            }
        };
        let y = self.tape.mul_bias(xhat, gamma);
        self.tape.add_bias(y, beta)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        let y = self.tape.layer_norm(x, F::lit(LN_EPS));
        let y = self.tape.mul_bias(y, gamma);
        self.tape.add_bias(y, beta)
    }

    /// Gradients of every registered trainable parameter, by name.
    pub fn named_grads(&self, grads: &Gradients<F>) -> IndexMap<String, ArrayD<F>> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }

    /// Batch statistics gathered in training mode, in call order.
    pub fn batch_stats(&self) -> &[(String, BatchStats<F>)] {
        &self.bn_stats
    }
}

/// Folds recorded batch statistics into running averages (unbiased variance).
pub fn update_running_stats<F: Real>(store: &mut ParamStore<F>, stats: &[(String, BatchStats<F>)]) {
    let mom = F::lit(BN_MOMENTUM);
    for (prefix, s) in stats {
        let n = s.count;
        let unbias = if n > 1 { F::lit(n as f64 / (n as f64 - 1.0)) } else { F::one() };
        if let Some(p) = store.get_mut(&format!("{prefix}.mean")) {
            for (r, &m) in p.value.iter_mut().zip(&s.mean) {
                *r = *r * (F::one() - mom) + m * mom;
            }
        }
        if let Some(p) = store.get_mut(&format!("{prefix}.var")) {
            for (r, &v) in p.value.iter_mut().zip(&s.var) {
                *r = *r * (F::one() - mom) + v * unbias * mom;
            }
        }
    }
}
