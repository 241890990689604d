//! Residual bottleneck adapters: `h' = W_up · gelu(W_down · h) + h`.
//!
//! `W_down` is stored `[N, M]` and `W_up` is stored `[M, N]`, so hidden
//! neuron `j` owns row `j` of `W_down` and column `j` of `W_up`. Removing a
//! neuron removes exactly that row and column.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    down: Tensor<T>,
    up: Tensor<T>,
    input_dim: usize,
    initial_hidden: usize,
    /// Index each surviving neuron had when the adapter was injected.
    origin: Vec<usize>,
}

impl<T: Scalar> Adapter<T> {
    /// Builds an adapter from `down: [N, M]` and `up: [M, N]`.
    pub fn new(down: Tensor<T>, up: Tensor<T>) -> Result<Self> {
        let [n, m] = down.shape() else {
            return Err(Error::Shape(format!("W_down must be 2-D, got {:?}", down.shape())));
        };
        let (n, m) = (*n, *m);
        if up.shape() != [m, n] {
            return Err(Error::Shape(format!(
                "W_up must be [{m}, {n}], got {:?}",
                up.shape()
            )));
        }
        if m == 0 {
            return Err(Error::Shape("adapter input dim must be positive".into()));
        }
        Ok(Self {
            down: down.with_requires_grad(true),
            up: up.with_requires_grad(true),
            input_dim: m,
            initial_hidden: n,
            origin: (0..n).collect(),
        })
    }

    /// Random `W_down` with std `1/sqrt(M)` and zero `W_up`, so a freshly
    /// injected adapter is an exact identity.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let std = 1.0 / (input_dim as f64).sqrt();
        let down = Tensor::from_fn(vec![hidden, input_dim], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        let up = Tensor::zeros(vec![input_dim, hidden]);
        Self::new(down, up)
    }

    /// Restores an adapter with a recorded pruning history.
    pub fn with_history(
        down: Tensor<T>,
        up: Tensor<T>,
        initial_hidden: usize,
        origin: Vec<usize>,
    ) -> Result<Self> {
        let mut a = Self::new(down, up)?;
        if origin.len() != a.hidden() || origin.iter().any(|&o| o >= initial_hidden) {
            return Err(Error::InvalidArgument(format!(
                "origin indices {origin:?} inconsistent with {} neurons of {initial_hidden}",
                a.hidden()
            )));
        }
        a.initial_hidden = initial_hidden;
        a.origin = origin;
        Ok(a)
    }

    pub fn hidden(&self) -> usize {
        self.origin.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn initial_hidden(&self) -> usize {
        self.initial_hidden
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn down(&self) -> &Tensor<T> {
        &self.down
    }

    pub fn up(&self) -> &Tensor<T> {
        &self.up
    }

    pub fn down_mut(&mut self) -> &mut Tensor<T> {
        &mut self.down
    }

    pub fn up_mut(&mut self) -> &mut Tensor<T> {
        &mut self.up
    }

    /// `2·N·M`; there are no bias terms.
    pub fn param_count(&self) -> usize {
        2 * self.hidden() * self.input_dim
    }

    /// `σ = M / N`, infinite once every neuron has been removed.
    pub fn compression(&self) -> f64 {
        if self.hidden() == 0 {
            f64::INFINITY
        } else {
            self.input_dim as f64 / self.hidden() as f64
        }
    }

    pub fn down_row(&self, j: usize) -> &[T] {
        &self.down.data()[j * self.input_dim..(j + 1) * self.input_dim]
    }

    /// Weights emitted by hidden neuron `j` (column `j` of `W_up`).
    pub fn up_col(&self, j: usize) -> impl Iterator<Item = T> + '_ {
        let n = self.hidden();
        (0..self.input_dim).map(move |l| self.up.data()[l * n + j])
    }

    /// Zeroes the row and column of neuron `j` without removing it.
    pub fn zero_neuron(&mut self, j: usize) -> Result<()> {
        let n = self.hidden();
        if j >= n {
            return Err(Error::NeuronOutOfRange { index: j, hidden: n });
        }
        let m = self.input_dim;
        self.down.data_mut()[j * m..(j + 1) * m]
            .iter_mut()
            .for_each(|x| *x = T::zero());
        for l in 0..m {
            self.up.data_mut()[l * n + j] = T::zero();
        }
        Ok(())
    }

    /// Keeps the listed neurons (deduplicated, original relative order).
    pub fn prune(&self, keep: &[usize]) -> Result<Self> {
        let n = self.hidden();
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if let Some(&bad) = keep.iter().find(|&&j| j >= n) {
            return Err(Error::NeuronOutOfRange { index: bad, hidden: n });
        }
        Ok(Self {
            down: self.down.select_rows(&keep),
            up: self.up.select_cols(&keep),
            input_dim: self.input_dim,
            initial_hidden: self.initial_hidden,
            origin: keep.iter().map(|&j| self.origin[j]).collect(),
        })
    }

    /// Records the adapter on a tape applied to `h: [rows, M]`. The returned
    /// pair is `(output, hidden activations)`; an adapter without neurons is
    /// the identity and yields no hidden node.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        down: Var,
        up: Var,
    ) -> Result<(Var, Option<Var>)> {
        if tape.shape(h).last() != Some(&self.input_dim) {
            return Err(Error::Shape(format!(
                "adapter expects last dim {}, got {:?}",
                self.input_dim,
                tape.shape(h)
            )));
        }
        if self.hidden() == 0 {
            return Ok((h, None));
        }
        let pre = tape.matmul_nt(h, down)?;
        let z = tape.gelu(pre)?;
        let r = tape.matmul_nt(z, up)?;
        Ok((tape.add(r, h)?, Some(z)))
    }

    /// Applies the adapter to `h` (a vector of length `M` or a `[rows, M]`
    /// matrix).
    pub fn forward(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        if h.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "adapter expects last dim {}, got {:?}",
                self.input_dim,
                h.shape()
            )));
        }
        if self.hidden() == 0 {
            return Tensor::new(h.shape().to_vec(), h.data().to_vec());
        }
        let mut tape = Tape::new();
        let hv = tape.constant(vec![h.rows(), h.cols()], h.data().to_vec())?;
        let d = tape.constant(self.down.shape().to_vec(), self.down.data().to_vec())?;
        let u = tape.constant(self.up.shape().to_vec(), self.up.data().to_vec())?;
        let (out, _) = self.forward_tape(&mut tape, hv, d, u)?;
        Tensor::new(h.shape().to_vec(), tape.value(out).to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Adapter<U> {
        Adapter {
            down: self.down.cast(),
            up: self.up.cast(),
            input_dim: self.input_dim,
            initial_hidden: self.initial_hidden,
            origin: self.origin.clone(),
        }
    }
}

/// A per-stage compression rate. `Infinite` leaves the stage without
/// adapters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma {
    Finite(f64),
    Infinite,
}

impl Sigma {
    pub fn value(self) -> f64 {
        match self {
            Sigma::Finite(s) => s,
            Sigma::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sigma::Finite(s) => write!(f, "{s}"),
            Sigma::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Sigma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Sigma::Finite(v) => s.serialize_f64(*v),
            Sigma::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Sigma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Sigma::Finite(v)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "∞") => Ok(Sigma::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid sigma {t:?}"))),
        }
    }
}

/// How adapters are sized at injection time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlan {
    /// `N_i = floor(M_i / σ_stage)`, at least 1 for finite σ.
    PerStageSigma(Vec<Sigma>),
    /// The same hidden size in every slot.
    FixedHidden(usize),
}

impl AdapterPlan {
    pub fn uniform(sigma: f64, stages: usize) -> Self {
        AdapterPlan::PerStageSigma(vec![Sigma::Finite(sigma); stages])
    }
}

/// Hidden size for an input dim under a finite or infinite σ.
pub fn hidden_for_sigma(input_dim: usize, sigma: Sigma) -> Result<Option<usize>> {
    match sigma {
        Sigma::Infinite => Ok(None),
        Sigma::Finite(s) if s.is_nan() || s < 1.0 => Err(Error::InvalidArgument(format!(
            "compression rate {s} must be >= 1"
        ))),
        Sigma::Finite(s) if s.is_infinite() => Ok(None),
        Sigma::Finite(s) => Ok(Some(((input_dim as f64 / s).floor() as usize).max(1))),
    }
}

/// Fills every adapter slot of `model` according to `plan`, replacing any
/// existing adapters. Initialization is deterministic in `seed`.
pub fn inject_adapters<T: Scalar>(model: &mut Model<T>, plan: &AdapterPlan, seed: u64) -> Result<()> {
    let stages = model.spec().stages.len();
    let hidden: Vec<Option<usize>> = match plan {
        AdapterPlan::PerStageSigma(sigmas) => {
            if sigmas.len() != stages {
                return Err(Error::InvalidArgument(format!(
                    "{} sigma values for {stages} stages",
                    sigmas.len()
                )));
            }
            let mut out = Vec::new();
            for slot in 0..model.num_slots() {
                let stage = model.slot_stage(slot);
                out.push(hidden_for_sigma(model.slot_input_dim(slot), sigmas[stage])?);
            }
            out
        }
        AdapterPlan::FixedHidden(n) => {
            if *n == 0 {
                return Err(Error::InvalidArgument("fixed hidden size must be positive".into()));
            }
            vec![Some(*n); model.num_slots()]
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (slot, n) in hidden.into_iter().enumerate() {
        let adapter = match n {
            Some(n) => Some(Adapter::init(model.slot_input_dim(slot), n, &mut rng)?),
            None => None,
        };
        model.set_adapter(slot, adapter)?;
    }
    Ok(())
}

/// Per-adapter and aggregate compression of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionState {
    /// `(slot, σ_i)` for every injected adapter; infinite once emptied.
    pub per_adapter: Vec<(usize, f64)>,
    /// `Σ M_i² / Σ M_i·N_i` over injected adapters.
    pub global: f64,
}

/// Aggregate σ over `(M_i, N_i)` pairs: `Σ M_i² / Σ M_i·N_i`.
///
/// Equals the common ratio when every adapter shares one σ, and grows
/// without bound as hidden neurons are removed.
pub fn global_sigma(dims: impl IntoIterator<Item = (usize, usize)>) -> f64 {
    let (num, den) = dims.into_iter().fold((0.0, 0.0), |(num, den), (m, n)| {
        (num + (m * m) as f64, den + (m * n) as f64)
    });
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

pub fn compression_state<T: Scalar>(model: &Model<T>) -> CompressionState {
    let adapters = model.adapters();
    CompressionState {
        per_adapter: adapters.iter().map(|(s, a)| (*s, a.compression())).collect(),
        global: global_sigma(adapters.iter().map(|(_, a)| (a.input_dim(), a.hidden()))),
    }
}
