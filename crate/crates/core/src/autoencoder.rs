//! K encoder/decoder pairs of sine-activated MLPs; pair `k` handles the
//! `k`-th time derivative of the full-order solution.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DualMap, Tape, Var};
use crate::error::{AutodiffError, ModelError};

/// Encoder layer widths, input first (e.g. `[1001, 250, 100, 100, 5]`).
/// The decoder uses the reversed widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self, ModelError> {
        if widths.len() < 2 {
            return Err(ModelError::Architecture(
                "need at least input and output widths".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(ModelError::Architecture("zero layer width".into()));
        }
        Ok(Self { widths })
    }

    /// Parses `"1001-250-100-100-5"`.
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let widths = s
            .split('-')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| ModelError::Architecture(format!("bad width {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(widths)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        self.widths.iter().rev().copied().collect()
    }
}

impl std::fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// Fully connected network; `sin` after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `out x in` per layer.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Tape handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Mlp {
    /// Uniform weights on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut weights = Vec::with_capacity(widths.len() - 1);
        let mut biases = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-bound..=bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Self { weights, biases }
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Whether layer `i` is followed by a sine activation.
    pub fn has_activation(&self, layer: usize) -> bool {
        layer + 1 < self.layer_count()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    /// Row-batch forward pass.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.dot(&self.weights[0].t()) + &self.biases[0];
        for i in 1..self.layer_count() {
            h.mapv_inplace(f64::sin);
            h = h.dot(&self.weights[i].t()) + &self.biases[i];
        }
        h
    }

    pub fn forward_one(&self, x: &Array1<f64>) -> Array1<f64> {
        self.forward(&x.view().insert_axis(Axis(0)).to_owned())
            .row(0)
            .to_owned()
    }

    /// Places the parameters on a tape as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self
                .biases
                .iter()
                .map(|b| tape.param(b.view().insert_axis(Axis(0)).to_owned()))
                .collect(),
        }
    }

    /// Recorded forward pass of `x` (row batch).
    pub fn forward_taped(tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var, AutodiffError> {
        let n = vars.weights.len();
        let mut h = x;
        for i in 0..n {
            let pre = tape.matmul_t(h, vars.weights[i])?;
            h = tape.add_row(pre, vars.biases[i])?;
            if i + 1 < n {
                h = tape.sin(h);
            }
        }
        Ok(h)
    }

    /// Recorded forward pass together with the directional derivative along
    /// `tangent` (row batch, same shape as `x`). Returns `(f(x), Df(x) t)`.
    pub fn jvp_taped(
        tape: &mut Tape,
        vars: &MlpVars,
        x: Var,
        tangent: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let n = vars.weights.len();
        let (mut h, mut t) = (x, tangent);
        for i in 0..n {
            let pre = tape.matmul_t(h, vars.weights[i])?;
            let pre = tape.add_row(pre, vars.biases[i])?;
            let t_pre = tape.matmul_t(t, vars.weights[i])?;
            if i + 1 < n {
                h = tape.sin(pre);
                let c = tape.cos(pre);
                t = tape.mul(c, t_pre)?;
            } else {
                h = pre;
                t = t_pre;
            }
        }
        Ok((h, t))
    }

    /// Flat mutable views of all parameter buffers, weights then biases per layer.
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }
}

impl MlpVars {
    /// Leaf handles in the same order as [`Mlp::buffers`].
    pub fn leaves(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

impl DualMap for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }

    fn eval_dual(&self, x: &Array2<f64>, t: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let n = self.layer_count();
        let mut h = x.clone();
        let mut dt = t.clone();
        for i in 0..n {
            let w = &self.weights[i];
            let pre = h.dot(&w.t()) + &self.biases[i];
            let t_pre = dt.dot(&w.t());
            if i + 1 < n {
                dt = &pre.mapv(f64::cos) * &t_pre;
                h = pre.mapv(f64::sin);
            } else {
                h = pre;
                dt = t_pre;
            }
        }
        (h, dt)
    }
}

/// K autoencoders sharing one architecture and latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderStack {
    pub spec: MlpSpec,
    pub encoders: Vec<Mlp>,
    pub decoders: Vec<Mlp>,
}

/// Tape handles for a whole stack.
#[derive(Debug, Clone)]
pub struct StackVars {
    pub encoders: Vec<MlpVars>,
    pub decoders: Vec<MlpVars>,
}

impl StackVars {
    /// Leaf handles in the same order as [`AutoencoderStack::buffers`].
    pub fn leaves(&self) -> Vec<Var> {
        self.encoders
            .iter()
            .zip(&self.decoders)
            .flat_map(|(e, d)| {
                let mut v = e.leaves();
                v.extend(d.leaves());
                v
            })
            .collect()
    }
}

impl AutoencoderStack {
    /// Deterministic given `seed`.
    pub fn init(spec: MlpSpec, k: usize, seed: u64) -> Result<Self, ModelError> {
        if k == 0 {
            return Err(ModelError::InvalidArgument(
                "need at least one autoencoder".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec_widths = spec.decoder_widths();
        let mut encoders = Vec::with_capacity(k);
        let mut decoders = Vec::with_capacity(k);
        for _ in 0..k {
            encoders.push(Mlp::init(&spec.widths, &mut rng));
            decoders.push(Mlp::init(&dec_widths, &mut rng));
        }
        Ok(Self {
            spec,
            encoders,
            decoders,
        })
    }

    /// Builds a stack from explicit networks, checking the shared architecture.
    pub fn from_parts(
        spec: MlpSpec,
        encoders: Vec<Mlp>,
        decoders: Vec<Mlp>,
    ) -> Result<Self, ModelError> {
        if encoders.is_empty() || encoders.len() != decoders.len() {
            return Err(ModelError::Architecture(format!(
                "{} encoders vs {} decoders",
                encoders.len(),
                decoders.len()
            )));
        }
        let dec_widths = spec.decoder_widths();
        let widths_of = |m: &Mlp| {
            let mut w = vec![m.input_dim()];
            w.extend(m.weights.iter().map(|l| l.nrows()));
            w
        };
        for (e, d) in encoders.iter().zip(&decoders) {
            if widths_of(e) != spec.widths || widths_of(d) != dec_widths {
                return Err(ModelError::Architecture(format!(
                    "network widths do not match {spec}"
                )));
            }
        }
        Ok(Self {
            spec,
            encoders,
            decoders,
        })
    }

    pub fn k(&self) -> usize {
        self.encoders.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    pub fn frame_dim(&self) -> usize {
        self.spec.input_dim()
    }

    fn check(&self, k: usize) -> Result<(), ModelError> {
        if k >= self.k() {
            return Err(ModelError::Index {
                index: k,
                k: self.k(),
            });
        }
        Ok(())
    }

    /// Encodes a row batch of frames with encoder `k`.
    pub fn encode(&self, k: usize, frames: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check(k)?;
        if frames.ncols() != self.frame_dim() {
            return Err(AutodiffError::shape(
                "encode",
                frames.dim(),
                (frames.nrows(), self.frame_dim()),
            )
            .into());
        }
        Ok(self.encoders[k].forward(frames))
    }

    /// Decodes a row batch of latents with decoder `k`.
    pub fn decode(&self, k: usize, latents: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check(k)?;
        if latents.ncols() != self.latent_dim() {
            return Err(AutodiffError::shape(
                "decode",
                latents.dim(),
                (latents.nrows(), self.latent_dim()),
            )
            .into());
        }
        Ok(self.decoders[k].forward(latents))
    }

    pub fn register(&self, tape: &mut Tape) -> StackVars {
        StackVars {
            encoders: self.encoders.iter().map(|m| m.register(tape)).collect(),
            decoders: self.decoders.iter().map(|m| m.register(tape)).collect(),
        }
    }

    /// Parameter buffers: for each `k`, encoder then decoder.
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.encoders
            .iter()
            .zip(&self.decoders)
            .flat_map(|(e, d)| {
                let mut v = e.buffers();
                v.extend(d.buffers());
                v
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoders
            .iter_mut()
            .zip(self.decoders.iter_mut())
            .flat_map(|(e, d)| {
                let mut v = e.buffers_mut();
                v.extend(d.buffers_mut());
                v
            })
            .collect()
    }

    /// Shapes of the buffers returned by [`Self::buffers`].
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        let net = |m: &Mlp| {
            m.weights
                .iter()
                .zip(&m.biases)
                .flat_map(|(w, b)| [vec![w.nrows(), w.ncols()], vec![b.len()]])
                .collect::<Vec<_>>()
        };
        self.encoders
            .iter()
            .zip(&self.decoders)
            .flat_map(|(e, d)| {
                let mut v = net(e);
                v.extend(net(d));
                v
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}
