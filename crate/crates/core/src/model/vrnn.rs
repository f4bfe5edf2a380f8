//! Variational recurrent network with a learned prior.
//!
//! Per frame: the encoder maps the previous sparse frame to `h_prev` (on the
//! latent grid) plus skip features; the prior cell maps `h_prev` to a Gaussian
//! over `z`; in training the posterior cell maps the target's encoding to a
//! second Gaussian and `z` is drawn from it; the predictor cell consumes
//! `[h_prev; z]`, and the decoder turns its hidden state and the skips into a
//! full-resolution map.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, NetKind};
use super::layers::{Conv, GroupNorm, ResBlock};
use crate::autodiff::{Activation, Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::frame::FrameBatch;
use crate::params::{init_sparse_kernel, Bound, ParamId, ParamStore};
use crate::recurrent::{convlstm_step, ConvLstmState, ConvLstmWeights, LstmVars};
use crate::sparse::{sparse_conv2d, window_counts};

/// Per-cell mean and log standard deviation over the latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, log_sigma: Tensor) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(Error::shape(
                "GaussianParams",
                format!("mu {} vs log_sigma {}", mu.shape(), log_sigma.shape()),
            ));
        }
        Ok(GaussianParams { mu, log_sigma })
    }

    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }

    pub fn enter(&self, g: &mut Graph) -> GaussVars {
        GaussVars {
            mu: g.constant(self.mu.clone()),
            log_sigma: g.constant(self.log_sigma.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl GaussVars {
    pub fn values(&self, g: &Graph) -> GaussianParams {
        GaussianParams {
            mu: g.value(self.mu).clone(),
            log_sigma: g.value(self.log_sigma).clone(),
        }
    }
}

/// Recurrent states of the prior, posterior and predictor cells.
#[derive(Clone, Debug, PartialEq)]
pub struct VrnnState {
    pub prior: ConvLstmState,
    pub posterior: ConvLstmState,
    pub predictor: ConvLstmState,
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub prior: LstmVars,
    pub posterior: LstmVars,
    pub predictor: LstmVars,
}

impl VrnnState {
    pub fn enter(&self, g: &mut Graph) -> StateVars {
        StateVars {
            prior: self.prior.enter(g),
            posterior: self.posterior.enter(g),
            predictor: self.predictor.enter(g),
        }
    }
}

impl StateVars {
    pub fn values(&self, g: &Graph) -> VrnnState {
        VrnnState {
            prior: self.prior.values(g),
            posterior: self.posterior.values(g),
            predictor: self.predictor.values(g),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// z from the posterior of the target frame.
    Train,
    /// z from the learned prior. A supplied target still advances the
    /// posterior cell so that later training-mode steps see a current state.
    Infer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepOptions {
    /// Forces sigma to zero so that z equals the mean.
    pub zero_sigma: bool,
}

pub struct Encoding {
    pub h: Var,
    /// Full-resolution sparse stem followed by each trunk stage, shallow to deep.
    pub skips: Vec<Var>,
}

pub struct StepVars {
    pub prediction: Var,
    pub prior: GaussVars,
    pub posterior: Option<GaussVars>,
    pub z: Var,
    pub state: StateVars,
}

/// Values produced by one [`VrnnModel::next_frame`] call.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// (n, 1, h, w) dense depth in meters or mask probability.
    pub prediction: Tensor,
    pub prior: GaussianParams,
    pub posterior: Option<GaussianParams>,
    pub state: VrnnState,
}

#[derive(Clone, Debug)]
struct SparseLayer {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct GaussianHead {
    cell: ConvLstmWeights,
    out: Conv,
}

impl GaussianHead {
    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        state: LstmVars,
    ) -> Result<(GaussVars, LstmVars)> {
        let state = convlstm_step(g, p, &self.cell, x, state)?;
        let out = self.out.forward(g, p, state.h)?;
        let parts = g.split_channels(out, 2)?;
        Ok((
            GaussVars {
                mu: parts[0],
                log_sigma: parts[1],
            },
            state,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct VrnnModel {
    kind: NetKind,
    config: ModelConfig,
    params: ParamStore,
    sparse: Vec<SparseLayer>,
    stages: Vec<Vec<ResBlock>>,
    encoding: Conv,
    prior: GaussianHead,
    posterior: GaussianHead,
    predictor: ConvLstmWeights,
    decoder: Vec<(Conv, GroupNorm)>,
    head_hidden: Conv,
    head_out: Conv,
}

/// Logit that the Depth head maps to `depth` meters.
fn depth_output_inverse(cfg: &ModelConfig, depth: f64) -> f64 {
    let s = cfg.max_range * (depth / cfg.max_range).atanh() / cfg.depth_scale;
    s + (-(-s).exp_m1()).ln()
}

impl VrnnModel {
    pub fn new(kind: NetKind, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;

        let mut sparse = Vec::new();
        let mut in_c = 1;
        for (i, (&c, &k)) in cfg.sparse_channels.iter().zip(&cfg.sparse_kernels).enumerate() {
            let kernel = store.add(format!("enc.sparse{i}.kernel"), init_sparse_kernel(c, in_c, k, &mut rng));
            let bias = store.add(format!("enc.sparse{i}.bias"), Tensor::zeros(Shape::new(1, c, 1, 1)));
            sparse.push(SparseLayer { kernel, bias });
            in_c = c;
        }

        let mut stages = Vec::new();
        for (s, &c) in cfg.trunk_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(
                    &mut store,
                    &format!("enc.stage{s}.block{b}"),
                    in_c,
                    c,
                    stride,
                    cfg.norm_groups,
                    cfg.norm_eps,
                    &mut rng,
                ));
                in_c = c;
            }
            stages.push(blocks);
        }
        let encoding = Conv::new(&mut store, "enc.out", in_c, cfg.encoding_channels, 1, 1, true, 0.5, &mut rng);

        let gaussian = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| GaussianHead {
            cell: ConvLstmWeights::new(
                store,
                &format!("{name}.cell"),
                cfg.encoding_channels,
                cfg.lstm_hidden,
                cfg.lstm_kernel,
                rng,
            ),
            out: Conv::zeroed(store, &format!("{name}.out"), cfg.lstm_hidden, 2 * cfg.latent_channels, 1),
        };
        let prior = gaussian(&mut store, "prior", &mut rng);
        let posterior = gaussian(&mut store, "posterior", &mut rng);
        let predictor = ConvLstmWeights::new(
            &mut store,
            "predictor.cell",
            cfg.encoding_channels + cfg.latent_channels,
            cfg.lstm_hidden,
            cfg.lstm_kernel,
            &mut rng,
        );

        let n_stages = cfg.trunk_channels.len();
        let mut decoder = Vec::new();
        let mut below = cfg.lstm_hidden;
        for level in 0..n_stages {
            let skip_c = cfg.trunk_channels[n_stages - 1 - level];
            let out_c = cfg.decoder_channels[level];
            let conv = Conv::new(&mut store, &format!("dec.level{level}.conv"), below + skip_c, out_c, 3, 1, false, 1.0, &mut rng);
            let norm = GroupNorm::new(&mut store, &format!("dec.level{level}.norm"), out_c, cfg.norm_groups, cfg.norm_eps);
            decoder.push((conv, norm));
            below = out_c;
        }
        let head_c = cfg.decoder_channels[n_stages];
        let head_hidden = Conv::new(&mut store, "dec.head.hidden", below + cfg.sparse_channels[2] + 2, head_c, 3, 1, true, 1.0, &mut rng);
        let head_out = Conv::zeroed(&mut store, "dec.head.out", head_c, 1, 3);
        if kind == NetKind::Depth && !cfg.input_residual {
            let b = head_out.bias.expect("head has bias");
            store.get_mut(b).data_mut()[0] = depth_output_inverse(cfg, cfg.depth_prior);
        }

        Ok(VrnnModel {
            kind,
            config,
            params: store,
            sparse,
            stages,
            encoding,
            prior,
            posterior,
            predictor,
            decoder,
            head_hidden,
            head_out,
        })
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_shape(&self, n: usize) -> Shape {
        let (h, w) = self.config.latent_grid();
        Shape::new(n, self.config.latent_channels, h, w)
    }

    pub fn initial_state(&self, n: usize) -> VrnnState {
        let (h, w) = self.config.latent_grid();
        let s = Shape::new(n, self.config.lstm_hidden, h, w);
        VrnnState {
            prior: ConvLstmState::zeros(s),
            posterior: ConvLstmState::zeros(s),
            predictor: ConvLstmState::zeros(s),
        }
    }

    /// Copies the posterior head's weights into the prior head.
    pub fn tie_prior_to_posterior(&mut self) {
        let pairs = [
            (self.posterior.cell.kernel, self.prior.cell.kernel),
            (self.posterior.cell.bias, self.prior.cell.bias),
            (self.posterior.out.weight, self.prior.out.weight),
            (self.posterior.out.bias.expect("bias"), self.prior.out.bias.expect("bias")),
        ];
        for (src, dst) in pairs {
            *self.params.get_mut(dst) = self.params.get(src).clone();
        }
    }

    /// Parameter ids of the posterior head (cell kernel, cell bias, output weight, output bias).
    pub fn posterior_head_params(&self) -> [ParamId; 4] {
        [
            self.posterior.cell.kernel,
            self.posterior.cell.bias,
            self.posterior.out.weight,
            self.posterior.out.bias.expect("bias"),
        ]
    }

    /// Parameter id of the final decoder kernel.
    pub fn decoder_output_kernel(&self) -> ParamId {
        self.head_out.weight
    }

    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        self.params.bind(g, track)
    }

    fn check_frames(&self, frames: &FrameBatch) -> Result<()> {
        let s = frames.depth.shape();
        if s.h != self.config.height || s.w != self.config.width {
            return Err(Error::shape(
                "encode",
                format!(
                    "frame {}x{} for a model configured at {}x{}",
                    s.h, s.w, self.config.height, self.config.width
                ),
            ));
        }
        Ok(())
    }

    pub fn encode_vars(&self, g: &mut Graph, p: &Bound, frames: &FrameBatch) -> Result<Encoding> {
        self.check_frames(frames)?;
        let scale = self.config.depth_scale;
        let masked = Tensor::from_fn(frames.depth.shape(), |i| {
            if frames.validity.data()[i] > 0.0 {
                frames.depth.data()[i] / scale
            } else {
                0.0
            }
        });
        let input = g.constant(masked);
        let validity_in = g.constant(frames.validity.clone());
        let mut x = input;
        let mut validity = frames.validity.clone();
        for layer in &self.sparse {
            let (y, v) = sparse_conv2d(
                g,
                x,
                &validity,
                p.var(layer.kernel),
                p.var(layer.bias),
                self.config.sparse_eps,
            )?;
            x = g.relu(y);
            validity = v;
        }
        // The full-resolution skip also carries the input itself, so the
        // head can reproduce sharp depth edges.
        let mut skips = vec![g.concat_channels(&[input, validity_in, x])?];
        for blocks in &self.stages {
            for block in blocks {
                x = block.forward(g, p, x)?;
            }
            skips.push(x);
        }
        let h = self.encoding.forward(g, p, x)?;
        let h = g.tanh(h);
        Ok(Encoding { h, skips })
    }

    pub fn prior_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_prev: Var,
        state: LstmVars,
    ) -> Result<(GaussVars, LstmVars)> {
        self.prior.forward(g, p, h_prev, state)
    }

    pub fn posterior_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_target: Var,
        state: LstmVars,
    ) -> Result<(GaussVars, LstmVars)> {
        self.posterior.forward(g, p, h_target, state)
    }

    pub fn decode_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_prev: Var,
        z: Var,
        skips: &[Var],
        state: LstmVars,
    ) -> Result<(Var, LstmVars)> {
        let n_stages = self.stages.len();
        if skips.len() != n_stages + 1 {
            return Err(Error::shape(
                "predict_decode",
                format!("{} skips for {} trunk stages", skips.len(), n_stages),
            ));
        }
        let joined = g.concat_channels(&[h_prev, z])?;
        let state = convlstm_step(g, p, &self.predictor, joined, state)?;
        let mut x = state.h;
        for (level, (conv, norm)) in self.decoder.iter().enumerate() {
            if level > 0 {
                x = g.upsample_nearest(x, 2)?;
            }
            let cat = g.concat_channels(&[x, skips[n_stages - level]])?;
            let y = conv.forward(g, p, cat)?;
            let y = norm.forward(g, p, y)?;
            x = g.relu(y);
        }
        x = g.upsample_nearest(x, 2)?;
        let cat = g.concat_channels(&[x, skips[0]])?;
        let y = self.head_hidden.forward(g, p, cat)?;
        let y = g.relu(y);
        let mut logits = self.head_out.forward(g, p, y)?;
        if self.kind == NetKind::Depth && self.config.input_residual {
            let offset = self.residual_offset(g.value(skips[0]));
            let offset = g.constant(offset);
            logits = g.add(logits, offset)?;
        }
        let out = match self.kind {
            NetKind::Depth => {
                let r = self.config.max_range;
                let s = g.activation(logits, Activation::Softplus);
                let s = g.scale(s, self.config.depth_scale / r);
                let s = g.tanh(s);
                g.scale(s, r)
            }
            NetKind::Mask => g.sigmoid(logits),
        };
        Ok((out, state))
    }

    /// Depth-head logits that reproduce the densified input frame.
    ///
    /// Valid pixels keep their depth, holes take the mean of the valid pixels
    /// in the first sparse kernel's window, and empty windows fall back to
    /// `depth_prior`. Reads the input channels of the full-resolution skip.
    fn residual_offset(&self, skip: &Tensor) -> Tensor {
        let cfg = &self.config;
        let s = skip.shape();
        let one = Shape::new(s.n, 1, s.h, s.w);
        let depth = Tensor::from_fn(one, |i| {
            let (n, p) = (i / s.plane(), i % s.plane());
            skip.data()[n * s.c * s.plane() + p] * cfg.depth_scale
        });
        let valid = Tensor::from_fn(one, |i| {
            let (n, p) = (i / s.plane(), i % s.plane());
            skip.data()[(n * s.c + 1) * s.plane() + p]
        });
        let k = cfg.sparse_kernels[0];
        let sums = window_counts(&depth, k);
        let counts = window_counts(&valid, k);
        let hi = 0.999 * cfg.max_range;
        Tensor::from_fn(one, |i| {
            let d = if valid.data()[i] > 0.0 {
                depth.data()[i]
            } else if counts.data()[i] > 0.0 {
                sums.data()[i] / counts.data()[i]
            } else {
                cfg.depth_prior
            };
            depth_output_inverse(cfg, d.clamp(1e-3, hi))
        })
    }

    /// One full step recorded on `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_vars(
        &self,
        g: &mut Graph,
        p: &Bound,
        prev: &FrameBatch,
        target: Option<&FrameBatch>,
        state: &VrnnState,
        rng: &mut impl Rng,
        mode: Mode,
        opts: StepOptions,
    ) -> Result<StepVars> {
        let n = prev.len();
        let st = state.enter(g);
        let enc = self.encode_vars(g, p, prev)?;
        let (prior, prior_state) = self.prior_vars(g, p, enc.h, st.prior)?;
        if mode == Mode::Train && target.is_none() {
            return Err(Error::invalid("next_frame", "train mode requires a target frame"));
        }
        let (posterior, posterior_state) = match target {
            Some(target) => {
                if target.len() != n {
                    return Err(Error::shape(
                        "next_frame",
                        format!("{} targets for {n} inputs", target.len()),
                    ));
                }
                let tenc = self.encode_vars(g, p, target)?;
                let (q, s) = self.posterior_vars(g, p, tenc.h, st.posterior)?;
                (Some(q), s)
            }
            None => (None, st.posterior),
        };
        let source = match mode {
            Mode::Train => posterior.expect("checked above"),
            Mode::Infer => prior,
        };
        let noise = standard_normal(self.latent_shape(n), rng);
        let z = sample_latent_vars(g, source, noise, opts.zero_sigma)?;
        let (prediction, predictor_state) = self.decode_vars(g, p, enc.h, z, &enc.skips, st.predictor)?;
        Ok(StepVars {
            prediction,
            prior,
            posterior,
            z,
            state: StateVars {
                prior: prior_state,
                posterior: posterior_state,
                predictor: predictor_state,
            },
        })
    }

    /// Value-level step without gradient tracking.
    pub fn next_frame(
        &self,
        prev: &FrameBatch,
        target: Option<&FrameBatch>,
        state: &VrnnState,
        rng: &mut impl Rng,
        mode: Mode,
        opts: StepOptions,
    ) -> Result<StepOutput> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.step_vars(&mut g, &p, prev, target, state, rng, mode, opts)?;
        Ok(StepOutput {
            prediction: g.value(out.prediction).clone(),
            prior: out.prior.values(&g),
            posterior: out.posterior.map(|q| q.values(&g)),
            state: out.state.values(&g),
        })
    }

    /// Encodes frames into `h` and the skip features.
    pub fn encode(&self, frames: &FrameBatch) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let enc = self.encode_vars(&mut g, &p, frames)?;
        Ok((
            g.value(enc.h).clone(),
            enc.skips.iter().map(|&s| g.value(s).clone()).collect(),
        ))
    }

    pub fn prior_step(
        &self,
        h_prev: &Tensor,
        state: &ConvLstmState,
    ) -> Result<(GaussianParams, ConvLstmState)> {
        self.gaussian_step(h_prev, state, false)
    }

    pub fn posterior_step(
        &self,
        h_target: &Tensor,
        state: &ConvLstmState,
    ) -> Result<(GaussianParams, ConvLstmState)> {
        self.gaussian_step(h_target, state, true)
    }

    fn gaussian_step(
        &self,
        h: &Tensor,
        state: &ConvLstmState,
        posterior: bool,
    ) -> Result<(GaussianParams, ConvLstmState)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let sv = state.enter(&mut g);
        let (q, s) = if posterior {
            self.posterior_vars(&mut g, &p, hv, sv)?
        } else {
            self.prior_vars(&mut g, &p, hv, sv)?
        };
        Ok((q.values(&g), s.values(&g)))
    }

    pub fn predict_decode(
        &self,
        h_prev: &Tensor,
        z: &Tensor,
        skips: &[Tensor],
        state: &ConvLstmState,
    ) -> Result<(Tensor, ConvLstmState)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let hv = g.constant(h_prev.clone());
        let zv = g.constant(z.clone());
        let sk: Vec<Var> = skips.iter().map(|s| g.constant(s.clone())).collect();
        let sv = state.enter(&mut g);
        let (out, s) = self.decode_vars(&mut g, &p, hv, zv, &sk, sv)?;
        Ok((g.value(out).clone(), s.values(&g)))
    }
}

pub fn standard_normal(shape: Shape, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Reparameterized draw `mu + exp(log_sigma) * noise` recorded on `g`.
pub fn sample_latent_vars(g: &mut Graph, q: GaussVars, noise: Tensor, zero_sigma: bool) -> Result<Var> {
    if zero_sigma {
        return Ok(q.mu);
    }
    if noise.shape() != g.shape(q.mu) {
        return Err(Error::shape(
            "sample_latent",
            format!("noise {} for params {}", noise.shape(), g.shape(q.mu)),
        ));
    }
    let sigma = g.exp(q.log_sigma);
    let eps = g.constant(noise);
    let spread = g.mul(sigma, eps)?;
    g.add(q.mu, spread)
}

/// Draws `z = mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn sample_latent(params: &GaussianParams, rng: &mut impl Rng) -> Tensor {
    let noise = standard_normal(params.mu.shape(), rng);
    let sigma = params.sigma();
    Tensor::from_fn(params.mu.shape(), |i| {
        params.mu.data()[i] + sigma.data()[i] * noise.data()[i]
    })
}
