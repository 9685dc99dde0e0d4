use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use super::lstm::{BoundLstm, CandidateActivation, LstmParams};
use super::posterior::PosteriorSampleSet;
use super::variational::{LayerNoise, VariationalLayerParams};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No weight sampling anywhere.
    Deterministic,
    /// The regressor's final layer (and optionally the projection) is
    /// variational.
    #[default]
    Bayesian,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Mode::Deterministic),
            "bayesian" => Ok(Mode::Bayesian),
            other => Err(Error::arg(format!("unknown mode {other:?}"))),
        }
    }
}

/// Architecture hyper-parameters of the inverse model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BimConfig {
    /// Per-step encoder input width, `D_x + 1`.
    pub input_size: usize,
    pub hidden_size: usize,
    pub embed_size: usize,
    pub regressor_hidden: usize,
    pub decoder_hidden: usize,
    pub n_statics: usize,
    pub mode: Mode,
    pub prior_std: f64,
    pub rho_init: f64,
    pub variational_projection: bool,
    pub candidate: CandidateActivation,
}

impl Default for BimConfig {
    fn default() -> Self {
        BimConfig {
            input_size: 6,
            hidden_size: 32,
            embed_size: 32,
            regressor_hidden: 32,
            decoder_hidden: 32,
            n_statics: 27,
            mode: Mode::Bayesian,
            prior_std: 0.1,
            rho_init: -3.0,
            variational_projection: false,
            candidate: CandidateActivation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Deterministic(Linear),
    Variational(VariationalLayerParams),
}

impl Layer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, noise: Option<&LayerNoise>) -> Result<Var> {
        match (self, noise) {
            (Layer::Deterministic(l), _) => l.forward(g, store, x),
            (Layer::Variational(v), Some(n)) => v.forward(g, store, x, n),
            (Layer::Variational(v), None) => v.forward(g, store, x, &LayerNoise::zeros(v.input_size, v.output_size)),
        }
    }

    fn sizes(&self) -> (usize, usize) {
        match self {
            Layer::Deterministic(l) => (l.input_size, l.output_size),
            Layer::Variational(v) => (v.input_size, v.output_size),
        }
    }
}

/// Weight noise for one stochastic forward pass. `None` entries use the
/// posterior means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelNoise {
    pub projection: Option<LayerNoise>,
    pub head: Option<LayerNoise>,
}

/// Encoder embedding `h = [h_forward; h_backward]` and its projection `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `B × 2H`.
    pub h: Tensor,
    /// `B × E`, entries ≥ 0.
    pub e: Tensor,
}

/// Graph handles produced by [`BimModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// The per-step input constants, `B × (D_x + 1)` each.
    pub inputs: Vec<Var>,
    pub h: Var,
    pub e: Var,
    /// One `B × (D_x + 1)` node per time step; empty when decoding is skipped.
    pub recon: Vec<Var>,
    pub z_hat: Var,
}

/// The Bayesian inverse model: bidirectional LSTM encoder, ReLU projection,
/// LSTM decoder, and a two-layer static regressor on the encoder state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BimModel {
    pub config: BimConfig,
    pub params: ParamStore,
    pub enc_fwd: LstmParams,
    pub enc_bwd: LstmParams,
    pub projection: Layer,
    pub dec: LstmParams,
    pub dec_init: Linear,
    pub dec_out: Linear,
    pub reg_hidden: Linear,
    pub reg_out: Layer,
    /// Seeds this model descends from, outermost first.
    pub seed_lineage: Vec<u64>,
}

const CHECKPOINT_FORMAT: &str = "inverse-uq/bim-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: BimModel,
}

impl BimModel {
    pub fn new(config: BimConfig, seed: u64) -> Result<Self> {
        if config.input_size == 0 || config.hidden_size == 0 || config.n_statics == 0 {
            return Err(Error::arg("model sizes must be positive"));
        }
        if config.prior_std <= 0.0 {
            return Err(Error::arg("prior_std must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let enc_fwd = LstmParams::init(&mut p, "enc_fwd", c.input_size, c.hidden_size, c.candidate, &mut rng);
        let enc_bwd = LstmParams::init(&mut p, "enc_bwd", c.input_size, c.hidden_size, c.candidate, &mut rng);
        let bayes = c.mode == Mode::Bayesian;
        let projection = if bayes && c.variational_projection {
            Layer::Variational(VariationalLayerParams::init(
                &mut p, "proj", 2 * c.hidden_size, c.embed_size, c.prior_std, c.rho_init, &mut rng,
            ))
        } else {
            Layer::Deterministic(Linear::init(&mut p, "proj", 2 * c.hidden_size, c.embed_size, &mut rng))
        };
        let dec = LstmParams::init(&mut p, "dec", c.input_size, c.decoder_hidden, c.candidate, &mut rng);
        let dec_init = Linear::init(&mut p, "dec_init", c.embed_size, 2 * c.decoder_hidden, &mut rng);
        let dec_out = Linear::init(&mut p, "dec_out", c.decoder_hidden, c.input_size, &mut rng);
        let reg_hidden = Linear::init(&mut p, "reg_hidden", 2 * c.hidden_size, c.regressor_hidden, &mut rng);
        let reg_out = if bayes {
            Layer::Variational(VariationalLayerParams::init(
                &mut p, "reg_out", c.regressor_hidden, c.n_statics, c.prior_std, c.rho_init, &mut rng,
            ))
        } else {
            Layer::Deterministic(Linear::init(&mut p, "reg_out", c.regressor_hidden, c.n_statics, &mut rng))
        };
        Ok(BimModel {
            config,
            params: p,
            enc_fwd,
            enc_bwd,
            projection,
            dec,
            dec_init,
            dec_out,
            reg_hidden,
            reg_out,
            seed_lineage: vec![seed],
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn n_statics(&self) -> usize {
        self.config.n_statics
    }

    /// Fresh standard-normal noise for every variational layer.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelNoise {
        let mut draw = |l: &Layer| match l {
            Layer::Variational(v) => Some(LayerNoise::sample(v.input_size, v.output_size, rng)),
            Layer::Deterministic(_) => None,
        };
        ModelNoise {
            projection: draw(&self.projection),
            head: draw(&self.reg_out),
        }
    }

    /// Zero noise: every variational layer uses its means.
    pub fn mean_noise(&self) -> ModelNoise {
        let zeros = |l: &Layer| match l {
            Layer::Variational(v) => Some(LayerNoise::zeros(v.input_size, v.output_size)),
            Layer::Deterministic(_) => None,
        };
        ModelNoise {
            projection: zeros(&self.projection),
            head: zeros(&self.reg_out),
        }
    }

    fn encode_graph(&self, g: &mut Graph, steps: &[Var], noise: &ModelNoise) -> Result<(Var, Var)> {
        if steps.is_empty() {
            return Err(Error::arg("cannot encode an empty window"));
        }
        let fwd = self.enc_fwd.bind(g, &self.params)?;
        let bwd = self.enc_bwd.bind(g, &self.params)?;
        let (hf, _) = fwd.run(g, steps, false)?;
        let (hb, _) = bwd.run(g, steps, true)?;
        let h = g.concat_cols(&[*hf.last().expect("non-empty"), *hb.last().expect("non-empty")])?;
        let pre = self.projection.forward(g, &self.params, h, noise.projection.as_ref())?;
        let e = g.relu(pre);
        Ok((h, e))
    }

    fn decode_graph(&self, g: &mut Graph, e: Var, len: usize) -> Result<Vec<Var>> {
        if len == 0 {
            return Err(Error::arg("decode length must be at least 1"));
        }
        let b = g.shape(e).0;
        let hd = self.config.decoder_hidden;
        let init = self.dec_init.forward(g, &self.params, e)?;
        let mut h = g.slice_cols(init, 0, hd)?;
        let mut c = g.slice_cols(init, hd, 2 * hd)?;
        let cell: BoundLstm = self.dec.bind(g, &self.params)?;
        let (w_out, b_out) = self.dec_out.bind(g, &self.params);
        let mut x = g.constant(Tensor::zeros(b, self.config.input_size));
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            (h, c) = cell.step(g, x, h, c)?;
            let y = g.matmul(h, w_out)?;
            let y = g.add_row(y, b_out)?;
            out.push(y);
            x = y;
        }
        Ok(out)
    }

    fn regress_graph(&self, g: &mut Graph, h: Var, noise: &ModelNoise) -> Result<Var> {
        let r = self.reg_hidden.forward(g, &self.params, h)?;
        let r = g.relu(r);
        self.reg_out.forward(g, &self.params, r, noise.head.as_ref())
    }

    /// Full differentiable pass over a batch given as per-step `B × C`
    /// tensors. The decoder is skipped when `decode` is false.
    pub fn forward(&self, g: &mut Graph, steps: &[Tensor], noise: &ModelNoise, decode: bool) -> Result<ForwardVars> {
        let c = self.config.input_size;
        if let Some(bad) = steps.iter().find(|s| s.cols() != c) {
            return Err(Error::Shape {
                op: "bim.forward",
                left: bad.shape(),
                right: (bad.rows(), c),
            });
        }
        let vars: Vec<Var> = steps.iter().map(|s| g.constant(s.clone())).collect();
        let (h, e) = self.encode_graph(g, &vars, noise)?;
        let recon = if decode {
            self.decode_graph(g, e, steps.len())?
        } else {
            Vec::new()
        };
        let z_hat = self.regress_graph(g, h, noise)?;
        Ok(ForwardVars {
            inputs: vars,
            h,
            e,
            recon,
            z_hat,
        })
    }

    /// Sum of the KL terms of every variational layer, if any.
    pub fn kl_graph(&self, g: &mut Graph) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for l in [&self.projection, &self.reg_out] {
            if let Layer::Variational(v) = l {
                let k = v.kl_on_graph(g, &self.params)?;
                total = Some(match total {
                    Some(t) => g.add(t, k)?,
                    None => k,
                });
            }
        }
        Ok(total)
    }

    pub fn kl(&self) -> f64 {
        [&self.projection, &self.reg_out]
            .iter()
            .map(|l| match l {
                Layer::Variational(v) => v.kl(&self.params),
                Layer::Deterministic(_) => 0.0,
            })
            .sum()
    }

    /// Encodes a batch of windows (each `L × C`, equal `L`).
    pub fn encode_batch(&self, windows: &[&Tensor]) -> Result<EncoderOutput> {
        let steps = batch_steps(windows)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = steps.into_iter().map(|s| g.constant(s)).collect();
        let (h, e) = self.encode_graph(&mut g, &vars, &self.mean_noise())?;
        Ok(EncoderOutput {
            h: g.value(h).clone(),
            e: g.value(e).clone(),
        })
    }

    pub fn encode(&self, window: &Tensor) -> Result<EncoderOutput> {
        self.encode_batch(&[window])
    }

    /// Reconstructs an `L × C` sequence from the embedding rows `e`.
    pub fn decode(&self, e: &Tensor, len: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let ev = g.constant(e.clone());
        let out = self.decode_graph(&mut g, ev, len)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// `ẑ` for each row of `h`. Bayesian models draw fresh final-layer weights
    /// from `rng`, which is therefore required.
    pub fn regress_statics(&self, h: &Tensor, rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        let noise = match (self.mode(), rng) {
            (Mode::Deterministic, _) => ModelNoise::default(),
            (Mode::Bayesian, Some(r)) => self.sample_noise(r),
            (Mode::Bayesian, None) => {
                return Err(Error::Contract("bayesian regress_statics needs an rng".into()));
            }
        };
        self.regress_with(h, noise.head.as_ref())
    }

    /// `ẑ` with explicit final-layer noise (`None` uses the means).
    pub fn regress_with(&self, h: &Tensor, head_noise: Option<&LayerNoise>) -> Result<Tensor> {
        let r = self.reg_hidden.apply(&self.params, h)?.map(|x| x.max(0.0));
        match &self.reg_out {
            Layer::Deterministic(l) => l.apply(&self.params, &r),
            Layer::Variational(v) => {
                let p = &self.params;
                let (w, b) = match head_noise {
                    Some(n) => (
                        super::sample_variational_weights(p.value(v.mu_w), p.value(v.rho_w), &n.w)?,
                        super::sample_variational_weights(p.value(v.mu_b), p.value(v.rho_b), &n.b)?,
                    ),
                    None => (p.value(v.mu_w).clone(), p.value(v.mu_b).clone()),
                };
                let mut y = r.matmul(&w)?;
                let c = y.cols();
                for (i, x) in y.data_mut().iter_mut().enumerate() {
                    *x += b.data()[i % c];
                }
                Ok(y)
            }
        }
    }

    /// Posterior predictive draws of `ẑ` for a batch of windows: the encoder
    /// runs once, then `draws` independent final-layer weight samples are
    /// applied. Returns one sample set per window.
    pub fn predict_posterior(&self, windows: &[&Tensor], draws: usize, rng: &mut impl Rng) -> Result<Vec<PosteriorSampleSet>> {
        if self.mode() != Mode::Bayesian {
            return Err(Error::Contract("predict_posterior requires a bayesian model".into()));
        }
        if draws < 2 {
            return Err(Error::arg(format!("need at least 2 posterior draws, got {draws}")));
        }
        let enc = self.encode_batch(windows)?;
        let Layer::Variational(v) = &self.reg_out else {
            return Err(Error::Contract("bayesian model without a variational head".into()));
        };
        let mut per_window: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(draws); windows.len()];
        for _ in 0..draws {
            let noise = LayerNoise::sample(v.input_size, v.output_size, rng);
            let z = self.regress_with(&enc.h, Some(&noise))?;
            for (i, set) in per_window.iter_mut().enumerate() {
                set.push(z.row_slice(i).to_vec());
            }
        }
        per_window.into_iter().map(PosteriorSampleSet::from_draws).collect()
    }

    /// Point predictions (posterior means for bayesian models).
    pub fn predict_mean(&self, windows: &[&Tensor]) -> Result<Tensor> {
        let enc = self.encode_batch(windows)?;
        self.regress_with(&enc.h, None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: self.clone(),
        };
        let text = serde_json::to_string(&ck)?;
        crate::util::write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format {:?}", ck.format)));
        }
        let mut m = ck.model;
        m.params.zero_grad();
        Ok(m)
    }

    pub fn head_sizes(&self) -> (usize, usize) {
        self.reg_out.sizes()
    }
}

/// Transposes `B` windows of shape `L × C` into `L` step matrices `B × C`.
pub fn batch_steps(windows: &[&Tensor]) -> Result<Vec<Tensor>> {
    let first = windows.first().ok_or_else(|| Error::arg("empty batch"))?;
    let (len, c) = first.shape();
    if len == 0 {
        return Err(Error::arg("windows must have at least one step"));
    }
    if let Some(bad) = windows.iter().find(|w| w.shape() != (len, c)) {
        return Err(Error::Shape {
            op: "batch_steps",
            left: (len, c),
            right: bad.shape(),
        });
    }
    let b = windows.len();
    Ok((0..len)
        .map(|t| {
            let mut data = Vec::with_capacity(b * c);
            for w in windows {
                data.extend_from_slice(w.row_slice(t));
            }
            Tensor::from_vec(b, c, data).expect("sized")
        })
        .collect())
}
