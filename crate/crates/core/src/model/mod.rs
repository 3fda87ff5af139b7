//! Decoder-only line recognizer: image and text embedders, a stack of
//! mixer + feed-forward layers with post-norm residuals, and a vocabulary head.

mod config;
mod maps;
mod optim;
mod params;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use config::{Mixer, ModelConfig, HEIGHT_STRIDE, STAGE_STRIDES, WIDTH_STRIDE};
pub use maps::{sub_diagonal_fraction, sub_diagonal_mass, LayerMaps, MapMatrix};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use params::ParamStore;

use crate::armf::{armf_tape, layer_config, ArmfHeadConfig, ArmfVars, ArmfWeights, FusionSequence};
use crate::data::PAD;
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::rng::{substream, uniform, StreamRng};
use crate::tensor::{Tape, Tensor, Var};

/// Logit added to disallowed attention pairs.
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerIdx {
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub w_gamma: Option<usize>,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub conv: [usize; 3],
    pub img_w: usize,
    pub img_b: usize,
    pub img_pos: usize,
    pub tok_emb: usize,
    pub layers: Vec<LayerIdx>,
    pub head_w: usize,
    pub head_b: usize,
}

/// CNN feature map and the image tokens derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    /// `c_visual × h_visual × w_visual`.
    pub f: Tensor,
    /// `w_visual × d_model`.
    pub e: Tensor,
}

/// Variables produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub params: Vec<Var>,
    pub logits: Var,
    pub n_image: usize,
    pub layers: Vec<LayerTrace>,
}

/// Per-layer score matrices kept for map dumps.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Retention: `Dots_text ⊙ M` (`N×N_T`); attention: joint softmax (`N×N`).
    pub scores: Vec<Var>,
    pub decays: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    layer_cfgs: Vec<ArmfHeadConfig>,
}

fn uniform_tensor(rng: &mut StreamRng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| uniform(rng, -bound, bound)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Sinusoidal encodings for positions `0..n`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d.div_ceil(2) {
            let a = pos as f64 / math::powf(10000.0, (2 * i) as f64 / d as f64);
            pe[pos * d + 2 * i] = math::sin(a);
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = math::cos(a);
            }
        }
    }
    pe
}

/// Split a tokenized sequence into decoder inputs and next-token targets.
///
/// `[SOS, c₁…c_k, EOS, PAD…]` gives inputs `[SOS, c₁…c_k]` and targets
/// `[c₁…c_k, EOS]`; trailing padding never enters the decoder.
pub fn teacher_forcing(ids: &[usize]) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let used = ids.iter().position(|&t| t == PAD).unwrap_or(ids.len());
    if used < 2 {
        return Err(invalid("teacher_forcing", "sequence has no target token"));
    }
    if ids[used..].iter().any(|&t| t != PAD) {
        return Err(invalid("teacher_forcing", "padding must be a suffix"));
    }
    let inputs = ids[..used - 1].to_vec();
    let targets = ids[1..used].iter().map(|&t| Some(t)).collect();
    Ok((inputs, targets))
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut Option<&mut StreamRng>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let n = tape.value(x).len();
    let mask = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    tape.mul_const(x, mask)
}

impl Model {
    /// Build and initialize a model; the seed feeds the `init` substream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let c = &config;
        let d = c.d_model;
        let mut ps = ParamStore::new();
        let mut conv = [0; 3];
        let mut c_in = 1;
        for (s, &c_out) in c.cnn_channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            conv[s] = ps.push(
                format!("cnn.{s}.weight"),
                uniform_tensor(&mut rng, &[c_out, c_in, 3, 3], math::sqrt(6.0 / fan_in)),
            );
            c_in = c_out;
        }
        let fv = c.visual_features();
        let lin = |rng: &mut StreamRng, i: usize, o: usize| uniform_tensor(rng, &[i, o], 1.0 / math::sqrt(i as f64));
        let img_w = ps.push("img_proj.weight", lin(&mut rng, fv, d));
        let img_b = ps.push("img_proj.bias", Tensor::zeros(&[d]));
        let img_pos = ps.push("img_pos", uniform_tensor(&mut rng, &[c.max_image_tokens, d], 0.1));
        let tok_emb = ps.push("tok_emb", uniform_tensor(&mut rng, &[c.vocab_size, d], 1.0));
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            let w_q = ps.push(p("mix.w_q"), lin(&mut rng, d, d));
            let w_k = ps.push(p("mix.w_k"), lin(&mut rng, d, d));
            let w_v = ps.push(p("mix.w_v"), lin(&mut rng, d, d));
            let w_o = ps.push(p("mix.w_o"), lin(&mut rng, d, d));
            let w_gamma = c.gated().then(|| ps.push(p("mix.w_gamma"), lin(&mut rng, d, c.heads)));
            let ln1_gain = ps.push(p("ln1.gain"), Tensor::full(&[d], 1.0));
            let ln1_bias = ps.push(p("ln1.bias"), Tensor::zeros(&[d]));
            let ff_w1 = ps.push(p("ff.w1"), lin(&mut rng, d, c.d_ff));
            let ff_b1 = ps.push(p("ff.b1"), Tensor::zeros(&[c.d_ff]));
            let ff_w2 = ps.push(p("ff.w2"), lin(&mut rng, c.d_ff, d));
            let ff_b2 = ps.push(p("ff.b2"), Tensor::zeros(&[d]));
            let ln2_gain = ps.push(p("ln2.gain"), Tensor::full(&[d], 1.0));
            let ln2_bias = ps.push(p("ln2.bias"), Tensor::zeros(&[d]));
            layers.push(LayerIdx {
                w_q,
                w_k,
                w_v,
                w_o,
                w_gamma,
                ln1_gain,
                ln1_bias,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
                ln2_gain,
                ln2_bias,
            });
        }
        let head_w = ps.push("head.weight", lin(&mut rng, d, c.vocab_size));
        let head_b = ps.push("head.bias", Tensor::zeros(&[c.vocab_size]));
        for t in ps.tensors_mut() {
            t.set_requires_grad(true);
        }
        ps.round_to_f32();
        let layout = Layout {
            conv,
            img_w,
            img_b,
            img_pos,
            tok_emb,
            layers,
            head_w,
            head_b,
        };
        let layer_cfgs = if c.mixer == Mixer::Retention {
            let sched = c.schedule();
            (0..c.layers)
                .map(|l| layer_config(&sched, l, c.image_prior))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            params: ps,
            layout,
            layer_cfgs,
        })
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

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Inputs of every layer for the image tokens alone. Image rows never
    /// depend on text, so these are the exact image rows of any full pass.
    pub fn image_layer_inputs(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape);
        let (_, e) = self.embed_image_tape(&mut tape, &params, image)?;
        let n_image = tape.shape(e)[0];
        let mut inputs = Vec::with_capacity(self.config.layers);
        self.stack_tape(&mut tape, &params, e, n_image, &mut None, Some(&mut inputs))?;
        Ok(inputs.into_iter().map(|v| tape.tensor(v)).collect())
    }

    /// Per-layer ARMF head configuration (empty for the attention mixer).
    pub fn layer_configs(&self) -> &[ArmfHeadConfig] {
        &self.layer_cfgs
    }

    /// ARMF/attention weights of layer `l`, cloned.
    pub fn mixer_weights(&self, l: usize) -> ArmfWeights {
        let li = &self.layout.layers[l];
        let p = |i: usize| self.params.get(i).clone().with_requires_grad(false);
        ArmfWeights {
            w_q: p(li.w_q),
            w_k: p(li.w_k),
            w_v: p(li.w_v),
            w_o: p(li.w_o),
            w_gamma: li.w_gamma.map(p),
        }
    }

    pub fn record_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.leaf(t)).collect()
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let s = image.shape();
        let (h, w) = match s {
            [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(invalid("embed_image", "expected a 1×h×w grayscale image")),
        };
        if h % HEIGHT_STRIDE != 0 {
            return Err(invalid("embed_image", format!("height {h} not divisible by {HEIGHT_STRIDE}")));
        }
        if h != self.config.image_height {
            return Err(invalid(
                "embed_image",
                format!("height {h} differs from the configured {}", self.config.image_height),
            ));
        }
        if self.config.image_tokens(w) > self.config.max_image_tokens {
            return Err(invalid("embed_image", format!("width {w} exceeds the position table")));
        }
        Ok((h, w))
    }

    /// Convolution stack, reshape to `(w_v, c_v·h_v)`, projection and positions.
    /// Returns `(F, E)`.
    pub(crate) fn embed_image_tape(&self, tape: &mut Tape, params: &[Var], image: &Tensor) -> Result<(Var, Var)> {
        let (h, w) = self.check_image(image)?;
        let mut x = tape.constant(&[1, h, w], image.data().to_vec())?;
        for (s, &(sh, sw)) in STAGE_STRIDES.iter().enumerate() {
            let c = tape.conv2d(x, params[self.layout.conv[s]], (sh, sw), 1)?;
            x = tape.gelu(c);
        }
        let f = x;
        let (c, hv, wv) = {
            let s = tape.shape(f);
            (s[0], s[1], s[2])
        };
        let mut idx = Vec::with_capacity(c * hv * wv);
        for j in 0..wv {
            for ch in 0..c {
                for y in 0..hv {
                    idx.push((ch * hv + y) * wv + j);
                }
            }
        }
        let tokens = tape.gather(f, idx, &[wv, c * hv])?;
        let proj = tape.matmul(tokens, params[self.layout.img_w])?;
        let proj = tape.add_row(proj, params[self.layout.img_b])?;
        let pos = tape.slice_rows(params[self.layout.img_pos], 0, wv)?;
        let e = tape.add(proj, pos)?;
        Ok((f, e))
    }

    pub fn embed_image(&self, image: &Tensor) -> Result<ImageFeature> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape);
        let (f, e) = self.embed_image_tape(&mut tape, &params, image)?;
        Ok(ImageFeature {
            f: tape.tensor(f),
            e: tape.tensor(e),
        })
    }

    pub(crate) fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    pub(crate) fn embed_text_tape(&self, tape: &mut Tape, params: &[Var], ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(invalid("embed_text", "no tokens"));
        }
        let rows = tape.select_rows(params[self.layout.tok_emb], ids)?;
        tape.add_const(rows, &sinusoidal_positions(ids.len(), self.config.d_model))
    }

    /// Token embeddings plus sinusoidal positions, `len × d_model`.
    pub fn embed_text(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape);
        let t = self.embed_text_tape(&mut tape, &params, ids)?;
        Ok(tape.tensor(t))
    }

    fn attention_tape(&self, tape: &mut Tape, x: Var, n_image: usize, vars: &ArmfVars) -> Result<(Var, Vec<Var>)> {
        let n = tape.shape(x)[0];
        let (heads, dh) = (self.config.heads, self.config.d_head());
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let allowed = j < n_image || (i >= n_image && j <= i);
                if !allowed {
                    mask[i * n + j] = MASKED;
                }
            }
        }
        let q = tape.matmul(x, vars.w_q)?;
        let k = tape.matmul(x, vars.w_k)?;
        let v = tape.matmul(x, vars.w_v)?;
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
            };
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let dots = tape.scale(raw, scale);
            let masked = tape.add_const(dots, &mask)?;
            let p = tape.softmax_rows(masked)?;
            probs.push(p);
            outs.push(tape.matmul(p, vh)?);
        }
        let y = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((tape.matmul(y, vars.w_o)?, probs))
    }

    /// The decoder stack over an embedded `N×d` sequence; returns the final
    /// hidden states and per-layer traces.
    pub(crate) fn stack_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        mut x: Var,
        n_image: usize,
        rng: &mut Option<&mut StreamRng>,
        mut layer_inputs: Option<&mut Vec<Var>>,
    ) -> Result<(Var, Vec<LayerTrace>)> {
        let c = &self.config;
        let mut traces = Vec::with_capacity(c.layers);
        for (l, li) in self.layout.layers.iter().enumerate() {
            if let Some(v) = layer_inputs.as_deref_mut() {
                v.push(x);
            }
            let vars = ArmfVars {
                w_q: params[li.w_q],
                w_k: params[li.w_k],
                w_v: params[li.w_v],
                w_o: params[li.w_o],
                w_gamma: li.w_gamma.map(|i| params[i]),
            };
            let (mixed, trace) = match c.mixer {
                Mixer::Retention => {
                    let o = armf_tape(tape, x, n_image, &vars, &self.layer_cfgs[l])?;
                    (
                        o.out,
                        LayerTrace {
                            scores: o.text_scores,
                            decays: o.decays,
                        },
                    )
                }
                Mixer::Attention => {
                    let (o, probs) = self.attention_tape(tape, x, n_image, &vars)?;
                    (
                        o,
                        LayerTrace {
                            scores: probs,
                            decays: Vec::new(),
                        },
                    )
                }
            };
            traces.push(trace);
            let mixed = dropout(tape, mixed, c.dropout_mixer, rng)?;
            let res = tape.add(x, mixed)?;
            let h = tape.layer_norm(res, params[li.ln1_gain], params[li.ln1_bias])?;
            let f1 = tape.matmul(h, params[li.ff_w1])?;
            let f1 = tape.add_row(f1, params[li.ff_b1])?;
            let f1 = tape.gelu(f1);
            let f1 = dropout(tape, f1, c.dropout_ff, rng)?;
            let f2 = tape.matmul(f1, params[li.ff_w2])?;
            let f2 = tape.add_row(f2, params[li.ff_b2])?;
            let res2 = tape.add(h, f2)?;
            x = tape.layer_norm(res2, params[li.ln2_gain], params[li.ln2_bias])?;
        }
        Ok((x, traces))
    }

    fn head_tape(&self, tape: &mut Tape, params: &[Var], hidden: Var, n_image: usize) -> Result<Var> {
        let n = tape.shape(hidden)[0];
        if n == n_image {
            return Err(invalid("decoder_forward", "no text positions"));
        }
        let text = tape.slice_rows(hidden, n_image, n)?;
        let logits = tape.matmul(text, params[self.layout.head_w])?;
        tape.add_row(logits, params[self.layout.head_b])
    }

    /// Full forward pass; dropout is active iff `rng` is given.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        inputs: &[usize],
        rng: Option<&mut StreamRng>,
    ) -> Result<Trace> {
        let params = self.record_params(tape);
        self.forward_with_params(tape, params, image, inputs, rng)
    }

    /// [`Model::forward_tape`] over parameter variables already on the tape,
    /// in [`ParamStore`] order.
    pub fn forward_with_params(
        &self,
        tape: &mut Tape,
        params: Vec<Var>,
        image: &Tensor,
        inputs: &[usize],
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Trace> {
        if params.len() != self.params.len() {
            return Err(invalid("forward", format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        let (_, e) = self.embed_image_tape(tape, &params, image)?;
        let t = self.embed_text_tape(tape, &params, inputs)?;
        let p = self.config.dropout_embed;
        let e = dropout(tape, e, p, &mut rng)?;
        let t = dropout(tape, t, p, &mut rng)?;
        let n_image = tape.shape(e)[0];
        let x = tape.concat_rows(&[e, t])?;
        let (hidden, layers) = self.stack_tape(tape, &params, x, n_image, &mut rng, None)?;
        let logits = self.head_tape(tape, &params, hidden, n_image)?;
        Ok(Trace {
            params,
            logits,
            n_image,
            layers,
        })
    }

    /// Eval-mode logits `N_T×V` for an already embedded fusion sequence.
    pub fn decoder_forward(&self, seq: &FusionSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape);
        let x = tape.constant(seq.x.shape(), seq.x.data().to_vec())?;
        let (hidden, _) = self.stack_tape(&mut tape, &params, x, seq.n_image(), &mut None, None)?;
        let logits = self.head_tape(&mut tape, &params, hidden, seq.n_image())?;
        Ok(tape.tensor(logits))
    }

    /// Eval-mode final hidden states of the whole fusion sequence, `N×d`.
    pub fn hidden_states(&self, image: &Tensor, inputs: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape);
        let (_, e) = self.embed_image_tape(&mut tape, &params, image)?;
        let t = self.embed_text_tape(&mut tape, &params, inputs)?;
        let n_image = tape.shape(e)[0];
        let x = tape.concat_rows(&[e, t])?;
        let (hidden, _) = self.stack_tape(&mut tape, &params, x, n_image, &mut None, None)?;
        Ok(tape.tensor(hidden))
    }

    /// Eval-mode teacher-forced logits for `image` and decoder `inputs`.
    pub fn logits(&self, image: &Tensor, inputs: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let tr = self.forward_tape(&mut tape, image, inputs, None)?;
        Ok(tape.tensor(tr.logits))
    }

    /// Smoothed cross-entropy on one tokenized sample and its gradient per
    /// parameter (in [`ParamStore`] order).
    pub fn loss_and_grads(
        &self,
        image: &Tensor,
        ids: &[usize],
        epsilon: f64,
        rng: Option<&mut StreamRng>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let (inputs, targets) = teacher_forcing(ids)?;
        let mut tape = Tape::new();
        let tr = self.forward_tape(&mut tape, image, &inputs, rng)?;
        let loss = training_loss(&mut tape, tr.logits, &targets, epsilon)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(loss)?;
        let out = tr
            .params
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect();
        Ok((value, out))
    }

    /// Per-layer score and decay matrices restricted to text queries.
    pub fn dump_maps(&self, image: &Tensor, inputs: &[usize]) -> Result<Vec<LayerMaps>> {
        let mut tape = Tape::new();
        let tr = self.forward_tape(&mut tape, image, inputs, None)?;
        maps::collect(&tape, &tr, self.config.mixer)
    }
}

/// Label-smoothed cross-entropy over non-padding targets.
pub fn training_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>], epsilon: f64) -> Result<Var> {
    let t: Vec<Option<usize>> = targets.iter().map(|t| t.filter(|&id| id != PAD)).collect();
    tape.cross_entropy(logits, &t, epsilon)
}
