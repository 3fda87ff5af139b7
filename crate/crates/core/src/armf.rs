//! Attention-retention modality fusion (ARMF).
//!
//! Over `X = [X_img; X_text]`, every query sees the image keys through a
//! row softmax, and text queries additionally see earlier text keys through
//! the decay-masked, unnormalized retention scores:
//!
//! `Ret = [softmax(Dots_img) | Dots_text ⊙ M] V`, `Dots = QKᵀ/√d_head`.
//!
//! Rows of `M` belonging to image queries are zero, so image outputs never
//! depend on text tokens. At inference the image keys/values are projected
//! once and the text part runs as a retention recurrence.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cost::OpCounter;
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::retention::{gate, GammaSchedule, GammaStrategy, RetentionState};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Image tokens followed by text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSequence {
    pub x: Tensor,
    n_image: usize,
    n_text: usize,
}

impl FusionSequence {
    pub fn new(x: Tensor, n_image: usize) -> Result<Self> {
        x.expect_rank2("FusionSequence")?;
        if n_image == 0 {
            return Err(invalid("FusionSequence", "need at least one image token"));
        }
        if n_image > x.rows() {
            return Err(invalid("FusionSequence", "more image tokens than rows"));
        }
        let n_text = x.rows() - n_image;
        Ok(Self { x, n_image, n_text })
    }

    pub fn n_image(&self) -> usize {
        self.n_image
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn len(&self) -> usize {
        self.n_image + self.n_text
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Dependency mask `N×N_T`: zero on image rows, `γ^(i−N_I−j)` on and below
/// the text diagonal.
pub fn armf_mask(n_image: usize, n_text: usize, gamma: f64) -> Result<Tensor> {
    if n_text == 0 {
        return Err(invalid("armf_mask", "mask needs at least one text column"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid("armf_mask", "gamma outside (0, 1)"));
    }
    let decay = crate::retention::build_decay(n_text, gamma)?;
    Ok(stack_under_zeros(n_image, n_text, decay.entries()))
}

fn stack_under_zeros(n_image: usize, n_text: usize, text_block: &[f64]) -> Tensor {
    let mut data = vec![0.0; n_image * n_text];
    data.extend_from_slice(text_block);
    Tensor::new(&[n_image + n_text, n_text], data).expect("positive extents")
}

/// Optional symmetric decay over image-token distance, applied to image queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImagePrior {
    #[default]
    None,
    /// Per-head γ of the original schedule.
    Fixed,
    /// Per-layer, per-head γ of the layer-wise schedule.
    LayerWise,
}

impl ImagePrior {
    pub fn name(self) -> &'static str {
        match self {
            ImagePrior::None => "none",
            ImagePrior::Fixed => "fixed",
            ImagePrior::LayerWise => "layer-wise",
        }
    }

    /// Prior γ per head for `layer`, or `None` when disabled.
    pub fn gammas(self, schedule: &GammaSchedule, layer: usize) -> Result<Option<Vec<f64>>> {
        let strategy = match self {
            ImagePrior::None => return Ok(None),
            ImagePrior::Fixed => GammaStrategy::Original,
            ImagePrior::LayerWise => GammaStrategy::LayerWise,
        };
        let s = GammaSchedule { strategy, ..*schedule };
        s.layer_gammas(layer).map(Some)
    }
}

impl core::str::FromStr for ImagePrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ImagePrior::None, ImagePrior::Fixed, ImagePrior::LayerWise]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| invalid("ImagePrior", alloc::format!("unknown prior `{s}`")))
    }
}

/// Log of the bidirectional prior, `|i−j|·ln γ`, for the image block of
/// image-query rows (zero on text rows). Adding it to the logits equals
/// multiplying the softmax output by `γ^|i−j|` and renormalizing.
fn image_prior_logits(n: usize, n_image: usize, gamma: f64) -> Vec<f64> {
    let lg = math::ln(gamma);
    let mut out = vec![0.0; n * n_image];
    for i in 0..n_image {
        for j in 0..n_image {
            out[i * n_image + j] = (i as f64 - j as f64).abs() * lg;
        }
    }
    out
}

/// How text-to-text decay is parameterized per head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadDecay {
    Fixed(Vec<f64>),
    /// Gates `sigmoid(x W_γ)^(1/τ)`; `W_γ` lives in [`ArmfWeights::w_gamma`].
    Gated { tau: f64 },
}

/// Weights of one multi-head ARMF layer. Projections are `d×d`, and
/// `w_gamma` (`d×H`) exists only for gated decay.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmfWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_gamma: Option<Tensor>,
}

impl ArmfWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Tensor::eye(d),
            w_k: Tensor::eye(d),
            w_v: Tensor::eye(d),
            w_o: Tensor::eye(d),
            w_gamma: None,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmfHeadConfig {
    pub heads: usize,
    pub decay: HeadDecay,
    /// Per-head γ of the bidirectional image prior.
    pub image_prior: Option<Vec<f64>>,
}

impl ArmfHeadConfig {
    pub fn fixed(gammas: Vec<f64>) -> Self {
        Self {
            heads: gammas.len(),
            decay: HeadDecay::Fixed(gammas),
            image_prior: None,
        }
    }

    fn validate(&self, d_model: usize) -> Result<usize> {
        if self.heads == 0 || d_model % self.heads != 0 {
            return Err(invalid("armf", alloc::format!("d_model {d_model} not divisible by {} heads", self.heads)));
        }
        if let HeadDecay::Fixed(g) = &self.decay {
            if g.len() != self.heads {
                return Err(invalid("armf", "one gamma per head"));
            }
        }
        if let Some(p) = &self.image_prior {
            if p.len() != self.heads {
                return Err(invalid("armf", "one prior gamma per head"));
            }
        }
        Ok(d_model / self.heads)
    }
}

/// Tape handles for one layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct ArmfVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_gamma: Option<Var>,
}

impl ArmfVars {
    pub fn record(tape: &mut Tape, w: &ArmfWeights) -> Self {
        Self {
            w_q: tape.leaf(&w.w_q),
            w_k: tape.leaf(&w.w_k),
            w_v: tape.leaf(&w.w_v),
            w_o: tape.leaf(&w.w_o),
            w_gamma: w.w_gamma.as_ref().map(|g| tape.leaf(g)),
        }
    }
}

/// Output of [`armf_tape`] along with per-head intermediate scores.
#[derive(Debug, Clone)]
pub struct ArmfOutput {
    pub out: Var,
    /// `softmax(Dots_img)` per head, `N×N_I`.
    pub image_probs: Vec<Var>,
    /// `Dots_text ⊙ M` per head, `N×N_T` (absent when `N_T = 0`).
    pub text_scores: Vec<Var>,
    /// The text decay block per head, `N_T×N_T`.
    pub decays: Vec<Vec<f64>>,
}

/// Multi-head ARMF on a tape. `x` is `N×d` with the first `n_image` rows
/// being image tokens.
pub fn armf_tape(tape: &mut Tape, x: Var, n_image: usize, vars: &ArmfVars, cfg: &ArmfHeadConfig) -> Result<ArmfOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(invalid("armf", "input must be a matrix"));
    }
    let (n, d) = (shape[0], shape[1]);
    if n_image == 0 {
        return Err(invalid("armf", "softmax over an empty image key set"));
    }
    if n_image > n {
        return Err(invalid("armf", "more image tokens than rows"));
    }
    let dh = cfg.validate(d)?;
    let n_text = n - n_image;
    let scale = 1.0 / math::sqrt(dh as f64);

    let q = tape.matmul(x, vars.w_q)?;
    let k = tape.matmul(x, vars.w_k)?;
    let v = tape.matmul(x, vars.w_v)?;
    let gate_logits = match (&cfg.decay, n_text) {
        (HeadDecay::Gated { .. }, nt) if nt > 0 => {
            let wg = vars.w_gamma.ok_or_else(|| invalid("armf", "gated decay needs W_γ"))?;
            let xt = tape.slice_rows(x, n_image, n)?;
            Some(tape.matmul(xt, wg)?)
        }
        _ => None,
    };

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut image_probs = Vec::with_capacity(cfg.heads);
    let mut text_scores = Vec::new();
    let mut decays = Vec::new();
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let dots = tape.scale(raw, scale);

        let mut img = if n_text == 0 { dots } else { tape.slice_cols(dots, 0, n_image)? };
        if let Some(prior) = &cfg.image_prior {
            img = tape.add_const(img, &image_prior_logits(n, n_image, prior[h]))?;
        }
        let probs = tape.softmax_rows(img)?;
        image_probs.push(probs);

        let ret = if n_text == 0 {
            probs
        } else {
            let txt = tape.slice_cols(dots, n_image, n)?;
            let masked = match &cfg.decay {
                HeadDecay::Fixed(g) => {
                    let mask = armf_mask(n_image, n_text, g[h])?;
                    decays.push(mask.data()[n_image * n_text..].to_vec());
                    tape.mul_const(txt, mask.into_data())?
                }
                HeadDecay::Gated { tau } => {
                    let gl = gate_logits.expect("computed above");
                    let col = if cfg.heads == 1 { gl } else { tape.slice_cols(gl, h, h + 1)? };
                    let z = tape.reshape(col, &[n_text])?;
                    let dt = tape.gated_decay(z, *tau)?;
                    decays.push(tape.value(dt).to_vec());
                    let zeros = tape.constant(&[n_image, n_text], vec![0.0; n_image * n_text])?;
                    let mask = tape.concat_rows(&[zeros, dt])?;
                    tape.mul(txt, mask)?
                }
            };
            text_scores.push(masked);
            tape.concat_cols(&[probs, masked])?
        };
        heads.push(tape.matmul(ret, vh)?);
    }
    let y = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let out = tape.matmul(y, vars.w_o)?;
    Ok(ArmfOutput {
        out,
        image_probs,
        text_scores,
        decays,
    })
}

/// Parallel ARMF: per-head fusion, head concatenation and `W_O`.
pub fn armf_parallel(seq: &FusionSequence, w: &ArmfWeights, cfg: &ArmfHeadConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(&seq.x);
    let vars = ArmfVars::record(&mut tape, w);
    let out = armf_tape(&mut tape, x, seq.n_image(), &vars, cfg)?;
    Ok(tape.tensor(out.out))
}

/// Head configuration for layer `l` of a schedule.
pub fn layer_config(schedule: &GammaSchedule, layer: usize, prior: ImagePrior) -> Result<ArmfHeadConfig> {
    if layer >= schedule.layers {
        return Err(invalid("marmf", alloc::format!("layer {layer} ≥ {}", schedule.layers)));
    }
    let decay = if schedule.strategy == GammaStrategy::Gated {
        HeadDecay::Gated { tau: schedule.tau }
    } else {
        HeadDecay::Fixed(schedule.layer_gammas(layer)?)
    };
    Ok(ArmfHeadConfig {
        heads: schedule.heads,
        decay,
        image_prior: prior.gammas(schedule, layer)?,
    })
}

/// Multi-head ARMF with the γ of `(layer, h)` taken from `schedule`.
pub fn marmf_forward(
    seq: &FusionSequence,
    layer: usize,
    schedule: &GammaSchedule,
    w: &ArmfWeights,
    prior: ImagePrior,
) -> Result<Tensor> {
    armf_parallel(seq, w, &layer_config(schedule, layer, prior)?)
}

/// Image keys and values for one layer, `N_I×d` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub n_image: usize,
    pub d: usize,
}

impl LayerKv {
    /// Project a layer's image-row input.
    pub fn project(x_img: &Tensor, w: &ArmfWeights, counter: &mut OpCounter) -> Result<Self> {
        let k = x_img.matmul(&w.w_k, counter)?;
        let v = x_img.matmul(&w.w_v, counter)?;
        Ok(Self {
            n_image: x_img.rows(),
            d: x_img.cols(),
            k: k.into_data(),
            v: v.into_data(),
        })
    }
}

/// Image K/V for every layer, built once per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageKvCache {
    pub layers: Vec<LayerKv>,
}

impl ImageKvCache {
    pub fn n_image(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_image)
    }

    pub fn elements(&self) -> usize {
        self.layers.iter().map(|l| l.k.len() + l.v.len()).sum()
    }
}

/// Cache for a stack made only of ARMF layers: layer `l+1` sees the image
/// rows produced by layer `l`, which never depend on text.
pub fn armf_cache_image(x_img: &Tensor, layers: &[(ArmfWeights, ArmfHeadConfig)]) -> Result<ImageKvCache> {
    x_img.expect_rank2("armf_cache_image")?;
    let mut counter = OpCounter::new();
    let mut input = x_img.clone();
    let mut out = Vec::with_capacity(layers.len());
    for (w, cfg) in layers {
        out.push(LayerKv::project(&input, w, &mut counter)?);
        let seq = FusionSequence::new(input, x_img.rows())?;
        input = armf_parallel(&seq, w, cfg)?;
    }
    Ok(ImageKvCache { layers: out })
}

/// `x·W` for a row vector, counted.
pub(crate) fn row_matmul(x: &[f64], w: &Tensor, counter: &mut OpCounter) -> Vec<f64> {
    kernels::matmul(x, w.data(), 1, w.rows(), w.cols(), counter)
}

/// Softmax attention of one query over image keys, accumulated into `out`.
pub(crate) fn image_attend(qh: &[f64], cache: &LayerKv, lo: usize, out: &mut [f64], counter: &mut OpCounter) {
    let (d, dh, ni) = (cache.d, qh.len(), cache.n_image);
    let mut scores = vec![0.0; ni];
    for (j, s) in scores.iter_mut().enumerate() {
        *s = kernels::dot(qh, &cache.k[j * d + lo..j * d + lo + dh]);
    }
    counter.matmul(1, dh, ni);
    kernels::softmax_into(&scores.clone(), &mut scores);
    counter.matmul(1, ni, dh);
    for (j, &p) in scores.iter().enumerate() {
        for (o, &vv) in out.iter_mut().zip(&cache.v[j * d + lo..j * d + lo + dh]) {
            *o += p * vv;
        }
    }
}

/// Per-head gate or fixed γ for one text token.
pub(crate) fn step_gammas(x_n: &[f64], w: &ArmfWeights, decay: &HeadDecay, heads: usize) -> Result<Vec<f64>> {
    match decay {
        HeadDecay::Fixed(g) => Ok(g.clone()),
        HeadDecay::Gated { tau } => {
            let wg = w.w_gamma.as_ref().ok_or_else(|| invalid("armf", "gated decay needs W_γ"))?;
            let z = kernels::matmul(x_n, wg.data(), 1, wg.rows(), heads, &mut OpCounter::new());
            Ok(z.into_iter().map(|zi| gate(zi, *tau)).collect())
        }
    }
}

/// One text token through one ARMF layer: absorb `k_nᵀv_n` into each head's
/// state, read `o_text = (q_n/√d_head)·S_n`, add the image attention, project.
pub fn armf_recurrent_step(
    states: &mut [RetentionState],
    cache: &LayerKv,
    x_n: &[f64],
    w: &ArmfWeights,
    cfg: &ArmfHeadConfig,
    counter: &mut OpCounter,
) -> Result<Vec<f64>> {
    let d = w.d_model();
    let dh = cfg.validate(d)?;
    if x_n.len() != d || cache.d != d || states.len() != cfg.heads {
        return Err(Error::ShapeMismatch {
            op: "armf_recurrent_step",
            left: vec![d, cfg.heads],
            right: vec![x_n.len(), states.len()],
        });
    }
    if states.iter().any(|s| s.d_k != dh || s.d_v != dh) {
        return Err(invalid("armf_recurrent_step", "state does not match head size"));
    }
    let scale = 1.0 / math::sqrt(dh as f64);
    let q = row_matmul(x_n, &w.w_q, counter);
    let k = row_matmul(x_n, &w.w_k, counter);
    let v = row_matmul(x_n, &w.w_v, counter);
    let gammas = step_gammas(x_n, w, &cfg.decay, cfg.heads)?;
    let mut y = vec![0.0; d];
    for (h, state) in states.iter_mut().enumerate() {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh: Vec<f64> = q[lo..hi].iter().map(|x| x * scale).collect();
        state.absorb(&k[lo..hi], &v[lo..hi], gammas[h], counter);
        state.read_into(&qh, &mut y[lo..hi], counter);
        image_attend(&qh, cache, lo, &mut y[lo..hi], counter);
    }
    Ok(row_matmul(&y, &w.w_o, counter))
}

/// Recurrent evaluation of one ARMF layer over a whole sequence: image rows
/// from an image-only parallel pass, text rows one token at a time.
pub fn armf_recurrent(seq: &FusionSequence, w: &ArmfWeights, cfg: &ArmfHeadConfig) -> Result<Tensor> {
    let d = w.d_model();
    let dh = cfg.validate(d)?;
    let ni = seq.n_image();
    let x = &seq.x;
    let img = Tensor::new(&[ni, d], x.data()[..ni * d].to_vec())?;
    let img_out = armf_parallel(&FusionSequence::new(img.clone(), ni)?, w, cfg)?;
    let mut counter = OpCounter::new();
    let cache = LayerKv::project(&img, w, &mut counter)?;
    let mut states = vec![RetentionState::new(dh, dh); cfg.heads];
    let mut data = img_out.data().to_vec();
    for t in 0..seq.n_text() {
        let row = &x.data()[(ni + t) * d..(ni + t + 1) * d];
        data.extend(armf_recurrent_step(&mut states, &cache, row, w, cfg, &mut counter)?);
    }
    Tensor::new(&[seq.len(), d], data)
}
