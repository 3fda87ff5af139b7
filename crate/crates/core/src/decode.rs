//! Greedy and beam-search decoding over two memory disciplines.
//!
//! The recurrent backend keeps a fixed `d_head×d_head` state per
//! (hypothesis, layer, head). The KV backend keeps every decoded text
//! token's key and value per (hypothesis, layer) and gathers the whole
//! history into fresh buffers whenever the beam is pruned. Image keys and
//! values are computed once per image and shared by every hypothesis.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::armf::{armf_recurrent_step, image_attend, row_matmul, step_gammas, ArmfHeadConfig, ArmfWeights, ImageKvCache, LayerKv};
use crate::cost::OpCounter;
use crate::data::{EOS, PAD, SOS};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::model::{sinusoidal_positions, Mixer, Model};
use crate::retention::RetentionState;
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Recurrent,
    Kv,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Recurrent => "recurrent",
            Backend::Kv => "kv",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Backend::Recurrent),
            "kv" => Ok(Backend::Kv),
            _ => Err(invalid("Backend", alloc::format!("unknown backend `{s}`"))),
        }
    }
}

/// A partial transcript. `tokens` excludes `SOS` and the final `EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

/// Deterministic ranking: higher score, then shorter, then smaller ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Counts for one decoding step over the whole beam.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepStats {
    pub step: usize,
    pub backend: Backend,
    pub beam: usize,
    pub mults: u64,
    pub adds: u64,
    /// Text-memory floats held after the step.
    pub live_elements: usize,
    /// Largest simultaneous text-memory footprint during the step.
    pub peak_elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub best: Hypothesis,
    pub finished: Vec<Hypothesis>,
    pub stats: Vec<StepStats>,
}

/// Per-layer text history of one hypothesis.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvLayerLane {
    /// `t×d` keys and values of the decoded text tokens.
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Retention only: per-head decay applied to each cached token, `H×t`.
    pub decay_weights: Vec<Vec<f64>>,
}

/// Growing key/value histories, `[hypothesis][layer]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvDecodeState {
    pub beams: Vec<Vec<KvLayerLane>>,
}

impl KvDecodeState {
    /// Stored key and value floats (decay weights are bookkeeping, not counted).
    pub fn elements(&self) -> usize {
        self.beams
            .iter()
            .flat_map(|b| b.iter())
            .map(|l| l.k.len() + l.v.len())
            .sum()
    }

    pub fn layer_elements(&self, layer: usize) -> usize {
        self.beams.iter().map(|b| b[layer].k.len() + b[layer].v.len()).sum()
    }
}

/// Gather every layer's cache rows by parent index into fresh buffers.
pub fn kv_reindex(state: &KvDecodeState, parents: &[usize]) -> Result<KvDecodeState> {
    let b = state.beams.len();
    if let Some(&p) = parents.iter().find(|&&p| p >= b) {
        return Err(invalid("kv_reindex", alloc::format!("parent {p} out of range {b}")));
    }
    Ok(KvDecodeState {
        beams: parents.iter().map(|&p| state.beams[p].clone()).collect(),
    })
}

/// Fixed-size recurrent states, `[hypothesis][layer][head]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecurrentDecodeState {
    pub beams: Vec<Vec<Vec<RetentionState>>>,
}

impl RecurrentDecodeState {
    pub fn elements(&self) -> usize {
        self.beams
            .iter()
            .flat_map(|b| b.iter().flat_map(|l| l.iter()))
            .map(RetentionState::elements)
            .sum()
    }
}

#[derive(Debug, Clone)]
enum Memory {
    Recurrent(RecurrentDecodeState),
    Kv(KvDecodeState),
}

impl Memory {
    fn elements(&self) -> usize {
        match self {
            Memory::Recurrent(s) => s.elements(),
            Memory::Kv(s) => s.elements(),
        }
    }

    fn reindex(&self, parents: &[usize]) -> Result<Memory> {
        Ok(match self {
            Memory::Recurrent(s) => Memory::Recurrent(RecurrentDecodeState {
                beams: parents.iter().map(|&p| s.beams[p].clone()).collect(),
            }),
            Memory::Kv(s) => Memory::Kv(kv_reindex(s, parents)?),
        })
    }
}

struct LayerW {
    mix: ArmfWeights,
    cfg: Option<ArmfHeadConfig>,
    ln1: (Vec<f64>, Vec<f64>),
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
    ln2: (Vec<f64>, Vec<f64>),
}

/// Step-wise evaluator of a model for one image.
pub struct Decoder<'m> {
    model: &'m Model,
    layers: Vec<LayerW>,
    cache: ImageKvCache,
    tok_emb: &'m Tensor,
    head_w: &'m Tensor,
    head_b: &'m [f64],
}

fn layer_norm_row(x: &[f64], g: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    kernels::layer_norm(x, x.len(), &g.0, &g.1).0
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl<'m> Decoder<'m> {
    /// Embed the image and cache its keys/values for every layer.
    pub fn new(model: &'m Model, image: &Tensor) -> Result<Self> {
        let inputs = model.image_layer_inputs(image)?;
        let ps = model.params();
        let lay = model.layout();
        let mut layers = Vec::with_capacity(lay.layers.len());
        let mut cache = ImageKvCache { layers: Vec::new() };
        let mut counter = OpCounter::new();
        for (l, li) in lay.layers.iter().enumerate() {
            let mix = model.mixer_weights(l);
            cache.layers.push(LayerKv::project(&inputs[l], &mix, &mut counter)?);
            let v = |i: usize| ps.get(i).data().to_vec();
            layers.push(LayerW {
                cfg: model.layer_configs().get(l).cloned(),
                mix,
                ln1: (v(li.ln1_gain), v(li.ln1_bias)),
                w1: ps.get(li.ff_w1).clone(),
                b1: v(li.ff_b1),
                w2: ps.get(li.ff_w2).clone(),
                b2: v(li.ff_b2),
                ln2: (v(li.ln2_gain), v(li.ln2_bias)),
            });
        }
        if layers.is_empty() {
            let n = model.embed_image(image)?.e.rows();
            cache.layers.push(LayerKv {
                k: Vec::new(),
                v: Vec::new(),
                n_image: n,
                d: model.config().d_model,
            });
        }
        Ok(Self {
            model,
            layers,
            cache,
            tok_emb: ps.get(lay.tok_emb),
            head_w: ps.get(lay.head_w),
            head_b: ps.get(lay.head_b).data(),
        })
    }

    pub fn image_cache(&self) -> &ImageKvCache {
        &self.cache
    }

    fn check_backend(&self, backend: Backend) -> Result<()> {
        if backend == Backend::Recurrent && self.model.config().mixer == Mixer::Attention {
            return Err(Error::UnsupportedBackend("softmax attention has no recurrent form"));
        }
        Ok(())
    }

    fn fresh_memory(&self, backend: Backend, beams: usize) -> Memory {
        let c = self.model.config();
        match backend {
            Backend::Recurrent => {
                let dh = c.d_head();
                let lane = vec![vec![RetentionState::new(dh, dh); c.heads]; self.layers.len()];
                Memory::Recurrent(RecurrentDecodeState {
                    beams: vec![lane; beams],
                })
            }
            Backend::Kv => {
                let lane = KvLayerLane {
                    decay_weights: vec![Vec::new(); c.heads],
                    ..Default::default()
                };
                Memory::Kv(KvDecodeState {
                    beams: vec![vec![lane; self.layers.len()]; beams],
                })
            }
        }
    }

    /// Text-query mixer output for a KV lane; appends this token's K/V.
    fn kv_mix(&self, l: usize, lane: &mut KvLayerLane, x: &[f64], counter: &mut OpCounter) -> Result<Vec<f64>> {
        let c = self.model.config();
        let (d, heads, dh) = (c.d_model, c.heads, c.d_head());
        let lw = &self.layers[l];
        let w = &lw.mix;
        let scale = 1.0 / math::sqrt(dh as f64);
        let q = row_matmul(x, &w.w_q, counter);
        let k = row_matmul(x, &w.w_k, counter);
        let v = row_matmul(x, &w.w_v, counter);
        lane.k.extend_from_slice(&k);
        lane.v.extend_from_slice(&v);
        let t = lane.k.len() / d;
        let kv = &self.cache.layers[l];
        let mut y = vec![0.0; d];
        match &lw.cfg {
            Some(cfg) => {
                let gammas = step_gammas(x, w, &cfg.decay, heads)?;
                for h in 0..heads {
                    let (lo, hi) = (h * dh, (h + 1) * dh);
                    let wts = &mut lane.decay_weights[h];
                    for wj in wts.iter_mut() {
                        *wj *= gammas[h];
                    }
                    wts.push(1.0);
                    let qh: Vec<f64> = q[lo..hi].iter().map(|x| x * scale).collect();
                    counter.matmul(1, dh, t);
                    counter.matmul(1, t, dh);
                    for j in 0..t {
                        let s = wts[j] * kernels::dot(&qh, &lane.k[j * d + lo..j * d + hi]);
                        for (o, &vv) in y[lo..hi].iter_mut().zip(&lane.v[j * d + lo..j * d + hi]) {
                            *o += s * vv;
                        }
                    }
                    image_attend(&qh, kv, lo, &mut y[lo..hi], counter);
                }
            }
            None => {
                let ni = kv.n_image;
                for h in 0..heads {
                    let (lo, hi) = (h * dh, (h + 1) * dh);
                    let qh = &q[lo..hi];
                    let mut scores = Vec::with_capacity(ni + t);
                    for j in 0..ni {
                        scores.push(kernels::dot(qh, &kv.k[j * d + lo..j * d + hi]) * scale);
                    }
                    for j in 0..t {
                        scores.push(kernels::dot(qh, &lane.k[j * d + lo..j * d + hi]) * scale);
                    }
                    counter.matmul(1, dh, ni + t);
                    let mut p = vec![0.0; scores.len()];
                    kernels::softmax_into(&scores, &mut p);
                    counter.matmul(1, ni + t, dh);
                    for (j, &pj) in p.iter().enumerate() {
                        let row = if j < ni {
                            &kv.v[j * d + lo..j * d + hi]
                        } else {
                            &lane.v[(j - ni) * d + lo..(j - ni) * d + hi]
                        };
                        for (o, &vv) in y[lo..hi].iter_mut().zip(row) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        Ok(row_matmul(&y, &w.w_o, counter))
    }

    /// Feed `token` at text position `pos` through one hypothesis and return
    /// next-token log-probabilities.
    fn step_lane(&self, mem: &mut Memory, beam: usize, token: usize, pos: usize, counter: &mut OpCounter) -> Result<Vec<f64>> {
        let c = self.model.config();
        let d = c.d_model;
        if token >= c.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                size: c.vocab_size,
            });
        }
        let pe = sinusoidal_positions(pos + 1, d);
        let mut x: Vec<f64> = self.tok_emb.row(token).to_vec();
        add_assign(&mut x, &pe[pos * d..]);
        for (l, lw) in self.layers.iter().enumerate() {
            let m = match mem {
                Memory::Recurrent(s) => {
                    let cfg = lw.cfg.as_ref().expect("retention layers carry head configs");
                    armf_recurrent_step(&mut s.beams[beam][l], &self.cache.layers[l], &x, &lw.mix, cfg, counter)?
                }
                Memory::Kv(s) => self.kv_mix(l, &mut s.beams[beam][l], &x, counter)?,
            };
            add_assign(&mut x, &m);
            let h = layer_norm_row(&x, &lw.ln1);
            let mut f1 = row_matmul(&h, &lw.w1, counter);
            add_assign(&mut f1, &lw.b1);
            for v in &mut f1 {
                *v = math::gelu(*v);
            }
            let mut f2 = row_matmul(&f1, &lw.w2, counter);
            add_assign(&mut f2, &lw.b2);
            add_assign(&mut f2, &h);
            x = layer_norm_row(&f2, &lw.ln2);
        }
        let mut logits = row_matmul(&x, self.head_w, counter);
        add_assign(&mut logits, self.head_b);
        let mut lp = vec![0.0; logits.len()];
        kernels::log_softmax_into(&logits, &mut lp);
        Ok(lp)
    }

    fn allowed(id: usize) -> bool {
        id != SOS && id != PAD
    }

    /// Argmax decoding; ties go to the smallest id.
    pub fn greedy(&self, max_len: usize, backend: Backend) -> Result<Hypothesis> {
        self.check_backend(backend)?;
        let mut mem = self.fresh_memory(backend, 1);
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        };
        let mut counter = OpCounter::new();
        let mut token = SOS;
        for pos in 0..max_len {
            let lp = self.step_lane(&mut mem, 0, token, pos, &mut counter)?;
            let mut best = None::<(usize, f64)>;
            for (id, &v) in lp.iter().enumerate() {
                if Self::allowed(id) && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((id, v));
                }
            }
            let (id, v) = best.expect("vocabulary has non-special tokens");
            hyp.score += v;
            if id == EOS {
                hyp.finished = true;
                break;
            }
            hyp.tokens.push(id);
            token = id;
        }
        Ok(hyp)
    }

    /// Length-unnormalized beam search.
    pub fn beam_search(&self, beam: usize, max_len: usize, backend: Backend) -> Result<DecodeOutput> {
        if beam == 0 {
            return Err(invalid("beam_search", "beam size must be at least 1"));
        }
        self.check_backend(backend)?;
        let mut mem = self.fresh_memory(backend, beam);
        let mut live: Vec<Hypothesis> = (0..beam)
            .map(|i| Hypothesis {
                tokens: Vec::new(),
                score: if i == 0 { 0.0 } else { f64::NEG_INFINITY },
                finished: false,
            })
            .collect();
        let mut finished = Vec::new();
        let mut stats = Vec::new();
        for step in 0..max_len {
            let mut counter = OpCounter::new();
            let mut cands: Vec<(Hypothesis, usize)> = Vec::new();
            for (b, hyp) in live.iter().enumerate() {
                let token = hyp.tokens.last().copied().unwrap_or(SOS);
                let lp = self.step_lane(&mut mem, b, token, step, &mut counter)?;
                if hyp.score == f64::NEG_INFINITY {
                    continue;
                }
                for (id, &v) in lp.iter().enumerate() {
                    if !Self::allowed(id) {
                        continue;
                    }
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(id);
                    cands.push((
                        Hypothesis {
                            tokens,
                            score: hyp.score + v,
                            finished: false,
                        },
                        b,
                    ));
                }
            }
            cands.sort_by(|a, b| rank(&a.0, &b.0));
            let mut next = Vec::with_capacity(beam);
            let mut parents = Vec::with_capacity(beam);
            for (mut h, p) in cands {
                if next.len() == beam {
                    break;
                }
                if h.tokens.last() == Some(&EOS) {
                    if h.score > f64::NEG_INFINITY {
                        h.tokens.pop();
                        h.finished = true;
                        finished.push(h);
                    }
                } else {
                    next.push(h);
                    parents.push(p);
                }
            }
            while next.len() < beam {
                let mut filler = live[0].clone();
                filler.score = f64::NEG_INFINITY;
                filler.tokens.push(EOS + 1);
                next.push(filler);
                parents.push(0);
            }
            let before = mem.elements();
            let new_mem = mem.reindex(&parents)?;
            let after = new_mem.elements();
            let peak = match backend {
                Backend::Kv => before + after,
                Backend::Recurrent => before.max(after),
            };
            mem = new_mem;
            live = next;
            stats.push(StepStats {
                step: step + 1,
                backend,
                beam,
                mults: counter.mults,
                adds: counter.adds,
                live_elements: after,
                peak_elements: peak,
            });
            if finished.len() >= beam {
                break;
            }
        }
        finished.sort_by(rank);
        let best = match finished.first() {
            Some(h) => h.clone(),
            None => {
                let mut l = live.clone();
                l.sort_by(rank);
                l.swap_remove(0)
            }
        };
        Ok(DecodeOutput { best, finished, stats })
    }
}

/// Default backend of a model: recurrent for retention, KV for attention.
pub fn default_backend(model: &Model) -> Backend {
    match model.config().mixer {
        Mixer::Retention => Backend::Recurrent,
        Mixer::Attention => Backend::Kv,
    }
}

pub fn greedy_decode(model: &Model, image: &Tensor, max_len: usize) -> Result<Hypothesis> {
    Decoder::new(model, image)?.greedy(max_len, default_backend(model))
}

pub fn beam_search(model: &Model, image: &Tensor, beam: usize, max_len: usize, backend: Backend) -> Result<DecodeOutput> {
    Decoder::new(model, image)?.beam_search(beam, max_len, backend)
}

/// Transcript of a hypothesis under `vocab`.
pub fn transcript(h: &Hypothesis, vocab: &crate::data::Vocab) -> String {
    vocab.detokenize(&h.tokens)
}
