//! Retention: decay priors, gamma schedules and the parallel/recurrent forms.
//!
//! With `D[n][m] = γ^(n−m)` for `n ≥ m`, the parallel form `(QKᵀ ⊙ D)V` and
//! the recurrence `S_n = γS_{n−1} + k_nᵀv_n`, `o_n = q_nS_n` produce the same
//! rows. The gated variant replaces the constant `γ` by per-position gates
//! `sigmoid(x_n W_γ)^(1/τ)`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::OpCounter;
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Default γ subtractor for the reduced-memory schedules.
pub const DEFAULT_GAMMA_SUBTRACTOR: f64 = 0.86;
/// Default gate temperature for gated retention.
pub const DEFAULT_TAU: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayKind {
    Causal,
    Gated,
    Bidirectional,
}

/// An `n×n` decay prior, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayMatrix {
    n: usize,
    entries: Vec<f64>,
    kind: DecayKind,
}

impl DecayMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> DecayKind {
        self.kind
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n, self.n], self.entries.clone()).expect("n ≥ 1")
    }
}

fn check_gamma(op: &'static str, gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(invalid(op, alloc::format!("gamma {gamma} outside (0, 1)")))
    }
}

/// Lower-triangular product decay; `gates[0]` never enters a product.
pub(crate) fn product_decay(gates: &[f64]) -> Vec<f64> {
    let n = gates.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        d[i * n + i] = 1.0;
        for j in 0..i {
            d[i * n + j] = d[(i - 1) * n + j] * gates[i];
        }
    }
    d
}

/// Causal decay `D[n][m] = γ^(n−m)` for `n ≥ m`, zero above the diagonal.
pub fn build_decay(n: usize, gamma: f64) -> Result<DecayMatrix> {
    if n == 0 {
        return Err(invalid("build_decay", "length must be at least 1"));
    }
    check_gamma("build_decay", gamma)?;
    Ok(DecayMatrix {
        n,
        entries: product_decay(&vec![gamma; n]),
        kind: DecayKind::Causal,
    })
}

/// Data-dependent decay `D[n][m] = ∏_{i=m+1..n} γ_i`.
pub fn build_decay_gated(gammas: &[f64]) -> Result<DecayMatrix> {
    if gammas.is_empty() {
        return Err(invalid("build_decay_gated", "need at least one gate"));
    }
    for &g in gammas {
        check_gamma("build_decay_gated", g)?;
    }
    Ok(DecayMatrix {
        n: gammas.len(),
        entries: product_decay(gammas),
        kind: DecayKind::Gated,
    })
}

/// Symmetric decay `D[n][m] = γ^|n−m|`.
pub fn build_decay_bidirectional(n: usize, gamma: f64) -> Result<DecayMatrix> {
    if n == 0 {
        return Err(invalid("build_decay_bidirectional", "length must be at least 1"));
    }
    check_gamma("build_decay_bidirectional", gamma)?;
    let causal = product_decay(&vec![gamma; n]);
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            entries[i * n + j] = if j <= i { causal[i * n + j] } else { causal[j * n + i] };
        }
    }
    Ok(DecayMatrix {
        n,
        entries,
        kind: DecayKind::Bidirectional,
    })
}

/// Gate value `sigmoid(z)^(1/τ)`.
pub fn gate(z: f64, tau: f64) -> f64 {
    math::powf(math::sigmoid(z), 1.0 / tau)
}

/// Per-position gates for `x: n×d` and a gate column `w_gamma: d`.
pub fn gate_values(x: &Tensor, w_gamma: &[f64], tau: f64) -> Result<Vec<f64>> {
    x.expect_rank2("gate_values")?;
    if w_gamma.len() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "gate_values",
            left: x.shape().to_vec(),
            right: vec![w_gamma.len()],
        });
    }
    Ok((0..x.rows()).map(|r| gate(kernels::dot(x.row(r), w_gamma), tau)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaStrategy {
    Original,
    Gated,
    SmallGammaOnly,
    HeadWise,
    LayerWise,
}

impl GammaStrategy {
    pub const ALL: [GammaStrategy; 5] = [
        GammaStrategy::Original,
        GammaStrategy::Gated,
        GammaStrategy::SmallGammaOnly,
        GammaStrategy::HeadWise,
        GammaStrategy::LayerWise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GammaStrategy::Original => "original",
            GammaStrategy::Gated => "gated",
            GammaStrategy::SmallGammaOnly => "small-gamma-only",
            GammaStrategy::HeadWise => "head-wise",
            GammaStrategy::LayerWise => "layer-wise",
        }
    }
}

impl fmt::Display for GammaStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GammaStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GammaStrategy::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| invalid("GammaStrategy", alloc::format!("unknown strategy `{s}`")))
    }
}

/// Per-layer, per-head γ assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub strategy: GammaStrategy,
    pub layers: usize,
    pub heads: usize,
    pub gamma_subtractor: f64,
    pub tau: f64,
}

impl GammaSchedule {
    pub fn new(strategy: GammaStrategy, layers: usize, heads: usize) -> Self {
        Self {
            strategy,
            layers,
            heads,
            gamma_subtractor: DEFAULT_GAMMA_SUBTRACTOR,
            tau: DEFAULT_TAU,
        }
    }

    /// `e^{linspace(ln 1/32, ln 1/512, H)}`, i.e. `1 − γ` of the original schedule.
    fn base_memory(heads: usize) -> Vec<f64> {
        math::linspace(math::ln(1.0 / 32.0), math::ln(1.0 / 512.0), heads)
            .into_iter()
            .map(math::exp)
            .collect()
    }

    /// The `L×H` table of fixed γ values.
    ///
    /// Gated retention has no fixed table; asking for one is an error.
    pub fn gamma_table(&self) -> Result<Vec<Vec<f64>>> {
        let (l_count, h_count) = (self.layers, self.heads);
        if l_count == 0 || h_count == 0 {
            return Err(invalid("gamma_schedule", "need at least one layer and one head"));
        }
        let sub = self.gamma_subtractor;
        let base = Self::base_memory(h_count);
        let row = |l: usize| -> Vec<f64> {
            match self.strategy {
                GammaStrategy::Original | GammaStrategy::Gated => base.iter().map(|e| 1.0 - e).collect(),
                GammaStrategy::SmallGammaOnly => base.iter().map(|e| 1.0 - e - sub).collect(),
                GammaStrategy::HeadWise => (0..h_count)
                    .map(|h| {
                        let frac = if h_count == 1 { 0.0 } else { h as f64 / (h_count - 1) as f64 };
                        (1.0 - sub - 1.0 / 32.0) + frac * sub
                    })
                    .collect(),
                GammaStrategy::LayerWise => {
                    let frac = if l_count == 1 { 1.0 } else { l as f64 / (l_count - 1) as f64 };
                    base.iter().map(|e| 1.0 - sub * (1.0 - frac) - e).collect()
                }
            }
        };
        if self.strategy == GammaStrategy::Gated {
            return Err(invalid("gamma_schedule", "gated retention derives γ from the input"));
        }
        let table: Vec<Vec<f64>> = (0..l_count).map(row).collect();
        for (l, r) in table.iter().enumerate() {
            for (h, &g) in r.iter().enumerate() {
                if !(g > 0.0 && g < 1.0) {
                    return Err(invalid(
                        "gamma_schedule",
                        alloc::format!("γ[{l}][{h}] = {g} outside (0, 1); lower the subtractor"),
                    ));
                }
            }
        }
        Ok(table)
    }

    /// γ for one layer; `Original` values for the gated strategy (used only
    /// by priors that need a fixed γ).
    pub fn layer_gammas(&self, layer: usize) -> Result<Vec<f64>> {
        if layer >= self.layers {
            return Err(invalid("gamma_schedule", alloc::format!("layer {layer} ≥ {}", self.layers)));
        }
        let sched = if self.strategy == GammaStrategy::Gated {
            GammaSchedule {
                strategy: GammaStrategy::Original,
                ..*self
            }
        } else {
            *self
        };
        Ok(sched.gamma_table()?.swap_remove(layer))
    }
}

/// Rotary phases on consecutive coordinate pairs, `θ_i = 10000^(−2i/d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub enabled: bool,
    pub theta: Vec<f64>,
}

impl PhaseConfig {
    pub fn new(d: usize, enabled: bool) -> Self {
        let theta = (0..d / 2)
            .map(|i| math::powf(10000.0, -2.0 * i as f64 / d as f64))
            .collect();
        Self { enabled, theta }
    }

    pub fn disabled(d: usize) -> Self {
        Self::new(d, false)
    }

    /// Angles for 1-based positions `start..start+rows`, laid out `rows × d/2`.
    pub fn angles(&self, rows: usize, start: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.theta.len());
        for r in 0..rows {
            let pos = (start + r) as f64;
            out.extend(self.theta.iter().map(|t| pos * t));
        }
        out
    }

    /// Rotate one row in place for a 1-based position.
    pub fn rotate(&self, x: &mut [f64], position: usize) {
        if !self.enabled {
            return;
        }
        for (j, t) in self.theta.iter().enumerate() {
            let a = position as f64 * t;
            let (c, s) = (math::cos(a), math::sin(a));
            let (u, v) = (x[2 * j], x[2 * j + 1]);
            x[2 * j] = u * c - v * s;
            x[2 * j + 1] = u * s + v * c;
        }
    }
}

/// Query/key/value projections for one retention operator.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionProj {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl RetentionProj {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Tensor::eye(d),
            w_k: Tensor::eye(d),
            w_v: Tensor::eye(d),
        }
    }
}

/// Parallel retention recorded on a tape: `(Q'K'ᵀ ⊙ D)V`, phases applied to
/// `Q` and `K` with 1-based positions when enabled.
pub fn retention_parallel_tape(
    tape: &mut Tape,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    decay: Var,
    phases: &PhaseConfig,
) -> Result<Var> {
    let mut q = tape.matmul(x, w_q)?;
    let mut k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    if phases.enabled {
        let n = tape.shape(x)[0];
        let angles = phases.angles(n, 1);
        q = tape.rotate_pairs(q, &angles)?;
        k = tape.rotate_pairs(k, &angles)?;
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    if tape.shape(scores) != tape.shape(decay) {
        return Err(Error::ShapeMismatch {
            op: "retention_parallel",
            left: tape.shape(scores).to_vec(),
            right: tape.shape(decay).to_vec(),
        });
    }
    let masked = tape.mul(scores, decay)?;
    tape.matmul(masked, v)
}

/// Parallel retention `(QKᵀ ⊙ D)V` for `x: n×d`.
pub fn retention_parallel(x: &Tensor, proj: &RetentionProj, decay: &DecayMatrix, phases: &PhaseConfig) -> Result<Tensor> {
    x.expect_rank2("retention_parallel")?;
    if decay.n() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "retention_parallel",
            left: x.shape().to_vec(),
            right: vec![decay.n(), decay.n()],
        });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (wq, wk, wv) = (tape.leaf(&proj.w_q), tape.leaf(&proj.w_k), tape.leaf(&proj.w_v));
    let d = tape.constant(&[decay.n(), decay.n()], decay.entries().to_vec())?;
    let out = retention_parallel_tape(&mut tape, xv, wq, wk, wv, d, phases)?;
    Ok(tape.tensor(out))
}

/// Recurrent state `S` (`d_k×d_v`) plus the count of absorbed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionState {
    pub s: Vec<f64>,
    pub d_k: usize,
    pub d_v: usize,
    pub step: usize,
}

impl RetentionState {
    pub fn new(d_k: usize, d_v: usize) -> Self {
        Self {
            s: vec![0.0; d_k * d_v],
            d_k,
            d_v,
            step: 0,
        }
    }

    pub fn elements(&self) -> usize {
        self.s.len()
    }

    /// `S ← γS + kᵀv`. Only the outer product is counted.
    pub fn absorb(&mut self, k: &[f64], v: &[f64], gamma: f64, counter: &mut OpCounter) {
        debug_assert_eq!(k.len(), self.d_k);
        debug_assert_eq!(v.len(), self.d_v);
        counter.matmul(self.d_k, 1, self.d_v);
        for (i, &ki) in k.iter().enumerate() {
            let row = &mut self.s[i * self.d_v..(i + 1) * self.d_v];
            for (s, &vj) in row.iter_mut().zip(v) {
                *s = gamma * *s + ki * vj;
            }
        }
        self.step += 1;
    }

    /// `q·S`, accumulated into `out`.
    pub fn read_into(&self, q: &[f64], out: &mut [f64], counter: &mut OpCounter) {
        counter.matmul(1, self.d_k, self.d_v);
        let mut acc = vec![0.0; self.d_v];
        for (i, &qi) in q.iter().enumerate() {
            for (a, &s) in acc.iter_mut().zip(&self.s[i * self.d_v..(i + 1) * self.d_v]) {
                *a += qi * s;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o += a;
        }
    }

    pub fn read(&self, q: &[f64], counter: &mut OpCounter) -> Vec<f64> {
        let mut out = vec![0.0; self.d_v];
        self.read_into(q, &mut out, counter);
        out
    }
}

/// One recurrent step: returns `q_n S_n` and the updated state.
pub fn retention_recurrent_step(
    state: &RetentionState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    gamma: f64,
    counter: &mut OpCounter,
) -> Result<(Vec<f64>, RetentionState)> {
    if q.len() != state.d_k || k.len() != state.d_k || v.len() != state.d_v {
        return Err(Error::ShapeMismatch {
            op: "retention_recurrent_step",
            left: vec![state.d_k, state.d_v],
            right: vec![q.len(), k.len(), v.len()],
        });
    }
    let mut next = state.clone();
    next.absorb(k, v, gamma, counter);
    let out = next.read(q, counter);
    Ok((out, next))
}

/// Run the recurrence over all rows of `x`; `gammas[n]` decays the state
/// before token `n` is absorbed.
pub fn retention_recurrent(x: &Tensor, proj: &RetentionProj, gammas: &[f64], phases: &PhaseConfig) -> Result<Tensor> {
    x.expect_rank2("retention_recurrent")?;
    let n = x.rows();
    if gammas.len() != n {
        return Err(invalid("retention_recurrent", "one gamma per position"));
    }
    let mut c = OpCounter::new();
    let q = x.matmul(&proj.w_q, &mut c)?;
    let k = x.matmul(&proj.w_k, &mut c)?;
    let v = x.matmul(&proj.w_v, &mut c)?;
    let dk = q.cols();
    let dv = v.cols();
    let mut state = RetentionState::new(dk, dv);
    let mut out = Vec::with_capacity(n * dv);
    for t in 0..n {
        let (mut qt, mut kt) = (q.row(t).to_vec(), k.row(t).to_vec());
        phases.rotate(&mut qt, t + 1);
        phases.rotate(&mut kt, t + 1);
        state.absorb(&kt, v.row(t), gammas[t], &mut c);
        out.extend(state.read(&qt, &mut c));
    }
    Tensor::new(&[n, dv], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn decay_examples() {
        let d = build_decay(3, 0.5).unwrap();
        assert_eq!(d.entries(), &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0]);
        assert_eq!(build_decay(1, 0.3).unwrap().entries(), &[1.0]);
        assert!(build_decay(3, 1.0).is_err());
        assert!(build_decay(3, 0.0).is_err());
    }

    #[test]
    fn gated_examples() {
        let d = build_decay_gated(&[0.9, 0.8, 0.7]).unwrap();
        assert!((d.at(2, 0) - 0.56).abs() < 1e-15);
        let c = build_decay_gated(&[0.6; 5]).unwrap();
        assert_eq!(c.entries(), build_decay(5, 0.6).unwrap().entries());
        assert!((gate(0.0, 16.0) - 0.957603).abs() < 1e-6);
        assert!(build_decay_gated(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn bidirectional_example() {
        let d = build_decay_bidirectional(3, 0.5).unwrap();
        assert_eq!(d.entries(), &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn schedule_examples() {
        let o = GammaSchedule::new(GammaStrategy::Original, 1, 2).gamma_table().unwrap();
        assert!(close(&o[0], &[0.96875, 0.998046875], 1e-15));
        let hw = GammaSchedule::new(GammaStrategy::HeadWise, 1, 2).gamma_table().unwrap();
        assert!(close(&hw[0], &[0.10875, 0.96875], 1e-15));
        let lw = GammaSchedule::new(GammaStrategy::LayerWise, 3, 2).gamma_table().unwrap();
        assert!((lw[0][0] - 0.10875).abs() < 1e-15);
        assert_eq!(lw[2], GammaSchedule::new(GammaStrategy::Original, 3, 2).gamma_table().unwrap()[2]);
        assert!(GammaSchedule::new(GammaStrategy::Gated, 1, 2).gamma_table().is_err());
        let mut big = GammaSchedule::new(GammaStrategy::SmallGammaOnly, 1, 4);
        big.gamma_subtractor = 0.99;
        assert!(big.gamma_table().is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in GammaStrategy::ALL {
            assert_eq!(s.name().parse::<GammaStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn single_token_retention() {
        let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0]]).unwrap();
        let p = RetentionProj::identity(3);
        let d = build_decay(1, 0.5).unwrap();
        let out = retention_parallel(&x, &p, &d, &PhaseConfig::disabled(3)).unwrap();
        let qk = 0.25 + 1.0 + 4.0;
        assert!(close(out.data(), &[qk * 0.5, -qk, qk * 2.0], 1e-15));
    }

    #[test]
    fn recurrent_step_with_zero_gamma_is_memoryless() {
        let mut c = OpCounter::new();
        let mut st = RetentionState::new(2, 2);
        for (q, k, v) in [([1.0, 2.0], [0.5, 0.5], [3.0, -1.0]), ([0.0, 1.0], [2.0, 1.0], [1.0, 1.0])] {
            let (o, next) = retention_recurrent_step(&st, &q, &k, &v, 0.0, &mut c).unwrap();
            let qk = q[0] * k[0] + q[1] * k[1];
            assert!(close(&o, &[qk * v[0], qk * v[1]], 1e-15));
            st = next;
        }
        assert_eq!(st.step, 2);
    }
}
