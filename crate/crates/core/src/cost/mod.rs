//! Operation and memory accounting for the three inference forms.
//!
//! `flops_closed_form` evaluates the published totals. `flops_instrumented`
//! runs the single-head computation through counting kernels, where every
//! scalar multiply and add of the two matrix products is tallied. Both
//! agree on multiplications; on additions the published totals undercount
//! (a length-`k` dot product takes `k−1` additions per output element, not
//! per row), so [`scalar_closed_form`] gives the closed form of what is
//! actually measured.

mod counter;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write};
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use counter::OpCounter;

use crate::error::{invalid, Error, Result};
use crate::retention::RetentionState;
use crate::rng::substream;
use crate::tensor::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostForm {
    Vanilla,
    KvCached,
    Recurrent,
}

impl CostForm {
    pub const ALL: [CostForm; 3] = [CostForm::Vanilla, CostForm::KvCached, CostForm::Recurrent];

    pub fn name(self) -> &'static str {
        match self {
            CostForm::Vanilla => "vanilla",
            CostForm::KvCached => "kv_cached",
            CostForm::Recurrent => "recurrent",
        }
    }
}

impl fmt::Display for CostForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(CostForm::Vanilla),
            "kv_cached" | "kv" | "kv-cached" => Ok(CostForm::KvCached),
            "recurrent" => Ok(CostForm::Recurrent),
            _ => Err(invalid("CostForm", format!("unknown form `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMethod {
    Recurrent,
    KvPersistent,
    KvPeak,
}

impl MemoryMethod {
    pub const ALL: [MemoryMethod; 3] = [MemoryMethod::Recurrent, MemoryMethod::KvPersistent, MemoryMethod::KvPeak];

    pub fn name(self) -> &'static str {
        match self {
            MemoryMethod::Recurrent => "recurrent",
            MemoryMethod::KvPersistent => "kv_persistent",
            MemoryMethod::KvPeak => "kv_peak",
        }
    }
}

impl FromStr for MemoryMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(MemoryMethod::Recurrent),
            "kv_persistent" | "kv-persistent" => Ok(MemoryMethod::KvPersistent),
            "kv_peak" | "kv-peak" => Ok(MemoryMethod::KvPeak),
            _ => Err(invalid("MemoryMethod", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub form: CostForm,
    pub n: usize,
    pub d: usize,
    pub mults: u64,
    pub adds: u64,
    pub total: u64,
}

impl CostReport {
    fn new(form: CostForm, n: usize, d: usize, mults: u64, adds: u64) -> Self {
        Self {
            form,
            n,
            d,
            mults,
            adds,
            total: mults + adds,
        }
    }
}

fn check_nd(op: &'static str, n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(invalid(op, "n and d must be at least 1"));
    }
    Ok(())
}

/// Published totals. Multiplications are exact; additions follow the
/// published per-stage counts.
pub fn flops_closed_form(form: CostForm, n: usize, d: usize) -> Result<CostReport> {
    check_nd("flops_closed_form", n, d)?;
    let (n, d) = (n as u64, d as u64);
    let (mults, adds) = match form {
        CostForm::Vanilla => (2 * n * n * d, n * n - 1 + n * (d - 1)),
        CostForm::KvCached => (2 * d * n, 2 * (n - 1)),
        CostForm::Recurrent => (2 * d * d, d - 1),
    };
    Ok(CostReport::new(form, n as usize, d as usize, mults, adds))
}

/// Closed form of the scalar counts that [`flops_instrumented`] measures.
pub fn scalar_closed_form(form: CostForm, n: usize, d: usize) -> Result<CostReport> {
    check_nd("scalar_closed_form", n, d)?;
    let (n, d) = (n as u64, d as u64);
    let (mults, adds) = match form {
        CostForm::Vanilla => (2 * n * n * d, n * n * (d - 1) + n * d * (n - 1)),
        CostForm::KvCached => (2 * d * n, n * (d - 1) + d * (n - 1)),
        CostForm::Recurrent => (2 * d * d, d * (d - 1)),
    };
    Ok(CostReport::new(form, n as usize, d as usize, mults, adds))
}

fn random(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Run one single-head evaluation and count its matrix-product scalars.
///
/// `vanilla`: `Q·Kᵀ` then `scores·V` over `n` tokens. `kv_cached`: one query
/// against `n` cached keys and values. `recurrent`: `k_nᵀv_n` into the state
/// then `q_n·S_n`; the decay scaling of the state is not a matrix product and
/// is not counted. Softmax is never counted.
pub fn flops_instrumented(form: CostForm, n: usize, d: usize) -> Result<CostReport> {
    check_nd("flops_instrumented", n, d)?;
    let mut rng = substream(0, "cost");
    let mut c = OpCounter::new();
    match form {
        CostForm::Vanilla => {
            let q = random(&mut rng, n * d);
            let k = random(&mut rng, n * d);
            let v = random(&mut rng, n * d);
            let kt = kernels::transpose(&k, n, d);
            let s = kernels::softmax_rows(&kernels::matmul(&q, &kt, n, d, n, &mut c), n, n);
            let _ = kernels::matmul(&s, &v, n, n, d, &mut c);
        }
        CostForm::KvCached => {
            let q = random(&mut rng, d);
            let kt = kernels::transpose(&random(&mut rng, n * d), n, d);
            let v = random(&mut rng, n * d);
            let s = kernels::softmax_rows(&kernels::matmul(&q, &kt, 1, d, n, &mut c), 1, n);
            let _ = kernels::matmul(&s, &v, 1, n, d, &mut c);
        }
        CostForm::Recurrent => {
            let mut state = RetentionState::new(d, d);
            let mut scratch = OpCounter::new();
            for _ in 1..n {
                state.absorb(&random(&mut rng, d), &random(&mut rng, d), 0.9, &mut scratch);
            }
            let (q, k, v) = (random(&mut rng, d), random(&mut rng, d), random(&mut rng, d));
            state.absorb(&k, &v, 0.9, &mut c);
            let _ = state.read(&q, &mut c);
        }
    }
    Ok(CostReport::new(form, n, d, c.mults, c.adds))
}

/// Per-layer stored floats for beam search with `beam` hypotheses.
pub fn memory_elements(method: MemoryMethod, beam: usize, n_decoded: usize, d: usize, heads: usize) -> Result<u64> {
    if beam == 0 || n_decoded == 0 || d == 0 || heads == 0 {
        return Err(invalid("memory_elements", "all parameters must be at least 1"));
    }
    let (b, n, d, h) = (beam as u64, n_decoded as u64, d as u64, heads as u64);
    Ok(match method {
        MemoryMethod::Recurrent => b * d * d / h,
        MemoryMethod::KvPersistent => 2 * b * n * d,
        MemoryMethod::KvPeak => 4 * b * n * d,
    })
}

/// The size-comparison table labels its KV entry `2BNd` but prints the
/// value of `4BNd`.
pub const KV_TABLE_NOTE: &str =
    "kv per-layer state: 2BNd is the persistent cache; the printed 2.88M (B=10, N=94, d=768) equals the 4BNd reindex peak, not 2BNd = 1.44M";

/// Inclusive parameter ranges for [`sweep_rows`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRanges {
    pub n: Vec<usize>,
    pub d: Vec<usize>,
    pub beam: Vec<usize>,
    pub n_decoded: Vec<usize>,
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub form: CostForm,
    pub n: usize,
    pub d: usize,
    pub beam: usize,
    pub n_decoded: usize,
    pub heads: usize,
    pub mults: u64,
    pub adds: u64,
    pub total: u64,
    pub closed_form_total: u64,
    pub persistent_elems: u64,
    pub peak_elems: u64,
    pub crossover: bool,
}

pub const SWEEP_HEADER: [&str; 13] = [
    "form",
    "n",
    "d",
    "B",
    "N",
    "H",
    "mults",
    "adds",
    "total",
    "closed_form_total",
    "persistent_elems",
    "peak_elems",
    "crossover",
];

pub fn sweep_rows(r: &SweepRanges, forms: &[CostForm]) -> Result<Vec<SweepRow>> {
    if r.n.is_empty() || r.d.is_empty() || r.beam.is_empty() || r.n_decoded.is_empty() || r.heads.is_empty() || forms.is_empty() {
        return Err(invalid("sweep_rows", "every range must be nonempty"));
    }
    let mut rows = Vec::new();
    for &n in &r.n {
        for &d in &r.d {
            for &beam in &r.beam {
                for &nd in &r.n_decoded {
                    for &heads in &r.heads {
                        for &form in forms {
                            let m = flops_instrumented(form, n, d)?;
                            let cf = flops_closed_form(form, n, d)?;
                            let (persistent, peak) = match form {
                                CostForm::Recurrent => {
                                    let e = memory_elements(MemoryMethod::Recurrent, beam, nd, d, heads)?;
                                    (e, e)
                                }
                                _ => (
                                    memory_elements(MemoryMethod::KvPersistent, beam, nd, d, heads)?,
                                    memory_elements(MemoryMethod::KvPeak, beam, nd, d, heads)?,
                                ),
                            };
                            rows.push(SweepRow {
                                form,
                                n,
                                d,
                                beam,
                                n_decoded: nd,
                                heads,
                                mults: m.mults,
                                adds: m.adds,
                                total: m.total,
                                closed_form_total: cf.total,
                                persistent_elems: persistent,
                                peak_elems: peak,
                                crossover: n > d,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

impl SweepRow {
    pub fn fields(&self) -> [String; 13] {
        [
            String::from(self.form.name()),
            format!("{}", self.n),
            format!("{}", self.d),
            format!("{}", self.beam),
            format!("{}", self.n_decoded),
            format!("{}", self.heads),
            format!("{}", self.mults),
            format!("{}", self.adds),
            format!("{}", self.total),
            format!("{}", self.closed_form_total),
            format!("{}", self.persistent_elems),
            format!("{}", self.peak_elems),
            format!("{}", self.crossover),
        ]
    }
}

/// Render rows as CSV text with a header line.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", SWEEP_HEADER.join(","));
    for r in rows {
        let _ = writeln!(s, "{}", r.fields().join(","));
    }
    s
}

/// Smallest `n` at which the published KV total exceeds the recurrent one.
pub fn kv_recurrent_crossover(d: usize) -> Result<usize> {
    let rec = flops_closed_form(CostForm::Recurrent, 1, d)?.total;
    let mut n = 1;
    while flops_closed_form(CostForm::KvCached, n, d)?.total <= rec {
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(flops_closed_form(CostForm::Vanilla, 1, 1).unwrap().total, 2);
        assert_eq!(flops_closed_form(CostForm::KvCached, 4, 8).unwrap().total, 70);
        assert_eq!(flops_closed_form(CostForm::Recurrent, 4, 8).unwrap().total, 135);
        assert_eq!(flops_closed_form(CostForm::Vanilla, 4, 8).unwrap().total, 299);
        assert!(flops_closed_form(CostForm::Vanilla, 0, 8).is_err());
    }

    #[test]
    fn memory_examples() {
        assert_eq!(memory_elements(MemoryMethod::Recurrent, 10, 94, 768, 12).unwrap(), 491_520);
        assert_eq!(memory_elements(MemoryMethod::KvPersistent, 10, 94, 768, 12).unwrap(), 1_443_840);
        assert_eq!(memory_elements(MemoryMethod::KvPeak, 10, 94, 768, 12).unwrap(), 2_887_680);
    }

    #[test]
    fn crossover_d8() {
        assert_eq!(kv_recurrent_crossover(8).unwrap(), 8);
        assert_eq!(flops_closed_form(CostForm::KvCached, 7, 8).unwrap().total, 124);
        assert_eq!(flops_closed_form(CostForm::KvCached, 8, 8).unwrap().total, 142);
    }

    #[test]
    fn instrumented_matches_scalar_form() {
        for form in CostForm::ALL {
            for n in 1..=16 {
                for d in [1, 2, 4, 8, 16] {
                    let m = flops_instrumented(form, n, d).unwrap();
                    let s = scalar_closed_form(form, n, d).unwrap();
                    assert_eq!(m, s);
                    assert_eq!(m.mults, flops_closed_form(form, n, d).unwrap().mults);
                }
            }
        }
    }
}
