use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use retline::config::RunConfig;
use retline::{checkpoint, checks, dataset, pgm, report, train};
use retline_core::cost::{self, CostForm, MemoryMethod, SweepRanges};
use retline_core::data::{render_sample, Vocab};
use retline_core::decode::{default_backend, transcript, Backend, Decoder};
use retline_core::metrics::cer;
use retline_core::model::{teacher_forcing, Model};

#[derive(Parser)]
#[command(name = "retline", version, about = "Retention-based line recognizer: verification, benchmarks, training and decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Directory for all outputs.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Master seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML run configuration (also read from RETLINE_CONFIG).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite and write verify.txt.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Also train the two toy models (slow).
        #[arg(long)]
        toy: bool,
    },
    /// Per-step operation counts for the three decoding forms.
    BenchFlops {
        #[command(flatten)]
        common: Common,
        /// vanilla, kv-cached, recurrent or all.
        #[arg(long, default_value = "all")]
        form: String,
        /// Model widths: `768`, `8,16` or `8..64`.
        #[arg(long, default_value = "768")]
        d: String,
        /// Sequence positions, same syntax as --d.
        #[arg(long, default_value = "1..128")]
        n: String,
        #[arg(long, default_value = "10")]
        beam: String,
        /// Decoded tokens kept by the KV cache.
        #[arg(long, default_value = "94")]
        decoded: String,
        #[arg(long, default_value = "12")]
        heads: String,
    },
    /// Per-layer decoding state sizes.
    BenchMemory {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "10")]
        beam: String,
        #[arg(long, default_value = "94")]
        decoded: String,
        #[arg(long, default_value = "768")]
        d: String,
        #[arg(long, default_value = "12")]
        heads: String,
    },
    /// Render a synthetic dataset with its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Split name; `train` and `val` use disjoint random streams.
        #[arg(long, default_value = "train")]
        split: String,
        /// Number of lines; defaults to the config's count for the split.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Decode a manifest with a checkpoint.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Checkpoint base path (without extension).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to decode.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// recurrent or kv.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Write score and decay heatmaps for one line.
    DumpMaps {
        #[command(flatten)]
        common: Common,
        /// Checkpoint base path; a freshly initialized model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grayscale PGM line image; rendered from --text when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Transcript used for teacher forcing.
        #[arg(long)]
        text: String,
    },
    /// Summarize the CSVs in --out-dir.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Parse `7`, `1,2,8`, `1..4` or `1..=4`; ranges are inclusive.
fn parse_list(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let b = b.strip_prefix('=').unwrap_or(b);
            let (a, b): (usize, usize) = (
                a.parse().with_context(|| format!("bad range start in {part:?}"))?,
                b.parse().with_context(|| format!("bad range end in {part:?}"))?,
            );
            ensure!(a <= b, "empty range {part:?}");
            out.extend(a..=b);
        } else {
            out.push(part.parse().with_context(|| format!("bad number {part:?}"))?);
        }
    }
    Ok(out)
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
    cfg.write_echo(&common.out_dir)?;
    Ok(cfg)
}

fn parse_backend(s: &str) -> Result<Backend> {
    s.parse().map_err(|e| anyhow::anyhow!("{e}"))
}

fn verify(common: &Common, toy: bool) -> Result<bool> {
    let cfg = resolve(common)?;
    let mut outcomes = checks::suite(cfg.seed)?;
    if toy {
        let (o, _, _) = checks::toy_learning(cfg.seed, |l| eprintln!("{l}"))?;
        outcomes.extend(o);
    }
    for o in &outcomes {
        if let Some(t) = &o.timing {
            eprintln!("{} took {t}", o.id);
        }
    }
    let text = report::verify_text(&outcomes);
    fs::write(common.out_dir.join(report::VERIFY_TXT), &text)?;
    print!("{text}");
    Ok(outcomes.iter().all(|o| o.pass))
}

fn bench_flops(common: &Common, form: &str, d: &str, n: &str, beam: &str, decoded: &str, heads: &str) -> Result<()> {
    resolve(common)?;
    let forms: Vec<CostForm> = if form == "all" {
        CostForm::ALL.to_vec()
    } else {
        vec![form.parse().map_err(|e| anyhow::anyhow!("{e}"))?]
    };
    let ranges = SweepRanges {
        n: parse_list(n)?,
        d: parse_list(d)?,
        beam: parse_list(beam)?,
        n_decoded: parse_list(decoded)?,
        heads: parse_list(heads)?,
    };
    let csv = cost::sweep_csv(&cost::sweep_rows(&ranges, &forms)?);
    fs::write(common.out_dir.join(report::FLOPS_CSV), &csv)?;
    print!("{csv}");
    Ok(())
}

fn bench_memory(common: &Common, beam: &str, decoded: &str, d: &str, heads: &str) -> Result<()> {
    resolve(common)?;
    let mut text = String::from("method,B,N,d,H,elements\n");
    for &b in &parse_list(beam)? {
        for &n in &parse_list(decoded)? {
            for &dd in &parse_list(d)? {
                for &h in &parse_list(heads)? {
                    for m in [MemoryMethod::Recurrent, MemoryMethod::KvPersistent, MemoryMethod::KvPeak] {
                        let e = cost::memory_elements(m, b, n, dd, h)?;
                        text.push_str(&format!("{},{b},{n},{dd},{h},{e}\n", m.name()));
                    }
                }
            }
        }
    }
    fs::write(common.out_dir.join(report::MEMORY_CSV), &text)?;
    print!("{text}");
    println!("note: {}", cost::KV_TABLE_NOTE);
    Ok(())
}

fn gen_data(common: &Common, split: &str, count: Option<usize>) -> Result<()> {
    let cfg = resolve(common)?;
    let dc = &cfg.data;
    let count = count.unwrap_or(if split == "val" { dc.val_lines } else { dc.train_lines });
    let (data, sidecar) = dataset::generate(&dc.alphabet, count, dc.min_len, dc.max_len, cfg.seed, split)?;
    let path = dataset::write(&common.out_dir, split, &data, &sidecar)?;
    println!("wrote {count} lines to {}", path.display());
    Ok(())
}

fn datasets(cfg: &RunConfig, out: &Path) -> Result<(dataset::Dataset, dataset::Dataset)> {
    let dc = &cfg.data;
    let load_or_generate = |manifest: &Option<PathBuf>, split: &str, count: usize| -> Result<dataset::Dataset> {
        match manifest {
            Some(p) => dataset::load(p),
            None => {
                let (data, sidecar) = dataset::generate(&dc.alphabet, count, dc.min_len, dc.max_len, cfg.seed, split)?;
                dataset::write(&out.join("data"), split, &data, &sidecar)?;
                Ok(data)
            }
        }
    };
    let tr = load_or_generate(&dc.train_manifest, "train", dc.train_lines)?;
    let va = load_or_generate(&dc.val_manifest, "val", dc.val_lines)?;
    Ok((tr, va))
}

fn run_train(common: &Common) -> Result<()> {
    let mut cfg = resolve(common)?;
    let (tr, va) = datasets(&cfg, &common.out_dir)?;
    let vocab = tr.vocab.clone();
    for s in &va.samples {
        vocab
            .contains_all(&s.transcript)
            .with_context(|| format!("validation line {} has characters outside the training vocabulary", s.id))?;
    }
    cfg.model.vocab_size = vocab.len();
    cfg.write_echo(&common.out_dir)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let metrics_path = common.out_dir.join(report::METRICS_CSV);
    let mut rows = Vec::new();
    let outcome = train::train(&mut model, &vocab, &tr.samples, &va.samples, &cfg.train, cfg.seed, |m| {
        eprintln!(
            "epoch {:>3} step {:>6} lr {:.2e} loss {:.4} val_cer {:.4} val_wer {:.4}",
            m.epoch, m.step, m.lr, m.loss, m.val_cer, m.val_wer
        );
        rows.push(m.clone());
        report::write_metrics(&metrics_path, &rows)
    })?;
    checkpoint::save(&model, Some(&vocab), &common.out_dir.join("model"))?;
    eprintln!("stopped: {:?} after {:.1} CPU-s", outcome.stop, outcome.cpu_seconds);
    Ok(())
}

fn decode(
    common: &Common,
    ckpt: &Path,
    manifest: &Path,
    beam: Option<usize>,
    backend: Option<&str>,
    max_len: Option<usize>,
) -> Result<()> {
    let cfg = resolve(common)?;
    let (model, vocab) = checkpoint::load(ckpt)?;
    let vocab = match vocab {
        Some(v) => v,
        None => dataset::load(manifest)?.vocab,
    };
    let samples = dataset::load_manifest(manifest, &vocab)?;
    let beam = beam.unwrap_or(cfg.decode.beam);
    let backend = match backend {
        Some(b) => parse_backend(b)?,
        None => cfg.decode.backend.unwrap_or_else(|| default_backend(&model)),
    };
    let max_len = max_len.or(cfg.decode.max_len).unwrap_or(model.config().max_text_len);
    let mut lines = csv::Writer::from_path(common.out_dir.join(report::DECODE_CSV))?;
    lines.write_record(["id", "reference", "hypothesis", "score", "cer"])?;
    let mut stats = Vec::new();
    for s in &samples {
        let out = Decoder::new(&model, &s.image)?.beam_search(beam, max_len, backend)?;
        let hyp = transcript(&out.best, &vocab);
        let c = cer(&hyp, &s.transcript)?;
        println!("{}\t{hyp}", s.id);
        lines.write_record([s.id.clone(), s.transcript.clone(), hyp, format!("{:.9}", out.best.score), format!("{c:.6}")])?;
        if stats.is_empty() {
            stats = out.stats;
        }
    }
    lines.flush()?;
    report::write_step_stats(&common.out_dir.join(report::DECODE_STATS_CSV), &stats)?;
    Ok(())
}

fn dump_maps(common: &Common, ckpt: Option<&Path>, image: Option<&Path>, text: &str) -> Result<()> {
    let cfg = resolve(common)?;
    let (model, vocab) = match ckpt {
        Some(p) => {
            let (m, v) = checkpoint::load(p)?;
            let v = match v {
                Some(v) => v,
                None => Vocab::from_corpus([text])?,
            };
            (m, v)
        }
        None => {
            let v = Vocab::new(cfg.data.alphabet.chars())?;
            let mut mc = cfg.model.clone();
            mc.vocab_size = v.len();
            (Model::new(mc, cfg.seed)?, v)
        }
    };
    let img = match image {
        Some(p) => pgm::read_image(p)?,
        None => render_sample("line", text, &vocab, cfg.seed)?.image,
    };
    let full = vocab.tokenize(text, model.config().max_text_len)?;
    let (inputs, _) = teacher_forcing(&full)?;
    let maps = model.dump_maps(&img, &inputs)?;
    let dir = common.out_dir.join("maps");
    fs::create_dir_all(&dir)?;
    let mut summary = csv::Writer::from_path(common.out_dir.join("maps.csv"))?;
    summary.write_record(["layer", "head", "kind", "rows", "cols", "sub_diagonal_fraction"])?;
    for lm in &maps {
        for (kind, list) in [("scores", &lm.scores), ("decay", &lm.decays)] {
            for (h, m) in list.iter().enumerate() {
                let name = format!("layer{}_head{h}_{kind}", lm.layer);
                pgm::write_heatmap(&dir.join(format!("{name}.pgm")), m)?;
                let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
                for r in 0..m.rows {
                    w.write_record((0..m.cols).map(|c| format!("{:.9e}", m.at(r, c))))?;
                }
                w.flush()?;
                summary.write_record([
                    lm.layer.to_string(),
                    h.to_string(),
                    kind.to_string(),
                    m.rows.to_string(),
                    m.cols.to_string(),
                    format!("{:.6}", retline_core::model::sub_diagonal_fraction(m)),
                ])?;
            }
        }
    }
    summary.flush()?;
    println!("wrote {} layers of maps to {}", maps.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { common, toy } => return verify(&common, toy),
        Command::BenchFlops { common, form, d, n, beam, decoded, heads } => {
            bench_flops(&common, &form, &d, &n, &beam, &decoded, &heads)?
        }
        Command::BenchMemory { common, beam, decoded, d, heads } => bench_memory(&common, &beam, &decoded, &d, &heads)?,
        Command::GenData { common, split, count } => gen_data(&common, &split, count)?,
        Command::Train { common } => run_train(&common)?,
        Command::Decode { common, checkpoint, manifest, beam, backend, max_len } => {
            decode(&common, &checkpoint, &manifest, beam, backend.as_deref(), max_len)?
        }
        Command::DumpMaps { common, checkpoint, image, text } => {
            dump_maps(&common, checkpoint.as_deref(), image.as_deref(), &text)?
        }
        Command::Report { common } => {
            if !common.out_dir.is_dir() {
                bail!("{} is not a directory", common.out_dir.display());
            }
            print!("{}", report::summarize(&common.out_dir)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
