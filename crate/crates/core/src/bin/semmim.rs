use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semmim::checkpoint;
use semmim::data::{generate_synthetic_corpus, DatasetManifest, Split};
use semmim::eval::{eval_retrieval, mask_debug, pattern_report_split, PatternReport, RECALL_KS};
use semmim::train::{pretrain, pretrain_from, MANIFEST_FILE};
use semmim::{Result, RunConfig};

#[derive(Parser)]
#[command(name = "semmim", version, about = "Desk-scale vision-language pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic corpus and write a log and checkpoints.
    Pretrain {
        /// TOML run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load a checkpoint even if its config hash does not match.
        #[arg(long)]
        force: bool,
    },
    /// Image-text retrieval recall on a corpus split.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
        /// Corpus manifest; defaults to the one beside the checkpoint, else
        /// the corpus is regenerated from the checkpoint's seed.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Rerank each query's top K candidates with the matching head.
        #[arg(long)]
        rerank: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Patch-code layouts, clusters and purity of the momentum encoder.
    VisualizePatterns {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one split; all records by default.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Similarity, sampling probabilities and a drawn mask for one image.
    MaskDebug {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_idx: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(report) => {
            let mut out = std::io::stdout().lock();
            match out.write_all(report.as_bytes()).and_then(|_| out.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
                _ => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_manifest(ckpt: &Path, explicit: Option<&Path>, run: &RunConfig, seed: u64) -> Result<DatasetManifest> {
    if let Some(p) = explicit {
        return DatasetManifest::load(p);
    }
    let beside = ckpt.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
    if beside.exists() {
        return DatasetManifest::load(&beside);
    }
    generate_synthetic_corpus(run.train.corpus_size, run.train.heldout, run.model.image_size, seed)
}

fn run(cli: Cli) -> Result<String> {
    let mut o = String::new();
    match cli.command {
        Command::Pretrain {
            config,
            seed,
            steps,
            out,
            resume,
            force,
        } => {
            let mut run = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let (state, output) = match resume {
                Some(ckpt) => {
                    let state = checkpoint::load(&ckpt, config.as_ref().map(|_| &run), force)?;
                    let steps = steps.unwrap_or(state.run.train.steps.saturating_sub(state.step as usize));
                    let manifest = load_manifest(&ckpt, None, &state.run, state.seed)?;
                    pretrain_from(state, &manifest, steps, &out)?
                }
                None => {
                    if let Some(s) = steps {
                        run.train.steps = s;
                    }
                    let steps = run.train.steps;
                    pretrain(run, seed, steps, &out)?
                }
            };
            if let (Some(first), Some(last)) = (output.losses.first(), output.losses.last()) {
                let _ = writeln!(o, "steps run:   {}", output.losses.len());
                let _ = writeln!(o, "total loss:  {:.4} -> {:.4}", first.total, last.total);
            }
            let _ = writeln!(o, "final step:  {}", state.step);
            let _ = writeln!(o, "checkpoint:  {}", output.checkpoint.display());
            let _ = writeln!(o, "log:         {}", output.log.display());
            Ok(o)
        }
        Command::EvalRetrieval {
            ckpt,
            split,
            manifest,
            rerank,
            force,
        } => {
            let state = checkpoint::load(&ckpt, None, force)?;
            let manifest = load_manifest(&ckpt, manifest.as_deref(), &state.run, state.seed)?;
            let table = eval_retrieval(&state.model, &manifest, Split::parse(&split)?, rerank)?;
            let _ = writeln!(o, "pairs: {}", table.pairs);
            let _ = write!(o, "{:<14}", "direction");
            for k in RECALL_KS {
                let _ = write!(o, "{:>8}", format!("R@{k}"));
            }
            o.push('\n');
            for (name, r) in [("image->text", table.image_to_text), ("text->image", table.text_to_image)] {
                let _ = write!(o, "{name:<14}");
                for v in r {
                    let _ = write!(o, "{:>7.1}%", 100.0 * v);
                }
                o.push('\n');
            }
            Ok(o)
        }
        Command::VisualizePatterns {
            ckpt,
            out,
            split,
            manifest,
            force,
        } => {
            let state = checkpoint::load(&ckpt, None, force)?;
            let manifest = load_manifest(&ckpt, manifest.as_deref(), &state.run, state.seed)?;
            let split = split.as_deref().map(Split::parse).transpose()?;
            let report = pattern_report_split(&state.teacher, state.cfg(), &manifest, split)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("patterns.json"), serde_json::to_string(&report)?)?;
            std::fs::write(out.join("layouts.txt"), layouts_text(&report, &manifest))?;
            std::fs::write(out.join("clusters.txt"), clusters_text(&report))?;
            std::fs::write(out.join("layouts.ppm"), layouts_ppm(&report, 8))?;
            let _ = writeln!(o, "images:   {}", report.layouts.len());
            let _ = writeln!(o, "codes in use: {}", report.clusters.len());
            let _ = writeln!(o, "purity:   {:.4}", report.purity);
            let _ = writeln!(o, "written to {}", out.display());
            Ok(o)
        }
        Command::MaskDebug {
            ckpt,
            image_idx,
            seed,
            manifest,
            force,
        } => {
            let state = checkpoint::load(&ckpt, None, force)?;
            let manifest = load_manifest(&ckpt, manifest.as_deref(), &state.run, state.seed)?;
            let rec = mask_debug(&state.model, &manifest, image_idx, seed)?;
            let _ = writeln!(o, "{}", serde_json::to_string_pretty(&rec)?);
            Ok(o)
        }
    }
}

fn layouts_text(report: &PatternReport, manifest: &DatasetManifest) -> String {
    let mut s = String::new();
    let width = report.code_dim.saturating_sub(1).to_string().len();
    for (i, _) in report.layouts.iter().enumerate() {
        let caption = manifest.records.get(i).map_or("", |r| r.caption.as_str());
        let _ = writeln!(s, "# image {i}: {caption}");
        for (row, labels) in report.layout_grid(i).iter().zip(report.labels[i].chunks(report.grid)) {
            let codes: Vec<String> = row.iter().map(|c| format!("{c:>width$}")).collect();
            let labs: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
            let _ = writeln!(s, "{}   | {}", codes.join(" "), labs.join(" "));
        }
        s.push('\n');
    }
    s
}

fn clusters_text(report: &PatternReport) -> String {
    let mut s = String::from("code\tpatches\tlabel counts (background, circle, square, triangle)\n");
    for (code, members) in &report.clusters {
        let mut counts = [0usize; semmim::data::synth::NUM_LABELS];
        for &(img, patch) in members {
            counts[report.labels[img][patch] as usize] += 1;
        }
        let _ = writeln!(s, "{code}\t{}\t{counts:?}", members.len());
    }
    let _ = writeln!(s, "purity\t{:.6}", report.purity);
    s
}

/// Binary PPM with one `cell`-pixel square per patch, colour keyed by code,
/// images laid out in rows of eight.
fn layouts_ppm(report: &PatternReport, cell: usize) -> Vec<u8> {
    let per_row = 8;
    let g = report.grid;
    let tile = g * cell + 2;
    let n = report.layouts.len().max(1);
    let rows = n.div_ceil(per_row);
    let (w, h) = (per_row * tile, rows * tile);
    let mut px = vec![255u8; w * h * 3];
    let colour = |code: usize| -> [u8; 3] {
        let x = (code as u32).wrapping_mul(2_654_435_761);
        [(x >> 24) as u8, (x >> 16) as u8, (x >> 8) as u8]
    };
    for (i, layout) in report.layouts.iter().enumerate() {
        let (ox, oy) = ((i % per_row) * tile + 1, (i / per_row) * tile + 1);
        for (p, &code) in layout.iter().enumerate() {
            let c = colour(code);
            for dy in 0..cell {
                for dx in 0..cell {
                    let x = ox + (p % g) * cell + dx;
                    let y = oy + (p / g) * cell + dy;
                    px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    out
}
