//! `gsd`: data generation, noise simulation, label refinement, training and
//! evaluation from the command line.
//!
//! Machine-readable results go to files or stdout; progress goes to stderr.
//! Usage errors exit with 2, runtime failures with 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gsd_core::data_io::{
    add_noise_to_manifest, gen_shapes, read_image, read_labels, read_probs, write_image, write_labels,
    write_segments, write_weights, DatasetManifest,
};
use gsd_core::eval::{final_report_last, read_metrics, write_metrics};
use gsd_core::geometry::gda_weights_for;
use gsd_core::gradcheck::{grad_check, GradCheckConfig};
use gsd_core::losses::{select_clean, sup_loss, sym_kl_pixelwise};
use gsd_core::refine::sglr;
use gsd_core::superpixel::{boundary_overlay, slic};
use gsd_core::trainer::{load_checkpoint, save_checkpoint};
use gsd_core::{
    Connectivity, GdaConfig, NoiseKind, NoiseSpec, Pooling, RefineConfig, SeededRng, ShapesSpec, SlicConfig,
    SuperpixelGrid, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "gsd", version, about = "Noise-robust segmentation training on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset and its manifest.
    GenData {
        /// `key = value` spec file; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replace the training labels of a manifest with simulated noisy ones.
    AddNoise {
        #[arg(long)]
        manifest: PathBuf,
        /// S_R, S_E or S_DE.
        #[arg(long)]
        kind: NoiseKind,
        #[arg(long)]
        strength: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distance-aware weight map of a label file, as a GSDT grid.
    Weights {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long = "T")]
        cap: f64,
        #[arg(long)]
        epoch: usize,
        #[arg(long = "E")]
        max_epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "4")]
        connectivity: Connectivity,
    },
    /// Refine a noisy label from two probability maps.
    Refine {
        #[arg(long)]
        p1: PathBuf,
        #[arg(long)]
        p2: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        /// Fraction of pixels treated as noisy; the rest form the clean set.
        #[arg(long)]
        tau_rate: f64,
        #[arg(long)]
        out: PathBuf,
        /// Image to run SLIC on; required for superpixel pooling.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value = "superpixel")]
        pooling: Pooling,
        /// Superpixel count; defaults to one per 64 pixels.
        #[arg(long)]
        segments: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the superpixel ids as a GSDT grid.
        #[arg(long)]
        segments_out: Option<PathBuf>,
        /// Write a PGM preview with superpixel boundaries.
        #[arg(long)]
        overlay_out: Option<PathBuf>,
    },
    /// Train from a `key = value` config (must name a `manifest`).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from `out_dir/checkpoint.gsdc` if present.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are done (the run can be resumed).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Print mean ± std of test Dice over the last epochs of a metrics CSV.
    Eval {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value_t = 10)]
        last: usize,
        /// Append a summary row to this CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Finite-difference check of every loss term's gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

const MEDIAN_TOL: f64 = 1e-4;
const MAX_TOL: f64 = 1e-3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out, seed } => {
            let mut s = match spec {
                Some(p) => ShapesSpec::parse(&read_text(&p)?)?,
                None => ShapesSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let manifest = gen_shapes(&s, &out)?;
            std::fs::write(out.join("spec.txt"), s.to_text()).context("writing spec.txt")?;
            eprintln!(
                "wrote {} samples to {}",
                manifest.entries.len(),
                out.join("manifest.tsv").display()
            );
        }
        Command::AddNoise {
            manifest,
            kind,
            strength,
            seed,
        } => {
            let reports = add_noise_to_manifest(&manifest, &NoiseSpec::new(kind, strength, seed))?;
            let n = reports.len().max(1) as f64;
            let mean = reports.iter().map(|r| r.realized_rate).sum::<f64>() / n;
            let infeasible = reports.iter().filter(|r| r.infeasible).count();
            eprintln!("{} on {} labels: mean realised rate {mean:.4}", kind.as_str(), reports.len());
            if infeasible > 0 {
                eprintln!("warning: target rate not reachable on {infeasible} labels");
            }
        }
        Command::Weights {
            labels,
            cap,
            epoch,
            max_epochs,
            out,
            connectivity,
        } => {
            let y = read_labels(&labels, 2)?;
            let mut cfg = GdaConfig::new(cap, max_epochs)?;
            cfg.connectivity = connectivity;
            write_weights(&out, &gda_weights_for(&y, epoch, &cfg)?)?;
        }
        Command::Refine {
            p1,
            p2,
            noisy,
            tau_rate,
            out,
            image,
            pooling,
            segments,
            seed,
            segments_out,
            overlay_out,
        } => {
            if !(0.0..1.0).contains(&tau_rate) {
                bail!("--tau-rate must be in [0, 1)");
            }
            let (p1, p2) = (read_probs(&p1)?, read_probs(&p2)?);
            let y = read_labels(&noisy, p1.num_classes())?;
            let (h, w) = (y.height(), y.width());
            let regions = match (&image, pooling) {
                (Some(path), _) => {
                    let x = read_image(path)?;
                    let mut cfg = SlicConfig::for_size(h, w);
                    if let Some(n) = segments {
                        cfg.n_segments = n;
                    }
                    let r = slic(&x, &cfg)?;
                    if let Some(p) = &overlay_out {
                        write_image(p, &boundary_overlay(&x, &r)?)?;
                    }
                    r
                }
                (None, Pooling::PerPixel) => SuperpixelGrid::new(h, w, vec![0; h * w])?,
                (None, Pooling::SuperpixelMean) => bail!("superpixel pooling needs --image"),
            };
            if let Some(p) = &segments_out {
                write_segments(p, &regions)?;
            }
            let loss = sup_loss(&p1, &p2, &y)?.add_scaled(&sym_kl_pixelwise(&p1, &p2)?, 1.0)?;
            let clean = select_clean(&loss, 1.0 - tau_rate)?;
            let refined = sglr(&p1, &p2, &regions, &y, &clean, &RefineConfig { pooling }, &mut SeededRng::new(seed))?;
            write_labels(&out, &refined)?;
            let changed = refined.data().iter().zip(y.data()).filter(|(a, b)| a != b).count();
            eprintln!("{changed} of {} pixels relabelled", y.len());
        }
        Command::Train {
            config,
            out_dir,
            resume,
            stop_after,
        } => train(&config, &out_dir, resume, stop_after)?,
        Command::Eval { metrics, last, summary } => {
            let rows = read_metrics(&metrics)?;
            let r = final_report_last(&rows, last)?;
            if r.short_history {
                eprintln!("warning: only {} epochs available, fewer than {last}", r.epochs_used);
            }
            println!("{r}");
            if let Some(path) = summary {
                append_summary(&path, &metrics, &rows, &r)?;
            }
        }
        Command::GradCheck { seed, seeds } => {
            let cfg = GradCheckConfig::default();
            let mut ok = true;
            let mut worst: f64 = 0.0;
            for s in seed..seed + seeds.max(1) {
                let r = grad_check(s, &cfg)?;
                for t in &r.terms {
                    println!(
                        "seed {s} {:<8} median {:.3e} max {:.3e} params {} kink-rechecked {} max {:.3e}",
                        t.term.name(),
                        t.median,
                        t.max,
                        t.params,
                        t.crossed,
                        t.crossed_max
                    );
                }
                if r.unresolved > 0 {
                    println!("seed {s} unresolved kinks: {}", r.unresolved);
                }
                ok &= r.passes(MEDIAN_TOL, MAX_TOL);
                worst = worst.max(r.max_error()).max(r.max_crossed_error());
            }
            println!("max relative error: {worst:.3e}");
            if !ok {
                bail!("gradient check failed (median < {MEDIAN_TOL:e}, max < {MAX_TOL:e})");
            }
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

const CHECKPOINT: &str = "checkpoint.gsdc";

fn train(config: &Path, out_dir: &Path, resume: bool, stop_after: Option<usize>) -> Result<()> {
    let (cfg, extra) = TrainConfig::parse(&read_text(config)?, &["manifest", "checkpoint_every"])?;
    let mut manifest_path = None;
    let mut every = 1usize;
    for (k, v) in extra {
        match k.as_str() {
            "manifest" => manifest_path = Some(config.parent().unwrap_or(Path::new(".")).join(v)),
            _ => every = v.parse().context("checkpoint_every must be a positive integer")?,
        }
    }
    let manifest_path = manifest_path.context("config must set `manifest = <path>`")?;
    let manifest = DatasetManifest::read(&manifest_path)?;
    manifest.validate()?;
    let data = manifest.load(cfg.model.num_classes)?;

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let resolved = format!("{}manifest = {}\n", cfg.to_text(), manifest_path.display());
    std::fs::write(out_dir.join("config.txt"), resolved).context("writing config.txt")?;

    let trainer = Trainer::new(cfg.clone(), &data)?;
    let ckpt = out_dir.join(CHECKPOINT);
    let mut state = if resume && ckpt.exists() {
        let s = load_checkpoint(&ckpt)?;
        if s.nets.len() != trainer.init_state()?.nets.len() {
            bail!("checkpoint does not match mode {}", cfg.mode);
        }
        eprintln!("resuming at epoch {}", s.epoch);
        s
    } else {
        trainer.init_state()?
    };
    eprintln!(
        "{}: {} train / {} test images, tau {:.4}",
        cfg.mode,
        data.train.len(),
        data.test.len(),
        trainer.tau()
    );
    let metrics = out_dir.join("metrics.csv");
    let until = stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    trainer.run_until(&mut state, until, |s, out| {
        let r = &out.row;
        eprintln!(
            "epoch {:>3} total {:.4} (gda {:.4} kt {:.4} cor {:.4}) clean {:.3} dice {:.2}",
            r.epoch, r.l_total, r.l_gda, r.l_kt, r.l_cor, r.clean_fraction, r.test_dice
        );
        write_metrics(&metrics, &s.history)?;
        if s.epoch % every.max(1) == 0 || s.epoch == until {
            save_checkpoint(&ckpt, s)?;
        }
        Ok(())
    })?;
    write_metrics(&metrics, &state.history)?;
    for (k, net) in state.nets.iter().enumerate() {
        net.save(&out_dir.join(format!("model_{}.gsdm", k + 1)))?;
    }
    if !state.history.is_empty() {
        eprintln!("final: {}", gsd_core::eval::final_report(&state.history)?);
    }
    Ok(())
}

fn append_summary(
    path: &Path,
    metrics: &Path,
    rows: &[gsd_core::MetricRow],
    r: &gsd_core::FinalReport,
) -> Result<()> {
    use std::io::Write;
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if new {
        writeln!(f, "metrics,mode,seed,epochs_used,mean,std")?;
    }
    let last = rows.last().expect("non-empty");
    writeln!(
        f,
        "{},{},{},{},{:.6},{:.6}",
        metrics.display(),
        last.mode,
        last.seed,
        r.epochs_used,
        r.mean,
        r.std
    )?;
    Ok(())
}
