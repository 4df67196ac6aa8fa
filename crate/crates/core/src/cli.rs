//! Command-line front end. Every verb accepts `--config <file>`,
//! repeatable `--set key=value` overrides and `--seed`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::config::ModelConfig;
use crate::data::{export_features_as, generate_synthetic_dataset, ingest_features, MultimodalSample, SyntheticCorpusSpec};
use crate::detector::LossBreakdown;
use crate::features::{read_matrix, write_matrix, MatrixFormat};
use crate::keyframe::{select_keyframes, TimeMode};
use crate::model::Model;
use crate::rng::seeded_rng;
use crate::train::{evaluate, run_intervention_experiment, FitOptions, InterventionReport, Trainer, CHECKPOINT_FILE};

#[derive(Debug, Parser)]
#[command(name = "causal-sarcasm", version, about = "Multimodal sarcasm detection with generated explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as a feature directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MatrixFormat::Csv)]
        format: MatrixFormat,
    },
    /// Train a model; writes checkpoint.json, report.json and loss_curve.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Feature directory to train on (synthetic corpus when omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.json` if it exists.
        #[arg(long)]
        resume: bool,
        /// Also render loss_curve.svg.
        #[arg(long)]
        plot: bool,
    },
    /// Evaluate a checkpoint (classification and generation metrics).
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection under normal, do(E) and do(F); --seed is the noise seed.
    Intervene {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select keyframes from a frame-embedding matrix (CSV or FEM1).
    Keyframes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        c: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = TimeMode::Broadcast)]
        time_mode: TimeMode,
        /// Write indices here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a dataset as a feature directory, optionally with fused features.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MatrixFormat::Csv)]
        format: MatrixFormat,
        /// Also write each sample's fused multimodal features under `<out>/fused/`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ModelConfig> {
        let mut cfg = ModelConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn overrides_given(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }
}

/// Synthetic corpus settings, used when no `--data` directory is given.
#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    #[arg(long, default_value_t = 64)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sarcasm_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
}

impl CorpusArgs {
    fn spec(&self, seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            num_samples: self.num_samples,
            sarcasm_rate: self.sarcasm_rate,
            noise_scale: self.noise_scale,
            seed,
            ..SyntheticCorpusSpec::default()
        }
    }
}

fn dataset(dir: Option<&Path>, corpus: &CorpusArgs, seed: u64, cfg: &ModelConfig) -> anyhow::Result<Vec<MultimodalSample>> {
    match dir {
        Some(d) => ingest_features(d, cfg).with_context(|| format!("reading {}", d.display())),
        None => Ok(generate_synthetic_dataset(&corpus.spec(seed), cfg)?.0),
    }
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn run() -> anyhow::Result<()> {
    execute(Cli::parse())
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, corpus, out, format } => {
            let cfg = common.load()?;
            let spec = corpus.spec(cfg.seed);
            let (samples, vocab) = generate_synthetic_dataset(&spec, &cfg)?;
            export_features_as(&samples, cfg.vocab_size, &out, format)?;
            vocab.save(&out.join("vocab.txt"))?;
            eprintln!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { common, corpus, data, heldout, out, resume, plot } => train(common, corpus, data, heldout, out, resume, plot)?,
        Command::Eval { common, corpus, checkpoint, data, out } => {
            let model = load_model(&checkpoint)?;
            let seed = common.seed.unwrap_or(model.config.seed);
            let set = dataset(data.as_deref(), &corpus, seed, &model.config)?;
            let report = evaluate(&model, &set)?;
            emit(&(serde_json::to_string_pretty(&report)? + "\n"), out.as_deref())?;
        }
        Command::Intervene { common, corpus, checkpoint, data, out } => {
            let model = load_model(&checkpoint)?;
            let seed = common.seed.unwrap_or(model.config.seed);
            let set = dataset(data.as_deref(), &corpus, seed, &model.config)?;
            let report = run_intervention_experiment(&model, &set, seed)?;
            eprint!("{}", intervention_table(&report));
            emit(&(serde_json::to_string_pretty(&report)? + "\n"), out.as_deref())?;
        }
        Command::Keyframes { common, input, k, c, alpha, time_mode, out } => {
            let cfg = common.load()?;
            let frames = read_matrix(&input)?;
            let mut rng = seeded_rng(cfg.seed);
            let sel = select_keyframes(&frames, k, c, alpha, time_mode, &mut rng)?;
            if sel.fallback {
                eprintln!("fewer than {k} distinct candidates; using evenly spaced frames");
            }
            let text: String = sel.frames.iter().map(|f| format!("{f}\n")).collect();
            emit(&text, out.as_deref())?;
        }
        Command::ExportFeatures { common, corpus, data, out, format, checkpoint } => {
            let model = checkpoint.as_deref().map(load_model).transpose()?;
            let cfg = match &model {
                Some(m) => m.config.clone(),
                None => common.load()?,
            };
            let seed = common.seed.unwrap_or(cfg.seed);
            let set = dataset(data.as_deref(), &corpus, seed, &cfg)?;
            export_features_as(&set, cfg.vocab_size, &out, format)?;
            if let Some(model) = &model {
                let dir = out.join("fused");
                std::fs::create_dir_all(&dir)?;
                for s in &set {
                    let m = model.fused(s)?;
                    write_matrix(&dir.join(format!("{}_M.{}", s.id, format.extension())), &m, format)?;
                }
            }
            eprintln!("exported {} samples to {}", set.len(), out.display());
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Ok(Trainer::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.model)
}

fn train(
    common: Common,
    corpus: CorpusArgs,
    data: Option<PathBuf>,
    heldout: Option<PathBuf>,
    out: PathBuf,
    resume: bool,
    plot: bool,
) -> anyhow::Result<()> {
    let cfg = common.load()?;
    let ck = out.join(CHECKPOINT_FILE);
    let mut trainer = if resume && ck.exists() {
        let mut t = Trainer::load(&ck)?;
        if common.overrides_given() {
            t.model.config.epochs = cfg.epochs;
        }
        eprintln!("resuming at epoch {}", t.epoch);
        t
    } else {
        Trainer::new(cfg)?
    };
    let cfg = trainer.config().clone();
    let train_set = dataset(data.as_deref(), &corpus, cfg.seed, &cfg)?;
    let held = match (&heldout, &data) {
        (Some(dir), _) => Some(ingest_features(dir, &cfg)?),
        (None, None) => Some(generate_synthetic_dataset(&corpus.spec(cfg.seed.wrapping_add(1)), &cfg)?.0),
        (None, Some(_)) => None,
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;

    let opts = FitOptions { checkpoint_dir: Some(out.clone()), target: None };
    let start = std::time::Instant::now();
    let already = trainer.history.epochs.len();
    trainer.fit(&train_set, held.as_deref(), &opts)?;
    for rec in &trainer.history.epochs[already..] {
        let mut line = format!("epoch {:4}  loss {:.4}", rec.epoch, rec.mean_loss.total);
        if let Some(r) = &rec.train {
            let _ = write!(line, "  train F1 {:.3} tok-acc {:.3}", r.classification.weighted_f1, r.token_accuracy);
        }
        if let Some(r) = &rec.heldout {
            let _ = write!(line, "  heldout F1 {:.3}", r.classification.weighted_f1);
        }
        eprintln!("{line}");
    }
    eprintln!("trained to epoch {} in {:.1}s", trainer.epoch, start.elapsed().as_secs_f64());

    let report = trainer.report(&train_set, held.as_deref())?;
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    std::fs::write(out.join("loss_curve.csv"), report.loss_curve_csv())?;
    if plot {
        std::fs::write(out.join("loss_curve.svg"), loss_svg(&report.loss_curve))?;
    }
    eprint!("{}", intervention_table(&report.interventions));
    println!("{}", report.run_id);
    Ok(())
}

pub fn intervention_table(r: &InterventionReport) -> String {
    let mut s = format!("{:<8} {:>8} {:>8} {:>8} {:>8}\n", "mode", "acc", "prec", "rec", "F1");
    for (name, m) in [("normal", &r.normal), ("do(E)", &r.do_e), ("do(F)", &r.do_f)] {
        let c = &m.classification;
        let _ = writeln!(
            s,
            "{name:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            c.accuracy, c.weighted_precision, c.weighted_recall, c.weighted_f1
        );
    }
    s
}

/// Line chart of the total and per-term step losses.
pub fn loss_svg(curve: &[LossBreakdown]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n");
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if curve.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    type Series = (&'static str, &'static str, fn(&LossBreakdown) -> f64);
    let series: [Series; 4] = [
        ("total", "#000000", |l| l.total),
        ("reconstruction", "#1f77b4", |l| l.reconstruction),
        ("kl", "#ff7f0e", |l| l.kl),
        ("exp", "#2ca02c", |l| l.exp),
    ];
    let ymax = curve.iter().map(|l| l.total.max(l.reconstruction).max(l.kl).max(l.exp)).fold(0.0, f64::max).max(1e-12);
    let n = (curve.len() - 1).max(1) as f64;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v / ymax).clamp(0.0, 1.0);
    let _ = writeln!(
        svg,
        "<path d=\"M{PAD},{PAD} V{} H{}\" stroke=\"#888\" fill=\"none\"/>",
        H - PAD,
        W - PAD
    );
    let _ = writeln!(svg, "<text x=\"{PAD}\" y=\"{}\" font-size=\"12\">{ymax:.3}</text>", PAD - 6.0);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-size=\"12\">step {}</text>", W - PAD - 60.0, H - PAD + 16.0, curve.len() - 1);
    for (row, (name, c, get)) in series.iter().enumerate() {
        let pts: Vec<String> = curve.iter().enumerate().map(|(i, l)| format!("{:.1},{:.1}", x(i), y(get(l)))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"{}\"/>", c, pts.join(" "));
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\">{name}</text>",
            W - PAD - 110.0,
            PAD + 14.0 * (row as f64 + 1.0),
            c
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_verb_takes_config_and_seed() {
        for verb in ["gen-data", "train", "eval", "intervene", "keyframes", "export-features"] {
            let cmd = Cli::command();
            let sub = cmd.find_subcommand(verb).unwrap_or_else(|| panic!("missing {verb}"));
            for flag in ["config", "seed", "set"] {
                assert!(sub.get_arguments().any(|a| a.get_long() == Some(flag)), "{verb} lacks --{flag}");
            }
        }
    }

    #[test]
    fn keyframe_defaults() {
        let cli = Cli::try_parse_from(["x", "keyframes", "--input", "f.csv"]).unwrap();
        match cli.command {
            Command::Keyframes { k, c, alpha, time_mode, .. } => {
                assert_eq!((k, c, alpha, time_mode), (100, 500, 0.1, TimeMode::Broadcast));
            }
            other => panic!("parsed {other:?}"),
        }
        assert!(Cli::try_parse_from(["x", "keyframes", "--input", "f", "--time-mode", "append"]).is_ok());
        assert!(Cli::try_parse_from(["x", "keyframes", "--input", "f", "--time-mode", "sideways"]).is_err());
    }

    #[test]
    fn svg_has_one_line_per_series() {
        let curve = vec![LossBreakdown::new(1.0, 0.5, 2.0), LossBreakdown::new(0.5, 0.2, 1.0)];
        let svg = loss_svg(&curve);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(loss_svg(&[]).ends_with("</svg>\n"));
    }
}
