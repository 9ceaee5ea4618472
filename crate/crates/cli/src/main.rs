use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use glyphdiff::backbone::FreezePlan;
use glyphdiff::bnr::BnrModel;
use glyphdiff::classifier::Classifier;
use glyphdiff::glyphdata::{build_dataset, ingest_corpus, CharId, Corpus, DatasetManifest, GlyphImage, Setting, StyleId};
use glyphdiff::metrics::MetricsReport;
use glyphdiff::nn::Checkpoint;
use glyphdiff::pipeline::{self as pl, EvalPlan, GenerateOptions, LossPoint, Pipeline, TrainConfig, Triptych};
use glyphdiff::{par, Error, Result};

#[derive(Parser)]
#[command(name = "glyphdiff", version, about = "Few-shot glyph generation with a latent diffusion model")]
struct Cli {
    /// JSON run configuration (defaults to <run>/config.json, then built-in defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution with mean-path sampling.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Skip the background noise removal stage.
    #[arg(long, global = true)]
    no_bnr: bool,
    /// Sample with posterior means only, keeping parallel execution.
    #[arg(long, global = true)]
    mean_path: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus to disk, or ingest an external one.
    RenderDataset {
        #[arg(long)]
        out: PathBuf,
        /// Existing `<style_id>/<char_id>.png` tree to normalize instead of rendering.
        #[arg(long)]
        ingest: Option<PathBuf>,
        /// Canonical (source) style of an ingested tree.
        #[arg(long, default_value_t = 0)]
        canonical_style: StyleId,
    },
    /// Train the codec, the OCR classifier and the base denoiser.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the background noise removal network against a frozen run.
    TrainBnr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Adapt a trained run to one style from its few-shot references.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        style: StyleId,
        #[arg(long, default_value = "peft")]
        plan: String,
        /// Reference chars (default: the configured few-shot set for the style).
        #[arg(long, value_delimiter = ',')]
        refs: Vec<CharId>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate glyphs in one style.
    Generate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        style: StyleId,
        /// Chars to generate (default: every char not used as a reference).
        #[arg(long, value_delimiter = ',')]
        chars: Vec<CharId>,
        #[arg(long, value_delimiter = ',')]
        refs: Vec<CharId>,
        /// BNR checkpoint (default: <run>/bnr.ckpt).
        #[arg(long)]
        bnr: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune, generate and score the evaluation settings.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "scuf,ucuf")]
        settings: Vec<String>,
        /// Every freeze plan, each with and without BNR.
        #[arg(long)]
        ablation: bool,
        #[arg(long, default_value = "peft")]
        plan: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient-magnitude ratios per parameter group across settings.
    AnalyzeGradients {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
        par::set_deterministic(true);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(cli: &Cli, run: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, run.map(|r| r.join(pl::CONFIG_FILE))) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(stored)) if stored.is_file() => TrainConfig::load(&stored)?,
        _ => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.mean_path || cli.deterministic {
        cfg.mean_path = true;
    }
    Ok(cfg)
}

fn load_corpus(data: &Path, cfg: &TrainConfig) -> Result<Corpus> {
    if !data.join(glyphdiff::glyphdata::MANIFEST_FILE).is_file() {
        return Err(Error::state(format!(
            "no dataset at {}; run render-dataset first",
            data.display()
        )));
    }
    let corpus = Corpus::load(DatasetManifest::load(data)?)?;
    if corpus.image_size() != cfg.image_size {
        return Err(Error::validation(format!(
            "dataset is {}px but the config asks for {}px",
            corpus.image_size(),
            cfg.image_size
        )));
    }
    Ok(corpus)
}

fn epoch_points(curve: &[f64]) -> Vec<LossPoint> {
    curve
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossPoint { step: i, epoch: i, loss })
        .collect()
}

fn load_classifier(run: &Path) -> Result<Classifier> {
    Classifier::from_checkpoint(&pl::load_required(run, pl::CLASSIFIER_FILE, glyphdiff::classifier::CHECKPOINT_KIND)?)
}

fn load_bnr(path: &Path) -> Result<BnrModel> {
    if !path.is_file() {
        return Err(Error::state(format!(
            "{} not found; run train-bnr first or pass --no-bnr",
            path.display()
        )));
    }
    BnrModel::from_checkpoint(&Checkpoint::load_kind(path, glyphdiff::bnr::CHECKPOINT_KIND)?)
}

fn parse_plan(s: &str) -> Result<FreezePlan> {
    s.parse()
}

fn refs_for(corpus: &Corpus, cfg: &TrainConfig, style: StyleId, explicit: &[CharId]) -> Result<Vec<GlyphImage>> {
    let chars = if explicit.is_empty() {
        pl::reference_chars(&corpus.manifest, style, cfg.n_refs, cfg.seed)?
    } else {
        explicit.to_vec()
    };
    chars.iter().map(|&c| corpus.image(style, c).cloned()).collect()
}

fn save_report(dir: &Path, stem: &str, report: &MetricsReport, cells: &[Triptych], cfg: &TrainConfig) -> Result<()> {
    report.save(&dir.join(format!("{stem}.json")))?;
    write(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    pl::save_png(
        &pl::triptych_grid(cells, cfg.evaluation.grid_columns)?,
        &dir.join(format!("{stem}.png")),
    )
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::RenderDataset {
            out,
            ingest,
            canonical_style,
        } => {
            let cfg = load_config(&cli, None)?;
            let d = cfg.dataset_params();
            let m = match ingest {
                Some(src) => ingest_corpus(src, out, d.size, *canonical_style, &d.split_ratios, d.seed)?,
                None => build_dataset(out, &d)?,
            };
            println!(
                "rendered {} chars x {} styles at {}px into {}",
                m.chars.len(),
                m.styles.len(),
                m.image_size,
                out.display()
            );
        }
        Command::Train { data, out } => {
            let cfg = load_config(&cli, None)?;
            let corpus = load_corpus(data, &cfg)?;
            mkdir(out)?;
            write(&out.join(pl::CONFIG_FILE), &(cfg.to_json()? + "\n"))?;
            let (clf, clf_curve) = pl::train_classifier_stage(&corpus, &cfg)?;
            clf.to_checkpoint()?.save(&out.join(pl::CLASSIFIER_FILE))?;
            pl::write_loss_csv(&out.join("loss_classifier.csv"), &epoch_points(&clf_curve))?;
            let trained = pl::train_base(&corpus, &cfg)?;
            trained.pipeline.save(out)?;
            pl::write_loss_csv(&out.join("loss_codec.csv"), &epoch_points(&trained.codec_curve))?;
            pl::write_loss_csv(&out.join("loss_backbone.csv"), &trained.curve)?;
            println!(
                "trained {} steps, final loss {:.6}; config hash {}",
                trained.curve.len(),
                trained.curve.last().map_or(f64::NAN, |p| p.loss),
                trained.pipeline.config_hash()?
            );
        }
        Command::TrainBnr { data, run } => {
            let cfg = load_config(&cli, Some(run))?;
            let corpus = load_corpus(data, &cfg)?;
            let p = Pipeline::load(run)?;
            let clf = if cfg.bnr.lambda2 > 0.0 {
                Some(load_classifier(run)?)
            } else {
                None
            };
            let (model, curve) = pl::train_bnr_stage(&p, &corpus, clf.as_ref(), &cfg)?;
            model.to_checkpoint()?.save(&run.join(pl::BNR_FILE))?;
            pl::write_loss_csv(&run.join("loss_bnr.csv"), &epoch_points(&curve))?;
            println!("trained BNR for {} epochs, final loss {:.6}", curve.len(), curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::Finetune {
            data,
            run,
            style,
            plan,
            refs,
            out,
        } => {
            let cfg = load_config(&cli, Some(run))?;
            let plan = parse_plan(plan)?;
            let corpus = load_corpus(data, &cfg)?;
            let p = Pipeline::load(run)?;
            let refs = refs_for(&corpus, &cfg, *style, refs)?;
            let (tuned, curve) = pl::finetune(&p, &corpus, &refs, plan, &cfg, cfg.seed ^ u64::from(*style))?;
            mkdir(out)?;
            tuned.save(out)?;
            write(&out.join(pl::CONFIG_FILE), &(cfg.to_json()? + "\n"))?;
            pl::write_loss_csv(&out.join("loss_finetune.csv"), &curve)?;
            println!("fine-tuned style {style} with plan {plan}: {} steps", curve.len());
        }
        Command::Generate {
            data,
            run,
            style,
            chars,
            refs,
            bnr,
            out,
        } => {
            let cfg = load_config(&cli, Some(run))?;
            let corpus = load_corpus(data, &cfg)?;
            let p = Pipeline::load(run)?;
            let bnr = if cli.no_bnr {
                None
            } else {
                Some(load_bnr(&bnr.clone().unwrap_or_else(|| run.join(pl::BNR_FILE)))?)
            };
            let refs = refs_for(&corpus, &cfg, *style, refs)?;
            let ref_ids: Vec<CharId> = refs.iter().map(|r| r.char_id).collect();
            let chars: Vec<CharId> = if chars.is_empty() {
                corpus.manifest.chars.iter().copied().filter(|c| !ref_ids.contains(c)).collect()
            } else {
                chars.clone()
            };
            let sources = chars.iter().map(|&c| corpus.canonical(c)).collect::<Result<Vec<_>>>()?;
            let opts = GenerateOptions {
                seed: cfg.seed,
                mean_path: cfg.mean_path,
                ..GenerateOptions::default()
            };
            let g = p.generate(&sources, &refs.iter().collect::<Vec<_>>(), bnr.as_ref(), &opts)?;
            mkdir(out)?;
            let mut cells = Vec::new();
            for (img, src) in g.output().iter().zip(&sources) {
                img.save_png(&out.join(format!("{}_{}.png", style, img.char_id)))?;
                cells.push(Triptych {
                    generated: img.clone(),
                    target: corpus.image(*style, img.char_id)?.clone(),
                    source: (*src).clone(),
                });
            }
            pl::save_png(&pl::triptych_grid(&cells, cfg.evaluation.grid_columns)?, &out.join("grid.png"))?;
            println!("generated {} glyphs into {}", cells.len(), out.display());
        }
        Command::Evaluate {
            data,
            run,
            settings,
            ablation,
            plan,
            out,
        } => {
            let cfg = load_config(&cli, Some(run))?;
            let settings = settings.iter().map(|s| s.parse()).collect::<Result<Vec<Setting>>>()?;
            let eval_plan = if *ablation {
                let mut e = EvalPlan::ablation(settings);
                if cli.no_bnr {
                    e.bnr_arms = vec![false];
                }
                e
            } else {
                EvalPlan::single(settings, parse_plan(plan)?, !cli.no_bnr)
            };
            let corpus = load_corpus(data, &cfg)?;
            let p = Pipeline::load(run)?;
            let clf = load_classifier(run)?;
            let bnr = if eval_plan.bnr_arms.contains(&true) {
                Some(load_bnr(&run.join(pl::BNR_FILE))?)
            } else {
                None
            };
            let runs = pl::run_evaluation(&p, &corpus, Some(&clf), bnr.as_ref(), &eval_plan, &cfg)?;
            mkdir(out)?;
            let mut summary = String::from("setting,label,count,mean_l1,mean_ssim,mean_grey,ocr_accuracy,fid\n");
            for r in &runs {
                save_report(out, &r.stem(), &r.report, &r.triptychs, &cfg)?;
                let a = &r.report.aggregate;
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                summary.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.setting,
                    r.report.label,
                    a.count,
                    a.mean_l1,
                    a.mean_ssim,
                    a.mean_grey,
                    opt(a.ocr_accuracy),
                    opt(a.fid)
                ));
                println!(
                    "{:5} {:10} ssim {:.4} grey {:.4} ocr {}",
                    r.setting.name(),
                    r.report.label,
                    a.mean_ssim,
                    a.mean_grey,
                    opt(a.ocr_accuracy)
                );
            }
            write(&out.join("summary.csv"), &summary)?;
        }
        Command::AnalyzeGradients { data, run, out } => {
            let cfg = load_config(&cli, Some(run))?;
            let corpus = load_corpus(data, &cfg)?;
            let p = Pipeline::load(run)?;
            let report = pl::analyze_gradients(&p, &corpus, &cfg, cfg.seed)?;
            mkdir(out)?;
            report.save(&out.join("sensitivity.json"))?;
            let mut csv = String::from("setting,group,ratio\n");
            for (s, groups) in &report.ratios {
                for (g, v) in groups {
                    csv.push_str(&format!("{s},{g},{v}\n"));
                    println!("{s:5} {g:12} {v:.4}");
                }
            }
            write(&out.join("sensitivity.csv"), &csv)?;
            pl::save_bar_chart(&report, &out.join("sensitivity.png"))?;
        }
    }
    Ok(())
}
