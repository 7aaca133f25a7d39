use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dajat::attacks::{write_sweep_csv, AttackSpec, SweepRow, TargetMode};
use dajat::data::{augmentation_distances, ImageBatch};
use dajat::eval::{attack_accuracy, evaluate, loss_surface_grid, masking_sanity_checks, EvalSuite, SanityOptions};
use dajat::nn::bn_cosine_similarity;
use dajat::plot::{plot_bn_similarity, plot_metrics, plot_surface, plot_sweep};
use dajat::training::{load_dataset, load_policy, read_metrics, train, TrainOptions, TrainState};
use dajat::{Config, Model};
use serde_json::json;

use crate::output::Staged;
use crate::{Command, Common, ModelArgs};

pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Runtime(e) => format!("{e:#}"),
        }
    }
}

impl From<dajat::Error> for CliError {
    fn from(e: dajat::Error) -> Self {
        match e {
            dajat::Error::Config(_) | dajat::Error::Argument(_) | dajat::Error::AttackSpec(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// File config (or `base`, or defaults), then overrides, then validation.
fn resolve_config(config: Option<&Path>, base: Option<&Config>, overrides: &[String]) -> Result<Config> {
    let cfg = match (config, base) {
        (Some(p), _) => Config::load(p, overrides)?,
        (None, Some(b)) => Config::from_toml_with_overrides(&b.to_toml()?, overrides)?,
        (None, None) => Config::from_toml_with_overrides(&Config::default().to_toml()?, overrides)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pick(state: TrainState, weights: &str) -> Result<Model> {
    match weights {
        "model" | "live" => Ok(state.model),
        "ema" => Ok(state.ema.shadow),
        "best" => Ok(state.best_model),
        other => Err(usage(format!("--weights must be model, ema or best, not {other:?}"))),
    }
}

struct Loaded {
    cfg: Config,
    model: Model,
    test: ImageBatch,
}

fn load_for_eval(common: &Common, m: &ModelArgs) -> Result<Loaded> {
    let state = TrainState::load(&m.checkpoint)?;
    let cfg = resolve_config(common.config.as_deref(), Some(&state.config), &common.overrides)?;
    let model = pick(state, &m.weights)?;
    let data = load_dataset(&cfg)?;
    let test = m.samples.map_or(data.test.clone(), |n| data.test.head(n));
    Ok(Loaded { cfg, model, test })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing report")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            common,
            method,
            epochs,
            views,
            seed,
            bn_variant,
            resume,
        } => {
            let mut overrides = Vec::new();
            if let Some(m) = method {
                overrides.push(format!("train.method=\"{m}\""));
            }
            if let Some(e) = epochs {
                overrides.push(format!("train.epochs={e}"));
            }
            if let Some(v) = views {
                overrides.push(format!("train.views={v}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("train.seed={s}"));
            }
            if let Some(b) = bn_variant {
                overrides.push(format!("train.bn_variant=\"{b}\""));
            }
            overrides.extend(common.overrides.iter().cloned());
            run_train(&common, &overrides, resume.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            samples,
            reference,
            pgd_steps,
            restarts,
        } => {
            let state = TrainState::load(&checkpoint)?;
            let cfg = resolve_config(common.config.as_deref(), Some(&state.config), &common.overrides)?;
            let reference = match &reference {
                Some(p) => Some(TrainState::load(p)?.ema.shadow),
                None => None,
            };
            let data = load_dataset(&cfg)?;
            let test = samples.map_or(data.test.clone(), |n| data.test.head(n));
            let suite = EvalSuite {
                epsilon: cfg.threat.epsilon_max,
                pgd_steps,
                restarts,
                black_box: reference.is_some(),
                batch_size: cfg.eval.batch_size,
                seed: cfg.eval.seed,
                ..EvalSuite::default()
            };
            let live = evaluate(&state.model, &test, &suite, reference.as_ref())?;
            let avg = evaluate(&state.ema.shadow, &test, &suite, reference.as_ref())?;
            let staged = Staged::new(&common.out)?;
            let reports = staged.sub("reports")?;
            write_json(&reports.join("eval.json"), &json!({ "checkpoint": checkpoint, "live": live, "averaged": avg }))?;
            let text = format!("live weights\n{}\naveraged weights (-WA)\n{}", live.render(), avg.render());
            fs::write(reports.join("eval.txt"), &text).context("writing eval table")?;
            print!("{text}");
            staged.finish()?;
            Ok(())
        }
        Command::Sweep {
            common,
            model,
            eps,
            steps,
            restarts,
            mode,
        } => {
            let mode = match mode.as_str() {
                "untargeted" => TargetMode::Untargeted,
                "least_likely" => TargetMode::LeastLikely,
                "random_class" => TargetMode::RandomClass,
                other => return Err(usage(format!("unknown attack mode {other:?}"))),
            };
            let l = load_for_eval(&common, &model)?;
            let mut rows = Vec::new();
            for &e in &eps {
                for &s in &steps {
                    let spec = AttackSpec::pgd(e / 255.0, s)
                        .with_restarts(restarts)
                        .with_target(mode)
                        .with_seed(l.cfg.eval.seed);
                    let (accuracy, mean_loss) = attack_accuracy(&l.model, &l.test, &spec, l.cfg.eval.batch_size)?;
                    rows.push(SweepRow {
                        epsilon: e / 255.0,
                        steps: s,
                        restarts,
                        mode: mode.name().into(),
                        accuracy,
                        mean_loss,
                    });
                    println!("eps {e:>6.2}/255  steps {s:>4}  acc {accuracy:6.2}%  loss {mean_loss:.4}");
                }
            }
            let staged = Staged::new(&common.out)?;
            write_sweep_csv(&rows, &staged.sub("reports")?.join("sweep.csv"))?;
            plot_sweep(&rows, &staged.sub("plots")?.join("sweep.svg"))?;
            staged.finish()?;
            Ok(())
        }
        Command::AnalyzeBn {
            common,
            checkpoint,
            weights,
        } => {
            let model = pick(TrainState::load(&checkpoint)?, &weights)?;
            let rows = bn_cosine_similarity(&model)?;
            let staged = Staged::new(&common.out)?;
            let csv_path = staged.sub("reports")?.join("bn_similarity.csv");
            let mut w = csv::Writer::from_path(&csv_path).context("opening bn_similarity.csv")?;
            for r in &rows {
                w.serialize(r).context("writing bn_similarity.csv")?;
                println!("{:<24} mean {:.4} var {:.4} scale {:.4} shift {:.4}", r.layer, r.mean, r.var, r.scale, r.shift);
            }
            w.flush().context("writing bn_similarity.csv")?;
            plot_bn_similarity(&rows, &staged.sub("plots")?.join("bn_similarity.svg"))?;
            staged.finish()?;
            Ok(())
        }
        Command::AnalyzeAug { common, samples } => {
            let cfg = resolve_config(common.config.as_deref(), None, &common.overrides)?;
            let data = load_dataset(&cfg)?;
            let policy = load_policy(&cfg)?;
            let rows = augmentation_distances(&data.train.head(samples), &policy, cfg.train.pad, cfg.data.seed)?;
            let staged = Staged::new(&common.out)?;
            let csv_path = staged.sub("reports")?.join("aug_distance.csv");
            let mut w = csv::Writer::from_path(&csv_path).context("opening aug_distance.csv")?;
            println!("{:<10} {:<14} {:>12} {:>12} {:>6}", "pair", "metric", "mean", "std", "n");
            for r in &rows {
                w.serialize(r).context("writing aug_distance.csv")?;
                println!("{:<10} {:<14} {:>12.4} {:>12.4} {:>6}", r.pair, r.metric, r.mean, r.std, r.samples);
            }
            w.flush().context("writing aug_distance.csv")?;
            staged.finish()?;
            Ok(())
        }
        Command::LossSurface {
            common,
            model,
            index,
            radius,
            resolution,
        } => {
            let l = load_for_eval(&common, &model)?;
            if index >= l.test.len() {
                return Err(usage(format!("--index {index} outside the {} test samples", l.test.len())));
            }
            let grid = loss_surface_grid(&l.model, &l.test.image(index), l.test.labels[index], radius / 255.0, resolution, l.cfg.eval.seed)?;
            let staged = Staged::new(&common.out)?;
            let reports = staged.sub("reports")?;
            let mut w = csv::Writer::from_path(reports.join("loss_surface.csv")).context("opening loss_surface.csv")?;
            w.write_record(["gradient_offset", "random_offset", "loss"]).context("writing loss_surface.csv")?;
            for (i, a) in grid.offsets.iter().enumerate() {
                for (j, b) in grid.offsets.iter().enumerate() {
                    w.write_record([a.to_string(), b.to_string(), grid.values[i][j].to_string()])
                        .context("writing loss_surface.csv")?;
                }
            }
            w.flush().context("writing loss_surface.csv")?;
            write_json(
                &reports.join("loss_surface.json"),
                &json!({ "index": index, "label": l.test.labels[index], "centre_loss": grid.centre(), "random_fallback": grid.random_fallback }),
            )?;
            plot_surface(&grid, &staged.sub("plots")?.join("loss_surface.svg"))?;
            if grid.random_fallback {
                eprintln!("warning: zero input gradient, both directions are random");
            }
            println!("centre loss {:.4}", grid.centre());
            staged.finish()?;
            Ok(())
        }
        Command::Sanity {
            common,
            model,
            reference,
        } => {
            let l = load_for_eval(&common, &model)?;
            let reference = match &reference {
                Some(p) => Some(pick(TrainState::load(p)?, &model.weights)?),
                None => None,
            };
            let opts = SanityOptions {
                epsilon: l.cfg.threat.epsilon_max,
                batch_size: l.cfg.eval.batch_size,
                seed: l.cfg.eval.seed,
                ..SanityOptions::default()
            };
            let verdicts = masking_sanity_checks(&l.model, reference.as_ref(), &l.test, &opts)?;
            let staged = Staged::new(&common.out)?;
            write_json(&staged.sub("reports")?.join("sanity.json"), &verdicts)?;
            for v in &verdicts {
                println!("{}. {:<36} {:<7} {}", v.id, v.name, v.status.name(), v.detail);
            }
            staged.finish()?;
            Ok(())
        }
        Command::Plot { metrics, sweep, out } => run_plot(metrics.as_deref(), sweep.as_deref(), &out),
    }
}

fn run_train(common: &Common, overrides: &[String], resume: Option<&Path>) -> Result<()> {
    let state = match resume {
        Some(p) => {
            let mut s = TrainState::load(p)?;
            let cfg = resolve_config(common.config.as_deref(), Some(&s.config), overrides)?;
            if cfg.model != s.config.model || cfg.train.bn_variant() != s.config.train.bn_variant() {
                return Err(usage("a resumed run cannot change the model or batch-norm variant"));
            }
            s.config = cfg;
            s
        }
        None => TrainState::new(&resolve_config(common.config.as_deref(), None, overrides)?)?,
    };
    let data = load_dataset(&state.config)?;
    let staged = Staged::new(&common.out)?;
    let opts = TrainOptions {
        out_dir: Some(staged.dir().to_path_buf()),
        ..TrainOptions::default()
    };
    let method = state.config.train.method_label();
    let result = train(state, &data, &opts);
    let state = match result {
        Ok(s) => s,
        Err(e) => {
            let out = staged.finish()?;
            return Err(CliError::Runtime(anyhow::Error::new(e).context(format!("training aborted; diagnostics in {}", out.display()))));
        }
    };
    plot_metrics(&state.history, &staged.sub("plots")?.join("metrics.svg"))?;
    let last = state.history.last();
    write_json(
        &staged.sub("reports")?.join("summary.json"),
        &json!({
            "method": method,
            "epochs": state.epoch,
            "best_epoch": state.best_epoch,
            "best_val_robust_acc": state.best_val_robust,
            "last": last,
        }),
    )?;
    let out: PathBuf = staged.finish()?;
    if let Some(r) = last {
        println!(
            "{method}: epoch {} clean {:.2}% robust {:.2}% (averaged {:.2}% / {:.2}%), best epoch {}; output in {}",
            r.epoch,
            r.clean_acc,
            r.robust_acc,
            r.ema_clean_acc,
            r.ema_robust_acc,
            state.best_epoch,
            out.display()
        );
    }
    Ok(())
}

fn run_plot(metrics: Option<&Path>, sweep: Option<&Path>, out: &Path) -> Result<()> {
    if metrics.is_none() && sweep.is_none() {
        return Err(usage("plot needs --metrics and/or --sweep"));
    }
    let records = match metrics {
        Some(p) => Some(read_metrics(p)?.1),
        None => None,
    };
    let rows = match sweep {
        Some(p) => {
            let rows = dajat::attacks::read_sweep_csv(p)?;
            if rows.is_empty() {
                return Err(CliError::Runtime(anyhow::anyhow!("{} holds no sweep rows", p.display())));
            }
            Some(rows)
        }
        None => None,
    };
    if records.as_ref().is_some_and(|r| r.is_empty()) {
        return Err(CliError::Runtime(anyhow::anyhow!("the metrics file holds no epoch records")));
    }
    let staged = Staged::new(out)?;
    let plots = staged.sub("plots")?;
    if let Some(r) = records {
        plot_metrics(&r, &plots.join("metrics.svg"))?;
    }
    if let Some(r) = rows {
        plot_sweep(&r, &plots.join("sweep.svg"))?;
    }
    staged.finish()?;
    Ok(())
}
