use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use dcvqe::data_io::{
    mean_pool, read_features, split_indices, synth_dataset, DatasetManifest, FeatureSequence, LinearProbe, SynthConfig,
    MANIFEST_NAME,
};
use dcvqe::losses::LossVariant;
use dcvqe::mask::TemporalRange;
use dcvqe::metrics::srcc;
use dcvqe::model::DcvqeModel;
use dcvqe::training::{
    evaluate, format_table, load_checkpoint, model_input, run_ablation, save_checkpoint, GradCheckCase, Predictor,
    Sweep, Trainer,
};
use serde::Serialize;

use crate::args::*;
use crate::config::Resolved;
use crate::error::{CliError, Result};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const RUN_CONFIG: &str = "run.toml";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DumpEmbeddings(a) => dump_embeddings(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn write_json_line(out: &mut impl Write, value: &impl Serialize, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value).expect("plain data serializes");
    writeln!(out, "{line}").map_err(CliError::io(path))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("plain data serializes"));
}

fn load_all(manifest: &DatasetManifest) -> Result<Vec<FeatureSequence>> {
    let data = manifest.load_sequences()?;
    if data.is_empty() {
        return Err(CliError::Usage("manifest lists no videos".into()));
    }
    Ok(data)
}

fn load_subset(path: &Path, cfg: &Resolved, subset: Subset) -> Result<Vec<FeatureSequence>> {
    let manifest = DatasetManifest::load(path)?;
    let picked = match subset {
        Subset::All => manifest,
        _ => {
            let (train, val, test) = manifest.split(&cfg.run.split)?;
            match subset {
                Subset::Train => train,
                Subset::Val => val,
                _ => test,
            }
        }
    };
    load_all(&picked)
}

fn model_from(source: &ModelSource, cfg: &mut Resolved, data_dim: usize) -> Result<DcvqeModel> {
    match &source.checkpoint {
        Some(path) if !source.zero_init => Ok(load_checkpoint(path)?.model()?),
        _ => {
            cfg.fit_input_dim(data_dim);
            Ok(DcvqeModel::zeros(cfg.run.model.clone())?)
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = Resolved::load(&a.common)?;
    let base = cfg.run.synth.clone();
    let synth = SynthConfig {
        n_videos: a.n_videos.unwrap_or(base.n_videos),
        min_len: a.min_frames.unwrap_or(base.min_len),
        max_len: a.max_frames.unwrap_or(base.max_len),
        dim: a.dim.unwrap_or(base.dim),
        noise_sigma: a.noise_sigma.unwrap_or(base.noise_sigma),
        max_bursts: a.max_bursts.unwrap_or(base.max_bursts),
        ..base
    };
    let ds = synth_dataset(&synth, &a.out)?;
    println!(
        "wrote {} videos ({}..={} frames, dim {}) to {}",
        ds.sequences.len(),
        synth.min_len,
        synth.max_len,
        synth.dim,
        a.out.join(MANIFEST_NAME).display()
    );
    if a.probe {
        let parts = split_indices(ds.sequences.len(), &cfg.run.split)?;
        let pooled = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
            idx.iter()
                .map(|&i| (mean_pool(&ds.sequences[i].features), ds.sequences[i].mos))
                .unzip()
        };
        let (x, y) = pooled(&parts.train);
        let probe = LinearProbe::fit(&x, &y, 1e-3)?;
        let (xt, yt) = pooled(&parts.test);
        let p: Vec<f64> = xt.iter().map(|r| probe.predict(r)).collect();
        let s = srcc(&p, &yt).map_err(|e| CliError::Numeric(e.to_string()))?;
        println!("linear probe test SRCC {s:.4}");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = Resolved::load(&a.common)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (train_m, val_m, test_m) = manifest.split(&cfg.run.split)?;
    let (train, val, test) = (load_all(&train_m)?, load_all(&val_m)?, load_all(&test_m)?);
    cfg.fit_input_dim(train[0].feature_dim());
    cfg.run.model.validate()?;
    fs::create_dir_all(&a.out).map_err(CliError::io(&a.out))?;

    let (best_path, last_path, log_path) = (a.out.join(BEST_CHECKPOINT), a.out.join(LAST_CHECKPOINT), a.out.join(LOSS_LOG));
    let mut trainer = if a.resume {
        let (last, best) = (load_checkpoint(&last_path)?, load_checkpoint(&best_path)?);
        if last.config != cfg.run.model {
            eprintln!("note: continuing with the model configuration stored in {}", last_path.display());
        }
        cfg.run.model = last.config.clone();
        Trainer::resume(&last, &best, cfg.run.train.clone())?
    } else {
        let model = DcvqeModel::new(cfg.run.model.clone(), cfg.run.train.seed)?;
        Trainer::new(model, cfg.run.train.clone())?
    };
    let run_toml = a.out.join(RUN_CONFIG);
    fs::write(&run_toml, cfg.to_toml()).map_err(CliError::io(&run_toml))?;

    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume)
        .truncate(!a.resume)
        .open(&log_path)
        .map_err(CliError::io(&log_path))?;
    let mut log = BufWriter::new(log);
    eprintln!(
        "training on {} videos, validating on {}, {} parameters",
        train.len(),
        val.len(),
        trainer.model().num_parameters()
    );
    while !trainer.is_done() {
        let rec = trainer.run_epoch(&train, &val)?;
        write_json_line(&mut log, &rec, &log_path)?;
        log.flush().map_err(CliError::io(&log_path))?;
        save_checkpoint(&last_path, &trainer.checkpoint())?;
        let improved = trainer.best().is_some_and(|b| b.epoch == rec.epoch);
        if improved {
            save_checkpoint(&best_path, trainer.best().expect("just checked"))?;
        }
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  {:.1}s{}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            rec.wall_time_s,
            if improved { "  *" } else { "" }
        );
    }
    let best = trainer
        .best()
        .ok_or_else(|| CliError::Usage("no epochs left to run".into()))?;
    let report = evaluate(&best.model()?, &test)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        best_epoch: usize,
        best_val_loss: f64,
        test: &'a dcvqe::metrics::MetricsReport,
    }
    print_json(&Summary {
        best_epoch: best.epoch,
        best_val_loss: best.best_val_loss,
        test: &report,
    });
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = Resolved::load(&a.common)?;
    let data = load_subset(&a.manifest, &cfg, a.subset)?;
    let model = model_from(&a.source, &mut cfg, data[0].feature_dim())?;
    let report = evaluate(&model, &data)?;
    print_json(&report);
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(out, text).map_err(CliError::io(out))?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut cfg = Resolved::load(&a.common)?;
    let features = a
        .files
        .iter()
        .map(|f| read_features(f).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    let model = model_from(&a.source, &mut cfg, features[0].cols())?;
    let mut lines = String::new();
    for (path, f) in a.files.iter().zip(&features) {
        let score = model.predict_one(f)?;
        lines.push_str(&format!("{}\t{score}\n", path.display()));
    }
    match &a.out {
        Some(out) => fs::write(out, lines).map_err(CliError::io(out))?,
        None => print!("{lines}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let case = GradCheckCase::tiny(a.seed)?;
    let report = case.run(a.step)?;
    println!("{:<28} {:>7} {:>6} {:>13}", "parameter", "checked", "kinks", "max rel error");
    for (p, name) in report.params.iter().zip(case.param_names()) {
        println!("{name:<28} {:>7} {:>6} {:>13.3e}", p.checked, p.kinks, p.max_rel_error);
    }
    let worst = report.max_rel_error();
    println!("max relative error: {worst:.3e} (tolerance {:.0e})", a.tol);
    if report.passes(a.tol) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} exceeds {:.0e}",
            a.tol
        )))
    }
}

fn dump_embeddings(a: DumpArgs) -> Result<()> {
    let cfg = Resolved::load(&a.common)?;
    let data = load_subset(&a.manifest, &cfg, Subset::All)?;
    let model = load_checkpoint(&a.checkpoint)?.model()?;
    let file = File::create(&a.out).map_err(CliError::io(&a.out))?;
    let mut out = BufWriter::new(file);
    #[derive(Serialize)]
    struct Row<'a> {
        video_id: &'a str,
        mos: f64,
        score: f64,
        embedding: Vec<f64>,
    }
    for v in &data {
        let (score, embedding) = model.embed(&model_input(model.config(), &v.features))?;
        write_json_line(
            &mut out,
            &Row {
                video_id: &v.video_id,
                mos: v.mos,
                score,
                embedding,
            },
            &a.out,
        )?;
    }
    out.flush().map_err(CliError::io(&a.out))?;
    println!("wrote {} embeddings of width {} to {}", data.len(), model.config().model_dim, a.out.display());
    Ok(())
}

fn parse_list<T>(values: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).ok_or_else(|| CliError::Usage(format!("cannot parse sweep value `{s}`"))))
        .collect()
}

fn sweep_from(kind: SweepKind, values: Option<&str>) -> Result<Sweep> {
    let Some(values) = values else {
        return Ok(match kind {
            SweepKind::TemporalRange => Sweep::default_temporal_range(),
            SweepKind::AlphaBeta => Sweep::default_loss_weights(),
            SweepKind::Loss => Sweep::default_loss_variant(),
            SweepKind::Layers => Sweep::default_layers(),
        });
    };
    Ok(match kind {
        SweepKind::TemporalRange => Sweep::TemporalRange(parse_list(values, |s| s.parse::<TemporalRange>().ok())?),
        SweepKind::AlphaBeta => Sweep::LossWeights(parse_list(values, |s| {
            let (a, b) = s.split_once(':')?;
            Some((a.parse().ok()?, b.parse().ok()?))
        })?),
        SweepKind::Loss => Sweep::LossVariant(parse_list(values, |s| s.parse::<LossVariant>().ok())?),
        SweepKind::Layers => Sweep::Layers(parse_list(values, |s| s.parse().ok())?),
    })
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = Resolved::load(&a.common)?;
    let sweep = sweep_from(a.sweep, a.values.as_deref())?;
    let data = load_subset(&a.manifest, &cfg, Subset::All)?;
    cfg.fit_input_dim(data[0].feature_dim());
    let rows = run_ablation(&data, &cfg.run.model, &cfg.run.train, &cfg.run.split, &sweep)?;
    print!("{}", format_table(sweep.key(), &rows));
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
        fs::write(out, text).map_err(CliError::io(out))?;
    }
    Ok(())
}
