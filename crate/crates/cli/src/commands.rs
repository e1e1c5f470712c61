use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cigt::analysis::{compare, config_digest, render_comparison, ExperimentReport, RoutingHistogram};
use cigt::checkpoint;
use cigt::cost::{count_macs, count_params};
use cigt::data::{load_split, LabeledDataset, Split};
use cigt::train::{MetricsLog, Precision, Trainer};
use cigt::trellis::TrellisConfig;
use cigt::{Element, Error, Result};

use crate::experiment::Experiment;

pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(Error::from)
}

fn histogram_file(h: &RoutingHistogram) -> String {
    format!("histogram_block{}.csv", h.block)
}

fn load_data(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((load_split(dir, Split::Train)?, load_split(dir, Split::Test)?))
}

pub struct TrainRequest {
    pub experiment: Experiment,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub resume: bool,
    pub quiet: bool,
}

pub fn train(req: &TrainRequest) -> Result<ExperimentReport> {
    match req.experiment.train.precision {
        Precision::F32 => train_with::<f32>(req),
        Precision::F64 => train_with::<f64>(req),
    }
}

fn train_with<T: Element>(req: &TrainRequest) -> Result<ExperimentReport> {
    let exp = &req.experiment;
    let out = &req.out_dir;
    fs::create_dir_all(out)?;
    let (train, test) = load_data(&req.data_dir)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let metrics = out.join(METRICS_FILE);
    let mut trainer = if req.resume {
        let t: Trainer<T> = checkpoint::load(&ckpt)?;
        if t.config() != &exp.train || t.model().config() != &exp.model {
            return Err(Error::Config(format!(
                "{} was written by a different configuration than {}",
                ckpt.display(),
                out.join(EXPERIMENT_FILE).display()
            )));
        }
        t
    } else {
        write(&out.join(EXPERIMENT_FILE), &exp.to_toml()?)?;
        if metrics.exists() {
            fs::remove_file(&metrics)?;
        }
        Trainer::<T>::new(exp.train.clone(), exp.model.clone())?
    };

    let t0 = Instant::now();
    let quiet = req.quiet;
    trainer.fit(&train, Some(&test), |t, r, _| {
        MetricsLog::append(&metrics, r)?;
        checkpoint::save(t, &ckpt)?;
        if !quiet {
            let test_acc = r.test_acc.map_or("-".to_string(), |a| format!("{a:.4}"));
            eprintln!(
                "epoch {:>3}  step {:>6}  loss {:>8.4}  train {:.4}  test {test_acc}  tau {:.3}  ({:.0} s)",
                r.epoch,
                r.step,
                r.mean_loss,
                r.train_acc,
                r.tau,
                t0.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    let wall = t0.elapsed().as_secs_f64();

    let ev = trainer.evaluate(&test)?;
    let config = serde_json::to_value(exp)?;
    let report = ExperimentReport {
        name: exp.name.clone(),
        dataset: exp.dataset.clone(),
        config_digest: config_digest(&config)?,
        config,
        seed: exp.train.seed,
        epochs: trainer.epochs_done(),
        steps: trainer.step_count(),
        train_accuracy: trainer.history().last().map(|r| r.train_acc),
        test_accuracy: ev.accuracy,
        eval_routing: routing_name(&exp.train),
        params: count_params(&exp.model)?.total,
        macs_per_sample: ev.mean_macs,
        histograms: ev.histograms,
        wall_clock_secs: wall,
    };
    write(&out.join("report.json"), &report.to_json()?)?;
    write(&out.join("report.txt"), &report.render())?;
    for h in &report.histograms {
        write(&out.join(histogram_file(h)), &h.to_csv())?;
    }
    Ok(report)
}

fn routing_name(train: &cigt::train::TrainConfig) -> String {
    match train.eval_routing() {
        cigt::trellis::EvalRouting::Argmax => "argmax".into(),
        cigt::trellis::EvalRouting::Random { .. } => "random".into(),
    }
}

pub struct AnalyzeRequest {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub split: Split,
    pub out_dir: PathBuf,
    pub cutoff: f64,
}

pub fn analyze(req: &AnalyzeRequest) -> Result<String> {
    let header = checkpoint::read_header(&req.checkpoint)?;
    match header.dtype.as_str() {
        "f32" => analyze_with::<f32>(req),
        "f64" => analyze_with::<f64>(req),
        other => Err(Error::Checkpoint(format!("unsupported tensor type {other}"))),
    }
}

fn analyze_with<T: Element>(req: &AnalyzeRequest) -> Result<String> {
    if !(req.cutoff > 0.0 && req.cutoff <= 1.0) {
        return Err(Error::Config(format!("cutoff must lie in (0, 1], got {}", req.cutoff)));
    }
    let trainer: Trainer<T> = checkpoint::load(&req.checkpoint)?;
    let data = load_split(&req.data_dir, req.split)?;
    let ev = trainer.evaluate(&data)?;
    fs::create_dir_all(&req.out_dir)?;

    let model = trainer.model().config();
    let mut text = cost_report(model)?;
    let _ = writeln!(
        text,
        "\n{} split: accuracy {:.4} ({} / {}) with {} routing, {:.0} MACs per sample",
        req.split.as_str(),
        ev.accuracy,
        ev.correct,
        ev.total,
        routing_name(trainer.config()),
        ev.mean_macs
    );
    for h in &ev.histograms {
        write(&req.out_dir.join(histogram_file(h)), &h.to_csv())?;
        let chi = h.independence_test();
        let _ = writeln!(
            text,
            "\nblock {}: samples per unit {:?}; class/unit independence chi2 {:.1} (dof {}), p = {:.3e}",
            h.block,
            h.unit_totals(),
            chi.statistic,
            chi.dof,
            chi.p_value
        );
        for k in 0..h.units() {
            let _ = writeln!(
                text,
                "  unit {k}: dominant classes at {:.0}%: {:?}",
                req.cutoff * 100.0,
                h.dominant_classes(k, req.cutoff)
            );
        }
    }
    let cost = serde_json::json!({ "params": count_params(model)?, "macs": count_macs(model, &model.input_shape)? });
    write(&req.out_dir.join("cost.json"), &serde_json::to_string_pretty(&cost)?)?;
    write(&req.out_dir.join("analysis.txt"), &text)?;
    Ok(text)
}

pub fn cost_report(model: &TrellisConfig) -> Result<String> {
    let p = count_params(model)?;
    let m = count_macs(model, &model.input_shape)?;
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>6} {:>12} {:>12} {:>14}", "block", "units", "params/unit", "params", "MACs/sample");
    for (l, block) in model.blocks.iter().enumerate() {
        let _ = writeln!(s, "{:<8} {:>6} {:>12} {:>12} {:>14}", l, block.units, p.per_unit[l], p.per_block[l], m.per_block[l]);
    }
    for (l, (rp, rm)) in p.routers.iter().zip(&m.routers).enumerate() {
        let _ = writeln!(s, "{:<8} {:>6} {:>12} {:>12} {:>14}", format!("router{l}"), 1, rp, rp, rm);
    }
    let _ = writeln!(s, "{:<8} {:>6} {:>12} {:>12} {:>14}", "head", 1, p.head, p.head, m.head);
    let _ = write!(s, "{:<8} {:>6} {:>12} {:>12} {:>14}", "total", "", "", p.total, m.per_sample);
    Ok(s)
}

pub fn compare_reports(a: &Path, b: &Path) -> Result<String> {
    let read = |p: &Path| -> Result<ExperimentReport> {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        ExperimentReport::from_json(&text)
    };
    let (ra, rb) = (read(a)?, read(b)?);
    let rows = compare(&ra, &rb)?;
    Ok(render_comparison(&ra, &rb, &rows))
}
