use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Deserialize;
use walkdir::WalkDir;

use step_mi::data::{load_records, records_to_jsonl, synthetic};
use step_mi::eval::{evaluate, ood_evaluate, Evaluation, OverlapScorer, QualityScorer};
use step_mi::oracle::suite::{PropertySuite, SuiteReport};
use step_mi::oracle::DiscreteJoint;
use step_mi::par::Execution;
use step_mi::trainer::checkpoint::{self, load_checkpoint, save_checkpoint};
use step_mi::trainer::{trajectory_to_csv, RunArtifacts};
use step_mi::{MiVariant, RunConfig};

use crate::manifest::{content_hash, digest_inputs, load_manifest, Recorder, Status, MANIFEST_FILE};
use crate::tables::{
    bin_rows, to_csv, AblationRow, Aggregate, EvalReport, PredictionRow, ReportBinRow, ReportRow, TrainSummary,
};
use crate::{AblateArgs, EvalArgs, Format, OracleArgs, ReplayArgs, ReportArgs, ScorerKind, SynthArgs, SynthTask, TrainArgs};

/// A checked property failed: an oracle property or replay equality.
#[derive(Debug)]
pub struct PropertyViolation(pub String);

impl fmt::Display for PropertyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PropertyViolation {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(step_mi::Error::Diverged { .. }) = cause.downcast_ref::<step_mi::Error>() {
            return 2;
        }
        if cause.is::<PropertyViolation>() {
            return 3;
        }
    }
    1
}

/// Runs `body`, then marks the manifest complete or failed.
fn recorded(mut rec: Recorder, body: impl FnOnce(&mut Recorder) -> Result<()>) -> Result<()> {
    match body(&mut rec) {
        Ok(()) => rec.complete(),
        Err(e) => {
            if let Err(me) = rec.fail(i32::from(exit_code(&e)), &e) {
                log::error!("could not mark manifest failed: {me:#}");
            }
            Err(e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(path: &Path) -> Result<Vec<step_mi::Example>> {
    load_records(path).with_context(|| format!("dataset {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn json_text<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn train_summary(art: &RunArtifacts, dataset: &str) -> TrainSummary {
    let w = art.config.effective_weights();
    TrainSummary {
        dataset: dataset.to_string(),
        variant: art.config.mi_variant.to_string(),
        alpha1: w.alpha1,
        alpha2: w.alpha2,
        alpha3: w.alpha3,
        vocab_size: art.vocab.len(),
        num_params: art.params.len(),
        run: art.summary(),
    }
}

/// Trajectory, checkpoint and summary under `prefix` (empty or `name/`).
fn write_run(rec: &mut Recorder, prefix: &str, art: &RunArtifacts, dataset: &str) -> Result<TrainSummary> {
    rec.write_output(&format!("{prefix}trajectory.csv"), trajectory_to_csv(&art.trajectory))?;
    let ckpt = format!("{prefix}checkpoint");
    save_checkpoint(rec.dir().join(&ckpt), &art.params, &art.vocab, &art.config, dataset)?;
    for f in [checkpoint::MANIFEST_FILE, checkpoint::PARAMS_FILE, checkpoint::VOCAB_FILE, checkpoint::CONFIG_FILE] {
        rec.output(format!("{ckpt}/{f}"));
    }
    let summary = train_summary(art, dataset);
    rec.write_output(&format!("{prefix}summary.json"), json_text(&summary)?)?;
    Ok(summary)
}

fn write_eval(rec: &mut Recorder, prefix: &str, ev: &Evaluation, config_hash: &str) -> Result<EvalReport> {
    let report = EvalReport {
        checkpoint_config_hash: config_hash.to_string(),
        calibration: ev.report.clone(),
        quality: ev.quality.clone(),
    };
    rec.write_output(&format!("{prefix}report.json"), json_text(&report)?)?;
    rec.write_output(&format!("{prefix}bins.csv"), to_csv(&bin_rows(&ev.report.bins))?)?;
    let preds: Vec<PredictionRow> = ev.records.iter().map(PredictionRow::from).collect();
    rec.write_output(&format!("{prefix}predictions.csv"), to_csv(&preds)?)?;
    Ok(report)
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.config.as_deref());
    let rec = Recorder::begin(&a.out, "train", argv, digest_inputs(&inputs)?)?;
    recorded(rec, |rec| {
        let config = load_config(a.config.as_deref())?;
        rec.set_config(&config)?;
        let examples = load_data(&a.data)?;
        let name = a.dataset_name.clone().unwrap_or_else(|| stem(&a.data));
        let art = step_mi::trainer::train(config, &examples)?;
        let s = write_run(rec, "", &art, &name)?;
        let first = s.run.initial.map_or(f64::NAN, |b| b.total);
        let last = s.run.last.map_or(f64::NAN, |b| b.total);
        println!(
            "train: {} steps on {} examples, total loss {first:.4} -> {last:.4}, {:.1}s; wrote {}",
            s.run.steps,
            examples.len(),
            art.wall_clock_secs,
            rec.dir().display()
        );
        Ok(())
    })
}

fn make_scorer(a: &EvalArgs) -> Result<Box<dyn QualityScorer>> {
    match a.scorer {
        ScorerKind::Overlap => Ok(Box::new(OverlapScorer)),
        ScorerKind::Judge => judge_scorer(a),
    }
}

#[cfg(feature = "remote-judge")]
fn judge_scorer(a: &EvalArgs) -> Result<Box<dyn QualityScorer>> {
    use step_mi::eval::quality::{HttpTransport, JudgeScorer};
    let url = a.judge_url.as_deref().context("--scorer judge needs --judge-url")?;
    let model = a.judge_model.as_deref().context("--scorer judge needs --judge-model")?;
    let mut j = JudgeScorer::new(HttpTransport::from_env(url, model)?);
    j.repeats = a.judge_repeats.max(1);
    Ok(Box::new(j))
}

#[cfg(not(feature = "remote-judge"))]
fn judge_scorer(_: &EvalArgs) -> Result<Box<dyn QualityScorer>> {
    bail!("this build has no remote judge; rebuild with `--features remote-judge`")
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let inputs = digest_inputs(&[a.ckpt.as_path(), a.data.as_path()])?;
    let scorer = make_scorer(a)?;
    let rec = Recorder::begin(&a.out, "eval", argv, inputs)?;
    recorded(rec, |rec| {
        let mut ck = load_checkpoint(&a.ckpt).with_context(|| format!("checkpoint {}", a.ckpt.display()))?;
        if let Some(c) = a.confidence {
            ck.config.confidence = c;
        }
        rec.set_config(&ck.config)?;
        let examples = load_data(&a.data)?;
        let name = stem(&a.data);
        let ev = if a.ood {
            ood_evaluate(&ck, &examples, &name, scorer.as_ref(), Execution::default())?
        } else {
            let mut ev = evaluate(&ck.params, &ck.vocab, &ck.config, &examples, scorer.as_ref(), Execution::default())?;
            ev.report.dataset = Some(name);
            ev.report.train_dataset = Some(ck.dataset.clone());
            ev
        };
        let r = write_eval(rec, "", &ev, &ck.config_hash)?;
        let c = &r.calibration;
        println!(
            "eval{}: n {}, accuracy {:.4}, ECE {:.4}, avg confidence {:.4}, mean quality {}; wrote {}",
            if c.out_of_domain { " (out-of-domain)" } else { "" },
            c.n,
            c.accuracy,
            c.ece,
            c.avg_confidence,
            r.quality.mean_quality.map_or("n/a".into(), |q| format!("{q:.3}")),
            rec.dir().display()
        );
        Ok(())
    })
}

fn parse_variants(list: &str) -> Result<Vec<MiVariant>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: MiVariant = part.parse().with_context(|| format!("unknown variant `{part}`"))?;
        if !seen.insert(v) {
            bail!("variant `{part}` listed twice");
        }
        out.push(v);
    }
    if out.is_empty() {
        bail!("no variants given");
    }
    Ok(out)
}

pub fn ablate(a: &AblateArgs, argv: &[String]) -> Result<()> {
    let variants = parse_variants(&a.variants)?;
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.eval_data.as_deref());
    let rec = Recorder::begin(&a.out, "ablate", argv, digest_inputs(&inputs)?)?;
    recorded(rec, |rec| {
        let base = load_config(a.config.as_deref())?;
        rec.set_config(&base)?;
        let train_set = load_data(&a.data)?;
        let train_name = stem(&a.data);
        let (eval_set, eval_name) = match &a.eval_data {
            Some(p) => (load_data(p)?, stem(p)),
            None => (train_set.clone(), train_name.clone()),
        };
        let run_one = |v: MiVariant| -> Result<(RunArtifacts, Evaluation)> {
            let cfg = RunConfig { mi_variant: v, ..base.clone() };
            let art = step_mi::trainer::train(cfg, &train_set)?;
            let ev = evaluate(&art.params, &art.vocab, &art.config, &eval_set, &OverlapScorer, Execution::default())?;
            Ok((art, ev))
        };
        let results: Vec<Result<(RunArtifacts, Evaluation)>> = if a.parallel {
            variants.par_iter().map(|&v| run_one(v)).collect()
        } else {
            variants.iter().map(|&v| run_one(v)).collect()
        };
        let mut rows = Vec::with_capacity(variants.len());
        for (v, res) in variants.iter().zip(results) {
            let (art, mut ev) = res.with_context(|| format!("variant {v}"))?;
            ev.report.dataset = Some(eval_name.clone());
            ev.report.train_dataset = Some(train_name.clone());
            let prefix = format!("{v}/");
            let s = write_run(rec, &prefix, &art, &train_name)?;
            let r = write_eval(rec, &prefix, &ev, &art.config_hash)?;
            let (initial, last) = (s.run.initial.unwrap_or_default(), s.run.last.unwrap_or_default());
            rows.push(AblationRow {
                variant: v.to_string(),
                alpha1: s.alpha1,
                alpha2: s.alpha2,
                alpha3: s.alpha3,
                steps: s.run.steps,
                initial_total: initial.total,
                final_total: last.total,
                final_prediction_loss: last.prediction_loss,
                final_generation_loss: last.generation_loss,
                final_mi_loss: last.mi_loss,
                mean_mi_loss: s.run.mean_mi_loss,
                eval_dataset: eval_name.clone(),
                n: r.calibration.n,
                accuracy: r.calibration.accuracy,
                ece: r.calibration.ece,
                avg_confidence: r.calibration.avg_confidence,
                mean_quality: r.quality.mean_quality.context("no rationale was scored")?,
            });
        }
        rec.write_output("ablation.csv", to_csv(&rows)?)?;
        rec.write_output("ablation.json", json_text(&rows)?)?;
        println!("{:<8} {:>10} {:>10} {:>10} {:>9} {:>8} {:>8}", "variant", "final", "mi_loss", "mean_mi", "accuracy", "ece", "quality");
        for r in &rows {
            println!(
                "{:<8} {:>10.5} {:>10.5} {:>10.5} {:>9.4} {:>8.4} {:>8.3}",
                r.variant, r.final_total, r.final_mi_loss, r.mean_mi_loss, r.accuracy, r.ece, r.mean_quality
            );
        }
        Ok(())
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JointFile {
    One(Vec<Vec<f64>>),
    Many(Vec<Vec<Vec<f64>>>),
}

fn read_joints(path: &Path) -> Result<Vec<DiscreteJoint>> {
    let tables = match read_json::<JointFile>(path)? {
        JointFile::One(t) => vec![t],
        JointFile::Many(ts) => ts,
    };
    tables
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let cols = t.first().map_or(0, Vec::len);
            if t.iter().any(|r| r.len() != cols) {
                bail!("joint {i}: ragged table");
            }
            DiscreteJoint::from_weights(t.len(), cols, &t.concat()).with_context(|| format!("joint {i}"))
        })
        .collect()
}

fn print_suite(r: &SuiteReport, source: &str) {
    println!("oracle-check: {} joints ({source})", r.trials);
    for c in &r.counts {
        println!("  {:<16} {:>6} passed {:>6} failed", c.property.name(), c.passed, c.failed);
    }
    println!("  mean MI {} nats; largest uniform-marginal gap {}", r.mean_mi, r.max_uniform_gap);
}

fn check_suite(r: &SuiteReport) -> Result<()> {
    if r.all_passed() {
        return Ok(());
    }
    for v in &r.violations {
        eprintln!("{}", serde_json::to_string(v)?);
    }
    Err(PropertyViolation(format!("{} property violation(s); failing joints printed above", r.violations.len())).into())
}

pub fn oracle_check(a: &OracleArgs, argv: &[String]) -> Result<()> {
    if a.joint.is_none() && a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    if a.max_dim < 2 {
        bail!("--max-dim must be at least 2");
    }
    let run = || -> Result<(SuiteReport, String)> {
        match &a.joint {
            Some(p) => Ok((PropertySuite::run_on(&read_joints(p)?), format!("from {}", p.display()))),
            None => Ok((
                PropertySuite::new(a.trials, a.seed, a.max_dim).run(Execution::default()),
                format!("seed {}, dims 2..={}", a.seed, a.max_dim),
            )),
        }
    };
    match &a.out {
        None => {
            let (r, source) = run()?;
            print_suite(&r, &source);
            check_suite(&r)
        }
        Some(out) => {
            let inputs = digest_inputs(&a.joint.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
            let rec = Recorder::begin(out, "oracle-check", argv, inputs)?;
            recorded(rec, |rec| {
                rec.set_seed(a.seed)?;
                let (r, source) = run()?;
                rec.write_output("oracle_report.json", json_text(&r)?)?;
                print_suite(&r, &source);
                check_suite(&r)
            })
        }
    }
}

struct Collected {
    aggregate: Aggregate,
    files: Vec<PathBuf>,
}

fn collect_runs(root: &Path) -> Result<Collected> {
    if !root.is_dir() {
        bail!("{} is not a directory", root.display());
    }
    let manifests: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == MANIFEST_FILE)
        .map(|e| e.into_path())
        .collect();
    if manifests.is_empty() {
        bail!("no run manifests under {}", root.display());
    }
    let mut runs = Vec::new();
    let mut bins = Vec::new();
    let mut files = Vec::new();
    for mpath in manifests {
        let m = load_manifest(&mpath)?;
        let dir = mpath.parent().expect("manifest has a parent");
        let rel = dir.strip_prefix(root).unwrap_or(dir).to_string_lossy().replace('\\', "/");
        let run = if rel.is_empty() { ".".to_string() } else { rel };
        if m.status != Status::Complete {
            log::warn!("skipping {run}: status {:?}", m.status);
            continue;
        }
        files.push(mpath.clone());
        let mut push_bins = |variant: Option<&str>, r: &EvalReport| {
            bins.extend(bin_rows(&r.calibration.bins).into_iter().map(|b| ReportBinRow {
                run: run.clone(),
                variant: variant.map(str::to_string),
                bin: b.bin,
                lower: b.lower,
                upper: b.upper,
                count: b.count,
                mean_confidence: b.mean_confidence,
                accuracy: b.accuracy,
            }))
        };
        match m.command.as_str() {
            "train" => {
                let p = dir.join("summary.json");
                let s: TrainSummary = read_json(&p)?;
                files.push(p);
                let mut row = ReportRow::empty(&run, "train").with_training(&s);
                row.seed = m.seed;
                runs.push(row);
            }
            "eval" => {
                let p = dir.join("report.json");
                let r: EvalReport = read_json(&p)?;
                files.push(p);
                push_bins(None, &r);
                let mut row = ReportRow::empty(&run, "eval").with_eval(&r);
                row.seed = m.seed;
                runs.push(row);
            }
            "ablate" => {
                let p = dir.join("ablation.json");
                let table: Vec<AblationRow> = read_json(&p)?;
                files.push(p);
                for a in &table {
                    let sp = dir.join(&a.variant).join("summary.json");
                    let rp = dir.join(&a.variant).join("report.json");
                    let s: TrainSummary = read_json(&sp)?;
                    let r: EvalReport = read_json(&rp)?;
                    files.extend([sp, rp]);
                    push_bins(Some(&a.variant), &r);
                    let mut row = ReportRow::empty(&run, "ablate").with_training(&s).with_eval(&r);
                    row.seed = m.seed;
                    runs.push(row);
                }
            }
            _ => {}
        }
    }
    if runs.is_empty() {
        bail!("no completed train, eval or ablate runs under {}", root.display());
    }
    Ok(Collected { aggregate: Aggregate { runs, bins }, files })
}

pub fn report(a: &ReportArgs, argv: &[String]) -> Result<()> {
    match &a.out {
        None => {
            let c = collect_runs(&a.runs)?;
            match a.format {
                Format::Csv => print!("{}\n{}", to_csv(&c.aggregate.runs)?, to_csv(&c.aggregate.bins)?),
                Format::Json => print!("{}", json_text(&c.aggregate)?),
            }
            Ok(())
        }
        Some(out) => {
            let rec = Recorder::begin(out, "report", argv, Vec::new())?;
            recorded(rec, |rec| {
                let c = collect_runs(&a.runs)?;
                let paths: Vec<&Path> = c.files.iter().map(PathBuf::as_path).collect();
                // inputs are only known after the scan
                let inputs = digest_inputs(&paths)?;
                rec.set_inputs(inputs)?;
                match a.format {
                    Format::Csv => {
                        rec.write_output("runs.csv", to_csv(&c.aggregate.runs)?)?;
                        rec.write_output("bins.csv", to_csv(&c.aggregate.bins)?)?;
                    }
                    Format::Json => rec.write_output("aggregate.json", json_text(&c.aggregate)?)?,
                }
                println!("report: {} rows, {} bin rows; wrote {}", c.aggregate.runs.len(), c.aggregate.bins.len(), rec.dir().display());
                Ok(())
            })
        }
    }
}

pub fn synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let rec = Recorder::begin(&a.out, "synth", argv, Vec::new())?;
    recorded(rec, |rec| {
        let (all, config) = match a.task {
            SynthTask::Parity => (synthetic::parity_task(a.train + a.test, a.seed), synthetic::parity_config(a.seed)),
            SynthTask::Copy => (synthetic::copy_task(a.train + a.test, a.seed), RunConfig { seed: a.seed, ..RunConfig::default() }),
        };
        rec.set_config(&config)?;
        let (train, test) = all.split_at(a.train);
        rec.write_output("train.jsonl", records_to_jsonl(train))?;
        rec.write_output("test.jsonl", records_to_jsonl(test))?;
        rec.write_output("config.txt", config.to_text())?;
        println!("synth: {} train and {} test examples; wrote {}", train.len(), test.len(), rec.dir().display());
        Ok(())
    })
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir()?.join(p) })
}

fn replace_out(argv: &[String], out: &Path) -> Result<Vec<String>> {
    let out = out.to_string_lossy().into_owned();
    let mut args = argv.to_vec();
    let mut found = false;
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--out" && i + 1 < args.len() {
            args[i + 1] = out.clone();
            found = true;
            i += 1;
        } else if args[i].starts_with("--out=") {
            args[i] = format!("--out={out}");
            found = true;
        }
        i += 1;
    }
    if !found {
        bail!("recorded command line has no --out");
    }
    Ok(args)
}

pub fn replay(a: &ReplayArgs) -> Result<()> {
    let mpath = if a.manifest.is_dir() { a.manifest.join(MANIFEST_FILE) } else { a.manifest.clone() };
    let m = load_manifest(&mpath)?;
    if m.status != Status::Complete {
        bail!("{} has status {:?}; only completed runs can be replayed", mpath.display(), m.status);
    }
    let run_dir = absolute(mpath.parent().context("manifest path has no parent")?)?;
    let run_dir = run_dir.canonicalize().unwrap_or(run_dir);
    let out = match &a.out {
        Some(o) => absolute(o)?,
        None => {
            let name = run_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            run_dir.with_file_name(format!("{name}-replay"))
        }
    };
    if out == run_dir {
        bail!("replay output must differ from the recorded run directory");
    }
    let cwd = PathBuf::from(&m.cwd);
    for inp in &m.inputs {
        let p = cwd.join(&inp.path);
        let h = content_hash(&p).with_context(|| format!("recorded input {}", inp.path))?;
        if h != inp.sha256 {
            bail!("input {} changed since the recorded run", inp.path);
        }
    }
    let argv = replace_out(&m.argv, &out)?;
    std::env::set_current_dir(&cwd).with_context(|| format!("entering recorded working directory {}", cwd.display()))?;
    crate::dispatch(&argv).context("replayed command failed")?;

    let new = load_manifest(&out.join(MANIFEST_FILE))?;
    let mut differing = Vec::new();
    if new.outputs != m.outputs {
        differing.push("<output list>".to_string());
    }
    for rel in &m.outputs {
        let before = fs::read(run_dir.join(rel)).with_context(|| format!("reading recorded output {rel}"))?;
        if fs::read(out.join(rel)).ok().as_deref() != Some(before.as_slice()) {
            differing.push(rel.clone());
        }
    }
    println!(
        "replay: {} of {} outputs identical; re-run written to {}",
        m.outputs.len() - differing.iter().filter(|d| !d.starts_with('<')).count(),
        m.outputs.len(),
        out.display()
    );
    if differing.is_empty() {
        Ok(())
    } else {
        Err(PropertyViolation(format!("replay differs in: {}", differing.join(", "))).into())
    }
}
