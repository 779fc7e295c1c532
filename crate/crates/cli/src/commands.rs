use std::fs;
use std::path::{Path, PathBuf};

use tower_core::augment::{apply_plan, sample_plan};
use tower_core::data::{write_mask_png, write_png, Dataset};
use tower_core::eval::{
    export_embeddings as embeddings_csv, finetune_classify, finetune_segment, label_fraction_sweep,
    matching_fraction, sweep_csv, sweep_mean, Arm, EvalResult, TaskKind, TrialResult,
};
use tower_core::nn::{load_checkpoint, ModelState, UNet};
use tower_core::report::render_csv;
use tower_core::rng::{derive_seed, rng_from_seed};
use tower_core::trainer::{pretrain as run_pretrain, PretrainArm};
use tower_core::transform::generate_mask;
use tower_core::TowerError;

use crate::manifest::{dataset_hash, RunManifest};
use crate::settings::{self, Settings};
use crate::{CliError, CliResult, Common};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Runtime(TowerError::File {
            path: dir.into(),
            source: e,
        })
    })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Runtime(TowerError::File {
            path: path.into(),
            source: e,
        })
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map_err(|e| CliError::Runtime(TowerError::Format(e.to_string())))
}

fn load_data(s: &Settings) -> CliResult<Dataset<f32>> {
    Ok(s.train.data.load::<f32>()?)
}

fn load_model(path: &Path) -> CliResult<(UNet, ModelState<f32>)> {
    if !path.is_file() {
        return Err(CliError::Validation(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    let ck = load_checkpoint::<f32>(path)?;
    let net = UNet::bind(&ck.config, &ck.state)?;
    Ok((net, ck.state))
}

fn flag<T: ToString>(key: &'static str, v: Option<T>) -> (&'static str, Option<String>) {
    (key, v.map(|v| v.to_string()))
}

fn switch(key: &'static str, on: bool) -> (&'static str, Option<String>) {
    (key, on.then(|| "true".to_string()))
}

pub fn pretrain(common: &Common, mode: Option<String>, epochs: Option<usize>) -> CliResult<()> {
    let s = settings::load(common, &[flag("mode", mode), flag("epochs", epochs)])?;
    let data = load_data(&s)?;
    create_dir(&common.out)?;
    let out = run_pretrain(&s.train, &data, Some(&common.out))?;
    let mut m = RunManifest::new("pretrain", Some(&s));
    m.dataset_hash = Some(dataset_hash(&data));
    m.outputs = vec![common.out.join("best.ckpt"), common.out.join("metrics.csv")];
    m.append(&common.out)?;
    let best = out.best_epoch.map_or("-".to_string(), |e| e.to_string());
    println!(
        "{}: {} epochs, best epoch {best}, checkpoint {}",
        s.train.mode,
        out.metrics.epochs.len(),
        common.out.join("best.ckpt").display()
    );
    Ok(())
}

fn run_trial(
    net: &UNet,
    st: &ModelState<f32>,
    data: &Dataset<f32>,
    s: &Settings,
    fraction: f64,
    trial: u64,
) -> CliResult<TrialResult> {
    Ok(match s.ft.task {
        TaskKind::Classify => finetune_classify(net, st, data, &s.ft, fraction, trial)?,
        TaskKind::Segment => finetune_segment(net, st, data, &s.ft, fraction, trial)?,
    })
}

#[derive(serde::Serialize)]
struct FinetuneReport {
    result: EvalResult,
    best_epochs: Vec<usize>,
    epochs_run: Vec<usize>,
    epochs_to_target: Vec<Option<usize>>,
}

pub fn finetune(
    common: &Common,
    ckpt: &Path,
    task: Option<String>,
    label_fraction: Option<f64>,
    trials: Option<usize>,
    linear_probe: bool,
) -> CliResult<()> {
    let flags = [
        flag("task", task),
        flag("label_fraction", label_fraction),
        flag("trials", trials),
        switch("linear_probe", linear_probe),
    ];
    let s = settings::load(common, &flags)?;
    let (net, st) = load_model(ckpt)?;
    let data = load_data(&s)?;
    create_dir(&common.out)?;
    let mut m = RunManifest::new("finetune", Some(&s));
    m.dataset_hash = Some(dataset_hash(&data));
    let mut trials = Vec::new();
    for t in 0..s.ft.trials {
        let r = run_trial(&net, &st, &data, &s, s.ft.label_fraction, t as u64)?;
        let mut csv = String::from("epoch,train_loss,val_metric\n");
        for (e, (l, v)) in r.train_loss.iter().zip(&r.val_metric).enumerate() {
            csv.push_str(&format!("{e},{l},{v}\n"));
        }
        let p = common.out.join(format!("history_t{t}.csv"));
        write(&p, &csv)?;
        m.outputs.push(p);
        trials.push(r);
    }
    let report = FinetuneReport {
        result: EvalResult::from_values(
            s.ft.task,
            s.ft.label_fraction,
            trials.iter().map(|r| r.metric).collect(),
        ),
        best_epochs: trials.iter().map(|r| r.best_epoch).collect(),
        epochs_run: trials.iter().map(|r| r.epochs_run).collect(),
        epochs_to_target: trials.iter().map(|r| r.epochs_to_target).collect(),
    };
    let p = common.out.join("result.json");
    write(&p, &to_json(&report)?)?;
    m.outputs.push(p);
    m.append(&common.out)?;
    println!(
        "{} {}: {:.4} +- {:.4} over {} trial(s)",
        report.result.task,
        report.result.metric,
        report.result.mean,
        report.result.std,
        s.ft.trials
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct ArmSummary {
    arm: String,
    means: Vec<(f64, f64)>,
    /// Smallest fraction matching the random arm at full labels.
    matches_random_at: Option<f64>,
}

pub fn sweep(
    common: &Common,
    arms: &str,
    fractions: Option<String>,
    trials: Option<usize>,
    task: Option<String>,
    linear_probe: bool,
    ckpts: &[String],
) -> CliResult<()> {
    let flags = [
        flag("fractions", fractions),
        flag("trials", trials),
        flag("task", task),
        switch("linear_probe", linear_probe),
    ];
    let s = settings::load(common, &flags)?;
    let names: Vec<String> = arms
        .split(',')
        .map(|a| a.trim().to_string())
        .filter(|a| !a.is_empty())
        .collect();
    if names.is_empty() {
        return Err(CliError::Validation("--arms is empty".into()));
    }
    let mut given: Vec<(String, PathBuf)> = Vec::new();
    for c in ckpts {
        let (arm, path) = c
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--ckpt expects ARM=PATH, got `{c}`")))?;
        if !names.iter().any(|n| n == arm) {
            return Err(CliError::Validation(format!(
                "--ckpt names arm `{arm}` missing from --arms"
            )));
        }
        given.push((arm.into(), path.into()));
    }
    let mut modes = Vec::new();
    for n in &names {
        let mode: PretrainArm = n
            .parse()
            .map_err(|e: TowerError| CliError::Validation(format!("--arms: {e}")))?;
        modes.push(mode);
    }
    let data = load_data(&s)?;
    create_dir(&common.out)?;
    let mut m = RunManifest::new("sweep", Some(&s));
    m.dataset_hash = Some(dataset_hash(&data));

    let mut models = Vec::new();
    for (name, mode) in names.iter().zip(&modes) {
        if let Some((_, path)) = given.iter().find(|(a, _)| a == name) {
            models.push(load_model(path)?);
            continue;
        }
        let dir = common.out.join("arms").join(name);
        let mut cfg = s.train.clone();
        cfg.mode = *mode;
        let out = run_pretrain(&cfg, &data, Some(&dir))?;
        m.outputs.push(dir.join("best.ckpt"));
        models.push((out.net, out.state));
    }
    let arm_refs: Vec<Arm<'_, f32>> = names
        .iter()
        .zip(&models)
        .map(|(n, (net, st))| Arm {
            name: n.clone(),
            net,
            state: st,
        })
        .collect();
    let rows = label_fraction_sweep(&arm_refs, &s.ft.fractions, &data, &s.ft, s.ft.trials)?;
    let p = common.out.join("sweep.csv");
    write(&p, &sweep_csv(&rows))?;
    m.outputs.push(p);

    let random_name = names
        .iter()
        .zip(&modes)
        .find(|(_, &a)| a == PretrainArm::Random)
        .map(|(n, _)| n.as_str());
    let summary: Vec<ArmSummary> = names
        .iter()
        .map(|n| ArmSummary {
            arm: n.clone(),
            means: s
                .ft
                .fractions
                .iter()
                .filter_map(|&f| sweep_mean(&rows, n, f).map(|v| (f, v)))
                .collect(),
            matches_random_at: random_name.and_then(|r| matching_fraction(&rows, n, r)),
        })
        .collect();
    let p = common.out.join("summary.json");
    write(&p, &to_json(&summary)?)?;
    m.outputs.push(p);
    m.append(&common.out)?;
    for a in &summary {
        let means: Vec<String> = a.means.iter().map(|(f, v)| format!("{f}:{v:.4}")).collect();
        println!("{}: {}", a.arm, means.join(" "));
    }
    println!(
        "{} rows written to {}",
        rows.len(),
        common.out.join("sweep.csv").display()
    );
    Ok(())
}

pub fn transform_preview(common: &Common, mode: Option<String>, n: usize) -> CliResult<()> {
    let s = settings::load(common, &[flag("mode", mode)])?;
    let Some(proxy) = s.train.mode.proxy_mode() else {
        return Err(CliError::Validation(format!(
            "mode `{}` applies no transform",
            s.train.mode
        )));
    };
    let data = load_data(&s)?;
    if n == 0 || n > data.len() {
        return Err(CliError::Validation(format!(
            "--n must lie in 1..={} for this dataset",
            data.len()
        )));
    }
    let (h, w, c) = data.shape().expect("non-empty");
    let aug = s.train.augment(h, w, c);
    create_dir(&common.out)?;
    let mut m = RunManifest::new("transform-preview", Some(&s));
    m.dataset_hash = Some(dataset_hash(&data));
    for i in 0..n {
        let img = &data.images[i];
        let plan = sample_plan(
            &mut rng_from_seed(derive_seed(s.train.seed, &[5, i as u64])),
            proxy,
            i as u64,
            &aug,
        );
        let mut translation_only = plan.clone();
        translation_only.mask_spec = None;
        translation_only.classic_ops.clear();
        let translated = apply_plan(img, &translation_only)?;
        let view = apply_plan(img, &plan)?;
        for (tag, im) in [
            ("original", img),
            ("translated", &translated),
            ("masked", &view),
        ] {
            let p = common.out.join(format!("preview_{i:03}_{tag}.png"));
            write_png(&p, im)?;
            m.outputs.push(p);
        }
        if let Some(spec) = &plan.mask_spec {
            let mask = generate_mask(img, spec, &mut rng_from_seed(plan.mask_seed))?;
            let p = common.out.join(format!("preview_{i:03}_mask.png"));
            write_mask_png(&p, mask.bits(), mask.height(), mask.width())?;
            m.outputs.push(p);
        }
        let p = common.out.join(format!("preview_{i:03}_plan.json"));
        write(&p, &to_json(&plan)?)?;
        m.outputs.push(p);
    }
    m.append(&common.out)?;
    println!("{n} preview set(s) written to {}", common.out.display());
    Ok(())
}

pub fn export_embeddings(common: &Common, ckpt: &Path) -> CliResult<()> {
    let s = settings::load(common, &[])?;
    let (net, st) = load_model(ckpt)?;
    let data = load_data(&s)?;
    create_dir(&common.out)?;
    let p = common.out.join("embeddings.csv");
    write(&p, &embeddings_csv(&net, &st, &data)?)?;
    let mut m = RunManifest::new("export-embeddings", Some(&s));
    m.dataset_hash = Some(dataset_hash(&data));
    m.outputs.push(p.clone());
    m.append(&common.out)?;
    println!("{} embeddings written to {}", data.len(), p.display());
    Ok(())
}

fn collect_csvs(path: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| {
                CliError::Runtime(TowerError::File {
                    path: path.into(),
                    source: e,
                })
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            collect_csvs(&e, out)?;
        }
    } else if path.extension().is_some_and(|e| e == "csv") {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn report(out: &Path, inputs: &[PathBuf]) -> CliResult<()> {
    // (display name, file); names are relative to a directory input
    let mut files = Vec::new();
    for i in inputs {
        if !i.exists() {
            return Err(CliError::Validation(format!(
                "input {} not found",
                i.display()
            )));
        }
        let mut found = Vec::new();
        collect_csvs(i, &mut found)?;
        for f in found {
            let name = if i.is_dir() {
                f.strip_prefix(i).unwrap_or(&f).to_path_buf()
            } else {
                PathBuf::from(f.file_name().unwrap_or_default())
            };
            files.push((name.display().to_string(), f));
        }
    }
    create_dir(out)?;
    let mut m = RunManifest::new("report", None);
    for (title, f) in &files {
        let text = fs::read_to_string(f).map_err(|e| {
            CliError::Runtime(TowerError::File {
                path: f.clone(),
                source: e,
            })
        })?;
        // embeddings are not line data; header-only files have nothing to draw
        if text.starts_with("id,") || text.lines().filter(|l| !l.trim().is_empty()).count() < 2 {
            continue;
        }
        let svg = render_csv(title, &text)?;
        let stem: String = title
            .trim_end_matches(".csv")
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let p = out.join(format!("{stem}.svg"));
        write(&p, &svg)?;
        m.outputs.push(p);
    }
    if m.outputs.is_empty() {
        return Err(CliError::Validation(
            "no chartable CSV among the inputs".into(),
        ));
    }
    m.append(out)?;
    println!("{} chart(s) written to {}", m.outputs.len(), out.display());
    Ok(())
}
