//! Implementations of the six subcommands. Each command resolves its
//! configuration (flags > config file > defaults), performs the work through
//! the library crate, and echoes the resolved configuration into
//! `run_manifest.txt` in its output directory so the run can be repeated
//! from the manifest alone.

use std::fs;
use std::path::Path;

use cycleseg::data::{
    generate_phantom, load_sequence, save_sequence, Grid3, PatientSequence, PhantomConfig,
};
use cycleseg::harness;
use cycleseg::metrics::{self, MetricsReport};
use cycleseg::network::{self, NetworkConfig};
use cycleseg::ssl::{self, TrainingConfig};
use cycleseg::topo::{SurfaceMode, TCRConfig};
use cycleseg::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::cli::{
    AblationArgs, CheckArgs, EvalArgs, PhantomArgs, PredictArgs, TrainArgs,
};
use crate::config::{resolve_output_root, FileConfig, Resolver};
use crate::plot;

/// Patient roster and split written next to the generated data.
#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    n_patients: usize,
    grid: usize,
    phases: usize,
    seed: u64,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn write_run_manifest(out: &Path, resolver: &Resolver) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("run_manifest.txt"), resolver.manifest())?;
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::MissingInput(format!(
            "{what} directory {} not found",
            path.display()
        )));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingInput(format!(
            "{what} {} not found",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

pub fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut r = Resolver::new(&file);
    let d = PhantomConfig::default();

    let out = resolve_output_root(&r.required_path("out", args.out.as_deref())?);
    let cfg = PhantomConfig {
        n_patients: r.value("patients", args.patients, d.n_patients)?,
        grid_size: r.value("grid", args.grid, d.grid_size)?,
        n_phases: r.value("phases", args.phases, d.n_phases)?,
        seed: r.value("seed", args.seed, d.seed)?,
        deformation_amplitude: r.value("amplitude", args.amplitude, d.deformation_amplitude)?,
        noise_level: r.value("noise", args.noise, d.noise_level)?,
        target_volume_tolerance: r.value(
            "volume_tolerance",
            args.volume_tolerance,
            d.target_volume_tolerance,
        )?,
    };
    let train_frac = r.value("train_frac", args.train_frac, 0.6667)?;
    let val_frac = r.value("val_frac", args.val_frac, 0.1111)?;
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&val_frac)
        || train_frac + val_frac > 1.0
    {
        return Err(Error::config(format!(
            "split fractions train={train_frac} val={val_frac} must be in [0,1] and sum to <= 1"
        )));
    }

    let patients = generate_phantom(&cfg)?;
    for seq in &patients {
        save_sequence(seq, &out.join(&seq.patient_id))?;
    }

    let ids: Vec<String> = patients.iter().map(|s| s.patient_id.clone()).collect();
    let n = ids.len();
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train);
    let manifest = DatasetManifest {
        n_patients: n,
        grid: cfg.grid_size,
        phases: cfg.n_phases,
        seed: cfg.seed,
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    fs::create_dir_all(&out)?;
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    write_run_manifest(&out, &r)?;
    println!(
        "wrote {n} patients ({} train / {} val / {} test) to {}",
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Sorted patient directories under `data`, partitioned by the dataset
/// manifest when present, else by the given fractions.
fn load_split(
    data: &Path,
    train_frac: f64,
    val_frac: f64,
) -> Result<(Vec<PatientSequence>, Vec<PatientSequence>)> {
    require_dir(data, "dataset")?;
    let manifest_path = data.join("manifest.json");
    let (train_ids, val_ids): (Vec<String>, Vec<String>) = if manifest_path.is_file() {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        (m.train, m.val)
    } else {
        let mut ids: Vec<String> = fs::read_dir(data)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("meta.json").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        let n = ids.len();
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train);
        let val = ids.split_off(n_train.min(n));
        (ids, val.into_iter().take(n_val).collect())
    };
    if train_ids.is_empty() {
        return Err(Error::MissingInput(format!(
            "no training patients under {}",
            data.display()
        )));
    }
    let load_all = |ids: &[String]| -> Result<Vec<PatientSequence>> {
        ids.iter().map(|id| load_sequence(&data.join(id))).collect()
    };
    Ok((load_all(&train_ids)?, load_all(&val_ids)?))
}

/// Mean Dice (percent) of thresholded predictions against every phase that
/// has ground truth, across the given patients.
fn mean_dice_pct(
    params: &network::Parameters,
    net_cfg: &NetworkConfig,
    patients: &[PatientSequence],
    enable_mcl: bool,
    topk: usize,
    capacity: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for seq in patients {
        let probs = ssl::predict_sequence(params, net_cfg, seq, enable_mcl, topk, capacity)?;
        for (prob, phase) in probs.iter().zip(&seq.phases) {
            if let Some(gt) = &phase.label {
                sum += metrics::dice(&ssl::probability_to_mask(prob), gt)?;
                n += 1;
            }
        }
    }
    Ok(100.0 * sum / n.max(1) as f64)
}

struct ResolvedTrain {
    net: NetworkConfig,
    train: TrainingConfig,
}

/// Shared by train / predict-style commands: every network and training
/// knob as config keys.
fn resolve_training(r: &mut Resolver, args: &TrainArgs) -> Result<ResolvedTrain> {
    let dn = NetworkConfig::default();
    let net = NetworkConfig {
        base_channels: r.value("base_channels", args.base_channels, dn.base_channels)?,
        n_levels: r.value("levels", args.levels, dn.n_levels)?,
        key_channels: r.value("key_channels", args.key_channels, dn.key_channels)?,
        value_channels: r.value("value_channels", args.value_channels, dn.value_channels)?,
        readout_levels: r.usize_list(
            "readout_levels",
            args.readout_levels.as_deref(),
            &dn.readout_levels,
        )?,
    };
    let dt = TrainingConfig::default();
    let surface_mode = {
        let text = r.value(
            "surface_mode",
            args.surface_mode.clone(),
            match dt.tcr.surface_mode {
                SurfaceMode::RawMass => "raw".to_string(),
                SurfaceMode::Normalized => "normalized".to_string(),
            },
        )?;
        match text.as_str() {
            "raw" => SurfaceMode::RawMass,
            "normalized" => SurfaceMode::Normalized,
            other => {
                return Err(Error::config(format!(
                    "surface_mode must be raw or normalized, got {other:?}"
                )))
            }
        }
    };
    let tcr = TCRConfig {
        lambda: r.value("lambda", args.lambda, dt.tcr.lambda)?,
        epsilon: r.value("epsilon", args.epsilon, dt.tcr.epsilon)?,
        tau: r.value("tau", args.tau, dt.tcr.tau)?,
        surface_mode,
        detach_reference: r.switch(
            "detach_reference",
            args.detach_reference.as_deref(),
            dt.tcr.detach_reference,
        )?,
    };
    let train = TrainingConfig {
        epochs: r.value("epochs", args.epochs, dt.epochs)?,
        seed: r.value("seed", args.seed, dt.seed)?,
        learning_rate: r.value("lr", args.lr, dt.learning_rate)?,
        lr_decay_factor: r.value("lr_decay", args.lr_decay, dt.lr_decay_factor)?,
        lr_decay_every: r.value("lr_decay_every", args.lr_decay_every, dt.lr_decay_every)?,
        ema_alpha: r.value("alpha", args.alpha, dt.ema_alpha)?,
        beta_max: r.value("beta_max", args.beta_max, dt.beta_max)?,
        ramp_fraction: r.value("ramp", args.ramp, dt.ramp_fraction)?,
        sigma: r.value("sigma", args.sigma, dt.sigma)?,
        topk: r.value("topk", args.topk, dt.topk)?,
        bank_capacity: r.value("capacity", args.capacity, dt.bank_capacity)?,
        steps_per_patient: r.value(
            "steps_per_patient",
            args.steps_per_patient,
            dt.steps_per_patient,
        )?,
        enable_mcl: r.switch("mcl", args.mcl.as_deref(), dt.enable_mcl)?,
        enable_tcr: r.switch("tcr", args.tcr.as_deref(), dt.enable_tcr)?,
        soft_pseudo_labels: r.switch(
            "soft_labels",
            args.soft_labels.as_deref(),
            dt.soft_pseudo_labels,
        )?,
        grad_clip: r.value("grad_clip", args.grad_clip, dt.grad_clip)?,
        tcr,
    };
    train.validate()?;
    Ok(ResolvedTrain { net, train })
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut r = Resolver::new(&file);

    let data = r.required_path("data", args.data.as_deref())?;
    let out = resolve_output_root(&r.required_path("out", args.out.as_deref())?);
    let train_frac = r.value("train_frac", args.train_frac, 1.0)?;
    let val_frac = r.value("val_frac", args.val_frac, 0.0)?;
    let resolved = resolve_training(&mut r, args)?;
    let (net_cfg, cfg) = (resolved.net, resolved.train);

    let (train_set, val_set) = load_split(&data, train_frac, val_frac)?;
    fs::create_dir_all(&out)?;
    write_run_manifest(&out, &r)?;

    println!(
        "training on {} patients ({} validation), {} epochs, memory {}, topology {}",
        train_set.len(),
        val_set.len(),
        cfg.epochs,
        if cfg.enable_mcl { "on" } else { "off" },
        if cfg.enable_tcr { "on" } else { "off" },
    );

    let steps_per_epoch = (train_set.len() * cfg.steps_per_patient) as u64;
    let best_path = out.join("checkpoint_best.bin");
    let mut best_val = f64::NEG_INFINITY;
    let mut val_rows = String::from("epoch,val_dice_pct\n");
    let outcome = {
        let (net_for_hook, cfg_for_hook) = (net_cfg.clone(), cfg.clone());
        let val_set = &val_set;
        let best_val = &mut best_val;
        let val_rows = &mut val_rows;
        let best_path = &best_path;
        ssl::train(&train_set, &net_cfg, &cfg, move |epoch, params| {
            if val_set.is_empty() {
                return Ok(());
            }
            let dice = mean_dice_pct(
                params,
                &net_for_hook,
                val_set,
                cfg_for_hook.enable_mcl,
                cfg_for_hook.topk,
                cfg_for_hook.bank_capacity,
            )?;
            val_rows.push_str(&format!("{epoch},{dice}\n"));
            if dice > *best_val {
                *best_val = dice;
                network::save_checkpoint(
                    best_path,
                    params,
                    &net_for_hook,
                    (epoch as u64 + 1) * steps_per_epoch,
                )?;
            }
            Ok(())
        })?
    };

    let total_steps = (cfg.epochs as u64) * steps_per_epoch;
    network::save_checkpoint(&out.join("checkpoint_last.bin"), &outcome.student, &net_cfg, total_steps)?;
    if val_set.is_empty() {
        // no validation signal: best defaults to the final parameters
        network::save_checkpoint(&best_path, &outcome.student, &net_cfg, total_steps)?;
    } else {
        fs::write(out.join("val_dice.csv"), &val_rows)?;
    }
    fs::write(out.join("loss.csv"), ssl::loss_csv(&outcome.reports))?;

    if let Some(last) = outcome.reports.last() {
        println!(
            "finished: final total loss {:.6}, supervised {:.6}",
            last.l_total, last.l_sup
        );
    }
    if best_val.is_finite() {
        println!("best validation dice: {best_val:.2} pct");
    }
    println!("checkpoints and loss trace in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut r = Resolver::new(&file);

    let checkpoint = r.required_path("checkpoint", args.checkpoint.as_deref())?;
    let sequence = r.required_path("sequence", args.sequence.as_deref())?;
    let out = resolve_output_root(&r.required_path("out", args.out.as_deref())?);
    let dt = TrainingConfig::default();
    // boolean flags override only when given; otherwise the file decides
    let enable_mcl = r.switch(
        "mcl",
        args.no_mcl.then_some("off"),
        dt.enable_mcl,
    )?;
    let probabilities = r.switch(
        "probabilities",
        args.probabilities.then_some("on"),
        false,
    )?;
    let topk = r.value("topk", args.topk, dt.topk)?;
    let capacity = r.value("capacity", args.capacity, dt.bank_capacity)?;

    require_file(&checkpoint, "checkpoint")?;
    require_dir(&sequence, "sequence")?;
    let (params, net_cfg, _step) = network::load_checkpoint(&checkpoint)?;
    let seq = load_sequence(&sequence)?;

    let probs = ssl::predict_sequence(&params, &net_cfg, &seq, enable_mcl, topk, capacity)?;
    fs::create_dir_all(&out)?;
    write_run_manifest(&out, &r)?;
    for (t, prob) in probs.iter().enumerate() {
        let mask = ssl::probability_to_mask(prob);
        fs::write(out.join(format!("mask_{t}.raw")), mask.data())?;
        if probabilities {
            let mut buf = Vec::with_capacity(prob.numel() * 4);
            for &v in prob.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            fs::write(out.join(format!("prob_{t}.raw")), buf)?;
        }
    }
    println!(
        "wrote {} masks{} to {}",
        probs.len(),
        if probabilities {
            " and probability maps"
        } else {
            ""
        },
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn load_masks(dir: &Path, seq: &PatientSequence) -> Result<Vec<Grid3<u8>>> {
    require_dir(dir, "predictions")?;
    let shape = seq.phases[0].intensities.shape();
    let numel = shape[0] * shape[1] * shape[2];
    let mut masks = Vec::with_capacity(seq.n_phases());
    for t in 0..seq.n_phases() {
        let path = dir.join(format!("mask_{t}.raw"));
        require_file(&path, "prediction mask")?;
        let bytes = fs::read(&path)?;
        if bytes.len() != numel {
            return Err(Error::config(format!(
                "{}: expected {numel} bytes for shape {shape:?}, found {}",
                path.display(),
                bytes.len()
            )));
        }
        if let Some(bad) = bytes.iter().find(|&&b| b > 1) {
            return Err(Error::config(format!(
                "{}: mask bytes must be 0 or 1, found {bad}",
                path.display()
            )));
        }
        masks.push(Grid3::new(shape, bytes));
    }
    Ok(masks)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut r = Resolver::new(&file);

    let predictions = r.required_path("predictions", args.predictions.as_deref())?;
    let data = r.required_path("data", args.data.as_deref())?;
    let out = resolve_output_root(&r.required_path("out", args.out.as_deref())?);
    let label = r.value("label", args.label.clone(), "current".to_string())?;
    let compare = r.optional_path("compare", args.compare.as_deref());
    let compare_label = r.value(
        "compare_label",
        args.compare_label.clone(),
        "reference".to_string(),
    )?;

    require_dir(&data, "ground-truth")?;
    let seq = load_sequence(&data)?;
    let masks = load_masks(&predictions, &seq)?;
    let report = metrics::evaluate_sequence(&masks, &seq)?;

    fs::create_dir_all(&out)?;
    write_run_manifest(&out, &r)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("dice_curve.svg"), plot::dice_curve_svg(&report))?;

    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!(
        "{}: all-phases dice {:.2} pct, hd95 {} mm, conformity {} pct",
        seq.patient_id,
        report.all_phases.dice_pct,
        fmt_opt(report.all_phases.hd95_mm),
        fmt_opt(report.all_phases.conformity_pct),
    );

    if let Some(compare_path) = compare {
        require_file(&compare_path, "comparison report")?;
        let other = MetricsReport::from_json(&fs::read_to_string(&compare_path)?)?;
        let table = metrics::comparison_table(&compare_label, &other, &label, &report);
        fs::write(out.join("comparison.txt"), &table)?;
        println!("\n{table}");
    }
    println!("report files in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// check / ablation
// ---------------------------------------------------------------------------

pub fn cmd_check(args: &CheckArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(17);
    let mut rows = harness::run_gradient_checks(seed);
    rows.extend(harness::run_oracle_suite());

    let mut missing = harness::missing_checks(&rows);
    missing.retain(|n| !harness::ablation_check_names().contains(n));

    print!("{}", harness::results_table(&rows));
    if let Some(path) = &args.json {
        let path = resolve_output_root(path);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(&path, harness::results_json(&rows))?;
        println!("results written to {}", path.display());
    }

    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "checks declared but not produced: {missing:?}"
        )));
    }
    if !failed.is_empty() {
        // the table above carries the numbers; the error names the failures
        return Err(Error::Numeric {
            step: 0,
            detail: format!("checks failed: {failed:?}"),
        });
    }
    println!("{} checks passed", rows.len());
    Ok(())
}

pub fn cmd_ablation(args: &AblationArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(harness::ABLATION_SEED);
    let out = resolve_output_root(args.out.as_deref().unwrap_or(Path::new(".")));
    let report = harness::run_ablation_benchmark(seed)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("ablation.json"), report.to_json())?;
    let table = report.human_table();
    fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    let checks = report.checks();
    if checks.iter().any(|c| !c.pass) {
        return Err(Error::Numeric {
            step: 0,
            detail: "ablation ordering or margin violated; see report above".into(),
        });
    }
    println!("ablation benchmark passed");
    Ok(())
}

/// stderr diagnostic for a failed run; the numeric case carries the step so
/// diverging runs can be lined up against the loss trace.
pub fn describe_failure(err: &Error) -> String {
    match err {
        Error::Numeric { step, detail } => {
            format!("numeric failure at step {step}: {detail}")
        }
        other => other.to_string(),
    }
}
