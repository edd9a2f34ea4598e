use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use omnifuse_core::dataspec::{
    generate_synthetic, load_dataset, save_dataset, stratified_split, write_latent_sidecar, AccessMode, DatasetManifest,
    SyntheticConfig,
};
use omnifuse_core::training::{
    derive_seed, evaluate, finetune, label_subset, linear_probe, load_checkpoint, pretrain, save_checkpoint, Checkpoint,
    EpochRecord, F1Report, MetricsLog, Model, ModelConfig, Phase, TrainConfig, TrainState,
};
use omnifuse_core::Error;

use crate::settings::{self, default_splits};
use crate::{CliError, EvalArgs, GenArgs, TrainArgs};

fn required(flag: Option<PathBuf>, file: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or(file).ok_or_else(|| CliError::Config(format!("--{what} is required (flag or `{what}` in the run file)")))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

pub fn gen_data(a: &GenArgs) -> Result<(), CliError> {
    let file = settings::read_file(a.config.as_deref())?;
    let mut synth: SyntheticConfig = settings::layer(&SyntheticConfig::default(), &file.generate, "generate")?;
    if let Some(n) = a.tiles {
        synth.num_tiles = n;
    }
    if let Some(k) = a.classes {
        synth.num_classes = k;
    }
    let out = required(a.out.clone(), file.out, "out")?;
    let shares = file.splits.unwrap_or_else(default_splits);
    let ds = generate_synthetic(&synth, a.seed)?;
    let labels: Vec<Option<Vec<u8>>> =
        ds.tiles.iter().map(|t| t.labels().map(|l| l.map(<[u8]>::to_vec))).collect::<Result<_, Error>>()?;
    let manifest = stratified_split(&ds.manifest, &labels, &shares, a.seed)?;
    save_dataset(&manifest, &ds.tiles, &out)?;
    write_latent_sidecar(&out, &ds.latent)?;
    let sizes: Vec<String> = manifest.splits.iter().map(|(k, v)| format!("{k} {}", v.len())).collect();
    println!("wrote {} tiles ({}) to {}", ds.tiles.len(), sizes.join(", "), out.display());
    Ok(())
}

struct Resolved {
    cfg: TrainConfig,
    data: PathBuf,
    out: PathBuf,
}

fn resolve(a: &TrainArgs, base: TrainConfig, phase: Phase) -> Result<Resolved, CliError> {
    let file = settings::read_file(a.config.as_deref())?;
    let mut cfg: TrainConfig = settings::layer(&base, &file.train, "train")?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        match phase {
            Phase::Pretrain => cfg.pretrain_epochs = e,
            Phase::Finetune | Phase::Probe => cfg.finetune_epochs = e,
        }
    }
    if let Some(lr) = a.lr {
        match phase {
            Phase::Pretrain => cfg.pretrain_lr = lr,
            Phase::Finetune => cfg.finetune_lr = lr,
            Phase::Probe => cfg.probe_lr = lr,
        }
    }
    if let Some(b) = a.batch_tiles {
        cfg.batch_tiles = b;
    }
    if let Some(f) = a.labels_fraction {
        cfg.label_fraction = f;
    }
    if let Some(m) = &a.modalities {
        cfg.modalities = m.clone();
    }
    if let Some(d) = a.d {
        cfg.d = d;
    }
    if let Some(b) = a.blocks {
        cfg.blocks = b;
    }
    if let Some(h) = a.heads {
        cfg.heads = h;
    }
    cfg.record_wall_time |= a.wall_time;
    for name in &a.ablate {
        cfg.ablate(name)?;
    }
    cfg.validate()?;
    Ok(Resolved { cfg, data: required(a.data.clone(), file.data, "data")?, out: required(a.out.clone(), file.out, "out")? })
}

fn check_architecture(found: &ModelConfig, expected: &ModelConfig) -> Result<(), CliError> {
    if found == expected {
        return Ok(());
    }
    Err(Error::ConfigMismatch { stored: serde_json::to_string(found).unwrap(), expected: serde_json::to_string(expected).unwrap() }
        .into())
}

fn load_phase(path: &Path, phase: Phase) -> Result<Checkpoint, CliError> {
    let ck = load_checkpoint(path)?;
    if ck.state.phase != phase {
        return Err(CliError::Config(format!(
            "{} holds a {} run; --resume needs a {} checkpoint",
            path.display(),
            ck.state.phase.as_str(),
            phase.as_str()
        )));
    }
    Ok(ck)
}

fn progress(r: &EpochRecord) {
    let mut line = format!("{} epoch {:>3} loss {:.5}", r.phase, r.epoch, r.loss_total);
    if let (Some(c), Some(m)) = (r.loss_con, r.loss_mae) {
        line += &format!(" (con {c:.5}, mae {m:.5})");
    }
    if let Some(v) = r.val_loss {
        line += &format!(" val {v:.5}");
    }
    if let Some(f) = r.f1_weighted {
        line += &format!(" wF1 {f:.4}");
    }
    eprintln!("{line} lr {:.1e}", r.lr);
}

/// Runs `train` with a hook that logs metrics and writes `last.omnf`
/// every epoch and `best.omnf` on every validation improvement.
fn with_artifacts<F>(out: &Path, cfg: &TrainConfig, resumed: bool, train: F) -> Result<(), CliError>
where
    F: FnOnce(&mut omnifuse_core::training::EpochHook) -> Result<(), Error>,
{
    create_dir(out)?;
    write(&out.join("config.toml"), settings::effective_toml(cfg)?)?;
    let metrics = out.join("metrics.jsonl");
    let mut log = if resumed { MetricsLog::append(&metrics)? } else { MetricsLog::create(&metrics)? };
    let (last, best) = (out.join("last.omnf"), out.join("best.omnf"));
    let mut hook = |r: &EpochRecord, m: &Model, s: &TrainState, improved: bool| {
        log.write(r)?;
        progress(r);
        save_checkpoint(&last, m, s, cfg)?;
        if improved {
            save_checkpoint(&best, m, s, cfg)?;
        }
        Ok(())
    };
    train(&mut hook)?;
    Ok(())
}

fn open_dataset(path: &Path) -> Result<(DatasetManifest, omnifuse_core::dataspec::DatasetReader), CliError> {
    Ok(load_dataset(path)?)
}

pub fn pretrain_cmd(a: &TrainArgs) -> Result<(), CliError> {
    if a.from.is_some() {
        return Err(CliError::Config("pretraining starts fresh; use --resume to continue a run".into()));
    }
    let resume = a.resume.as_deref().map(|p| load_phase(p, Phase::Pretrain)).transpose()?;
    let base = resume.as_ref().map_or_else(TrainConfig::default, |ck| ck.train_config.clone());
    let r = resolve(a, base, Phase::Pretrain)?;
    let (manifest, reader) = open_dataset(&r.data)?;
    let mc = r.cfg.model_config(&manifest)?;
    let resumed = resume.is_some();
    let (mut model, mut state) = match resume {
        Some(ck) => {
            check_architecture(&ck.model.config, &mc)?;
            (ck.model, ck.state)
        }
        None => {
            let m = Model::new(mc, r.cfg.seed)?;
            let s = TrainState::new(&m, Phase::Pretrain, &r.cfg);
            (m, s)
        }
    };
    // Pretraining never sees labels.
    let unlabeled = reader.with_mode(AccessMode::Unlabeled);
    let train = unlabeled.split_tiles("train")?;
    let val = if manifest.splits.contains_key("val") { unlabeled.split_tiles("val")? } else { Vec::new() };
    let cfg = r.cfg.clone();
    with_artifacts(&r.out, &cfg, resumed, |hook| pretrain(&mut model, &mut state, &train, &val, &cfg, hook))?;
    save_checkpoint(&r.out.join("pretrain.omnf"), &model, &state, &cfg)?;
    println!("pretraining finished after {} epochs; checkpoints in {}", state.epoch, r.out.display());
    Ok(())
}

pub fn finetune_cmd(a: &TrainArgs, probe: bool) -> Result<(), CliError> {
    let phase = if probe { Phase::Probe } else { Phase::Finetune };
    if probe && a.from.is_none() && a.resume.is_none() {
        return Err(CliError::Config("probing needs a trained backbone; pass --from".into()));
    }
    let resume = a.resume.as_deref().map(|p| load_phase(p, phase)).transpose()?;
    let from = a.from.as_deref().map(load_checkpoint).transpose()?;
    let base = resume.as_ref().or(from.as_ref()).map_or_else(TrainConfig::default, |ck| ck.train_config.clone());
    let r = resolve(a, base, phase)?;
    let (manifest, reader) = open_dataset(&r.data)?;
    let mc = r.cfg.model_config(&manifest)?;
    let resumed = resume.is_some();
    let (mut model, mut state) = match (resume, from) {
        (Some(ck), _) => {
            check_architecture(&ck.model.config, &mc)?;
            (ck.model, ck.state)
        }
        (None, Some(ck)) => {
            check_architecture(&ck.model.config, &mc)?;
            let s = TrainState::new(&ck.model, phase, &r.cfg);
            (ck.model, s)
        }
        (None, None) => {
            let m = Model::new(mc, r.cfg.seed)?;
            let s = TrainState::new(&m, phase, &r.cfg);
            (m, s)
        }
    };
    let train = reader.split_tiles("train")?;
    let labeled = label_subset(&train, r.cfg.label_fraction, derive_seed(r.cfg.seed, &[6]))?;
    let val = reader.split_tiles("val")?;
    let cfg = r.cfg.clone();
    with_artifacts(&r.out, &cfg, resumed, |hook| {
        if probe {
            linear_probe(&mut model, &mut state, &labeled, &val, &cfg, hook)
        } else {
            finetune(&mut model, &mut state, &labeled, &val, &cfg, hook)
        }
    })?;
    let name = format!("{}.omnf", phase.as_str());
    save_checkpoint(&r.out.join(&name), &model, &state, &cfg)?;
    println!(
        "{} finished after {} epochs on {} labeled tiles; best model in {}",
        phase.as_str(),
        state.epoch,
        labeled.len(),
        r.out.join(name).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    split: &'a str,
    modalities: Vec<String>,
    loss: f64,
    report: &'a F1Report,
}

pub fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.from)?;
    let file = settings::read_file(a.config.as_deref())?;
    let mut cfg: TrainConfig = settings::layer(&ck.train_config, &file.train, "train")?;
    if let Some(m) = &a.modalities {
        cfg.modalities = m.clone();
    }
    cfg.validate()?;
    let data = required(a.data.clone(), file.data, "data")?;
    let (manifest, reader) = open_dataset(&data)?;
    check_architecture(&ck.model.config, &cfg.model_config(&manifest)?)?;
    let tiles = reader.split_tiles(&a.split)?;
    let (loss, report) = evaluate(&ck.model, &tiles, &cfg)?;
    let modalities: Vec<String> =
        cfg.selected_modalities(&manifest.modalities)?.into_iter().map(|s| s.name).collect();
    println!(
        "{} ({} tiles, modalities {}): loss {loss:.5}, weighted F1 {:.4}, macro F1 {:.4}, micro F1 {:.4}",
        a.split,
        tiles.len(),
        modalities.join("+"),
        report.weighted_f1,
        report.macro_f1,
        report.micro_f1
    );
    if let Some(out) = a.out.clone().or(file.out) {
        create_dir(&out)?;
        let body = EvalOutput { checkpoint: &a.from, split: &a.split, modalities, loss, report: &report };
        write(&out.join("eval.json"), serde_json::to_vec_pretty(&body).map_err(Error::from)?)?;
        let record = EpochRecord {
            epoch: ck.state.epoch,
            phase: "eval".into(),
            loss_total: loss,
            loss_con: None,
            loss_mae: None,
            lr: 0.0,
            f1_weighted: Some(report.weighted_f1),
            f1_macro: Some(report.macro_f1),
            f1_micro: Some(report.micro_f1),
            wall_s: 0.0,
            val_loss: None,
        };
        MetricsLog::append(&out.join("metrics.jsonl"))?.write(&record)?;
    }
    Ok(())
}
