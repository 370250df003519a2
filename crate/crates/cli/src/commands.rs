use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use lfod_core::diffusion::DenoiseConfig;
use lfod_core::features::{read_feature_file, write_feature_file, SetLabel, FEATURE_MAGIC};
use lfod_core::metrics::{auroc, fpr95, ScoredSet};
use lfod_core::scoring::{
    classify, format_sig9, read_scores_csv, write_scores_csv, Head, ScoreOptions, Scorer,
};
use lfod_core::synth::{synth_benchmark, SynthParams};
use lfod_core::trainer::{
    sha256_hex, split_checkpoint, train as train_model, Checkpoint, CHECKPOINT_MAGIC,
};
use serde::Serialize;

use crate::config::{parse_exponent, parse_heads, parse_stride, RunConfig};
use crate::failure::{io_failure, Failure, EXIT_CHECKPOINT};
use crate::{ScoreArgs, SynthArgs};

pub const INITIAL_CKPT: &str = "ckpt_epoch0001.lfdn";
pub const FINAL_CKPT: &str = "ckpt_final.lfdn";
pub const LOSS_HISTORY: &str = "loss_history.csv";

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    p.ok_or_else(|| Failure::config(format!("no {what} given (flag or config file)")))
}

fn file_sha256(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn train(
    config: Option<&Path>,
    features: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let cfg = RunConfig::load_opt(config)?;
    let features = required(features.or(cfg.paths.features.clone()), "feature file")?;
    let out = required(out.or(cfg.paths.out.clone()), "output directory")?;
    let seed = seed.or(cfg.seed).unwrap_or(0);

    let data = read_feature_file(&features)?;
    let model = cfg.model_config(data.layout().total_dim());
    let train_cfg = cfg.train_config(seed);
    log::info!(
        "training on {} records of width {} for {} epochs",
        data.len(),
        model.input_dim,
        train_cfg.epochs
    );
    let outcome = train_model(&data, model, cfg.schedule(), &train_cfg)?;

    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let mut stdout = io::stdout().lock();
    for (name, ck) in [
        (INITIAL_CKPT, &outcome.initial),
        (FINAL_CKPT, &outcome.final_ckpt),
    ] {
        let path = out.join(name);
        ck.save(&path)?;
        let _ = writeln!(stdout, "{name} sha256={}", file_sha256(&path)?);
    }
    let path = out.join(LOSS_HISTORY);
    let mut text = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_history.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, format_sig9(*l)));
    }
    fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load_opt(args.config.as_deref())?;
    let s = &cfg.score;
    let heads = parse_heads(args.head.as_deref().or(s.head.as_deref()).unwrap_or("all"))?;
    let ckpt_path = required(args.ckpt.or(cfg.paths.ckpt.clone()), "checkpoint (--ckpt)")?;
    let initial_path = args.ckpt_initial.or(cfg.paths.ckpt_initial.clone());
    if heads.contains(&Head::Lr) && initial_path.is_none() {
        return Err(Failure::new(
            EXIT_CHECKPOINT,
            "the lr head compares the epoch-1 and final checkpoints; pass --ckpt-initial",
        ));
    }
    let features = required(args.features.or(cfg.paths.features.clone()), "feature file")?;

    let mut denoise = DenoiseConfig {
        rng_seed: args.common.seed.or(cfg.seed).unwrap_or(0),
        ..Default::default()
    };
    if let Some(stride) = args.stride.as_deref().or(s.stride.as_deref()) {
        denoise.stride = parse_stride(stride)?;
    }
    if let Some(eta) = args.eta.or(s.eta) {
        denoise.eta = eta;
    }
    if let Some(exp) = args.noise_exponent.as_deref() {
        denoise.noise_exponent = parse_exponent(exp)?;
    } else if let Some(exp) = s.noise_exponent {
        denoise.noise_exponent = exp;
    }
    let t = args.t.or(s.t).unwrap_or(denoise.t_start);
    let opts = ScoreOptions {
        t,
        denoise: DenoiseConfig {
            t_start: t,
            ..denoise
        },
        repeats: args.repeats.or(s.repeats).unwrap_or(1),
    };

    let final_ckpt = Checkpoint::load(&ckpt_path)?;
    let initial = match (&initial_path, heads.contains(&Head::Lr)) {
        (Some(p), true) => Some(Checkpoint::load(p)?),
        _ => None,
    };
    let scorer = Scorer::new(&final_ckpt, initial.as_ref(), opts)?;
    let data = read_feature_file(&features)?;
    let mut reports = scorer.score_set(&data, &heads)?;
    if let Some(lambda) = args.lambda {
        let head = heads[0];
        for r in &mut reports {
            r.decision = r.get(head).map(|v| classify(v, lambda, head.polarity()));
        }
    }
    let n_layers = scorer.layout().num_layers();
    match &args.out {
        Some(path) => {
            let f = File::create(path).map_err(|e| io_failure(path, e))?;
            write_scores_csv(BufWriter::new(f), &reports, n_layers)?;
        }
        None => write_scores_csv(io::stdout().lock(), &reports, n_layers)?,
    }
    log::info!("scored {} records", reports.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    auroc: f64,
    fpr95: f64,
    n_id: usize,
    n_ood: usize,
    head: &'static str,
}

fn read_labels(path: &Path) -> Result<HashMap<String, SetLabel>, Failure> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(Failure::data(format!(
                "{}: expected sample_id,label rows",
                path.display()
            )));
        };
        out.insert(id.to_string(), label.parse()?);
    }
    Ok(out)
}

pub fn eval(
    scores: &[PathBuf],
    head: &str,
    labels: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let head: Head = head.parse()?;
    let overrides = labels.map(read_labels).transpose()?;
    let mut entries = Vec::new();
    for path in scores {
        let f = File::open(path).map_err(|e| io_failure(path, e))?;
        for row in read_scores_csv(f)? {
            let label = overrides
                .as_ref()
                .and_then(|m| m.get(&row.sample_id).copied())
                .unwrap_or(row.label);
            let is_ood = match label {
                SetLabel::Id => false,
                SetLabel::Ood => true,
                SetLabel::Unlabeled => {
                    return Err(Failure::data(format!(
                        "{}: sample `{}` has no ID/OOD label",
                        path.display(),
                        row.sample_id
                    )))
                }
            };
            let v = row.get(head).ok_or_else(|| {
                Failure::data(format!(
                    "{}: sample `{}` has no {} score",
                    path.display(),
                    row.sample_id,
                    head.as_str()
                ))
            })?;
            entries.push((head.polarity().orient(v), is_ood));
        }
    }
    let set = ScoredSet::new(entries)?;
    let report = EvalReport {
        auroc: auroc(&set),
        fpr95: fpr95(&set)?,
        n_id: set.n_id(),
        n_ood: set.n_ood(),
        head: head.as_str(),
    };
    let json = serde_json::to_string(&report).expect("report serializes");
    match out {
        Some(p) => fs::write(p, format!("{json}\n")).map_err(|e| io_failure(p, e))?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<(), Failure> {
    if args.shift.is_nan() || args.shift <= 0.0 {
        return Err(Failure::config("--shift must be positive"));
    }
    let mut params = SynthParams::new(
        args.dim,
        args.n_train,
        args.n_ood,
        args.shift,
        args.seed.unwrap_or(0),
    );
    if let Some(n) = args.n_test_id {
        params.n_test_id = n;
    }
    let bench = synth_benchmark(&params)?;
    fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let mut stdout = io::stdout().lock();
    for (name, set) in [
        ("train.lfod", &bench.train),
        ("test_id.lfod", &bench.test_id),
        ("test_ood.lfod", &bench.test_ood),
    ] {
        let path = args.out.join(name);
        write_feature_file(set, &path)?;
        let _ = writeln!(
            stdout,
            "{name} records={} sha256={}",
            set.len(),
            file_sha256(&path)?
        );
    }
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), Failure> {
    let mut head = [0u8; 4];
    let n = File::open(path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(|e| io_failure(path, e))?;
    let sha = file_sha256(path)?;
    let mut out = io::stdout().lock();
    if n == 4 && &head == FEATURE_MAGIC {
        let set = read_feature_file(path)?;
        let layout = set.layout();
        let _ = writeln!(out, "kind: feature file");
        let _ = writeln!(out, "sha256: {sha}");
        let _ = writeln!(out, "records: {}", set.len());
        let _ = writeln!(out, "label: {}", set.label().as_str());
        let _ = writeln!(out, "encoder_tag: {}", layout.encoder_tag());
        let _ = writeln!(
            out,
            "layer_channel_counts: {:?}",
            layout.layer_channel_counts()
        );
        let _ = writeln!(out, "total_dim: {}", layout.total_dim());
    } else if n == 4 && &head == CHECKPOINT_MAGIC {
        let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
        let (manifest, _) = split_checkpoint(&bytes)?;
        let _ = writeln!(out, "kind: checkpoint");
        let _ = writeln!(out, "sha256: {sha}");
        let _ = writeln!(out, "payload_sha256: {}", manifest.payload_sha256);
        let _ = writeln!(
            out,
            "epoch: {}  train_seed: {}",
            manifest.epoch, manifest.train_seed
        );
        let _ = writeln!(out, "config: {:?}", manifest.config);
        let _ = writeln!(out, "schedule: {:?}", manifest.schedule);
        let _ = writeln!(
            out,
            "layout: {:?} ({})",
            manifest.layer_channel_counts, manifest.encoder_tag
        );
        for t in &manifest.tensors {
            let _ = writeln!(out, "  {} {:?}", t.name, t.shape);
        }
    } else {
        let f = File::open(path).map_err(|e| io_failure(path, e))?;
        let rows = read_scores_csv(f).map_err(|e| {
            Failure::data(format!(
                "{}: not a feature file, checkpoint or score CSV ({e})",
                path.display()
            ))
        })?;
        let count = |l: SetLabel| rows.iter().filter(|r| r.label == l).count();
        let _ = writeln!(out, "kind: score csv");
        let _ = writeln!(out, "sha256: {sha}");
        let _ = writeln!(out, "rows: {}", rows.len());
        let _ = writeln!(
            out,
            "labels: id={} ood={} unlabeled={}",
            count(SetLabel::Id),
            count(SetLabel::Ood),
            count(SetLabel::Unlabeled)
        );
        for h in Head::ALL {
            let n = rows.iter().filter(|r| r.get(h).is_some()).count();
            let _ = writeln!(out, "{}: {n} values", h.as_str());
        }
    }
    Ok(())
}
