//! OOD scoring heads: reconstruction MSE, likelihood regret (MSE under the
//! epoch-1 checkpoint minus MSE under the final one) and MFsim (negative mean
//! per-layer cosine similarity).

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise, ennoise, DenoiseConfig, NoiseSchedule, Reconstructor};
use crate::error::{Error, Result};
use crate::features::{assemble_z0, FeatureRecord, FeatureSet, LayerLayout, SetLabel};
use crate::lfdn::LfdnModel;
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Mse,
    Lr,
    Mfsim,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Mse, Head::Lr, Head::Mfsim];

    pub fn as_str(self) -> &'static str {
        match self {
            Head::Mse => "mse",
            Head::Lr => "lr",
            Head::Mfsim => "mfsim",
        }
    }

    /// Which direction of the raw score points to OOD.
    pub fn polarity(self) -> Polarity {
        match self {
            Head::Mse | Head::Mfsim => Polarity::HigherIsOod,
            Head::Lr => Polarity::HigherIsId,
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Head::Mse),
            "lr" => Ok(Head::Lr),
            "mfsim" => Ok(Head::Mfsim),
            _ => Err(Error::config(format!("unknown head `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    HigherIsOod,
    HigherIsId,
}

impl Polarity {
    /// Maps a raw score onto the higher-is-OOD convention.
    pub fn orient(self, score: f64) -> f64 {
        match self {
            Polarity::HigherIsOod => score,
            Polarity::HigherIsId => -score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Id,
    Ood,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Id => "id",
            Decision::Ood => "ood",
        }
    }
}

/// `score <= lambda` is ID, after orienting the score so higher means OOD.
pub fn classify(score: f64, lambda: f64, polarity: Polarity) -> Decision {
    if polarity.orient(score) <= lambda {
        Decision::Id
    } else {
        Decision::Ood
    }
}

/// Mean squared difference over the vector's elements.
pub fn mse(z0: &[f64], recon: &[f64]) -> Result<f64> {
    if z0.len() != recon.len() || z0.is_empty() {
        return Err(Error::structure(format!(
            "cannot compare vectors of length {} and {}",
            z0.len(),
            recon.len()
        )));
    }
    Ok(z0
        .iter()
        .zip(recon)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / z0.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSims {
    pub sims: Vec<f64>,
    /// Set when some slice had zero norm and its similarity was taken as 0.
    pub zero_norm: bool,
}

/// Cosine similarity of every layer slice.
pub fn per_layer_cosine(z0: &[f64], recon: &[f64], layout: &LayerLayout) -> Result<LayerSims> {
    if z0.len() != layout.total_dim() || recon.len() != layout.total_dim() {
        return Err(Error::structure(format!(
            "vectors of length {} and {} do not match layout width {}",
            z0.len(),
            recon.len(),
            layout.total_dim()
        )));
    }
    let mut zero_norm = false;
    let sims = layout
        .ranges()
        .into_iter()
        .map(|r| {
            let (a, b) = (&z0[r.clone()], &recon[r]);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                zero_norm = true;
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(LayerSims { sims, zero_norm })
}

pub fn mfsim_from_sims(sims: &[f64]) -> f64 {
    -(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Random stream of the `index`-th record, independent of scoring order.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    /// Noising step; also the start of the reconstruction.
    pub t: usize,
    pub denoise: DenoiseConfig,
    /// Independent noise draws averaged per record.
    pub repeats: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            t: 5,
            denoise: DenoiseConfig::default(),
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub sample_id: String,
    pub label: SetLabel,
    pub mse: Option<f64>,
    pub lr: Option<f64>,
    pub mfsim: Option<f64>,
    pub layer_sims: Option<Vec<f64>>,
    pub zero_norm_warning: bool,
    pub decision: Option<Decision>,
}

impl ScoreReport {
    pub fn get(&self, head: Head) -> Option<f64> {
        match head {
            Head::Mse => self.mse,
            Head::Lr => self.lr,
            Head::Mfsim => self.mfsim,
        }
    }
}

/// Scores records against a final checkpoint and, for the LR head, the
/// epoch-1 checkpoint.
pub struct Scorer {
    final_model: LfdnModel,
    initial_model: Option<LfdnModel>,
    schedule: NoiseSchedule,
    layout: LayerLayout,
    delta: f64,
    opts: ScoreOptions,
}

impl Scorer {
    pub fn new(
        final_ckpt: &Checkpoint,
        initial_ckpt: Option<&Checkpoint>,
        opts: ScoreOptions,
    ) -> Result<Self> {
        if let Some(init) = initial_ckpt {
            final_ckpt.check_compatible(init)?;
        }
        let schedule = final_ckpt.schedule.build()?;
        if opts.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        let dcfg = DenoiseConfig {
            t_start: opts.t,
            ..opts.denoise
        };
        dcfg.validate(&schedule)?;
        let steps = schedule.steps();
        Ok(Self {
            final_model: LfdnModel::new(final_ckpt.params.clone(), steps),
            initial_model: initial_ckpt.map(|c| LfdnModel::new(c.params.clone(), steps)),
            schedule,
            layout: final_ckpt.layout.clone(),
            delta: final_ckpt.normalization_delta,
            opts: ScoreOptions {
                denoise: dcfg,
                ..opts
            },
        })
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn has_initial(&self) -> bool {
        self.initial_model.is_some()
    }

    /// Noise `z0` to step `t` and reconstruct it.
    pub fn reconstruct<M: Reconstructor + ?Sized>(
        &self,
        model: &M,
        z0: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let t = self.opts.t;
        let (zt, _) = ennoise(z0, t, &self.schedule, rng)?;
        denoise(model, &zt, t, &self.opts.denoise, &self.schedule, rng)
    }

    fn check_record(&self, record: &FeatureRecord) -> Result<()> {
        record.check_layout(&self.layout).map_err(|e| {
            Error::Checkpoint(format!("record does not fit the checkpoint layout: {e}"))
        })
    }

    /// Averages of (mse, per-layer sims) over the configured repeats.
    fn mse_and_sims(&self, model: &LfdnModel, z0: &[f64], index: u64) -> Result<(f64, LayerSims)> {
        let mut rng = record_rng(self.opts.denoise.rng_seed, index);
        let k = self.opts.repeats as f64;
        let mut total_mse = 0.0;
        let mut sims = vec![0.0; self.layout.num_layers()];
        let mut zero_norm = false;
        for _ in 0..self.opts.repeats {
            let recon = self.reconstruct(model, z0, &mut rng)?;
            total_mse += mse(z0, &recon)?;
            let s = per_layer_cosine(z0, &recon, &self.layout)?;
            zero_norm |= s.zero_norm;
            sims.iter_mut().zip(&s.sims).for_each(|(a, b)| *a += b);
        }
        sims.iter_mut().for_each(|s| *s /= k);
        Ok((total_mse / k, LayerSims { sims, zero_norm }))
    }

    pub fn score_record(
        &self,
        index: u64,
        record: &FeatureRecord,
        label: SetLabel,
        heads: &[Head],
    ) -> Result<ScoreReport> {
        self.check_record(record)?;
        let z0 = assemble_z0(record, &self.layout, self.delta)?;
        let wants = |h| heads.contains(&h);
        let mut report = ScoreReport {
            sample_id: record.sample_id.clone(),
            label,
            mse: None,
            lr: None,
            mfsim: None,
            layer_sims: None,
            zero_norm_warning: false,
            decision: None,
        };
        let (mse_final, sims) = self.mse_and_sims(&self.final_model, &z0, index)?;
        if wants(Head::Mse) {
            report.mse = Some(mse_final);
        }
        if wants(Head::Mfsim) {
            if sims.zero_norm {
                log::warn!(
                    "sample `{}`: zero-norm layer slice, similarity taken as 0",
                    record.sample_id
                );
            }
            report.mfsim = Some(mfsim_from_sims(&sims.sims));
            report.zero_norm_warning = sims.zero_norm;
            report.layer_sims = Some(sims.sims);
        }
        if wants(Head::Lr) {
            let initial = self.initial_model.as_ref().ok_or_else(|| {
                Error::Checkpoint("the LR head needs the epoch-1 checkpoint".into())
            })?;
            let (mse_initial, _) = self.mse_and_sims(initial, &z0, index)?;
            report.lr = Some(mse_initial - mse_final);
        }
        Ok(report)
    }

    /// Scores every record; record `i` always uses random stream `i`.
    pub fn score_set(&self, set: &FeatureSet, heads: &[Head]) -> Result<Vec<ScoreReport>> {
        if !set.layout().same_shape(&self.layout) {
            return Err(Error::Checkpoint(format!(
                "feature layout {:?} does not match checkpoint layout {:?}",
                set.layout().layer_channel_counts(),
                self.layout.layer_channel_counts()
            )));
        }
        set.records()
            .par_iter()
            .enumerate()
            .map(|(i, r)| self.score_record(i as u64, r, set.label(), heads))
            .collect()
    }
}

fn single_record_opts(t: usize, cfg: &DenoiseConfig) -> ScoreOptions {
    ScoreOptions {
        t,
        denoise: *cfg,
        repeats: 1,
    }
}

pub fn score_mse(
    ckpt: &Checkpoint,
    record: &FeatureRecord,
    t: usize,
    cfg: &DenoiseConfig,
) -> Result<f64> {
    let scorer = Scorer::new(ckpt, None, single_record_opts(t, cfg))?;
    let r = scorer.score_record(0, record, SetLabel::Unlabeled, &[Head::Mse])?;
    Ok(r.mse.expect("requested"))
}

pub fn score_mfsim(
    ckpt: &Checkpoint,
    record: &FeatureRecord,
    t: usize,
    cfg: &DenoiseConfig,
) -> Result<f64> {
    let scorer = Scorer::new(ckpt, None, single_record_opts(t, cfg))?;
    let r = scorer.score_record(0, record, SetLabel::Unlabeled, &[Head::Mfsim])?;
    Ok(r.mfsim.expect("requested"))
}

pub fn score_lr(
    initial: &Checkpoint,
    final_ckpt: &Checkpoint,
    record: &FeatureRecord,
    t: usize,
    cfg: &DenoiseConfig,
) -> Result<f64> {
    let scorer = Scorer::new(final_ckpt, Some(initial), single_record_opts(t, cfg))?;
    let r = scorer.score_record(0, record, SetLabel::Unlabeled, &[Head::Lr])?;
    Ok(r.lr.expect("requested"))
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros dropped.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map(format_sig9).unwrap_or_default()
}

/// Writes `sample_id,label,mse,lr,mfsim,sim_1..sim_M`, plus a trailing
/// `decision` column when any report carries one.
pub fn write_scores_csv<W: Write>(
    out: W,
    reports: &[ScoreReport],
    num_layers: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let with_decision = reports.iter().any(|r| r.decision.is_some());
    let mut header: Vec<String> = ["sample_id", "label", "mse", "lr", "mfsim"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=num_layers).map(|m| format!("sim_{m}")));
    if with_decision {
        header.push("decision".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![
            r.sample_id.clone(),
            r.label.as_str().to_string(),
            opt_field(r.mse),
            opt_field(r.lr),
            opt_field(r.mfsim),
        ];
        match &r.layer_sims {
            Some(s) => row.extend(s.iter().map(|v| format_sig9(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), num_layers)),
        }
        if with_decision {
            row.push(
                r.decision
                    .map(|d| d.as_str().to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<scores>", e))
}

/// Rows of a score CSV: sample id, label and the three head columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: String,
    pub label: SetLabel,
    pub mse: Option<f64>,
    pub lr: Option<f64>,
    pub mfsim: Option<f64>,
}

impl ScoreRow {
    pub fn get(&self, head: Head) -> Option<f64> {
        match head {
            Head::Mse => self.mse,
            Head::Lr => self.lr,
            Head::Mfsim => self.mfsim,
        }
    }
}

pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(0, format!("score CSV lacks a `{name}` column")))
    };
    let (id_c, label_c, mse_c, lr_c, mf_c) = (
        col("sample_id")?,
        col("label")?,
        col("mse")?,
        col("lr")?,
        col("mfsim")?,
    );
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |c: usize| -> Result<Option<f64>> {
            let f = rec.get(c).unwrap_or("");
            if f.is_empty() {
                return Ok(None);
            }
            f.parse().map(Some).map_err(|_| {
                Error::format(
                    rec.position().map_or(0, |p| p.byte()),
                    format!("row {}: bad number `{f}`", line + 1),
                )
            })
        };
        rows.push(ScoreRow {
            sample_id: rec.get(id_c).unwrap_or("").to_string(),
            label: rec.get(label_c).unwrap_or("").parse()?,
            mse: num(mse_c)?,
            lr: num(lr_c)?,
            mfsim: num(mf_c)?,
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format(offset, e.to_string())
}
