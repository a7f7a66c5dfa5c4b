//! Subcommand implementations.
//!
//! Each subcommand checks that its inputs exist, computes everything in
//! memory, and only then writes its outputs.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use blendrig_core::defxfer::{transfer_rig, TransferOptions};
use blendrig_core::eval::{
    evaluate_model, mean_coefficients, mne, pairwise_blendshape_diff, EvalOptions, EvalReport,
};
use blendrig_core::fitter::{fit_basis, reconstruct, FitResult, LandmarkRecord, TargetSpace};
use blendrig_core::mixer::{
    infer as mixer_infer, train as mixer_train, LandmarkLossSpace, LossBasis, MixerParams,
    TrainLogEntry, TrainObserver,
};
use blendrig_core::synth::{
    generate_dataset, make_template, read_dataset, write_dataset, Dataset, DatasetHeader,
    IdentityBank, TemplateConfig,
};
use blendrig_core::{
    rot6d_to_rotation, BlendshapeRig, Camera, Dim, Error, LandmarkSet, Mesh, NameRegistry,
    PriorSpec, Region,
};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{read_json, require_file, Baseline, CliConfig, EvalSettings};
use crate::output::{
    file_sha256, write_dir_with, write_file_with, write_json, write_jsonl, Provenance,
};
use crate::GlobalArgs;

pub(crate) fn progress(g: &GlobalArgs, msg: impl std::fmt::Display) {
    if !g.quiet {
        eprintln!("{msg}");
    }
}

pub(crate) fn load_config(g: &GlobalArgs, local: Option<&Path>) -> Result<CliConfig> {
    CliConfig::load(local.or(g.config.as_deref()))
}

pub(crate) fn load_prior(path: Option<&Path>) -> Result<PriorSpec> {
    Ok(match path {
        Some(p) => {
            require_file(p)?;
            PriorSpec::load(p, NameRegistry::arkit())?
        }
        None => PriorSpec::default_arkit(),
    })
}

fn split_manifest_path(path: &Path) -> Result<(PathBuf, String)> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("{} is not a manifest file path", path.display())))?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok((dir, name.to_string()))
}

pub(crate) fn save_rig(rig: &BlendshapeRig, manifest: &Path, provenance: Value) -> Result<()> {
    let (dir, name) = split_manifest_path(manifest)?;
    write_dir_with(&dir, |tmp| {
        rig.save(tmp, &name, Some(provenance)).map(|_| ())
    })
}

/// Regenerates the exact template a dataset was built from.
pub(crate) fn dataset_template(header: &DatasetHeader) -> Result<BlendshapeRig> {
    let rig = make_template(&header.template)?;
    if rig.content_hash() != header.template_hash {
        return Err(Error::Config(
            "the dataset's template config no longer reproduces its template hash".into(),
        )
        .into());
    }
    Ok(rig)
}

/// Checks that a rig read from disk is the given template up to OBJ
/// text precision.
pub(crate) fn check_rig_matches(loaded: &BlendshapeRig, exact: &BlendshapeRig) -> Result<()> {
    let same_meta = loaded.names == exact.names && loaded.landmarks == exact.landmarks;
    let meshes = std::iter::once((&loaded.neutral, &exact.neutral))
        .chain(loaded.shapes.iter().zip(&exact.shapes));
    let close = loaded.shapes.len() == exact.shapes.len()
        && meshes
            .into_iter()
            .all(|(a, b)| a.same_topology(b) && a.max_vertex_distance(b) <= 1e-5);
    if same_meta && close {
        Ok(())
    } else {
        Err(
            Error::Config("rig does not match the template the dataset was generated from".into())
                .into(),
        )
    }
}

// ---------------------------------------------------------------- gen-template

#[derive(Debug, Args)]
pub struct GenTemplateArgs {
    /// Template config (JSON); the shared config's `template` section when unset.
    #[arg(long)]
    pub cfg: Option<PathBuf>,
    /// Manifest path; meshes are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

pub(crate) fn template_provenance(
    tc: &TemplateConfig,
    rig: &BlendshapeRig,
    cfg_file: Option<&Path>,
) -> Result<Value> {
    let mut prov = Provenance::new("gen-template", Some(tc.seed), tc)?;
    if let Some(p) = cfg_file {
        prov = prov.input("cfg", p)?;
    }
    let mut v = prov.to_value();
    v["template_hash"] = rig.content_hash().into();
    Ok(v)
}

pub fn gen_template(g: &GlobalArgs, a: &GenTemplateArgs) -> Result<()> {
    let mut tc = match &a.cfg {
        Some(p) => read_json::<TemplateConfig>(p)?,
        None => load_config(g, None)?.template,
    };
    if let Some(s) = g.seed {
        tc.seed = s;
    }
    let rig = make_template(&tc)?;
    save_rig(
        &rig,
        &a.out,
        template_provenance(&tc, &rig, a.cfg.as_deref())?,
    )?;
    progress(g, format_args!("wrote template rig {}", a.out.display()));
    Ok(())
}

// -------------------------------------------------------------------- gen-data

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Template config (JSON); the shared config's `template` section when unset.
    #[arg(long)]
    pub template_cfg: Option<PathBuf>,
    /// Prior spec (JSON); the built-in ARKit prior when unset.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    pub n: u64,
    /// Output dataset (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub identities: Option<u64>,
    #[arg(long)]
    pub identity_offset: Option<u64>,
    #[arg(long)]
    pub sample_offset: Option<u64>,
}

pub fn gen_data(g: &GlobalArgs, a: &GenDataArgs) -> Result<()> {
    let cfg = load_config(g, None)?;
    let prior_path = a.prior.clone().or(cfg.prior.clone());
    if let Some(p) = &prior_path {
        require_file(p)?;
    }
    let tc = match &a.template_cfg {
        Some(p) => read_json::<TemplateConfig>(p)?,
        None => cfg.template.clone(),
    };
    let prior = load_prior(prior_path.as_deref())?;
    cfg.camera.validate()?;
    let mut settings = cfg.dataset.clone();
    settings.identities = a.identities.unwrap_or(settings.identities);
    settings.identity_offset = a.identity_offset.unwrap_or(settings.identity_offset);
    settings.sample_offset = a.sample_offset.unwrap_or(settings.sample_offset);
    let seed = g.seed.unwrap_or(cfg.seed);
    let template = make_template(&tc)?;
    let ds = generate_dataset(
        a.n,
        &template,
        &tc,
        &prior,
        &cfg.camera,
        seed,
        &settings.options(),
    )?;
    write_file_with(&a.out, |p| write_dataset(&ds, p))?;
    progress(
        g,
        format_args!(
            "wrote {} samples ({} identities) to {}",
            a.n,
            settings.identities,
            a.out.display()
        ),
    );
    Ok(())
}

// -------------------------------------------------------------------- transfer

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Source rig manifest.
    #[arg(long)]
    pub template: PathBuf,
    /// Target neutral mesh (OBJ) sharing the template's topology.
    #[arg(long)]
    pub target: PathBuf,
    /// Output directory for the new rig (`rig.json` plus OBJs).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn transfer(g: &GlobalArgs, a: &TransferArgs) -> Result<()> {
    require_file(&a.template)?;
    require_file(&a.target)?;
    let rig = BlendshapeRig::load(&a.template)?;
    let target = Mesh::read_obj(&a.target)?;
    let out = transfer_rig(&rig, &target)?;
    let prov = Provenance::new("transfer", None, &TransferOptions::default())?
        .input("template", &a.template)?
        .input("target", &a.target)?;
    write_dir_with(&a.out, |tmp| {
        out.save(tmp, "rig.json", Some(prov.to_value())).map(|_| ())
    })?;
    progress(
        g,
        format_args!("wrote transferred rig {}", a.out.join("rig.json").display()),
    );
    Ok(())
}

// ------------------------------------------------------------------------- fit

/// Landmark targets from either a landmark-record file or a dataset file.
/// Dataset files also supply their camera.
pub(crate) fn read_targets(path: &Path) -> Result<(Vec<LandmarkRecord>, Option<Camera>)> {
    require_file(path)?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path.display(), format!("line {}: {e}", i + 1)))?;
        if let Some(kind) = value.get("kind").and_then(Value::as_str) {
            if kind == "blendrig-dataset" {
                let ds = read_dataset(path)?;
                let records = ds
                    .samples
                    .iter()
                    .map(|s| {
                        LandmarkRecord::from_set(s.index, &LandmarkSet::from_2d(&s.landmarks2d))
                    })
                    .collect();
                return Ok((records, ds.header.cameras.first().copied()));
            }
            continue;
        }
        records.push(
            serde_json::from_value(value)
                .map_err(|e| Error::parse(path.display(), format!("line {}: {e}", i + 1)))?,
        );
    }
    if records.is_empty() {
        return Err(Error::Config(format!("{} holds no landmark records", path.display())).into());
    }
    Ok((records, None))
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Rig manifest.
    #[arg(long)]
    pub rig: PathBuf,
    /// Landmark records (JSON lines) or a dataset file.
    #[arg(long)]
    pub targets: PathBuf,
    /// Output fits (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Fit frames in order, each starting from the previous result.
    #[arg(long)]
    pub warm_start: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitLine {
    pub frame: u64,
    /// MNE of the reconstructed landmarks against the target, percent.
    pub landmark_mne: f64,
    #[serde(flatten)]
    pub result: FitResult,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputHeader {
    pub kind: String,
    pub names: Vec<String>,
    pub provenance: Value,
}

pub fn fit(g: &GlobalArgs, a: &FitArgs) -> Result<()> {
    let cfg = load_config(g, None)?;
    require_file(&a.rig)?;
    let (records, data_camera) = read_targets(&a.targets)?;
    let rig = BlendshapeRig::load(&a.rig)?;
    let camera = data_camera.unwrap_or(cfg.camera);
    let basis = rig.landmark_basis();
    let fit_one = |r: &LandmarkRecord, init: Option<&FitResult>| -> Result<FitLine> {
        let target = r.to_set()?;
        let space = match target.dim() {
            Dim::Three => TargetSpace::Model3d,
            Dim::Two => TargetSpace::Projected2d(camera),
        };
        let opts = cfg.fit.options(space);
        opts.validate()?;
        let result = fit_basis(&basis, rig.landmarks.interocular(), &target, &opts, init)
            .with_context(|| format!("fitting frame {}", r.frame))?;
        let landmark_mne = mne(
            &reconstruct(&basis, &result, &space)?,
            &target,
            &rig.landmarks,
        )?;
        Ok(FitLine {
            frame: r.frame,
            landmark_mne,
            result,
        })
    };
    let lines: Vec<FitLine> = if a.warm_start {
        let mut out: Vec<FitLine> = Vec::with_capacity(records.len());
        for r in &records {
            let line = fit_one(r, out.last().map(|l| &l.result))?;
            out.push(line);
        }
        out
    } else {
        records
            .par_iter()
            .map(|r| fit_one(r, None))
            .collect::<Result<_>>()?
    };
    let prov = Provenance::new("fit", None, &cfg.fit)?
        .input("rig", &a.rig)?
        .input("targets", &a.targets)?;
    let header = OutputHeader {
        kind: "blendrig-fits".into(),
        names: rig.names.names().to_vec(),
        provenance: prov.to_value(),
    };
    write_jsonl(&a.out, &header, &lines)?;
    let worst = lines.iter().map(|l| l.landmark_mne).fold(0.0, f64::max);
    progress(
        g,
        format_args!(
            "fit {} frames, worst landmark MNE {worst:.4}%, wrote {}",
            lines.len(),
            a.out.display()
        ),
    );
    Ok(())
}

// ----------------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Config file with `mixer` and `train` sections; overrides `--config`.
    #[arg(long)]
    pub cfg: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Holdout dataset scored during training.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Training log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

struct CliObserver<'a> {
    g: &'a GlobalArgs,
    steps: u64,
    checkpoint_dir: Option<&'a Path>,
    abort_path: PathBuf,
    provenance: Value,
}

impl TrainObserver for CliObserver<'_> {
    fn on_log(&mut self, e: &TrainLogEntry) {
        let holdout = e
            .holdout
            .map_or(String::new(), |h| format!(" holdout {:.6}", h.total));
        progress(
            self.g,
            format_args!(
                "step {}/{} lr {:.3e} loss {:.6} (coeff {:.6} landmark {:.6} rotation {:.6}){holdout}",
                e.step, self.steps, e.lr, e.train.total, e.train.coeff, e.train.landmark, e.train.rotation
            ),
        );
    }

    fn on_checkpoint(&mut self, step: u64, params: &MixerParams) -> blendrig_core::Result<()> {
        let Some(dir) = self.checkpoint_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        params.save(
            &dir.join(format!("step_{step:06}.ckpt.json")),
            step,
            Some(self.provenance.clone()),
        )
    }

    fn on_abort(&mut self, step: u64, last_good: &MixerParams) {
        match last_good.save(&self.abort_path, step, Some(self.provenance.clone())) {
            Ok(()) => eprintln!(
                "saved last good parameters to {}",
                self.abort_path.display()
            ),
            Err(e) => eprintln!("could not save last good parameters: {e}"),
        }
    }
}

pub(crate) struct Trained {
    pub params: MixerParams,
    pub log: Vec<TrainLogEntry>,
    pub provenance: Value,
}

fn add_identities(
    mut basis: LossBasis,
    template: &BlendshapeRig,
    header: &DatasetHeader,
) -> Result<LossBasis> {
    let bank = IdentityBank::build(
        template,
        header.seed,
        header.identity_offset,
        header.identity_count,
        header.identity_amplitude,
        TransferOptions::default(),
    )?;
    for id in bank.ids() {
        basis = basis.with_identity(id, bank.get(id).expect("id in range"));
    }
    Ok(basis)
}

/// Trains on an in-memory dataset. `provenance` describes the invocation;
/// the training-set header and mean coefficients are added for evaluation.
pub(crate) fn train_model(
    g: &GlobalArgs,
    data: &Dataset,
    holdout: Option<&Dataset>,
    cfg: &CliConfig,
    provenance: Provenance,
    checkpoint_dir: Option<&Path>,
    abort_path: PathBuf,
) -> Result<Trained> {
    if let Some(h) = holdout {
        blendrig_core::eval::check_disjoint(&data.header, &h.header)?;
    }
    let template = dataset_template(&data.header)?;
    let mut basis = LossBasis::new(&template.landmark_basis());
    if cfg.train.per_identity_landmarks {
        basis = add_identities(basis, &template, &data.header)?;
        if let Some(h) = holdout {
            basis = add_identities(basis, &template, &h.header)?;
        }
    }
    if cfg.train.landmark_space == LandmarkLossSpace::Projected2d {
        basis = basis.projected(data.header.cameras.clone());
    }
    let mut prov = provenance.to_value();
    prov["train_data"] = serde_json::to_value(&data.header)?;
    prov["train_mean_coefficients"] = serde_json::to_value(mean_coefficients(&data.samples)?)?;
    let mut observer = CliObserver {
        g,
        steps: cfg.train.steps,
        checkpoint_dir,
        abort_path,
        provenance: prov.clone(),
    };
    let holdout_samples = holdout.map_or(&[][..], |h| &h.samples[..]);
    let outcome = mixer_train(
        &data.samples,
        holdout_samples,
        &basis,
        &cfg.train,
        &cfg.mixer,
        &mut observer,
    )?;
    Ok(Trained {
        params: outcome.params,
        log: outcome.log,
        provenance: prov,
    })
}

fn last_good_path(out: &Path) -> PathBuf {
    let stem = out
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("checkpoint");
    out.with_file_name(format!("{stem}.last-good"))
}

pub(crate) fn write_checkpoint(path: &Path, trained: &Trained, steps: u64) -> Result<()> {
    write_file_with(path, |p| {
        trained
            .params
            .save(p, steps, Some(trained.provenance.clone()))
    })
}

pub(crate) fn write_log(path: &Path, trained: &Trained) -> Result<()> {
    let header =
        serde_json::json!({ "kind": "blendrig-train-log", "provenance": trained.provenance });
    write_jsonl(path, &header, &trained.log)
}

pub fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    require_file(&a.data)?;
    if let Some(h) = &a.holdout {
        require_file(h)?;
    }
    let mut cfg = load_config(g, a.cfg.as_deref())?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    cfg.mixer.validate_standard()?;
    cfg.train.validate()?;
    let data = read_dataset(&a.data)?;
    let holdout = a.holdout.as_deref().map(read_dataset).transpose()?;
    let section = serde_json::json!({ "mixer": cfg.mixer, "train": cfg.train });
    let mut prov =
        Provenance::new("train", Some(cfg.train.seed), &section)?.input("data", &a.data)?;
    if let Some(h) = &a.holdout {
        prov = prov.input("holdout", h)?;
    }
    let trained = train_model(
        g,
        &data,
        holdout.as_ref(),
        &cfg,
        prov,
        a.checkpoint_dir.as_deref(),
        last_good_path(&a.out),
    )?;
    write_checkpoint(&a.out, &trained, cfg.train.steps)?;
    if let Some(log) = &a.log {
        write_log(log, &trained)?;
    }
    progress(
        g,
        format_args!(
            "wrote checkpoint {} ({})",
            a.out.display(),
            trained.params.content_hash()
        ),
    );
    Ok(())
}

// ----------------------------------------------------------------------- infer

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// 2D landmark records (JSON lines) or a dataset file.
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InferLine {
    pub frame: u64,
    pub coefficients: Vec<f64>,
    pub r6: [f64; 6],
    /// Decoded rotation, row-major; absent when the 6D output is degenerate.
    pub rotation: Option<[[f64; 3]; 3]>,
}

pub fn infer(g: &GlobalArgs, a: &InferArgs) -> Result<()> {
    require_file(&a.ckpt)?;
    let (records, _) = read_targets(&a.landmarks)?;
    let (params, ck) = MixerParams::load(&a.ckpt)?;
    let lines = records
        .par_iter()
        .map(|r| {
            let set = r.to_set()?;
            if set.dim() != Dim::Two {
                return Err(Error::DimensionMismatch(format!(
                    "frame {}: inference needs 2D landmarks",
                    r.frame
                ))
                .into());
            }
            let out = mixer_infer(&params, &set.points_2d()?)?;
            let rotation = rot6d_to_rotation(&out.r6)
                .ok()
                .map(|m| std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])));
            Ok(InferLine {
                frame: r.frame,
                coefficients: out.coefficients,
                r6: out.r6,
                rotation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new("infer", None, &ck.config)?
        .input("ckpt", &a.ckpt)?
        .input("landmarks", &a.landmarks)?;
    let header = OutputHeader {
        kind: "blendrig-inference".into(),
        names: NameRegistry::arkit().names().to_vec(),
        provenance: prov.to_value(),
    };
    write_jsonl(&a.out, &header, &lines)?;
    progress(
        g,
        format_args!("inferred {} frames, wrote {}", lines.len(), a.out.display()),
    );
    Ok(())
}

// ------------------------------------------------------------------------ eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub holdout: PathBuf,
    /// Template rig manifest the holdout was generated from.
    #[arg(long)]
    pub rig: PathBuf,
    /// Output report (JSON).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalFile {
    pub kind: String,
    pub provenance: Value,
    pub report: EvalReport,
    pub table: String,
}

/// Scores a checkpoint on a holdout set. `rig`, when given, must match the
/// holdout's template; the exact template is regenerated from the header.
pub(crate) fn evaluate_checkpoint(
    params: &MixerParams,
    ckpt_provenance: Option<&Value>,
    holdout: &Dataset,
    rig: Option<&BlendshapeRig>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let template = dataset_template(&holdout.header)?;
    if let Some(r) = rig {
        check_rig_matches(r, &template)?;
    }
    let train_header: Option<DatasetHeader> = ckpt_provenance
        .and_then(|p| p.get("train_data"))
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()?;
    let baseline_coefficients = match settings.baseline {
        Baseline::Zeros => None,
        Baseline::Mean => Some(
            ckpt_provenance
                .and_then(|p| p.get("train_mean_coefficients"))
                .map(|v| serde_json::from_value::<Vec<f64>>(v.clone()))
                .transpose()?
                .ok_or_else(|| {
                    Error::Config(
                        "mean baseline needs a checkpoint that records its training data".into(),
                    )
                })?,
        ),
    };
    let h = &holdout.header;
    let bank = IdentityBank::build(
        &template,
        h.seed,
        h.identity_offset,
        h.identity_count,
        h.identity_amplitude,
        TransferOptions::default(),
    )?;
    let opts = EvalOptions {
        fitter: settings.fitter,
        baseline_coefficients,
    };
    Ok(evaluate_model(
        params,
        holdout,
        train_header.as_ref(),
        &template,
        &bank,
        &opts,
    )?)
}

pub(crate) fn eval_file(report: EvalReport, provenance: Value) -> EvalFile {
    EvalFile {
        kind: "blendrig-eval".into(),
        provenance,
        table: report.table(),
        report,
    }
}

pub fn eval(g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    for p in [&a.ckpt, &a.holdout, &a.rig] {
        require_file(p)?;
    }
    let cfg = load_config(g, None)?;
    let (params, ck) = MixerParams::load(&a.ckpt)?;
    let holdout = read_dataset(&a.holdout)?;
    let rig = BlendshapeRig::load(&a.rig)?;
    let report = evaluate_checkpoint(
        &params,
        ck.provenance.as_ref(),
        &holdout,
        Some(&rig),
        &cfg.eval,
    )?;
    let prov = Provenance::new("eval", None, &cfg.eval)?
        .input("ckpt", &a.ckpt)?
        .input("holdout", &a.holdout)?
        .input("rig", &a.rig)?;
    let file = eval_file(report, prov.to_value());
    write_json(&a.report, &file)?;
    if !g.quiet {
        print!("{}", file.table);
    }
    Ok(())
}

// -------------------------------------------------------------------- pairdiff

#[derive(Debug, Args)]
pub struct PairdiffArgs {
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

pub fn pairdiff(g: &GlobalArgs, a: &PairdiffArgs) -> Result<()> {
    require_file(&a.rig)?;
    let rig = BlendshapeRig::load(&a.rig)?;
    let diff = pairwise_blendshape_diff(&rig)?;
    let prov = Provenance::new("pairdiff", None, &Value::Null)?.input("rig", &a.rig)?;
    let file = serde_json::json!({
        "kind": "blendrig-pairdiff",
        "provenance": prov.to_value(),
        "pairwise": diff,
    });
    write_json(&a.report, &file)?;
    if !g.quiet {
        let region = |r: Region| diff.regions.get(&r).copied().unwrap_or(f64::NAN);
        println!(
            "pairwise blendshape diff: mean {:.3}% (lips {:.3}%, eyes {:.3}%)",
            diff.mean,
            region(Region::Lips),
            region(Region::Eyes)
        );
    }
    Ok(())
}

// ------------------------------------------------------------------------ pose

#[derive(Debug, Args)]
pub struct PoseArgs {
    #[arg(long)]
    pub rig: PathBuf,
    /// JSON object of name to value, or a fit/infer output with `--frame`.
    #[arg(long)]
    pub coefficients: PathBuf,
    /// Frame to take from a JSON-lines coefficient file.
    #[arg(long)]
    pub frame: Option<u64>,
    /// Output OBJ.
    #[arg(long)]
    pub out: PathBuf,
}

fn coefficient_value(path: &Path, frame: Option<u64>) -> Result<(Value, Option<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::parse(path.display(), msg);
    let Some(frame) = frame else {
        let v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let names = v
            .get("names")
            .map(|n| serde_json::from_value(n.clone()))
            .transpose()
            .map_err(|e| bad(e.to_string()))?;
        return Ok(match v.get("coefficients") {
            Some(c) => (c.clone(), names),
            None => (v, names),
        });
    };
    let mut names = None;
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let v: Value =
            serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        if let Some(n) = v.get("names") {
            names = Some(serde_json::from_value(n.clone()).map_err(|e| bad(e.to_string()))?);
        }
        if v.get("frame").and_then(Value::as_u64) == Some(frame) {
            let c = v
                .get("coefficients")
                .cloned()
                .ok_or_else(|| bad(format!("frame {frame} has no coefficients")))?;
            return Ok((c, names));
        }
    }
    Err(Error::Config(format!("frame {frame} not found in {}", path.display())).into())
}

/// Coefficients in rig order. Object entries are matched by name and
/// missing names are zero; arrays must follow the rig's name order.
pub(crate) fn read_coefficients(
    path: &Path,
    frame: Option<u64>,
    names: &NameRegistry,
) -> Result<Vec<f64>> {
    require_file(path)?;
    let (value, file_names) = coefficient_value(path, frame)?;
    let finite = |name: &str, v: &Value| -> Result<f64> {
        v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| {
            Error::Config(format!("coefficient {name} is not a finite number")).into()
        })
    };
    match value {
        Value::Object(map) => {
            let mut w = vec![0.0; names.len()];
            for (k, v) in &map {
                w[names.index_of(k)?] = finite(k, v)?;
            }
            Ok(w)
        }
        Value::Array(arr) => {
            if let Some(f) = file_names {
                if f != names.names() {
                    return Err(Error::Config(
                        "coefficient names differ from the rig's registry".into(),
                    )
                    .into());
                }
            }
            if arr.len() != names.len() {
                return Err(Error::CoefficientCount {
                    expected: names.len(),
                    got: arr.len(),
                }
                .into());
            }
            arr.iter()
                .enumerate()
                .map(|(i, v)| finite(names.name(i), v))
                .collect()
        }
        _ => Err(Error::Config("coefficients must be a JSON object or array".into()).into()),
    }
}

pub fn pose(g: &GlobalArgs, a: &PoseArgs) -> Result<()> {
    require_file(&a.rig)?;
    let rig = BlendshapeRig::load(&a.rig)?;
    let w = read_coefficients(&a.coefficients, a.frame, &rig.names)?;
    let mesh = rig.apply_expression(&w)?;
    let header = format!(
        "blendrig pose {}\nrig sha256 {}\ncoefficients sha256 {}",
        env!("CARGO_PKG_VERSION"),
        file_sha256(&a.rig)?,
        file_sha256(&a.coefficients)?
    );
    crate::output::write_bytes(&a.out, mesh.to_obj_string(Some(&header)).as_bytes())?;
    progress(g, format_args!("wrote {}", a.out.display()));
    Ok(())
}
