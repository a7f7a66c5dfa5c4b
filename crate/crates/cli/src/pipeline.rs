//! End-to-end run: template, training and holdout data, training, evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use blendrig_core::synth::{generate_dataset, make_template, write_dataset, Dataset};
use clap::Args;
use serde::Serialize;

use crate::commands::{
    eval_file, evaluate_checkpoint, load_config, load_prior, progress, save_rig,
    template_provenance, train_model, write_checkpoint, write_log,
};
use crate::config::{require_file, CliConfig};
use crate::output::{file_sha256, write_file_with, write_json, Provenance};
use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Directory receiving every artifact.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Artifact file names inside the output directory.
pub const TEMPLATE_MANIFEST: &str = "template/rig.json";
pub const TRAIN_DATA: &str = "train.jsonl";
pub const HOLDOUT_DATA: &str = "holdout.jsonl";
pub const CHECKPOINT: &str = "model.ckpt.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT: &str = "report.json";
pub const SUMMARY: &str = "pipeline.json";

#[derive(Debug, Serialize)]
struct Summary {
    kind: &'static str,
    provenance: serde_json::Value,
    /// SHA-256 of each artifact.
    artifacts: BTreeMap<&'static str, String>,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().with_context(|| format!("stage {name} failed"))
}

pub fn run_pipeline(g: &GlobalArgs, a: &PipelineArgs) -> Result<()> {
    let mut cfg: CliConfig = load_config(g, None)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(p) = &cfg.prior {
        require_file(p)?;
    }
    cfg.validate()?;
    let p = &cfg.pipeline;
    if p.train_samples == 0 || p.holdout_samples == 0 || p.holdout_identities == 0 {
        return Err(blendrig_core::Error::Config(
            "pipeline sample and identity counts must be positive".into(),
        )
        .into());
    }
    let prior = load_prior(cfg.prior.as_deref())?;
    let out = |rel: &str| a.out_dir.join(rel);
    let base_prov = || Provenance::new("pipeline", Some(cfg.seed), &cfg);

    let template = stage("gen-template", || {
        let rig = make_template(&cfg.template)?;
        save_rig(
            &rig,
            &out(TEMPLATE_MANIFEST),
            template_provenance(&cfg.template, &rig, None)?,
        )?;
        Ok(rig)
    })?;
    progress(g, "gen-template done");

    let generate = |name: &str,
                    n: u64,
                    opts: blendrig_core::synth::DatasetOptions,
                    path: &Path|
     -> Result<Dataset> {
        stage(name, || {
            let ds = generate_dataset(
                n,
                &template,
                &cfg.template,
                &prior,
                &cfg.camera,
                cfg.seed,
                &opts,
            )?;
            write_file_with(path, |tmp| write_dataset(&ds, tmp))?;
            Ok(ds)
        })
    };
    let train_opts = cfg.dataset.options();
    let holdout_opts = blendrig_core::synth::DatasetOptions {
        identities: p.holdout_identities,
        identity_offset: train_opts.identity_offset + train_opts.identities,
        sample_offset: train_opts.sample_offset + p.train_samples,
        ..train_opts.clone()
    };
    let train_data = generate(
        "gen-data (train)",
        p.train_samples,
        train_opts,
        &out(TRAIN_DATA),
    )?;
    let holdout = generate(
        "gen-data (holdout)",
        p.holdout_samples,
        holdout_opts,
        &out(HOLDOUT_DATA),
    )?;
    progress(g, "gen-data done");

    let trained = stage("train", || {
        let trained = train_model(
            g,
            &train_data,
            Some(&holdout),
            &cfg,
            base_prov()?,
            None,
            out(&format!("{CHECKPOINT}.last-good")),
        )?;
        write_checkpoint(&out(CHECKPOINT), &trained, cfg.train.steps)?;
        write_log(&out(TRAIN_LOG), &trained)?;
        Ok(trained)
    })?;
    progress(g, "train done");

    let file = stage("eval", || {
        let report = evaluate_checkpoint(
            &trained.params,
            Some(&trained.provenance),
            &holdout,
            None,
            &cfg.eval,
        )?;
        let file = eval_file(report, base_prov()?.to_value());
        write_json(&out(REPORT), &file)?;
        Ok(file)
    })?;
    if !g.quiet {
        print!("{}", file.table);
    }

    let mut artifacts = BTreeMap::new();
    for rel in [
        TEMPLATE_MANIFEST,
        TRAIN_DATA,
        HOLDOUT_DATA,
        CHECKPOINT,
        TRAIN_LOG,
        REPORT,
    ] {
        artifacts.insert(rel, file_sha256(&out(rel))?);
    }
    let summary = Summary {
        kind: "blendrig-pipeline",
        provenance: base_prov()?.to_value(),
        artifacts,
    };
    write_json(&out(SUMMARY), &summary)?;
    progress(g, format_args!("wrote {}", out(SUMMARY).display()));
    Ok(())
}
