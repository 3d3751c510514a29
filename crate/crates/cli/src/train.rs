use std::fs;

use acn_core::data::Dataset;
use acn_core::trainer::{FitEvent, Trainer, TrainConfig};

use crate::manifest::{table_of, Recorder};
use crate::{claim_dir, out_dir, parse_shape, CliError, Outcome, Result, TrainArgs};

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Defaults, then the config file, then flags.
pub(crate) fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut table = table_of(&TrainConfig::new(a.mask));
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, file);
    }
    table.insert("mask".into(), a.mask.tokens().into());
    let mut set = |key: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            table.insert(key.into(), v);
        }
    };
    set("epoch_max", a.epochs.map(|v| (v as i64).into()));
    set("steps_per_epoch", a.steps_per_epoch.map(|v| (v as i64).into()));
    set("batch_size", a.batch_size.map(|v| (v as i64).into()));
    set("base_lr", a.lr.map(Into::into));
    set("seed", a.seed.map(|v| (v as i64).into()));
    set("eval_interval", a.eval_interval.map(|v| (v as i64).into()));
    if a.prefetch {
        set("prefetch", Some(true.into()));
    }
    let mut cfg = TrainConfig::from_toml(&toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?)?;
    if let Some(p) = &a.patch {
        cfg.patch_size = parse_shape(p)?;
        cfg.model.spatial_rank = cfg.patch_size.len();
    }
    if let Some(list) = &a.ablate {
        cfg.ablation = cfg.ablation.without(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn run(a: &TrainArgs, args: &[String]) -> Result<Outcome> {
    let rec = Recorder::start("train", args);
    let cfg = resolve_config(a)?;
    let data = Dataset::load_dir(&a.data)?;
    let rank = data.cases[0].volume.rank();
    if rank != cfg.model.spatial_rank {
        return Err(CliError::Config(format!(
            "dataset is {rank}-D but the model is {}-D; pass --patch with {rank} extents",
            cfg.model.spatial_rank
        )));
    }
    let dir = out_dir(&a.out, format!("runs/{}", cfg.mask.slug()));
    claim_dir(&dir, a.force)?;
    let (train, val) = data.split(cfg.val_fraction, cfg.seed);
    let spe = cfg.steps_per_epoch as u64;
    if !a.quiet {
        eprintln!(
            "training mask {} on {} cases ({} for validation), {} steps",
            cfg.mask,
            train.len(),
            val.len(),
            cfg.total_steps()
        );
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let quiet = a.quiet;
    trainer.fit(&train, &val, Some(&dir), |e| match e {
        FitEvent::Step(r) if !quiet && (r.step + 1) % spe == 0 => {
            eprintln!("epoch {:>4} lr {:.3e} {}", (r.step + 1) / spe, r.lr, r.losses);
        }
        FitEvent::Eval(r) if !quiet => eprintln!(
            "epoch {:>4} validation DSC ET {:.4} TC {:.4} WT {:.4} (mean {:.4})",
            r.epoch,
            r.et.dsc,
            r.tc.dsc,
            r.wt.dsc,
            r.mean_dsc()
        ),
        _ => {}
    })?;
    let outputs = vec!["best".into(), "last".into(), "metrics.csv".into()];
    rec.finish(&dir, table_of(&cfg), Some(cfg.seed), outputs)?;
    println!(
        "checkpoints in {} (best mean DSC {:.4})",
        dir.display(),
        trainer.best_mean_dsc().unwrap_or(f64::NAN)
    );
    Ok(Outcome::Complete)
}
