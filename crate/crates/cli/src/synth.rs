use acn_core::data::{dataset_hash, write_synthetic_dataset, SynthConfig};
use acn_core::trainer::ModelConfig;

use crate::manifest::{table_of, Recorder};
use crate::{claim_dir, fmt_shape, out_dir, parse_shape, Outcome, Result, SynthArgs};

/// Extent every training patch must be a multiple of under the default
/// model: the encoder halves `levels - 1` times and the entropy
/// discriminator once per layer.
pub(crate) fn patch_factor(model: &ModelConfig) -> usize {
    model.backbone(1).divisor().max(1 << model.d_en_widths.len())
}

pub(crate) fn run(a: &SynthArgs, args: &[String]) -> Result<Outcome> {
    let rec = Recorder::start("synth", args);
    let shape = parse_shape(&a.shape)?;
    let dir = out_dir(&a.out, "data");
    let factor = patch_factor(&ModelConfig::default());
    if let Some(axis) = shape.iter().position(|n| n % factor != 0) {
        eprintln!(
            "warning: shape {} is not divisible by {factor} along axis {axis}; training patches must be \
             multiples of {factor} (encoder and discriminator downsampling), so pass a smaller --patch to train",
            fmt_shape(&shape)
        );
    }
    claim_dir(&dir, a.force)?;
    let cfg = SynthConfig {
        spatial_shape: shape.clone(),
        ..SynthConfig::default()
    };
    let m = write_synthetic_dataset(&dir, &cfg, a.cases, a.seed)?;
    let mut config = toml::Table::new();
    config.insert("cases".into(), (a.cases as i64).into());
    config.insert("shape".into(), fmt_shape(&shape).into());
    config.insert("synth".into(), table_of(&cfg).into());
    let outputs = m.cases.iter().map(|c| c.id.clone()).chain(["dataset.toml".to_string()]).collect();
    rec.finish(&dir, config, Some(a.seed), outputs)?;
    println!(
        "wrote {} cases of shape {} to {} (hash {})",
        a.cases,
        fmt_shape(&shape),
        dir.display(),
        dataset_hash(&dir)?
    );
    Ok(Outcome::Complete)
}
