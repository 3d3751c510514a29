use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use acn_core::autograd::{Array, Tensor};
use acn_core::data::nifti::{self, StoredType};
use acn_core::data::{load_brats_case, zscore_normalize, Case, SegmentationLabelMap};
use acn_core::losses::self_information;
use acn_core::trainer::{argmax_classes, Trainer};
use ndarray::{ArrayD, Axis, Ix2};

use crate::eval::resolve_checkpoint;
use crate::manifest::Recorder;
use crate::{out_dir, CliError, EntropyArgs, Outcome, Result};

/// Per-voxel entropy (nats) of `(C, *spatial)` probabilities.
fn entropy_map(probs: &Array) -> Result<Array> {
    let p = Tensor::new(probs.clone().insert_axis(Axis(0)));
    let h = self_information(&p)?.scalar_map.value().clone();
    Ok(h.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
}

fn write_png(path: &Path, gray: &ArrayD<u8>) -> Result<()> {
    let img = gray
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| CliError::Data(format!("cannot store shape {:?} as an image", gray.shape())))?;
    let (h, w) = img.dim();
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| CliError::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    let data: Vec<u8> = img.iter().copied().collect();
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Label value to gray level: 0, 1, 2, 4 spread over the 8-bit range.
fn label_gray(v: u8) -> u8 {
    match v {
        0 => 0,
        1 => 85,
        2 => 170,
        _ => 255,
    }
}

pub(crate) fn run(a: &EntropyArgs, args: &[String]) -> Result<Outcome> {
    let rec = Recorder::start("entropy-export", args);
    let ckpt = resolve_checkpoint(&a.ckpt)
        .ok_or_else(|| CliError::Data(format!("no checkpoint found at {}", a.ckpt.display())))?;
    let trainer = Trainer::load(&ckpt)?;
    let (volume, labels) = load_brats_case(&a.case)?;
    let id = a
        .case
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    let case = Case {
        id: id.clone(),
        volume: zscore_normalize(&volume),
        labels,
    };
    let pred = trainer.predict(&case)?;
    let dir = out_dir(&a.out, format!("entropy/{id}"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    let max_h = (trainer.config().model.num_classes as f64).ln();
    let planar = case.volume.rank() == 2;
    let spacing = case.volume.spacing();
    let mut outputs = Vec::new();
    let mut means = Vec::new();
    for (path, probs) in [("multi", &pred.multi), ("uni", &pred.uni)] {
        let h = entropy_map(probs)?;
        means.push(h.mean().unwrap_or(0.0));
        let seg = SegmentationLabelMap::from_classes(&argmax_classes(probs));
        if planar {
            let eg = h.mapv(|v| (255.0 * (v / max_h).clamp(0.0, 1.0)).round() as u8);
            let sg = seg.labels().mapv(label_gray);
            for (name, img) in [(format!("entropy_{path}.png"), eg), (format!("seg_{path}.png"), sg)] {
                write_png(&dir.join(&name), &img)?;
                outputs.push(name);
            }
        } else {
            let name = format!("entropy_{path}.nii.gz");
            nifti::write(&dir.join(&name), &h, spacing, StoredType::F32)?;
            outputs.push(name);
            let name = format!("seg_{path}.nii.gz");
            nifti::write(&dir.join(&name), &seg.labels().mapv(f64::from), spacing, StoredType::U8)?;
            outputs.push(name);
        }
    }
    let mut config = toml::Table::new();
    config.insert("ckpt".into(), ckpt.display().to_string().into());
    config.insert("case".into(), a.case.display().to_string().into());
    config.insert("mask".into(), trainer.config().mask.tokens().into());
    rec.finish(&dir, config, None, outputs)?;
    println!(
        "mean entropy multi {:.4} uni {:.4} nats (uniform {:.4}); maps in {}",
        means[0],
        means[1],
        max_h,
        dir.display()
    );
    Ok(Outcome::Complete)
}
