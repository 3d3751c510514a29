use std::path::{Path, PathBuf};

use acn_core::data::{enumerate_modality_subsets, Dataset, Modality, ModalityMask, Subregion};
use acn_core::trainer::{EvalReport, Trainer};

use crate::manifest::Recorder;
use crate::{out_dir, CliError, EvalArgs, Outcome, Result};

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_CASES_CSV: &str = "eval_cases.csv";

/// The checkpoint directory at `p`, or its `best/` or `last/` child.
pub fn resolve_checkpoint(p: &Path) -> Option<PathBuf> {
    [p.to_path_buf(), p.join("best"), p.join("last")]
        .into_iter()
        .find(|c| c.join("manifest.toml").is_file())
}

struct Row {
    mask: ModalityMask,
    report: Option<EvalReport>,
}

fn score(ckpt: &Path, data: &Dataset, mask: Option<&ModalityMask>) -> Result<(ModalityMask, EvalReport)> {
    let trainer = Trainer::load(ckpt)?;
    let mask = mask.copied().unwrap_or(trainer.config().mask);
    let report = trainer.evaluate(data, &mask)?;
    Ok((mask, report))
}

fn marks(mask: &ModalityMask) -> String {
    Modality::ALL
        .iter()
        .map(|&m| format!("{:<4}", if mask.contains(m) { "●" } else { "○" }))
        .collect()
}

fn print_table(rows: &[Row]) {
    println!(
        "{:>3}  {:<16}|{:>8}{:>8}{:>8} |{:>8}{:>8}{:>8}",
        "id", "Fl  T1  T1c T2", "ET DSC", "TC DSC", "WT DSC", "ET HD95", "TC HD95", "WT HD95"
    );
    for row in rows {
        let head = format!("{:>3}  {}", row.mask.subset_id(), marks(&row.mask));
        match &row.report {
            Some(r) => {
                let [et, tc, wt] = r.mean;
                println!(
                    "{head}|{:>8.4}{:>8.4}{:>8.4} |{:>8.2}{:>8.2}{:>8.2}",
                    et.dsc, tc.dsc, wt.dsc, et.hd95, tc.hd95, wt.hd95
                );
            }
            None => println!("{head}|{:>24} |", "absent"),
        }
    }
}

fn csv_err(p: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", p.display()))
}

fn write_csvs(dir: &Path, rows: &[Row]) -> Result<()> {
    let path = dir.join(EVAL_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record([
        "subset_id", "mask", "status", "et_dsc", "tc_dsc", "wt_dsc", "et_hd95", "tc_hd95", "wt_hd95", "hd95_sentinel",
    ])
    .map_err(csv_err(&path))?;
    for row in rows {
        let mut rec = vec![row.mask.subset_id().to_string(), row.mask.tokens()];
        match &row.report {
            Some(r) => {
                rec.push("ok".into());
                rec.extend(r.mean.iter().map(|m| m.dsc.to_string()));
                rec.extend(r.mean.iter().map(|m| m.hd95.to_string()));
                rec.push(r.mean.iter().any(|m| m.hd95_sentinel).to_string());
            }
            None => {
                rec.push("absent".into());
                rec.extend(std::iter::repeat_n(String::new(), 7));
            }
        }
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = dir.join(EVAL_CASES_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["subset_id", "mask", "case", "subregion", "dsc", "hd95", "hd95_sentinel"])
        .map_err(csv_err(&path))?;
    for row in rows {
        let Some(report) = &row.report else { continue };
        for case in &report.cases {
            for r in Subregion::ALL {
                let m = case.get(r);
                w.write_record([
                    row.mask.subset_id().to_string(),
                    row.mask.tokens(),
                    case.id.clone(),
                    r.name().to_string(),
                    m.dsc.to_string(),
                    m.hd95.to_string(),
                    m.hd95_sentinel.to_string(),
                ])
                .map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

pub(crate) fn run(a: &EvalArgs, args: &[String]) -> Result<Outcome> {
    let rec = Recorder::start("eval", args);
    if a.all_subsets && a.mask.is_some() {
        return Err(CliError::Config("--mask cannot be combined with --all-subsets".into()));
    }
    let data = Dataset::load_dir(&a.data)?;
    let mut rows = Vec::new();
    if a.all_subsets {
        for mask in enumerate_modality_subsets() {
            let report = match resolve_checkpoint(&a.ckpt.join(mask.slug())) {
                Some(ckpt) => Some(score(&ckpt, &data, Some(&mask))?.1),
                None => None,
            };
            rows.push(Row { mask, report });
        }
    } else {
        let ckpt = resolve_checkpoint(&a.ckpt)
            .ok_or_else(|| CliError::Data(format!("no checkpoint found at {}", a.ckpt.display())))?;
        let (mask, report) = score(&ckpt, &data, a.mask.as_ref())?;
        rows.push(Row {
            mask,
            report: Some(report),
        });
    }
    let dir = out_dir(&a.out, "eval");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_csvs(&dir, &rows)?;
    print_table(&rows);
    let absent = rows.iter().filter(|r| r.report.is_none()).count();
    let mut config = toml::Table::new();
    config.insert("ckpt".into(), a.ckpt.display().to_string().into());
    config.insert("data".into(), a.data.display().to_string().into());
    config.insert("all_subsets".into(), a.all_subsets.into());
    config.insert("cases".into(), (data.len() as i64).into());
    config.insert("rows".into(), (rows.len() as i64).into());
    config.insert("absent".into(), (absent as i64).into());
    rec.finish(&dir, config, None, vec![EVAL_CSV.into(), EVAL_CASES_CSV.into()])?;
    if absent > 0 {
        eprintln!("{absent} of {} subsets have no checkpoint", rows.len());
        Ok(Outcome::Partial)
    } else {
        Ok(Outcome::Complete)
    }
}
